use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DataError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub code: String,
    pub display_name: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelTaxonomy {
    pub name: String,
    pub classes: Vec<ClassInfo>,
}

const PTBXL5: [(&str, &str); 5] = [
    ("NORM", "normal ECG"),
    ("MI", "myocardial infarction"),
    ("STTC", "ST/T change"),
    ("CD", "conduction disturbance"),
    ("HYP", "hypertrophy"),
];

const CPSC9: [(&str, &str); 9] = [
    ("Normal", "normal"),
    ("AF", "atrial fibrillation"),
    ("I-AVB", "first-degree atrioventricular block"),
    ("LBBB", "left bundle branch block"),
    ("RBBB", "right bundle branch block"),
    ("PAC", "premature atrial contraction"),
    ("PVC", "premature ventricular contraction"),
    ("STD", "ST-segment depression"),
    ("STE", "ST-segment elevation"),
];

impl LabelTaxonomy {
    /// PTB-XL diagnostic superclasses.
    pub fn ptbxl5() -> Self {
        Self::from_pairs("ptbxl5", &PTBXL5).expect("static taxonomy")
    }

    /// CPSC2018 rhythm/morphology classes.
    pub fn cpsc9() -> Self {
        Self::from_pairs("cpsc9", &CPSC9).expect("static taxonomy")
    }

    pub fn custom(name: impl Into<String>, classes: Vec<ClassInfo>) -> Result<Self, DataError> {
        if classes.is_empty() {
            return Err(DataError::Schema("taxonomy has no classes".into()));
        }
        for (i, c) in classes.iter().enumerate() {
            if classes[..i].iter().any(|o| o.code == c.code) {
                return Err(DataError::Schema(format!("duplicate class code {}", c.code)));
            }
        }
        Ok(Self {
            name: name.into(),
            classes,
        })
    }

    fn from_pairs(name: &str, pairs: &[(&str, &str)]) -> Result<Self, DataError> {
        Self::custom(
            name,
            pairs
                .iter()
                .map(|(c, d)| ClassInfo {
                    code: c.to_string(),
                    display_name: d.to_string(),
                })
                .collect(),
        )
    }

    /// `ptbxl5`, `cpsc9`, or a file of `CODE<TAB>display name` lines.
    pub fn resolve(spec: &str) -> Result<Self, DataError> {
        match spec {
            "ptbxl5" => Ok(Self::ptbxl5()),
            "cpsc9" => Ok(Self::cpsc9()),
            path => Self::load(Path::new(path)),
        }
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        let mut classes = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (code, name) = line.split_once('\t').ok_or_else(|| DataError::Parse {
                line: n + 1,
                message: "expected CODE<TAB>display name".into(),
            })?;
            classes.push(ClassInfo {
                code: code.trim().to_string(),
                display_name: name.trim().to_string(),
            });
        }
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "custom".into());
        Self::custom(name, classes)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn codes(&self) -> Vec<&str> {
        self.classes.iter().map(|c| c.code.as_str()).collect()
    }
}

pub const DEFAULT_TEMPLATE: &str = "this ECG indicates {disease}";
const SLOT: &str = "{disease}";

/// One rendered prompt per class.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PromptSet {
    pub template: String,
    pub taxonomy: LabelTaxonomy,
    pub rendered: Vec<String>,
}

impl PromptSet {
    pub fn new(template: &str, taxonomy: LabelTaxonomy) -> Result<Self, DataError> {
        if template.matches(SLOT).count() != 1 {
            return Err(DataError::Schema(format!(
                "prompt template must contain exactly one {SLOT} slot: {template:?}"
            )));
        }
        let rendered = taxonomy
            .classes
            .iter()
            .map(|c| template.replace(SLOT, &c.display_name))
            .collect();
        Ok(Self {
            template: template.to_string(),
            taxonomy,
            rendered,
        })
    }

    pub fn default_for(taxonomy: LabelTaxonomy) -> Self {
        Self::new(DEFAULT_TEMPLATE, taxonomy).expect("default template is valid")
    }

    /// Reads a template file of `taxonomy = template` lines (`*` matches any
    /// taxonomy, `#` starts a comment) and renders the entry for `taxonomy`.
    pub fn from_template_file(path: &Path, taxonomy: LabelTaxonomy) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        let mut fallback = None;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, template) = line.split_once('=').ok_or_else(|| DataError::Parse {
                line: n + 1,
                message: "expected `taxonomy = template`".into(),
            })?;
            let (key, template) = (key.trim(), template.trim());
            if key == taxonomy.name {
                return Self::new(template, taxonomy);
            }
            if key == "*" {
                fallback.get_or_insert_with(|| template.to_string());
            }
        }
        match fallback {
            Some(t) => Self::new(&t, taxonomy),
            None => Err(DataError::Lookup(format!(
                "no prompt template for taxonomy {} in {}",
                taxonomy.name,
                path.display()
            ))),
        }
    }
}
