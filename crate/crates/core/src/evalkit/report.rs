use std::fmt::Write as _;

use super::{LinearProbeResult, ZeroShotResult};

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{:.1}", 100.0 * x))
}

impl ZeroShotResult {
    /// One row per class plus an "Average" row, values ×100.
    pub fn table(&self, title: &str) -> String {
        let width = self
            .per_class
            .iter()
            .map(|c| c.code.len())
            .chain(["Average".len(), "Class".len()])
            .max()
            .unwrap_or(7);
        let mut out = String::new();
        writeln!(out, "{title}").unwrap();
        writeln!(out, "{:<width$}  {:>6}  {:>6}  {:>6}", "Class", "AUC", "ACC", "F1").unwrap();
        for c in &self.per_class {
            writeln!(out, "{:<width$}  {:>6}  {:>6}  {:>6}", c.code, pct(c.auc), pct(c.acc), pct(c.f1)).unwrap();
        }
        let a = &self.average;
        writeln!(out, "{:<width$}  {:>6}  {:>6}  {:>6}", "Average", pct(a.auc), pct(a.acc), pct(a.f1)).unwrap();
        out
    }
}

impl LinearProbeResult {
    pub fn table(&self, title: &str) -> String {
        let mut out = String::new();
        writeln!(out, "{title}").unwrap();
        writeln!(out, "{:<8}  {:>6}", "Metric", "Value").unwrap();
        writeln!(out, "{:<8}  {:>6}", "AUC", pct(Some(self.auc))).unwrap();
        writeln!(out, "{:<8}  {:>6}", "F1", pct(Some(self.f1))).unwrap();
        out
    }
}
