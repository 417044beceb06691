use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use etp_core::data::{
    generate_synthetic, load_jsonl_counting, save_jsonl, split as split_records, EcgRecord, ExternalEmbeddingTable, LabelTaxonomy,
    PromptSet, SplitSpec,
};
use etp_core::evalkit::{linear_probe, zero_shot_classify, ProbeConfig};
use etp_core::nets::{EtpModel, TextBackbone};
use etp_core::trainer::{build_model, checkpoint_digest, load_checkpoint, save_checkpoint, Objective, TrainError, TrainState};
use serde_json::json;

use crate::config::{model_mismatch, RunConfig};
use crate::{CliError, ConfigArgs, PretrainArgs};

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} not found: {}", path.display())))
    }
}

fn load_records(path: &Path) -> Result<Vec<EcgRecord>, CliError> {
    require_file(path, "data file")?;
    let (records, dropped) = load_jsonl_counting(path).map_err(usage)?;
    if dropped > 0 {
        eprintln!("{}: dropped {dropped} multi-label records", path.display());
    }
    if records.is_empty() {
        return Err(CliError::Usage(format!("{} holds no records", path.display())));
    }
    Ok(records)
}

fn load_table(path: Option<&Path>) -> Result<Option<ExternalEmbeddingTable>, CliError> {
    path.map(|p| {
        require_file(p, "embedding table")?;
        ExternalEmbeddingTable::load(p).map_err(usage)
    })
    .transpose()
}

fn taxonomy(spec: &str) -> Result<LabelTaxonomy, CliError> {
    LabelTaxonomy::resolve(spec).map_err(|e| CliError::Usage(format!("taxonomy {spec:?}: {e}")))
}

fn create_dir(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn pretty(v: &serde_json::Value) -> String {
    serde_json::to_string_pretty(v).expect("json value") + "\n"
}

fn has_config(args: &ConfigArgs) -> bool {
    args.config.is_some() || !args.overrides.is_empty()
}

fn check_labels(records: &[EcgRecord], tax: &LabelTaxonomy, path: &Path) -> Result<(), CliError> {
    for r in records {
        r.validate(Some(tax.len()))
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

pub fn gen_data(n: usize, tax: &str, length: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    let tax = taxonomy(tax)?;
    let records = generate_synthetic(n, &tax, length, seed).map_err(usage)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_jsonl(&records, out).map_err(runtime)?;
    let mut counts = vec![0usize; tax.len()];
    for r in &records {
        counts[r.label.expect("generated records are labelled")] += 1;
    }
    for (c, k) in tax.classes.iter().zip(counts) {
        println!("{}\t{k}", c.code);
    }
    Ok(())
}

pub fn split(data: &Path, fractions: (f64, f64, f64), seed: u64, out: &Path) -> Result<(), CliError> {
    let records = load_records(data)?;
    let (train, val, test) = fractions;
    let parts = split_records(&records, &SplitSpec::Fractions { train, val, test, seed }).map_err(usage)?;
    create_dir(out)?;
    for (name, part) in [("train", &parts.train), ("val", &parts.val), ("test", &parts.test)] {
        save_jsonl(part, &out.join(format!("{name}.jsonl"))).map_err(runtime)?;
        println!("{name}\t{}", part.len());
    }
    Ok(())
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::Config(_) | TrainError::Data(_) => usage(e),
        _ => runtime(e),
    }
}

/// Training config fields that must be unchanged when resuming.
fn fixed_part(cfg: &etp_core::trainer::TrainConfig) -> etp_core::trainer::TrainConfig {
    let mut c = cfg.clone();
    c.epochs = 0;
    c.checkpoint_every = 0;
    c
}

pub fn pretrain(objective: Objective, args: &PretrainArgs, threads: usize) -> Result<(), CliError> {
    let mut run = RunConfig::resolve(args.config.config.as_deref(), &args.config.overrides)?;
    run.train.objective = objective;
    let records = load_records(&args.data)?;
    let table = load_table(args.text_embeddings.as_deref())?;
    if objective == Objective::Etp && matches!(run.model.text_backbone, TextBackbone::External { .. }) && table.is_none() {
        return Err(CliError::Usage("model.text_backbone = external needs --text-embeddings".into()));
    }

    let mut state = match &args.resume {
        Some(path) => {
            require_file(path, "checkpoint")?;
            let mut state = load_checkpoint(path).map_err(usage)?;
            if state.config.objective != objective {
                return Err(CliError::Usage(format!("{} was trained with another objective", path.display())));
            }
            if has_config(&args.config) {
                if fixed_part(&state.config) != fixed_part(&run.train) {
                    return Err(CliError::Usage("resumed run must keep the checkpoint's training config apart from epochs".into()));
                }
                if let Some(msg) = model_mismatch(&state.model.config, &run.model) {
                    return Err(CliError::Usage(msg));
                }
                state.config.epochs = run.train.epochs;
                state.config.checkpoint_every = run.train.checkpoint_every;
            }
            state
        }
        None => {
            let model = build_model(run.model.clone(), &records, run.train.seed).map_err(train_error)?;
            TrainState::new(run.train.clone(), model).map_err(train_error)?
        }
    };
    state.threads = threads;
    run.train = state.config.clone();
    run.model = state.model.config.clone();

    create_dir(&args.out)?;
    let echo = json!({
        "command": match objective { Objective::Etp => "pretrain", Objective::Ssl => "pretrain-ssl" },
        "data": args.data.display().to_string(),
        "resumed_from_epoch": state.epochs_done,
        "config": run.pairs(),
    });
    write(&args.out.join("run.json"), pretty(&echo))?;

    let ckpt = args.out.join("ckpt.etpc");
    let log_path = args.out.join("log.jsonl");
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(args.resume.is_some())
        .truncate(args.resume.is_none())
        .open(&log_path)
        .map_err(|e| CliError::Runtime(format!("cannot open {}: {e}", log_path.display())))?;
    let every = state.config.checkpoint_every;
    let result = state.train(&records, table.as_ref(), |s, entry| {
        let line = serde_json::to_string(entry).expect("epoch log");
        writeln!(log, "{line}").map_err(|e| TrainError::Config(format!("cannot write {}: {e}", log_path.display())))?;
        eprintln!("epoch {:>3}  loss {:.4}  {:.1}s", entry.epoch, entry.mean_loss, entry.wall_clock_s);
        if every > 0 && entry.epoch % every == 0 {
            save_checkpoint(s, &ckpt)?;
        }
        Ok(())
    });
    if let Err(e) = result {
        return Err(match e {
            TrainError::Diverged(_) => CliError::Runtime(format!("{e}; last good checkpoint (if any) left at {}", ckpt.display())),
            other => train_error(other),
        });
    }
    save_checkpoint(&state, &ckpt).map_err(runtime)?;
    println!("{}", checkpoint_digest(&state));
    Ok(())
}

/// Loads a checkpoint or builds a fresh seeded model (`random`).
fn model_for(checkpoint: &str, config: &ConfigArgs, records: &[EcgRecord]) -> Result<(EtpModel<f32>, String), CliError> {
    if checkpoint == "random" {
        let run = RunConfig::resolve(config.config.as_deref(), &config.overrides)?;
        let model = build_model(run.model, records, run.train.seed).map_err(train_error)?;
        let hash = format!("random:{}", model.params.digest(""));
        return Ok((model, hash));
    }
    let path = Path::new(checkpoint);
    require_file(path, "checkpoint")?;
    let state = load_checkpoint(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    if has_config(config) {
        let run = RunConfig::resolve(config.config.as_deref(), &config.overrides)?;
        if let Some(msg) = model_mismatch(&state.model.config, &run.model) {
            return Err(CliError::Usage(msg));
        }
    }
    let hash = checkpoint_digest(&state);
    Ok((state.model, hash))
}

fn write_reports(out: &Path, report: &serde_json::Value, table: &str) -> Result<(), CliError> {
    create_dir(out)?;
    write(&out.join("report.json"), pretty(report))?;
    write(&out.join("report.txt"), table)?;
    print!("{table}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn zeroshot(
    checkpoint: &str,
    data: &Path,
    tax: &str,
    prompts: Option<&Path>,
    text_embeddings: Option<&Path>,
    config: &ConfigArgs,
    out: &Path,
) -> Result<(), CliError> {
    let tax = taxonomy(tax)?;
    let records = load_records(data)?;
    check_labels(&records, &tax, data)?;
    let prompt_set = match prompts {
        Some(p) => {
            require_file(p, "prompt file")?;
            PromptSet::from_template_file(p, tax.clone()).map_err(usage)?
        }
        None => PromptSet::default_for(tax.clone()),
    };
    let table = load_table(text_embeddings)?;
    let (model, hash) = model_for(checkpoint, config, &records)?;
    if matches!(model.config.text_backbone, TextBackbone::External { .. }) && table.is_none() {
        return Err(CliError::Usage("model uses external text embeddings; pass --text-embeddings with one vector per class code".into()));
    }
    let result = zero_shot_classify(&model, &prompt_set, &records, table.as_ref()).map_err(usage)?;
    let report = json!({
        "command": "zeroshot",
        "checkpoint_hash": hash,
        "model": model.config,
        "taxonomy": tax.name,
        "template": prompt_set.template,
        "prompts": prompt_set.rendered,
        "records": records.len(),
        "result": result,
    });
    let title = format!("Zero-shot ({}, {} records)", tax.name, records.len());
    write_reports(out, &report, &result.table(&title))
}

pub fn linear_eval(
    checkpoint: &str,
    train: &Path,
    test: &Path,
    tax: &str,
    probe: &ProbeConfig,
    config: &ConfigArgs,
    out: &Path,
) -> Result<(), CliError> {
    let tax = taxonomy(tax)?;
    probe.validate().map_err(usage)?;
    let train_records = load_records(train)?;
    let test_records = load_records(test)?;
    check_labels(&train_records, &tax, train)?;
    check_labels(&test_records, &tax, test)?;
    let (model, hash) = model_for(checkpoint, config, &train_records)?;
    let result = linear_probe(&model, &train_records, &test_records, tax.len(), probe).map_err(usage)?;
    let report = json!({
        "command": "linear-eval",
        "checkpoint_hash": hash,
        "model": model.config,
        "taxonomy": tax.name,
        "probe": probe,
        "train_records": train_records.len(),
        "test_records": test_records.len(),
        "result": result,
    });
    let title = format!("Linear probe ({}, {} test records)", tax.name, test_records.len());
    write_reports(out, &report, &result.table(&title))
}
