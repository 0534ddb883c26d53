//! Command-line surface: data generation, fine-tuning, instrumented
//! unlearning runs, evaluation with UWC mixing, sweeps, plots, and token
//! reports.
//!
//! Exit codes: 0 success, 2 usage/validation, 3 numeric failure, 4 missing
//! artifact. Setting GEFFECT_REFERENCE_MODE=1 allows re-running into a
//! completed run directory (everything is single-threaded and seeded, so a
//! re-run reproduces identical artifacts).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use geffect_lab::corpus::{self, QARecord, Split, Tokenizer};
use geffect_lab::error::{LabError, Result};
use geffect_lab::geffect;
use geffect_lab::model::{self, ModelConfig, ModelState};
use geffect_lab::objectives::{
    self, ObjectiveKind, ObjectiveSpec, RegKind, RunContext, TokenWeightTrace,
};
use geffect_lab::unlearner::{self, EncodedSplits, RunConfig, TrainLogRow};
use geffect_lab::{evalsuite, plot};

#[derive(Parser)]
#[command(name = "geffect-lab", version, about = "Desk-scale unlearning laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic QA corpus with split assignment.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        profiles: usize,
        #[arg(long, default_value_t = 5)]
        qa_per_profile: usize,
        #[arg(long, default_value_t = 0.05)]
        forget_fraction: f64,
        #[arg(long, default_value_t = 20)]
        retain_eval_count: usize,
        /// Output JSONL file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train θ_o on the full corpus (retain + forget).
    Finetune {
        #[arg(long)]
        data: PathBuf,
        /// Run-config TOML; defaults to the fine-tuning preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 48)]
        d_model: usize,
        #[arg(long, default_value_t = 3)]
        n_layers: usize,
        #[arg(long, default_value_t = 4)]
        n_heads: usize,
        #[arg(long, default_value_t = 64)]
        context_len: usize,
        #[arg(long, default_value_t = 1)]
        model_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the gold model from scratch without the forget records.
    Gold {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 48)]
        d_model: usize,
        #[arg(long, default_value_t = 3)]
        n_layers: usize,
        #[arg(long, default_value_t = 4)]
        n_heads: usize,
        #[arg(long, default_value_t = 64)]
        context_len: usize,
        #[arg(long, default_value_t = 1)]
        model_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an instrumented unlearning objective from θ_o.
    Unlearn {
        #[arg(long)]
        theta_o: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// ga | wga | npo | tnpo | wtnpo | po | rmu
        #[arg(long)]
        objective: String,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        c: Option<f64>,
        /// RMU hidden-layer tap (1-based); defaults to the middle layer.
        #[arg(long)]
        tap_layer: Option<usize>,
        /// none | gd | kl | rr
        #[arg(long)]
        reg: Option<String>,
        #[arg(long)]
        reg_tap_layer: Option<usize>,
        #[arg(long)]
        reg_weight: Option<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a model against the gold model, with UWC mixing when θ_o
    /// is supplied.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        /// Pre-unlearning checkpoint; enables UWC interpolation.
        #[arg(long)]
        theta_o: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.10)]
        uwc_max_drop: f64,
        /// Include per-record rows in eval.json.
        #[arg(long, default_value_t = false)]
        per_record: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-product hyperparameter sweep driven by a TOML grid file.
    Sweep {
        #[arg(long)]
        grid_file: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the standard figure set for a finished run.
    Plot {
        #[arg(long)]
        run: PathBuf,
        /// Defaults to <run>/plots.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit per-token objective weights for one epoch of a run.
    TokenReport {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        epoch: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

// ---------------------------------------------------------------------------
// manifest and plumbing
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    run_id: String,
    command: String,
    config_path: String,
    corpus_sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    spec: Option<ObjectiveSpec>,
    artifacts: BTreeMap<String, String>,
    created_unix: u64,
    completed_unix: u64,
}

fn reference_mode() -> bool {
    std::env::var("GEFFECT_REFERENCE_MODE").map(|v| v == "1").unwrap_or(false)
}

fn now_unix() -> u64 {
    if reference_mode() {
        return 0;
    }
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Refuse completed run directories unless reference mode re-runs them.
fn ensure_fresh_run(out: &Path) -> Result<()> {
    if out.join("manifest.json").exists() && !reference_mode() {
        return Err(LabError::InvalidArgument(format!(
            "{} already holds a completed run; use a fresh --out or set GEFFECT_REFERENCE_MODE=1 to reproduce it",
            out.display()
        )));
    }
    std::fs::create_dir_all(out)?;
    Ok(())
}

fn write_manifest(out: &Path, manifest: &RunManifest) -> Result<()> {
    for rel in manifest.artifacts.values() {
        let p = out.join(rel);
        if !p.exists() {
            return Err(LabError::Internal(format!(
                "manifest references missing artifact {}",
                p.display()
            )));
        }
    }
    let file = std::fs::File::create(out.join("manifest.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), manifest)?;
    Ok(())
}

fn run_id_for(out: &Path) -> String {
    out.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".to_string())
}

struct DataBundle {
    records: Vec<QARecord>,
    tok: Tokenizer,
    sha: String,
}

fn load_data(path: &Path) -> Result<DataBundle> {
    let records = corpus::read_jsonl(path)?;
    let tok = corpus::build_tokenizer(&records)?;
    let sha = corpus::file_sha256(path)?;
    Ok(DataBundle { records, tok, sha })
}

fn encoded_splits(tok: &Tokenizer, records: &[QARecord]) -> Result<EncodedSplits> {
    let mut splits = EncodedSplits {
        forget: Vec::new(),
        retain_train: Vec::new(),
        retain_eval: Vec::new(),
    };
    for rec in records {
        let ex = corpus::encode(tok, rec, false)?;
        match rec.split {
            Split::Forget => splits.forget.push((rec.id.clone(), ex)),
            Split::RetainTrain => splits.retain_train.push(ex),
            Split::RetainEval => splits.retain_eval.push(ex),
        }
    }
    Ok(splits)
}

fn write_train_log(path: &Path, rows: &[TrainLogRow]) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "epoch,step,lr,loss")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.epoch, r.step, r.lr, r.loss)?;
    }
    Ok(())
}

fn write_train_ids(path: &Path, ids: &[&str]) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for id in ids {
        writeln!(w, "{id}")?;
    }
    Ok(())
}

fn load_run_config(path: Option<&Path>, default: RunConfig) -> Result<RunConfig> {
    match path {
        Some(p) => {
            if !p.exists() {
                return Err(LabError::MissingArtifact(p.display().to_string()));
            }
            RunConfig::from_toml(&std::fs::read_to_string(p)?)
        }
        None => Ok(default),
    }
}

fn parse_objective(name: &str) -> Result<ObjectiveKind> {
    match name {
        "ga" => Ok(ObjectiveKind::Ga),
        "wga" => Ok(ObjectiveKind::Wga),
        "npo" => Ok(ObjectiveKind::Npo),
        "tnpo" => Ok(ObjectiveKind::Tnpo),
        "wtnpo" => Ok(ObjectiveKind::Wtnpo),
        "po" => Ok(ObjectiveKind::Po),
        "rmu" => Ok(ObjectiveKind::Rmu),
        other => Err(LabError::InvalidArgument(format!(
            "unknown objective '{other}' (expected ga|wga|npo|tnpo|wtnpo|po|rmu)"
        ))),
    }
}

fn parse_reg(name: &str) -> Result<RegKind> {
    match name {
        "none" => Ok(RegKind::None),
        "gd" => Ok(RegKind::Gd),
        "kl" => Ok(RegKind::Kl),
        "rr" => Ok(RegKind::Rr),
        other => Err(LabError::InvalidArgument(format!(
            "unknown regularizer '{other}' (expected none|gd|kl|rr)"
        ))),
    }
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

fn cmd_gen_data(
    seed: u64,
    profiles: usize,
    qa_per_profile: usize,
    forget_fraction: f64,
    retain_eval_count: usize,
    out: &Path,
) -> Result<()> {
    let records = corpus::generate_corpus(seed, profiles, qa_per_profile)?;
    let records = corpus::split_corpus(&records, forget_fraction, retain_eval_count)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    corpus::write_jsonl(out, &records)?;
    let count = |s: Split| corpus::by_split(&records, s).len();
    println!(
        "wrote {} records to {} (forget {}, retain_train {}, retain_eval {})",
        records.len(),
        out.display(),
        count(Split::Forget),
        count(Split::RetainTrain),
        count(Split::RetainEval),
    );
    println!("sha256 {}", corpus::file_sha256(out)?);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    gold_only: bool,
    data: &Path,
    config: Option<&Path>,
    d_model: usize,
    n_layers: usize,
    n_heads: usize,
    context_len: usize,
    model_seed: u64,
    out: &Path,
) -> Result<()> {
    ensure_fresh_run(out)?;
    let created = now_unix();
    let bundle = load_data(data)?;
    let cfg = load_run_config(config, RunConfig::finetune_default())?;

    let train_records: Vec<&QARecord> = if gold_only {
        bundle
            .records
            .iter()
            .filter(|r| r.split != Split::Forget)
            .collect()
    } else {
        bundle.records.iter().collect()
    };
    if train_records.is_empty() {
        return Err(LabError::InvalidArgument("no training records".into()));
    }
    let examples = train_records
        .iter()
        .map(|r| corpus::encode(&bundle.tok, r, false))
        .collect::<Result<Vec<_>>>()?;

    let model_cfg = ModelConfig {
        vocab_size: bundle.tok.vocab_size(),
        d_model,
        n_layers,
        n_heads,
        context_len,
        seed: model_seed,
    };
    let init = ModelState::<f64>::init(model_cfg)?;
    let (trained, log) = unlearner::finetune(&init, &examples, &cfg)?;

    let ckpt_name = if gold_only { "gold.json" } else { "theta_o.json" };
    model::save_checkpoint(&trained, &out.join(ckpt_name))?;
    write_train_log(&out.join("train_log.csv"), &log)?;
    let ids: Vec<&str> = train_records.iter().map(|r| r.id.as_str()).collect();
    write_train_ids(&out.join("train_ids.txt"), &ids)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;

    let mut artifacts = BTreeMap::new();
    artifacts.insert("checkpoint".to_string(), ckpt_name.to_string());
    artifacts.insert("train_log".to_string(), "train_log.csv".to_string());
    artifacts.insert("train_ids".to_string(), "train_ids.txt".to_string());
    artifacts.insert("config".to_string(), "config.toml".to_string());
    write_manifest(
        out,
        &RunManifest {
            run_id: run_id_for(out),
            command: if gold_only { "gold" } else { "finetune" }.to_string(),
            config_path: config.map(|p| p.display().to_string()).unwrap_or_default(),
            corpus_sha256: bundle.sha,
            spec: None,
            artifacts,
            created_unix: created,
            completed_unix: now_unix(),
        },
    )?;
    println!(
        "trained on {} records for {} epochs; final loss {:.6}; wrote {}",
        examples.len(),
        cfg.epochs,
        log.last().map(|r| r.loss).unwrap_or(f64::NAN),
        out.join(ckpt_name).display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn build_spec(
    objective: &str,
    alpha: Option<f64>,
    beta: Option<f64>,
    c: Option<f64>,
    tap_layer: Option<usize>,
    reg: Option<&str>,
    reg_tap_layer: Option<usize>,
    reg_weight: Option<f64>,
    n_layers: usize,
) -> Result<ObjectiveSpec> {
    let kind = parse_objective(objective)?;
    let needs_beta = matches!(
        kind,
        ObjectiveKind::Npo | ObjectiveKind::Tnpo | ObjectiveKind::Wtnpo
    );
    if needs_beta && beta.is_none() {
        return Err(LabError::InvalidArgument(format!(
            "--beta is required for objective '{objective}'"
        )));
    }
    let middle = n_layers.div_ceil(2).max(1);
    let mut spec = ObjectiveSpec::plain(kind);
    spec.alpha = alpha.unwrap_or(spec.alpha);
    spec.beta = beta.unwrap_or(spec.beta);
    if kind == ObjectiveKind::Rmu {
        spec.c = c.unwrap_or(10.0);
        spec.tap_layer = tap_layer.unwrap_or(middle);
    } else {
        spec.c = c.unwrap_or(spec.c);
        spec.tap_layer = tap_layer.unwrap_or(spec.tap_layer);
    }
    spec.regularizer = match reg {
        Some(name) => parse_reg(name)?,
        None => RegKind::None,
    };
    if spec.regularizer == RegKind::Rr {
        spec.reg_tap_layer = reg_tap_layer.unwrap_or(middle);
    } else {
        spec.reg_tap_layer = reg_tap_layer.unwrap_or(0);
    }
    spec.reg_weight = reg_weight.unwrap_or(1.0);
    spec.validate(n_layers)?;
    Ok(spec)
}

fn run_unlearn_to_dir(
    theta_o: &ModelState<f64>,
    spec: &ObjectiveSpec,
    bundle: &DataBundle,
    cfg: &RunConfig,
    out: &Path,
    config_path: &str,
) -> Result<Option<usize>> {
    ensure_fresh_run(out)?;
    let created = now_unix();
    let splits = encoded_splits(&bundle.tok, &bundle.records)?;
    if bundle.tok.vocab_size() != theta_o.config.vocab_size {
        return Err(LabError::InvalidArgument(format!(
            "corpus vocab {} does not match checkpoint vocab {}",
            bundle.tok.vocab_size(),
            theta_o.config.vocab_size
        )));
    }

    let output = if spec.name == ObjectiveKind::Po {
        let forget_records: Vec<QARecord> = bundle
            .records
            .iter()
            .filter(|r| r.split == Split::Forget)
            .cloned()
            .collect();
        let ctx = RunContext {
            rmu_u: objectives::rmu_direction(theta_o.layout.d, cfg.seed),
            replacements: objectives::build_replacements(&bundle.tok, &forget_records)?,
        };
        unlearner::unlearn_with_context(theta_o, spec, &splits, cfg, ctx)?
    } else {
        unlearner::unlearn(theta_o, spec, &splits, cfg)?
    };

    model::save_checkpoint(&output.theta_u, &out.join("theta_u.json"))?;
    geffect::write_geffect_csv(&out.join("geffect.csv"), &output.records)?;
    geffect::write_pgeffect_jsonl(&out.join("pgeffect.jsonl"), &output.pg_samples)?;
    write_weight_traces(&out.join("weight_traces.jsonl"), &output.weight_traces)?;
    write_train_log(&out.join("train_log.csv"), &output.loss_log)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    std::fs::write(
        out.join("objective.json"),
        serde_json::to_string_pretty(spec)?,
    )?;

    let mut artifacts = BTreeMap::new();
    artifacts.insert("theta_u".to_string(), "theta_u.json".to_string());
    artifacts.insert("geffect".to_string(), "geffect.csv".to_string());
    artifacts.insert("pgeffect".to_string(), "pgeffect.jsonl".to_string());
    artifacts.insert("weight_traces".to_string(), "weight_traces.jsonl".to_string());
    artifacts.insert("train_log".to_string(), "train_log.csv".to_string());
    artifacts.insert("config".to_string(), "config.toml".to_string());
    artifacts.insert("objective".to_string(), "objective.json".to_string());
    write_manifest(
        out,
        &RunManifest {
            run_id: run_id_for(out),
            command: "unlearn".to_string(),
            config_path: config_path.to_string(),
            corpus_sha256: bundle.sha.clone(),
            spec: Some(spec.clone()),
            artifacts,
            created_unix: created,
            completed_unix: now_unix(),
        },
    )?;
    Ok(output.diverged_at)
}

fn write_weight_traces(path: &Path, traces: &[TokenWeightTrace]) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in traces {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_unlearn(
    theta_o: &Path,
    data: &Path,
    objective: &str,
    alpha: Option<f64>,
    beta: Option<f64>,
    c: Option<f64>,
    tap_layer: Option<usize>,
    reg: Option<&str>,
    reg_tap_layer: Option<usize>,
    reg_weight: Option<f64>,
    config: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let theta_o = model::load_checkpoint::<f64>(theta_o)?;
    let bundle = load_data(data)?;
    let spec = build_spec(
        objective,
        alpha,
        beta,
        c,
        tap_layer,
        reg,
        reg_tap_layer,
        reg_weight,
        theta_o.layout.n_layers,
    )?;
    let cfg = load_run_config(config, RunConfig::unlearn_default())?;
    let diverged = run_unlearn_to_dir(
        &theta_o,
        &spec,
        &bundle,
        &cfg,
        out,
        &config.map(|p| p.display().to_string()).unwrap_or_default(),
    )?;
    if let Some(step) = diverged {
        eprintln!("run diverged at step {step}; artifacts hold the last finite state");
        return Err(LabError::Numeric(format!("diverged at step {step}")));
    }
    println!("unlearning complete; artifacts in {}", out.display());
    Ok(())
}

fn eval_to_report(
    model_path: &Path,
    gold_path: &Path,
    theta_o_path: Option<&Path>,
    bundle: &DataBundle,
    uwc_max_drop: f64,
    per_record: bool,
) -> Result<evalsuite::EvalReport> {
    let model = model::load_checkpoint::<f64>(model_path)?;
    let gold = model::load_checkpoint::<f64>(gold_path)?;
    let forget = corpus::by_split(&bundle.records, Split::Forget);
    let retain_eval = corpus::by_split(&bundle.records, Split::RetainEval);
    let retain_exs = retain_eval
        .iter()
        .map(|r| corpus::encode(&bundle.tok, r, false))
        .collect::<Result<Vec<_>>>()?;

    let (final_model, lambda) = match theta_o_path {
        Some(p) => {
            let theta_o = model::load_checkpoint::<f64>(p)?;
            unlearner::uwc_mix(
                &theta_o,
                &model,
                |m| evalsuite::model_utility(m, &retain_exs),
                uwc_max_drop,
            )?
        }
        None => (model, 1.0),
    };
    evalsuite::evaluate(
        &final_model,
        &gold,
        &bundle.tok,
        &forget,
        &retain_eval,
        lambda,
        per_record,
    )
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    model_path: &Path,
    gold_path: &Path,
    theta_o_path: Option<&Path>,
    data: &Path,
    uwc_max_drop: f64,
    per_record: bool,
    out: &Path,
) -> Result<()> {
    if !(0.0..=1.0).contains(&uwc_max_drop) {
        return Err(LabError::InvalidArgument(
            "--uwc-max-drop must lie in [0,1]".into(),
        ));
    }
    ensure_fresh_run(out)?;
    let created = now_unix();
    let bundle = load_data(data)?;
    let report = eval_to_report(
        model_path,
        gold_path,
        theta_o_path,
        &bundle,
        uwc_max_drop,
        per_record,
    )?;
    evalsuite::write_eval_json(&out.join("eval.json"), &report)?;
    let mut artifacts = BTreeMap::new();
    artifacts.insert("eval".to_string(), "eval.json".to_string());
    write_manifest(
        out,
        &RunManifest {
            run_id: run_id_for(out),
            command: "eval".to_string(),
            config_path: String::new(),
            corpus_sha256: bundle.sha,
            spec: None,
            artifacts,
            created_unix: created,
            completed_unix: now_unix(),
        },
    )?;
    println!(
        "eval: es_exact_forget {:.4} es_exact_retain {:.4} mu {:.4} fq {:.4} lambda {:.2}",
        report.es_exact_forget, report.es_exact_retain, report.mu, report.fq, report.uwc_lambda
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct SweepFile {
    data: PathBuf,
    theta_o: PathBuf,
    gold: PathBuf,
    #[serde(default)]
    run: Option<RunConfig>,
    #[serde(default = "default_uwc_drop")]
    uwc_max_drop: f64,
    grid: GridSpec,
}

fn default_uwc_drop() -> f64 {
    0.10
}

#[derive(Debug, Deserialize)]
struct GridSpec {
    setup: Vec<String>,
    #[serde(default)]
    alpha: Vec<f64>,
    #[serde(default)]
    beta: Vec<f64>,
    #[serde(default)]
    lr: Vec<f64>,
}

fn fmt_param(v: f64) -> String {
    format!("{v}").replace('.', "p").replace('-', "m")
}

fn cmd_sweep(grid_file: &Path, out: &Path) -> Result<()> {
    if !grid_file.exists() {
        return Err(LabError::MissingArtifact(grid_file.display().to_string()));
    }
    let sweep: SweepFile = toml::from_str(&std::fs::read_to_string(grid_file)?)
        .map_err(|e| LabError::Serialization(format!("grid file: {e}")))?;
    ensure_fresh_run(out)?;
    let created = now_unix();

    let theta_o = model::load_checkpoint::<f64>(&sweep.theta_o)?;
    let bundle = load_data(&sweep.data)?;
    let base_cfg = sweep.run.clone().unwrap_or_else(RunConfig::unlearn_default);
    base_cfg.validate()?;

    // axes with a single None entry when absent, so the product is uniform
    let opt_axis = |vals: &[f64]| -> Vec<Option<f64>> {
        if vals.is_empty() {
            vec![None]
        } else {
            vals.iter().copied().map(Some).collect()
        }
    };
    let alphas = opt_axis(&sweep.grid.alpha);
    let betas = opt_axis(&sweep.grid.beta);
    let lrs = opt_axis(&sweep.grid.lr);

    use std::io::Write;
    let mut summary = std::io::BufWriter::new(std::fs::File::create(out.join("summary.csv"))?);
    writeln!(
        summary,
        "setup,hyperparameter,es_exact_retain,es_exact_unlearn,es_perturb_retain,es_perturb_unlearn"
    )?;

    let mut cells = 0usize;
    for setup in &sweep.grid.setup {
        let base_spec = unlearner::preset(setup).ok_or_else(|| {
            LabError::InvalidArgument(format!(
                "unknown setup '{setup}' (expected one of {:?})",
                unlearner::preset_names()
            ))
        })?;
        for &alpha in &alphas {
            for &beta in &betas {
                for &lr in &lrs {
                    let mut spec = base_spec.clone();
                    let mut cfg = base_cfg.clone();
                    let mut dir_name = setup.clone();
                    let mut params = Vec::new();
                    if let Some(a) = alpha {
                        spec.alpha = a;
                        params.push(format!("alpha={a}"));
                        dir_name.push_str(&format!("_a{}", fmt_param(a)));
                    }
                    if let Some(b) = beta {
                        spec.beta = b;
                        params.push(format!("beta={b}"));
                        dir_name.push_str(&format!("_b{}", fmt_param(b)));
                    }
                    if let Some(l) = lr {
                        cfg.lr = l;
                        params.push(format!("lr={l}"));
                        dir_name.push_str(&format!("_lr{}", fmt_param(l)));
                    }
                    spec.validate(theta_o.layout.n_layers)?;
                    let cell_dir = out.join(&dir_name);
                    let diverged = run_unlearn_to_dir(
                        &theta_o,
                        &spec,
                        &bundle,
                        &cfg,
                        &cell_dir,
                        &grid_file.display().to_string(),
                    )?;
                    if let Some(step) = diverged {
                        eprintln!("cell {dir_name} diverged at step {step}; evaluating last finite state");
                    }
                    let report = eval_to_report(
                        &cell_dir.join("theta_u.json"),
                        &sweep.gold,
                        Some(&sweep.theta_o),
                        &bundle,
                        sweep.uwc_max_drop,
                        false,
                    )?;
                    evalsuite::write_eval_json(&cell_dir.join("eval.json"), &report)?;
                    let hyper = if params.is_empty() {
                        "preset".to_string()
                    } else {
                        params.join(";")
                    };
                    writeln!(
                        summary,
                        "{setup},{hyper},{},{},{},{}",
                        report.es_exact_retain,
                        report.es_exact_forget,
                        report.es_perturb_retain,
                        report.es_perturb_forget
                    )?;
                    cells += 1;
                    println!("cell {dir_name}: es_exact_forget {:.4}", report.es_exact_forget);
                }
            }
        }
    }
    drop(summary);

    let mut artifacts = BTreeMap::new();
    artifacts.insert("summary".to_string(), "summary.csv".to_string());
    write_manifest(
        out,
        &RunManifest {
            run_id: run_id_for(out),
            command: "sweep".to_string(),
            config_path: grid_file.display().to_string(),
            corpus_sha256: bundle.sha,
            spec: None,
            artifacts,
            created_unix: created,
            completed_unix: now_unix(),
        },
    )?;
    println!("sweep complete: {cells} cells in {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// plot / token-report
// ---------------------------------------------------------------------------

fn cmd_plot(run: &Path, out: Option<&Path>) -> Result<()> {
    let records = geffect::read_geffect_csv(&run.join("geffect.csv"))?;
    let samples = geffect::read_pgeffect_jsonl(&run.join("pgeffect.jsonl"))?;
    let out_dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run.join("plots"));
    let paths = plot::plot_run(&records, &samples, &out_dir)?;
    for p in &paths {
        println!("wrote {}", p.display());
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct TokenReportRecord {
    record_id: String,
    epoch: usize,
    tokens: Vec<TokenReportEntry>,
}

#[derive(Debug, Serialize)]
struct TokenReportEntry {
    position: usize,
    weight: f64,
    p_theta: f64,
    p_ref: f64,
}

fn cmd_token_report(run: &Path, epoch: usize, out: &Path) -> Result<()> {
    let path = run.join("weight_traces.jsonl");
    if !path.exists() {
        return Err(LabError::MissingArtifact(path.display().to_string()));
    }
    let text = std::fs::read_to_string(&path)?;
    let traces: Vec<TokenWeightTrace> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(LabError::from))
        .collect::<Result<_>>()?;
    let mut grouped: BTreeMap<String, Vec<TokenReportEntry>> = BTreeMap::new();
    for t in traces.into_iter().filter(|t| t.epoch == epoch) {
        grouped.entry(t.record_id.clone()).or_default().push(TokenReportEntry {
            position: t.position,
            weight: t.weight,
            p_theta: t.p_theta,
            p_ref: t.p_ref,
        });
    }
    if grouped.is_empty() {
        return Err(LabError::InvalidArgument(format!(
            "no weight traces for epoch {epoch} in {}",
            run.display()
        )));
    }
    let report: Vec<TokenReportRecord> = grouped
        .into_iter()
        .map(|(record_id, mut tokens)| {
            tokens.sort_by_key(|t| t.position);
            TokenReportRecord { record_id, epoch, tokens }
        })
        .collect();
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let file = std::fs::File::create(out)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &report)?;
    println!("wrote token report for {} records to {}", report.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// entry
// ---------------------------------------------------------------------------

fn exit_code(err: &LabError) -> i32 {
    match err {
        LabError::InvalidArgument(_) | LabError::Serialization(_) => 2,
        LabError::Numeric(_) | LabError::Internal(_) => 3,
        LabError::MissingArtifact(_) | LabError::Io(_) => 4,
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData {
            seed,
            profiles,
            qa_per_profile,
            forget_fraction,
            retain_eval_count,
            out,
        } => cmd_gen_data(seed, profiles, qa_per_profile, forget_fraction, retain_eval_count, &out),
        Cmd::Finetune {
            data,
            config,
            d_model,
            n_layers,
            n_heads,
            context_len,
            model_seed,
            out,
        } => cmd_train(
            false,
            &data,
            config.as_deref(),
            d_model,
            n_layers,
            n_heads,
            context_len,
            model_seed,
            &out,
        ),
        Cmd::Gold {
            data,
            config,
            d_model,
            n_layers,
            n_heads,
            context_len,
            model_seed,
            out,
        } => cmd_train(
            true,
            &data,
            config.as_deref(),
            d_model,
            n_layers,
            n_heads,
            context_len,
            model_seed,
            &out,
        ),
        Cmd::Unlearn {
            theta_o,
            data,
            objective,
            alpha,
            beta,
            c,
            tap_layer,
            reg,
            reg_tap_layer,
            reg_weight,
            config,
            out,
        } => cmd_unlearn(
            &theta_o,
            &data,
            &objective,
            alpha,
            beta,
            c,
            tap_layer,
            reg.as_deref(),
            reg_tap_layer,
            reg_weight,
            config.as_deref(),
            &out,
        ),
        Cmd::Eval {
            model,
            gold,
            theta_o,
            data,
            uwc_max_drop,
            per_record,
            out,
        } => cmd_eval(
            &model,
            &gold,
            theta_o.as_deref(),
            &data,
            uwc_max_drop,
            per_record,
            &out,
        ),
        Cmd::Sweep { grid_file, out } => cmd_sweep(&grid_file, &out),
        Cmd::Plot { run, out } => cmd_plot(&run, out.as_deref()),
        Cmd::TokenReport { run, epoch, out } => cmd_token_report(&run, epoch, &out),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = dispatch(cli) {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}
