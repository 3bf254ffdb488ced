//! The subcommands behind the `capsgraph` binary. Each writes its report to
//! `out`, progress to `log`, and returns an [`Error`] whose exit code the
//! binary passes on.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use capsgraph_core::adjacency::{identity_adjacency, normalize_classic_with, normalize_general, pairwise_adjacency_with};
use capsgraph_core::consistency::semantic_consistency;
use capsgraph_core::gradcheck::BlockCheck;
use capsgraph_core::routing;
use capsgraph_core::{Metric, Model, NormMode, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::ablation::{run_ablation, write_csv, AblationGrid};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::export::{write_matrix, write_trace};
use crate::trainer::{self, evaluate, param_report, MetricsWriter, Prepared, TIMED_BATCHES};

/// Command-line overrides shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Loads the config (defaults when no file is given) and applies overrides.
pub fn resolve_config(path: Option<&Path>, ov: &Overrides) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = ov.seed {
        cfg.train.seed = seed;
    }
    if let Some(ck) = &ov.checkpoint {
        cfg.train.checkpoint = Some(ck.clone());
    }
    Ok(cfg)
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<output>", e)
}

fn out_dir(ov: &Overrides) -> Result<PathBuf> {
    let dir = ov.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn checkpoint_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.train
        .checkpoint
        .as_deref()
        .ok_or_else(|| Error::Config("no checkpoint given (use --checkpoint or train.checkpoint)".into()))
}

/// Test split encoded against a checkpoint's vocabulary and labels.
fn checkpoint_test_set(cfg: &RunConfig, ck: &Checkpoint) -> Result<Dataset> {
    let (_, test) = trainer::load_raw(cfg)?;
    if test.is_empty() {
        return Err(Error::Data("test split is empty (set data.test or data.synthetic)".into()));
    }
    let len = ck.model.config().max_len;
    let data = Prepared::encode(ck.vocab.clone(), ck.labels.clone(), &[], &test, len)?;
    Ok(data.test)
}

pub fn cmd_train(cfg: &RunConfig, ov: &Overrides, out: &mut dyn Write, log: &mut dyn Write) -> Result<()> {
    let data = Prepared::from_config(cfg)?;
    let dir = out_dir(ov)?;
    let ckpt = cfg.train.checkpoint.clone().unwrap_or_else(|| dir.join("model.ckpt"));
    let metrics_path = cfg.train.metrics.clone().unwrap_or_else(|| dir.join("metrics.jsonl"));
    let mut metrics = MetricsWriter::create(&metrics_path)?;
    writeln!(
        log,
        "training on {} documents ({} classes, vocabulary {}), testing on {}",
        data.train.len(),
        data.labels.len(),
        data.vocab.len(),
        data.test.len()
    )
    .map_err(io_err)?;
    let outcome = trainer::train(cfg, &data, |m| {
        metrics.write(m)?;
        let test = m.test_accuracy.map(|a| format!(" test_acc {a:.4}")).unwrap_or_default();
        writeln!(
            log,
            "epoch {} loss {:.5} acc {:.4}{test} ({:.1}s)",
            m.epoch, m.train_loss, m.train_accuracy, m.seconds
        )
        .map_err(io_err)
    })?;
    let ck = Checkpoint {
        model: outcome.model,
        train: cfg.train.clone(),
        labels: data.labels.clone(),
        vocab: data.vocab.clone(),
    };
    ck.save(&ckpt)?;
    let report = if data.test.is_empty() {
        None
    } else {
        Some(evaluate(&ck.model, &data.test, data.labels.len())?)
    };
    let summary = json!({
        "checkpoint": ckpt,
        "metrics": metrics_path,
        "epochs": outcome.epochs.len(),
        "num_params": ck.model.num_params(),
        "final": outcome.epochs.last(),
        "test": report,
    });
    writeln!(out, "{summary}").map_err(io_err)
}

pub fn cmd_eval(cfg: &RunConfig, timing: bool, out: &mut dyn Write) -> Result<()> {
    let ck = Checkpoint::load(checkpoint_path(cfg)?)?;
    let test = checkpoint_test_set(cfg, &ck)?;
    let mut report = evaluate(&ck.model, &test, ck.labels.len())?;
    let mut cost = None;
    if timing {
        let batch = &test.batches(cfg.train.batch_size, None)[0];
        let r = param_report(&ck.model, batch, TIMED_BATCHES)?;
        report.seconds_per_batch = Some(r.seconds_per_batch);
        cost = Some(r);
    }
    let labels = ck.labels.names();
    writeln!(out, "{}", json!({ "report": report, "labels": labels, "cost": cost })).map_err(io_err)
}

/// Resolves `--grid`: a preset name or a JSON file; otherwise the config's grid.
pub fn resolve_grid(cfg: &RunConfig, grid: Option<&str>) -> Result<AblationGrid> {
    let Some(arg) = grid else {
        return Ok(cfg.ablate.clone());
    };
    if let Some(g) = AblationGrid::preset(arg) {
        return Ok(AblationGrid {
            epochs: cfg.ablate.epochs,
            mechanism_docs: cfg.ablate.mechanism_docs,
            ..g
        });
    }
    let text = fs::read_to_string(arg).map_err(|e| Error::Config(format!("grid {arg}: {e}")))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("grid {arg}: {e}")))
}

pub fn cmd_ablate(cfg: &RunConfig, ov: &Overrides, grid: &AblationGrid, jobs: usize, out: &mut dyn Write, log: &mut dyn Write) -> Result<()> {
    let data = Prepared::from_config(cfg)?;
    let cells = grid.cells(&cfg.routing)?;
    writeln!(log, "ablation over {} cells with {} job(s)", cells.len(), jobs.max(1)).map_err(io_err)?;
    let rows = run_ablation(cfg, &data, grid, jobs)?;
    for r in &rows {
        let status = match (&r.error, r.accuracy) {
            (Some(e), _) => format!("failed: {e}"),
            (None, Some(a)) => format!("accuracy {a:.4}"),
            _ => String::new(),
        };
        writeln!(log, "{:28} {status}", r.cell).map_err(io_err)?;
    }
    match &ov.out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
            write_csv(file, &rows)?;
        }
        None => write_csv(&mut *out, &rows)?,
    }
    if rows.iter().all(|r| r.error.is_some()) {
        return Err(Error::Data(format!("all {} ablation cells failed", rows.len())));
    }
    Ok(())
}

/// Deterministic document for gradient checks: mostly real tokens, a pad tail.
pub fn gradcheck_tokens(len: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let content = len - len / 4;
    (0..len)
        .map(|i| if i < content { rng.random_range(1..vocab) } else { 0 })
        .collect()
}

/// Block name whose gradient `--inject-grad-fault` corrupts.
pub const FAULT_BLOCK: &str = "transform.weight";

pub fn run_gradcheck(cfg: &RunConfig, inject_fault: bool) -> Result<Vec<BlockCheck>> {
    let g = &cfg.gradcheck;
    let model_cfg = cfg.model_config(g.num_classes, g.vocab_size);
    let mut model = Model::<f64>::new(model_cfg.clone())?;
    model.perturb(0.05, cfg.train.seed);
    if model.num_params() > g.max_params {
        return Err(Error::Config(format!(
            "gradcheck needs a tiny model: {} parameters exceed the budget of {}",
            model.num_params(),
            g.max_params
        )));
    }
    let tokens = gradcheck_tokens(model_cfg.max_len, g.vocab_size, cfg.train.seed);
    let label = (cfg.train.seed as usize) % g.num_classes;
    let fault = |name: &str, grad: &mut [f64]| {
        if name == FAULT_BLOCK {
            grad.iter_mut().for_each(|x| *x *= 1.5);
        }
    };
    let hook: Option<capsgraph_core::gradcheck::GradHook<'_>> = if inject_fault { Some(&fault) } else { None };
    Ok(model.gradcheck(&tokens, label, g.step, hook)?)
}

pub fn cmd_gradcheck(cfg: &RunConfig, inject_fault: bool, out: &mut dyn Write) -> Result<()> {
    let reports = run_gradcheck(cfg, inject_fault)?;
    let tol = cfg.gradcheck.tolerance;
    writeln!(out, "{:26} {:>7} {:>12}  status", "block", "numel", "max_rel_err").map_err(io_err)?;
    for r in &reports {
        let status = if r.max_rel_error <= tol { "ok" } else { "FAIL" };
        writeln!(out, "{:26} {:>7} {:>12.3e}  {status}", r.name, r.numel, r.max_rel_error).map_err(io_err)?;
    }
    let failed: Vec<&str> = reports
        .iter()
        // NaN errors must count as failures
        .filter(|r| r.max_rel_error.is_nan() || r.max_rel_error > tol)
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradient check above {tol:e} in: {}", failed.join(", "))))
    }
}

pub fn cmd_dump_adjacency(cfg: &RunConfig, ov: &Overrides, document: Option<&str>, out: &mut dyn Write) -> Result<()> {
    let ck = Checkpoint::load(checkpoint_path(cfg)?)?;
    let mc = ck.model.config();
    let tokens = match document {
        Some(text) => ck.vocab.encode(text, mc.max_len),
        None => checkpoint_test_set(cfg, &ck)?.docs[0].tokens.clone(),
    };
    let dir = out_dir(ov)?;
    let mut tape = Tape::new();
    let fwd = ck.model.forward_doc(&mut tape, &tokens)?;
    let u = tape.value(fwd.children).clone();
    let mut files = Vec::new();
    for metric in Metric::ALL {
        let a = pairwise_adjacency_with(&u, metric, mc.routing.wd_mode)?;
        let norm = match mc.routing.norm_mode {
            NormMode::General => normalize_general(&a)?,
            NormMode::Classic => normalize_classic_with(&u, metric, mc.routing.wd_mode)?,
            NormMode::Identity => identity_adjacency(u.shape()[0]),
        };
        let tag = metric.as_str().to_ascii_lowercase();
        let (pa, pn) = (dir.join(format!("adjacency_{tag}.csv")), dir.join(format!("normalized_{tag}.csv")));
        write_matrix(&pa, &a.values)?;
        write_matrix(&pn, &norm.values)?;
        files.push(pa);
        files.push(pn);
    }
    let trace_path = dir.join("routing_trace.csv");
    write_trace(&trace_path, &routing::trace(&tape, &fwd.routing))?;
    files.push(trace_path);
    let summary = json!({
        "capsules": u.shape()[0],
        "norm_mode": mc.routing.norm_mode,
        "files": files,
    });
    writeln!(out, "{summary}").map_err(io_err)
}

pub fn cmd_consistency(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let ck = Checkpoint::load(checkpoint_path(cfg)?)?;
    let test = checkpoint_test_set(cfg, &ck)?;
    let r = semantic_consistency(&ck.model, test.token_rows())?;
    let record = json!({ "documents": r.documents, "ncl": r.ncl, "pcl": r.pcl, "rl": r.rl });
    writeln!(out, "{record}").map_err(io_err)?;
    writeln!(out, "{:>8} {:>8} {:>8}", "NCL", "PCL", "RL").map_err(io_err)?;
    writeln!(out, "{:>7.2}% {:>7.2}% {:>7.2}%", r.ncl, r.pcl, r.rl).map_err(io_err)
}
