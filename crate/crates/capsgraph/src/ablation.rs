//! Routing ablations: a grid of routing configurations, each trained with
//! the same seed and data order, reported one CSV row per cell.

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use capsgraph_core::{Metric, Model, NormMode, RoutingConfig, RoutingVariant, Tape};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::trainer::{evaluate, train, Prepared};

/// Axes to sweep. The product is canonicalized: settings a variant ignores
/// are dropped and duplicate cells removed, so metric × {general, classic,
/// identity} yields one shared identity ("without A") cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGrid {
    pub variants: Vec<RoutingVariant>,
    pub metrics: Vec<Metric>,
    pub norm_modes: Vec<NormMode>,
    pub attention: Vec<bool>,
    /// Overrides `train.epochs` for every cell.
    pub epochs: Option<usize>,
    /// Test documents used for the mechanism columns.
    pub mechanism_docs: usize,
}

impl Default for AblationGrid {
    /// Normalization tricks for each distance plus the identity adjacency.
    fn default() -> Self {
        Self {
            variants: vec![RoutingVariant::Graph],
            metrics: vec![Metric::Cs, Metric::Ed, Metric::Wd],
            norm_modes: vec![NormMode::General, NormMode::Classic, NormMode::Identity],
            attention: vec![true],
            epochs: None,
            mechanism_docs: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub name: String,
    pub routing: RoutingConfig,
}

fn canonical(mut r: RoutingConfig) -> (String, RoutingConfig) {
    let defaults = RoutingConfig::default();
    let att = if r.attention { "att" } else { "noatt" };
    match r.variant {
        RoutingVariant::Dynamic | RoutingVariant::Leaky => {
            r.metric = defaults.metric;
            r.norm_mode = defaults.norm_mode;
            r.attention = false;
            (r.variant.as_str().to_owned(), r)
        }
        RoutingVariant::GcnOnly => {
            r.norm_mode = NormMode::General;
            r.attention = false;
            (format!("gcn_only-{}", r.metric.as_str()), r)
        }
        RoutingVariant::Graph if r.norm_mode == NormMode::Identity => {
            r.metric = defaults.metric;
            (format!("graph-without_a-{att}"), r)
        }
        RoutingVariant::Graph => (format!("graph-{}-{}-{att}", r.metric.as_str(), r.norm_mode.as_str()), r),
    }
}

impl AblationGrid {
    /// Named presets: `normalization` (the default) and `baselines`.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "normalization" => Some(Self::default()),
            "baselines" => Some(Self {
                variants: vec![RoutingVariant::Dynamic, RoutingVariant::Leaky, RoutingVariant::GcnOnly, RoutingVariant::Graph],
                metrics: vec![Metric::Wd],
                norm_modes: vec![NormMode::General],
                attention: vec![true],
                ..Self::default()
            }),
            _ => None,
        }
    }

    pub fn cells(&self, base: &RoutingConfig) -> Result<Vec<AblationCell>> {
        let mut cells: Vec<AblationCell> = Vec::new();
        for &variant in &self.variants {
            for &metric in &self.metrics {
                for &norm_mode in &self.norm_modes {
                    for &attention in &self.attention {
                        let (name, routing) = canonical(RoutingConfig {
                            variant,
                            metric,
                            norm_mode,
                            attention,
                            ..*base
                        });
                        if !cells.iter().any(|c| c.name == name) {
                            cells.push(AblationCell { name, routing });
                        }
                    }
                }
            }
        }
        if cells.is_empty() {
            return Err(Error::Config("ablation grid is empty".into()));
        }
        Ok(cells)
    }
}

/// One trained cell.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub cell: String,
    pub routing: RoutingConfig,
    pub accuracy: Option<f64>,
    pub loss: Option<f64>,
    pub params: Option<usize>,
    pub seconds_per_batch: Option<f64>,
    /// Mean ‖h − û‖ over votes; zero iff `Ã = I` and `W_g = I`.
    pub mech_h_minus_uhat: Option<f64>,
    /// Largest `|Ã − I|` entry seen.
    pub mech_adj_minus_identity: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Mechanism {
    pub h_minus_uhat: Option<f64>,
    pub adj_minus_identity: Option<f64>,
}

/// Measures how far the GCN step moves the votes on the given documents.
pub fn mechanism<'a>(model: &Model<f32>, docs: impl IntoIterator<Item = &'a [usize]>) -> Result<Mechanism> {
    let (mut diff_sum, mut diff_n, mut adj_max) = (0.0, 0usize, None::<f64>);
    for tokens in docs {
        let mut tape = Tape::new();
        let fwd = model.forward_doc(&mut tape, tokens)?;
        if let Some(h) = fwd.routing.aggregated {
            let (h, u) = (tape.value(h), tape.value(fwd.predictions));
            let d = *h.shape().last().unwrap();
            for (a, b) in h.data().chunks(d).zip(u.data().chunks(d)) {
                let sq: f64 = a.iter().zip(b).map(|(x, y)| f64::from(x - y).powi(2)).sum();
                diff_sum += sq.sqrt();
                diff_n += 1;
            }
        }
        if let Some(adj) = &fwd.routing.adjacency {
            let a = tape.value(adj.normalized);
            let n = a.shape()[0];
            let dev = a
                .data()
                .iter()
                .enumerate()
                .map(|(k, &x)| (f64::from(x) - if k / n == k % n { 1.0 } else { 0.0 }).abs())
                .fold(0.0, f64::max);
            adj_max = Some(adj_max.map_or(dev, |m| m.max(dev)));
        }
    }
    Ok(Mechanism {
        h_minus_uhat: (diff_n > 0).then(|| diff_sum / diff_n as f64),
        adj_minus_identity: adj_max,
    })
}

fn run_cell(cfg: &RunConfig, data: &Prepared, cell: &AblationCell, grid: &AblationGrid) -> Result<AblationRow> {
    let mut cfg = cfg.clone();
    cfg.routing = cell.routing;
    if let Some(epochs) = grid.epochs {
        cfg.train.epochs = epochs;
    }
    let start = Instant::now();
    let outcome = train(&cfg, data, |_| Ok(()))?;
    let seconds = start.elapsed().as_secs_f64();
    let steps = outcome.step_losses.len();
    let eval = if data.test.is_empty() { &data.train } else { &data.test };
    let report = evaluate(&outcome.model, eval, data.labels.len())?;
    let mech = mechanism(&outcome.model, eval.token_rows().take(grid.mechanism_docs))?;
    Ok(AblationRow {
        cell: cell.name.clone(),
        routing: cell.routing,
        accuracy: Some(report.accuracy),
        loss: Some(report.mean_loss),
        params: Some(outcome.model.num_params()),
        seconds_per_batch: (steps > 0).then(|| seconds / steps as f64),
        mech_h_minus_uhat: mech.h_minus_uhat,
        mech_adj_minus_identity: mech.adj_minus_identity,
        error: None,
    })
}

/// Trains every cell, up to `jobs` at a time. A failing cell is recorded in
/// its row and the sweep continues.
pub fn run_ablation(cfg: &RunConfig, data: &Prepared, grid: &AblationGrid, jobs: usize) -> Result<Vec<AblationRow>> {
    let cells = grid.cells(&cfg.routing)?;
    let next = AtomicUsize::new(0);
    let rows: Mutex<Vec<Option<AblationRow>>> = Mutex::new(vec![None; cells.len()]);
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, cells.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = cells.get(i) else { break };
                let row = run_cell(cfg, data, cell, grid).unwrap_or_else(|e| AblationRow {
                    cell: cell.name.clone(),
                    routing: cell.routing,
                    accuracy: None,
                    loss: None,
                    params: None,
                    seconds_per_batch: None,
                    mech_h_minus_uhat: None,
                    mech_adj_minus_identity: None,
                    error: Some(e.to_string()),
                });
                rows.lock().unwrap()[i] = Some(row);
            });
        }
    });
    Ok(rows.into_inner().unwrap().into_iter().map(Option::unwrap).collect())
}

pub const CSV_HEADER: [&str; 13] = [
    "cell",
    "variant",
    "metric",
    "norm_mode",
    "attention",
    "accuracy",
    "loss",
    "params",
    "seconds_per_batch",
    "mech_h_minus_uhat",
    "mech_adj_minus_identity",
    "rank",
    "error",
];

fn fmt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// Writes the rows as CSV. `rank` orders cells by accuracy (1 = best).
pub fn write_csv(out: impl Write, rows: &[AblationRow]) -> Result<()> {
    let mut order: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].accuracy.is_some()).collect();
    order.sort_by(|&a, &b| rows[b].accuracy.partial_cmp(&rows[a].accuracy).unwrap().then(a.cmp(&b)));
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Data(format!("writing ablation csv: {e}"));
    w.write_record(CSV_HEADER).map_err(err)?;
    for (i, r) in rows.iter().enumerate() {
        let uses_metric = matches!(r.routing.variant, RoutingVariant::Graph | RoutingVariant::GcnOnly)
            && !(r.routing.variant == RoutingVariant::Graph && r.routing.norm_mode == NormMode::Identity);
        let uses_norm = r.routing.variant == RoutingVariant::Graph;
        let rank = order.iter().position(|&k| k == i).map(|p| (p + 1).to_string()).unwrap_or_default();
        w.write_record([
            r.cell.clone(),
            r.routing.variant.as_str().to_owned(),
            if uses_metric { r.routing.metric.as_str().to_owned() } else { String::new() },
            if uses_norm { r.routing.norm_mode.as_str().to_owned() } else { String::new() },
            r.routing.uses_attention().to_string(),
            fmt(r.accuracy),
            fmt(r.loss),
            r.params.map(|p| p.to_string()).unwrap_or_default(),
            fmt(r.seconds_per_batch),
            fmt(r.mech_h_minus_uhat),
            fmt(r.mech_adj_minus_identity),
            rank,
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::Data(format!("writing ablation csv: {e}")))
}
