//! Data preparation, the training loop, evaluation and cost reporting.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use capsgraph_core::capsule::argmax;
use capsgraph_core::{Adam, Batch, Model, Tape};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{encode_examples, load_examples, Dataset, Format, LabelMap, RawExample};
use crate::error::{Error, Result};
use crate::synthetic;
use crate::text::Vocabulary;

/// Raw train/test rows from files or the synthetic generator.
pub fn load_raw(cfg: &RunConfig) -> Result<(Vec<RawExample>, Vec<RawExample>)> {
    if let Some(syn) = &cfg.data.synthetic {
        let corpus = synthetic::generate(syn)?;
        return Ok((corpus.train, corpus.test));
    }
    let read = |path: &Option<std::path::PathBuf>, what: &str| -> Result<Vec<RawExample>> {
        let Some(path) = path else {
            return Ok(Vec::new());
        };
        if !path.exists() {
            return Err(Error::Data(format!("{what} file {} does not exist", path.display())));
        }
        let format = match cfg.data.format {
            Some(f) => f,
            None => Format::from_path(path)
                .ok_or_else(|| Error::Config(format!("cannot infer the format of {}; set data.format", path.display())))?,
        };
        load_examples(path, format)
    };
    Ok((read(&cfg.data.train, "train")?, read(&cfg.data.test, "test")?))
}

/// Vocabulary, labels and encoded splits for a run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub vocab: Vocabulary,
    pub labels: LabelMap,
    pub train: Dataset,
    pub test: Dataset,
}

impl Prepared {
    /// Builds the vocabulary and label map from the training split.
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let (train, test) = load_raw(cfg)?;
        if train.is_empty() {
            return Err(Error::Data("training split is empty (set data.train or data.synthetic)".into()));
        }
        let vocab = Vocabulary::build(train.iter().map(|e| e.text.as_str()), cfg.data.min_count, cfg.data.max_vocab)?;
        let labels = LabelMap::from_examples(&train);
        if labels.len() < 2 {
            return Err(Error::Data("training split needs at least two labels".into()));
        }
        Self::encode(vocab, labels, &train, &test, cfg.model.max_len)
    }

    /// Encodes both splits against an existing vocabulary and label map.
    pub fn encode(vocab: Vocabulary, labels: LabelMap, train: &[RawExample], test: &[RawExample], len: usize) -> Result<Self> {
        let train = Dataset {
            docs: encode_examples(train, &vocab, &labels, len)?,
            seq_len: len,
        };
        let test = Dataset {
            docs: encode_examples(test, &vocab, &labels, len)?,
            seq_len: len,
        };
        Ok(Self { vocab, labels, train, test })
    }
}

/// One JSON line of training metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub steps: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub epochs: Vec<EpochMetrics>,
    /// Batch-mean loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

/// Shuffle seed for an epoch; every run with the same seed sees the same order.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(epoch as u64)
}

/// One pass over shuffled batches; returns the per-step mean losses.
pub fn train_epoch(model: &mut Model<f32>, data: &Dataset, adam: &Adam, batch_size: usize, seed: u64) -> Result<(Vec<f64>, f64, f64)> {
    let mut losses = Vec::new();
    let (mut loss_sum, mut correct, mut count) = (0.0, 0, 0);
    for batch in data.batches(batch_size, Some(seed)) {
        let stats = model.train_batch(&batch, adam)?;
        losses.push(stats.mean_loss());
        loss_sum += stats.loss_sum;
        correct += stats.correct;
        count += stats.count;
    }
    let n = count.max(1) as f64;
    Ok((losses, loss_sum / n, correct as f64 / n))
}

/// Trains a fresh model, calling `on_epoch` after each epoch.
pub fn train(cfg: &RunConfig, data: &Prepared, mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>) -> Result<TrainOutcome> {
    let mut model = Model::<f32>::new(cfg.model_config(data.labels.len(), data.vocab.len()))?;
    let adam = Adam::with_lr(cfg.train.lr);
    let mut epochs = Vec::new();
    let mut step_losses = Vec::new();
    for epoch in 0..cfg.train.epochs {
        let start = Instant::now();
        let (losses, train_loss, train_accuracy) =
            train_epoch(&mut model, &data.train, &adam, cfg.train.batch_size, epoch_seed(cfg.train.seed, epoch))?;
        let steps = losses.len();
        step_losses.extend(losses);
        let eval_now = cfg.train.eval_every > 0 && (epoch + 1) % cfg.train.eval_every == 0 && !data.test.is_empty();
        let test = if eval_now {
            Some(evaluate(&model, &data.test, data.labels.len())?)
        } else {
            None
        };
        let metrics = EpochMetrics {
            epoch: epoch + 1,
            train_loss,
            train_accuracy,
            test_loss: test.as_ref().map(|r| r.mean_loss),
            test_accuracy: test.as_ref().map(|r| r.accuracy),
            steps,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&metrics)?;
        epochs.push(metrics);
    }
    Ok(TrainOutcome {
        model,
        epochs,
        step_losses,
    })
}

/// Appends metrics as JSON lines.
pub struct MetricsWriter {
    out: BufWriter<File>,
    path: std::path::PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out: BufWriter::new(file),
            path: path.to_owned(),
        })
    }

    pub fn write(&mut self, m: &EpochMetrics) -> Result<()> {
        let line = serde_json::to_string(m).expect("metrics serialize");
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Accuracy, loss and cost figures for a model on a split.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub documents: usize,
    pub accuracy: f64,
    pub mean_loss: f64,
    /// Accuracy over documents of each true class; `None` for absent classes.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub num_params: usize,
    pub seconds_per_batch: Option<f64>,
    /// Predicted class per document, in order.
    #[serde(skip)]
    pub predictions: Vec<usize>,
    /// Class lengths per document, row-major `documents × C`.
    #[serde(skip)]
    pub probs: Vec<f32>,
}

/// Evaluates without touching parameters.
pub fn evaluate(model: &Model<f32>, data: &Dataset, classes: usize) -> Result<MetricsReport> {
    let mut hits = vec![(0usize, 0usize); classes];
    let mut report = MetricsReport {
        documents: data.len(),
        num_params: model.num_params(),
        ..MetricsReport::default()
    };
    let mut loss_sum = 0.0;
    let mut correct = 0;
    for doc in &data.docs {
        if doc.label >= classes {
            return Err(Error::Data(format!("label index {} outside {classes} classes", doc.label)));
        }
        let mut tape = Tape::new();
        let fwd = model.forward_doc(&mut tape, &doc.tokens)?;
        let loss = model.loss(&mut tape, fwd.probs, doc.label)?;
        let probs = tape.value(fwd.probs);
        let predicted = argmax(&probs.to_f64_vec());
        loss_sum += f64::from(tape.value(loss).item());
        correct += usize::from(predicted == doc.label);
        hits[doc.label].1 += 1;
        hits[doc.label].0 += usize::from(predicted == doc.label);
        report.predictions.push(predicted);
        report.probs.extend_from_slice(probs.data());
    }
    let n = data.len().max(1) as f64;
    report.accuracy = correct as f64 / n;
    report.mean_loss = loss_sum / n;
    report.per_class_accuracy = hits
        .iter()
        .map(|&(h, t)| (t > 0).then(|| h as f64 / t as f64))
        .collect();
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockCount {
    pub name: String,
    pub shape: Vec<usize>,
    pub count: usize,
}

/// Parameter counts per block and the mean forward+backward time per batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub blocks: Vec<BlockCount>,
    pub total: usize,
    pub seconds_per_batch: f64,
    pub timed_batches: usize,
}

pub const WARMUP_BATCHES: usize = 3;
pub const TIMED_BATCHES: usize = 20;

/// Times gradient computation (no optimizer step) on `batch`.
pub fn param_report(model: &Model<f32>, batch: &Batch, timed: usize) -> Result<ParamReport> {
    let blocks: Vec<BlockCount> = model
        .store()
        .iter()
        .map(|p| BlockCount {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            count: p.numel(),
        })
        .collect();
    let mut scratch = model.clone();
    for _ in 0..WARMUP_BATCHES {
        scratch.accumulate_batch(batch)?;
    }
    let start = Instant::now();
    for _ in 0..timed {
        scratch.accumulate_batch(batch)?;
    }
    Ok(ParamReport {
        total: blocks.iter().map(|b| b.count).sum(),
        blocks,
        seconds_per_batch: start.elapsed().as_secs_f64() / timed.max(1) as f64,
        timed_batches: timed,
    })
}
