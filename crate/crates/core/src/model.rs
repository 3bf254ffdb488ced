//! The full network: embedding → n-gram convolution → primary capsules →
//! compression → per-class transform → routing → class lengths.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::capsule::argmax;
use crate::error::{Error, Result};
use crate::gradcheck::{self, BlockCheck, GradHook};
use crate::kernels;
use crate::optim::{Adam, ParamId, ParamStore};
use crate::real::Real;
use crate::routing::{self, RoutingConfig, RoutingOutput, RoutingParams};
use crate::tape::{MarginParams, Tape, Var};
use crate::tensor::Tensor;

/// Token id reserved for padding.
pub const PAD_ID: usize = 0;
/// Token id for out-of-vocabulary words.
pub const UNK_ID: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Margin,
    CrossEntropy,
}

/// Weight initialization. Biases start at zero and the GCN weight at the identity.
///
/// The default keeps embeddings in `±0.05` but scales every other weight by
/// its fan-in and fan-out; a flat `±0.05` everywhere shrinks the class
/// capsules to ~1e-20 through the two squashes and leaves nothing to train.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Init {
    /// Every weight drawn from `U(−scale, scale)`.
    Uniform { scale: f64 },
    /// Embeddings from `U(−embed_scale, embed_scale)`; other weights from
    /// `U(−√(6/(fan_in+fan_out)), +√(6/(fan_in+fan_out)))`.
    Glorot { embed_scale: f64 },
}

impl Default for Init {
    fn default() -> Self {
        Init::Glorot { embed_scale: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding width `D`.
    pub embed_dim: usize,
    /// N-gram window `K`.
    pub ngram: usize,
    pub stride: usize,
    /// NCL filter count `B1`.
    pub conv_channels: usize,
    /// PCL filter count `B2`.
    pub capsule_channels: usize,
    /// Capsules after compression.
    pub num_capsules: usize,
    /// Capsule dimension `d`.
    pub capsule_dim: usize,
    pub num_classes: usize,
    /// Padded document length `L`.
    pub max_len: usize,
    pub vocab_size: usize,
    pub routing: RoutingConfig,
    pub loss: LossKind,
    pub init: Init,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 300,
            ngram: 3,
            stride: 2,
            conv_channels: 64,
            capsule_channels: 64,
            num_capsules: 50,
            capsule_dim: 64,
            num_classes: 2,
            max_len: 64,
            vocab_size: 2,
            routing: RoutingConfig::default(),
            loss: LossKind::Margin,
            init: Init::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Number of n-gram positions `L'`.
    pub fn positions(&self) -> usize {
        kernels::conv_output_len(self.max_len, self.ngram, self.stride).unwrap_or(0)
    }

    /// Primary capsules before compression, `L'·B2`.
    pub fn primary_count(&self) -> usize {
        self.positions() * self.capsule_channels
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("embed_dim", self.embed_dim),
            ("ngram", self.ngram),
            ("stride", self.stride),
            ("conv_channels", self.conv_channels),
            ("capsule_channels", self.capsule_channels),
            ("num_capsules", self.num_capsules),
            ("capsule_dim", self.capsule_dim),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("num_classes must be at least 2".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::InvalidConfig("vocab_size must cover the pad and unk ids".into()));
        }
        if self.max_len < self.ngram {
            return Err(Error::InvalidConfig(format!(
                "max_len {} is shorter than the n-gram window {}",
                self.max_len, self.ngram
            )));
        }
        self.routing.validate()
    }

    /// Names and shapes of every parameter block, in creation order.
    pub fn block_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, c) = (self.capsule_dim, self.num_classes);
        let mut blocks = vec![
            ("embedding".into(), vec![self.vocab_size, self.embed_dim]),
            ("ncl.weight".into(), vec![self.conv_channels, self.ngram * self.embed_dim]),
            ("ncl.bias".into(), vec![self.conv_channels]),
            ("pcl.weight".into(), vec![self.capsule_channels, self.conv_channels, d]),
            ("pcl.bias".into(), vec![self.capsule_channels, d]),
            ("compress.weight".into(), vec![self.num_capsules, self.primary_count()]),
            ("transform.weight".into(), vec![c, d, d]),
            ("transform.bias".into(), vec![c, d]),
        ];
        if self.routing.uses_gcn_weight() {
            blocks.push(("routing.gcn_weight".into(), vec![d, d]));
        }
        if self.routing.uses_attention() {
            blocks.push(("routing.attention.weight".into(), vec![d]));
            blocks.push(("routing.attention.bias".into(), vec![]));
        }
        blocks
    }
}

/// Padded token ids for a batch of documents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    /// `B×L` ids, row-major.
    pub token_ids: Vec<usize>,
    pub seq_len: usize,
    pub labels: Vec<usize>,
    /// Unpadded lengths, each at most `seq_len`.
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn tokens(&self, i: usize) -> &[usize] {
        &self.token_ids[i * self.seq_len..(i + 1) * self.seq_len]
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockIds {
    embedding: ParamId,
    ncl_w: ParamId,
    ncl_b: ParamId,
    pcl_w: ParamId,
    pcl_b: ParamId,
    compress: ParamId,
    trans_w: ParamId,
    trans_b: ParamId,
    gcn: Option<ParamId>,
    att: Option<(ParamId, ParamId)>,
}

/// Tape vars for one document's forward pass.
#[derive(Debug, Clone)]
pub struct DocForward {
    pub embedded: Var,
    /// NCL output after ReLU, `[L', B1]`.
    pub ncl: Var,
    /// PCL projection before squash, `[L'·B2, d]`.
    pub pcl_pre: Var,
    /// Primary capsules, `[L'·B2, d]`.
    pub pcl: Var,
    /// Compressed child capsules `u`, `[N, d]`.
    pub children: Var,
    /// Prediction vectors `û`, `[C, N, d]`.
    pub predictions: Var,
    pub routing: RoutingOutput,
    /// Class capsules `v`, `[C, d]`.
    pub v: Var,
    /// Class lengths `p̂`, `[C]`.
    pub probs: Var,
}

/// Forward results for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutput<T = f32> {
    /// `[B, C, d]`.
    pub v: Tensor<T>,
    /// `[B, C]`.
    pub probs: Tensor<T>,
}

impl<T: Real> BatchOutput<T> {
    pub fn predictions(&self) -> Vec<usize> {
        let c = self.probs.shape()[1];
        self.probs
            .data()
            .chunks(c)
            .map(|row| argmax(&row.iter().map(|x| x.to_f64()).collect::<Vec<_>>()))
            .collect()
    }
}

/// Loss and accuracy tallies for a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepStats {
    pub loss_sum: f64,
    pub correct: usize,
    pub count: usize,
}

impl StepStats {
    pub fn merge(&mut self, other: StepStats) {
        self.loss_sum += other.loss_sum;
        self.correct += other.correct;
        self.count += other.count;
    }

    pub fn mean_loss(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.loss_sum / self.count as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.correct as f64 / self.count as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model<T: Real = f32> {
    config: ModelConfig,
    store: ParamStore<T>,
    ids: BlockIds,
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label >= classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(())
}

fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    libm::sqrt(6.0 / (fan_in + fan_out) as f64)
}

impl<T: Real> Model<T> {
    /// Builds a model with freshly initialized parameters.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (d, c) = (config.capsule_dim, config.num_classes);
        let mut uniform = |shape: Vec<usize>, scale: f64| -> Tensor<T> {
            Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-scale..=scale)))
        };
        let scale = |fan_in: usize, fan_out: usize, embed: bool| match config.init {
            Init::Uniform { scale } => scale,
            Init::Glorot { embed_scale } if embed => embed_scale,
            Init::Glorot { .. } => glorot(fan_in, fan_out),
        };

        let mut embedding = uniform(vec![config.vocab_size, config.embed_dim], scale(0, 0, true));
        embedding.data_mut()[..config.embed_dim].fill(T::ZERO);
        let span = config.ngram * config.embed_dim;
        let ids = BlockIds {
            embedding: store.add("embedding", embedding),
            ncl_w: store.add(
                "ncl.weight",
                uniform(vec![config.conv_channels, span], scale(span, config.conv_channels, false)),
            ),
            ncl_b: store.add("ncl.bias", Tensor::zeros([config.conv_channels])),
            pcl_w: store.add(
                "pcl.weight",
                uniform(
                    vec![config.capsule_channels, config.conv_channels, d],
                    scale(config.conv_channels, d, false),
                ),
            ),
            pcl_b: store.add("pcl.bias", Tensor::zeros([config.capsule_channels, d])),
            compress: store.add(
                "compress.weight",
                uniform(
                    vec![config.num_capsules, config.primary_count()],
                    scale(config.primary_count(), config.num_capsules, false),
                ),
            ),
            trans_w: store.add("transform.weight", uniform(vec![c, d, d], scale(d, d, false))),
            trans_b: store.add("transform.bias", Tensor::zeros([c, d])),
            gcn: config
                .routing
                .uses_gcn_weight()
                .then(|| store.add("routing.gcn_weight", Tensor::identity(d))),
            att: None,
        };
        let att = config.routing.uses_attention().then(|| {
            let w = store.add("routing.attention.weight", uniform(vec![d], scale(d, 1, false)));
            let b = store.add("routing.attention.bias", Tensor::scalar(T::ZERO));
            (w, b)
        });
        Ok(Self {
            ids: BlockIds { att, ..ids },
            config,
            store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.numel()
    }

    /// Same architecture and values in another scalar type.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            ids: self.ids,
        }
    }

    /// Forward pass of one padded document against an explicit store.
    pub fn forward_with(&self, tape: &mut Tape<T>, store: &ParamStore<T>, tokens: &[usize]) -> Result<DocForward> {
        let cfg = &self.config;
        if tokens.len() != cfg.max_len {
            return Err(Error::ShapeMismatch {
                op: "forward",
                left: vec![tokens.len()],
                right: vec![cfg.max_len],
            });
        }
        let ids = &self.ids;
        let table = tape.param(store, ids.embedding);
        let embedded = tape.gather(table, tokens, Some(PAD_ID))?;
        let (w, b) = (tape.param(store, ids.ncl_w), tape.param(store, ids.ncl_b));
        let ncl_pre = tape.ngram_conv(embedded, w, b, cfg.ngram, cfg.stride)?;
        let ncl = tape.relu(ncl_pre);
        let (w, b) = (tape.param(store, ids.pcl_w), tape.param(store, ids.pcl_b));
        let pcl_pre = tape.primary_caps(ncl, w, b)?;
        let pcl = tape.squash(pcl_pre)?;
        let cw = tape.param(store, ids.compress);
        let children = tape.matmul(cw, pcl)?;
        let (w, b) = (tape.param(store, ids.trans_w), tape.param(store, ids.trans_b));
        let predictions = tape.transform(children, w, b)?;
        let params = RoutingParams {
            gcn_weight: ids.gcn.map(|id| tape.param(store, id)),
            attention: ids.att.map(|(w, b)| (tape.param(store, w), tape.param(store, b))),
        };
        let routing = routing::route(tape, predictions, children, &cfg.routing, &params)?;
        let v = routing.v;
        let probs = tape.row_norms(v)?;
        Ok(DocForward {
            embedded,
            ncl,
            pcl_pre,
            pcl,
            children,
            predictions,
            routing,
            v,
            probs,
        })
    }

    pub fn forward_doc(&self, tape: &mut Tape<T>, tokens: &[usize]) -> Result<DocForward> {
        self.forward_with(tape, &self.store, tokens)
    }

    pub fn loss(&self, tape: &mut Tape<T>, probs: Var, label: usize) -> Result<Var> {
        match self.config.loss {
            LossKind::Margin => tape.margin_loss(probs, label, MarginParams::default()),
            LossKind::CrossEntropy => tape.cross_entropy(probs, label),
        }
    }

    /// Unscaled loss of one document against an explicit store.
    pub fn doc_loss_with(&self, tape: &mut Tape<T>, store: &ParamStore<T>, tokens: &[usize], label: usize) -> Result<Var> {
        check_label(label, self.config.num_classes)?;
        let fwd = self.forward_with(tape, store, tokens)?;
        self.loss(tape, fwd.probs, label)
    }

    /// Class capsules and lengths for one padded document.
    pub fn predict_doc(&self, tokens: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let fwd = self.forward_doc(&mut tape, tokens)?;
        Ok((tape.value(fwd.v).clone(), tape.value(fwd.probs).clone()))
    }

    /// Forward pass over a batch, returning `v: [B, C, d]` and `p̂: [B, C]`.
    pub fn forward(&self, batch: &Batch) -> Result<BatchOutput<T>> {
        let (c, d) = (self.config.num_classes, self.config.capsule_dim);
        let mut v = Vec::with_capacity(batch.len() * c * d);
        let mut probs = Vec::with_capacity(batch.len() * c);
        for i in 0..batch.len() {
            let (vi, pi) = self.predict_doc(batch.tokens(i))?;
            v.extend_from_slice(vi.data());
            probs.extend_from_slice(pi.data());
        }
        Ok(BatchOutput {
            v: Tensor::new([batch.len(), c, d], v)?,
            probs: Tensor::new([batch.len(), c], probs)?,
        })
    }

    /// Loss and correctness on a batch without touching gradients.
    pub fn evaluate_batch(&self, batch: &Batch) -> Result<StepStats> {
        let mut stats = StepStats::default();
        for i in 0..batch.len() {
            let mut tape = Tape::new();
            check_label(batch.labels[i], self.config.num_classes)?;
            let fwd = self.forward_doc(&mut tape, batch.tokens(i))?;
            let loss = self.loss(&mut tape, fwd.probs, batch.labels[i])?;
            let probs = tape.value(fwd.probs).to_f64_vec();
            stats.loss_sum += tape.value(loss).item().to_f64();
            stats.correct += usize::from(argmax(&probs) == batch.labels[i]);
            stats.count += 1;
        }
        Ok(stats)
    }

    /// Zeroes gradients, then accumulates the gradient of the batch-mean loss.
    pub fn accumulate_batch(&mut self, batch: &Batch) -> Result<StepStats> {
        self.store.zero_grad();
        let mut stats = StepStats::default();
        let scale = 1.0 / batch.len().max(1) as f64;
        for i in 0..batch.len() {
            check_label(batch.labels[i], self.config.num_classes)?;
            let mut tape = Tape::new();
            let fwd = self.forward_with(&mut tape, &self.store, batch.tokens(i))?;
            let loss = self.loss(&mut tape, fwd.probs, batch.labels[i])?;
            let value = tape.value(loss).item().to_f64();
            if !value.is_finite() {
                return Err(tape.first_non_finite().unwrap_or(Error::NonFinite {
                    node: loss.0,
                    op: "loss",
                }));
            }
            let scaled = tape.scale(loss, scale);
            tape.backward(scaled)?;
            self.store.accumulate_grads(&tape);
            let probs = tape.value(fwd.probs).to_f64_vec();
            stats.loss_sum += value;
            stats.correct += usize::from(argmax(&probs) == batch.labels[i]);
            stats.count += 1;
        }
        Ok(stats)
    }

    /// One optimizer step on a batch.
    pub fn train_batch(&mut self, batch: &Batch, adam: &Adam) -> Result<StepStats> {
        let stats = self.accumulate_batch(batch)?;
        adam.step(self.store.params_mut())?;
        Ok(stats)
    }

    /// Adds `U(−scale, scale)` noise to every trainable value. Finite
    /// differences need this: biases start at exactly zero, where the squash
    /// of a zero vector is not twice differentiable.
    pub fn perturb(&mut self, scale: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let width = self.config.embed_dim;
        for p in self.store.params_mut() {
            let skip = if p.name == "embedding" { width } else { 0 };
            for x in &mut p.value.data_mut()[skip..] {
                *x = T::from_f64(x.to_f64() + rng.random_range(-scale..=scale));
            }
        }
    }

    /// Finite-difference check of every parameter block on one document. The
    /// frozen pad row of the embedding is left out.
    pub fn gradcheck(&self, tokens: &[usize], label: usize, step: f64, hook: Option<GradHook<'_>>) -> Result<Vec<BlockCheck>> {
        let width = self.config.embed_dim;
        gradcheck::check_params_except(
            &self.store,
            step,
            |tape, store| self.doc_loss_with(tape, store, tokens, label),
            hook,
            &|name, i| name == "embedding" && i / width == PAD_ID,
        )
    }
}
