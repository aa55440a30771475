//! Training: per-level cross-entropy with level priorities and dynamic
//! group weights, closed-form gradients, and a seeded SGD loop.
//!
//! The batch loss is the mean over instances of
//! `sum_i pi[i] * w[j][i] * ce[j][i]`, where `ce` is the cross-entropy of
//! the level's (possibly masked) softmax output against the gold class and
//! `w` are the dynamic fairness weights (all ones for variants that do not
//! reweight). A small floor inside the logarithm keeps the loss finite when
//! a gold class is driven to probability zero.
//!
//! Gradients are hand-derived. The dynamic weights depend on predictions
//! only through discrete counts, so they are treated as constants of the
//! step. For masked variants, the mask itself is a function of the previous
//! level's probabilities; [`MaskGradient`] selects whether that dependence
//! is ignored (`Detached`, the default: each level trains greedily given
//! its mask) or differentiated through (`Full`: upper levels receive
//! feedback from the levels below).

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fairness::{apply_weights, FairnessConfig, GroupId, GroupVocab, WeightTable};
use crate::taxonomy::{ClassId, Taxonomy, TransitionMatrix};
use crate::ttc::{argmax, forward_with, ForwardTrace, ModelParams, Variant};

/// Floor added to the gold-class probability inside the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// How masked variants treat the mask during backpropagation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MaskGradient {
    /// The mask is a constant of the step; only the direct softmax path
    /// receives gradient.
    #[default]
    Detached,
    /// Differentiate through the mask, so a level's loss also adjusts the
    /// levels above it.
    Full,
}

impl std::str::FromStr for MaskGradient {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "detached" => Ok(MaskGradient::Detached),
            "full" => Ok(MaskGradient::Full),
            other => Err(Error::Config(format!(
                "unknown mask gradient mode '{other}' (expected detached or full)"
            ))),
        }
    }
}

/// When dynamic weights are recomputed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum WeightCadence {
    /// From each batch's own predictions, every step.
    #[default]
    Batch,
    /// From full-training-set predictions once per epoch.
    Epoch,
}

impl std::str::FromStr for WeightCadence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "batch" => Ok(WeightCadence::Batch),
            "epoch" => Ok(WeightCadence::Epoch),
            other => Err(Error::Config(format!(
                "unknown weight cadence '{other}' (expected batch or epoch)"
            ))),
        }
    }
}

/// Everything the training loop needs to know.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Softmax temperature.
    pub tau: f64,
    /// SGD learning rate.
    pub lr: f64,
    /// Classical momentum coefficient in `[0, 1)`.
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds both parameter initialization and epoch shuffles.
    pub seed: u64,
    /// Level priorities; `None` means all ones.
    pub pi: Option<Vec<f64>>,
    pub mask_gradient: MaskGradient,
    pub weight_cadence: WeightCadence,
    pub fairness: FairnessConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Base,
            tau: 1.0,
            lr: 0.1,
            momentum: 0.9,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            pi: None,
            mask_gradient: MaskGradient::Detached,
            weight_cadence: WeightCadence::Batch,
            fairness: FairnessConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Validate and return the effective level priorities.
    pub fn validate(&self, n_levels: usize) -> Result<Vec<f64>> {
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be positive and finite, got {}",
                self.lr
            )));
        }
        if !self.momentum.is_finite() || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(Error::Config(format!(
                "temperature must be positive and finite, got {}",
                self.tau
            )));
        }
        self.fairness.validate()?;
        match &self.pi {
            None => Ok(vec![1.0; n_levels]),
            Some(pi) => {
                if pi.len() != n_levels {
                    return Err(Error::Config(format!(
                        "{} level priorities for {n_levels} levels",
                        pi.len()
                    )));
                }
                if pi.iter().any(|p| !p.is_finite() || *p < 0.0) {
                    return Err(Error::Config(
                        "level priorities must be non-negative finite numbers".into(),
                    ));
                }
                Ok(pi.clone())
            }
        }
    }
}

/// A batch in model-ready form: `f64` features, label paths as per-level
/// local class indices, and group ids matching the trainer's vocabulary.
#[derive(Clone, Debug)]
pub struct BatchData {
    pub features: Array2<f64>,
    pub labels: Vec<Vec<usize>>,
    pub groups: Vec<GroupId>,
}

impl BatchData {
    /// Convert selected dataset rows (all of them for `0..ds.len()`).
    pub fn from_dataset(ds: &Dataset, tax: &Taxonomy, indices: &[usize]) -> Result<BatchData> {
        let mut features = Array2::zeros((indices.len(), ds.dim()));
        let mut labels = Vec::with_capacity(indices.len());
        let mut groups = Vec::with_capacity(indices.len());
        for (row, &j) in indices.iter().enumerate() {
            if j >= ds.len() {
                return Err(Error::Data(format!(
                    "batch index {j} beyond dataset of {} instances",
                    ds.len()
                )));
            }
            for (col, &v) in ds.features.row(j).iter().enumerate() {
                features[[row, col]] = v as f64;
            }
            labels.push(ds.labels[j].iter().map(|&c| tax.local_index(c)).collect());
            groups.push(ds.groups[j]);
        }
        Ok(BatchData {
            features,
            labels,
            groups,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copy out a sub-batch, preserving the given order.
    pub fn gather(&self, indices: &[usize]) -> BatchData {
        let mut features = Array2::zeros((indices.len(), self.features.ncols()));
        for (row, &j) in indices.iter().enumerate() {
            features.row_mut(row).assign(&self.features.row(j));
        }
        BatchData {
            features,
            labels: indices.iter().map(|&j| self.labels[j].clone()).collect(),
            groups: indices.iter().map(|&j| self.groups[j]).collect(),
        }
    }
}

/// Cross-entropy of one level's output distribution against the gold class.
pub fn level_loss(probs: ndarray::ArrayView1<f64>, true_class: usize) -> Result<f64> {
    if true_class >= probs.len() {
        return Err(Error::Shape(format!(
            "gold class {true_class} out of range for {} classes",
            probs.len()
        )));
    }
    Ok(-(probs[true_class] + PROB_FLOOR).ln())
}

/// Per-parameter gradients, shaped like the model.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

/// One epoch's summary line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Training accuracy per level, measured on the fly from each batch's
    /// pre-update predictions.
    pub level_accuracy: Vec<f64>,
}

/// Per-epoch training log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
}

impl TrainReport {
    /// One JSON object per line, one line per epoch.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("epoch record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Shared inputs of a loss/gradient evaluation.
struct Ctx<'a> {
    transitions: &'a [TransitionMatrix],
    tax: &'a Taxonomy,
    vocab: &'a GroupVocab,
    fairness: &'a FairnessConfig,
    pi: &'a [f64],
    mask_gradient: MaskGradient,
}

struct StepOutput {
    loss: f64,
    grads: Option<Gradients>,
    traces: Vec<ForwardTrace>,
}

/// Forward every instance of the batch.
fn forward_batch(params: &ModelParams, ctx: &Ctx, batch: &BatchData) -> Result<Vec<ForwardTrace>> {
    let mut traces = Vec::with_capacity(batch.len());
    for row in batch.features.outer_iter() {
        traces.push(forward_with(params, ctx.transitions, row)?);
    }
    Ok(traces)
}

/// Predicted class paths (global ids) from a batch's traces.
fn trace_paths(ctx: &Ctx, traces: &[ForwardTrace]) -> Vec<Vec<ClassId>> {
    traces
        .iter()
        .map(|t| {
            t.probs
                .iter()
                .enumerate()
                .map(|(level, p)| ctx.tax.class_id(level, argmax(p.view())))
                .collect()
        })
        .collect()
}

/// Loss weights for the batch: dynamic if the variant reweights, all ones
/// otherwise.
fn weights_from_traces(
    params: &ModelParams,
    ctx: &Ctx,
    batch: &BatchData,
    traces: &[ForwardTrace],
) -> Result<WeightTable> {
    if params.variant.uses_reweighting() {
        let paths = trace_paths(ctx, traces);
        WeightTable::compute(ctx.fairness, ctx.vocab, &batch.groups, &paths)
    } else {
        Ok(WeightTable::ones(batch.len(), params.n_levels()))
    }
}

/// One evaluation of the batch objective: forward, (optionally preset)
/// weights, loss, and optionally gradients.
fn run_batch(
    params: &ModelParams,
    ctx: &Ctx,
    batch: &BatchData,
    preset_weights: Option<WeightTable>,
    want_grads: bool,
) -> Result<StepOutput> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let n = params.n_levels();
    let m = batch.len();
    let traces = forward_batch(params, ctx, batch)?;
    let weights = match preset_weights {
        Some(w) => w,
        None => weights_from_traces(params, ctx, batch, &traces)?,
    };

    let mut ce = Array2::zeros((m, n));
    for (j, trace) in traces.iter().enumerate() {
        for i in 0..n {
            ce[[j, i]] = level_loss(trace.probs[i].view(), batch.labels[j][i])?;
        }
    }
    let loss = apply_weights(ce.view(), &weights, ctx.pi)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("batch loss is {loss}")));
    }

    let grads = if want_grads {
        Some(backward(params, ctx, batch, &traces, &weights)?)
    } else {
        None
    };
    Ok(StepOutput {
        loss,
        grads,
        traces,
    })
}

/// Closed-form gradient of the batch objective with respect to every weight
/// and bias.
///
/// Per instance and level, with `p = softmax(u / tau)`, gold class `y` and
/// coefficient `c = pi * w`, the derivative of `-c * ln(p[y] + floor)` with
/// respect to the softmax input `u` is
/// `c * (p[y] / (p[y] + floor)) * (p - onehot(y)) / tau`. In `Full` mode a
/// masked level additionally passes gradient to the previous level's
/// probabilities through the mask product: `v = M (g_next * z_next)` pulled
/// back through the softmax Jacobian, `(p * v - (p . v) p) / tau`. The mask
/// itself multiplies the logits, so `du/dz` is the mask for masked variants
/// and the identity for flat ones.
fn backward(
    params: &ModelParams,
    ctx: &Ctx,
    batch: &BatchData,
    traces: &[ForwardTrace],
    weights: &WeightTable,
) -> Result<Gradients> {
    let n = params.n_levels();
    let m = batch.len();
    let masked = params.variant.uses_mask();
    let through_mask = masked && ctx.mask_gradient == MaskGradient::Full;

    // dL/dz per level, all instances; filled row by row.
    let mut dz: Vec<Array2<f64>> = (0..n)
        .map(|i| Array2::zeros((m, params.weights[i].nrows())))
        .collect();

    for (j, trace) in traces.iter().enumerate() {
        let mut g: Vec<Array1<f64>> = vec![Array1::zeros(0); n];
        for i in (0..n).rev() {
            let p = &trace.probs[i];
            let y = batch.labels[j][i];
            let c = ctx.pi[i] * weights.get(j, i);
            let scale = c * p[y] / (p[y] + PROB_FLOOR) / params.tau;
            let mut gi = p * scale;
            gi[y] -= scale;
            if through_mask && i + 1 < n {
                let t = &g[i + 1] * &trace.logits[i + 1];
                let v = ctx.transitions[i].array().dot(&t);
                let dot = p.dot(&v);
                let indirect = (&(p * &v) - &(p * dot)) / params.tau;
                gi += &indirect;
            }
            g[i] = gi;
        }
        for i in 0..n {
            if masked {
                dz[i].row_mut(j).assign(&(&g[i] * &trace.masks[i]));
            } else {
                dz[i].row_mut(j).assign(&g[i]);
            }
        }
    }

    let scale = 1.0 / m as f64;
    let mut gw = Vec::with_capacity(n);
    let mut gb = Vec::with_capacity(n);
    for level_dz in &dz {
        gw.push(level_dz.t().dot(&batch.features) * scale);
        gb.push(level_dz.sum_axis(Axis(0)) * scale);
    }
    Ok(Gradients {
        weights: gw,
        biases: gb,
    })
}

fn make_ctx<'a>(
    tax: &'a Taxonomy,
    transitions: &'a [TransitionMatrix],
    vocab: &'a GroupVocab,
    cfg: &'a TrainConfig,
    pi: &'a [f64],
) -> Ctx<'a> {
    Ctx {
        transitions,
        tax,
        vocab,
        fairness: &cfg.fairness,
        pi,
        mask_gradient: cfg.mask_gradient,
    }
}

/// The batch objective: weighted hierarchical cross-entropy, with dynamic
/// weights computed from this batch's own predictions when the variant
/// reweights.
pub fn batch_loss(
    params: &ModelParams,
    tax: &Taxonomy,
    batch: &BatchData,
    cfg: &TrainConfig,
) -> Result<f64> {
    let pi = cfg.validate(tax.n_levels())?;
    let vocab = cfg.fairness.vocab()?;
    let transitions = tax.transition_matrices()?;
    let ctx = make_ctx(tax, &transitions, &vocab, cfg, &pi);
    Ok(run_batch(params, &ctx, batch, None, false)?.loss)
}

/// Gradient of the batch objective at the given parameters.
///
/// Precisely: the exact derivative of [`step_loss`] with the step context
/// captured at the same parameters. [`batch_loss`] agrees with that
/// objective in value at the capture point but recomputes the discrete
/// structure (weight table, and masks under `Detached`) when parameters
/// move, so it is not the function being differentiated there.
pub fn gradients(
    params: &ModelParams,
    tax: &Taxonomy,
    batch: &BatchData,
    cfg: &TrainConfig,
) -> Result<Gradients> {
    let pi = cfg.validate(tax.n_levels())?;
    let vocab = cfg.fairness.vocab()?;
    let transitions = tax.transition_matrices()?;
    let ctx = make_ctx(tax, &transitions, &vocab, cfg, &pi);
    Ok(run_batch(params, &ctx, batch, None, true)?
        .grads
        .expect("gradients requested"))
}

/// The discrete structure of one optimization step, captured at a fixed set
/// of parameters: the dynamic weight table and, under
/// [`MaskGradient::Detached`], every instance's per-level masks.
///
/// Dynamic weights come from prediction counts and are never
/// differentiable; detached mode additionally holds each mask constant. The
/// smooth function left over once both are pinned is [`step_loss`], the
/// objective whose exact gradient [`gradients`] returns — and therefore the
/// right target for finite-difference validation.
#[derive(Clone, Debug)]
pub struct StepContext {
    weights: WeightTable,
    frozen_masks: Option<Vec<Vec<Array1<f64>>>>,
}

/// Capture the step structure (weights, and masks under `Detached`) at
/// `params`.
pub fn step_context(
    params: &ModelParams,
    tax: &Taxonomy,
    batch: &BatchData,
    cfg: &TrainConfig,
) -> Result<StepContext> {
    let pi = cfg.validate(tax.n_levels())?;
    let vocab = cfg.fairness.vocab()?;
    let transitions = tax.transition_matrices()?;
    let ctx = make_ctx(tax, &transitions, &vocab, cfg, &pi);
    let traces = forward_batch(params, &ctx, batch)?;
    let weights = weights_from_traces(params, &ctx, batch, &traces)?;
    let frozen_masks = (params.variant.uses_mask() && cfg.mask_gradient == MaskGradient::Detached)
        .then(|| traces.iter().map(|t| t.masks.clone()).collect());
    Ok(StepContext {
        weights,
        frozen_masks,
    })
}

/// The batch objective with the step structure pinned to `step`.
///
/// Equals [`batch_loss`] when evaluated at the parameters the context was
/// captured at; away from them it keeps the weight table (and, under
/// `Detached`, the masks) fixed instead of recomputing them.
pub fn step_loss(
    params: &ModelParams,
    tax: &Taxonomy,
    batch: &BatchData,
    cfg: &TrainConfig,
    step: &StepContext,
) -> Result<f64> {
    let pi = cfg.validate(tax.n_levels())?;
    let n = tax.n_levels();
    match &step.frozen_masks {
        None => {
            let vocab = cfg.fairness.vocab()?;
            let transitions = tax.transition_matrices()?;
            let ctx = make_ctx(tax, &transitions, &vocab, cfg, &pi);
            Ok(run_batch(params, &ctx, batch, Some(step.weights.clone()), false)?.loss)
        }
        Some(masks) => {
            if masks.len() != batch.len() {
                return Err(Error::Shape(format!(
                    "step context holds masks for {} instances, batch has {}",
                    masks.len(),
                    batch.len()
                )));
            }
            let mut ce = Array2::zeros((batch.len(), n));
            for (j, row) in batch.features.outer_iter().enumerate() {
                for i in 0..n {
                    let z = crate::ttc::level_logits(params, i, row)?;
                    let p = crate::ttc::softmax_t((&z * &masks[j][i]).view(), params.tau)?;
                    ce[[j, i]] = level_loss(p.view(), batch.labels[j][i])?;
                }
            }
            apply_weights(ce.view(), &step.weights, &pi)
        }
    }
}

/// Train a model on `ds` with seeded minibatch SGD plus momentum.
///
/// Identical inputs produce bit-identical parameters and reports: the seed
/// fixes initialization and every epoch's shuffle, and all arithmetic is
/// order-stable. Zero epochs returns the initialization untouched.
pub fn fit(ds: &Dataset, tax: &Taxonomy, cfg: &TrainConfig) -> Result<(ModelParams, TrainReport)> {
    let vocab = cfg.fairness.vocab()?;
    ds.validate(tax, &vocab)?;
    if ds.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    let pi = cfg.validate(tax.n_levels())?;
    let transitions = tax.transition_matrices()?;
    let n = tax.n_levels();
    let m = ds.len();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::init_with_rng(tax, ds.dim(), cfg.variant, cfg.tau, &mut rng)?;
    let full = BatchData::from_dataset(ds, tax, &(0..m).collect::<Vec<_>>())?;
    let ctx = make_ctx(tax, &transitions, &vocab, cfg, &pi);

    let mut vel_w: Vec<Array2<f64>> = params
        .weights
        .iter()
        .map(|w| Array2::zeros(w.dim()))
        .collect();
    let mut vel_b: Vec<Array1<f64>> = params
        .biases
        .iter()
        .map(|b| Array1::zeros(b.len()))
        .collect();

    let mut indices: Vec<usize> = (0..m).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        // Epoch cadence: one weight table from full-set predictions with the
        // parameters as they stand at the epoch's start.
        let epoch_weights =
            if params.variant.uses_reweighting() && cfg.weight_cadence == WeightCadence::Epoch {
                let traces =
                    forward_batch(&params, &ctx, &full).map_err(|e| annotate_epoch(e, epoch))?;
                Some(weights_from_traces(&params, &ctx, &full, &traces)?)
            } else {
                None
            };

        indices.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = vec![0usize; n];
        for chunk in indices.chunks(cfg.batch_size) {
            let batch = full.gather(chunk);
            let preset = epoch_weights.as_ref().map(|t| t.gather(chunk));
            let out = run_batch(&params, &ctx, &batch, preset, true)
                .map_err(|e| annotate_epoch(e, epoch))?;
            loss_sum += out.loss * chunk.len() as f64;
            for (trace, labels) in out.traces.iter().zip(&batch.labels) {
                for i in 0..n {
                    if argmax(trace.probs[i].view()) == labels[i] {
                        correct[i] += 1;
                    }
                }
            }
            let grads = out.grads.expect("gradients requested");
            for i in 0..n {
                vel_w[i] *= cfg.momentum;
                vel_w[i] += &grads.weights[i];
                vel_b[i] *= cfg.momentum;
                vel_b[i] += &grads.biases[i];
                params.weights[i].scaled_add(-cfg.lr, &vel_w[i]);
                params.biases[i].scaled_add(-cfg.lr, &vel_b[i]);
            }
        }
        records.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / m as f64,
            level_accuracy: correct.iter().map(|&c| c as f64 / m as f64).collect(),
        });
    }
    Ok((params, TrainReport { records }))
}

fn annotate_epoch(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch}: {msg}")),
        other => other,
    }
}
