//! From-scratch fully-connected network for data-driven gain estimation.
//!
//! Three standardized inputs (leave-one-out received power, interference
//! constant, allocated desired power) feed a small ReLU stack with a linear
//! output head. Training is mini-batch Adam on mean absolute error with a
//! full reshuffle per epoch; the returned parameters are the ones with the
//! best validation MAE. Input standardization is fitted on the training
//! split only and stored with the model.
//!
//! The raw features are powers spanning several orders of magnitude across
//! large-scale draws, and the gain labels span the square root of that
//! range. Plain z-scoring leaves the network unable to track more than the
//! strongest draws, so the gain model standardizes the features in the log
//! domain and regresses the dimensionless gain alpha / sqrt(eta rho beta),
//! multiplying back by the known scale at inference. Both transforms are
//! stored in the model file; an identity-transform model behaves as a plain
//! standardized MLP.

use crate::precoding::Scheme;
use crate::rng::{derive_rng, parallel_batches, stream};
use crate::scenario::{NetworkConfig, ScenarioError};
use rand::Rng;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

/// Hidden layer widths used throughout; a linear scalar head is appended.
pub const DEFAULT_HIDDEN: [usize; 3] = [32, 64, 64];

/// Input features per sample.
pub const NUM_FEATURES: usize = 3;

#[derive(Debug, Error)]
pub enum MlpError {
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("training diverged (non-finite loss); consider a lower learning rate")]
    Diverged,
    #[error("unsupported model format version {0}")]
    FormatVersionMismatch(u32),
    #[error("corrupt model or dataset file: {0}")]
    CorruptFile(String),
    #[error("dataset is empty or split sizes are degenerate")]
    EmptyDataset,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("simulation failed while generating data: {0}")]
    Simulation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

/// Element-wise transform applied to the raw features before
/// standardization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureTransform {
    Identity,
    /// Natural log; inputs are clamped to a tiny positive floor first.
    Log,
}

impl FeatureTransform {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            FeatureTransform::Identity => v,
            FeatureTransform::Log => v.max(1e-300).ln(),
        }
    }
}

/// Scale multiplied onto the network head to form the final output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputScale {
    One,
    /// Square root of the raw feature at the given index.
    SqrtFeature(usize),
    /// Square root of the raw feature at the given index divided by the
    /// user's power fraction. With the allocated-desired-power feature this
    /// is sqrt(rho beta), which makes the regression target dimensionless
    /// and independent of the per-cell user count, so one trained model
    /// transfers across loads.
    SqrtFeatureOverEta(usize),
}

impl OutputScale {
    #[inline]
    fn value(self, features: &[f64], eta: f64) -> f64 {
        match self {
            OutputScale::One => 1.0,
            OutputScale::SqrtFeature(i) => features[i].max(0.0).sqrt(),
            OutputScale::SqrtFeatureOverEta(i) => (features[i].max(0.0) / eta).sqrt(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// row-major out_dim x in_dim.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub activation: Activation,
}

/// Per-feature standardization fitted on the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct InputStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InputStats {
    fn apply(&self, features: &[f64], out: &mut [f64]) {
        for i in 0..features.len() {
            out[i] = (features[i] - self.mean[i]) / self.std[i];
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelMeta {
    pub config_hash: u64,
    pub epochs: u32,
    pub best_val_mae: f64,
}

#[derive(Debug, Clone)]
pub struct MlpModel {
    pub layers: Vec<Layer>,
    pub input_stats: InputStats,
    pub feature_transform: FeatureTransform,
    pub output_scale: OutputScale,
    pub meta: ModelMeta,
}

impl MlpModel {
    /// Fresh model: weights uniform in +-sqrt(6 / (fan_in + fan_out)),
    /// biases zero, identity feature transform and unit output scale.
    pub fn init<R: Rng + ?Sized>(in_dim: usize, hidden: &[usize], rng: &mut R) -> MlpModel {
        let mut dims = vec![in_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let weights = (0..fan_in * fan_out)
                .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
                .collect();
            layers.push(Layer {
                in_dim: fan_in,
                out_dim: fan_out,
                weights,
                biases: vec![0.0; fan_out],
                activation: Activation::Relu,
            });
        }
        layers.last_mut().unwrap().activation = Activation::Linear;
        MlpModel {
            layers,
            input_stats: InputStats {
                mean: vec![0.0; in_dim],
                std: vec![1.0; in_dim],
            },
            feature_transform: FeatureTransform::Identity,
            output_scale: OutputScale::One,
            meta: ModelMeta {
                config_hash: 0,
                epochs: 0,
                best_val_mae: f64::INFINITY,
            },
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    fn standardized(&self, features: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; features.len()];
        for i in 0..features.len() {
            x[i] = self.feature_transform.apply(features[i]);
        }
        let mut out = vec![0.0; features.len()];
        self.input_stats.apply(&x, &mut out);
        out
    }

    /// Transform and standardize the raw features, run the layer stack, and
    /// apply the output scale. Models whose output scale involves the power
    /// fraction must go through [`MlpModel::forward_scaled`].
    pub fn forward(&self, features: &[f64]) -> Result<f64, MlpError> {
        self.forward_scaled(features, 1.0)
    }

    /// Like [`MlpModel::forward`], with the receiving user's power fraction
    /// supplied for eta-aware output scales.
    pub fn forward_scaled(&self, features: &[f64], eta: f64) -> Result<f64, MlpError> {
        if features.len() != self.in_dim() {
            return Err(MlpError::DimensionMismatch {
                expected: self.in_dim(),
                got: features.len(),
            });
        }
        let mut x = self.standardized(features);
        for layer in &self.layers {
            x = layer_forward(layer, &x);
        }
        Ok(x[0] * self.output_scale.value(features, eta))
    }
}

fn layer_forward(layer: &Layer, x: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(layer.out_dim);
    for o in 0..layer.out_dim {
        let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
        let mut acc = layer.biases[o];
        for (w, v) in row.iter().zip(x) {
            acc += w * v;
        }
        out.push(match layer.activation {
            Activation::Relu => acc.max(0.0),
            Activation::Linear => acc,
        });
    }
    out
}

/// Per-layer gradient buffers with the same shapes as the model.
#[derive(Debug, Clone)]
struct Gradients {
    w: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
}

impl Gradients {
    fn zeros(model: &MlpModel) -> Gradients {
        Gradients {
            w: model.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            b: model.layers.iter().map(|l| vec![0.0; l.biases.len()]).collect(),
        }
    }

    fn add(&mut self, other: &Gradients) {
        for (a, b) in self.w.iter_mut().zip(&other.w) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.b.iter_mut().zip(&other.b) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// Forward pass keeping every layer's output, then backprop of dL/d(output).
/// Returns the prediction; accumulates parameter gradients scaled by `scale`.
fn forward_backward(
    model: &MlpModel,
    features_std: &[f64],
    label: f64,
    scale: f64,
    grads: &mut Gradients,
) -> f64 {
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(model.layers.len() + 1);
    acts.push(features_std.to_vec());
    for layer in &model.layers {
        let next = layer_forward(layer, acts.last().unwrap());
        acts.push(next);
    }
    let pred = acts.last().unwrap()[0];
    // MAE: d|pred - label| / dpred = sign(pred - label)
    let mut delta = vec![(pred - label).signum() * scale];
    for (li, layer) in model.layers.iter().enumerate().rev() {
        let input = &acts[li];
        let output = &acts[li + 1];
        // gate the deltas through the activation derivative
        let gated: Vec<f64> = match layer.activation {
            Activation::Linear => delta.clone(),
            Activation::Relu => delta
                .iter()
                .zip(output)
                .map(|(d, o)| if *o > 0.0 { *d } else { 0.0 })
                .collect(),
        };
        for o in 0..layer.out_dim {
            grads.b[li][o] += gated[o];
            let wrow = &mut grads.w[li][o * layer.in_dim..(o + 1) * layer.in_dim];
            for (gw, inp) in wrow.iter_mut().zip(input) {
                *gw += gated[o] * inp;
            }
        }
        if li > 0 {
            let mut prev = vec![0.0; layer.in_dim];
            for o in 0..layer.out_dim {
                let wrow = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (p, w) in prev.iter_mut().zip(wrow) {
                    *p += gated[o] * w;
                }
            }
            delta = prev;
        }
    }
    pred
}

/// Adam state for one flat parameter vector.
#[derive(Debug, Clone)]
pub(crate) struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub(crate) fn new(len: usize) -> AdamState {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    /// One Adam update with bias correction at step `t` (1-based).
    pub(crate) fn step(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        t: u64,
        opts: &TrainOptions,
    ) {
        let b1t = 1.0 - opts.beta1.powi(t as i32);
        let b2t = 1.0 - opts.beta2.powi(t as i32);
        for i in 0..params.len() {
            self.m[i] = opts.beta1 * self.m[i] + (1.0 - opts.beta1) * grads[i];
            self.v[i] = opts.beta2 * self.v[i] + (1.0 - opts.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            params[i] -= opts.learning_rate * m_hat / (v_hat.sqrt() + opts.epsilon);
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Feature transform applied before standardization. The gain features
    /// are powers spanning orders of magnitude, so the default is log.
    pub feature_transform: FeatureTransform,
    /// Label scale regressed out during training and restored at inference.
    /// Defaults to sqrt(rho beta) recovered from the allocated-power
    /// feature and the known power fraction.
    pub output_scale: OutputScale,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            learning_rate: 0.01,
            batch_size: 128,
            epochs: 200,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            feature_transform: FeatureTransform::Log,
            output_scale: OutputScale::SqrtFeatureOverEta(2),
        }
    }
}

impl TrainOptions {
    fn config_hash(&self, n_samples: usize) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for v in [
            self.learning_rate.to_bits(),
            self.batch_size as u64,
            self.epochs as u64,
            self.beta1.to_bits(),
            self.beta2.to_bits(),
            self.epsilon.to_bits(),
            self.seed,
            n_samples as u64,
        ] {
            h ^= v;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

/// Labeled samples with a fixed 40/10/50 train/validation/test split in
/// draw-major order (samples of one large-scale draw stay on one side of
/// each boundary when the counts divide evenly).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// (leave-one-out power, interference constant, allocated desired power).
    pub features: Vec<[f64; NUM_FEATURES]>,
    /// true effective gain magnitudes.
    pub labels: Vec<f64>,
    /// the hardening-mean prediction for each sample's large-scale draw.
    pub baseline: Vec<f64>,
    /// the sampled user's downlink power fraction.
    pub eta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitRanges {
    pub train: std::ops::Range<usize>,
    pub val: std::ops::Range<usize>,
    pub test: std::ops::Range<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// 40% train, 10% validation, 50% test.
    pub fn split(&self) -> SplitRanges {
        let n = self.len();
        let train_end = (n as f64 * 0.4).round() as usize;
        let val_end = (n as f64 * 0.5).round() as usize;
        SplitRanges {
            train: 0..train_end,
            val: train_end..val_end,
            test: val_end..n,
        }
    }
}

/// Mean absolute error of the model over an index range of the dataset.
pub fn model_mae(model: &MlpModel, ds: &Dataset, range: std::ops::Range<usize>) -> f64 {
    let mut acc = 0.0;
    for i in range.clone() {
        let pred = model
            .forward_scaled(&ds.features[i], ds.eta[i])
            .expect("dims fixed")
            .max(0.0);
        acc += (pred - ds.labels[i]).abs();
    }
    acc / range.len() as f64
}

/// Mean absolute error of the per-draw constant predictor over a range.
pub fn baseline_mae(ds: &Dataset, range: std::ops::Range<usize>) -> f64 {
    let mut acc = 0.0;
    for i in range.clone() {
        acc += (ds.baseline[i] - ds.labels[i]).abs();
    }
    acc / range.len() as f64
}

#[derive(Debug, Clone)]
pub struct TrainHistory {
    pub train_mae: Vec<f64>,
    pub val_mae: Vec<f64>,
    pub best_epoch: usize,
}

/// Train a fresh model on the dataset's training split, tracking validation
/// MAE per epoch and returning the best-validation parameters.
pub fn train(
    dataset: &Dataset,
    hidden: &[usize],
    opts: &TrainOptions,
) -> Result<(MlpModel, TrainHistory), MlpError> {
    let split = dataset.split();
    if split.train.is_empty() || split.val.is_empty() {
        return Err(MlpError::EmptyDataset);
    }

    let mut rng = derive_rng(opts.seed, &[stream::TRAIN]);
    let mut model = MlpModel::init(NUM_FEATURES, hidden, &mut rng);
    model.feature_transform = opts.feature_transform;
    model.output_scale = opts.output_scale;

    let transformed: Vec<[f64; NUM_FEATURES]> = dataset
        .features
        .iter()
        .map(|f| {
            let mut out = [0.0; NUM_FEATURES];
            for i in 0..NUM_FEATURES {
                out[i] = opts.feature_transform.apply(f[i]);
            }
            out
        })
        .collect();

    // standardization from the training split only
    let n_train = split.train.len() as f64;
    let mut mean = vec![0.0; NUM_FEATURES];
    for i in split.train.clone() {
        for f in 0..NUM_FEATURES {
            mean[f] += transformed[i][f];
        }
    }
    for m in mean.iter_mut() {
        *m /= n_train;
    }
    let mut std = vec![0.0; NUM_FEATURES];
    for i in split.train.clone() {
        for f in 0..NUM_FEATURES {
            std[f] += (transformed[i][f] - mean[f]).powi(2);
        }
    }
    for s in std.iter_mut() {
        *s = (*s / n_train).sqrt();
        if !(*s > 0.0) {
            *s = 1.0;
        }
    }
    model.input_stats = InputStats { mean, std };

    // pre-standardized features and per-sample label scales
    let features_std: Vec<[f64; NUM_FEATURES]> = transformed
        .iter()
        .map(|f| {
            let mut out = [0.0; NUM_FEATURES];
            model.input_stats.apply(f, &mut out);
            out
        })
        .collect();
    let scales: Vec<f64> = dataset
        .features
        .iter()
        .zip(&dataset.eta)
        .map(|(f, eta)| {
            let s = opts.output_scale.value(f, *eta);
            if s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect();
    let labels_scaled: Vec<f64> = dataset
        .labels
        .iter()
        .zip(&scales)
        .map(|(y, s)| y / s)
        .collect();

    let mut adam_w: Vec<AdamState> = model
        .layers
        .iter()
        .map(|l| AdamState::new(l.weights.len()))
        .collect();
    let mut adam_b: Vec<AdamState> = model
        .layers
        .iter()
        .map(|l| AdamState::new(l.biases.len()))
        .collect();

    let mut history = TrainHistory {
        train_mae: Vec::with_capacity(opts.epochs),
        val_mae: Vec::with_capacity(opts.epochs),
        best_epoch: 0,
    };
    let mut best_val = f64::INFINITY;
    let mut best_layers = model.layers.clone();
    let mut step: u64 = 0;

    let mut indices: Vec<usize> = split.train.clone().collect();
    for epoch in 0..opts.epochs {
        // full reshuffle from the run seed
        let mut erng = derive_rng(opts.seed, &[stream::TRAIN, 1 + epoch as u64]);
        for i in (1..indices.len()).rev() {
            let j = erng.random_range(0..=i);
            indices.swap(i, j);
        }

        let mut epoch_abs_err = 0.0;
        for batch in indices.chunks(opts.batch_size) {
            step += 1;
            let grad_scale = 1.0 / batch.len() as f64;
            // fixed-size chunks summed in order: results do not depend on
            // the thread count
            let chunk_grads = parallel_batches(batch.len(), 16, |range| {
                let mut g = Gradients::zeros(&model);
                let mut abs_err = 0.0;
                for bi in range {
                    let idx = batch[bi];
                    let pred = forward_backward(
                        &model,
                        &features_std[idx],
                        labels_scaled[idx],
                        grad_scale,
                        &mut g,
                    );
                    // record the error in label units
                    abs_err += (pred - labels_scaled[idx]).abs() * scales[idx];
                }
                (g, abs_err)
            });
            let mut grads = Gradients::zeros(&model);
            for (g, abs_err) in chunk_grads {
                grads.add(&g);
                epoch_abs_err += abs_err;
            }
            for (li, layer) in model.layers.iter_mut().enumerate() {
                adam_w[li].step(&mut layer.weights, &grads.w[li], step, opts);
                adam_b[li].step(&mut layer.biases, &grads.b[li], step, opts);
            }
        }
        let train_mae = epoch_abs_err / indices.len() as f64;
        if !train_mae.is_finite() {
            return Err(MlpError::Diverged);
        }

        let mut val_abs = 0.0;
        for i in split.val.clone() {
            let mut x = features_std[i].to_vec();
            for layer in &model.layers {
                x = layer_forward(layer, &x);
            }
            val_abs += (x[0] - labels_scaled[i]).abs() * scales[i];
        }
        let val_mae = val_abs / split.val.len() as f64;
        history.train_mae.push(train_mae);
        history.val_mae.push(val_mae);
        if val_mae < best_val {
            best_val = val_mae;
            best_layers = model.layers.clone();
            history.best_epoch = epoch;
        }
    }

    model.layers = best_layers;
    model.meta = ModelMeta {
        config_hash: opts.config_hash(dataset.len()),
        epochs: opts.epochs as u32,
        best_val_mae: best_val,
    };
    Ok((model, history))
}

/// Generate a labeled dataset for a typical user (cell 0, user 0): one row
/// per (large-scale draw, small-scale block) in draw-major order.
pub fn generate_dataset(
    cfg: &NetworkConfig,
    n_large_scale: usize,
    n_small_scale: usize,
    scheme: Scheme,
    seed: u64,
) -> Result<Dataset, MlpError> {
    assert!(n_large_scale >= 1 && n_small_scale >= 1);
    cfg.validate()?;
    let per_draw: Vec<Result<(Vec<[f64; 3]>, Vec<f64>, f64, f64), String>> =
        parallel_batches(n_large_scale, 1, |range| {
            let draw = range.start;
            draw_rows(cfg, scheme, seed, draw as u64, n_small_scale).map_err(|e| e.to_string())
        });
    let mut features = Vec::with_capacity(n_large_scale * n_small_scale);
    let mut labels = Vec::with_capacity(n_large_scale * n_small_scale);
    let mut baseline = Vec::with_capacity(n_large_scale * n_small_scale);
    let mut eta = Vec::with_capacity(n_large_scale * n_small_scale);
    for r in per_draw {
        let (f, l, mean, e) = r.map_err(MlpError::Simulation)?;
        baseline.extend(std::iter::repeat(mean).take(l.len()));
        eta.extend(std::iter::repeat(e).take(l.len()));
        features.extend(f);
        labels.extend(l);
    }
    Ok(Dataset {
        features,
        labels,
        baseline,
        eta,
    })
}

fn draw_rows(
    cfg: &NetworkConfig,
    scheme: Scheme,
    seed: u64,
    draw: u64,
    n_small: usize,
) -> Result<(Vec<[f64; 3]>, Vec<f64>, f64, f64), Box<dyn std::error::Error>> {
    use crate::downlink::{simulate_block, SymbolModel};
    use crate::estimators;
    use crate::precoding::{effective_gains, mr_instant_precoders, mr_precoders, zf_precoders};
    use crate::scenario::build_scenario;
    use crate::uplink::{precompute_statistics, run_uplink_training};

    let mut rng = derive_rng(seed, &[stream::DATASET_SCENARIO, draw]);
    let s = build_scenario(cfg, &mut rng)?;
    let stats = precompute_statistics(&s)?;
    let consts = estimators::long_term_constants(
        &s,
        &stats,
        scheme,
        seed ^ 0x5eed_da7a,
        draw,
    )?;
    let t0 = consts.t.t[0];
    let mean0 = consts.hardening_mean[0];
    let rho = cfg.downlink_max_power_w;
    let eta0 = s.eta(0, 0);
    let feature_power = eta0 * rho * s.beta(0, 0, 0);
    let tau_d = cfg.tau_d();

    let mut features = Vec::with_capacity(n_small);
    let mut labels = Vec::with_capacity(n_small);
    for b in 0..n_small {
        let mut brng = derive_rng(seed, &[stream::DATASET_BLOCK, draw, b as u64]);
        let est = run_uplink_training(&s, &stats, &mut brng)?;
        let w = match scheme {
            Scheme::Mr => mr_precoders(&est, &stats, &s)?,
            Scheme::MrInstant => mr_instant_precoders(&est, &s)?,
            Scheme::Zf => zf_precoders(&est, &s, consts.zf_norms.as_ref().unwrap())?,
        };
        let gains = effective_gains(&est, &w, &s, rho);
        let obs = simulate_block(
            &gains,
            s.etas(),
            cfg.noise_power_dl_w,
            tau_d,
            SymbolModel::Gaussian,
            &mut brng,
        );
        features.push([obs.xi_loo[0], t0, feature_power]);
        labels.push(gains.alpha(0, 0, 0, 0).norm());
    }
    Ok((features, labels, mean0, eta0))
}

/// Numerical self-checks: analytic gradients against central finite
/// differences on a small model, and the first optimizer step against its
/// closed form. Panics with a diagnostic on failure.
pub fn run_gradient_self_checks() {
    let mut rng = derive_rng(0x5e1f, &[stream::TRAIN]);
    let mut model = MlpModel::init(3, &[4], &mut rng);
    for b in model.layers[0].biases.iter_mut() {
        *b = 0.3;
    }
    let x = [0.7, -0.2, 0.5];
    let label = 0.9;
    let mut grads = Gradients::zeros(&model);
    forward_backward(&model, &x, label, 1.0, &mut grads);
    let loss = |m: &MlpModel| {
        let mut v: Vec<f64> = x.to_vec();
        for layer in &m.layers {
            v = layer_forward(layer, &v);
        }
        (v[0] - label).abs()
    };
    let h = 1e-5;
    for li in 0..model.layers.len() {
        for wi in 0..model.layers[li].weights.len() {
            let orig = model.layers[li].weights[wi];
            model.layers[li].weights[wi] = orig + h;
            let up = loss(&model);
            model.layers[li].weights[wi] = orig - h;
            let down = loss(&model);
            model.layers[li].weights[wi] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grads.w[li][wi];
            assert!(
                (fd - an).abs() <= 1e-4 * fd.abs().max(1e-6),
                "gradient check failed at layer {li} weight {wi}: {fd:.6e} vs {an:.6e}"
            );
        }
    }

    // one optimizer step on a scalar parameter with unit gradient moves it
    // by the learning rate up to the epsilon regularizer
    let opts = TrainOptions::default();
    let mut state = AdamState::new(1);
    let mut params = vec![0.0];
    state.step(&mut params, &[1.0], 1, &opts);
    let expect = -opts.learning_rate / (1.0 + opts.epsilon);
    assert!(
        (params[0] - expect).abs() < 1e-15,
        "optimizer first step {} vs {expect}",
        params[0]
    );
}

const MODEL_MAGIC: &[u8; 8] = b"MSIM-MLP";
const MODEL_VERSION: u32 = 1;

/// Serialize a model. The format is self-describing (explicit layer shapes)
/// and bit-exact on all parameters.
pub fn save_model(model: &MlpModel, path: &Path) -> Result<(), MlpError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    buf.extend_from_slice(&(model.in_dim() as u32).to_le_bytes());
    buf.extend_from_slice(&(model.layers.len() as u32).to_le_bytes());
    buf.push(match model.feature_transform {
        FeatureTransform::Identity => 0,
        FeatureTransform::Log => 1,
    });
    match model.output_scale {
        OutputScale::One => {
            buf.push(0);
            buf.extend_from_slice(&0u32.to_le_bytes());
        }
        OutputScale::SqrtFeature(i) => {
            buf.push(1);
            buf.extend_from_slice(&(i as u32).to_le_bytes());
        }
        OutputScale::SqrtFeatureOverEta(i) => {
            buf.push(2);
            buf.extend_from_slice(&(i as u32).to_le_bytes());
        }
    }
    for layer in &model.layers {
        buf.extend_from_slice(&(layer.in_dim as u32).to_le_bytes());
        buf.extend_from_slice(&(layer.out_dim as u32).to_le_bytes());
        buf.push(match layer.activation {
            Activation::Relu => 0,
            Activation::Linear => 1,
        });
    }
    for v in model.input_stats.mean.iter().chain(&model.input_stats.std) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for layer in &model.layers {
        for v in layer.weights.iter().chain(&layer.biases) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf.extend_from_slice(&model.meta.config_hash.to_le_bytes());
    buf.extend_from_slice(&model.meta.epochs.to_le_bytes());
    buf.extend_from_slice(&model.meta.best_val_mae.to_le_bytes());
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], MlpError> {
        if self.pos + n > self.data.len() {
            return Err(MlpError::CorruptFile("unexpected end of file".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, MlpError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, MlpError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, MlpError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Load a model written by [`save_model`].
pub fn load_model(path: &Path) -> Result<MlpModel, MlpError> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    let mut cur = Cursor { data: &data, pos: 0 };
    if cur.take(8)? != MODEL_MAGIC {
        return Err(MlpError::CorruptFile("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != MODEL_VERSION {
        return Err(MlpError::FormatVersionMismatch(version));
    }
    let in_dim = cur.u32()? as usize;
    let n_layers = cur.u32()? as usize;
    if n_layers == 0 || n_layers > 64 {
        return Err(MlpError::CorruptFile(format!("implausible layer count {n_layers}")));
    }
    let feature_transform = match cur.take(1)?[0] {
        0 => FeatureTransform::Identity,
        1 => FeatureTransform::Log,
        t => return Err(MlpError::CorruptFile(format!("unknown feature transform {t}"))),
    };
    let output_scale = {
        let kind = cur.take(1)?[0];
        let idx = cur.u32()? as usize;
        match kind {
            0 => OutputScale::One,
            1 if idx < in_dim => OutputScale::SqrtFeature(idx),
            2 if idx < in_dim => OutputScale::SqrtFeatureOverEta(idx),
            _ => return Err(MlpError::CorruptFile("bad output scale".into())),
        }
    };
    let mut shapes = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let li = cur.u32()? as usize;
        let lo = cur.u32()? as usize;
        let act = match cur.take(1)?[0] {
            0 => Activation::Relu,
            1 => Activation::Linear,
            a => return Err(MlpError::CorruptFile(format!("unknown activation {a}"))),
        };
        shapes.push((li, lo, act));
    }
    let mut mean = Vec::with_capacity(in_dim);
    let mut std = Vec::with_capacity(in_dim);
    for _ in 0..in_dim {
        mean.push(cur.f64()?);
    }
    for _ in 0..in_dim {
        std.push(cur.f64()?);
    }
    let mut layers = Vec::with_capacity(n_layers);
    let mut expect_in = in_dim;
    for (li, lo, act) in shapes {
        if li != expect_in {
            return Err(MlpError::CorruptFile(format!(
                "layer input {li} does not chain from {expect_in}"
            )));
        }
        let mut weights = Vec::with_capacity(li * lo);
        for _ in 0..li * lo {
            weights.push(cur.f64()?);
        }
        let mut biases = Vec::with_capacity(lo);
        for _ in 0..lo {
            biases.push(cur.f64()?);
        }
        layers.push(Layer {
            in_dim: li,
            out_dim: lo,
            weights,
            biases,
            activation: act,
        });
        expect_in = lo;
    }
    let meta = ModelMeta {
        config_hash: cur.u64()?,
        epochs: cur.u32()?,
        best_val_mae: cur.f64()?,
    };
    if cur.pos != data.len() {
        return Err(MlpError::CorruptFile("trailing bytes".into()));
    }
    Ok(MlpModel {
        layers,
        input_stats: InputStats { mean, std },
        feature_transform,
        output_scale,
        meta,
    })
}

const DATASET_HEADER: &str = "xi_loo,t_const,eta_rho_beta,alpha,hardening_mean,eta";

/// Write the dataset as a columnar text file with a header row. Floats use
/// the shortest round-trippable representation.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), MlpError> {
    let mut out = String::with_capacity(ds.len() * 64);
    out.push_str(DATASET_HEADER);
    out.push('\n');
    for i in 0..ds.len() {
        let f = &ds.features[i];
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            f[0], f[1], f[2], ds.labels[i], ds.baseline[i], ds.eta[i]
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read a dataset written by [`save_dataset`].
pub fn load_dataset(path: &Path) -> Result<Dataset, MlpError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| MlpError::CorruptFile("empty dataset file".into()))?;
    if header != DATASET_HEADER {
        return Err(MlpError::CorruptFile("unexpected dataset header".into()));
    }
    let mut ds = Dataset {
        features: Vec::new(),
        labels: Vec::new(),
        baseline: Vec::new(),
        eta: Vec::new(),
    };
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(MlpError::CorruptFile(format!(
                "line {}: expected 6 columns",
                lineno + 2
            )));
        }
        let parse = |s: &str| -> Result<f64, MlpError> {
            s.parse()
                .map_err(|_| MlpError::CorruptFile(format!("line {}: bad float", lineno + 2)))
        };
        ds.features
            .push([parse(cols[0])?, parse(cols[1])?, parse(cols[2])?]);
        ds.labels.push(parse(cols[3])?);
        ds.baseline.push(parse(cols[4])?);
        ds.eta.push(parse(cols[5])?);
    }
    if ds.is_empty() {
        return Err(MlpError::EmptyDataset);
    }
    Ok(ds)
}
