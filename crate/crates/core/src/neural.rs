//! Dense/convolutional networks that translate radar covariance features
//! into communication-band features, with their losses and an Adam trainer.
//!
//! Three predictor variants share one engine:
//!
//! * APS: radar APS → communication APS, 1-D convolutional front end.
//! * Eigenvector: radar dominant eigenvector (magnitude/phase) →
//!   communication dominant eigenvector (real/imag, unit norm), trained with
//!   the windowed-APS loss.
//! * Covariance vector: projected radar covariance vector (real/imag) →
//!   communication covariance vector through tanh layers, trained on the APS
//!   of its Toeplitz reconstruction.
//!
//! Activations are stored one column per example so every layer is a GEMM.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{aps_from_vector, Aps, ApsWindow, CovarianceVector};
use crate::numerics::{fft, fft_plan, C64};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MLPC";
pub const LEAKY_ALPHA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Aps = 0,
    Eigvec = 1,
    CovVec = 2,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Aps, Variant::Eigvec, Variant::CovVec];

    pub fn id(self) -> u32 {
        self as u32
    }

    pub fn from_id(id: u32) -> Result<Self> {
        match id {
            0 => Ok(Variant::Aps),
            1 => Ok(Variant::Eigvec),
            2 => Ok(Variant::CovVec),
            _ => Err(Error::invalid(format!("unknown predictor variant id {id}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Aps => "aps",
            Variant::Eigvec => "eigvec",
            Variant::CovVec => "covvec",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown predictor variant `{s}` (expected aps, eigvec or covvec)")))
    }

    /// Input feature length for an `n`-element array.
    pub fn feature_dim(self, n: usize) -> usize {
        match self {
            Variant::Aps => n,
            Variant::Eigvec | Variant::CovVec => 2 * n,
        }
    }

    /// Training target length for an `n`-element array.
    pub fn target_dim(self, n: usize) -> usize {
        match self {
            Variant::Aps | Variant::CovVec => n,
            Variant::Eigvec => 2 * n,
        }
    }

    /// Array size implied by a feature length.
    pub fn array_size(self, feature_dim: usize) -> usize {
        match self {
            Variant::Aps => feature_dim,
            Variant::Eigvec | Variant::CovVec => feature_dim / 2,
        }
    }

    pub fn loss(self) -> LossKind {
        match self {
            Variant::Aps => LossKind::ApsMse,
            Variant::Eigvec => LossKind::EigvecAps,
            Variant::CovVec => LossKind::CovVecAps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Tanh,
    Linear,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu(a) => {
                if z >= 0.0 {
                    z
                } else {
                    a * z
                }
            }
            Activation::Tanh => z.tanh(),
            Activation::Linear => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `y`.
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::LeakyRelu(a) => {
                if z >= 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    /// Same-padded 1-D convolution over `length` positions. Weights are
    /// `out_channels × (in_channels·kernel)`.
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        length: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub weights: DMatrix<f64>,
    pub biases: DVector<f64>,
    pub activation: Activation,
    /// Dropout rate applied to this layer's activations while training.
    pub dropout: f64,
}

impl Layer {
    pub fn dense(weights: DMatrix<f64>, biases: DVector<f64>, activation: Activation) -> Result<Self> {
        if biases.len() != weights.nrows() {
            return Err(Error::DimensionMismatch {
                expected: weights.nrows(),
                got: biases.len(),
            });
        }
        Ok(Self {
            kind: LayerKind::Dense,
            weights,
            biases,
            activation,
            dropout: 0.0,
        })
    }

    pub fn in_dim(&self) -> usize {
        match self.kind {
            LayerKind::Dense => self.weights.ncols(),
            LayerKind::Conv1d { in_channels, length, .. } => in_channels * length,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self.kind {
            LayerKind::Dense => self.weights.nrows(),
            LayerKind::Conv1d { out_channels, length, .. } => out_channels * length,
        }
    }

    fn init(kind: LayerKind, rows: usize, cols: usize, activation: Activation, dropout: f64, rng: &mut ChaCha8Rng) -> Self {
        let limit = match activation {
            Activation::LeakyRelu(_) => (6.0 / cols as f64).sqrt(),
            _ => (3.0 / cols as f64).sqrt(),
        };
        let weights = DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-limit..limit));
        Self {
            kind,
            weights,
            biases: DVector::zeros(rows),
            activation,
            dropout,
        }
    }

    /// Pre-activations for a batch (one column per example).
    fn affine(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, Option<DMatrix<f64>>) {
        match self.kind {
            LayerKind::Dense => {
                let mut z = &self.weights * x;
                for mut col in z.column_iter_mut() {
                    col += &self.biases;
                }
                (z, None)
            }
            LayerKind::Conv1d {
                in_channels,
                out_channels,
                kernel,
                length,
            } => {
                let cols = im2col(x, in_channels, kernel, length);
                let y = &self.weights * &cols;
                let batch = x.ncols();
                let mut z = DMatrix::zeros(out_channels * length, batch);
                for b in 0..batch {
                    for o in 0..out_channels {
                        for p in 0..length {
                            z[(o * length + p, b)] = y[(o, b * length + p)] + self.biases[o];
                        }
                    }
                }
                (z, Some(cols))
            }
        }
    }
}

/// Column layout `(c·k + t, b·L + p) = x[c·L + p + t − k/2]`, zero padded.
fn im2col(x: &DMatrix<f64>, in_ch: usize, kernel: usize, length: usize) -> DMatrix<f64> {
    let half = kernel / 2;
    let batch = x.ncols();
    let mut cols = DMatrix::zeros(in_ch * kernel, length * batch);
    for b in 0..batch {
        for c in 0..in_ch {
            for t in 0..kernel {
                for p in 0..length {
                    let src = p + t;
                    if src >= half && src - half < length {
                        cols[(c * kernel + t, b * length + p)] = x[(c * length + src - half, b)];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &DMatrix<f64>, in_ch: usize, kernel: usize, length: usize, batch: usize) -> DMatrix<f64> {
    let half = kernel / 2;
    let mut dx = DMatrix::zeros(in_ch * length, batch);
    for b in 0..batch {
        for c in 0..in_ch {
            for t in 0..kernel {
                for p in 0..length {
                    let src = p + t;
                    if src >= half && src - half < length {
                        dx[(c * length + src - half, b)] += dcols[(c * kernel + t, b * length + p)];
                    }
                }
            }
        }
    }
    dx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputTransform {
    UnitNorm,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub variant: Variant,
    pub layers: Vec<Layer>,
    pub output: OutputTransform,
    /// Inputs are divided by this constant and outputs multiplied by it.
    pub norm_const: f64,
}

/// Layer sizes and activations of the standard architectures.
fn architecture(variant: Variant, n: usize) -> Vec<(LayerKind, usize, usize, Activation, f64)> {
    let lrelu = Activation::LeakyRelu(LEAKY_ALPHA);
    let dense = |rows, cols, act, drop| (LayerKind::Dense, rows, cols, act, drop);
    let conv = |i, o| {
        (
            LayerKind::Conv1d {
                in_channels: i,
                out_channels: o,
                kernel: 5,
                length: n,
            },
            o,
            i * 5,
            lrelu,
            0.0,
        )
    };
    match variant {
        Variant::Aps => vec![conv(1, 16), conv(16, 32), conv(32, 16), dense(n, 16 * n, lrelu, 0.0)],
        Variant::Eigvec => vec![
            dense(128, 2 * n, lrelu, 0.0),
            dense(256, 128, lrelu, 0.0),
            dense(512, 256, lrelu, 0.5),
            dense(256, 512, lrelu, 0.0),
            dense(2 * n, 256, Activation::Linear, 0.0),
        ],
        Variant::CovVec => vec![
            dense(128, 2 * n, Activation::Tanh, 0.0),
            dense(256, 128, Activation::Tanh, 0.0),
            dense(256, 256, Activation::Tanh, 0.0),
            dense(2 * n, 256, Activation::Tanh, 0.0),
        ],
    }
}

impl MlpModel {
    /// Standard network for `variant` on an `n`-element array, initialized
    /// from `seed`.
    pub fn new(variant: Variant, n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = architecture(variant, n)
            .into_iter()
            .map(|(kind, rows, cols, act, drop)| Layer::init(kind, rows, cols, act, drop, &mut rng))
            .collect();
        Self {
            variant,
            layers,
            output: if variant == Variant::Eigvec {
                OutputTransform::UnitNorm
            } else {
                OutputTransform::None
            },
            norm_const: 1.0,
        }
    }

    /// Custom stack, checked for chaining dimensions.
    pub fn from_layers(variant: Variant, layers: Vec<Layer>, output: OutputTransform, norm_const: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("model needs at least one layer"));
        }
        for w in layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::DimensionMismatch {
                    expected: w[0].out_dim(),
                    got: w[1].in_dim(),
                });
            }
        }
        if !(norm_const > 0.0) {
            return Err(Error::invalid("normalization constant must be positive"));
        }
        Ok(Self {
            variant,
            layers,
            output,
            norm_const,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim()).unwrap_or(0)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    fn check_input(&self, dim: usize) -> Result<()> {
        if dim != self.in_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.in_dim(),
                got: dim,
            });
        }
        Ok(())
    }

    fn forward_batch(&self, x: &DMatrix<f64>, dropout_rng: Option<&mut ChaCha8Rng>) -> Trace {
        let mut rng = dropout_rng;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut cols = Vec::with_capacity(self.layers.len());
        let mut masks = Vec::with_capacity(self.layers.len());
        let mut a = x.scale(1.0 / self.norm_const);
        for layer in &self.layers {
            let (z, c) = layer.affine(&a);
            let mut y = z.map(|v| layer.activation.apply(v));
            let mask = match (&mut rng, layer.dropout > 0.0) {
                (Some(r), true) => {
                    let keep = 1.0 - layer.dropout;
                    let m = DMatrix::from_fn(y.nrows(), y.ncols(), |_, _| if r.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
                    y.component_mul_assign(&m);
                    Some(m)
                }
                _ => None,
            };
            inputs.push(a);
            pre.push(z);
            cols.push(c);
            masks.push(mask);
            a = y;
        }
        let raw = a;
        let mut out = raw.clone();
        if self.output == OutputTransform::UnitNorm {
            for mut c in out.column_iter_mut() {
                let nrm = c.norm();
                if nrm > 0.0 {
                    c /= nrm;
                }
            }
        }
        Trace {
            inputs,
            pre,
            cols,
            masks,
            raw,
            out,
        }
    }

    /// Prediction in feature units (output transform and scaling applied).
    fn predict_batch(&self, trace: &Trace) -> DMatrix<f64> {
        match self.output {
            OutputTransform::UnitNorm => trace.out.clone(),
            OutputTransform::None => trace.out.scale(self.norm_const),
        }
    }

    /// Backpropagates `d_pred` (gradient w.r.t. the feature-unit prediction).
    fn backward(&self, trace: &Trace, d_pred: &DMatrix<f64>) -> Vec<(DMatrix<f64>, DVector<f64>)> {
        let mut d = match self.output {
            OutputTransform::None => d_pred.scale(self.norm_const),
            OutputTransform::UnitNorm => {
                let mut d = d_pred.clone();
                for b in 0..d.ncols() {
                    let raw = trace.raw.column(b);
                    let nrm = raw.norm();
                    if nrm == 0.0 {
                        continue;
                    }
                    let y = trace.out.column(b);
                    let dy = d_pred.column(b);
                    let proj = y.dot(&dy);
                    let g = (dy - y * proj) / nrm;
                    d.set_column(b, &g);
                }
                d
            }
        };
        let mut grads = vec![(DMatrix::zeros(0, 0), DVector::zeros(0)); self.layers.len()];
        for (li, layer) in self.layers.iter().enumerate().rev() {
            if let Some(m) = &trace.masks[li] {
                d.component_mul_assign(m);
            }
            let z = &trace.pre[li];
            // Output before dropout is needed for the tanh derivative.
            let dz = DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| {
                let zi = z[(i, j)];
                d[(i, j)] * layer.activation.derivative(zi, layer.activation.apply(zi))
            });
            match layer.kind {
                LayerKind::Dense => {
                    let x = &trace.inputs[li];
                    let dw = &dz * x.transpose();
                    let db = dz.column_sum();
                    if li > 0 {
                        d = layer.weights.tr_mul(&dz);
                    }
                    grads[li] = (dw, db);
                }
                LayerKind::Conv1d {
                    in_channels,
                    out_channels,
                    kernel,
                    length,
                } => {
                    let batch = dz.ncols();
                    let mut dy = DMatrix::zeros(out_channels, length * batch);
                    for b in 0..batch {
                        for o in 0..out_channels {
                            for p in 0..length {
                                dy[(o, b * length + p)] = dz[(o * length + p, b)];
                            }
                        }
                    }
                    let cols = trace.cols[li].as_ref().expect("conv layers keep their columns");
                    let dw = &dy * cols.transpose();
                    let db = dy.column_sum();
                    if li > 0 {
                        let dcols = layer.weights.tr_mul(&dy);
                        d = col2im(&dcols, in_channels, kernel, length, batch);
                    }
                    grads[li] = (dw, db);
                }
            }
        }
        grads
    }

    /// Inference on one example in feature units.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x.len())?;
        let t = self.forward_batch(&DMatrix::from_column_slice(x.len(), 1, x), None);
        Ok(self.predict_batch(&t).column(0).iter().copied().collect())
    }

    /// Forward pass in network units. With `training` set, dropout masks are
    /// drawn from `seed`.
    pub fn forward(&self, x: &[f64], training: bool, seed: u64) -> Result<Vec<f64>> {
        self.check_input(x.len())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xm = DMatrix::from_column_slice(x.len(), 1, x).scale(self.norm_const);
        let t = self.forward_batch(&xm, if training { Some(&mut rng) } else { None });
        Ok(t.out.column(0).iter().copied().collect())
    }
}

struct Trace {
    inputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
    cols: Vec<Option<DMatrix<f64>>>,
    masks: Vec<Option<DMatrix<f64>>>,
    raw: DMatrix<f64>,
    out: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PackMode {
    MagPhase,
    RealImag,
}

/// `[|v|, arg v]` or `[Re v, Im v]`.
pub fn pack_complex(v: &[C64], mode: PackMode) -> Vec<f64> {
    match mode {
        PackMode::MagPhase => v.iter().map(|x| x.norm()).chain(v.iter().map(|x| x.arg())).collect(),
        PackMode::RealImag => v.iter().map(|x| x.re).chain(v.iter().map(|x| x.im)).collect(),
    }
}

pub fn unpack_complex(x: &[f64], mode: PackMode) -> Result<Vec<C64>> {
    if !x.len().is_multiple_of(2) {
        return Err(Error::invalid("packed complex vector needs an even length"));
    }
    let n = x.len() / 2;
    Ok((0..n)
        .map(|i| match mode {
            PackMode::MagPhase => C64::from_polar(x[i], x[n + i]),
            PackMode::RealImag => C64::new(x[i], x[n + i]),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// MSE between predicted and true APS bins.
    ApsMse,
    /// MSE between Chebyshev-windowed periodograms of two vectors.
    EigvecAps,
    /// MSE between the APS of the Toeplitz reconstruction and the true APS.
    CovVecAps,
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64
}

pub fn loss_aps_mse(pred: &Aps, truth: &Aps) -> f64 {
    mse(&pred.bins, &truth.bins)
}

/// Windowed-APS MSE between two vectors; invariant to a common phase.
pub fn loss_eigvec_aps(pred: &[C64], truth: &[C64]) -> f64 {
    let w = ApsWindow::default();
    mse(&aps_from_vector(pred, w).bins, &aps_from_vector(truth, w).bins)
}

/// `diag(F* R̃(r) F)` as an explicit real-linear map of `[Re r, Im r]`.
fn covvec_aps_map(n: usize) -> DMatrix<f64> {
    let nf = n as f64;
    DMatrix::from_fn(n, 2 * n, |j, c| {
        let (k, imag) = if c < n { (c, false) } else { (c - n, true) };
        if k == 0 {
            return if imag { 0.0 } else { 1.0 };
        }
        let phi = 2.0 * PI * ((k * j) % n) as f64 / nf;
        let w = 2.0 * (nf - k as f64) / nf;
        if imag {
            w * phi.sin()
        } else {
            w * phi.cos()
        }
    })
}

/// APS of the Hermitian Toeplitz matrix with first column `r`.
pub fn covvec_aps(r: &CovarianceVector) -> Vec<f64> {
    let n = r.len();
    let x = DVector::from_vec(pack_complex(&r.entries, PackMode::RealImag));
    (covvec_aps_map(n) * x).iter().copied().collect()
}

pub fn loss_covvec(pred: &CovarianceVector, truth: &Aps) -> f64 {
    mse(&covvec_aps(pred), &truth.bins)
}

/// Per-example loss and gradient with respect to the packed prediction.
struct LossEval {
    kind: LossKind,
    window: Vec<f64>,
    covvec_map: Option<DMatrix<f64>>,
}

impl LossEval {
    fn new(kind: LossKind, pred_dim: usize) -> Self {
        let n = match kind {
            LossKind::ApsMse => pred_dim,
            _ => pred_dim / 2,
        };
        Self {
            kind,
            window: ApsWindow::default().taps(n),
            covvec_map: (kind == LossKind::CovVecAps).then(|| covvec_aps_map(n)),
        }
    }

    fn eval(&self, pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
        match self.kind {
            LossKind::ApsMse => {
                let n = pred.len() as f64;
                let g = pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / n).collect();
                (mse(pred, target), g)
            }
            LossKind::CovVecAps => {
                let m = self.covvec_map.as_ref().expect("map built for this loss");
                let d = m * DVector::from_column_slice(pred);
                let n = d.len() as f64;
                let resid = DVector::from_iterator(d.len(), d.iter().zip(target).map(|(a, b)| a - b));
                let loss = resid.norm_squared() / n;
                let g = m.tr_mul(&resid) * (2.0 / n);
                (loss, g.iter().copied().collect())
            }
            LossKind::EigvecAps => {
                let n = pred.len() / 2;
                let spectrum = |x: &[f64]| -> Vec<C64> {
                    let v: Vec<C64> = (0..n).map(|i| C64::new(x[i], x[n + i]) * self.window[i]).collect();
                    fft(&v)
                };
                let xp = spectrum(pred);
                let xt = spectrum(target);
                let zp: Vec<f64> = xp.iter().map(|z| z.norm_sqr()).collect();
                let zt: Vec<f64> = xt.iter().map(|z| z.norm_sqr()).collect();
                let nf = n as f64;
                // g_X = 2·(dL/dz)·X, then back through the windowed DFT: g_v = c ⊙ (A* g_X).
                let mut gx: Vec<C64> = xp.iter().zip(zp.iter().zip(&zt)).map(|(x, (a, b))| x * (4.0 * (a - b) / nf)).collect();
                fft_plan(n, true).process(&mut gx);
                let mut g = vec![0.0; 2 * n];
                for i in 0..n {
                    let gv = gx[i] * self.window[i];
                    g[i] = gv.re;
                    g[n + i] = gv.im;
                }
                (mse(&zp, &zt), g)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub early_stop_patience: usize,
    pub lr_halve_patience: usize,
    pub lr_min: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            early_stop_patience: 16,
            lr_halve_patience: 6,
            lr_min: 1e-6,
            batch_size: 32,
            max_epochs: 200,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: &str| Err(Error::Config { key: k.into(), message: m.into() });
        if !(self.lr > 0.0) {
            return bad("lr", "must be > 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1/beta2", "must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps", "must be > 0");
        }
        if self.early_stop_patience < 1 || self.lr_halve_patience < 1 {
            return bad("patience", "must be >= 1");
        }
        if !(self.lr_min > 0.0) {
            return bad("lr_min", "must be > 0");
        }
        if self.batch_size < 1 {
            return bad("batch_size", "must be >= 1");
        }
        Ok(())
    }
}

/// One input/target pair with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPair {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
    pub los: bool,
    pub trial_id: u32,
    pub vehicle_id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

struct Adam {
    m: Vec<(DMatrix<f64>, DVector<f64>)>,
    v: Vec<(DMatrix<f64>, DVector<f64>)>,
    t: i32,
}

impl Adam {
    fn new(model: &MlpModel) -> Self {
        let zeros: Vec<_> = model
            .layers
            .iter()
            .map(|l| (DMatrix::zeros(l.weights.nrows(), l.weights.ncols()), DVector::zeros(l.biases.len())))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, model: &mut MlpModel, grads: &[(DMatrix<f64>, DVector<f64>)], cfg: &TrainConfig, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        let upd = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        };
        for (li, layer) in model.layers.iter_mut().enumerate() {
            let (gw, gb) = &grads[li];
            let (mw, mb) = &mut self.m[li];
            let (vw, vb) = &mut self.v[li];
            for i in 0..gw.len() {
                upd(&mut layer.weights.as_mut_slice()[i], &mut mw.as_mut_slice()[i], &mut vw.as_mut_slice()[i], gw.as_slice()[i]);
            }
            for i in 0..gb.len() {
                upd(&mut layer.biases[i], &mut mb[i], &mut vb[i], gb[i]);
            }
        }
    }
}

fn stack_inputs(set: &[DatasetPair], idx: &[usize]) -> DMatrix<f64> {
    let dim = set[idx[0]].input.len();
    let mut x = DMatrix::zeros(dim, idx.len());
    for (c, &i) in idx.iter().enumerate() {
        x.column_mut(c).copy_from_slice(&set[i].input);
    }
    x
}

/// Per-layer `(weights, biases)` gradients.
pub type LayerGrads = Vec<(DMatrix<f64>, DVector<f64>)>;

/// Batch-mean loss and parameter gradients.
pub fn gradient(model: &MlpModel, batch: &[DatasetPair], loss: LossKind) -> Result<(f64, LayerGrads)> {
    if batch.is_empty() {
        return Err(Error::invalid("gradient needs a nonempty batch"));
    }
    let idx: Vec<usize> = (0..batch.len()).collect();
    batch_grad(model, batch, &idx, loss, None)
}

fn batch_grad(
    model: &MlpModel,
    set: &[DatasetPair],
    idx: &[usize],
    loss: LossKind,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, LayerGrads)> {
    model.check_input(set[idx[0]].input.len())?;
    let x = stack_inputs(set, idx);
    let trace = model.forward_batch(&x, dropout_rng);
    let pred = model.predict_batch(&trace);
    let eval = LossEval::new(loss, pred.nrows());
    let bsz = idx.len() as f64;
    let mut total = 0.0;
    let mut d_pred = DMatrix::zeros(pred.nrows(), pred.ncols());
    for (c, &i) in idx.iter().enumerate() {
        let p: Vec<f64> = pred.column(c).iter().copied().collect();
        let (l, g) = eval.eval(&p, &set[i].target);
        total += l;
        for (r, gv) in g.into_iter().enumerate() {
            d_pred[(r, c)] = gv / bsz;
        }
    }
    Ok((total / bsz, model.backward(&trace, &d_pred)))
}

/// Mean loss over a set with dropout disabled.
pub fn evaluate(model: &MlpModel, set: &[DatasetPair], loss: LossKind) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    model.check_input(set[0].input.len())?;
    let mut total = 0.0;
    for chunk in (0..set.len()).collect::<Vec<_>>().chunks(256) {
        let x = stack_inputs(set, chunk);
        let trace = model.forward_batch(&x, None);
        let pred = model.predict_batch(&trace);
        let eval = LossEval::new(loss, pred.nrows());
        for (c, &i) in chunk.iter().enumerate() {
            let p: Vec<f64> = pred.column(c).iter().copied().collect();
            total += eval.eval(&p, &set[i].target).0;
        }
    }
    Ok(total / set.len() as f64)
}

/// Largest absolute input entry; the covariance-vector model scales by it.
pub fn input_scale(set: &[DatasetPair]) -> f64 {
    let m = set.iter().flat_map(|p| p.input.iter()).fold(0.0f64, |a, x| a.max(x.abs()));
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Adam training with plateau learning-rate halving, early stopping and
/// best-weight restoration.
pub fn train(
    model: &MlpModel,
    train_set: &[DatasetPair],
    val_set: &[DatasetPair],
    cfg: &TrainConfig,
    loss: LossKind,
) -> Result<(MlpModel, Vec<EpochRecord>)> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("training and validation sets must be nonempty"));
    }
    cfg.validate()?;
    let mut model = model.clone();
    let mut history = Vec::new();
    if cfg.max_epochs == 0 {
        return Ok((model, history));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model);
    let mut lr = cfg.lr;
    let mut best = evaluate(&model, val_set, loss)?;
    let mut best_model = model.clone();
    let mut stagnant = 0;
    let mut since_lr = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let (l, grads) = batch_grad(&model, train_set, idx, loss, Some(&mut rng))?;
            sum += l * idx.len() as f64;
            adam.step(&mut model, &grads, cfg, lr);
        }
        let train_loss = sum / train_set.len() as f64;
        let val_loss = evaluate(&model, val_set, loss)?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
        if !val_loss.is_finite() {
            break;
        }
        if val_loss < best * (1.0 - 1e-6) {
            best = val_loss;
            best_model = model.clone();
            stagnant = 0;
            since_lr = 0;
        } else {
            stagnant += 1;
            since_lr += 1;
            if stagnant >= cfg.early_stop_patience {
                break;
            }
            if since_lr >= cfg.lr_halve_patience {
                lr = (lr * 0.5).max(cfg.lr_min);
                since_lr = 0;
            }
        }
    }
    Ok((best_model, history))
}

/// Feature handed to or returned by a predictor.
#[derive(Debug, Clone, PartialEq)]
pub enum Feature {
    Aps(Aps),
    Eigvec(Vec<C64>),
    CovVec(CovarianceVector),
}

impl Feature {
    pub fn variant(&self) -> Variant {
        match self {
            Feature::Aps(_) => Variant::Aps,
            Feature::Eigvec(_) => Variant::Eigvec,
            Feature::CovVec(_) => Variant::CovVec,
        }
    }

    /// Network input encoding: APS bins, magnitude/phase, or real/imag.
    pub fn to_input(&self) -> Vec<f64> {
        match self {
            Feature::Aps(a) => a.bins.clone(),
            Feature::Eigvec(v) => pack_complex(v, PackMode::MagPhase),
            Feature::CovVec(r) => pack_complex(&r.entries, PackMode::RealImag),
        }
    }
}

/// Runs the predictor on a radar feature of the matching kind.
pub fn predict_variant(model: &MlpModel, radar: &Feature) -> Result<Feature> {
    if radar.variant() != model.variant {
        return Err(Error::invalid(format!(
            "{} model cannot take a {} feature",
            model.variant.name(),
            radar.variant().name()
        )));
    }
    let out = model.predict(&radar.to_input())?;
    Ok(match model.variant {
        Variant::Aps => Feature::Aps(Aps {
            bins: out.into_iter().map(|b| b.max(0.0)).collect(),
        }),
        Variant::Eigvec => Feature::Eigvec(unpack_complex(&out, PackMode::RealImag)?),
        Variant::CovVec => {
            let mut e = unpack_complex(&out, PackMode::RealImag)?;
            e[0] = C64::new(e[0].re.max(0.0), 0.0);
            Feature::CovVec(CovarianceVector { entries: e })
        }
    })
}

pub fn write_checkpoint<W: Write>(mut w: W, model: &MlpModel) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&model.variant.id().to_le_bytes())?;
    w.write_all(&(model.layers.len() as u32).to_le_bytes())?;
    for l in &model.layers {
        w.write_all(&(l.weights.nrows() as u32).to_le_bytes())?;
        w.write_all(&(l.weights.ncols() as u32).to_le_bytes())?;
        for i in 0..l.weights.nrows() {
            for j in 0..l.weights.ncols() {
                w.write_all(&l.weights[(i, j)].to_le_bytes())?;
            }
        }
        for b in l.biases.iter() {
            w.write_all(&b.to_le_bytes())?;
        }
    }
    w.write_all(&model.norm_const.to_le_bytes())
}

/// Reads a checkpoint of one of the standard architectures.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<MlpModel> {
    let fmt = |m: &str| Error::Format {
        path: "<checkpoint>".into(),
        message: m.into(),
    };
    let io = |e: std::io::Error| fmt(&e.to_string());
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4).map_err(io)?;
    if &b4 != CHECKPOINT_MAGIC {
        return Err(fmt("bad magic"));
    }
    r.read_exact(&mut b4).map_err(io)?;
    let variant = Variant::from_id(u32::from_le_bytes(b4))?;
    r.read_exact(&mut b4).map_err(io)?;
    let n_layers = u32::from_le_bytes(b4) as usize;
    let mut shapes = Vec::with_capacity(n_layers);
    let mut layers_data = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        r.read_exact(&mut b4).map_err(io)?;
        let rows = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4).map_err(io)?;
        let cols = u32::from_le_bytes(b4) as usize;
        let mut vals = Vec::with_capacity(rows * cols + rows);
        for _ in 0..rows * cols + rows {
            r.read_exact(&mut b8).map_err(io)?;
            vals.push(f64::from_le_bytes(b8));
        }
        shapes.push((rows, cols));
        layers_data.push(vals);
    }
    r.read_exact(&mut b8).map_err(io)?;
    let norm_const = f64::from_le_bytes(b8);
    let n = match (variant, shapes.last()) {
        (Variant::Eigvec | Variant::CovVec, Some(&(rows, _))) => rows / 2,
        (Variant::Aps, Some(&(rows, _))) => rows,
        _ => return Err(fmt("checkpoint has no layers")),
    };
    let mut model = MlpModel::new(variant, n, 0);
    if model.layers.len() != n_layers {
        return Err(fmt("layer count does not match the architecture"));
    }
    for (layer, ((rows, cols), vals)) in model.layers.iter_mut().zip(shapes.into_iter().zip(layers_data)) {
        if layer.weights.shape() != (rows, cols) {
            return Err(fmt(&format!("layer shape {rows}x{cols} does not match the architecture")));
        }
        layer.weights = DMatrix::from_row_slice(rows, cols, &vals[..rows * cols]);
        layer.biases = DVector::from_column_slice(&vals[rows * cols..]);
    }
    model.norm_const = norm_const;
    Ok(model)
}

pub fn save_checkpoint(path: &Path, model: &MlpModel) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_checkpoint(&mut w, model).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<MlpModel> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(f)).map_err(|e| match e {
        Error::Format { message, .. } => Error::Format {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    })
}

/// History as CSV with columns `epoch,train_loss,val_loss,lr`, preceded by
/// `# ` comment lines.
pub fn write_history_csv<W: Write>(mut w: W, history: &[EpochRecord], header: &[String]) -> Result<()> {
    let io = |e: std::io::Error| Error::invalid(format!("history write failed: {e}"));
    for line in header {
        writeln!(w, "# {line}").map_err(io)?;
    }
    let mut wr = csv::Writer::from_writer(w);
    let ce = |e: csv::Error| Error::invalid(format!("history write failed: {e}"));
    wr.write_record(["epoch", "train_loss", "val_loss", "lr"]).map_err(ce)?;
    for h in history {
        wr.write_record([h.epoch.to_string(), format!("{:e}", h.train_loss), format!("{:e}", h.val_loss), format!("{:e}", h.lr)])
            .map_err(ce)?;
    }
    wr.flush().map_err(io)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::reconstruct_toeplitz;
    use crate::features::aps_from_covariance;

    fn toy(variant: Variant, act: Activation, out: OutputTransform, dims: [usize; 4], seed: u64) -> MlpModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..3)
            .map(|i| {
                let a = if i == 2 { Activation::Linear } else { act };
                Layer::init(LayerKind::Dense, dims[i + 1], dims[i], a, 0.0, &mut rng)
            })
            .collect();
        MlpModel::from_layers(variant, layers, out, 1.0).unwrap()
    }

    fn random_pairs(n: usize, in_dim: usize, out_dim: usize, seed: u64) -> Vec<DatasetPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| DatasetPair {
                input: (0..in_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                target: (0..out_dim).map(|_| rng.random_range(0.0..1.0)).collect(),
                los: true,
                trial_id: 0,
                vehicle_id: 0,
            })
            .collect()
    }

    fn params(model: &MlpModel) -> Vec<f64> {
        model
            .layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()).copied().collect::<Vec<_>>())
            .collect()
    }

    fn set_param(model: &mut MlpModel, mut k: usize, v: f64) {
        for l in &mut model.layers {
            if k < l.weights.len() {
                l.weights.as_mut_slice()[k] = v;
                return;
            }
            k -= l.weights.len();
            if k < l.biases.len() {
                l.biases[k] = v;
                return;
            }
            k -= l.biases.len();
        }
    }

    fn flat_grads(g: &[(DMatrix<f64>, DVector<f64>)]) -> Vec<f64> {
        g.iter().flat_map(|(w, b)| w.iter().chain(b.iter()).copied().collect::<Vec<_>>()).collect()
    }

    fn finite_difference_check(model: &MlpModel, batch: &[DatasetPair], loss: LossKind) {
        let (_, g) = gradient(model, batch, loss).unwrap();
        let g = flat_grads(&g);
        let p = params(model);
        let h = 1e-5;
        let mut num = Vec::with_capacity(p.len());
        for (k, &pk) in p.iter().enumerate() {
            let mut plus = model.clone();
            set_param(&mut plus, k, pk + h);
            let mut minus = model.clone();
            set_param(&mut minus, k, pk - h);
            let lp = evaluate(&plus, batch, loss).unwrap();
            let lm = evaluate(&minus, batch, loss).unwrap();
            num.push((lp - lm) / (2.0 * h));
        }
        let diff: f64 = g.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = num.iter().map(|b| b * b).sum::<f64>().sqrt();
        assert!(diff <= 1e-4 * scale, "{loss:?}: relative gradient error {}", diff / scale);
    }

    #[test]
    fn pack_examples() {
        let v = [C64::new(1.0, 0.0), C64::new(0.0, 1.0)];
        let mp = pack_complex(&v, PackMode::MagPhase);
        assert_eq!(mp[..3], [1.0, 1.0, 0.0]);
        assert!((mp[3] - PI / 2.0).abs() < 1e-15);
        assert_eq!(pack_complex(&v, PackMode::RealImag), vec![1.0, 0.0, 0.0, 1.0]);
        let back = unpack_complex(&pack_complex(&v, PackMode::RealImag), PackMode::RealImag).unwrap();
        assert_eq!(back, v.to_vec());
    }

    #[test]
    fn forward_basics() {
        let eye = Layer::dense(DMatrix::identity(2, 2), DVector::zeros(2), Activation::Linear).unwrap();
        let m = MlpModel::from_layers(Variant::Aps, vec![eye], OutputTransform::None, 1.0).unwrap();
        assert_eq!(m.forward(&[3.0, -4.0], false, 0).unwrap(), vec![3.0, -4.0]);
        let lr = Layer::dense(DMatrix::identity(2, 2), DVector::zeros(2), Activation::LeakyRelu(0.1)).unwrap();
        let m = MlpModel::from_layers(Variant::Aps, vec![lr], OutputTransform::None, 1.0).unwrap();
        let y = m.forward(&[-1.0, 2.0], false, 0).unwrap();
        assert!((y[0] + 0.1).abs() < 1e-15 && y[1] == 2.0);
        let un = MlpModel::new(Variant::Eigvec, 8, 3);
        let y = un.forward(&[0.3; 16], false, 0).unwrap();
        assert!((y.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
        assert!(matches!(un.forward(&[1.0; 3], false, 0), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn dropout_only_in_training() {
        let m = MlpModel::new(Variant::Eigvec, 8, 1);
        let x = vec![0.5; 16];
        assert_eq!(m.forward(&x, false, 1).unwrap(), m.forward(&x, false, 2).unwrap());
        assert_ne!(m.forward(&x, true, 1).unwrap(), m.forward(&x, true, 2).unwrap());
        assert_eq!(m.forward(&x, true, 5).unwrap(), m.forward(&x, true, 5).unwrap());
    }

    #[test]
    fn standard_architectures() {
        let e = MlpModel::new(Variant::Eigvec, 64, 0);
        let dims: Vec<usize> = e.layers.iter().map(|l| l.out_dim()).collect();
        assert_eq!(dims, vec![128, 256, 512, 256, 128]);
        assert_eq!(e.layers[2].dropout, 0.5);
        let c = MlpModel::new(Variant::CovVec, 64, 0);
        assert_eq!(c.layers.iter().map(|l| l.out_dim()).collect::<Vec<_>>(), vec![128, 256, 256, 128]);
        assert!(c.layers.iter().all(|l| l.activation == Activation::Tanh && l.dropout == 0.0));
        let a = MlpModel::new(Variant::Aps, 64, 0);
        assert_eq!(a.in_dim(), 64);
        assert_eq!(a.out_dim(), 64);
    }

    #[test]
    fn loss_examples() {
        let t = Aps { bins: vec![1.0, 2.0, 3.0] };
        assert_eq!(loss_aps_mse(&t, &t), 0.0);
        let p = Aps { bins: vec![2.0, 3.0, 4.0] };
        assert!((loss_aps_mse(&p, &t) - 1.0).abs() < 1e-15);
        let q = Aps { bins: vec![0.5, 2.5, 1.0] };
        assert!((loss_aps_mse(&q, &t) - (0.25 + 0.25 + 4.0) / 3.0).abs() < 1e-15);

        let n = 8;
        let f = crate::numerics::dft_matrix(n).column(2);
        let rot: Vec<C64> = f.iter().map(|x| x * C64::from_polar(1.0, 0.7)).collect();
        assert!(loss_eigvec_aps(&rot, &f) < 1e-20);
        let z = aps_from_vector(&f, ApsWindow::default());
        let expect = z.bins.iter().map(|b| b * b).sum::<f64>() / n as f64;
        assert!((loss_eigvec_aps(&vec![C64::new(0.0, 0.0); n], &f) - expect).abs() < 1e-12);

        let r = CovarianceVector::new(vec![C64::new(1.0, 0.0), C64::new(0.3, -0.2), C64::new(0.1, 0.05)]).unwrap();
        let truth = aps_from_covariance(&reconstruct_toeplitz(&r));
        assert!(loss_covvec(&r, &truth) < 1e-24);
        let zero = CovarianceVector::new(vec![C64::new(0.0, 0.0); 3]).unwrap();
        let e = truth.bins.iter().map(|b| b * b).sum::<f64>() / 3.0;
        assert!((loss_covvec(&zero, &truth) - e).abs() < 1e-12);
    }

    #[test]
    fn covvec_map_matches_matrix_aps() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in [1, 2, 5, 8] {
            let mut e: Vec<C64> = (0..n).map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
            e[0] = C64::new(2.0, 0.0);
            let r = CovarianceVector::new(e).unwrap();
            let direct = aps_from_covariance(&reconstruct_toeplitz(&r));
            let fast = covvec_aps(&r);
            for (a, b) in fast.iter().zip(&direct.bins) {
                // direct clamps negative bins at 0
                assert!((a.max(0.0) - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let n = 4;
        let m = toy(Variant::Aps, Activation::LeakyRelu(0.1), OutputTransform::None, [n, 6, 5, n], 1);
        finite_difference_check(&m, &random_pairs(3, n, n, 2), LossKind::ApsMse);

        let m = toy(Variant::Eigvec, Activation::LeakyRelu(0.1), OutputTransform::UnitNorm, [2 * n, 6, 5, 2 * n], 3);
        let mut set = random_pairs(3, 2 * n, 2 * n, 4);
        for p in &mut set {
            let s = p.target.iter().map(|x| x * x).sum::<f64>().sqrt();
            p.target.iter_mut().for_each(|x| *x /= s);
        }
        finite_difference_check(&m, &set, LossKind::EigvecAps);

        let m = toy(Variant::CovVec, Activation::Tanh, OutputTransform::None, [2 * n, 6, 5, 2 * n], 5);
        finite_difference_check(&m, &random_pairs(3, 2 * n, n, 6), LossKind::CovVecAps);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let m = MlpModel::new(Variant::Aps, 6, 11);
        finite_difference_check(&m, &random_pairs(2, 6, 6, 12), LossKind::ApsMse);
    }

    #[test]
    fn zero_loss_gives_zero_gradient_and_duplication_is_neutral() {
        let n = 4;
        let m = toy(Variant::Aps, Activation::LeakyRelu(0.1), OutputTransform::None, [n, 6, 5, n], 1);
        let mut set = random_pairs(2, n, n, 2);
        for p in &mut set {
            p.target = m.predict(&p.input).unwrap();
        }
        let (l, g) = gradient(&m, &set, LossKind::ApsMse).unwrap();
        assert!(l < 1e-25);
        assert!(flat_grads(&g).iter().all(|x| x.abs() < 1e-10));

        let set = random_pairs(3, n, n, 7);
        let doubled: Vec<_> = set.iter().chain(set.iter()).cloned().collect();
        let g1 = flat_grads(&gradient(&m, &set, LossKind::ApsMse).unwrap().1);
        let g2 = flat_grads(&gradient(&m, &doubled, LossKind::ApsMse).unwrap().1);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-12));
        }
    }

    #[test]
    fn training_learns_linear_map_deterministically() {
        let n = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = DMatrix::from_fn(2 * n, 2 * n, |_, _| rng.random_range(-1.0..1.0));
        let make = |k: usize, seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..k)
                .map(|_| {
                    let x = DVector::from_fn(2 * n, |_, _| rng.random_range(-1.0..1.0));
                    let y = &a * &x;
                    let y = &y / y.norm();
                    DatasetPair {
                        input: x.iter().copied().collect(),
                        target: y.iter().copied().collect(),
                        los: true,
                        trial_id: 0,
                        vehicle_id: 0,
                    }
                })
                .collect::<Vec<_>>()
        };
        let train_set = make(256, 1);
        let val_set = make(64, 2);
        let model = toy(Variant::Eigvec, Activation::LeakyRelu(0.1), OutputTransform::UnitNorm, [2 * n, 32, 32, 2 * n], 8);
        let cfg = TrainConfig {
            max_epochs: 150,
            batch_size: 16,
            lr: 3e-3,
            seed: 4,
            ..TrainConfig::default()
        };
        let initial = evaluate(&model, &val_set, LossKind::EigvecAps).unwrap();
        let (trained, hist) = train(&model, &train_set, &val_set, &cfg, LossKind::EigvecAps).unwrap();
        let fin = evaluate(&trained, &val_set, LossKind::EigvecAps).unwrap();
        assert!(fin <= 0.2 * initial, "{fin} vs {initial}");
        let best = hist.iter().map(|h| h.val_loss).fold(f64::INFINITY, f64::min);
        assert!(fin <= best.min(initial) * (1.0 + 1e-12));
        let (again, hist2) = train(&model, &train_set, &val_set, &cfg, LossKind::EigvecAps).unwrap();
        assert_eq!(hist, hist2);
        assert_eq!(again, trained);
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let m = MlpModel::new(Variant::Aps, 4, 0);
        let set = random_pairs(4, 4, 4, 0);
        let cfg = TrainConfig {
            max_epochs: 0,
            ..TrainConfig::default()
        };
        let (out, hist) = train(&m, &set, &set, &cfg, LossKind::ApsMse).unwrap();
        assert_eq!(out, m);
        assert!(hist.is_empty());
        assert!(train(&m, &[], &set, &cfg, LossKind::ApsMse).is_err());
    }

    #[test]
    fn lr_halves_on_plateau() {
        // A model that cannot improve: zero learning signal from a zero-loss set.
        let n = 4;
        let m = toy(Variant::Aps, Activation::LeakyRelu(0.1), OutputTransform::None, [n, 3, 3, n], 1);
        let mut set = random_pairs(4, n, n, 2);
        for p in &mut set {
            p.target = m.predict(&p.input).unwrap();
        }
        let cfg = TrainConfig {
            max_epochs: 100,
            ..TrainConfig::default()
        };
        let (_, hist) = train(&m, &set, &set, &cfg, LossKind::ApsMse).unwrap();
        assert_eq!(hist.len(), 16);
        assert_eq!(hist[5].lr, 1e-3);
        assert_eq!(hist[6].lr, 5e-4);
        assert_eq!(hist[12].lr, 2.5e-4);
    }

    #[test]
    fn predict_variant_kinds() {
        // Identity toys reproduce the pack/unpack round trips.
        let n = 3;
        let eye = |k: usize, act| Layer::dense(DMatrix::identity(k, k), DVector::zeros(k), act).unwrap();
        let aps_model = MlpModel::from_layers(Variant::Aps, vec![eye(n, Activation::LeakyRelu(0.1))], OutputTransform::None, 1.0).unwrap();
        let aps = Aps { bins: vec![0.2, 1.5, 0.0] };
        assert_eq!(predict_variant(&aps_model, &Feature::Aps(aps.clone())).unwrap(), Feature::Aps(aps));

        let eig_model = MlpModel::from_layers(Variant::Eigvec, vec![eye(2 * n, Activation::Linear)], OutputTransform::UnitNorm, 1.0).unwrap();
        let v = vec![C64::new(0.6, 0.0), C64::new(0.8, 0.0), C64::new(0.0, 0.0)];
        match predict_variant(&eig_model, &Feature::Eigvec(v.clone())).unwrap() {
            Feature::Eigvec(p) => {
                for (a, b) in p.iter().zip(&v) {
                    assert!((a - b).norm() < 1e-12);
                }
            }
            other => panic!("unexpected {other:?}"),
        }

        let cv_model = MlpModel::from_layers(Variant::CovVec, vec![eye(2 * n, Activation::Linear)], OutputTransform::None, 2.0).unwrap();
        let r = CovarianceVector::new(vec![C64::new(1.0, 0.0), C64::new(0.2, -0.3), C64::new(0.0, 0.1)]).unwrap();
        assert_eq!(predict_variant(&cv_model, &Feature::CovVec(r.clone())).unwrap(), Feature::CovVec(r.clone()));
        assert!(predict_variant(&cv_model, &Feature::Aps(Aps { bins: vec![0.0; 3] })).is_err());

        let trained_like = MlpModel::new(Variant::Aps, 8, 2);
        if let Feature::Aps(a) = predict_variant(&trained_like, &Feature::Aps(Aps { bins: vec![-3.0; 8] })).unwrap() {
            assert!(a.bins.iter().all(|b| *b >= 0.0));
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        for v in Variant::ALL {
            let mut m = MlpModel::new(v, 8, 7);
            m.norm_const = 0.37;
            let mut bytes = Vec::new();
            write_checkpoint(&mut bytes, &m).unwrap();
            assert_eq!(&bytes[..4], b"MLPC");
            let back = read_checkpoint(bytes.as_slice()).unwrap();
            assert_eq!(back, m);
        }
        assert!(read_checkpoint(&b"XXXX"[..]).is_err());
    }

    #[test]
    fn history_csv_layout() {
        let h = vec![EpochRecord {
            epoch: 0,
            train_loss: 0.5,
            val_loss: 0.25,
            lr: 1e-3,
        }];
        let mut out = Vec::new();
        write_history_csv(&mut out, &h, &["seed = 1".to_string()]).unwrap();
        let s = String::from_utf8(out).unwrap();
        assert_eq!(s, "# seed = 1\nepoch,train_loss,val_loss,lr\n0,5e-1,2.5e-1,1e-3\n");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn eigvec_loss_is_phase_invariant(
                v in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 2..16),
                gamma in -PI..PI,
            ) {
                let v: Vec<C64> = v.into_iter().map(|(a, b)| C64::new(a, b)).collect();
                let rot: Vec<C64> = v.iter().map(|x| x * C64::from_polar(1.0, gamma)).collect();
                let scale = aps_from_vector(&v, ApsWindow::default()).bins.iter().map(|b| b * b).sum::<f64>().max(1e-30);
                prop_assert!(loss_eigvec_aps(&v, &rot) <= 1e-20 * scale);
            }

            #[test]
            fn realimag_round_trip(v in proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 0..20)) {
                let v: Vec<C64> = v.into_iter().map(|(a, b)| C64::new(a, b)).collect();
                prop_assert_eq!(unpack_complex(&pack_complex(&v, PackMode::RealImag), PackMode::RealImag).unwrap(), v);
            }
        }
    }
}
