//! Models, losses, and local SGD.
//!
//! Parameters travel through the federation as a flat [`ParamVector`]. The
//! two-layer perceptron reads that vector through zero-copy views laid out as
//! `w1 | b1 | w2 | b2`, each matrix row-major with shape `inputs x hidden` and
//! `hidden x classes`.

use std::ops::{Deref, DerefMut};

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use thiserror::Error;

use crate::data::{sample_batch, Dataset, DevicePartition};
use crate::rng::RngStream;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("non-finite value in {0} (learning rate or initialization too large?)")]
    NumericOverflow(&'static str),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("objective expects {expected} targets")]
    TargetKind { expected: &'static str },
    #[error("label {0} out of range")]
    Label(u8),
    #[error("invalid local update: {0}")]
    Invalid(&'static str),
}

/// Flat model parameters, gradients, or model differences.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(d: usize) -> Self {
        ParamVector(vec![0.0; d])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Supervision attached to a batch or dataset.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<u8>),
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(v) => v.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn view(&self) -> TargetsView<'_> {
        match self {
            Targets::Classes(v) => TargetsView::Classes(v),
            Targets::Values(v) => TargetsView::Values(v),
        }
    }

    pub(crate) fn select(&self, indices: &[usize]) -> Targets {
        match self {
            Targets::Classes(v) => Targets::Classes(indices.iter().map(|&i| v[i]).collect()),
            Targets::Values(v) => Targets::Values(indices.iter().map(|&i| v[i]).collect()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum TargetsView<'a> {
    Classes(&'a [u8]),
    Values(&'a [f64]),
}

impl TargetsView<'_> {
    pub fn len(&self) -> usize {
        match self {
            TargetsView::Classes(v) => v.len(),
            TargetsView::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// An owned mini-batch: `B x inputs` features and `B` targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Array2<f64>,
    pub targets: Targets,
}

impl Batch {
    pub fn new(features: Array2<f64>, targets: Targets) -> Result<Self, ModelError> {
        if features.nrows() != targets.len() {
            return Err(ModelError::Dimension { expected: features.nrows(), got: targets.len() });
        }
        if targets.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        Ok(Batch { features, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn view(&self) -> BatchView<'_> {
        BatchView { features: self.features.view(), targets: self.targets.view() }
    }

    /// The batch with every sample repeated `times` times.
    pub fn repeated(&self, times: usize) -> Batch {
        let idx: Vec<usize> = (0..times).flat_map(|_| 0..self.len()).collect();
        Batch { features: self.features.select(Axis(0), &idx), targets: self.targets.select(&idx) }
    }
}

/// Borrowed batch; lets a whole dataset be evaluated without copying it.
#[derive(Debug, Clone, Copy)]
pub struct BatchView<'a> {
    pub features: ArrayView2<'a, f64>,
    pub targets: TargetsView<'a>,
}

impl BatchView<'_> {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// A differentiable empirical loss over flat parameters.
pub trait Objective: Sync {
    fn dim(&self) -> usize;

    /// Mean loss over the batch.
    fn loss(&self, theta: &[f64], batch: BatchView<'_>) -> Result<f64, ModelError>;

    /// Mean loss, with its gradient written into `grad` (overwritten).
    fn loss_grad(&self, theta: &[f64], batch: BatchView<'_>, grad: &mut [f64]) -> Result<f64, ModelError>;

    /// Classification accuracy, when the objective has a notion of it.
    fn accuracy(&self, theta: &[f64], batch: BatchView<'_>) -> Result<Option<f64>, ModelError>;

    /// Initial parameters shared by every device.
    fn init(&self, rng: &mut RngStream) -> ParamVector;
}

fn check_dim(expected: usize, got: usize) -> Result<(), ModelError> {
    if expected != got {
        return Err(ModelError::Dimension { expected, got });
    }
    Ok(())
}

/// Layer widths of the perceptron.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpShape {
    pub inputs: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl MlpShape {
    /// 784-100-10, the MNIST network: 79510 parameters.
    pub const MNIST: MlpShape = MlpShape { inputs: 784, hidden: 100, classes: 10 };

    pub fn param_count(&self) -> usize {
        self.inputs * self.hidden + self.hidden + self.hidden * self.classes + self.classes
    }

    fn offsets(&self) -> [usize; 4] {
        let w1 = self.inputs * self.hidden;
        let b1 = w1 + self.hidden;
        let w2 = b1 + self.hidden * self.classes;
        [w1, b1, w2, w2 + self.classes]
    }
}

/// Owned perceptron parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl MlpParams {
    pub fn zeros(shape: MlpShape) -> Self {
        MlpParams {
            w1: Array2::zeros((shape.inputs, shape.hidden)),
            b1: Array1::zeros(shape.hidden),
            w2: Array2::zeros((shape.hidden, shape.classes)),
            b2: Array1::zeros(shape.classes),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot(shape: MlpShape, rng: &mut RngStream) -> Self {
        let mut p = MlpParams::zeros(shape);
        let a1 = (6.0 / (shape.inputs + shape.hidden) as f64).sqrt();
        p.w1.mapv_inplace(|_| rng.random_range(-a1..=a1));
        let a2 = (6.0 / (shape.hidden + shape.classes) as f64).sqrt();
        p.w2.mapv_inplace(|_| rng.random_range(-a2..=a2));
        p
    }

    pub fn shape(&self) -> MlpShape {
        MlpShape { inputs: self.w1.nrows(), hidden: self.w1.ncols(), classes: self.w2.ncols() }
    }

    pub fn flatten(&self) -> ParamVector {
        let mut out = Vec::with_capacity(self.shape().param_count());
        out.extend(self.w1.iter());
        out.extend(self.b1.iter());
        out.extend(self.w2.iter());
        out.extend(self.b2.iter());
        ParamVector(out)
    }

    pub fn from_flat(shape: MlpShape, flat: &[f64]) -> Result<Self, ModelError> {
        let v = MlpView::new(shape, flat)?;
        Ok(MlpParams { w1: v.w1.to_owned(), b1: v.b1.to_owned(), w2: v.w2.to_owned(), b2: v.b2.to_owned() })
    }

    pub fn is_finite(&self) -> bool {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2).all(|v| v.is_finite())
    }
}

struct MlpView<'a> {
    w1: ArrayView2<'a, f64>,
    b1: ArrayView1<'a, f64>,
    w2: ArrayView2<'a, f64>,
    b2: ArrayView1<'a, f64>,
}

impl<'a> MlpView<'a> {
    fn new(shape: MlpShape, flat: &'a [f64]) -> Result<Self, ModelError> {
        check_dim(shape.param_count(), flat.len())?;
        let [o1, o2, o3, _] = shape.offsets();
        let view2 = |slice: &'a [f64], r, c| ArrayView2::from_shape((r, c), slice).expect("sized");
        Ok(MlpView {
            w1: view2(&flat[..o1], shape.inputs, shape.hidden),
            b1: ArrayView1::from(&flat[o1..o2]),
            w2: view2(&flat[o2..o3], shape.hidden, shape.classes),
            b2: ArrayView1::from(&flat[o3..]),
        })
    }
}

struct MlpViewMut<'a> {
    w1: ArrayViewMut2<'a, f64>,
    b1: ArrayViewMut1<'a, f64>,
    w2: ArrayViewMut2<'a, f64>,
    b2: ArrayViewMut1<'a, f64>,
}

impl<'a> MlpViewMut<'a> {
    fn new(shape: MlpShape, flat: &'a mut [f64]) -> Result<Self, ModelError> {
        check_dim(shape.param_count(), flat.len())?;
        let [o1, o2, o3, _] = shape.offsets();
        let (w1, rest) = flat.split_at_mut(o1);
        let (b1, rest) = rest.split_at_mut(o2 - o1);
        let (w2, b2) = rest.split_at_mut(o3 - o2);
        Ok(MlpViewMut {
            w1: ArrayViewMut2::from_shape((shape.inputs, shape.hidden), w1).expect("sized"),
            b1: ArrayViewMut1::from(b1),
            w2: ArrayViewMut2::from_shape((shape.hidden, shape.classes), w2).expect("sized"),
            b2: ArrayViewMut1::from(b2),
        })
    }
}

struct Forward {
    /// Hidden pre-activations, `B x hidden`.
    z1: Array2<f64>,
    /// Logits, `B x classes`.
    logits: Array2<f64>,
}

fn forward(v: &MlpView<'_>, x: ArrayView2<'_, f64>) -> Result<Forward, ModelError> {
    check_dim(v.w1.nrows(), x.ncols())?;
    let mut z1 = x.dot(&v.w1);
    z1 += &v.b1;
    let a1 = z1.mapv(|z| z.max(0.0));
    let mut logits = a1.dot(&v.w2);
    logits += &v.b2;
    if !logits.iter().all(|z| z.is_finite()) {
        return Err(ModelError::NumericOverflow("logits"));
    }
    Ok(Forward { z1, logits })
}

fn class_labels<'a>(batch: &BatchView<'a>, classes: usize) -> Result<&'a [u8], ModelError> {
    match batch.targets {
        TargetsView::Classes(labels) => {
            if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
                return Err(ModelError::Label(bad));
            }
            Ok(labels)
        }
        TargetsView::Values(_) => Err(ModelError::TargetKind { expected: "class" }),
    }
}

/// Turns logits into probabilities in place (max-subtracted softmax) and
/// returns the mean cross-entropy.
fn softmax_xent(logits: &mut Array2<f64>, labels: &[u8]) -> f64 {
    let mut total = 0.0;
    for (mut row, &y) in logits.outer_iter_mut().zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |m, &z| m.max(z));
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[y as usize];
        row.mapv_inplace(|z| (z - lse).exp());
    }
    total / labels.len() as f64
}

/// Mean softmax cross-entropy and the `B x classes` probability matrix.
pub fn forward_loss(params: &MlpParams, batch: &Batch) -> Result<(f64, Array2<f64>), ModelError> {
    let flat = params.flatten();
    mlp_forward_loss(params.shape(), &flat, batch.view())
}

fn mlp_forward_loss(shape: MlpShape, theta: &[f64], batch: BatchView<'_>) -> Result<(f64, Array2<f64>), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let labels = class_labels(&batch, shape.classes)?;
    let v = MlpView::new(shape, theta)?;
    let mut fwd = forward(&v, batch.features)?;
    let loss = softmax_xent(&mut fwd.logits, labels);
    if !loss.is_finite() {
        return Err(ModelError::NumericOverflow("loss"));
    }
    Ok((loss, fwd.logits))
}

/// Exact gradient of [`forward_loss`] with respect to every parameter.
pub fn gradient(params: &MlpParams, batch: &Batch) -> Result<MlpParams, ModelError> {
    let shape = params.shape();
    let flat = params.flatten();
    let mut grad = vec![0.0; shape.param_count()];
    mlp_loss_grad(shape, &flat, batch.view(), &mut grad)?;
    MlpParams::from_flat(shape, &grad)
}

fn mlp_loss_grad(shape: MlpShape, theta: &[f64], batch: BatchView<'_>, grad: &mut [f64]) -> Result<f64, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let labels = class_labels(&batch, shape.classes)?;
    let v = MlpView::new(shape, theta)?;
    let mut g = MlpViewMut::new(shape, grad)?;
    let x = batch.features;
    let Forward { z1, logits } = forward(&v, x)?;
    let mut dz2 = logits;
    let loss = softmax_xent(&mut dz2, labels);
    if !loss.is_finite() {
        return Err(ModelError::NumericOverflow("loss"));
    }
    // dL/dlogits = (softmax - onehot) / B
    let inv_b = 1.0 / labels.len() as f64;
    for (mut row, &y) in dz2.outer_iter_mut().zip(labels) {
        row[y as usize] -= 1.0;
        row.mapv_inplace(|p| p * inv_b);
    }
    let a1 = z1.mapv(|z| z.max(0.0));
    general_mat_mul(1.0, &a1.t(), &dz2, 0.0, &mut g.w2);
    g.b2.assign(&dz2.sum_axis(Axis(0)));
    let mut dz1 = dz2.dot(&v.w2.t());
    dz1.zip_mut_with(&z1, |d, &z| {
        if z <= 0.0 {
            *d = 0.0;
        }
    });
    general_mat_mul(1.0, &x.t(), &dz1, 0.0, &mut g.w1);
    g.b1.assign(&dz1.sum_axis(Axis(0)));
    if !grad.iter().all(|v| v.is_finite()) {
        return Err(ModelError::NumericOverflow("gradient"));
    }
    Ok(loss)
}

/// Two-layer ReLU perceptron with softmax cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mlp {
    pub shape: MlpShape,
}

impl Mlp {
    pub fn new(shape: MlpShape) -> Self {
        Mlp { shape }
    }

    /// Class probabilities for every row of `batch`.
    pub fn probabilities(&self, theta: &[f64], batch: BatchView<'_>) -> Result<Array2<f64>, ModelError> {
        mlp_forward_loss(self.shape, theta, batch).map(|(_, p)| p)
    }
}

impl Objective for Mlp {
    fn dim(&self) -> usize {
        self.shape.param_count()
    }

    fn loss(&self, theta: &[f64], batch: BatchView<'_>) -> Result<f64, ModelError> {
        mlp_forward_loss(self.shape, theta, batch).map(|(l, _)| l)
    }

    fn loss_grad(&self, theta: &[f64], batch: BatchView<'_>, grad: &mut [f64]) -> Result<f64, ModelError> {
        mlp_loss_grad(self.shape, theta, batch, grad)
    }

    fn accuracy(&self, theta: &[f64], batch: BatchView<'_>) -> Result<Option<f64>, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let labels = class_labels(&batch, self.shape.classes)?;
        let v = MlpView::new(self.shape, theta)?;
        let fwd = forward(&v, batch.features)?;
        let correct = fwd
            .logits
            .outer_iter()
            .zip(labels)
            .filter(|(row, &y)| argmax(row.iter().copied()) == y as usize)
            .count();
        Ok(Some(correct as f64 / labels.len() as f64))
    }

    fn init(&self, rng: &mut RngStream) -> ParamVector {
        MlpParams::glorot(self.shape, rng).flatten()
    }
}

/// First index of the maximum; ties resolve to the lowest class.
pub fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Least-squares linear regression, `0.5 * mean((w.x + b - y)^2)`.
///
/// Smooth with `L` equal to the largest eigenvalue of the feature second
/// moment matrix (bias included), which makes it the testbed for rate checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuadraticRegression {
    pub inputs: usize,
}

impl QuadraticRegression {
    fn residuals(&self, theta: &[f64], batch: &BatchView<'_>) -> Result<Array1<f64>, ModelError> {
        check_dim(self.inputs + 1, theta.len())?;
        check_dim(self.inputs, batch.features.ncols())?;
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let y = match batch.targets {
            TargetsView::Values(y) => y,
            TargetsView::Classes(_) => return Err(ModelError::TargetKind { expected: "real-valued" }),
        };
        let w = ArrayView1::from(&theta[..self.inputs]);
        let mut res = batch.features.dot(&w);
        res += theta[self.inputs];
        res -= &ArrayView1::from(y);
        Ok(res)
    }
}

impl Objective for QuadraticRegression {
    fn dim(&self) -> usize {
        self.inputs + 1
    }

    fn loss(&self, theta: &[f64], batch: BatchView<'_>) -> Result<f64, ModelError> {
        let res = self.residuals(theta, &batch)?;
        let loss = 0.5 * res.mapv(|r| r * r).mean().expect("non-empty");
        if !loss.is_finite() {
            return Err(ModelError::NumericOverflow("loss"));
        }
        Ok(loss)
    }

    fn loss_grad(&self, theta: &[f64], batch: BatchView<'_>, grad: &mut [f64]) -> Result<f64, ModelError> {
        check_dim(self.dim(), grad.len())?;
        let res = self.residuals(theta, &batch)?;
        let inv_b = 1.0 / res.len() as f64;
        let gw = batch.features.t().dot(&res) * inv_b;
        grad[..self.inputs].copy_from_slice(gw.as_slice().expect("contiguous"));
        grad[self.inputs] = res.sum() * inv_b;
        let loss = 0.5 * res.mapv(|r| r * r).sum() * inv_b;
        if !loss.is_finite() || !grad.iter().all(|g| g.is_finite()) {
            return Err(ModelError::NumericOverflow("gradient"));
        }
        Ok(loss)
    }

    fn accuracy(&self, _theta: &[f64], _batch: BatchView<'_>) -> Result<Option<f64>, ModelError> {
        Ok(None)
    }

    fn init(&self, _rng: &mut RngStream) -> ParamVector {
        ParamVector::zeros(self.dim())
    }
}

/// Output of [`local_update`].
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    /// `theta0 - theta_Q`.
    pub delta: ParamVector,
    /// Norm of each stochastic gradient, one per local step.
    pub grad_norms: Vec<f64>,
    /// Set when the partition was smaller than the batch size.
    pub sampled_with_replacement: bool,
}

impl LocalUpdate {
    pub fn max_grad_norm(&self) -> f64 {
        self.grad_norms.iter().copied().fold(0.0, f64::max)
    }
}

/// Runs `steps` SGD steps from `theta0` on the device's data and returns the
/// model difference.
#[allow(clippy::too_many_arguments)]
pub fn local_update(
    objective: &dyn Objective,
    theta0: &ParamVector,
    data: &Dataset,
    part: &DevicePartition,
    steps: usize,
    eta: f64,
    batch_size: usize,
    rng: &mut RngStream,
) -> Result<LocalUpdate, ModelError> {
    if steps == 0 {
        return Err(ModelError::Invalid("local steps must be >= 1"));
    }
    if eta.is_nan() || eta < 0.0 {
        return Err(ModelError::Invalid("learning rate must be non-negative"));
    }
    if part.sample_indices.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    check_dim(objective.dim(), theta0.len())?;
    let mut theta = theta0.clone();
    let mut grad = vec![0.0; theta.len()];
    let mut grad_norms = Vec::with_capacity(steps);
    let mut with_replacement = false;
    for _ in 0..steps {
        let (batch, replaced) = sample_batch(data, part, batch_size, rng).map_err(|_| ModelError::EmptyBatch)?;
        with_replacement |= replaced;
        objective.loss_grad(&theta, batch.view(), &mut grad)?;
        grad_norms.push(grad.iter().map(|g| g * g).sum::<f64>().sqrt());
        for (t, g) in theta.iter_mut().zip(&grad) {
            *t -= eta * g;
        }
    }
    if !theta.is_finite() {
        return Err(ModelError::NumericOverflow("local model"));
    }
    let delta = theta0.iter().zip(theta.iter()).map(|(a, b)| a - b).collect();
    Ok(LocalUpdate { delta: ParamVector(delta), grad_norms, sampled_with_replacement: with_replacement })
}
