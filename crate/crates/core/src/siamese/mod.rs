//! Per-image non-contrastive training of the projector/predictor pair.
//!
//! The projector is one dense layer followed by ELU, the predictor one dense
//! layer without activation. Both map `d -> d`. Training minimises the
//! symmetric negative-cosine loss between the prediction of one view and the
//! projection of the other, with the projection target detached
//! (stop-gradient). All math runs in `f64`.

pub mod augment;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::feature_io::TokenFeatureMap;
use crate::seed;
pub use augment::{random_affine_views, AffineParams, AffineRanges, ViewPair};

#[derive(Debug, Error, PartialEq)]
pub enum SiameseError {
    #[error("zero-norm vector for token {token} ({what})")]
    ZeroVector { token: usize, what: &'static str },
    #[error("loss became non-finite ({loss}) at iteration {iteration}")]
    DivergedLoss { iteration: usize, loss: f64 },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

type Result<T> = std::result::Result<T, SiameseError>;

/// Projector and predictor weights. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct SiameseParams {
    pub proj_weight: Array2<f64>,
    pub proj_bias: Array1<f64>,
    pub pred_weight: Array2<f64>,
    pub pred_bias: Array1<f64>,
}

impl SiameseParams {
    pub fn identity(dim: usize) -> Self {
        Self {
            proj_weight: Array2::eye(dim),
            proj_bias: Array1::zeros(dim),
            pred_weight: Array2::eye(dim),
            pred_bias: Array1::zeros(dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            proj_weight: Array2::zeros((dim, dim)),
            proj_bias: Array1::zeros(dim),
            pred_weight: Array2::zeros((dim, dim)),
            pred_bias: Array1::zeros(dim),
        }
    }

    /// Identity weights plus `N(0, std^2)` noise, zero biases.
    pub fn near_identity<R: Rng + ?Sized>(dim: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let noisy_eye = |rng: &mut R| {
            let mut w = Array2::<f64>::eye(dim);
            w.iter_mut().for_each(|v| *v += normal.sample(rng));
            w
        };
        let proj_weight = noisy_eye(rng);
        let pred_weight = noisy_eye(rng);
        Self { proj_weight, proj_bias: Array1::zeros(dim), pred_weight, pred_bias: Array1::zeros(dim) }
    }

    pub fn dim(&self) -> usize {
        self.proj_bias.len()
    }

    fn check(&self, dim: usize) -> Result<()> {
        let d = self.dim();
        let ok = self.proj_weight.dim() == (d, d) && self.pred_weight.dim() == (d, d) && self.pred_bias.len() == d;
        if !ok || d != dim {
            return Err(SiameseError::ShapeMismatch(format!("parameters of dimension {d} applied to {dim}-dim tokens")));
        }
        Ok(())
    }

    /// Number of scalar parameters, `2d^2 + 2d`.
    pub fn len(&self) -> usize {
        let d = self.dim();
        2 * d * d + 2 * d
    }

    pub fn is_empty(&self) -> bool {
        self.dim() == 0
    }

    /// Flattens in the order projector weight, projector bias, predictor weight, predictor bias.
    pub fn to_vec(&self) -> Vec<f64> {
        self.proj_weight
            .iter()
            .chain(self.proj_bias.iter())
            .chain(self.pred_weight.iter())
            .chain(self.pred_bias.iter())
            .copied()
            .collect()
    }

    pub fn from_slice(dim: usize, values: &[f64]) -> Self {
        assert_eq!(values.len(), 2 * dim * dim + 2 * dim, "parameter vector length");
        let (pw, rest) = values.split_at(dim * dim);
        let (pb, rest) = rest.split_at(dim);
        let (qw, qb) = rest.split_at(dim * dim);
        Self {
            proj_weight: Array2::from_shape_vec((dim, dim), pw.to_vec()).expect("square"),
            proj_bias: Array1::from(pb.to_vec()),
            pred_weight: Array2::from_shape_vec((dim, dim), qw.to_vec()).expect("square"),
            pred_bias: Array1::from(qb.to_vec()),
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        self.proj_weight.scaled_add(scale, &other.proj_weight);
        self.proj_bias.scaled_add(scale, &other.proj_bias);
        self.pred_weight.scaled_add(scale, &other.pred_weight);
        self.pred_bias.scaled_add(scale, &other.pred_bias);
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn elu(t: f64) -> f64 {
    if t > 0.0 {
        t
    } else {
        t.exp_m1()
    }
}

#[inline]
fn elu_derivative(t: f64) -> f64 {
    if t > 0.0 {
        1.0
    } else {
        t.exp()
    }
}

fn dense(x: &Array2<f64>, weight: &Array2<f64>, bias: &Array1<f64>) -> Array2<f64> {
    let mut out = x.dot(&weight.t());
    out += bias;
    out
}

/// `ELU(x W^T + b)` row-wise.
pub fn project(params: &SiameseParams, x: &Array2<f64>) -> Array2<f64> {
    dense(x, &params.proj_weight, &params.proj_bias).mapv_into(elu)
}

/// `delta W^T + b` row-wise.
pub fn predict(params: &SiameseParams, delta: &Array2<f64>) -> Array2<f64> {
    dense(delta, &params.pred_weight, &params.pred_bias)
}

/// Negative cosine similarity `-(u/|u|).(v/|v|)`.
pub fn cosine_distance(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
    let (nu, nv) = (u.dot(&u).sqrt(), v.dot(&v).sqrt());
    if nu == 0.0 {
        return Err(SiameseError::ZeroVector { token: 0, what: "first argument" });
    }
    if nv == 0.0 {
        return Err(SiameseError::ZeroVector { token: 0, what: "second argument" });
    }
    Ok((-(u.dot(&v)) / (nu * nv)).clamp(-1.0, 1.0))
}

struct Forward {
    pre: Array2<f64>,
    delta: Array2<f64>,
    pred: Array2<f64>,
}

fn forward(params: &SiameseParams, x: &Array2<f64>) -> Forward {
    let pre = dense(x, &params.proj_weight, &params.proj_bias);
    let delta = pre.mapv(elu);
    let pred = predict(params, &delta);
    Forward { pre, delta, pred }
}

fn check_views(params: &SiameseParams, views: &ViewPair) -> Result<()> {
    if views.alpha.dim() != views.beta.dim() {
        return Err(SiameseError::ShapeMismatch(format!(
            "views {:?} and {:?} differ",
            views.alpha.dim(),
            views.beta.dim()
        )));
    }
    params.check(views.alpha.ncols())
}

fn token_distance(u: ArrayView1<f64>, v: ArrayView1<f64>, token: usize, what: &'static str) -> Result<f64> {
    cosine_distance(u, v).map_err(|_| SiameseError::ZeroVector { token, what })
}

/// Mean over tokens of `1/2 [D(f^a_i, sg(delta^b_i)) + D(sg(delta^a_i), f^b_i)]`.
pub fn symmetric_loss(params: &SiameseParams, views: &ViewPair) -> Result<f64> {
    check_views(params, views)?;
    let a = forward(params, &views.alpha);
    let b = forward(params, &views.beta);
    let n = views.alpha.nrows();
    let mut total = 0.0;
    for i in 0..n {
        let first = token_distance(a.pred.row(i), b.delta.row(i), i, "alpha prediction / beta projection")?;
        let second = token_distance(a.delta.row(i), b.pred.row(i), i, "alpha projection / beta prediction")?;
        total += 0.5 * (first + second);
    }
    Ok(total / n as f64)
}

/// Gradient of `-(u.v)/(|u||v|)` with respect to `u`.
fn cosine_grad(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Array1<f64> {
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    let cos = u.dot(&v) / (nu * nv);
    // -(v/|v| - cos * u/|u|) / |u|
    (&u * (cos / nu) - &v * (1.0 / nv)) / nu
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum TargetMode {
    Detached,
    Attached,
}

fn gradient_impl(params: &SiameseParams, views: &ViewPair, mode: TargetMode) -> Result<(f64, SiameseParams)> {
    check_views(params, views)?;
    let a = forward(params, &views.alpha);
    let b = forward(params, &views.beta);
    let (n, d) = views.alpha.dim();
    let scale = 0.5 / n as f64;

    let mut grad_pred_a = Array2::<f64>::zeros((n, d));
    let mut grad_pred_b = Array2::<f64>::zeros((n, d));
    // gradient reaching delta through the target argument; stays zero when detached
    let mut grad_target_a = Array2::<f64>::zeros((n, d));
    let mut grad_target_b = Array2::<f64>::zeros((n, d));
    let mut loss = 0.0;
    for i in 0..n {
        let (fa, db) = (a.pred.row(i), b.delta.row(i));
        let (da, fb) = (a.delta.row(i), b.pred.row(i));
        let first = token_distance(fa, db, i, "alpha prediction / beta projection")?;
        let second = token_distance(da, fb, i, "alpha projection / beta prediction")?;
        loss += 0.5 * (first + second);
        grad_pred_a.row_mut(i).assign(&(cosine_grad(fa, db) * scale));
        grad_pred_b.row_mut(i).assign(&(cosine_grad(fb, da) * scale));
        if mode == TargetMode::Attached {
            grad_target_b.row_mut(i).assign(&(cosine_grad(db, fa) * scale));
            grad_target_a.row_mut(i).assign(&(cosine_grad(da, fb) * scale));
        }
    }

    let mut grad = SiameseParams::zeros(d);
    grad.pred_weight = grad_pred_a.t().dot(&a.delta) + grad_pred_b.t().dot(&b.delta);
    grad.pred_bias = grad_pred_a.sum_axis(Axis(0)) + grad_pred_b.sum_axis(Axis(0));

    let backprop = |grad_pred: &Array2<f64>, grad_target: &Array2<f64>, fwd: &Forward| {
        let mut g = grad_pred.dot(&params.pred_weight) + grad_target;
        g.zip_mut_with(&fwd.pre, |g, &h| *g *= elu_derivative(h));
        g
    };
    let grad_pre_a = backprop(&grad_pred_a, &grad_target_a, &a);
    let grad_pre_b = backprop(&grad_pred_b, &grad_target_b, &b);
    grad.proj_weight = grad_pre_a.t().dot(&views.alpha) + grad_pre_b.t().dot(&views.beta);
    grad.proj_bias = grad_pre_a.sum_axis(Axis(0)) + grad_pre_b.sum_axis(Axis(0));

    Ok((loss / n as f64, grad))
}

/// Analytic gradient of [`symmetric_loss`] with the projection targets detached.
///
/// Gradient reaches the projector only through the predicted branch
/// `x -> delta -> f`; the target `delta` of the opposite view is a constant.
pub fn loss_gradient(params: &SiameseParams, views: &ViewPair) -> Result<SiameseParams> {
    gradient_impl(params, views, TargetMode::Detached).map(|(_, g)| g)
}

/// Loss value together with its stop-gradient gradient.
pub fn loss_and_gradient(params: &SiameseParams, views: &ViewPair) -> Result<(f64, SiameseParams)> {
    gradient_impl(params, views, TargetMode::Detached)
}

/// Gradient of the same loss with stop-gradient removed (targets differentiated too).
pub fn loss_gradient_without_stop_grad(params: &SiameseParams, views: &ViewPair) -> Result<SiameseParams> {
    gradient_impl(params, views, TargetMode::Attached).map(|(_, g)| g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub init_std: f64,
    pub affine: AffineRanges,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            batch_size: 2,
            learning_rate: 1e-2,
            init_std: 0.01,
            affine: AffineRanges::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(SiameseError::InvalidConfig("iterations must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(SiameseError::InvalidConfig("batch size must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(SiameseError::InvalidConfig(format!("learning rate {} must be finite and >= 0", self.learning_rate)));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return Err(SiameseError::InvalidConfig(format!("init std {} must be finite and >= 0", self.init_std)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub initial: SiameseParams,
    pub params: SiameseParams,
    /// `loss_trace[t]` is the loss of the parameters after `t` updates,
    /// measured on a fixed probe batch drawn before training.
    pub loss_trace: Vec<f64>,
}

impl TrainOutcome {
    /// Loss trace as CSV lines `iter,loss`, with header.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("iter,loss\n");
        for (t, loss) in self.loss_trace.iter().enumerate() {
            out.push_str(&format!("{t},{loss:.17e}\n"));
        }
        out
    }
}

fn draw_batch<R: Rng + ?Sized>(f: &TokenFeatureMap, cfg: &TrainConfig, rng: &mut R) -> Vec<ViewPair> {
    (0..cfg.batch_size)
        .map(|_| {
            let p1 = cfg.affine.sample(rng);
            let p2 = cfg.affine.sample(rng);
            random_affine_views(f, &p1, &p2)
        })
        .collect()
}

fn batch_loss(params: &SiameseParams, batch: &[ViewPair]) -> Result<f64> {
    let mut total = 0.0;
    for views in batch {
        total += symmetric_loss(params, views)?;
    }
    Ok(total / batch.len() as f64)
}

/// Trains a fresh projector/predictor pair on a single image.
///
/// Each iteration draws `batch_size` independent view pairs, averages their
/// gradients and takes one plain gradient-descent step.
pub fn train(f: &TokenFeatureMap, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut init_rng = seed::stage_rng(cfg.seed, "init", 0);
    let mut view_rng = seed::stage_rng(cfg.seed, "affine", 0);
    let mut probe_rng = seed::stage_rng(cfg.seed, "probe", 0);

    let initial = SiameseParams::near_identity(f.dim(), cfg.init_std, &mut init_rng);
    let probe = draw_batch(f, cfg, &mut probe_rng);
    let mut params = initial.clone();
    let mut trace = Vec::with_capacity(cfg.iterations + 1);

    let record = |params: &SiameseParams, trace: &mut Vec<f64>, iteration: usize| -> Result<()> {
        let loss = batch_loss(params, &probe)?;
        if !loss.is_finite() || !params.is_finite() {
            return Err(SiameseError::DivergedLoss { iteration, loss });
        }
        trace.push(loss);
        Ok(())
    };
    record(&params, &mut trace, 0)?;

    for iteration in 0..cfg.iterations {
        let batch = draw_batch(f, cfg, &mut view_rng);
        let mut step = SiameseParams::zeros(f.dim());
        for views in &batch {
            let (loss, grad) = loss_and_gradient(&params, views)?;
            if !loss.is_finite() {
                return Err(SiameseError::DivergedLoss { iteration, loss });
            }
            step.add_scaled(&grad, 1.0 / batch.len() as f64);
        }
        params.add_scaled(&step, -cfg.learning_rate);
        record(&params, &mut trace, iteration + 1)?;
    }
    Ok(TrainOutcome { initial, params, loss_trace: trace })
}
