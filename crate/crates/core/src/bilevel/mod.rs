//! Alternating bi-level optimization: Riemannian SGD on Stiefel weights,
//! momentum SGD on the remaining weights, Adam on architecture logits with
//! first- or second-order hypergradients.

mod checkpoint;
mod search;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::StiefelParam;
use crate::linalg::{thin_qr, Mat};
use crate::scalar::Real;
use crate::search_space::ParamKind;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use search::{
    batch_gradients, evaluate, search_loop, train_loop, AlphaRecord, BatchEval, EpochMetrics, EvalMetrics,
    SearchOutcome, TrainOutcome,
};

/// Validation gradient norms below this skip the finite-difference term.
pub const MIN_DELTA_GRAD_NORM: f64 = 1e-12;
/// Numerator of the finite-difference radius `δ = DELTA_SCALE / ‖g‖`.
pub const DELTA_SCALE: f64 = 0.01;

/// `G − W·sym(WᵀG)`, the projection of `g` onto the tangent space at `w`.
pub fn tangent_project<T: Real>(w: &Mat<T>, g: &Mat<T>) -> Result<Mat<T>> {
    if w.shape() != g.shape() {
        return Err(Error::shape(format!(
            "gradient is {}x{}, weight is {}x{}",
            g.rows(),
            g.cols(),
            w.rows(),
            w.cols()
        )));
    }
    let s = w.t_matmul(g).symmetrize();
    Ok(g - &w.matmul(&s))
}

/// QR retraction with the diagonal of `R` made positive.
pub fn qr_retract<T: Real>(a: &Mat<T>) -> Result<Mat<T>> {
    if !a.is_finite() {
        return Err(Error::Numeric("retraction of a non-finite matrix".into()));
    }
    let (q, r) = thin_qr(a);
    let diag = r.diag();
    let top = diag.iter().fold(T::zero(), |m, &d| m.max(d.abs()));
    let floor = T::lit(1e-12) * top.max(T::one());
    if let Some(i) = diag.iter().position(|d| d.abs() <= floor) {
        return Err(Error::Numeric(format!(
            "rank-deficient retraction: |R[{i},{i}]| = {:e}",
            diag[i].abs()
        )));
    }
    Ok(q)
}

/// `Ψ(W − lr·proj_W(G))`. A zero step returns `w` unchanged.
pub fn stiefel_step<T: Real>(w: &Mat<T>, euclid_grad: &Mat<T>, lr: T) -> Result<Mat<T>> {
    let step = tangent_project(w, euclid_grad)?.scale(lr);
    if step.as_slice().iter().all(|&x| x == T::zero()) {
        return Ok(w.clone());
    }
    qr_retract(&(w - &step))
}

pub fn riem_sgd_step<T: Real>(w: &StiefelParam<T>, euclid_grad: &Mat<T>, lr: T) -> Result<StiefelParam<T>> {
    StiefelParam::new(stiefel_step(w.as_mat(), euclid_grad, lr)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// L2 coefficient added to the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            betas: (0.5, 0.999),
            eps: 1e-8,
            weight_decay: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<Mat<f64>>,
    v: Vec<Mat<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        Self {
            cfg,
            m: shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [&mut Mat<f64>], grads: &[Mat<f64>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(format!(
                "Adam tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let AdamConfig { lr, betas: (b1, b2), eps, weight_decay } = self.cfg;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[k].shape() {
                return Err(Error::shape(format!("Adam tensor {k} changed shape")));
            }
            let m = self.m[k].as_mut_slice();
            let v = self.v[k].as_mut_slice();
            for (i, x) in p.as_mut_slice().iter_mut().enumerate() {
                let gi = g.as_slice()[i] + weight_decay * *x;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                *x -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    First,
    #[default]
    Second,
}

/// Norm used for the finite-difference radius.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaNorm {
    /// Stiefel components projected onto the tangent space first.
    #[default]
    Tangent,
    Ambient,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Inner learning rate η, also used by the virtual step.
    pub weight_lr: f64,
    pub momentum: f64,
    pub alpha: AdamConfig,
    pub order: Order,
    pub activation: crate::simplex::Activation,
    pub delta_norm: DeltaNorm,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 30,
            weight_lr: 0.025,
            momentum: 0.9,
            alpha: AdamConfig::default(),
            order: Order::Second,
            activation: crate::simplex::Activation::Sparsemax,
            delta_norm: DeltaNorm::Tangent,
        }
    }
}

impl SearchConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.batch_size == 0 {
            p.push("search.batch_size must be at least 1".into());
        }
        if !(self.weight_lr > 0.0) || !self.weight_lr.is_finite() {
            p.push(format!("search.weight_lr must be positive, got {}", self.weight_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            p.push(format!("search.momentum must lie in [0, 1), got {}", self.momentum));
        }
        p.extend(adam_problems(&self.alpha, "search.alpha"));
        p
    }
}

fn adam_problems(a: &AdamConfig, prefix: &str) -> Vec<String> {
    let mut p = Vec::new();
    if !(a.lr >= 0.0) || !a.lr.is_finite() {
        p.push(format!("{prefix}.lr must be nonnegative, got {}", a.lr));
    }
    for (i, b) in [a.betas.0, a.betas.1].into_iter().enumerate() {
        if !(0.0..1.0).contains(&b) {
            p.push(format!("{prefix}.betas[{i}] must lie in [0, 1), got {b}"));
        }
    }
    if !(a.eps > 0.0) {
        p.push(format!("{prefix}.eps must be positive, got {}", a.eps));
    }
    if !(a.weight_decay >= 0.0) {
        p.push(format!("{prefix}.weight_decay must be nonnegative, got {}", a.weight_decay));
    }
    p
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 30,
            lr: 0.025,
            momentum: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.batch_size == 0 {
            p.push("train.batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            p.push(format!("train.lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            p.push(format!("train.momentum must lie in [0, 1), got {}", self.momentum));
        }
        p
    }
}

/// Optimizer buffers for one network: Adam moments for the architecture
/// logits and momentum buffers for unconstrained weights.
#[derive(Clone, Debug)]
pub struct OptState {
    pub epoch: usize,
    pub step: usize,
    pub adam: Adam,
    momentum: Vec<Option<Mat<f64>>>,
}

impl OptState {
    pub fn new(kinds: &[ParamKind], shapes: &[(usize, usize)], alpha: AdamConfig) -> Self {
        let alpha_shapes: Vec<(usize, usize)> = kinds
            .iter()
            .zip(shapes)
            .filter(|(k, _)| **k == ParamKind::Alpha)
            .map(|(_, s)| *s)
            .collect();
        Self {
            epoch: 0,
            step: 0,
            adam: Adam::new(alpha, &alpha_shapes),
            momentum: vec![None; kinds.len()],
        }
    }

    /// Adam step on the architecture logits only.
    pub fn alpha_step(&mut self, values: &mut [Mat<f64>], kinds: &[ParamKind], grads: &[Mat<f64>]) -> Result<()> {
        let idx: Vec<usize> = (0..kinds.len()).filter(|&i| kinds[i] == ParamKind::Alpha).collect();
        let g: Vec<Mat<f64>> = idx.iter().map(|&i| grads[i].clone()).collect();
        let mut ps: Vec<&mut Mat<f64>> = values
            .iter_mut()
            .enumerate()
            .filter(|(i, _)| kinds[*i] == ParamKind::Alpha)
            .map(|(_, v)| v)
            .collect();
        self.adam.step(&mut ps, &g)
    }

    /// Riemannian SGD on Stiefel weights, momentum SGD on the others;
    /// architecture logits are left alone.
    pub fn weight_step(
        &mut self,
        values: &mut [Mat<f64>],
        kinds: &[ParamKind],
        grads: &[Mat<f64>],
        lr: f64,
        momentum: f64,
    ) -> Result<()> {
        for (i, kind) in kinds.iter().enumerate() {
            match kind {
                ParamKind::Alpha => {}
                ParamKind::Stiefel => values[i] = stiefel_step(&values[i], &grads[i], lr)?,
                ParamKind::Euclidean | ParamKind::Symmetric => {
                    let g = if *kind == ParamKind::Symmetric { grads[i].symmetrize() } else { grads[i].clone() };
                    let buf = match self.momentum[i].take() {
                        Some(mut b) => {
                            b = b.scale(momentum);
                            b.add_assign(&g);
                            b
                        }
                        None => g,
                    };
                    values[i].axpy(-lr, &buf);
                    self.momentum[i] = Some(buf);
                }
            }
        }
        Ok(())
    }
}

/// Moves every weight along `dir`: Stiefel weights by `stiefel_step` with
/// learning rate `-step`, the others by `step·dir`. Logits are kept.
pub fn displace(values: &[Mat<f64>], kinds: &[ParamKind], dir: &[Mat<f64>], step: f64) -> Result<Vec<Mat<f64>>> {
    values
        .iter()
        .zip(kinds)
        .zip(dir)
        .map(|((v, k), d)| match k {
            ParamKind::Alpha => Ok(v.clone()),
            ParamKind::Stiefel => stiefel_step(v, d, -step),
            ParamKind::Euclidean | ParamKind::Symmetric => {
                let mut out = v.clone();
                out.axpy(step, d);
                Ok(out)
            }
        })
        .collect()
}

/// Joint norm of the weight part of `grads`, taken at `values`.
pub fn weight_grad_norm(values: &[Mat<f64>], kinds: &[ParamKind], grads: &[Mat<f64>], norm: DeltaNorm) -> Result<f64> {
    let mut sq = 0.0f64;
    for ((v, k), g) in values.iter().zip(kinds).zip(grads) {
        match (k, norm) {
            (ParamKind::Alpha, _) => {}
            (ParamKind::Stiefel, DeltaNorm::Tangent) => sq += tangent_project(v, g)?.frobenius_norm().powi(2),
            _ => sq += g.frobenius_norm().powi(2),
        }
    }
    Ok(sq.sqrt())
}

/// Architecture gradient from one hypergradient evaluation.
#[derive(Clone, Debug)]
pub struct Hypergradient {
    /// Full-length; only logit entries are meaningful.
    pub grads: Vec<Mat<f64>>,
    /// Finite-difference radius, when the second-order term was used.
    pub delta: Option<f64>,
    /// Validation loss at the (virtual) evaluation point.
    pub val_loss: f64,
}

/// `∇_α E_val(w̃) − η·(∇_α E_train(w⁺) − ∇_α E_train(w⁻)) / 2δ`, with
/// `w̃` one retracted SGD step from `w` and `w± = Ψ(w ± δ·g̃)`.
///
/// `train` and `val` map a full parameter vector to `(loss, gradients)`.
/// With `eta == 0` only `val` is evaluated, at `w`.
pub fn hypergradient<F, G>(
    values: &[Mat<f64>],
    kinds: &[ParamKind],
    eta: f64,
    norm: DeltaNorm,
    train: F,
    val: G,
) -> Result<Hypergradient>
where
    F: Fn(&[Mat<f64>]) -> Result<(f64, Vec<Mat<f64>>)> + Sync,
    G: Fn(&[Mat<f64>]) -> Result<(f64, Vec<Mat<f64>>)>,
{
    if eta == 0.0 {
        let (val_loss, grads) = val(values)?;
        return Ok(Hypergradient { grads, delta: None, val_loss });
    }
    let (_, g_train) = train(values)?;
    let virtual_w = displace(values, kinds, &g_train, -eta)?;
    let (val_loss, mut grads) = val(&virtual_w)?;
    let g_norm = weight_grad_norm(values, kinds, &grads, norm)?;
    if !(g_norm >= MIN_DELTA_GRAD_NORM) {
        log::debug!("validation gradient norm {g_norm:e}: finite-difference term skipped");
        return Ok(Hypergradient { grads, delta: None, val_loss });
    }
    let delta = DELTA_SCALE / g_norm;
    let w_plus = displace(values, kinds, &grads, delta)?;
    let w_minus = displace(values, kinds, &grads, -delta)?;
    let (plus, minus) = rayon::join(|| train(&w_plus), || train(&w_minus));
    let (plus, minus) = (plus?.1, minus?.1);
    for (i, k) in kinds.iter().enumerate() {
        if *k == ParamKind::Alpha {
            let mut fd = &plus[i] - &minus[i];
            fd = fd.scale(-eta / (2.0 * delta));
            grads[i].add_assign(&fd);
        }
    }
    Ok(Hypergradient { grads, delta: Some(delta), val_loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::orthonormality_error;
    use crate::testing::{gaussian, random_stiefel, rng};

    #[test]
    fn zero_gradient_keeps_w_bitwise() {
        let mut r = rng(1);
        let w = random_stiefel(&mut r, 6, 3);
        assert_eq!(stiefel_step(&w, &Mat::zeros(6, 3), 0.1).unwrap(), w);
    }

    #[test]
    fn step_stays_on_manifold() {
        let mut r = rng(2);
        let mut w = random_stiefel(&mut r, 8, 4);
        for _ in 0..50 {
            let g = gaussian(&mut r, 8, 4).scale(10.0);
            w = stiefel_step(&w, &g, 0.05).unwrap();
            assert!(orthonormality_error(&w) <= 1e-10);
        }
    }

    #[test]
    fn projection_is_idempotent() {
        let mut r = rng(3);
        let w = random_stiefel(&mut r, 7, 3);
        let p = tangent_project(&w, &gaussian(&mut r, 7, 3)).unwrap();
        let pp = tangent_project(&w, &p).unwrap();
        assert!((&pp - &p).max_abs() <= 1e-12);
        // tangent: WᵀP is skew
        let s = w.t_matmul(&p);
        assert!((&s + &s.transpose()).max_abs() <= 1e-12);
    }

    #[test]
    fn rank_deficient_retraction_is_reported() {
        let a = Mat::from_rows(&[&[1.0, 1.0], &[0.0, 0.0], &[0.0, 0.0]]);
        assert!(matches!(qr_retract(&a), Err(Error::Numeric(_))));
    }

    #[test]
    fn adam_zero_gradient_first_step_is_identity() {
        let mut a = Adam::new(AdamConfig::default(), &[(3, 1)]);
        let mut p = Mat::zeros(3, 1);
        a.step(&mut [&mut p], &[Mat::zeros(3, 1)]).unwrap();
        assert_eq!(p, Mat::zeros(3, 1));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = AdamConfig { weight_decay: 0.0, ..Default::default() };
        let mut a = Adam::new(cfg, &[(2, 1)]);
        let mut p = Mat::zeros(2, 1);
        a.step(&mut [&mut p], &[Mat::column_vector(vec![2.0, -0.5])]).unwrap();
        assert!((p[(0, 0)] + 3e-4).abs() < 1e-10);
        assert!((p[(1, 0)] - 3e-4).abs() < 1e-10);
    }

    fn kinds() -> Vec<ParamKind> {
        vec![ParamKind::Alpha, ParamKind::Euclidean]
    }

    // E_train = α₀·sin(bᵀw) + ½‖w‖², E_val = ½‖w − c‖² + α₀²
    fn toy_train(v: &[Mat<f64>]) -> Result<(f64, Vec<Mat<f64>>)> {
        let b = Mat::column_vector(vec![0.3, -1.1, 0.7]);
        let a = v[0][(0, 0)];
        let s = b.dot(&v[1]);
        let mut gw = b.scale(a * s.cos());
        gw.add_assign(&v[1]);
        Ok((a * s.sin() + 0.5 * v[1].dot(&v[1]), vec![Mat::scalar(s.sin()), gw]))
    }

    fn toy_val(v: &[Mat<f64>]) -> Result<(f64, Vec<Mat<f64>>)> {
        let c = Mat::column_vector(vec![1.0, 2.0, -0.5]);
        let d = &v[1] - &c;
        let a = v[0][(0, 0)];
        Ok((0.5 * d.dot(&d) + a * a, vec![Mat::scalar(2.0 * a), d]))
    }

    #[test]
    fn finite_difference_matches_mixed_partial() {
        let w = Mat::column_vector(vec![0.2, 0.4, -0.3]);
        let values = vec![Mat::scalar(0.8), w.clone()];
        let eta = 0.1;
        let h = hypergradient(&values, &kinds(), eta, DeltaNorm::Tangent, toy_train, toy_val).unwrap();
        // analytic: ∇²_{α,w} E_train = cos(bᵀw)·b, applied to g = ∇_w E_val(w̃)
        let (_, gt) = toy_train(&values).unwrap();
        let wt = displace(&values, &kinds(), &gt, -eta).unwrap();
        let (_, gv) = toy_val(&wt).unwrap();
        let b = Mat::column_vector(vec![0.3, -1.1, 0.7]);
        let mixed = b.dot(&gv[1]) * b.dot(&w).cos();
        let expect = gv[0][(0, 0)] - eta * mixed;
        let got = h.grads[0][(0, 0)];
        assert!(((got - expect) / (eta * mixed)).abs() < 1e-3, "{got} vs {expect}");
        assert!((h.delta.unwrap() - 0.01 / gv[1].frobenius_norm()).abs() < 1e-15);
    }

    #[test]
    fn delta_rule() {
        // ‖g‖ = 2 → δ = 0.005
        let values = vec![Mat::scalar(0.0), Mat::column_vector(vec![0.0, 0.0])];
        let val = |_: &[Mat<f64>]| Ok((0.0, vec![Mat::scalar(0.0), Mat::column_vector(vec![2.0, 0.0])]));
        let train = |_: &[Mat<f64>]| Ok((0.0, vec![Mat::scalar(0.0), Mat::column_vector(vec![0.0, 0.0])]));
        let h = hypergradient(&values, &kinds(), 0.5, DeltaNorm::Tangent, train, val).unwrap();
        assert_eq!(h.delta, Some(0.005));
    }

    #[test]
    fn eta_zero_is_first_order() {
        let values = vec![Mat::scalar(0.8), Mat::column_vector(vec![0.2, 0.4, -0.3])];
        let h = hypergradient(&values, &kinds(), 0.0, DeltaNorm::Tangent, toy_train, toy_val).unwrap();
        assert_eq!(h.grads, toy_val(&values).unwrap().1);
        assert_eq!(h.delta, None);
    }
}
