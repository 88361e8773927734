//! SPD network layers: BiMap, batch normalization, ReEig, LogEig, ExpEig,
//! weighted Riemannian pooling, log-domain pooling and the skip/none ops.
//!
//! The free functions here evaluate layers directly on matrices; [`graph`]
//! records the same computations on a [`Tape`](crate::tape::Tape).

pub mod graph;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frechet::{batch_barycenter, karcher_wfm, WeightVector, WfmConfig};
use crate::linalg::{thin_qr, Mat};
use crate::manifold::{spd_fn, MatFn, SpdMatrix, SymMatrix};
use crate::rng::Rng;
use crate::scalar::Real;
use crate::simplex::Activation;
use crate::tape::PoolKind;

pub const DEFAULT_REEIG_EPS: f64 = 1e-4;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.9;
/// Bound on `‖WᵀW − I‖_F` for a valid Stiefel point.
pub const STIEFEL_TOL: f64 = 1e-8;

/// `n×m` matrix with orthonormal columns (`n ≥ m`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StiefelParam<T>(Mat<T>);

impl<T: Real> StiefelParam<T> {
    pub fn new(w: Mat<T>) -> Result<Self> {
        if w.rows() < w.cols() {
            return Err(Error::shape(format!(
                "Stiefel matrix must be tall, got {}x{}",
                w.rows(),
                w.cols()
            )));
        }
        let err = orthonormality_error(&w);
        if !(err.to_f64_lossy() <= STIEFEL_TOL) {
            return Err(Error::contract(format!("columns are not orthonormal: ‖WᵀW − I‖ = {err:e}")));
        }
        Ok(Self(w))
    }

    /// Orthonormal columns from the QR factor of a Gaussian draw.
    pub fn random(rng: &mut Rng, n: usize, m: usize) -> Result<Self> {
        use rand_distr::{Distribution, StandardNormal};
        if n < m || m == 0 {
            return Err(Error::config(format!("cannot map dimension {n} to {m} with a BiMap")));
        }
        let g = Mat::from_fn(n, m, |_, _| {
            let v: f64 = StandardNormal.sample(rng);
            T::lit(v)
        });
        Ok(Self(thin_qr(&g).0))
    }

    pub fn identity(n: usize) -> Self {
        Self(Mat::identity(n))
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn cols(&self) -> usize {
        self.0.cols()
    }

    pub fn as_mat(&self) -> &Mat<T> {
        &self.0
    }

    pub fn into_mat(self) -> Mat<T> {
        self.0
    }
}

/// `‖WᵀW − I‖_F`
pub fn orthonormality_error<T: Real>(w: &Mat<T>) -> T {
    let mut g = w.t_matmul(w);
    for i in 0..g.rows() {
        g[(i, i)] -= T::one();
    }
    g.frobenius_norm()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReEigConfig<T> {
    pub eps: T,
}

impl<T: Real> ReEigConfig<T> {
    pub fn new(eps: T) -> Result<Self> {
        if !(eps > T::zero()) || !eps.is_finite() {
            return Err(Error::config(format!("ReEig threshold must be positive, got {eps}")));
        }
        Ok(Self { eps })
    }
}

impl<T: Real> Default for ReEigConfig<T> {
    fn default() -> Self {
        Self {
            eps: T::lit(DEFAULT_REEIG_EPS),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    Train,
    Eval,
}

/// Running statistics and bias of a Riemannian batch normalization layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState<T> {
    pub running_mean: SpdMatrix<T>,
    pub bias: SpdMatrix<T>,
    pub momentum: T,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(n: usize) -> Self {
        Self {
            running_mean: SpdMatrix::identity(n),
            bias: SpdMatrix::identity(n),
            momentum: T::lit(DEFAULT_BN_MOMENTUM),
        }
    }

    pub fn with_momentum(n: usize, momentum: T) -> Result<Self> {
        if !(momentum >= T::zero() && momentum <= T::one()) {
            return Err(Error::config(format!("momentum must lie in [0, 1], got {momentum}")));
        }
        Ok(Self {
            momentum,
            ..Self::new(n)
        })
    }

    pub fn dim(&self) -> usize {
        self.running_mean.dim()
    }
}

/// Moves the running mean toward a batch mean along the geodesic:
/// `wFM({batch, running}, (1 − θ, θ))`.
pub fn update_running_mean<T: Real>(
    running: &SpdMatrix<T>,
    batch_mean: &SpdMatrix<T>,
    momentum: T,
    cfg: &WfmConfig,
) -> Result<SpdMatrix<T>> {
    let w = WeightVector::new(vec![T::one() - momentum, momentum])?;
    Ok(karcher_wfm(&[batch_mean.clone(), running.clone()], &w, cfg)?.mean)
}

/// One weight vector over input channels per output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolChannelWeights<T> {
    rows: Vec<WeightVector<T>>,
}

impl<T: Real> PoolChannelWeights<T> {
    pub fn new(rows: Vec<WeightVector<T>>) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::contract("pooling needs at least one output channel"))?;
        if rows.iter().any(|r| r.len() != first.len()) {
            return Err(Error::shape("pooling weight rows differ in length"));
        }
        Ok(Self { rows })
    }

    /// Activates each row of an `out × in` logit matrix.
    pub fn from_logits(logits: &Mat<T>, activation: Activation) -> Result<Self> {
        let rows = (0..logits.rows())
            .map(|i| activation.weights(logits.row(i)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(rows)
    }

    pub fn rows(&self) -> &[WeightVector<T>] {
        &self.rows
    }

    pub fn inputs(&self) -> usize {
        self.rows[0].len()
    }
}

/// `Wᵀ X W`
pub fn bimap_forward<T: Real>(x: &SpdMatrix<T>, w: &StiefelParam<T>) -> Result<SpdMatrix<T>> {
    if x.dim() != w.rows() {
        return Err(Error::shape(format!(
            "BiMap weight is {}x{} but the input is {}x{}",
            w.rows(),
            w.cols(),
            x.dim(),
            x.dim()
        )));
    }
    Ok(SpdMatrix::from_mat_unchecked(&x.as_mat().congruence_t(w.as_mat())))
}

/// `U max(εI, Σ) Uᵀ`
pub fn reeig_forward<T: Real>(x: &SpdMatrix<T>, cfg: &ReEigConfig<T>) -> SpdMatrix<T> {
    let e = x.eig();
    SpdMatrix::from_mat_unchecked(&e.reconstruct_with(|l| MatFn::Rectify(cfg.eps).apply(l)))
}

pub fn logeig_forward<T: Real>(x: &SpdMatrix<T>) -> Result<SymMatrix<T>> {
    spd_fn(x, MatFn::Log)
}

pub fn expeig_forward<T: Real>(s: &SymMatrix<T>) -> SpdMatrix<T> {
    crate::manifold::expm(s)
}

/// Centres the batch at the identity and transports it to the bias `G`:
/// `G^{½} M^{−½} Xᵢ M^{−½} G^{½}` with `M` the batch barycenter (train) or
/// the running mean (eval). Train mode also advances the running mean.
pub fn batchnorm_forward<T: Real>(
    batch: &[SpdMatrix<T>],
    state: &mut BatchNormState<T>,
    mode: BnMode,
    cfg: &WfmConfig,
) -> Result<Vec<SpdMatrix<T>>> {
    if batch.is_empty() {
        if mode == BnMode::Train {
            return Err(Error::contract("batch normalization of an empty batch"));
        }
        return Ok(Vec::new());
    }
    if let Some(x) = batch.iter().find(|x| x.dim() != state.dim()) {
        return Err(Error::shape(format!(
            "batch normalization state is {}x{} but a sample is {}x{}",
            state.dim(),
            state.dim(),
            x.dim(),
            x.dim()
        )));
    }
    let center = match mode {
        BnMode::Train => batch_barycenter(batch, cfg)?.mean,
        BnMode::Eval => state.running_mean.clone(),
    };
    let (_, isq) = center.sqrt_pair()?;
    let (gh, _) = state.bias.sqrt_pair()?;
    let a = isq.matmul(&gh);
    let out = batch
        .iter()
        .map(|x| SpdMatrix::from_mat_unchecked(&x.as_mat().congruence_t(&a)))
        .collect();
    if mode == BnMode::Train {
        state.running_mean = update_running_mean(&state.running_mean, &center, state.momentum, cfg)?;
    }
    Ok(out)
}

/// Output channel `j` is the weighted Fréchet mean of the input channels
/// under row `j` of the weights.
pub fn weighted_riem_pooling<T: Real>(
    channels: &[SpdMatrix<T>],
    weights: &PoolChannelWeights<T>,
    cfg: &WfmConfig,
) -> Result<Vec<SpdMatrix<T>>> {
    if channels.is_empty() {
        return Err(Error::contract("pooling of zero channels"));
    }
    if weights.inputs() != channels.len() {
        return Err(Error::shape(format!(
            "pooling weights expect {} channels, got {}",
            weights.inputs(),
            channels.len()
        )));
    }
    weights
        .rows()
        .iter()
        .map(|w| Ok(karcher_wfm(channels, w, cfg)?.mean))
        .collect()
}

fn check_kernel(k: usize) -> Result<()> {
    if k != 2 && k != 4 {
        return Err(Error::config(format!("pooling kernel must be 2 or 4, got {k}")));
    }
    Ok(())
}

/// Output dimension of log-domain pooling with zero padding.
pub fn pooled_dim(n: usize, k: usize) -> usize {
    n.div_ceil(k)
}

fn pool_reduced<T: Real>(x: &SpdMatrix<T>, k: usize, kind: PoolKind) -> Result<SpdMatrix<T>> {
    check_kernel(k)?;
    let lg = logeig_forward(x)?;
    let (pooled, _) = crate::tape::pool_forward(lg.as_mat(), k, kind);
    Ok(expeig_forward(&SymMatrix::from_symmetrized(&pooled)))
}

/// LogEig → `k×k` average pooling with stride `k` → ExpEig.
pub fn avg_pool_reduced<T: Real>(x: &SpdMatrix<T>, k: usize) -> Result<SpdMatrix<T>> {
    pool_reduced(x, k, PoolKind::Avg)
}

/// LogEig → `k×k` max pooling with stride `k` → ExpEig.
pub fn max_pool_reduced<T: Real>(x: &SpdMatrix<T>, k: usize) -> Result<SpdMatrix<T>> {
    pool_reduced(x, k, PoolKind::Max)
}

/// `diag(W₁ᵀXW₁, W₂ᵀXW₂)`: the block-diagonal recomposition of the two
/// blocks' eigendecompositions, which reproduces the blocks themselves.
pub fn skip_reduced<T: Real>(
    x: &SpdMatrix<T>,
    w1: &StiefelParam<T>,
    w2: &StiefelParam<T>,
) -> Result<SpdMatrix<T>> {
    if w1.cols() != w2.cols() {
        return Err(Error::config("skip-reduced blocks must have equal width"));
    }
    let c1 = bimap_forward(x, w1)?;
    let c2 = bimap_forward(x, w2)?;
    Ok(SpdMatrix::from_mat_unchecked(&Mat::block_diag(c1.as_mat(), c2.as_mat())))
}

pub fn skip_normal<T: Real>(x: &SpdMatrix<T>) -> SpdMatrix<T> {
    x.clone()
}

pub fn none_normal<T: Real>(x: &SpdMatrix<T>) -> SpdMatrix<T> {
    SpdMatrix::identity(x.dim())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frechet::WfmConfig;
    use crate::testing::{random_spd, random_stiefel, rng};

    fn close(a: &Mat<f64>, b: &Mat<f64>, tol: f64) -> bool {
        (a - b).max_abs() <= tol
    }

    #[test]
    fn bimap_identity_and_shapes() {
        let mut r = rng(1);
        let x = random_spd(&mut r, 20, 100.0);
        let same = bimap_forward(&x, &StiefelParam::identity(20)).unwrap();
        assert_eq!(same.as_mat(), x.as_mat());
        let w = StiefelParam::new(random_stiefel(&mut r, 20, 10)).unwrap();
        assert_eq!(bimap_forward(&x, &w).unwrap().dim(), 10);
        let x93 = random_spd(&mut r, 93, 10.0);
        let w93 = StiefelParam::random(&mut r, 93, 30).unwrap();
        let y = bimap_forward(&x93, &w93).unwrap();
        assert_eq!(y.dim(), 30);
        assert!(y.eig().min_value() > 0.0);
        assert!(matches!(bimap_forward(&x93, &w).unwrap_err(), Error::Shape(_)));
    }

    #[test]
    fn reeig_thresholds_small_eigenvalues() {
        let x = SpdMatrix::from_diag(&[1.0, 1e-6]);
        let y = reeig_forward(&x, &ReEigConfig::new(1e-4).unwrap());
        assert_eq!(y.as_mat(), &Mat::from_diag(&[1.0, 1e-4]));
        let mut r = rng(2);
        let z = random_spd(&mut r, 6, 10.0);
        let same = reeig_forward(&z, &ReEigConfig::default());
        assert!(close(same.as_mat(), z.as_mat(), 1e-10));
        assert!(ReEigConfig::new(0.0).is_err());
    }

    #[test]
    fn logeig_expeig_closed_forms() {
        let e = std::f64::consts::E;
        assert_eq!(logeig_forward(&SpdMatrix::<f64>::identity(3)).unwrap().as_mat(), &Mat::zeros(3, 3));
        let l = logeig_forward(&SpdMatrix::from_diag(&[e, 1.0])).unwrap();
        assert!(close(l.as_mat(), &Mat::from_diag(&[1.0, 0.0]), 1e-15));
        assert_eq!(expeig_forward(&SymMatrix::<f64>::zeros(2)).as_mat(), &Mat::identity(2));
        let x = expeig_forward(&SymMatrix::from_diag(&[1.0, 0.0]));
        assert!(close(x.as_mat(), &Mat::from_diag(&[e, 1.0]), 1e-15));
        assert!(logeig_forward(&SpdMatrix::from_mat_unchecked(&Mat::from_diag(&[1.0, 1e-13]))).is_err());
    }

    #[test]
    fn batchnorm_single_sample_centres_to_identity() {
        let mut r = rng(3);
        let x = random_spd(&mut r, 4, 10.0);
        let mut st = BatchNormState::new(4);
        let out = batchnorm_forward(&[x], &mut st, BnMode::Train, &WfmConfig::default()).unwrap();
        assert!(close(out[0].as_mat(), &Mat::identity(4), 1e-10));
    }

    #[test]
    fn batchnorm_eval_is_pure_and_empty_train_fails() {
        let mut r = rng(4);
        let batch: Vec<_> = (0..3).map(|_| random_spd(&mut r, 3, 5.0)).collect();
        let mut st = BatchNormState::new(3);
        st.running_mean = random_spd(&mut r, 3, 5.0);
        let before = st.clone();
        let a = batchnorm_forward(&batch, &mut st, BnMode::Eval, &WfmConfig::default()).unwrap();
        let b = batchnorm_forward(&batch, &mut st, BnMode::Eval, &WfmConfig::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(st, before);
        let err = batchnorm_forward(&[], &mut st, BnMode::Train, &WfmConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn pooling_closed_forms() {
        let e = std::f64::consts::E;
        let x = SpdMatrix::from_diag(&[e * e, e * e, e.powi(4), e.powi(4)]);
        let avg = avg_pool_reduced(&x, 2).unwrap();
        assert!(close(avg.as_mat(), &Mat::from_diag(&[e, e * e]), 1e-12));
        let max = max_pool_reduced(&x, 2).unwrap();
        assert!(close(max.as_mat(), &Mat::from_diag(&[e * e, e.powi(4)]), 1e-11));
        assert!(matches!(avg_pool_reduced(&x, 3).unwrap_err(), Error::Config(_)));
    }

    #[test]
    fn pooling_pads_to_kernel_multiple() {
        let mut r = rng(5);
        let x = random_spd(&mut r, 5, 10.0);
        assert_eq!(avg_pool_reduced(&x, 2).unwrap().dim(), 3);
        assert_eq!(max_pool_reduced(&x, 4).unwrap().dim(), 2);
    }

    #[test]
    fn skip_reduced_of_identity() {
        let mut r = rng(6);
        let w1 = StiefelParam::random(&mut r, 6, 2).unwrap();
        let w2 = StiefelParam::random(&mut r, 6, 2).unwrap();
        let y = skip_reduced(&SpdMatrix::identity(6), &w1, &w2).unwrap();
        assert!(close(y.as_mat(), &Mat::identity(4), 1e-14));
    }

    #[test]
    fn skip_and_none() {
        let mut r = rng(7);
        let x = random_spd(&mut r, 5, 10.0);
        assert_eq!(skip_normal(&x), x);
        assert_eq!(none_normal(&x).as_mat(), &Mat::identity(5));
    }

    #[test]
    fn pooling_weights_validate_rows() {
        let logits = Mat::from_rows(&[&[3.0, 0.0], &[0.0, 0.0]]);
        let w = PoolChannelWeights::from_logits(&logits, Activation::Sparsemax).unwrap();
        assert_eq!(w.rows()[0].as_slice(), &[1.0, 0.0]);
        assert_eq!(w.rows()[1].as_slice(), &[0.5, 0.5]);
    }
}
