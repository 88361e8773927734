//! Weighted Fréchet means on the SPD manifold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sym_eig_unchecked, Mat};
use crate::manifold::{eig_fn, geodesic, MatFn, SpdMatrix};
use crate::scalar::Real;

/// Tolerance on `|Σ wᵢ − 1|`.
pub const SIMPLEX_TOL: f64 = 1e-10;

/// Nonnegative weights summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightVector<T>(Vec<T>);

impl<T: Real> WeightVector<T> {
    pub fn new(w: Vec<T>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::contract("weight vector is empty"));
        }
        if let Some((i, x)) = w.iter().enumerate().find(|(_, x)| !(**x >= T::zero())) {
            return Err(Error::contract(format!("weight #{i} = {x} is negative or NaN")));
        }
        let s: T = w.iter().copied().sum();
        if (s - T::one()).abs() > T::lit(SIMPLEX_TOL) {
            return Err(Error::contract(format!("weights sum to {s}, expected 1")));
        }
        Ok(Self(w))
    }

    pub fn uniform(n: usize) -> Self {
        let v = T::one() / T::from_usize(n).expect("usize to float");
        Self(vec![v; n])
    }

    pub fn one_hot(n: usize, i: usize) -> Self {
        let mut w = vec![T::zero(); n];
        w[i] = T::one();
        Self(w)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of strictly positive entries.
    pub fn support_size(&self) -> usize {
        self.0.iter().filter(|&&x| x > T::zero()).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WfmSolver {
    Karcher,
    Recursive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WfmConfig {
    pub solver: WfmSolver,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for WfmConfig {
    fn default() -> Self {
        Self {
            solver: WfmSolver::Karcher,
            max_iters: 10,
            tol: 1e-6,
        }
    }
}

impl WfmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::config("wfm.max_iters must be at least 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::config("wfm.tol must be positive"));
        }
        Ok(())
    }

    /// Always runs exactly `iters` Karcher steps; used where the computation
    /// has to be a smooth function of its inputs (gradient checks).
    pub fn fixed(iters: usize) -> Self {
        Self {
            solver: WfmSolver::Karcher,
            max_iters: iters,
            tol: f64::MIN_POSITIVE,
        }
    }
}

#[derive(Clone, Debug)]
pub struct WfmResult<T> {
    pub mean: SpdMatrix<T>,
    /// Karcher updates applied after initialization.
    pub iterations: usize,
    /// `‖Σ wᵢ log_M(Xᵢ)‖_F` at the returned mean.
    pub residual: T,
    pub converged: bool,
}

fn check_points<T: Real>(points: &[SpdMatrix<T>], w: &WeightVector<T>) -> Result<()> {
    if points.is_empty() {
        return Err(Error::contract("Fréchet mean of an empty point set"));
    }
    if points.len() != w.len() {
        return Err(Error::contract(format!(
            "{} points but {} weights",
            points.len(),
            w.len()
        )));
    }
    let n = points[0].dim();
    if let Some((i, p)) = points.iter().enumerate().find(|(_, p)| p.dim() != n) {
        return Err(Error::shape(format!(
            "point #{i} is {}x{}, expected {n}x{n}",
            p.dim(),
            p.dim()
        )));
    }
    Ok(())
}

/// Karcher flow `M ← exp_M(Σ wᵢ log_M(Xᵢ))`, initialized at `Σ wᵢ Xᵢ`, with
/// unit step. Stops when the tangent residual drops below `cfg.tol` or after
/// `cfg.max_iters` updates; in the latter case the last iterate is returned
/// with `converged = false`.
pub fn karcher_wfm<T: Real>(
    points: &[SpdMatrix<T>],
    w: &WeightVector<T>,
    cfg: &WfmConfig,
) -> Result<WfmResult<T>> {
    check_points(points, w)?;
    cfg.validate()?;
    let n = points[0].dim();
    let active: Vec<(T, &SpdMatrix<T>)> = w
        .as_slice()
        .iter()
        .copied()
        .zip(points)
        .filter(|(wi, _)| *wi > T::zero())
        .collect();

    let mut m = Mat::zeros(n, n);
    for (wi, x) in &active {
        m.axpy(*wi, x.as_mat());
    }
    let mut mean = SpdMatrix::from_mat_unchecked(&m);
    let tol = T::lit(cfg.tol);
    let mut iterations = 0;
    loop {
        let (sq, isq) = mean.sqrt_pair()?;
        let mut tangent = Mat::zeros(n, n);
        for (wi, x) in &active {
            let inner = x.as_mat().congruence(&isq).symmetrize();
            let lg = eig_fn(&sym_eig_unchecked(&inner), MatFn::Log)?;
            tangent.axpy(*wi, &lg);
        }
        let residual = tangent.congruence(&sq).frobenius_norm();
        if residual < tol || iterations == cfg.max_iters {
            return Ok(WfmResult {
                mean,
                iterations,
                residual,
                converged: residual < tol,
            });
        }
        let step = sym_eig_unchecked(&tangent).reconstruct_with(|l| l.exp());
        mean = SpdMatrix::from_mat_unchecked(&step.congruence(&sq));
        iterations += 1;
    }
}

/// Recursive geodesic mean: `M₁ = X₁`, `Mₖ = γ(Mₖ₋₁, Xₖ; wₖ / Σ_{j≤k} wⱼ)`.
/// Order-dependent for more than two points.
pub fn recursive_wfm<T: Real>(points: &[SpdMatrix<T>], w: &WeightVector<T>) -> Result<SpdMatrix<T>> {
    check_points(points, w)?;
    let mut mean: Option<SpdMatrix<T>> = None;
    let mut cum = T::zero();
    for (&wi, x) in w.as_slice().iter().zip(points) {
        if wi <= T::zero() {
            continue;
        }
        cum += wi;
        mean = Some(match mean {
            None => x.clone(),
            Some(m) => geodesic(&m, x, wi / cum)?,
        });
    }
    mean.ok_or_else(|| Error::contract("all weights are zero"))
}

/// Unweighted Karcher barycenter.
pub fn batch_barycenter<T: Real>(points: &[SpdMatrix<T>], cfg: &WfmConfig) -> Result<WfmResult<T>> {
    if points.is_empty() {
        return Err(Error::contract("barycenter of an empty batch"));
    }
    karcher_wfm(points, &WeightVector::uniform(points.len()), cfg)
}

/// Weighted Fréchet mean with the solver selected in `cfg`.
pub fn wfm<T: Real>(points: &[SpdMatrix<T>], w: &WeightVector<T>, cfg: &WfmConfig) -> Result<SpdMatrix<T>> {
    match cfg.solver {
        WfmSolver::Karcher => karcher_wfm(points, w, cfg).map(|r| r.mean),
        WfmSolver::Recursive => recursive_wfm(points, w),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::log_map;
    use crate::testing::{random_spd, rng};

    fn close(a: &SpdMatrix<f64>, b: &SpdMatrix<f64>, tol: f64) -> bool {
        (a.as_mat() - b.as_mat()).max_abs() <= tol * b.as_mat().max_abs().max(1.0)
    }

    #[test]
    fn weight_vector_contract() {
        assert!(WeightVector::new(vec![0.5, 0.5]).is_ok());
        assert!(WeightVector::new(vec![0.6, 0.5]).is_err());
        assert!(WeightVector::new(vec![1.5, -0.5]).is_err());
        assert!(WeightVector::<f64>::new(vec![]).is_err());
    }

    #[test]
    fn one_hot_returns_support_point() {
        let mut r = rng(11);
        let pts: Vec<_> = (0..4).map(|_| random_spd(&mut r, 3, 10.0)).collect();
        for i in 0..4 {
            let res = karcher_wfm(&pts, &WeightVector::one_hot(4, i), &WfmConfig::default()).unwrap();
            assert_eq!(res.mean.as_mat(), pts[i].as_mat());
            assert!(res.converged);
        }
    }

    #[test]
    fn two_point_midpoint() {
        let pts = [SpdMatrix::identity(2), SpdMatrix::from_diag(&[4.0, 1.0])];
        let w = WeightVector::uniform(2);
        let k = karcher_wfm(&pts, &w, &WfmConfig::default()).unwrap();
        assert!(close(&k.mean, &SpdMatrix::from_diag(&[2.0, 1.0]), 1e-12));
        let rec = recursive_wfm(&pts, &w).unwrap();
        assert!(close(&rec, &SpdMatrix::from_diag(&[2.0, 1.0]), 1e-12));
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        let cfg = WfmConfig::default();
        let none: Vec<SpdMatrix<f64>> = vec![];
        assert!(matches!(batch_barycenter(&none, &cfg), Err(Error::Contract(_))));
        let pts = [SpdMatrix::<f64>::identity(2)];
        assert!(karcher_wfm(&pts, &WeightVector::uniform(2), &cfg).is_err());
    }

    #[test]
    fn permutation_invariance() {
        let mut r = rng(12);
        let pts: Vec<_> = (0..5).map(|_| random_spd(&mut r, 4, 20.0)).collect();
        let w = crate::testing::random_simplex(&mut r, 5);
        let cfg = WfmConfig { tol: 1e-12, max_iters: 100, ..WfmConfig::default() };
        let a = karcher_wfm(&pts, &WeightVector::new(w.clone()).unwrap(), &cfg).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let pp: Vec<_> = perm.iter().map(|&i| pts[i].clone()).collect();
        let wp: Vec<_> = perm.iter().map(|&i| w[i]).collect();
        let b = karcher_wfm(&pp, &WeightVector::new(wp).unwrap(), &cfg).unwrap();
        assert!(close(&a.mean, &b.mean, 1e-9));
    }

    #[test]
    fn recursive_differs_from_karcher_on_three_points() {
        let mut r = rng(13);
        let pts: Vec<_> = (0..3).map(|_| random_spd(&mut r, 3, 50.0)).collect();
        let w = WeightVector::uniform(3);
        let cfg = WfmConfig { tol: 1e-12, max_iters: 200, ..WfmConfig::default() };
        let k = karcher_wfm(&pts, &w, &cfg).unwrap().mean;
        let rec = recursive_wfm(&pts, &w).unwrap();
        assert!(k.eig().min_value() > 0.0);
        assert!(rec.eig().min_value() > 0.0);
        let gap = crate::manifold::spd_distance(&k, &rec).unwrap();
        assert!(gap > 1e-6, "gap {gap:e}");
        // order dependence of the recursive estimator
        let rev: Vec<_> = pts.iter().rev().cloned().collect();
        let rec_rev = recursive_wfm(&rev, &w).unwrap();
        assert!(crate::manifold::spd_distance(&rec, &rec_rev).unwrap() > 1e-6);
    }

    #[test]
    fn barycenter_closed_form_and_residual() {
        let pts = [SpdMatrix::from_diag(&[4.0, 1.0]), SpdMatrix::from_diag(&[1.0, 4.0])];
        let b = batch_barycenter(&pts, &WfmConfig::default()).unwrap();
        assert!(close(&b.mean, &SpdMatrix::from_diag(&[2.0, 2.0]), 1e-12));

        let mut r = rng(14);
        let pts: Vec<_> = (0..6).map(|_| random_spd(&mut r, 4, 10.0)).collect();
        let cfg = WfmConfig { tol: 1e-9, max_iters: 100, ..WfmConfig::default() };
        let b = batch_barycenter(&pts, &cfg).unwrap();
        assert!(b.converged);
        let mut sum = Mat::zeros(4, 4);
        for p in &pts {
            sum.add_assign(log_map(&b.mean, p).unwrap().as_mat());
        }
        assert!(sum.frobenius_norm() <= pts.len() as f64 * cfg.tol);
        assert!((sum.frobenius_norm() / pts.len() as f64 - b.residual).abs() < 1e-9);
    }

    #[test]
    fn identical_points() {
        let mut r = rng(15);
        let x = random_spd(&mut r, 3, 5.0);
        let b = batch_barycenter(&[x.clone(), x.clone(), x.clone()], &WfmConfig::default()).unwrap();
        assert!(close(&b.mean, &x, 1e-12));
        assert_eq!(recursive_wfm(std::slice::from_ref(&x), &WeightVector::uniform(1)).unwrap(), x);
    }

    #[test]
    fn non_convergence_is_flagged_not_fatal() {
        let mut r = rng(16);
        let pts: Vec<_> = (0..4).map(|_| random_spd(&mut r, 4, 1e3)).collect();
        let cfg = WfmConfig { max_iters: 1, tol: 1e-14, ..WfmConfig::default() };
        let res = batch_barycenter(&pts, &cfg).unwrap();
        assert_eq!(res.iterations, 1);
        assert!(!res.converged);
    }
}
