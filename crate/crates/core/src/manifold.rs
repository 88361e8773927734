//! Affine-invariant geometry of the SPD cone: eigen-based matrix functions,
//! geodesic distance, exponential/logarithmic maps and congruence transport.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sym_eig_unchecked, EigDecomp, Mat};
use crate::scalar::Real;

/// Relative tolerance on `max|X − Xᵀ|` for a matrix to count as symmetric.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Eigenvalues at or below this are rejected by `log`, `sqrt`, `invsqrt`
/// and fractional powers.
pub const EIG_FLOOR: f64 = 1e-12;

fn check_symmetric<T: Real>(m: &Mat<T>, what: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::shape(format!(
            "{what}: expected a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if !m.is_finite() {
        return Err(Error::contract(format!("{what}: non-finite entries")));
    }
    let scale = m.max_abs();
    let asym = m.asymmetry();
    if asym > T::lit(SYMMETRY_TOL) * scale {
        return Err(Error::contract(format!(
            "{what}: matrix is not symmetric (max |X - X^T| = {asym:e}, max |X| = {scale:e})"
        )));
    }
    Ok(())
}

/// Symmetric matrix; the home of tangent vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymMatrix<T>(Mat<T>);

/// Symmetric positive-definite matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpdMatrix<T>(Mat<T>);

impl<T: Real> SymMatrix<T> {
    pub fn new(m: Mat<T>) -> Result<Self> {
        check_symmetric(&m, "SymMatrix")?;
        Ok(Self(m))
    }

    /// Wraps the exact symmetric part of `m`.
    pub fn from_symmetrized(m: &Mat<T>) -> Self {
        Self(m.symmetrize())
    }

    pub fn zeros(n: usize) -> Self {
        Self(Mat::zeros(n, n))
    }

    pub fn from_diag(d: &[T]) -> Self {
        Self(Mat::from_diag(d))
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn as_mat(&self) -> &Mat<T> {
        &self.0
    }

    pub fn into_mat(self) -> Mat<T> {
        self.0
    }

    pub fn scale(&self, s: T) -> Self {
        Self(self.0.scale(s))
    }
}

impl<T: Real> SpdMatrix<T> {
    /// Validates symmetry and strict positive definiteness.
    pub fn new(m: Mat<T>) -> Result<Self> {
        check_symmetric(&m, "SpdMatrix")?;
        let e = sym_eig_unchecked(&m);
        let min = e.min_value();
        if !(min > T::zero()) {
            return Err(Error::Domain(format!(
                "matrix is not positive definite: smallest eigenvalue {min:e}"
            )));
        }
        Ok(Self(m))
    }

    /// Wraps `m` without validation. The exact symmetric part is stored.
    pub fn from_mat_unchecked(m: &Mat<T>) -> Self {
        Self(m.symmetrize())
    }

    pub fn identity(n: usize) -> Self {
        Self(Mat::identity(n))
    }

    /// Panics on a nonpositive entry.
    pub fn from_diag(d: &[T]) -> Self {
        assert!(d.iter().all(|&x| x > T::zero()), "diagonal must be positive");
        Self(Mat::from_diag(d))
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn as_mat(&self) -> &Mat<T> {
        &self.0
    }

    pub fn into_mat(self) -> Mat<T> {
        self.0
    }

    pub fn to_sym(&self) -> SymMatrix<T> {
        SymMatrix(self.0.clone())
    }

    pub fn eig(&self) -> EigDecomp<T> {
        sym_eig_unchecked(&self.0)
    }

    /// `(X^{1/2}, X^{-1/2})` from one eigendecomposition.
    pub fn sqrt_pair(&self) -> Result<(Mat<T>, Mat<T>)> {
        let e = self.eig();
        check_floor(&e, "sqrt")?;
        Ok((
            e.reconstruct_with(|l| l.sqrt()),
            e.reconstruct_with(|l| T::one() / l.sqrt()),
        ))
    }

    pub fn condition_number(&self) -> T {
        let e = self.eig();
        e.max_value() / e.min_value()
    }
}

/// Read access shared by symmetric and SPD matrices.
pub trait Symmetric<T> {
    fn mat(&self) -> &Mat<T>;
}

impl<T: Real> Symmetric<T> for SymMatrix<T> {
    fn mat(&self) -> &Mat<T> {
        &self.0
    }
}

impl<T: Real> Symmetric<T> for SpdMatrix<T> {
    fn mat(&self) -> &Mat<T> {
        &self.0
    }
}

/// Scalar function applied to the spectrum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum MatFn<T> {
    Log,
    Exp,
    Sqrt,
    InvSqrt,
    Power(T),
    /// `max(ε, λ)`, the ReEig rectifier.
    Rectify(T),
}

impl<T: Real> MatFn<T> {
    pub fn apply(&self, l: T) -> T {
        match *self {
            MatFn::Log => l.ln(),
            MatFn::Exp => l.exp(),
            MatFn::Sqrt => l.sqrt(),
            MatFn::InvSqrt => T::one() / l.sqrt(),
            MatFn::Power(p) => l.powf(p),
            MatFn::Rectify(eps) => {
                if l < eps {
                    eps
                } else {
                    l
                }
            }
        }
    }

    /// `f'(λ)`; the rectifier uses subgradient 1 at the threshold.
    pub fn derivative(&self, l: T) -> T {
        match *self {
            MatFn::Log => T::one() / l,
            MatFn::Exp => l.exp(),
            MatFn::Sqrt => T::half() / l.sqrt(),
            MatFn::InvSqrt => -T::half() / (l * l.sqrt()),
            MatFn::Power(p) => p * l.powf(p - T::one()),
            MatFn::Rectify(eps) => {
                if l < eps {
                    T::zero()
                } else {
                    T::one()
                }
            }
        }
    }

    pub fn requires_positive(&self) -> bool {
        matches!(
            self,
            MatFn::Log | MatFn::Sqrt | MatFn::InvSqrt | MatFn::Power(_)
        )
    }

    pub fn name(&self) -> &'static str {
        match self {
            MatFn::Log => "log",
            MatFn::Exp => "exp",
            MatFn::Sqrt => "sqrt",
            MatFn::InvSqrt => "invsqrt",
            MatFn::Power(_) => "power",
            MatFn::Rectify(_) => "rectify",
        }
    }
}

fn check_floor<T: Real>(e: &EigDecomp<T>, fname: &str) -> Result<()> {
    let floor = T::lit(EIG_FLOOR);
    if let Some((i, &l)) = e
        .values
        .iter()
        .enumerate()
        .find(|(_, &l)| !(l > floor))
    {
        return Err(Error::Domain(format!(
            "{fname} needs a positive-definite argument: eigenvalue #{i} = {l:e} is below {EIG_FLOOR:e}"
        )));
    }
    Ok(())
}

/// Validated eigendecomposition of a symmetric matrix.
pub fn sym_eig<T: Real>(s: &Mat<T>) -> Result<EigDecomp<T>> {
    check_symmetric(s, "sym_eig")?;
    Ok(sym_eig_unchecked(s))
}

/// Applies `f` to an already-computed decomposition.
pub fn eig_fn<T: Real>(e: &EigDecomp<T>, f: MatFn<T>) -> Result<Mat<T>> {
    if f.requires_positive() {
        check_floor(e, f.name())?;
    }
    Ok(e.reconstruct_with(|l| f.apply(l)))
}

/// `U f(Λ) Uᵀ` for a symmetric (or SPD) argument.
pub fn spd_fn<T: Real, S: Symmetric<T>>(x: &S, f: MatFn<T>) -> Result<SymMatrix<T>> {
    let e = sym_eig(x.mat())?;
    eig_fn(&e, f).map(SymMatrix)
}

/// Matrix exponential of a symmetric matrix; always SPD.
pub fn expm<T: Real>(s: &SymMatrix<T>) -> SpdMatrix<T> {
    let e = sym_eig_unchecked(s.as_mat());
    SpdMatrix(e.reconstruct_with(|l| l.exp()))
}

/// Matrix logarithm of an SPD matrix.
pub fn logm<T: Real>(x: &SpdMatrix<T>) -> Result<SymMatrix<T>> {
    let e = x.eig();
    eig_fn(&e, MatFn::Log).map(SymMatrix)
}

fn same_dim<T: Real>(a: &Mat<T>, b: &Mat<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(())
}

/// Affine-invariant distance `0.5 ‖log(X₁^{-1/2} X₂ X₁^{-1/2})‖_F`.
pub fn spd_distance<T: Real>(x1: &SpdMatrix<T>, x2: &SpdMatrix<T>) -> Result<T> {
    same_dim(x1.as_mat(), x2.as_mat(), "spd_distance")?;
    let (_, isq) = x1.sqrt_pair()?;
    let inner = x2.as_mat().congruence(&isq).symmetrize();
    let e = sym_eig_unchecked(&inner);
    check_floor(&e, "spd_distance")?;
    let ss: T = e.values.iter().map(|&l| l.ln() * l.ln()).sum();
    Ok(T::half() * ss.sqrt())
}

/// `exp_X(Y) = X^{1/2} exp(X^{-1/2} Y X^{-1/2}) X^{1/2}`
pub fn exp_map<T: Real>(x: &SpdMatrix<T>, y: &SymMatrix<T>) -> Result<SpdMatrix<T>> {
    same_dim(x.as_mat(), y.as_mat(), "exp_map")?;
    let (sq, isq) = x.sqrt_pair()?;
    let inner = y.as_mat().congruence(&isq).symmetrize();
    let ex = sym_eig_unchecked(&inner).reconstruct_with(|l| l.exp());
    Ok(SpdMatrix::from_mat_unchecked(&ex.congruence(&sq)))
}

/// `log_X(Z) = X^{1/2} log(X^{-1/2} Z X^{-1/2}) X^{1/2}`
pub fn log_map<T: Real>(x: &SpdMatrix<T>, z: &SpdMatrix<T>) -> Result<SymMatrix<T>> {
    same_dim(x.as_mat(), z.as_mat(), "log_map")?;
    let (sq, isq) = x.sqrt_pair()?;
    let inner = z.as_mat().congruence(&isq).symmetrize();
    let e = sym_eig_unchecked(&inner);
    let lg = eig_fn(&e, MatFn::Log)?;
    Ok(SymMatrix::from_symmetrized(&lg.congruence(&sq)))
}

/// Point at parameter `t` on the geodesic from `x` to `z`.
pub fn geodesic<T: Real>(x: &SpdMatrix<T>, z: &SpdMatrix<T>, t: T) -> Result<SpdMatrix<T>> {
    same_dim(x.as_mat(), z.as_mat(), "geodesic")?;
    let (sq, isq) = x.sqrt_pair()?;
    let inner = z.as_mat().congruence(&isq).symmetrize();
    let e = sym_eig_unchecked(&inner);
    check_floor(&e, "geodesic")?;
    let p = e.reconstruct_with(|l| l.powf(t));
    Ok(SpdMatrix::from_mat_unchecked(&p.congruence(&sq)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportDirection {
    /// `A^{-1/2} X A^{-1/2}`
    TowardIdentity,
    /// `A^{1/2} X A^{1/2}`
    FromIdentity,
}

/// Congruence transport between `A` and the identity.
pub fn congruence_transport<T: Real, S: Symmetric<T>>(
    x: &S,
    a: &SpdMatrix<T>,
    direction: TransportDirection,
) -> Result<Mat<T>> {
    same_dim(x.mat(), a.as_mat(), "congruence_transport")?;
    let (sq, isq) = a.sqrt_pair()?;
    let m = match direction {
        TransportDirection::TowardIdentity => x.mat().congruence(&isq),
        TransportDirection::FromIdentity => x.mat().congruence(&sq),
    };
    Ok(m.symmetrize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{random_spd, random_sym, rng};

    const E: f64 = std::f64::consts::E;

    #[test]
    fn sym_eig_of_diagonal() {
        let e = sym_eig(&Mat::from_diag(&[3.0, 1.0])).unwrap();
        assert_eq!(e.values, vec![3.0, 1.0]);
        assert_eq!(e.vectors, Mat::identity(2));
    }

    #[test]
    fn sym_eig_of_identity() {
        let e = sym_eig(&Mat::<f64>::identity(2)).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0]);
        let utu = e.vectors.t_matmul(&e.vectors);
        assert!((&utu - &Mat::identity(2)).max_abs() < 1e-15);
    }

    #[test]
    fn sym_eig_reconstructs_random_symmetric() {
        let mut r = rng(1);
        for _ in 0..20 {
            let s = random_sym(&mut r, 5, 3.0);
            let e = sym_eig(s.as_mat()).unwrap();
            let rec = e.reconstruct();
            let rel = (&rec - s.as_mat()).max_abs() / s.as_mat().max_abs();
            assert!(rel <= 1e-9, "reconstruction error {rel:e}");
            let utu = e.vectors.t_matmul(&e.vectors);
            assert!((&utu - &Mat::identity(5)).max_abs() < 1e-10);
            assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn sym_eig_rejects_asymmetric() {
        let m = Mat::from_rows(&[&[1.0, 2.0], &[0.0, 1.0]]);
        assert!(matches!(sym_eig(&m), Err(Error::Contract(_))));
    }

    #[test]
    fn sym_eig_is_bitwise_deterministic() {
        let mut r = rng(2);
        let s = random_sym(&mut r, 7, 1.0);
        let a = sym_eig(s.as_mat()).unwrap();
        let b = sym_eig(s.as_mat()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn spd_fn_on_diagonal_and_identity() {
        let x = SpdMatrix::from_diag(&[E * E, 1.0]);
        let l = spd_fn(&x, MatFn::Log).unwrap();
        assert!((l.as_mat() - &Mat::from_diag(&[2.0, 0.0])).max_abs() < 1e-15);

        let i3 = SpdMatrix::<f64>::identity(3);
        for f in [MatFn::Log, MatFn::Exp, MatFn::Sqrt, MatFn::InvSqrt, MatFn::Power(2.5)] {
            let out = spd_fn(&i3, f).unwrap();
            let want = Mat::identity(3).scale(f.apply(1.0));
            assert!((out.as_mat() - &want).max_abs() < 1e-15, "{}", f.name());
        }
    }

    #[test]
    fn spd_fn_log_exp_roundtrip() {
        let mut r = rng(3);
        for _ in 0..20 {
            let x = random_spd(&mut r, 6, 100.0);
            let l = spd_fn(&x, MatFn::Log).unwrap();
            let back = spd_fn(&l, MatFn::Exp).unwrap();
            let err = (back.as_mat() - x.as_mat()).max_abs() / x.as_mat().max_abs();
            assert!(err < 1e-9, "{err:e}");
        }
    }

    #[test]
    fn spd_fn_domain_error_names_eigenvalue() {
        let s = SymMatrix::from_diag(&[1.0, -0.5]);
        let err = spd_fn(&s, MatFn::Log).unwrap_err();
        match err {
            Error::Domain(msg) => assert!(msg.contains("-5e-1"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(spd_fn(&s, MatFn::Exp).is_ok());
    }

    #[test]
    fn distance_closed_forms() {
        let mut r = rng(4);
        let x = random_spd(&mut r, 4, 10.0);
        assert!(spd_distance(&x, &x).unwrap() < 1e-12);
        let d = spd_distance(&SpdMatrix::identity(2), &SpdMatrix::from_diag(&[E * E, 1.0])).unwrap();
        assert!((d - 1.0).abs() < 1e-14);
    }

    #[test]
    fn distance_dimension_mismatch() {
        let a = SpdMatrix::<f64>::identity(2);
        let b = SpdMatrix::<f64>::identity(3);
        assert!(matches!(spd_distance(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn distance_symmetry_and_affine_invariance() {
        let mut r = rng(5);
        for _ in 0..20 {
            let a = random_spd(&mut r, 5, 50.0);
            let b = random_spd(&mut r, 5, 50.0);
            let dab = spd_distance(&a, &b).unwrap();
            let dba = spd_distance(&b, &a).unwrap();
            assert!((dab - dba).abs() < 1e-10 * (1.0 + dab));
            let m = crate::testing::random_invertible(&mut r, 5);
            let ma = SpdMatrix::new(a.as_mat().congruence(&m).symmetrize()).unwrap();
            let mb = SpdMatrix::new(b.as_mat().congruence(&m).symmetrize()).unwrap();
            let dm = spd_distance(&ma, &mb).unwrap();
            assert!((dm - dab).abs() < 1e-8 * (1.0 + dab), "{dm} vs {dab}");
        }
    }

    #[test]
    fn exp_and_log_maps_closed_forms() {
        let mut r = rng(6);
        let x = random_spd(&mut r, 4, 10.0);
        let z = exp_map(&x, &SymMatrix::zeros(4)).unwrap();
        assert!((z.as_mat() - x.as_mat()).max_abs() < 1e-12 * x.as_mat().max_abs());
        let i2 = SpdMatrix::identity(2);
        let e1 = exp_map(&i2, &SymMatrix::from_diag(&[1.0, 0.0])).unwrap();
        assert!((e1.as_mat() - &Mat::from_diag(&[E, 1.0])).max_abs() < 1e-14);
        let l0 = log_map(&x, &x).unwrap();
        assert!(l0.as_mat().max_abs() < 1e-12);
        let l1 = log_map(&i2, &SpdMatrix::from_diag(&[E, 1.0])).unwrap();
        assert!((l1.as_mat() - &Mat::from_diag(&[1.0, 0.0])).max_abs() < 1e-14);
    }

    #[test]
    fn exp_log_roundtrip() {
        let mut r = rng(7);
        for _ in 0..30 {
            let x = random_spd(&mut r, 5, 1e2);
            let z = random_spd(&mut r, 5, 1e2);
            let y = log_map(&x, &z).unwrap();
            let back = exp_map(&x, &y).unwrap();
            let err = (back.as_mat() - z.as_mat()).max_abs() / z.as_mat().max_abs();
            assert!(err < 1e-8, "{err:e}");
        }
    }

    #[test]
    fn log_map_norm_at_identity_is_twice_distance() {
        let mut r = rng(8);
        let z = random_spd(&mut r, 4, 20.0);
        let i = SpdMatrix::identity(4);
        let y = log_map(&i, &z).unwrap();
        let d = spd_distance(&i, &z).unwrap();
        assert!((y.as_mat().frobenius_norm() - 2.0 * d).abs() < 1e-10);
    }

    #[test]
    fn transport_pairs() {
        let mut r = rng(9);
        let x = random_spd(&mut r, 4, 10.0);
        let to = congruence_transport(&x, &x, TransportDirection::TowardIdentity).unwrap();
        assert!((&to - &Mat::identity(4)).max_abs() < 1e-10);
        let i = SpdMatrix::identity(4);
        let same = congruence_transport(&x, &i, TransportDirection::FromIdentity).unwrap();
        assert!((&same - x.as_mat()).max_abs() < 1e-14);
        let a = random_spd(&mut r, 4, 10.0);
        let c = congruence_transport(&x, &a, TransportDirection::TowardIdentity).unwrap();
        let back =
            congruence_transport(&SymMatrix::from_symmetrized(&c), &a, TransportDirection::FromIdentity)
                .unwrap();
        assert!((&back - x.as_mat()).max_abs() < 1e-10 * x.as_mat().max_abs().max(1.0));
    }

    #[test]
    fn geodesic_endpoints() {
        let mut r = rng(10);
        let x = random_spd(&mut r, 3, 10.0);
        let z = random_spd(&mut r, 3, 10.0);
        let g0 = geodesic(&x, &z, 0.0).unwrap();
        let g1 = geodesic(&x, &z, 1.0).unwrap();
        assert!((g0.as_mat() - x.as_mat()).max_abs() < 1e-10);
        assert!((g1.as_mat() - z.as_mat()).max_abs() < 1e-9);
    }
}
