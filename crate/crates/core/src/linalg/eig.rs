//! Symmetric eigensolver: Householder reduction to tridiagonal form followed
//! by the implicit QL algorithm, with a fixed ordering and sign convention.

use std::cmp::Ordering;

use super::Mat;
use crate::scalar::Real;

/// QL iterations allowed per eigenvalue before giving up (only reachable
/// with non-finite input).
const MAX_QL_ITERS: usize = 60;

/// `X = U diag(λ) Uᵀ` with `λ` sorted descending.
#[derive(Clone, Debug, PartialEq)]
pub struct EigDecomp<T> {
    pub vectors: Mat<T>,
    pub values: Vec<T>,
}

impl<T: Real> EigDecomp<T> {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `U diag(f(λ)) Uᵀ`
    pub fn reconstruct_with(&self, f: impl Fn(T) -> T) -> Mat<T> {
        let fl: Vec<T> = self.values.iter().map(|&l| f(l)).collect();
        self.reconstruct_values(&fl)
    }

    /// `U diag(d) Uᵀ` for caller-supplied diagonal entries.
    pub fn reconstruct_values(&self, d: &[T]) -> Mat<T> {
        let n = self.dim();
        let u = &self.vectors;
        let mut out = Mat::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut acc = T::zero();
                for k in 0..n {
                    acc += u[(i, k)] * d[k] * u[(j, k)];
                }
                out[(i, j)] = acc;
                out[(j, i)] = acc;
            }
        }
        out
    }

    pub fn reconstruct(&self) -> Mat<T> {
        self.reconstruct_values(&self.values)
    }

    pub fn min_value(&self) -> T {
        self.values.last().copied().unwrap_or_else(T::nan)
    }

    pub fn max_value(&self) -> T {
        self.values.first().copied().unwrap_or_else(T::nan)
    }
}

/// Eigendecomposition of the symmetric part of `a`. The strict lower triangle
/// is ignored; callers validate symmetry beforehand.
///
/// Eigenvalues are sorted descending (ties keep the solver's index order) and
/// each eigenvector is sign-normalized so its largest-magnitude entry (first
/// one on ties) is positive.
pub fn sym_eig_unchecked<T: Real>(a: &Mat<T>) -> EigDecomp<T> {
    assert!(a.is_square(), "eigendecomposition needs a square matrix");
    let n = a.rows();
    if n == 0 {
        return EigDecomp {
            vectors: Mat::zeros(0, 0),
            values: Vec::new(),
        };
    }
    let mut v: Vec<T> = (0..n * n)
        .map(|k| {
            let (i, j) = (k / n, k % n);
            if i <= j {
                a[(i, j)]
            } else {
                a[(j, i)]
            }
        })
        .collect();
    let mut d = vec![T::zero(); n];
    let mut e = vec![T::zero(); n];
    tridiagonalize(n, &mut v, &mut d, &mut e);
    tridiagonal_ql(n, &mut v, &mut d, &mut e);
    let v = Mat::from_vec(n, n, v);
    let w: Vec<T> = d;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        w[j]
            .partial_cmp(&w[i])
            .unwrap_or(Ordering::Equal)
            .then(i.cmp(&j))
    });
    let values: Vec<T> = order.iter().map(|&k| w[k]).collect();
    let mut vectors = Mat::zeros(n, n);
    for (col, &k) in order.iter().enumerate() {
        let mut best = 0;
        let mut best_abs = T::zero();
        for r in 0..n {
            let x = v[(r, k)].abs();
            if x > best_abs {
                best_abs = x;
                best = r;
            }
        }
        let flip = v[(best, k)] < T::zero();
        for r in 0..n {
            let x = v[(r, k)];
            vectors[(r, col)] = if flip { -x } else { x };
        }
    }
    EigDecomp { vectors, values }
}

/// Householder reduction of the symmetric matrix in `v` (row-major) to
/// tridiagonal form. On return `v` holds the accumulated orthogonal
/// transform, `d` the diagonal and `e[1..]` the subdiagonal.
fn tridiagonalize<T: Real>(n: usize, v: &mut [T], d: &mut [T], e: &mut [T]) {
    let at = |i: usize, j: usize| i * n + j;
    for j in 0..n {
        d[j] = v[at(n - 1, j)];
    }
    for i in (1..n).rev() {
        let mut scale = T::zero();
        let mut h = T::zero();
        for &dk in &d[..i] {
            scale += dk.abs();
        }
        if scale == T::zero() {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[at(i - 1, j)];
                v[at(i, j)] = T::zero();
                v[at(j, i)] = T::zero();
            }
        } else {
            for dk in &mut d[..i] {
                *dk /= scale;
                h += *dk * *dk;
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > T::zero() {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in &mut e[..i] {
                *ej = T::zero();
            }
            for j in 0..i {
                f = d[j];
                v[at(j, i)] = f;
                g = e[j] + v[at(j, j)] * f;
                for k in (j + 1)..i {
                    g += v[at(k, j)] * d[k];
                    e[k] += v[at(k, j)] * f;
                }
                e[j] = g;
            }
            f = T::zero();
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    v[at(k, j)] -= f * e[k] + g * d[k];
                }
                d[j] = v[at(i - 1, j)];
                v[at(i, j)] = T::zero();
            }
        }
        d[i] = h;
    }
    for i in 0..n - 1 {
        v[at(n - 1, i)] = v[at(i, i)];
        v[at(i, i)] = T::one();
        let h = d[i + 1];
        if h != T::zero() {
            for k in 0..=i {
                d[k] = v[at(k, i + 1)] / h;
            }
            for j in 0..=i {
                let mut g = T::zero();
                for k in 0..=i {
                    g += v[at(k, i + 1)] * v[at(k, j)];
                }
                for k in 0..=i {
                    v[at(k, j)] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[at(k, i + 1)] = T::zero();
        }
    }
    for j in 0..n {
        d[j] = v[at(n - 1, j)];
        v[at(n - 1, j)] = T::zero();
    }
    v[at(n - 1, n - 1)] = T::one();
    e[0] = T::zero();
}

/// Implicit QL iteration on the tridiagonal matrix `(d, e)`, rotating the
/// columns of `v` along. On return `d` holds the (unsorted) eigenvalues.
fn tridiagonal_ql<T: Real>(n: usize, v: &mut [T], d: &mut [T], e: &mut [T]) {
    let at = |i: usize, j: usize| i * n + j;
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = T::zero();
    let eps = T::epsilon();
    let mut f = T::zero();
    let mut tst1 = T::zero();
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n - 1 && e[m].abs() > eps * tst1 {
            m += 1;
        }
        if m > l {
            for _ in 0..MAX_QL_ITERS {
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (T::two() * e[l]);
                let mut r = p.hypot(T::one());
                if p < T::zero() {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in &mut d[(l + 2)..n] {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = T::one();
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = T::zero();
                let mut s2 = T::zero();
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for k in 0..n {
                        h = v[at(k, i + 1)];
                        v[at(k, i + 1)] = s * v[at(k, i)] + c * h;
                        v[at(k, i)] = c * v[at(k, i)] - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if !(e[l].abs() > eps * tst1) {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = T::zero();
    }
}
