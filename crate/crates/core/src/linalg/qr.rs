use super::Mat;
use crate::scalar::Real;

/// Thin Householder QR of an `n×m` matrix (`n ≥ m`), returning `(Q, R)` with
/// `Q` column-orthonormal `n×m` and `R` upper-triangular `m×m` whose diagonal
/// is nonnegative.
pub fn thin_qr<T: Real>(a: &Mat<T>) -> (Mat<T>, Mat<T>) {
    let (n, m) = a.shape();
    assert!(n >= m, "thin QR needs rows >= cols");
    let mut r = a.clone();
    let mut reflectors: Vec<Vec<T>> = Vec::with_capacity(m);
    for k in 0..m {
        let norm = (k..n).map(|i| r[(i, k)] * r[(i, k)]).sum::<T>().sqrt();
        let mut v: Vec<T> = (k..n).map(|i| r[(i, k)]).collect();
        if norm == T::zero() {
            reflectors.push(vec![T::zero(); n - k]);
            continue;
        }
        let alpha = if v[0] >= T::zero() { -norm } else { norm };
        v[0] -= alpha;
        let vnorm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
        if vnorm == T::zero() {
            reflectors.push(vec![T::zero(); n - k]);
            continue;
        }
        for x in v.iter_mut() {
            *x /= vnorm;
        }
        for j in k..m {
            let d: T = (k..n).map(|i| v[i - k] * r[(i, j)]).sum();
            for i in k..n {
                r[(i, j)] -= T::two() * v[i - k] * d;
            }
        }
        reflectors.push(v);
    }
    let mut q = Mat::from_fn(n, m, |i, j| if i == j { T::one() } else { T::zero() });
    for k in (0..m).rev() {
        let v = &reflectors[k];
        for j in 0..m {
            let d: T = (k..n).map(|i| v[i - k] * q[(i, j)]).sum();
            if d == T::zero() {
                continue;
            }
            for i in k..n {
                q[(i, j)] -= T::two() * v[i - k] * d;
            }
        }
    }
    let mut rr = Mat::from_fn(m, m, |i, j| if j >= i { r[(i, j)] } else { T::zero() });
    for k in 0..m {
        if rr[(k, k)] < T::zero() {
            for j in k..m {
                rr[(k, j)] = -rr[(k, j)];
            }
            for i in 0..n {
                q[(i, k)] = -q[(i, k)];
            }
        }
    }
    (q, rr)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reconstructs_and_is_orthonormal() {
        let a = Mat::from_fn(5, 3, |i, j| ((i * 3 + j * 7) % 11) as f64 - 4.0 + if i == j { 3.0 } else { 0.0 });
        let (q, r) = thin_qr(&a);
        assert!((&q.matmul(&r) - &a).max_abs() < 1e-12);
        let qtq = q.t_matmul(&q);
        assert!((&qtq - &Mat::identity(3)).frobenius_norm() < 1e-14);
        for k in 0..3 {
            assert!(r[(k, k)] >= 0.0);
        }
    }
}
