//! Tape builders for the layers. Each builder records exactly the
//! computation of its direct counterpart in the parent module.

use crate::error::{Error, Result};
use crate::frechet::WfmConfig;
use crate::linalg::Mat;
use crate::manifold::{MatFn, SpdMatrix};
use crate::scalar::Real;
use crate::simplex::Activation;
use crate::tape::{NodeId, PoolKind, Tape};

use super::BnMode;

/// Karcher flow recorded on the tape, unrolled over the iterations the
/// forward pass actually executes. Points with zero weight are left out.
/// `weights` is a column vector with one entry per point.
pub fn wfm<T: Real>(t: &mut Tape<T>, points: &[NodeId], weights: NodeId, cfg: &WfmConfig) -> Result<NodeId> {
    cfg.validate()?;
    let w = t.value(weights);
    if w.cols() != 1 || w.rows() != points.len() {
        return Err(Error::shape(format!(
            "{} points but a {}x{} weight node",
            points.len(),
            w.rows(),
            w.cols()
        )));
    }
    if let Some(i) = w.as_slice().iter().position(|x| !(*x >= T::zero())) {
        return Err(Error::contract(format!("weight #{i} is negative or NaN")));
    }
    let picks: Vec<usize> = (0..points.len()).filter(|&i| w.as_slice()[i] > T::zero()).collect();
    match picks.as_slice() {
        [] => return Err(Error::contract("all weights are zero")),
        [only] if w.as_slice()[*only] == T::one() => return Ok(points[*only]),
        _ => {}
    }
    let terms: Vec<NodeId> = picks.iter().map(|&i| points[i]).collect();
    let tol = T::lit(cfg.tol);
    let mut mean = t.weighted_sum(weights, picks.clone(), terms.clone())?;
    let mut iterations = 0;
    loop {
        let roots = t.eig_fns(mean, &[MatFn::Sqrt, MatFn::InvSqrt])?;
        let (sq, isq) = (roots[0], roots[1]);
        let mut logs = Vec::with_capacity(terms.len());
        for &x in &terms {
            let c = t.congruence(x, isq)?;
            logs.push(t.eig_fn(c, MatFn::Log)?);
        }
        let tangent = t.weighted_sum(weights, picks.clone(), logs)?;
        let residual = t.value(tangent).congruence(t.value(sq)).frobenius_norm();
        if residual < tol || iterations == cfg.max_iters {
            return Ok(mean);
        }
        let step = t.eig_fn(tangent, MatFn::Exp)?;
        mean = t.congruence(step, sq)?;
        iterations += 1;
    }
}

/// Unweighted Fréchet mean.
pub fn barycenter<T: Real>(t: &mut Tape<T>, points: &[NodeId], cfg: &WfmConfig) -> Result<NodeId> {
    if points.is_empty() {
        return Err(Error::contract("barycenter of no points"));
    }
    if points.len() == 1 {
        return Ok(points[0]);
    }
    let n = T::from_usize(points.len()).expect("usize to float");
    let w = t.constant(Mat::column_vector(vec![T::one() / n; points.len()]));
    wfm(t, points, w, cfg)
}

/// `Wᵀ X W`
pub fn bimap<T: Real>(t: &mut Tape<T>, x: NodeId, w: NodeId) -> Result<NodeId> {
    t.congruence(x, w)
}

pub fn reeig<T: Real>(t: &mut Tape<T>, x: NodeId, eps: T) -> Result<NodeId> {
    t.eig_fn(x, MatFn::Rectify(eps))
}

pub fn logeig<T: Real>(t: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
    t.eig_fn(x, MatFn::Log)
}

pub fn expeig<T: Real>(t: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
    t.eig_fn(x, MatFn::Exp)
}

/// Batch normalization with bias `G = exp(S)`, `S` given by `bias_log`.
///
/// Train mode centres at the batch barycenter (differentiated) and also
/// returns that barycenter's value so the caller can advance its running
/// mean; eval mode centres at `running_mean`, which stays off the gradient
/// path.
pub fn batchnorm<T: Real>(
    t: &mut Tape<T>,
    batch: &[NodeId],
    bias_log: NodeId,
    running_mean: &SpdMatrix<T>,
    mode: BnMode,
    cfg: &WfmConfig,
) -> Result<(Vec<NodeId>, Option<SpdMatrix<T>>)> {
    if batch.is_empty() {
        if mode == BnMode::Train {
            return Err(Error::contract("batch normalization of an empty batch"));
        }
        return Ok((Vec::new(), None));
    }
    let (center, mean) = match mode {
        BnMode::Train => {
            let b = barycenter(t, batch, cfg)?;
            (b, Some(SpdMatrix::from_mat_unchecked(t.value(b))))
        }
        BnMode::Eval => (t.constant(running_mean.as_mat().clone()), None),
    };
    let isq = t.eig_fn(center, MatFn::InvSqrt)?;
    let half = t.scale(bias_log, T::half())?;
    let gh = t.eig_fn(half, MatFn::Exp)?;
    let a = t.matmul(isq, gh)?;
    let out = batch
        .iter()
        .map(|&x| t.congruence(x, a))
        .collect::<Result<Vec<_>>>()?;
    Ok((out, mean))
}

/// One weighted Fréchet mean of `channels` per row of `logits`
/// (`out × in`), each row passed through `activation`.
pub fn weighted_pool<T: Real>(
    t: &mut Tape<T>,
    channels: &[NodeId],
    logits: NodeId,
    activation: Activation,
    cfg: &WfmConfig,
) -> Result<Vec<NodeId>> {
    let (rows, cols) = t.value(logits).shape();
    if cols != channels.len() {
        return Err(Error::shape(format!(
            "pooling weights expect {cols} channels, got {}",
            channels.len()
        )));
    }
    (0..rows)
        .map(|j| {
            let z = t.row(logits, j)?;
            let w = t.activation(z, activation)?;
            wfm(t, channels, w, cfg)
        })
        .collect()
}

/// LogEig → pooling with kernel and stride `k` → ExpEig.
pub fn pool_reduced<T: Real>(t: &mut Tape<T>, x: NodeId, k: usize, kind: PoolKind) -> Result<NodeId> {
    super::check_kernel(k)?;
    let lg = logeig(t, x)?;
    let p = t.pool(lg, k, kind)?;
    expeig(t, p)
}

/// `diag(W₁ᵀXW₁, W₂ᵀXW₂)`
pub fn skip_reduced<T: Real>(t: &mut Tape<T>, x: NodeId, w1: NodeId, w2: NodeId) -> Result<NodeId> {
    let c1 = t.congruence(x, w1)?;
    let c2 = t.congruence(x, w2)?;
    t.block_diag(c1, c2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frechet::{karcher_wfm, WeightVector};
    use crate::layers::{self, BatchNormState, StiefelParam};
    use crate::tape::gradcheck;
    use crate::testing::{random_simplex, random_spd, random_stiefel, rng};

    #[test]
    fn wfm_matches_direct_karcher() {
        let mut r = rng(11);
        let pts: Vec<_> = (0..4).map(|_| random_spd(&mut r, 5, 50.0)).collect();
        let w = random_simplex(&mut r, 4);
        let cfg = WfmConfig::default();
        let direct = karcher_wfm(&pts, &WeightVector::new(w.clone()).unwrap(), &cfg).unwrap();
        let mut t = Tape::new();
        let ids: Vec<_> = pts.iter().map(|p| t.leaf(p.as_mat().clone())).collect();
        let wn = t.leaf(Mat::column_vector(w));
        let m = wfm(&mut t, &ids, wn, &cfg).unwrap();
        assert!((t.value(m) - direct.mean.as_mat()).max_abs() < 1e-12);
    }

    #[test]
    fn wfm_gradient_wrt_weights_and_points() {
        let mut r = rng(12);
        let pts: Vec<Mat<f64>> = (0..3).map(|_| random_spd(&mut r, 4, 10.0).into_mat()).collect();
        let w = Mat::column_vector(random_simplex(&mut r, 3));
        let cfg = WfmConfig::fixed(5);
        let mut leaves = pts.clone();
        leaves.push(w);
        let rep = gradcheck(
            |t, l| {
                let m = wfm(t, &l[..3], l[3], &cfg)?;
                let lg = logeig(t, m)?;
                t.frob_sq(lg)
            },
            &leaves,
            1e-6,
        );
        assert!(rep.passed(1e-4), "{rep:?}");
    }

    #[test]
    fn batchnorm_matches_direct_and_gradchecks() {
        let mut r = rng(13);
        let batch: Vec<_> = (0..3).map(|_| random_spd(&mut r, 4, 10.0)).collect();
        let s = crate::testing::random_sym(&mut r, 4, 0.3);
        let cfg = WfmConfig::fixed(4);
        let mut st = BatchNormState::new(4);
        st.bias = crate::manifold::expm(&s);
        let direct = layers::batchnorm_forward(&batch, &mut st, BnMode::Train, &cfg).unwrap();

        let mut t = Tape::new();
        let ids: Vec<_> = batch.iter().map(|p| t.leaf(p.as_mat().clone())).collect();
        let sn = t.leaf(s.as_mat().clone());
        let (out, mean) = batchnorm(&mut t, &ids, sn, &SpdMatrix::identity(4), BnMode::Train, &cfg).unwrap();
        for (o, d) in out.iter().zip(&direct) {
            assert!((t.value(*o) - d.as_mat()).max_abs() < 1e-10);
        }
        let expect = layers::update_running_mean(&SpdMatrix::identity(4), &mean.unwrap(), 0.9, &cfg).unwrap();
        assert!((expect.as_mat() - st.running_mean.as_mat()).max_abs() < 1e-12);

        let mut leaves: Vec<Mat<f64>> = batch.iter().map(|b| b.as_mat().clone()).collect();
        leaves.push(s.into_mat());
        let rep = gradcheck(
            |t, l| {
                let (out, _) = batchnorm(t, &l[..3], l[3], &SpdMatrix::identity(4), BnMode::Train, &cfg)?;
                let lgs = out
                    .iter()
                    .map(|&o| logeig(t, o).and_then(|g| t.frob_sq(g)))
                    .collect::<Result<Vec<_>>>()?;
                t.sum(lgs)
            },
            &leaves,
            1e-6,
        );
        assert!(rep.passed(1e-4), "{rep:?}");
    }

    #[test]
    fn pooling_and_skip_reduced_gradcheck() {
        let mut r = rng(14);
        let x = random_spd(&mut r, 7, 20.0).into_mat();
        for kind in [PoolKind::Avg, PoolKind::Max] {
            for k in [2, 4] {
                let rep = gradcheck(
                    |t, l| {
                        let p = pool_reduced(t, l[0], k, kind)?;
                        let lg = logeig(t, p)?;
                        t.frob_sq(lg)
                    },
                    std::slice::from_ref(&x),
                    1e-6,
                );
                assert!(rep.passed(1e-4), "{kind:?} {k}: {rep:?}");
            }
        }
        let w1 = random_stiefel(&mut r, 7, 3);
        let w2 = random_stiefel(&mut r, 7, 3);
        let rep = gradcheck(
            |t, l| {
                let y = skip_reduced(t, l[0], l[1], l[2])?;
                let lg = logeig(t, y)?;
                t.frob_sq(lg)
            },
            &[x, w1, w2],
            1e-6,
        );
        assert!(rep.passed(1e-4), "{rep:?}");
    }

    #[test]
    fn pooling_graph_matches_direct() {
        let mut r = rng(15);
        let x = random_spd(&mut r, 6, 20.0);
        let mut t = Tape::new();
        let xn = t.leaf(x.as_mat().clone());
        let p = pool_reduced(&mut t, xn, 4, PoolKind::Max).unwrap();
        let d = layers::max_pool_reduced(&x, 4).unwrap();
        assert!((t.value(p) - d.as_mat()).max_abs() < 1e-12);
        let w1 = StiefelParam::random(&mut r, 6, 2).unwrap();
        let w2 = StiefelParam::random(&mut r, 6, 2).unwrap();
        let a = t.leaf(w1.as_mat().clone());
        let b = t.leaf(w2.as_mat().clone());
        let y = skip_reduced(&mut t, xn, a, b).unwrap();
        assert!((t.value(y) - layers::skip_reduced(&x, &w1, &w2).unwrap().as_mat()).max_abs() < 1e-14);
    }

    #[test]
    fn weighted_pool_gradcheck() {
        let mut r = rng(16);
        let chans: Vec<Mat<f64>> = (0..3).map(|_| random_spd(&mut r, 4, 10.0).into_mat()).collect();
        let logits = crate::testing::gaussian(&mut r, 2, 3).scale(0.1);
        let cfg = WfmConfig::fixed(4);
        for act in [Activation::Sparsemax, Activation::Softmax, Activation::Sigmoid] {
            let mut leaves = chans.clone();
            leaves.push(logits.clone());
            let rep = gradcheck(
                |t, l| {
                    let outs = weighted_pool(t, &l[..3], l[3], act, &cfg)?;
                    let parts = outs
                        .iter()
                        .map(|&o| logeig(t, o).and_then(|g| t.frob_sq(g)))
                        .collect::<Result<Vec<_>>>()?;
                    t.sum(parts)
                },
                &leaves,
                1e-6,
            );
            assert!(rep.passed(1e-4), "{act:?}: {rep:?}");
        }
    }
}
