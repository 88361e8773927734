use rayon::prelude::*;
use serde::Serialize;

use super::{NodeId, Tape};
use crate::error::Result;
use crate::linalg::Mat;
use crate::scalar::Real;

/// Comparison for one leaf.
#[derive(Clone, Debug, Serialize)]
pub struct LeafReport {
    pub leaf: usize,
    pub rel_error: f64,
    /// Entry with the largest absolute discrepancy.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub leaves: Vec<LeafReport>,
    pub max_rel_error: f64,
    /// Set when the function itself failed; no comparison was made.
    pub failure: Option<String>,
}

impl GradcheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.failure.is_none() && self.max_rel_error.is_finite() && self.max_rel_error <= tol
    }

    pub fn worst_leaf(&self) -> Option<&LeafReport> {
        self.leaves
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    fn failed(msg: String) -> Self {
        Self {
            leaves: Vec::new(),
            max_rel_error: f64::INFINITY,
            failure: Some(msg),
        }
    }
}

/// Ratio below which a leaf's gradient scale is lifted toward the largest
/// gradient scale in the check, so leaves whose true gradient is (near) zero
/// are judged against the rounding noise of the whole function.
const SCALE_FLOOR: f64 = 1e-3;

fn eval<T, F>(f: &F, leaves: &[Mat<T>]) -> Result<(Tape<T>, Vec<NodeId>, NodeId)>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = leaves.iter().map(|l| tape.leaf(l.clone())).collect();
    let out = f(&mut tape, &ids)?;
    Ok((tape, ids, out))
}

/// Compares reverse-mode adjoints with central differences of step `step`
/// on every entry of every leaf.
///
/// A leaf's error is `max|a − n| / max(|a|∞, |n|∞, 1e-3·s, 1e-12)` where `s`
/// is the largest gradient entry over all leaves.
pub fn gradcheck<T, F>(f: F, leaves: &[Mat<T>], step: T) -> GradcheckReport
where
    T: Real,
    F: Fn(&mut Tape<T>, &[NodeId]) -> Result<NodeId> + Sync,
{
    if !(step > T::zero()) {
        return GradcheckReport::failed(format!("step must be positive, got {step}"));
    }
    let (tape, ids, out) = match eval(&f, leaves) {
        Ok(v) => v,
        Err(e) => return GradcheckReport::failed(format!("forward failed: {e}")),
    };
    let grads = match tape.backward(out) {
        Ok(g) => g,
        Err(e) => return GradcheckReport::failed(format!("backward failed: {e}")),
    };
    let analytic: Vec<Mat<T>> = ids.iter().map(|&id| grads.wrt(&tape, id)).collect();

    let coords: Vec<(usize, usize)> = leaves
        .iter()
        .enumerate()
        .flat_map(|(li, l)| (0..l.as_slice().len()).map(move |k| (li, k)))
        .collect();
    let numeric: Result<Vec<T>> = coords
        .par_iter()
        .map(|&(li, k)| {
            let mut ls = leaves.to_vec();
            let x0 = ls[li].as_slice()[k];
            ls[li].as_mut_slice()[k] = x0 + step;
            let (tp, _, o) = eval(&f, &ls)?;
            let fp = tp.scalar(o);
            ls[li].as_mut_slice()[k] = x0 - step;
            let (tm, _, o) = eval(&f, &ls)?;
            let fm = tm.scalar(o);
            Ok((fp - fm) / (step + step))
        })
        .collect();
    let numeric = match numeric {
        Ok(v) => v,
        Err(e) => return GradcheckReport::failed(format!("perturbed forward failed: {e}")),
    };

    let mut offset = 0;
    let mut raw = Vec::with_capacity(leaves.len());
    for (li, l) in leaves.iter().enumerate() {
        let len = l.as_slice().len();
        let num = &numeric[offset..offset + len];
        offset += len;
        let ana = analytic[li].as_slice();
        let mut scale = 0.0f64;
        let mut worst = (0usize, 0.0f64);
        for k in 0..len {
            let a = ana[k].to_f64_lossy();
            let n = num[k].to_f64_lossy();
            scale = scale.max(a.abs()).max(n.abs());
            let d = (a - n).abs();
            if d > worst.1 || d.is_nan() {
                worst = (k, d);
            }
        }
        raw.push((li, scale, worst, ana[worst.0].to_f64_lossy(), num[worst.0].to_f64_lossy(), l.cols()));
    }
    let global = raw.iter().map(|r| r.1).fold(0.0, f64::max);
    let mut reports = Vec::with_capacity(raw.len());
    let mut max_rel = 0.0f64;
    for (li, scale, (k, d), a, n, cols) in raw {
        let denom = scale.max(SCALE_FLOOR * global).max(1e-12);
        let rel = if d.is_nan() { f64::INFINITY } else { d / denom };
        max_rel = max_rel.max(rel);
        reports.push(LeafReport {
            leaf: li,
            rel_error: rel,
            worst: (k / cols.max(1), k % cols.max(1)),
            analytic: a,
            numeric: n,
        });
    }
    GradcheckReport {
        leaves: reports,
        max_rel_error: max_rel,
        failure: None,
    }
}
