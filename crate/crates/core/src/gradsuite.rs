//! Finite-difference gradient checks across the op catalogue, the mixed
//! edge, node aggregation and a small supernet.

use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::frechet::WfmConfig;
use crate::layers::graph;
use crate::layers::BnMode;
use crate::linalg::Mat;
use crate::manifold::SpdMatrix;
use crate::search_space::{mixed_edge_forward, node_aggregate, CellConfig, CellKind, Network, NetworkConfig};
use crate::simplex::Activation;
use crate::tape::{gradcheck, GradcheckReport, NodeId, PoolKind, Tape};
use crate::testing::{gaussian, random_spd, random_stiefel, random_sym, rng};

pub const GRADCHECK_STEP: f64 = 1e-6;
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub report: GradcheckReport,
    pub seconds: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.report.passed(GRADCHECK_TOL)
    }
}

#[derive(Clone, Debug, Default)]
pub struct SuiteOptions {
    /// Skip the supernet case.
    pub quick: bool,
    /// Detach the first leaf of the named case so its backward is wrong.
    pub fault: Option<String>,
}

type CaseFn = Box<dyn Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId> + Sync>;

struct Case {
    name: String,
    leaves: Vec<Mat<f64>>,
    f: CaseFn,
}

/// `⟨C, log Y⟩ + ½‖log Y‖²` for a fixed symmetric `C`.
fn spd_loss(t: &mut Tape<f64>, y: NodeId, c: &Mat<f64>) -> Result<NodeId> {
    let lg = graph::logeig(t, y)?;
    let cn = t.constant(c.clone());
    let a = t.dot(lg, cn)?;
    let b = t.frob_sq(lg)?;
    let b = t.scale(b, 0.5)?;
    t.add(a, b)
}

fn sum_loss(t: &mut Tape<f64>, ys: &[NodeId], c: &Mat<f64>) -> Result<NodeId> {
    let parts = ys.iter().map(|&y| spd_loss(t, y, c)).collect::<Result<Vec<_>>>()?;
    t.sum(parts)
}

fn case(name: &str, leaves: Vec<Mat<f64>>, f: impl Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId> + Sync + 'static) -> Case {
    Case {
        name: name.into(),
        leaves,
        f: Box::new(f),
    }
}

/// Configuration of the supernet case: input 8, one reduction cell to 4
/// then a normal cell, 5 nodes, a fixed number of Karcher steps.
pub fn supernet_case_config() -> NetworkConfig {
    NetworkConfig {
        input_dim: 8,
        classes: 3,
        cells: vec![
            CellConfig {
                kind: CellKind::Reduction,
                dim: Some(4),
            },
            CellConfig {
                kind: CellKind::Normal,
                dim: None,
            },
        ],
        wfm: WfmConfig::fixed(3),
        ..NetworkConfig::default()
    }
}

fn cases(opts: &SuiteOptions) -> Result<Vec<Case>> {
    let mut r = rng(2024);
    let n = 8;
    let wfm = WfmConfig::fixed(4);
    let mut out = Vec::new();

    let c8 = random_sym(&mut r, 5, 1.0).into_mat();
    let x = random_spd(&mut r, n, 100.0).into_mat();
    let w = random_stiefel(&mut r, n, 5);
    let c = c8.clone();
    out.push(case("BiMap", vec![x.clone(), w], move |t, l| {
        let y = graph::bimap(t, l[0], l[1])?;
        spd_loss(t, y, &c)
    }));

    let c6 = random_sym(&mut r, 6, 1.0).into_mat();
    let q = random_stiefel(&mut r, 6, 6);
    let x = Mat::from_diag(&[0.1, 0.3, 0.6, 1.2, 2.0, 3.5]).congruence(&q);
    let c = c6.clone();
    out.push(case("ReEig", vec![x], move |t, l| {
        let y = graph::reeig(t, l[0], 0.5)?;
        spd_loss(t, y, &c)
    }));

    // two eigenvalues below ε stay clamped under the finite-difference step
    let x = Mat::from_diag(&[2e-5, 5e-5, 0.3, 1.0, 2.5, 4.0]).congruence(&q);
    let c = c6.clone();
    out.push(case("ReEig (clamped spectrum)", vec![x], move |t, l| {
        let y = graph::reeig(t, l[0], 1e-4)?;
        spd_loss(t, y, &c)
    }));

    let x = random_spd(&mut r, n, 1e3).into_mat();
    let c = random_sym(&mut r, n, 1.0).into_mat();
    out.push(case("LogEig", vec![x], move |t, l| {
        let lg = graph::logeig(t, l[0])?;
        let cn = t.constant(c.clone());
        t.dot(lg, cn)
    }));

    let s = random_sym(&mut r, n, 0.5).into_mat();
    let c = random_sym(&mut r, n, 1.0).into_mat();
    out.push(case("ExpEig", vec![s], move |t, l| {
        let e = graph::expeig(t, l[0])?;
        let cn = t.constant(c.clone());
        t.dot(e, cn)
    }));

    let c = random_sym(&mut r, 6, 1.0).into_mat();
    let mut leaves: Vec<Mat<f64>> = (0..3).map(|_| random_spd(&mut r, 6, 50.0).into_mat()).collect();
    leaves.push(random_sym(&mut r, 6, 0.3).into_mat());
    out.push(case("BatchNorm (train)", leaves, move |t, l| {
        let (ys, _) = graph::batchnorm(t, &l[..3], l[3], &SpdMatrix::identity(6), BnMode::Train, &wfm)?;
        sum_loss(t, &ys, &c)
    }));

    for act in [Activation::Sparsemax, Activation::Softmax, Activation::Sigmoid] {
        let c = random_sym(&mut r, 5, 1.0).into_mat();
        let mut leaves: Vec<Mat<f64>> = (0..3).map(|_| random_spd(&mut r, 5, 20.0).into_mat()).collect();
        leaves.push(gaussian(&mut r, 2, 3).scale(0.1));
        out.push(case(&format!("WeightedRiemannPooling ({})", act.name()), leaves, move |t, l| {
            let ys = graph::weighted_pool(t, &l[..3], l[3], act, &wfm)?;
            sum_loss(t, &ys, &c)
        }));
    }

    for (kind, tag) in [(PoolKind::Avg, "AveragePooling_reduced"), (PoolKind::Max, "MaxPooling_reduced")] {
        for k in [2, 4] {
            let x = random_spd(&mut r, 7, 50.0).into_mat();
            let c = random_sym(&mut r, 7usize.div_ceil(k), 1.0).into_mat();
            out.push(case(&format!("{tag} (kernel {k})"), vec![x], move |t, l| {
                let y = graph::pool_reduced(t, l[0], k, kind)?;
                spd_loss(t, y, &c)
            }));
        }
    }

    let x = random_spd(&mut r, n, 100.0).into_mat();
    let w1 = random_stiefel(&mut r, n, 2);
    let w2 = random_stiefel(&mut r, n, 2);
    let c = random_sym(&mut r, 4, 1.0).into_mat();
    out.push(case("Skip_reduced", vec![x, w1, w2], move |t, l| {
        let y = graph::skip_reduced(t, l[0], l[1], l[2])?;
        spd_loss(t, y, &c)
    }));

    let c = random_sym(&mut r, 5, 1.0).into_mat();
    let mut leaves: Vec<Mat<f64>> = (0..4).map(|_| random_spd(&mut r, 5, 50.0).into_mat()).collect();
    leaves.push(Mat::column_vector(crate::testing::random_simplex(&mut r, 4)));
    out.push(case("weighted Fréchet mean", leaves, move |t, l| {
        let m = graph::wfm(t, &l[..4], l[4], &wfm)?;
        spd_loss(t, m, &c)
    }));

    // three BiMaps and a skip on the same input, mixed by sparsemax logits
    let x = random_spd(&mut r, 5, 50.0).into_mat();
    let ws: Vec<Mat<f64>> = (0..3).map(|_| random_stiefel(&mut r, 5, 5)).collect();
    let logits = gaussian(&mut r, 4, 1).scale(0.05);
    let c = random_sym(&mut r, 5, 1.0).into_mat();
    let mut leaves = vec![x];
    leaves.extend(ws);
    leaves.push(logits);
    out.push(case("mixed edge", leaves, move |t, l| {
        let mut cands = Vec::new();
        for &w in &l[1..4] {
            cands.push(Some(vec![graph::bimap(t, l[0], w)?]));
        }
        cands.push(Some(vec![l[0]]));
        let weights = t.activation(l[4], Activation::Sparsemax)?;
        let y = mixed_edge_forward(t, &cands, weights, &wfm)?;
        spd_loss(t, y[0], &c)
    }));

    let c = random_sym(&mut r, 5, 1.0).into_mat();
    let leaves: Vec<Mat<f64>> = (0..3).map(|_| random_spd(&mut r, 5, 50.0).into_mat()).collect();
    out.push(case("node aggregation", leaves, move |t, l| {
        let edges: Vec<Vec<NodeId>> = l.iter().map(|&e| vec![e]).collect();
        let y = node_aggregate(t, &edges, &wfm)?;
        spd_loss(t, y[0], &c)
    }));

    let x = random_spd(&mut r, 4, 20.0).into_mat();
    let hw = gaussian(&mut r, 3, 10).scale(0.3);
    let hb = gaussian(&mut r, 3, 1).scale(0.1);
    out.push(case("LogEig head + cross-entropy", vec![x, hw, hb], move |t, l| {
        let lg = graph::logeig(t, l[0])?;
        let v = t.triu_flatten(lg)?;
        let z = t.matvec(l[1], v)?;
        let z = t.add(z, l[2])?;
        t.softmax_xent(z, 1)
    }));

    if !opts.quick {
        let cfg = supernet_case_config();
        let mut net = Network::supernet(&cfg, Activation::Sparsemax, 7)?;
        let mut alphas = net.alphas();
        for a in &mut alphas {
            for e in &mut a.edges {
                for z in e.iter_mut() {
                    *z = 0.05 * gaussian(&mut r, 1, 1)[(0, 0)];
                }
            }
        }
        net.set_alphas(&alphas)?;
        let leaves: Vec<Mat<f64>> = net.params().iter().map(|p| p.value.clone()).collect();
        let batch: Vec<SpdMatrix<f64>> = (0..3).map(|_| random_spd(&mut r, 8, 100.0)).collect();
        let labels = vec![0, 2, 1];
        out.push(case("supernet (n=8, 5 nodes)", leaves, move |t, l| {
            let xs: Vec<&SpdMatrix<f64>> = batch.iter().collect();
            let pass = net.forward(t, l, &xs, Some(&labels), BnMode::Train)?;
            Ok(pass.loss.expect("labels were given"))
        }));
    }
    Ok(out)
}

/// Runs every case; the supernet case dominates the runtime.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<CaseResult>> {
    let all = cases(opts)?;
    if let Some(f) = &opts.fault {
        if !all.iter().any(|c| &c.name == f) {
            return Err(Error::config(format!("no gradient check named {f:?}")));
        }
    }
    let mut results = Vec::new();
    for c in all {
        let faulty = opts.fault.as_deref() == Some(c.name.as_str());
        let start = Instant::now();
        let report = if faulty {
            gradcheck(
                |t, l| {
                    let mut l = l.to_vec();
                    l[0] = t.constant(t.value(l[0]).clone());
                    (c.f)(t, &l)
                },
                &c.leaves,
                GRADCHECK_STEP,
            )
        } else {
            gradcheck(|t, l| (c.f)(t, l), &c.leaves, GRADCHECK_STEP)
        };
        results.push(CaseResult {
            name: c.name,
            report,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(results)
}

/// Names of every case, in run order.
pub fn case_names(opts: &SuiteOptions) -> Result<Vec<String>> {
    Ok(cases(opts)?.into_iter().map(|c| c.name).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes() {
        let res = run_suite(&SuiteOptions { quick: true, fault: None }).unwrap();
        for c in &res {
            assert!(c.passed(), "{}: {:?}", c.name, c.report);
        }
    }

    #[test]
    fn injected_fault_is_caught() {
        let res = run_suite(&SuiteOptions {
            quick: true,
            fault: Some("BiMap".into()),
        })
        .unwrap();
        let bad: Vec<&str> = res.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
        assert_eq!(bad, vec!["BiMap"]);
    }
}
