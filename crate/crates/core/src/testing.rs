//! Random instance generators shared by unit, integration and acceptance tests.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::{thin_qr, Mat};
use crate::manifold::{SpdMatrix, SymMatrix};
use crate::rng::{substream, Rng};
use crate::search_space::{CandidateOp, CellKind, CellSpec, Gene, Genotype, GenotypeCell, GenotypeDims};

pub fn rng(seed: u64) -> Rng {
    substream(seed, "testing")
}

pub fn gaussian(r: &mut Rng, rows: usize, cols: usize) -> Mat<f64> {
    Mat::from_fn(rows, cols, |_, _| StandardNormal.sample(r))
}

/// Haar-ish random matrix with orthonormal columns.
pub fn random_stiefel(r: &mut Rng, n: usize, m: usize) -> Mat<f64> {
    thin_qr(&gaussian(r, n, m)).0
}

/// Symmetric matrix with Gaussian entries times `scale`.
pub fn random_sym(r: &mut Rng, n: usize, scale: f64) -> SymMatrix<f64> {
    SymMatrix::from_symmetrized(&gaussian(r, n, n).scale(scale))
}

/// SPD matrix with log-uniform spectrum spanning condition number `cond`,
/// scaled by a random factor in `[0.5, 2]`.
pub fn random_spd(r: &mut Rng, n: usize, cond: f64) -> SpdMatrix<f64> {
    let q = random_stiefel(r, n, n);
    let scale: f64 = r.random_range(0.5..2.0);
    let mut d: Vec<f64> = (0..n)
        .map(|_| scale * cond.powf(r.random_range(0.0..1.0)))
        .collect();
    if n >= 2 {
        d[0] = scale;
        d[1] = scale * cond;
    }
    SpdMatrix::from_mat_unchecked(&Mat::from_diag(&d).congruence(&q))
}

pub fn random_invertible(r: &mut Rng, n: usize) -> Mat<f64> {
    let q1 = random_stiefel(r, n, n);
    let q2 = random_stiefel(r, n, n);
    let d: Vec<f64> = (0..n).map(|_| r.random_range(0.5..2.0)).collect();
    q1.matmul(&Mat::from_diag(&d)).matmul(&q2)
}

/// Random point on the probability simplex (flat Dirichlet).
pub fn random_simplex(r: &mut Rng, k: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..k).map(|_| -r.random_range(1e-12..1.0f64).ln()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Genotype with `k` distinct random predecessors per node and random
/// non-None ops; cells of one kind get identical genes.
pub fn random_genotype(r: &mut Rng, specs: &[CellSpec], k: usize, dims: GenotypeDims) -> Genotype {
    let mut by_kind: Vec<(CellKind, GenotypeCell)> = Vec::new();
    let mut cells = Vec::new();
    for spec in specs {
        if let Some((_, c)) = by_kind.iter().find(|(kind, _)| *kind == spec.kind) {
            cells.push(c.clone());
            continue;
        }
        let nodes = spec
            .intermediate()
            .map(|node| {
                let mut incoming = spec.edges_into(node);
                incoming.shuffle(r);
                let mut genes: Vec<Gene> = incoming[..k]
                    .iter()
                    .map(|&e| {
                        let ops: Vec<CandidateOp> = spec
                            .candidates(e)
                            .iter()
                            .copied()
                            .filter(|&o| o != CandidateOp::NoneNormal)
                            .collect();
                        Gene {
                            pred: spec.edges[e].0,
                            op: *ops.choose(r).expect("non-empty catalogue"),
                        }
                    })
                    .collect();
                genes.sort_by_key(|g| g.pred);
                genes
            })
            .collect();
        let cell = GenotypeCell { kind: spec.kind, nodes };
        by_kind.push((spec.kind, cell.clone()));
        cells.push(cell);
    }
    Genotype { cells, dims }
}
