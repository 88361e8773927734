//! The searchable SPD cell: candidate operations, cell layout, genotypes,
//! and the supernet/discrete networks built from them.

mod network;

pub use network::{
    node_aggregate, mixed_edge_forward, BnSlot, CellConfig, ForwardPass, Network, NetworkConfig, Param, ParamKind,
    ParamReport, NodeValue,
};

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::simplex::Activation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Normal,
    Reduction,
}

impl CellKind {
    pub fn name(self) -> &'static str {
        match self {
            CellKind::Normal => "normal",
            CellKind::Reduction => "reduction",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CandidateOp {
    /// BiMap → BatchNorm
    #[serde(rename = "BiMap_0")]
    BiMap0,
    /// BiMap → BatchNorm → ReEig
    #[serde(rename = "BiMap_1")]
    BiMap1,
    /// ReEig → BiMap → BatchNorm
    #[serde(rename = "BiMap_2")]
    BiMap2,
    #[serde(rename = "Skip_normal")]
    SkipNormal,
    #[serde(rename = "None_normal")]
    NoneNormal,
    #[serde(rename = "WeightedRiemannPooling_normal")]
    WeightedRiemannPoolingNormal,
    #[serde(rename = "AveragePooling_reduced")]
    AveragePoolingReduced,
    #[serde(rename = "MaxPooling_reduced")]
    MaxPoolingReduced,
    #[serde(rename = "Skip_reduced")]
    SkipReduced,
}

pub const NORMAL_CANDIDATES: [CandidateOp; 6] = [
    CandidateOp::BiMap0,
    CandidateOp::BiMap1,
    CandidateOp::BiMap2,
    CandidateOp::SkipNormal,
    CandidateOp::NoneNormal,
    CandidateOp::WeightedRiemannPoolingNormal,
];

pub const REDUCTION_CANDIDATES: [CandidateOp; 7] = [
    CandidateOp::BiMap0,
    CandidateOp::BiMap1,
    CandidateOp::BiMap2,
    CandidateOp::AveragePoolingReduced,
    CandidateOp::MaxPoolingReduced,
    CandidateOp::SkipReduced,
    CandidateOp::NoneNormal,
];

impl CandidateOp {
    pub fn tag(self) -> &'static str {
        match self {
            CandidateOp::BiMap0 => "BiMap_0",
            CandidateOp::BiMap1 => "BiMap_1",
            CandidateOp::BiMap2 => "BiMap_2",
            CandidateOp::SkipNormal => "Skip_normal",
            CandidateOp::NoneNormal => "None_normal",
            CandidateOp::WeightedRiemannPoolingNormal => "WeightedRiemannPooling_normal",
            CandidateOp::AveragePoolingReduced => "AveragePooling_reduced",
            CandidateOp::MaxPoolingReduced => "MaxPooling_reduced",
            CandidateOp::SkipReduced => "Skip_reduced",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        NORMAL_CANDIDATES
            .iter()
            .chain(REDUCTION_CANDIDATES.iter())
            .copied()
            .find(|op| op.tag() == tag)
    }
}

/// Node layout of a cell: nodes `0` and `1` are inputs, `2..nodes−1` are
/// intermediate, and the last node concatenates the intermediate nodes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSpec {
    pub kind: CellKind,
    pub nodes: usize,
    pub dim_in: usize,
    pub dim_out: usize,
    /// `(from, to)` for every `from < to` with `to` intermediate.
    pub edges: Vec<(usize, usize)>,
}

impl CellSpec {
    pub fn new(kind: CellKind, nodes: usize, dim_in: usize, dim_out: usize) -> Result<Self> {
        if nodes < 4 {
            return Err(Error::config(format!(
                "a cell needs two inputs, at least one intermediate node and an output; got {nodes} nodes"
            )));
        }
        if kind == CellKind::Normal && dim_in != dim_out {
            return Err(Error::config(format!(
                "normal cells preserve dimension, got {dim_in} -> {dim_out}"
            )));
        }
        if dim_out == 0 || dim_out > dim_in {
            return Err(Error::config(format!("cannot reduce dimension {dim_in} to {dim_out}")));
        }
        let edges = (2..nodes - 1)
            .flat_map(|to| (0..to).map(move |from| (from, to)))
            .collect();
        Ok(Self {
            kind,
            nodes,
            dim_in,
            dim_out,
            edges,
        })
    }

    pub fn intermediate(&self) -> std::ops::Range<usize> {
        2..self.nodes - 1
    }

    pub fn intermediate_count(&self) -> usize {
        self.nodes - 3
    }

    /// Indices into `edges` of the edges entering `node`, by predecessor.
    pub fn edges_into(&self, node: usize) -> Vec<usize> {
        (0..self.edges.len()).filter(|&e| self.edges[e].1 == node).collect()
    }

    /// Edges leaving an input node change the dimension in a reduction
    /// cell; edges between intermediate nodes already see the reduced size.
    pub fn edge_reduces(&self, edge: usize) -> bool {
        self.kind == CellKind::Reduction && self.edges[edge].0 < 2
    }

    pub fn candidates(&self, edge: usize) -> &'static [CandidateOp] {
        if self.edge_reduces(edge) {
            &REDUCTION_CANDIDATES
        } else {
            &NORMAL_CANDIDATES
        }
    }

    pub fn edge_dims(&self, edge: usize) -> (usize, usize) {
        let from = self.edges[edge].0;
        let d_from = if from < 2 { self.dim_in } else { self.dim_out };
        (d_from, self.dim_out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gene {
    pub pred: usize,
    pub op: CandidateOp,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenotypeCell {
    pub kind: CellKind,
    /// One list of retained `(pred, op)` pairs per intermediate node.
    pub nodes: Vec<Vec<Gene>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenotypeDims {
    pub input: usize,
    pub classes: usize,
    pub channels: usize,
    /// Output dimension of each cell.
    pub cells: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Genotype {
    pub cells: Vec<GenotypeCell>,
    pub dims: GenotypeDims,
}

impl Genotype {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Checks the genotype against a cell layout.
    pub fn check(&self, specs: &[CellSpec], top_k: usize) -> Result<()> {
        if self.cells.len() != specs.len() {
            return Err(Error::config(format!(
                "genotype has {} cells, the network has {}",
                self.cells.len(),
                specs.len()
            )));
        }
        for (ci, (cell, spec)) in self.cells.iter().zip(specs).enumerate() {
            if cell.kind != spec.kind {
                return Err(Error::config(format!(
                    "cell {ci} is {} in the genotype but {} in the network",
                    cell.kind.name(),
                    spec.kind.name()
                )));
            }
            if cell.nodes.len() != spec.intermediate_count() {
                return Err(Error::config(format!(
                    "cell {ci} lists {} nodes, expected {}",
                    cell.nodes.len(),
                    spec.intermediate_count()
                )));
            }
            for (ni, genes) in cell.nodes.iter().enumerate() {
                let node = ni + 2;
                if genes.len() != top_k {
                    return Err(Error::config(format!(
                        "cell {ci} node {node} keeps {} edges, expected {top_k}",
                        genes.len()
                    )));
                }
                for (gi, g) in genes.iter().enumerate() {
                    if g.pred >= node || genes[..gi].iter().any(|h| h.pred == g.pred) {
                        return Err(Error::config(format!(
                            "cell {ci} node {node}: invalid or repeated predecessor {}",
                            g.pred
                        )));
                    }
                    let e = spec
                        .edges
                        .iter()
                        .position(|&(f, t)| f == g.pred && t == node)
                        .expect("every pred < node has an edge");
                    if g.op == CandidateOp::NoneNormal || !spec.candidates(e).contains(&g.op) {
                        return Err(Error::config(format!(
                            "cell {ci} node {node}: {} is not allowed on edge {}->{node}",
                            g.op.tag(),
                            g.pred
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Architecture logits of one cell kind: one vector per edge, one entry per
/// candidate of that edge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaParams {
    pub kind: CellKind,
    pub edges: Vec<Vec<f64>>,
}

impl AlphaParams {
    pub fn zeros(spec: &CellSpec) -> Self {
        Self {
            kind: spec.kind,
            edges: (0..spec.edges.len()).map(|e| vec![0.0; spec.candidates(e).len()]).collect(),
        }
    }

    pub fn as_column(&self, edge: usize) -> Mat<f64> {
        Mat::column_vector(self.edges[edge].clone())
    }
}

/// Picks, for every intermediate node, the `k` incoming edges whose best
/// non-None weight is largest, and on each the op with that weight.
/// Ties go to the lower predecessor index, then to catalogue order.
pub fn derive_cell(alpha: &AlphaParams, activation: Activation, spec: &CellSpec, k: usize) -> Result<GenotypeCell> {
    if alpha.edges.len() != spec.edges.len() {
        return Err(Error::shape(format!(
            "{} edge logit vectors for {} edges",
            alpha.edges.len(),
            spec.edges.len()
        )));
    }
    let mut best = Vec::with_capacity(spec.edges.len());
    for (e, z) in alpha.edges.iter().enumerate() {
        let cands = spec.candidates(e);
        if z.len() != cands.len() {
            return Err(Error::shape(format!("edge {e}: {} logits for {} candidates", z.len(), cands.len())));
        }
        let w = activation.apply(z)?;
        let mut pick: Option<(f64, CandidateOp)> = None;
        for (&wi, &op) in w.iter().zip(cands) {
            if op == CandidateOp::NoneNormal {
                continue;
            }
            if pick.is_none_or(|(b, _)| wi > b) {
                pick = Some((wi, op));
            }
        }
        best.push(pick.expect("every catalogue has a non-None op"));
    }
    let mut nodes = Vec::new();
    for node in spec.intermediate() {
        let mut incoming = spec.edges_into(node);
        if incoming.len() < k {
            return Err(Error::contract(format!(
                "node {node} has {} candidate predecessors, fewer than k = {k}",
                incoming.len()
            )));
        }
        // stable sort keeps predecessor order among equal weights
        incoming.sort_by(|&a, &b| best[b].0.total_cmp(&best[a].0));
        let mut genes: Vec<Gene> = incoming[..k]
            .iter()
            .map(|&e| Gene {
                pred: spec.edges[e].0,
                op: best[e].1,
            })
            .collect();
        genes.sort_by_key(|g| g.pred);
        nodes.push(genes);
    }
    Ok(GenotypeCell { kind: spec.kind, nodes })
}

/// Derives the discrete genotype of a whole network from its per-kind logits.
pub fn derive_genotype(
    alphas: &[AlphaParams],
    activation: Activation,
    specs: &[CellSpec],
    k: usize,
    dims: GenotypeDims,
) -> Result<Genotype> {
    let cells = specs
        .iter()
        .map(|spec| {
            let a = alphas
                .iter()
                .find(|a| a.kind == spec.kind)
                .ok_or_else(|| Error::contract(format!("no logits for {} cells", spec.kind.name())))?;
            derive_cell(a, activation, spec, k)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Genotype { cells, dims })
}

/// Logits that put all sparsemax mass on each genotype edge's op and on
/// `None_normal` for every edge the genotype drops. Cells of one kind share
/// logits, so they must carry identical genes.
pub fn one_hot_alphas(specs: &[CellSpec], genotype: &Genotype) -> Result<Vec<AlphaParams>> {
    if specs.len() != genotype.cells.len() {
        return Err(Error::shape(format!("{} cells in the genotype, {} in the layout", genotype.cells.len(), specs.len())));
    }
    let mut out: Vec<(AlphaParams, &GenotypeCell)> = Vec::new();
    for (spec, cell) in specs.iter().zip(&genotype.cells) {
        if let Some((_, first)) = out.iter().find(|(a, _)| a.kind == spec.kind) {
            if first.nodes != cell.nodes {
                return Err(Error::contract(format!(
                    "{} cells with different genes cannot share logits",
                    spec.kind.name()
                )));
            }
            continue;
        }
        let mut a = AlphaParams::zeros(spec);
        for (e, &(from, to)) in spec.edges.iter().enumerate() {
            let cands = spec.candidates(e);
            let node = to
                .checked_sub(2)
                .and_then(|i| cell.nodes.get(i))
                .ok_or_else(|| Error::shape(format!("genotype has no node {to}")))?;
            let op = node.iter().find(|g| g.pred == from).map_or(CandidateOp::NoneNormal, |g| g.op);
            let k = cands
                .iter()
                .position(|&c| c == op)
                .ok_or_else(|| Error::contract(format!("{} is not a candidate of edge {from}->{to}", op.tag())))?;
            a.edges[e][k] = 10.0;
        }
        out.push((a, cell));
    }
    Ok(out.into_iter().map(|(a, _)| a).collect())
}

/// Graphviz description, one cluster per cell.
pub fn export_dot(g: &Genotype) -> String {
    let mut s = String::from("digraph genotype {\n  rankdir=LR;\n  node [shape=box];\n");
    for (ci, cell) in g.cells.iter().enumerate() {
        let n = |i: usize| format!("c{ci}_n{i}");
        let out = cell.nodes.len() + 2;
        let _ = writeln!(s, "  subgraph cluster_{ci} {{");
        let _ = writeln!(s, "    label=\"cell {ci} ({})\";", cell.kind.name());
        let _ = writeln!(s, "    {} [label=\"in 0\"];", n(0));
        let _ = writeln!(s, "    {} [label=\"in 1\"];", n(1));
        for i in 0..cell.nodes.len() {
            let _ = writeln!(s, "    {} [label=\"{}\"];", n(i + 2), i + 2);
        }
        let _ = writeln!(s, "    {} [label=\"out\"];", n(out));
        for (i, genes) in cell.nodes.iter().enumerate() {
            for gene in genes {
                let _ = writeln!(s, "    {} -> {} [label=\"{}\"];", n(gene.pred), n(i + 2), gene.op.tag());
            }
            let _ = writeln!(s, "    {} -> {};", n(i + 2), n(out));
        }
        s.push_str("  }\n");
    }
    s.push_str("}\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec5() -> CellSpec {
        CellSpec::new(CellKind::Normal, 5, 4, 4).unwrap()
    }

    #[test]
    fn five_node_cell_layout() {
        let s = spec5();
        assert_eq!(s.edges, vec![(0, 2), (1, 2), (0, 3), (1, 3), (2, 3)]);
        assert_eq!(s.intermediate_count(), 2);
        let r = CellSpec::new(CellKind::Reduction, 5, 20, 10).unwrap();
        assert_eq!(r.candidates(0).len(), 7);
        assert_eq!(r.candidates(4), &NORMAL_CANDIDATES);
        assert_eq!(r.edge_dims(0), (20, 10));
        assert_eq!(r.edge_dims(4), (10, 10));
    }

    #[test]
    fn argmax_and_top_k() {
        let s = spec5();
        let mut a = AlphaParams::zeros(&s);
        // edge (0,3): BiMap_0 0.7, Skip 0.3 under sparsemax
        a.edges[2] = vec![0.7, -5.0, -5.0, 0.3, -5.0, -5.0];
        a.edges[3] = vec![-5.0, 0.45, -5.0, -5.0, 0.55, -5.0];
        a.edges[4] = vec![-5.0, -5.0, -5.0, -5.0, -5.0, 0.0];
        let c = derive_cell(&a, Activation::Sparsemax, &s, 2).unwrap();
        assert_eq!(c.nodes[1][0], Gene { pred: 0, op: CandidateOp::BiMap0 });
        assert_eq!(c.nodes[1][1], Gene { pred: 2, op: CandidateOp::WeightedRiemannPoolingNormal });
    }

    #[test]
    fn equal_logits_tie_break() {
        let s = spec5();
        let a = AlphaParams::zeros(&s);
        let c = derive_cell(&a, Activation::Softmax, &s, 2).unwrap();
        for genes in &c.nodes {
            assert_eq!(genes[0], Gene { pred: 0, op: CandidateOp::BiMap0 });
            assert_eq!(genes[1], Gene { pred: 1, op: CandidateOp::BiMap0 });
        }
        assert!(matches!(
            derive_cell(&a, Activation::Softmax, &s, 3).unwrap_err(),
            Error::Contract(_)
        ));
    }

    #[test]
    fn genotype_json_shape() {
        let s = spec5();
        let g = derive_genotype(
            &[AlphaParams::zeros(&s)],
            Activation::Sparsemax,
            std::slice::from_ref(&s),
            2,
            GenotypeDims { input: 4, classes: 2, channels: 1, cells: vec![4] },
        )
        .unwrap();
        let v: serde_json::Value = serde_json::from_str(&g.to_json().unwrap()).unwrap();
        assert_eq!(v["cells"][0]["kind"], "normal");
        assert_eq!(v["cells"][0]["nodes"][0][0]["op"], "BiMap_0");
        assert_eq!(v["cells"][0]["nodes"][0][0]["pred"], 0);
        assert_eq!(Genotype::from_json(&g.to_json().unwrap()).unwrap(), g);
        g.check(&[s], 2).unwrap();
    }

    #[test]
    fn dot_without_intermediate_nodes() {
        let g = Genotype {
            cells: vec![GenotypeCell { kind: CellKind::Normal, nodes: vec![] }],
            dims: GenotypeDims { input: 4, classes: 2, channels: 1, cells: vec![4] },
        };
        let d = export_dot(&g);
        assert!(d.contains("c0_n0") && d.contains("c0_n1") && d.contains("c0_n2 [label=\"out\"]"));
        assert!(!d.contains("->"));
    }
}
