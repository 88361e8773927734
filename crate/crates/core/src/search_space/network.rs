use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{AlphaParams, CandidateOp, CellKind, CellSpec, Genotype, GenotypeDims};
use crate::error::{Error, Result};
use crate::frechet::WfmConfig;
use crate::layers::{self, graph, BnMode, StiefelParam};
use crate::linalg::Mat;
use crate::manifold::SpdMatrix;
use crate::rng::{substream, Rng};
use crate::simplex::Activation;
use crate::tape::{NodeId, PoolKind, Tape};

/// Channels of one sample at one node.
pub type NodeValue = Vec<NodeId>;

/// `[sample][channel]`
type BatchValue = Vec<NodeValue>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellConfig {
    pub kind: CellKind,
    /// Output dimension; reduction cells default to half their input
    /// (rounded up), normal cells keep their input dimension.
    #[serde(default)]
    pub dim: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub classes: usize,
    /// Channels per node inside a cell.
    pub channels: usize,
    pub cells: Vec<CellConfig>,
    pub nodes: usize,
    pub top_k: usize,
    pub pool_kernel: usize,
    pub reeig_eps: f64,
    pub bn_momentum: f64,
    /// Cells of the same kind reuse one set of op parameters.
    pub share_op_params: bool,
    pub wfm: WfmConfig,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_dim: 20,
            classes: 3,
            channels: 1,
            cells: vec![
                CellConfig {
                    kind: CellKind::Reduction,
                    dim: Some(10),
                },
                CellConfig {
                    kind: CellKind::Normal,
                    dim: None,
                },
            ],
            nodes: 5,
            top_k: 2,
            pool_kernel: 2,
            reeig_eps: layers::DEFAULT_REEIG_EPS,
            bn_momentum: layers::DEFAULT_BN_MOMENTUM,
            share_op_params: false,
            wfm: WfmConfig::default(),
        }
    }
}

impl NetworkConfig {
    /// All problems with the configuration, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.input_dim < 2 {
            p.push(format!("network.input_dim must be at least 2, got {}", self.input_dim));
        }
        if self.classes < 2 {
            p.push(format!("network.classes must be at least 2, got {}", self.classes));
        }
        if self.channels == 0 {
            p.push("network.channels must be positive".into());
        }
        if self.cells.is_empty() {
            p.push("network.cells is empty".into());
        }
        if self.nodes < 4 {
            p.push(format!("network.nodes must be at least 4, got {}", self.nodes));
        }
        if self.top_k == 0 || self.top_k > 2 {
            p.push(format!(
                "network.top_k must be 1 or 2 (the first intermediate node has two predecessors), got {}",
                self.top_k
            ));
        }
        if self.pool_kernel != 2 && self.pool_kernel != 4 {
            p.push(format!("network.pool_kernel must be 2 or 4, got {}", self.pool_kernel));
        }
        if !(self.reeig_eps > 0.0) || !self.reeig_eps.is_finite() {
            p.push(format!("network.reeig_eps must be positive, got {}", self.reeig_eps));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            p.push(format!("network.bn_momentum must lie in [0, 1], got {}", self.bn_momentum));
        }
        if let Err(e) = self.wfm.validate() {
            p.push(format!("network.wfm: {e}"));
        }
        if p.is_empty() {
            if let Err(e) = self.specs() {
                p.push(e.to_string());
            }
        }
        p
    }

    pub fn specs(&self) -> Result<Vec<CellSpec>> {
        let mut d = self.input_dim;
        let mut out = Vec::with_capacity(self.cells.len());
        for (i, c) in self.cells.iter().enumerate() {
            let dim_out = match (c.kind, c.dim) {
                (CellKind::Reduction, dim) => dim.unwrap_or(d.div_ceil(2)),
                (CellKind::Normal, None) => d,
                (CellKind::Normal, Some(x)) => x,
            };
            let spec = CellSpec::new(c.kind, self.nodes, d, dim_out)
                .map_err(|e| Error::config(format!("cell {i}: {e}")))?;
            d = dim_out;
            out.push(spec);
        }
        Ok(out)
    }

    pub fn genotype_dims(&self) -> Result<GenotypeDims> {
        Ok(GenotypeDims {
            input: self.input_dim,
            classes: self.classes,
            channels: self.channels,
            cells: self.specs()?.iter().map(|s| s.dim_out).collect(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Column-orthonormal BiMap weight.
    Stiefel,
    /// Unconstrained weights (head, pooling logits).
    Euclidean,
    /// Symmetric matrix `S` of a batchnorm bias `G = exp(S)`.
    Symmetric,
    /// Architecture logits.
    Alpha,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Mat<f64>,
}

impl Param {
    /// Number of free reals.
    pub fn count(&self) -> usize {
        match self.kind {
            ParamKind::Symmetric => self.value.rows() * (self.value.rows() + 1) / 2,
            _ => self.value.as_slice().len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnSlot {
    pub name: String,
    /// Index of the bias log parameter.
    pub bias: usize,
    pub running_mean: SpdMatrix<f64>,
    pub momentum: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub count: usize,
    /// `count × 4 / 2²⁰`
    pub megabytes: f64,
}

#[derive(Clone, Debug)]
enum OpInst {
    BiMap { op: CandidateOp, w: usize, bn: usize },
    Skip,
    Identity,
    WeightedPool { logits: usize },
    Pool { kind: PoolKind, fit: Option<usize> },
    SkipReduced { w1: usize, w2: usize },
}

#[derive(Clone, Debug)]
struct EdgeSlot {
    /// Index into the cell spec's edge list.
    edge: usize,
    alpha: Option<usize>,
    ops: Vec<(CandidateOp, OpInst)>,
}

#[derive(Clone, Debug)]
struct Preprocess {
    w: usize,
    bn: usize,
}

#[derive(Clone, Debug)]
struct CellSlot {
    spec: CellSpec,
    pre: [Preprocess; 2],
    edges: Vec<EdgeSlot>,
}

/// A supernet (every edge mixes all candidates under architecture logits)
/// or a discrete network (the edges and ops of a genotype).
#[derive(Clone, Debug)]
pub struct Network {
    config: NetworkConfig,
    activation: Activation,
    params: Vec<Param>,
    bns: Vec<BnSlot>,
    cells: Vec<CellSlot>,
    head_w: usize,
    head_b: usize,
    alphas: Vec<(CellKind, Vec<usize>)>,
    genotype: Option<Genotype>,
}

struct Builder<'a> {
    cfg: &'a NetworkConfig,
    rng: Rng,
    params: Vec<Param>,
    bns: Vec<BnSlot>,
    index: HashMap<String, usize>,
    bn_index: HashMap<String, usize>,
}

impl Builder<'_> {
    fn add(&mut self, name: String, kind: ParamKind, make: impl FnOnce(&mut Rng) -> Result<Mat<f64>>, shape: (usize, usize)) -> Result<usize> {
        if let Some(&i) = self.index.get(&name) {
            if self.params[i].value.shape() != shape {
                return Err(Error::config(format!(
                    "shared parameter {name} is needed with shapes {:?} and {:?}",
                    self.params[i].value.shape(),
                    shape
                )));
            }
            return Ok(i);
        }
        let value = make(&mut self.rng)?;
        self.params.push(Param {
            name: name.clone(),
            kind,
            value,
        });
        self.index.insert(name, self.params.len() - 1);
        Ok(self.params.len() - 1)
    }

    fn stiefel(&mut self, name: String, n: usize, m: usize) -> Result<usize> {
        self.add(
            name,
            ParamKind::Stiefel,
            |r| Ok(StiefelParam::random(r, n, m)?.into_mat()),
            (n, m),
        )
    }

    fn euclid(&mut self, name: String, value: Mat<f64>) -> Result<usize> {
        let shape = value.shape();
        self.add(name, ParamKind::Euclidean, |_| Ok(value), shape)
    }

    fn bn(&mut self, name: String, n: usize) -> Result<usize> {
        if let Some(&i) = self.bn_index.get(&name) {
            return Ok(i);
        }
        let bias = self.add(format!("{name}.bias_log"), ParamKind::Symmetric, |_| Ok(Mat::zeros(n, n)), (n, n))?;
        self.bns.push(BnSlot {
            name: name.clone(),
            bias,
            running_mean: SpdMatrix::identity(n),
            momentum: self.cfg.bn_momentum,
        });
        self.bn_index.insert(name, self.bns.len() - 1);
        Ok(self.bns.len() - 1)
    }

    fn op(&mut self, prefix: &str, op: CandidateOp, d_in: usize, d_out: usize) -> Result<OpInst> {
        let name = |s: &str| format!("{prefix}.{}.{s}", op.tag());
        Ok(match op {
            CandidateOp::BiMap0 | CandidateOp::BiMap1 | CandidateOp::BiMap2 => OpInst::BiMap {
                op,
                w: self.stiefel(name("w"), d_in, d_out)?,
                bn: self.bn(name("bn"), d_out)?,
            },
            CandidateOp::SkipNormal => {
                if d_in != d_out {
                    return Err(Error::config(format!("Skip_normal cannot map {d_in} to {d_out}")));
                }
                OpInst::Skip
            }
            CandidateOp::NoneNormal => OpInst::Identity,
            CandidateOp::WeightedRiemannPoolingNormal => {
                let c = self.cfg.channels;
                OpInst::WeightedPool {
                    logits: self.euclid(name("logits"), Mat::zeros(c, c))?,
                }
            }
            CandidateOp::AveragePoolingReduced | CandidateOp::MaxPoolingReduced => {
                let k = self.cfg.pool_kernel;
                let p = layers::pooled_dim(d_in, k);
                if p < d_out {
                    return Err(Error::config(format!(
                        "{} with kernel {k} maps {d_in} to {p}, below the target {d_out}",
                        op.tag()
                    )));
                }
                let fit = if p == d_out {
                    None
                } else {
                    Some(self.stiefel(name("fit"), p, d_out)?)
                };
                let kind = if op == CandidateOp::AveragePoolingReduced {
                    PoolKind::Avg
                } else {
                    PoolKind::Max
                };
                OpInst::Pool { kind, fit }
            }
            CandidateOp::SkipReduced => {
                if !d_out.is_multiple_of(2) {
                    return Err(Error::config(format!("Skip_reduced needs an even output dimension, got {d_out}")));
                }
                OpInst::SkipReduced {
                    w1: self.stiefel(name("w1"), d_in, d_out / 2)?,
                    w2: self.stiefel(name("w2"), d_in, d_out / 2)?,
                }
            }
        })
    }
}

fn check_config(cfg: &NetworkConfig) -> Result<Vec<CellSpec>> {
    let p = cfg.problems();
    if !p.is_empty() {
        return Err(Error::config(p.join("; ")));
    }
    cfg.specs()
}

impl Network {
    /// Supernet with every candidate on every edge and zero logits.
    pub fn supernet(cfg: &NetworkConfig, activation: Activation, seed: u64) -> Result<Self> {
        let specs = check_config(cfg)?;
        Self::build(cfg, activation, seed, &specs, None)
    }

    /// Discrete network of a genotype, freshly initialized.
    pub fn discrete(cfg: &NetworkConfig, genotype: &Genotype, activation: Activation, seed: u64) -> Result<Self> {
        let specs = check_config(cfg)?;
        let dims = cfg.genotype_dims()?;
        if genotype.dims != dims {
            return Err(Error::config(format!(
                "genotype dimensions {:?} do not match the network's {:?}",
                genotype.dims, dims
            )));
        }
        genotype.check(&specs, cfg.top_k)?;
        Self::build(cfg, activation, seed, &specs, Some(genotype))
    }

    /// Discrete network of `genotype` carrying this network's parameter
    /// values and running statistics.
    pub fn subnet(&self, genotype: &Genotype) -> Result<Self> {
        let mut net = Self::discrete(&self.config, genotype, self.activation, 0)?;
        let by_name: HashMap<&str, &Param> = self.params.iter().map(|p| (p.name.as_str(), p)).collect();
        for p in &mut net.params {
            if let Some(src) = by_name.get(p.name.as_str()) {
                p.value = src.value.clone();
            }
        }
        let bns: HashMap<&str, &BnSlot> = self.bns.iter().map(|b| (b.name.as_str(), b)).collect();
        for b in &mut net.bns {
            if let Some(src) = bns.get(b.name.as_str()) {
                b.running_mean = src.running_mean.clone();
            }
        }
        Ok(net)
    }

    fn build(
        cfg: &NetworkConfig,
        activation: Activation,
        seed: u64,
        specs: &[CellSpec],
        genotype: Option<&Genotype>,
    ) -> Result<Self> {
        let mut b = Builder {
            cfg,
            rng: substream(seed, "init"),
            params: Vec::new(),
            bns: Vec::new(),
            index: HashMap::new(),
            bn_index: HashMap::new(),
        };
        let c = cfg.channels;
        // (dim, channels) of the raw input and of each cell output
        let mut sources = vec![(cfg.input_dim, 1usize)];
        let mut cells = Vec::with_capacity(specs.len());
        for (ci, spec) in specs.iter().enumerate() {
            let src = [
                sources[ci.saturating_sub(1)],
                sources[ci],
            ];
            let mut pre = Vec::with_capacity(2);
            for (j, &(d, _)) in src.iter().enumerate() {
                let name = format!("cell{ci}.pre{j}");
                pre.push(Preprocess {
                    w: b.stiefel(format!("{name}.w"), d, spec.dim_in)?,
                    bn: b.bn(format!("{name}.bn"), spec.dim_in)?,
                });
            }
            let prefix = |e: usize| {
                let (f, t) = spec.edges[e];
                if cfg.share_op_params {
                    format!("{}.e{f}_{t}", spec.kind.name())
                } else {
                    format!("cell{ci}.e{f}_{t}")
                }
            };
            let mut edges = Vec::new();
            match genotype {
                None => {
                    for e in 0..spec.edges.len() {
                        let (d_in, d_out) = spec.edge_dims(e);
                        let ops = spec
                            .candidates(e)
                            .iter()
                            .map(|&op| Ok((op, b.op(&prefix(e), op, d_in, d_out)?)))
                            .collect::<Result<Vec<_>>>()?;
                        edges.push(EdgeSlot { edge: e, alpha: None, ops });
                    }
                }
                Some(g) => {
                    for (ni, genes) in g.cells[ci].nodes.iter().enumerate() {
                        for gene in genes {
                            let e = spec
                                .edges
                                .iter()
                                .position(|&(f, t)| f == gene.pred && t == ni + 2)
                                .expect("genotype checked against the spec");
                            let (d_in, d_out) = spec.edge_dims(e);
                            let inst = b.op(&prefix(e), gene.op, d_in, d_out)?;
                            edges.push(EdgeSlot {
                                edge: e,
                                alpha: None,
                                ops: vec![(gene.op, inst)],
                            });
                        }
                    }
                }
            }
            cells.push(CellSlot {
                spec: spec.clone(),
                pre: [pre[0].clone(), pre[1].clone()],
                edges,
            });
            sources.push((spec.dim_out, spec.intermediate_count() * c));
        }

        let &(d, ch) = sources.last().expect("at least one cell");
        let features = ch * d * (d + 1) / 2;
        let scale = 1.0 / (features as f64).sqrt();
        let head_w = {
            use rand_distr::{Distribution, StandardNormal};
            let w = Mat::from_fn(cfg.classes, features, |_, _| {
                let v: f64 = StandardNormal.sample(&mut b.rng);
                v * scale
            });
            b.euclid("head.weight".into(), w)?
        };
        let head_b = b.euclid("head.bias".into(), Mat::zeros(cfg.classes, 1))?;

        let mut alphas = Vec::new();
        if genotype.is_none() {
            for spec in specs {
                if alphas.iter().any(|(k, _)| *k == spec.kind) {
                    continue;
                }
                let ids = (0..spec.edges.len())
                    .map(|e| {
                        let (f, t) = spec.edges[e];
                        let name = format!("alpha.{}.e{f}_{t}", spec.kind.name());
                        let z = Mat::zeros(spec.candidates(e).len(), 1);
                        b.add(name, ParamKind::Alpha, |_| Ok(z), (spec.candidates(e).len(), 1))
                    })
                    .collect::<Result<Vec<_>>>()?;
                alphas.push((spec.kind, ids));
            }
            for cell in &mut cells {
                let ids = &alphas.iter().find(|(k, _)| *k == cell.spec.kind).expect("created above").1;
                for e in &mut cell.edges {
                    e.alpha = Some(ids[e.edge]);
                }
            }
        }

        Ok(Self {
            config: cfg.clone(),
            activation,
            params: b.params,
            bns: b.bns,
            cells,
            head_w,
            head_b,
            alphas,
            genotype: genotype.cloned(),
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn is_supernet(&self) -> bool {
        self.genotype.is_none()
    }

    pub fn genotype(&self) -> Option<&Genotype> {
        self.genotype.as_ref()
    }

    pub fn specs(&self) -> Vec<CellSpec> {
        self.cells.iter().map(|c| c.spec.clone()).collect()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn bn_slots(&self) -> &[BnSlot] {
        &self.bns
    }

    pub fn bn_slots_mut(&mut self) -> &mut [BnSlot] {
        &mut self.bns
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Architecture logits, one entry per cell kind present.
    pub fn alphas(&self) -> Vec<AlphaParams> {
        self.alphas
            .iter()
            .map(|(kind, ids)| AlphaParams {
                kind: *kind,
                edges: ids.iter().map(|&i| self.params[i].value.as_slice().to_vec()).collect(),
            })
            .collect()
    }

    pub fn set_alphas(&mut self, alphas: &[AlphaParams]) -> Result<()> {
        for a in alphas {
            let ids = self
                .alphas
                .iter()
                .find(|(k, _)| *k == a.kind)
                .ok_or_else(|| Error::shape(format!("the network has no {} cells", a.kind.name())))?
                .1
                .clone();
            if ids.len() != a.edges.len() {
                return Err(Error::shape(format!(
                    "{} logit vectors for {} edges",
                    a.edges.len(),
                    ids.len()
                )));
            }
            for (&i, z) in ids.iter().zip(&a.edges) {
                if self.params[i].value.rows() != z.len() {
                    return Err(Error::shape(format!("{}: expected {} logits", self.params[i].name, self.params[i].value.rows())));
                }
                self.params[i].value = Mat::column_vector(z.clone());
            }
        }
        Ok(())
    }

    pub fn derive_genotype(&self) -> Result<Genotype> {
        super::derive_genotype(
            &self.alphas(),
            self.activation,
            &self.specs(),
            self.config.top_k,
            self.config.genotype_dims()?,
        )
    }

    /// Counts every learnable real, including architecture logits.
    pub fn param_report(&self) -> ParamReport {
        let count: usize = self.params.iter().map(Param::count).sum();
        ParamReport {
            count,
            megabytes: count as f64 * 4.0 / (1u64 << 20) as f64,
        }
    }

    /// One leaf per parameter, in parameter order.
    pub fn bind(&self, t: &mut Tape<f64>) -> Vec<NodeId> {
        self.params.iter().map(|p| t.leaf(p.value.clone())).collect()
    }

    /// Records the forward pass of a batch. With labels, also records the
    /// mean cross-entropy loss.
    pub fn forward(
        &self,
        t: &mut Tape<f64>,
        params: &[NodeId],
        batch: &[&SpdMatrix<f64>],
        labels: Option<&[usize]>,
        bn_mode: BnMode,
    ) -> Result<ForwardPass> {
        if params.len() != self.params.len() {
            return Err(Error::contract(format!(
                "{} parameter nodes for {} parameters",
                params.len(),
                self.params.len()
            )));
        }
        if batch.is_empty() {
            return Err(Error::contract("forward pass of an empty batch"));
        }
        if let Some(x) = batch.iter().find(|x| x.dim() != self.config.input_dim) {
            return Err(Error::shape(format!(
                "the network takes {0}x{0} inputs, got {1}x{1}",
                self.config.input_dim,
                x.dim()
            )));
        }
        if let Some(l) = labels {
            if l.len() != batch.len() {
                return Err(Error::shape(format!("{} labels for {} samples", l.len(), batch.len())));
            }
        }
        let mut run = Run {
            net: self,
            t,
            p: params,
            bn_mode,
            bn_updates: Vec::new(),
            node_values: Vec::new(),
            eye: HashMap::new(),
        };
        let input: BatchValue = batch.iter().map(|x| vec![run.t.constant(x.as_mat().clone())]).collect();
        let mut outputs: Vec<BatchValue> = vec![input];
        for ci in 0..self.cells.len() {
            let s0 = outputs[ci.saturating_sub(1)].clone();
            let s1 = outputs[ci].clone();
            let out = run.cell(ci, &s0, &s1)?;
            outputs.push(out);
        }
        let last = outputs.pop().expect("at least one cell");
        let logits = last
            .iter()
            .map(|chans| run.head(chans))
            .collect::<Result<Vec<_>>>()?;
        let loss = match labels {
            Some(l) => {
                if let Some(&bad) = l.iter().find(|&&y| y >= self.config.classes) {
                    return Err(Error::shape(format!(
                        "label {bad} outside {} classes",
                        self.config.classes
                    )));
                }
                let terms = logits
                    .iter()
                    .zip(l)
                    .map(|(&z, &y)| run.t.softmax_xent(z, y))
                    .collect::<Result<Vec<_>>>()?;
                let s = run.t.sum(terms)?;
                Some(run.t.scale(s, 1.0 / batch.len() as f64)?)
            }
            None => None,
        };
        Ok(ForwardPass {
            logits,
            loss,
            bn_updates: run.bn_updates,
            node_values: run.node_values,
        })
    }

    /// Advances running means with the batch means of a train-mode pass.
    pub fn apply_bn_updates(&mut self, updates: &[(usize, SpdMatrix<f64>)]) -> Result<()> {
        for (slot, mean) in updates {
            let s = &mut self.bns[*slot];
            s.running_mean = layers::update_running_mean(&s.running_mean, mean, s.momentum, &self.config.wfm)?;
        }
        Ok(())
    }
}

/// Nodes recorded by [`Network::forward`].
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// One `classes×1` node per sample.
    pub logits: Vec<NodeId>,
    /// Mean cross-entropy, when labels were given.
    pub loss: Option<NodeId>,
    /// `(batchnorm slot, batch barycenter)` for every train-mode batchnorm.
    pub bn_updates: Vec<(usize, SpdMatrix<f64>)>,
    /// Every channel of every cell node, for SPD spot checks.
    pub node_values: Vec<NodeId>,
}

/// Weighted Fréchet mixture of candidate outputs, channel by channel.
/// Candidates with zero weight may be `None`.
pub fn mixed_edge_forward(
    t: &mut Tape<f64>,
    candidates: &[Option<NodeValue>],
    weights: NodeId,
    cfg: &WfmConfig,
) -> Result<NodeValue> {
    let w = t.value(weights).as_slice().to_vec();
    if w.len() != candidates.len() {
        return Err(Error::shape(format!("{} weights for {} candidates", w.len(), candidates.len())));
    }
    let present: Vec<&NodeValue> = candidates.iter().flatten().collect();
    let Some(first) = present.first() else {
        return Err(Error::contract("mixed edge without candidate outputs"));
    };
    let channels = first.len();
    if present.iter().any(|v| v.len() != channels) {
        return Err(Error::shape("candidate outputs differ in channel count"));
    }
    for (k, c) in candidates.iter().enumerate() {
        if c.is_none() && w[k] > 0.0 {
            return Err(Error::contract(format!("candidate {k} has weight {} but no output", w[k])));
        }
    }
    (0..channels)
        .map(|ch| {
            // zero-weight slots are never read; any node fills them
            let pts: Vec<NodeId> = candidates
                .iter()
                .map(|c| c.as_ref().map_or(first[ch], |v| v[ch]))
                .collect();
            graph::wfm(t, &pts, weights, cfg)
        })
        .collect()
}

/// Channel-wise barycenter of the incoming edge outputs.
pub fn node_aggregate(t: &mut Tape<f64>, edges: &[NodeValue], cfg: &WfmConfig) -> Result<NodeValue> {
    let first = edges.first().ok_or_else(|| Error::contract("node without incoming edges"))?;
    if edges.iter().any(|e| e.len() != first.len()) {
        return Err(Error::shape("incoming edges differ in channel count"));
    }
    let dim = |t: &Tape<f64>, id: NodeId| t.value(id).rows();
    for e in edges {
        for (a, b) in e.iter().zip(first) {
            if dim(t, *a) != dim(t, *b) {
                return Err(Error::shape("incoming edges differ in matrix dimension"));
            }
        }
    }
    (0..first.len())
        .map(|ch| {
            let pts: Vec<NodeId> = edges.iter().map(|e| e[ch]).collect();
            graph::barycenter(t, &pts, cfg)
        })
        .collect()
}

struct Run<'a> {
    net: &'a Network,
    t: &'a mut Tape<f64>,
    p: &'a [NodeId],
    bn_mode: BnMode,
    bn_updates: Vec<(usize, SpdMatrix<f64>)>,
    node_values: Vec<NodeId>,
    eye: HashMap<usize, NodeId>,
}

impl Run<'_> {
    fn cfg(&self) -> &NetworkConfig {
        &self.net.config
    }

    fn identity(&mut self, n: usize) -> NodeId {
        if let Some(&id) = self.eye.get(&n) {
            return id;
        }
        let id = self.t.constant(Mat::identity(n));
        self.eye.insert(n, id);
        id
    }

    fn map(&mut self, x: &BatchValue, mut f: impl FnMut(&mut Self, NodeId) -> Result<NodeId>) -> Result<BatchValue> {
        x.iter()
            .map(|chans| chans.iter().map(|&c| f(self, c)).collect())
            .collect()
    }

    /// Normalizes all samples and channels of the batch together.
    fn bn(&mut self, slot: usize, x: &BatchValue) -> Result<BatchValue> {
        let s = &self.net.bns[slot];
        let flat: Vec<NodeId> = x.iter().flatten().copied().collect();
        let (out, mean) = graph::batchnorm(
            self.t,
            &flat,
            self.p[s.bias],
            &s.running_mean,
            self.bn_mode,
            &self.net.config.wfm,
        )?;
        if let Some(m) = mean {
            self.bn_updates.push((slot, m));
        }
        let mut it = out.into_iter();
        Ok(x.iter()
            .map(|chans| chans.iter().map(|_| it.next().expect("one output per input")).collect())
            .collect())
    }

    fn bimap_op(&mut self, op: CandidateOp, w: usize, bn: usize, x: &BatchValue) -> Result<BatchValue> {
        let eps = self.cfg().reeig_eps;
        let wn = self.p[w];
        match op {
            CandidateOp::BiMap0 => {
                let y = self.map(x, |r, c| graph::bimap(r.t, c, wn))?;
                self.bn(bn, &y)
            }
            CandidateOp::BiMap1 => {
                let y = self.map(x, |r, c| graph::bimap(r.t, c, wn))?;
                let y = self.bn(bn, &y)?;
                self.map(&y, |r, c| graph::reeig(r.t, c, eps))
            }
            _ => {
                let y = self.map(x, |r, c| graph::reeig(r.t, c, eps))?;
                let y = self.map(&y, |r, c| graph::bimap(r.t, c, wn))?;
                self.bn(bn, &y)
            }
        }
    }

    fn apply(&mut self, op: CandidateOp, inst: &OpInst, x: &BatchValue, d_out: usize) -> Result<BatchValue> {
        let y = match inst {
            OpInst::BiMap { op, w, bn } => self.bimap_op(*op, *w, *bn, x)?,
            OpInst::Skip => x.clone(),
            OpInst::Identity => {
                let eye = self.identity(d_out);
                x.iter().map(|chans| vec![eye; chans.len()]).collect()
            }
            OpInst::WeightedPool { logits } => {
                let ln = self.p[*logits];
                let act = self.net.activation;
                let cfg = self.net.config.wfm;
                x.iter()
                    .map(|chans| graph::weighted_pool(self.t, chans, ln, act, &cfg))
                    .collect::<Result<Vec<_>>>()?
            }
            OpInst::Pool { kind, fit } => {
                let k = self.cfg().pool_kernel;
                let y = self.map(x, |r, c| graph::pool_reduced(r.t, c, k, *kind))?;
                match fit {
                    Some(w) => {
                        let wn = self.p[*w];
                        self.map(&y, |r, c| graph::bimap(r.t, c, wn))?
                    }
                    None => y,
                }
            }
            OpInst::SkipReduced { w1, w2 } => {
                let (a, b) = (self.p[*w1], self.p[*w2]);
                self.map(x, |r, c| graph::skip_reduced(r.t, c, a, b))?
            }
        };
        for chans in &y {
            for &c in chans {
                let d = self.t.value(c).rows();
                if d != d_out {
                    return Err(Error::shape(format!("{} produced {d}x{d}, expected {d_out}x{d_out}", op.tag())));
                }
            }
        }
        Ok(y)
    }

    /// `None` when the edge's weights put all mass on `None_normal`: such an
    /// edge is absent from the node's Fréchet mean.
    fn edge(&mut self, e: &EdgeSlot, x: &BatchValue, d_out: usize) -> Result<Option<BatchValue>> {
        let Some(alpha) = e.alpha else {
            let (op, inst) = &e.ops[0];
            if *op == CandidateOp::NoneNormal {
                return Ok(None);
            }
            return self.apply(*op, inst, x, d_out).map(Some);
        };
        let w = self.t.activation(self.p[alpha], self.net.activation)?;
        let wv = self.t.value(w).as_slice().to_vec();
        let none = e.ops.iter().position(|(op, _)| *op == CandidateOp::NoneNormal);
        if let Some(i) = none {
            if wv[i] == 1.0 {
                return Ok(None);
            }
        }
        let mut outs: Vec<Option<BatchValue>> = Vec::with_capacity(e.ops.len());
        for (k, (op, inst)) in e.ops.iter().enumerate() {
            outs.push(if wv[k] > 0.0 {
                Some(self.apply(*op, inst, x, d_out)?)
            } else {
                None
            });
        }
        let cfg = self.net.config.wfm;
        (0..x.len())
            .map(|s| {
                let cands: Vec<Option<NodeValue>> = outs.iter().map(|o| o.as_ref().map(|v| v[s].clone())).collect();
                mixed_edge_forward(self.t, &cands, w, &cfg)
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    /// Maps a value with `c'` channels to `c`: channels are cycled when
    /// `c' < c`; otherwise channel `j` is the barycenter of channels
    /// `j, j + c, j + 2c, …`.
    fn merge_channels(&mut self, x: &BatchValue) -> Result<BatchValue> {
        let c = self.cfg().channels;
        let cfg = self.net.config.wfm;
        x.iter()
            .map(|chans| {
                let cin = chans.len();
                if cin == c {
                    return Ok(chans.clone());
                }
                if cin < c {
                    return Ok((0..c).map(|j| chans[j % cin]).collect());
                }
                (0..c)
                    .map(|j| {
                        let group: Vec<NodeId> = chans.iter().skip(j).step_by(c).copied().collect();
                        graph::barycenter(self.t, &group, &cfg)
                    })
                    .collect()
            })
            .collect()
    }

    fn preprocess(&mut self, pre: &Preprocess, x: &BatchValue) -> Result<BatchValue> {
        let m = self.merge_channels(x)?;
        self.bimap_op(CandidateOp::BiMap2, pre.w, pre.bn, &m)
    }

    fn cell(&mut self, ci: usize, s0: &BatchValue, s1: &BatchValue) -> Result<BatchValue> {
        let net = self.net;
        let cell = &net.cells[ci];
        let spec = &cell.spec;
        let x0 = self.preprocess(&cell.pre[0], s0)?;
        let x1 = self.preprocess(&cell.pre[1], s1)?;
        let mut nodes: Vec<BatchValue> = vec![x0, x1];
        let cfg = net.config.wfm;
        for node in spec.intermediate() {
            let mut incoming: Vec<BatchValue> = Vec::new();
            for e in cell.edges.iter().filter(|e| spec.edges[e.edge].1 == node) {
                let from = spec.edges[e.edge].0;
                if let Some(v) = self.edge(e, &nodes[from], spec.dim_out)? {
                    incoming.push(v);
                }
            }
            let value = if incoming.is_empty() {
                let eye = self.identity(spec.dim_out);
                let c = net.config.channels;
                vec![vec![eye; c]; s0.len()]
            } else {
                (0..s0.len())
                    .map(|s| {
                        let per: Vec<NodeValue> = incoming.iter().map(|v| v[s].clone()).collect();
                        node_aggregate(self.t, &per, &cfg)
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            self.node_values.extend(value.iter().flatten().copied());
            nodes.push(value);
        }
        let inter = &nodes[2..];
        Ok((0..s0.len())
            .map(|s| inter.iter().flat_map(|v| v[s].iter().copied()).collect())
            .collect())
    }

    fn head(&mut self, chans: &NodeValue) -> Result<NodeId> {
        let mut feats = Vec::with_capacity(chans.len());
        for &c in chans {
            let lg = graph::logeig(self.t, c)?;
            feats.push(self.t.triu_flatten(lg)?);
        }
        let f = self.t.concat(feats)?;
        let z = self.t.matvec(self.p[self.net.head_w], f)?;
        self.t.add(z, self.p[self.net.head_b])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{random_spd, rng};

    fn small_cfg(n: usize) -> NetworkConfig {
        NetworkConfig {
            input_dim: n,
            classes: 3,
            cells: vec![
                CellConfig { kind: CellKind::Reduction, dim: Some(n / 2) },
                CellConfig { kind: CellKind::Normal, dim: None },
            ],
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn logits_shape_and_channels() {
        let cfg = small_cfg(8);
        let net = Network::supernet(&cfg, Activation::Sparsemax, 1).unwrap();
        let mut r = rng(1);
        let xs: Vec<_> = (0..4).map(|_| random_spd(&mut r, 8, 10.0)).collect();
        let refs: Vec<&SpdMatrix<f64>> = xs.iter().collect();
        let mut t = Tape::new();
        let p = net.bind(&mut t);
        let fp = net.forward(&mut t, &p, &refs, Some(&[0, 1, 2, 0]), BnMode::Train).unwrap();
        assert_eq!(fp.logits.len(), 4);
        assert_eq!(t.value(fp.logits[0]).shape(), (3, 1));
        assert!(t.scalar(fp.loss.unwrap()).is_finite());
        // 2 cells × 2 intermediate nodes × 1 channel × 4 samples
        assert_eq!(fp.node_values.len(), 16);
    }

    #[test]
    fn config_problems_are_collected() {
        let cfg = NetworkConfig {
            classes: 1,
            channels: 0,
            pool_kernel: 3,
            ..NetworkConfig::default()
        };
        assert_eq!(cfg.problems().len(), 3);
        assert!(matches!(
            Network::supernet(&cfg, Activation::Sparsemax, 0).unwrap_err(),
            Error::Config(_)
        ));
    }

    #[test]
    fn dimension_chain_break_fails_at_construction() {
        let cfg = NetworkConfig {
            input_dim: 20,
            cells: vec![CellConfig { kind: CellKind::Reduction, dim: Some(9) }],
            ..NetworkConfig::default()
        };
        // odd target: Skip_reduced cannot split it
        assert!(matches!(
            Network::supernet(&cfg, Activation::Sparsemax, 0).unwrap_err(),
            Error::Config(_)
        ));
    }
}
