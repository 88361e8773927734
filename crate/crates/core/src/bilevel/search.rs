use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{hypergradient, OptState, Order, SearchConfig, TrainConfig};
use crate::data::{batches, Sample};
use crate::error::{Error, Result};
use crate::layers::BnMode;
use crate::linalg::{sym_eig_unchecked, Mat};
use crate::manifold::SpdMatrix;
use crate::search_space::{Network, ParamKind};
use crate::search_space::{CellKind, Genotype};
use crate::tape::Tape;

/// Loss, accuracy and gradients of one train-mode batch.
#[derive(Clone, Debug)]
pub struct BatchEval {
    pub loss: f64,
    pub correct: usize,
    /// One per network parameter, in parameter order.
    pub grads: Vec<Mat<f64>>,
    pub bn_updates: Vec<(usize, SpdMatrix<f64>)>,
    /// Smallest eigenvalue over every cell node, when requested.
    pub min_node_eig: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

/// Architecture logits of one edge after an epoch (epoch 0 is the start).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaRecord {
    pub epoch: usize,
    pub kind: CellKind,
    pub edge: usize,
    pub logits: Vec<f64>,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub alpha_history: Vec<AlphaRecord>,
    pub genotype: Genotype,
    pub metrics: Vec<EpochMetrics>,
    /// Steps whose finite-difference term was skipped for a vanishing gradient.
    pub skipped_second_order: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub test: EvalMetrics,
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

fn xent(z: &[f64], label: usize) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    lse - z[label]
}

pub fn batch_gradients(net: &Network, batch: &[&Sample], mode: BnMode, check_spd: bool) -> Result<BatchEval> {
    let mut t = Tape::new();
    let leaves = net.bind(&mut t);
    let xs: Vec<&SpdMatrix<f64>> = batch.iter().map(|s| &s.matrix).collect();
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let pass = net.forward(&mut t, &leaves, &xs, Some(&labels), mode)?;
    let loss_id = pass.loss.expect("labels were given");
    let loss = t.scalar(loss_id);
    let correct = pass
        .logits
        .iter()
        .zip(&labels)
        .filter(|(&z, &y)| argmax(t.value(z).as_slice()) == y)
        .count();
    let min_node_eig = check_spd.then(|| {
        pass.node_values
            .iter()
            .map(|&id| sym_eig_unchecked(t.value(id)).min_value())
            .fold(f64::INFINITY, f64::min)
    });
    if !loss.is_finite() {
        return Ok(BatchEval {
            loss,
            correct,
            grads: Vec::new(),
            bn_updates: pass.bn_updates,
            min_node_eig,
        });
    }
    let g = t.backward(loss_id)?;
    let grads = leaves.iter().map(|&id| g.wrt(&t, id)).collect();
    Ok(BatchEval {
        loss,
        correct,
        grads,
        bn_updates: pass.bn_updates,
        min_node_eig,
    })
}

/// Eval-mode loss and accuracy; samples are independent so they fan out
/// across workers, and results are reduced in sample order.
pub fn evaluate(net: &Network, samples: &[Sample]) -> Result<EvalMetrics> {
    if samples.is_empty() {
        return Ok(EvalMetrics::default());
    }
    let per: Vec<(f64, bool)> = samples
        .par_chunks(4)
        .map(|chunk| {
            let mut t = Tape::new();
            let leaves = net.bind(&mut t);
            let xs: Vec<&SpdMatrix<f64>> = chunk.iter().map(|s| &s.matrix).collect();
            let pass = net.forward(&mut t, &leaves, &xs, None, BnMode::Eval)?;
            Ok(pass
                .logits
                .iter()
                .zip(chunk)
                .map(|(&z, s)| {
                    let z = t.value(z).as_slice();
                    (xent(z, s.label), argmax(z) == s.label)
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let n = per.len() as f64;
    Ok(EvalMetrics {
        loss: per.iter().map(|p| p.0).sum::<f64>() / n,
        accuracy: per.iter().filter(|p| p.1).count() as f64 / n,
        count: per.len(),
    })
}

fn values(net: &Network) -> Vec<Mat<f64>> {
    net.params().iter().map(|p| p.value.clone()).collect()
}

fn set_values(net: &mut Network, values: Vec<Mat<f64>>) {
    for (p, v) in net.params_mut().iter_mut().zip(values) {
        p.value = v;
    }
}

fn with_values(net: &Network, v: &[Mat<f64>]) -> Network {
    let mut n = net.clone();
    set_values(&mut n, v.to_vec());
    n
}

fn kinds(net: &Network) -> Vec<ParamKind> {
    net.params().iter().map(|p| p.kind).collect()
}

fn shapes(net: &Network) -> Vec<(usize, usize)> {
    net.params().iter().map(|p| p.value.shape()).collect()
}

fn finite(loss: f64, what: &str, epoch: usize, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} loss is {loss} at epoch {}, step {step}", epoch + 1)))
    }
}

fn pick<'a>(samples: &'a [Sample], idx: &[usize]) -> Vec<&'a Sample> {
    idx.iter().map(|&i| &samples[i]).collect()
}

fn alpha_records(net: &Network, epoch: usize) -> Result<Vec<AlphaRecord>> {
    let act = net.activation();
    let mut out = Vec::new();
    for a in net.alphas() {
        for (edge, z) in a.edges.iter().enumerate() {
            out.push(AlphaRecord {
                epoch,
                kind: a.kind,
                edge,
                logits: z.clone(),
                weights: act.apply(z)?,
            });
        }
    }
    Ok(out)
}

/// One weight step on a train-mode batch: gradients, batchnorm running
/// means, then the parameter update.
fn weight_update(
    net: &mut Network,
    opt: &mut OptState,
    batch: &[&Sample],
    lr: f64,
    momentum: f64,
    check_spd: bool,
    epoch: usize,
    step: usize,
) -> Result<BatchEval> {
    let ev = batch_gradients(net, batch, BnMode::Train, check_spd)?;
    finite(ev.loss, "training", epoch, step)?;
    if let Some(m) = ev.min_node_eig {
        if !(m > 0.0) {
            return Err(Error::Numeric(format!(
                "non-SPD cell node (smallest eigenvalue {m:e}) at epoch {}, step {step}",
                epoch + 1
            )));
        }
    }
    net.apply_bn_updates(&ev.bn_updates)?;
    let k = kinds(net);
    let mut v = values(net);
    opt.weight_step(&mut v, &k, &ev.grads, lr, momentum)?;
    set_values(net, v);
    Ok(ev)
}

/// Alternates an architecture step on a validation batch with a weight
/// step on a training batch, then derives the genotype.
pub fn search_loop(
    net: &mut Network,
    train: &[Sample],
    val: &[Sample],
    cfg: &SearchConfig,
    seed: u64,
) -> Result<SearchOutcome> {
    if !net.is_supernet() {
        return Err(Error::contract("search needs a supernet"));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::contract("search needs nonempty training and validation splits"));
    }
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(Error::config(problems.join("; ")));
    }
    let k = kinds(net);
    let mut opt = OptState::new(&k, &shapes(net), cfg.alpha);
    let mut history = alpha_records(net, 0)?;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut skipped = 0;
    let eta = match cfg.order {
        Order::First => 0.0,
        Order::Second => cfg.weight_lr,
    };
    for epoch in 0..cfg.epochs {
        opt.epoch = epoch;
        let tb = batches(train.len(), cfg.batch_size, seed, "search/train", epoch)?;
        let vb = batches(val.len(), cfg.batch_size, seed, "search/val", epoch)?;
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0, 0);
        for (step, tidx) in tb.iter().enumerate() {
            let tbatch = pick(train, tidx);
            let vbatch = pick(val, &vb[step % vb.len()]);
            let snapshot: &Network = net;
            let train_grads = |v: &[Mat<f64>]| -> Result<(f64, Vec<Mat<f64>>)> {
                let e = batch_gradients(&with_values(snapshot, v), &tbatch, BnMode::Train, false)?;
                finite(e.loss, "perturbed training", epoch, step)?;
                Ok((e.loss, e.grads))
            };
            let val_grads = |v: &[Mat<f64>]| -> Result<(f64, Vec<Mat<f64>>)> {
                let e = batch_gradients(&with_values(snapshot, v), &vbatch, BnMode::Train, false)?;
                finite(e.loss, "validation", epoch, step)?;
                Ok((e.loss, e.grads))
            };
            let mut v = values(net);
            let h = hypergradient(&v, &k, eta, cfg.delta_norm, train_grads, val_grads)?;
            if eta > 0.0 && h.delta.is_none() {
                skipped += 1;
            }
            opt.alpha_step(&mut v, &k, &h.grads)?;
            if v.iter().zip(&k).any(|(m, kind)| *kind == ParamKind::Alpha && !m.is_finite()) {
                return Err(Error::Numeric(format!(
                    "architecture logits became non-finite at epoch {}, step {step}",
                    epoch + 1
                )));
            }
            set_values(net, v);
            let ev = weight_update(net, &mut opt, &tbatch, cfg.weight_lr, cfg.momentum, step == 0, epoch, step)?;
            loss_sum += ev.loss * tbatch.len() as f64;
            correct += ev.correct;
            seen += tbatch.len();
            opt.step += 1;
        }
        let vm = evaluate(net, val)?;
        let m = EpochMetrics {
            epoch: epoch + 1,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            val_loss: vm.loss,
            val_acc: vm.accuracy,
        };
        log::info!(
            "search epoch {}: train loss {:.4} acc {:.3}, val loss {:.4} acc {:.3}",
            m.epoch,
            m.train_loss,
            m.train_acc,
            m.val_loss,
            m.val_acc
        );
        metrics.push(m);
        history.extend(alpha_records(net, epoch + 1)?);
    }
    Ok(SearchOutcome {
        alpha_history: history,
        genotype: net.derive_genotype()?,
        metrics,
        skipped_second_order: skipped,
    })
}

/// Cross-entropy training of a discrete network, then a test evaluation.
pub fn train_loop(
    net: &mut Network,
    train: &[Sample],
    val: &[Sample],
    test: &[Sample],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    if train.is_empty() && cfg.epochs > 0 {
        return Err(Error::contract("training needs a nonempty training split"));
    }
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(Error::config(problems.join("; ")));
    }
    let k = kinds(net);
    let mut opt = OptState::new(&k, &shapes(net), Default::default());
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        opt.epoch = epoch;
        let tb = batches(train.len(), cfg.batch_size, seed, "train/batches", epoch)?;
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0, 0);
        for (step, idx) in tb.iter().enumerate() {
            let batch = pick(train, idx);
            let ev = weight_update(net, &mut opt, &batch, cfg.lr, cfg.momentum, step == 0, epoch, step)?;
            loss_sum += ev.loss * batch.len() as f64;
            correct += ev.correct;
            seen += batch.len();
            opt.step += 1;
        }
        let vm = evaluate(net, val)?;
        let m = EpochMetrics {
            epoch: epoch + 1,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            val_loss: vm.loss,
            val_acc: vm.accuracy,
        };
        log::info!(
            "train epoch {}: train loss {:.4} acc {:.3}, val loss {:.4} acc {:.3}",
            m.epoch,
            m.train_loss,
            m.train_acc,
            m.val_loss,
            m.val_acc
        );
        metrics.push(m);
    }
    let test = evaluate(net, test)?;
    Ok(TrainOutcome { metrics, test })
}
