use spdnas::bilevel::{
    batch_gradients, evaluate, load_checkpoint, save_checkpoint, search_loop, train_loop, OptState, Order,
    SearchConfig, TrainConfig,
};
use spdnas::data::{split, synth_generate, Sample, SplitSpec, Splits, SynthConfig};
use spdnas::layers::BnMode;
use spdnas::linalg::Mat;
use spdnas::search_space::{CellConfig, CellKind, Network, NetworkConfig, ParamKind};
use spdnas::simplex::Activation;

fn small_config() -> NetworkConfig {
    NetworkConfig {
        input_dim: 8,
        classes: 3,
        cells: vec![
            CellConfig { kind: CellKind::Reduction, dim: Some(4) },
            CellConfig { kind: CellKind::Normal, dim: None },
        ],
        nodes: 4,
        ..Default::default()
    }
}

fn small_data(seed: u64) -> Splits {
    let cfg = SynthConfig { classes: 3, dim: 8, per_class: 16, noise: 0.3 };
    split(&synth_generate(&cfg, seed).unwrap(), &SplitSpec::default(), seed).unwrap()
}

fn search_config(epochs: usize) -> SearchConfig {
    SearchConfig { epochs, batch_size: 12, ..Default::default() }
}

fn refs(s: &[Sample]) -> Vec<&Sample> {
    s.iter().collect()
}

#[test]
fn zero_epoch_search_keeps_initial_logits() {
    let d = small_data(0);
    let mut net = Network::supernet(&small_config(), Activation::Sparsemax, 1).unwrap();
    let before = net.alphas();
    let out = search_loop(&mut net, &d.train, &d.val, &search_config(0), 1).unwrap();
    assert_eq!(net.alphas(), before);
    assert!(out.metrics.is_empty());
    assert!(out.alpha_history.iter().all(|r| r.epoch == 0));
    out.genotype.check(&net.specs(), 2).unwrap();
}

#[test]
fn search_is_deterministic_and_moves_logits() {
    let d = small_data(3);
    let run = || {
        let mut net = Network::supernet(&small_config(), Activation::Sparsemax, 5).unwrap();
        let out = search_loop(&mut net, &d.train, &d.val, &search_config(1), 5).unwrap();
        (net.alphas(), out.alpha_history, out.genotype, out.metrics)
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
    let start = Network::supernet(&small_config(), Activation::Sparsemax, 5).unwrap().alphas();
    assert_ne!(a.0, start);
    assert_eq!(a.3.len(), 1);
}

#[test]
fn first_order_search_runs() {
    let d = small_data(4);
    let mut net = Network::supernet(&small_config(), Activation::Softmax, 2).unwrap();
    let cfg = SearchConfig { order: Order::First, ..search_config(1) };
    let out = search_loop(&mut net, &d.train, &d.val, &cfg, 2).unwrap();
    assert_eq!(out.skipped_second_order, 0);
    assert!(out.metrics[0].train_loss.is_finite());
}

fn loss(net: &Network, batch: &[&Sample]) -> f64 {
    batch_gradients(net, batch, BnMode::Train, false).unwrap().loss
}

#[test]
fn small_step_against_logit_gradient_lowers_loss() {
    let d = small_data(6);
    let net = Network::supernet(&small_config(), Activation::Softmax, 3).unwrap();
    let batch = refs(&d.val);
    let ev = batch_gradients(&net, &batch, BnMode::Train, false).unwrap();
    let mut moved = net.clone();
    let mut sq = 0.0;
    for (p, g) in moved.params_mut().iter_mut().zip(&ev.grads) {
        if p.kind == ParamKind::Alpha {
            sq += g.as_slice().iter().map(|x| x * x).sum::<f64>();
            p.value = &p.value - &g.scale(1e-4);
        }
    }
    assert!(sq > 0.0);
    let after = loss(&moved, &batch);
    assert!(after < ev.loss, "{after} >= {}", ev.loss);
    // first-order prediction of the decrease
    let predicted = 1e-4 * sq;
    assert!(((ev.loss - after) - predicted).abs() <= 0.05 * predicted);
}

#[test]
fn repeated_small_weight_steps_do_not_increase_loss() {
    let d = small_data(7);
    let cfg = small_config();
    let genotype = Network::supernet(&cfg, Activation::Sparsemax, 0).unwrap().derive_genotype().unwrap();
    let mut net = Network::discrete(&cfg, &genotype, Activation::Sparsemax, 4).unwrap();
    let batch = refs(&d.train[..12]);
    let kinds: Vec<ParamKind> = net.params().iter().map(|p| p.kind).collect();
    let shapes: Vec<(usize, usize)> = net.params().iter().map(|p| p.value.shape()).collect();
    let mut opt = OptState::new(&kinds, &shapes, Default::default());
    let mut last = f64::INFINITY;
    for _ in 0..5 {
        let ev = batch_gradients(&net, &batch, BnMode::Train, false).unwrap();
        assert!(ev.loss <= last + 1e-12, "{} > {last}", ev.loss);
        last = ev.loss;
        let mut v: Vec<Mat<f64>> = net.params().iter().map(|p| p.value.clone()).collect();
        opt.weight_step(&mut v, &kinds, &ev.grads, 1e-3, 0.0).unwrap();
        for (p, x) in net.params_mut().iter_mut().zip(v) {
            p.value = x;
        }
    }
}

#[test]
fn untrained_network_is_near_chance_and_training_helps() {
    let d = small_data(8);
    let cfg = small_config();
    let genotype = Network::supernet(&cfg, Activation::Sparsemax, 0).unwrap().derive_genotype().unwrap();
    let mut net = Network::discrete(&cfg, &genotype, Activation::Sparsemax, 9).unwrap();
    let zero = train_loop(&mut net, &d.train, &d.val, &d.test, &TrainConfig { epochs: 0, ..Default::default() }, 9)
        .unwrap();
    assert!(zero.metrics.is_empty());
    assert!((zero.test.loss - 3f64.ln()).abs() < 0.5, "initial loss {}", zero.test.loss);
    let tc = TrainConfig { epochs: 15, batch_size: 8, ..Default::default() };
    let out = train_loop(&mut net, &d.train, &d.val, &d.test, &tc, 9).unwrap();
    assert_eq!(out.metrics.len(), 15);
    assert!(out.test.loss < zero.test.loss);
}

#[test]
fn checkpoint_roundtrip_reproduces_predictions() {
    let d = small_data(10);
    let cfg = small_config();
    let genotype = Network::supernet(&cfg, Activation::Sparsemax, 0).unwrap().derive_genotype().unwrap();
    let mut net = Network::discrete(&cfg, &genotype, Activation::Sparsemax, 11).unwrap();
    let tc = TrainConfig { epochs: 2, batch_size: 8, ..Default::default() };
    train_loop(&mut net, &d.train, &d.val, &d.test, &tc, 11).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    save_checkpoint(&path, &net).unwrap();
    let mut fresh = Network::discrete(&cfg, &genotype, Activation::Sparsemax, 999).unwrap();
    load_checkpoint(&path, &mut fresh).unwrap();
    assert_eq!(fresh.params(), net.params());
    assert_eq!(evaluate(&fresh, &d.test).unwrap(), evaluate(&net, &d.test).unwrap());

    let mut wrong = Network::supernet(&cfg, Activation::Sparsemax, 0).unwrap();
    assert!(load_checkpoint(&path, &mut wrong).is_err());
}
