//! Finite-difference checks of every custom block's backward pass.
//!
//! The objective is a fixed random linear functional of the block output, so
//! its gradient w.r.t. the output is a constant tensor and central
//! differences over inputs/parameters probe the full chain rule.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use visafe_core::blocks::{Block, C3GhostConfig, EmaConfig, GhostConvConfig};
use visafe_core::graph::exec::{backward, forward, Mode};
use visafe_core::graph::ModelGraph;
use visafe_core::Tensor;

struct Probe {
    graph: ModelGraph,
    sink: usize,
    weights: Tensor,
}

impl Probe {
    fn new(graph: ModelGraph, x: &Tensor, seed: u64) -> Self {
        let sink = *graph.sink_indices().last().unwrap();
        let acts = forward(&graph, x, Mode::Train).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = Tensor::rand_uniform(acts.out(sink).shape(), -1.0, 1.0, &mut rng);
        Self { graph, sink, weights }
    }

    fn objective(&self, x: &Tensor) -> f64 {
        let acts = forward(&self.graph, x, Mode::Train).unwrap();
        acts.out(self.sink)
            .data()
            .iter()
            .zip(self.weights.data().iter())
            .map(|(y, w)| y * w)
            .sum()
    }

    fn objective_with(&self, x: &Tensor, layer: &str, pname: &str, values: &Tensor) -> f64 {
        let mut g = self.graph.clone();
        g.layer_mut(layer).unwrap().param_mut(pname).unwrap().values = values.clone();
        let acts = forward(&g, x, Mode::Train).unwrap();
        acts.out(self.sink)
            .data()
            .iter()
            .zip(self.weights.data().iter())
            .map(|(y, w)| y * w)
            .sum()
    }

    fn analytic(&self, x: &Tensor) -> (Tensor, Vec<Vec<Tensor>>) {
        let acts = forward(&self.graph, x, Mode::Train).unwrap();
        let grads = backward(&self.graph, &acts, vec![(self.sink, self.weights.clone())]).unwrap();
        (grads.input.expect("input gradient"), grads.params)
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Max relative error of the analytic input gradient vs central differences.
fn check_input_grad(probe: &Probe, x: &Tensor) -> f64 {
    let (gx, _) = probe.analytic(x);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let fd = (probe.objective(&xp) - probe.objective(&xm)) / (2.0 * h);
        worst = worst.max(rel_err(fd, gx.data()[i]));
    }
    worst
}

/// Max relative error over every parameter of every layer.
fn check_param_grads(probe: &Probe, x: &Tensor) -> f64 {
    let (_, gp) = probe.analytic(x);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (li, layer) in probe.graph.layers().iter().enumerate() {
        for (pi, p) in layer.params.iter().enumerate() {
            if !p.learnable {
                continue;
            }
            for i in 0..p.values.numel() {
                let mut vp = p.values.clone();
                vp.data_mut()[i] += h;
                let mut vm = p.values.clone();
                vm.data_mut()[i] -= h;
                let fp = probe.objective_with(x, &layer.name, &p.name, &vp);
                let fm = probe.objective_with(x, &layer.name, &p.name, &vm);
                let fd = (fp - fm) / (2.0 * h);
                worst = worst.max(rel_err(fd, gp[li][pi].data()[i]));
            }
        }
    }
    worst
}

#[test]
fn ghost_conv_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let cfg = GhostConvConfig::new(3, 8, 3, 1);
    let block = Block::ghost_conv(&cfg, true, &mut rng).unwrap();
    let x = Tensor::randn([2, 3, 4, 4], 1.0, &mut rng);
    let probe = Probe::new(block.graph().clone(), &x, 1);
    let ein = check_input_grad(&probe, &x);
    let epar = check_param_grads(&probe, &x);
    assert!(ein <= 1e-3, "input grad rel err {ein}");
    assert!(epar <= 1e-3, "param grad rel err {epar}");
}

#[test]
fn c3ghost_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = C3GhostConfig::new(8, 1);
    let block = Block::c3ghost(&cfg, &mut rng).unwrap();
    let x = Tensor::randn([1, 8, 4, 4], 1.0, &mut rng);
    let probe = Probe::new(block.graph().clone(), &x, 2);
    let ein = check_input_grad(&probe, &x);
    assert!(ein <= 1e-3, "input grad rel err {ein}");
}

#[test]
fn ema_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = EmaConfig { channels: 8, groups: 2 };
    let block = Block::ema(&cfg, &mut rng).unwrap();
    let x = Tensor::randn([2, 8, 4, 4], 1.0, &mut rng);
    let probe = Probe::new(block.graph().clone(), &x, 3);
    let ein = check_input_grad(&probe, &x);
    let epar = check_param_grads(&probe, &x);
    assert!(ein <= 1e-3, "input grad rel err {ein}");
    assert!(epar <= 1e-3, "param grad rel err {epar}");
}

#[test]
fn linear_and_gap_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut b = visafe_core::graph::GraphBuilder::new(&mut rng);
    let img = b.input("x", 4);
    let c = b.conv_bn_silu("c", &img, 6, 3, 2);
    let g = b.global_avg_pool("gap", &c);
    let f = b.linear("fc", &g, 5, true);
    b.sigmoid("out", &f);
    let graph = b.finish();
    let x = Tensor::randn([2, 4, 5, 5], 1.0, &mut rng);
    let probe = Probe::new(graph, &x, 4);
    let ein = check_input_grad(&probe, &x);
    let epar = check_param_grads(&probe, &x);
    assert!(ein <= 1e-3, "input grad rel err {ein}");
    assert!(epar <= 1e-3, "param grad rel err {epar}");
}
