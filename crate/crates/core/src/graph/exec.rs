//! Graph execution: forward pass with saved per-layer context, and reverse
//! accumulation of parameter and input gradients.
//!
//! The graph itself stays immutable during a forward pass; batch-norm batch
//! statistics are returned in [`Activations`] and committed to the running
//! buffers explicitly via [`commit_running_stats`].

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::ema::{self, EmaCtx, EmaParams};
use super::kernels as k;
use super::{LayerKind, ModelGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Normalization uses batch statistics.
    Train,
    /// Normalization uses running statistics.
    Eval,
}

pub(crate) enum Aux {
    None,
    Bn(k::BnStats),
    Ema(Box<EmaCtx>),
}

pub struct Activations {
    outs: Vec<Tensor>,
    aux: Vec<Aux>,
    mode: Mode,
}

impl Activations {
    pub fn out(&self, idx: usize) -> &Tensor {
        &self.outs[idx]
    }

    pub fn by_name<'a>(&'a self, graph: &ModelGraph, name: &str) -> Result<&'a Tensor> {
        let idx = graph
            .index_of(name)
            .ok_or_else(|| Error::Graph(format!("no layer named '{name}'")))?;
        Ok(&self.outs[idx])
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }
}

fn ema_params(layer: &super::Layer) -> Result<EmaParams<'_>> {
    let get = |n: &str| {
        layer
            .param(n)
            .map(|p| &p.values)
            .ok_or_else(|| Error::Graph(format!("ema layer '{}' missing param '{n}'", layer.name)))
    };
    Ok(EmaParams {
        w1: get("w1")?,
        b1: get("b1")?,
        w3: get("w3")?,
        b3: get("b3")?,
        gn_gamma: get("gn_gamma")?,
        gn_beta: get("gn_beta")?,
    })
}

pub fn forward(graph: &ModelGraph, input: &Tensor, mode: Mode) -> Result<Activations> {
    if !input.is_all_finite() {
        return Err(Error::Input("non-finite values in graph input".into()));
    }
    let mut outs: Vec<Tensor> = Vec::with_capacity(graph.len());
    let mut aux: Vec<Aux> = Vec::with_capacity(graph.len());
    for layer in graph.layers() {
        let ins: Vec<usize> = layer.inbound.iter().map(|n| graph.index_of(n).unwrap()).collect();
        let (out, a) = match &layer.kind {
            LayerKind::Input { channels } => {
                if input.channels() != *channels {
                    return Err(Error::Input(format!(
                        "input has {} channels, graph expects {}",
                        input.channels(),
                        channels
                    )));
                }
                (input.clone(), Aux::None)
            }
            LayerKind::Conv2d { stride, groups, bias, .. } => {
                let w = &layer.param("weight").unwrap().values;
                let b = if *bias { layer.param("bias").map(|p| &p.values) } else { None };
                (k::conv2d_forward(&outs[ins[0]], w, b, *stride, *groups), Aux::None)
            }
            LayerKind::BatchNorm { .. } => {
                let gamma = &layer.param("gamma").unwrap().values;
                let beta = &layer.param("beta").unwrap().values;
                match mode {
                    Mode::Train => {
                        let (y, stats) = k::bn_forward_train(&outs[ins[0]], gamma, beta);
                        (y, Aux::Bn(stats))
                    }
                    Mode::Eval => {
                        let rm = &layer.param("running_mean").unwrap().values;
                        let rv = &layer.param("running_var").unwrap().values;
                        (k::bn_forward_eval(&outs[ins[0]], gamma, beta, rm, rv), Aux::None)
                    }
                }
            }
            LayerKind::Silu => (k::silu_forward(&outs[ins[0]]), Aux::None),
            LayerKind::Sigmoid => (k::sigmoid_forward(&outs[ins[0]]), Aux::None),
            LayerKind::Add => {
                let mut acc = outs[ins[0]].clone();
                for &i in &ins[1..] {
                    acc.add_in_place(&outs[i]);
                }
                (acc, Aux::None)
            }
            LayerKind::Concat => {
                let first = &outs[ins[0]];
                let [n, _, h, w] = first.shape();
                let total: usize = ins.iter().map(|&i| outs[i].channels()).sum();
                let mut out = Tensor::zeros([n, total, h, w]);
                let plane = h * w;
                for bi in 0..n {
                    let mut coff = 0;
                    for &i in &ins {
                        let src = &outs[i];
                        let c = src.channels();
                        let from = (bi * c) * plane;
                        let to = (bi * total + coff) * plane;
                        out.data_mut()[to..to + c * plane]
                            .copy_from_slice(&src.data()[from..from + c * plane]);
                        coff += c;
                    }
                }
                (out, Aux::None)
            }
            LayerKind::GlobalAvgPool => (k::global_avg_pool_forward(&outs[ins[0]]), Aux::None),
            LayerKind::Linear { bias, .. } => {
                let w = &layer.param("weight").unwrap().values;
                let b = if *bias { layer.param("bias").map(|p| &p.values) } else { None };
                (k::linear_forward(&outs[ins[0]], w, b), Aux::None)
            }
            LayerKind::Ema { groups, .. } => {
                let p = ema_params(layer)?;
                let (y, ctx) = ema::forward(&outs[ins[0]], *groups, &p);
                (y, Aux::Ema(Box::new(ctx)))
            }
        };
        outs.push(out);
        aux.push(a);
    }
    Ok(Activations { outs, aux, mode })
}

/// Fold the batch statistics recorded in `acts` into the graph's running
/// mean/variance buffers. Call once per optimizer step.
pub fn commit_running_stats(graph: &mut ModelGraph, acts: &Activations) {
    for (idx, a) in acts.aux.iter().enumerate() {
        if let Aux::Bn(stats) = a {
            let layer = &mut graph.layers_mut()[idx];
            // split-borrow the two buffers
            let mut rm = layer.param("running_mean").unwrap().values.clone();
            let mut rv = layer.param("running_var").unwrap().values.clone();
            k::bn_update_running(&mut rm, &mut rv, stats);
            layer.param_mut("running_mean").unwrap().values = rm;
            layer.param_mut("running_var").unwrap().values = rv;
        }
    }
}

/// Gradients aligned with the graph: `params[layer][param]` matches each
/// layer's parameter list; `input` is the gradient at the graph input.
pub struct Gradients {
    pub params: Vec<Vec<Tensor>>,
    pub input: Option<Tensor>,
}

impl Gradients {
    pub fn zeros_like(graph: &ModelGraph) -> Self {
        let params = graph
            .layers()
            .iter()
            .map(|l| l.params.iter().map(|p| Tensor::zeros(p.values.shape())).collect())
            .collect();
        Self { params, input: None }
    }

    pub fn add_scaled(&mut self, other: &Gradients, s: f64) {
        for (a, b) in self.params.iter_mut().zip(other.params.iter()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                for (u, v) in x.data_mut().iter_mut().zip(y.data().iter()) {
                    *u += s * v;
                }
            }
        }
    }
}

/// Reverse pass. `seeds` lists `(layer index, gradient at that layer's
/// output)`; gradients flow back to every parameter and the graph input.
pub fn backward(graph: &ModelGraph, acts: &Activations, seeds: Vec<(usize, Tensor)>) -> Result<Gradients> {
    let n = graph.len();
    let mut out_grads: Vec<Option<Tensor>> = vec![None; n];
    for (idx, g) in seeds {
        if g.shape() != acts.outs[idx].shape() {
            return Err(Error::Graph(format!(
                "seed gradient shape {:?} does not match activation {:?}",
                g.shape(),
                acts.outs[idx].shape()
            )));
        }
        match &mut out_grads[idx] {
            Some(acc) => acc.add_in_place(&g),
            slot => *slot = Some(g),
        }
    }

    let mut grads = Gradients::zeros_like(graph);
    let mut input_grad: Option<Tensor> = None;

    for idx in (0..n).rev() {
        let go = match out_grads[idx].take() {
            Some(g) => g,
            None => continue,
        };
        let layer = &graph.layers()[idx];
        let ins: Vec<usize> = layer.inbound.iter().map(|nm| graph.index_of(nm).unwrap()).collect();
        let push = |slot: usize, g: Tensor, out_grads: &mut Vec<Option<Tensor>>| match &mut out_grads[slot] {
            Some(acc) => acc.add_in_place(&g),
            s => *s = Some(g),
        };

        match &layer.kind {
            LayerKind::Input { .. } => match &mut input_grad {
                Some(acc) => acc.add_in_place(&go),
                slot => *slot = Some(go),
            },
            LayerKind::Conv2d { stride, groups, bias, .. } => {
                let w = &layer.param("weight").unwrap().values;
                let x = &acts.outs[ins[0]];
                let (gx, gw, gb) = k::conv2d_backward(x, w, *stride, *groups, *bias, &go);
                grads.params[idx][0].add_in_place(&gw);
                if let Some(gb) = gb {
                    grads.params[idx][1].add_in_place(&gb);
                }
                push(ins[0], gx, &mut out_grads);
            }
            LayerKind::BatchNorm { .. } => {
                let gamma = &layer.param("gamma").unwrap().values;
                let x = &acts.outs[ins[0]];
                let (gx, gg, gb) = match (&acts.aux[idx], acts.mode) {
                    (Aux::Bn(stats), _) => k::bn_backward_train(x, gamma, stats, &go),
                    (_, Mode::Eval) => {
                        let rm = &layer.param("running_mean").unwrap().values;
                        let rv = &layer.param("running_var").unwrap().values;
                        k::bn_backward_eval(x, gamma, rm, rv, &go)
                    }
                    _ => return Err(Error::Graph("missing batchnorm context".into())),
                };
                grads.params[idx][0].add_in_place(&gg);
                grads.params[idx][1].add_in_place(&gb);
                push(ins[0], gx, &mut out_grads);
            }
            LayerKind::Silu => {
                let gx = k::silu_backward(&acts.outs[ins[0]], &go);
                push(ins[0], gx, &mut out_grads);
            }
            LayerKind::Sigmoid => {
                let gx = k::sigmoid_backward(&acts.outs[idx], &go);
                push(ins[0], gx, &mut out_grads);
            }
            LayerKind::Add => {
                for &i in &ins {
                    push(i, go.clone(), &mut out_grads);
                }
            }
            LayerKind::Concat => {
                let [n_b, _, h, w] = go.shape();
                let plane = h * w;
                let total = go.channels();
                let mut coff = 0;
                for &i in &ins {
                    let c = acts.outs[i].channels();
                    let mut g = Tensor::zeros(acts.outs[i].shape());
                    for bi in 0..n_b {
                        let from = (bi * total + coff) * plane;
                        let to = (bi * c) * plane;
                        g.data_mut()[to..to + c * plane]
                            .copy_from_slice(&go.data()[from..from + c * plane]);
                    }
                    coff += c;
                    push(i, g, &mut out_grads);
                }
            }
            LayerKind::GlobalAvgPool => {
                let gx = k::global_avg_pool_backward(acts.outs[ins[0]].shape(), &go);
                push(ins[0], gx, &mut out_grads);
            }
            LayerKind::Linear { bias, .. } => {
                let w = &layer.param("weight").unwrap().values;
                let x = &acts.outs[ins[0]];
                let (gx, gw, gb) = k::linear_backward(x, w, *bias, &go);
                grads.params[idx][0].add_in_place(&gw);
                if let Some(gb) = gb {
                    grads.params[idx][1].add_in_place(&gb);
                }
                push(ins[0], gx, &mut out_grads);
            }
            LayerKind::Ema { groups, .. } => {
                let p = ema_params(layer)?;
                let ctx = match &acts.aux[idx] {
                    Aux::Ema(ctx) => ctx,
                    _ => return Err(Error::Graph("missing ema context".into())),
                };
                let g = ema::backward(&acts.outs[ins[0]], *groups, &p, ctx, &go);
                // params order: w1, b1, w3, b3, gn_gamma, gn_beta
                grads.params[idx][0].add_in_place(&g.gw1);
                grads.params[idx][1].add_in_place(&g.gb1);
                grads.params[idx][2].add_in_place(&g.gw3);
                grads.params[idx][3].add_in_place(&g.gb3);
                grads.params[idx][4].add_in_place(&g.ggamma);
                grads.params[idx][5].add_in_place(&g.gbeta);
                push(ins[0], g.gx, &mut out_grads);
            }
        }
    }
    grads.input = input_grad;
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphBuilder;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_graph() -> ModelGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut b = GraphBuilder::new(&mut rng);
        let img = b.input("img", 2);
        let c = b.conv_bn_silu("c1", &img, 4, 3, 1);
        let g = b.global_avg_pool("gap", &c);
        b.linear("fc", &g, 3, true);
        b.finish()
    }

    #[test]
    fn forward_and_backward_run() {
        let graph = tiny_graph();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn([2, 2, 6, 6], 1.0, &mut rng);
        let acts = forward(&graph, &x, Mode::Train).unwrap();
        let fc = graph.index_of("fc").unwrap();
        assert_eq!(acts.out(fc).shape(), [2, 3, 1, 1]);
        let seed = Tensor::filled([2, 3, 1, 1], 1.0);
        let grads = backward(&graph, &acts, vec![(fc, seed)]).unwrap();
        assert!(grads.input.is_some());
        assert!(grads.params[graph.index_of("c1.conv").unwrap()][0]
            .data()
            .iter()
            .any(|v| *v != 0.0));
    }

    #[test]
    fn eval_uses_running_stats() {
        let graph = tiny_graph();
        let x = Tensor::filled([1, 2, 4, 4], 0.7);
        let train = forward(&graph, &x, Mode::Train).unwrap();
        let eval = forward(&graph, &x, Mode::Eval).unwrap();
        let idx = graph.index_of("c1.bn").unwrap();
        // constant input has zero batch variance, so the two modes disagree
        assert!(train.out(idx).max_abs_diff(eval.out(idx)) > 1e-6);
    }
}
