//! Lightweight building blocks: ghost convolutions, CSP-style ghost
//! bottlenecks and grouped EMA attention.
//!
//! A ghost convolution produces only `out/ratio` channels with a dense
//! primary convolution and fills the rest with a cheap depthwise transform of
//! the primary output, cutting both parameters and FLOPs roughly in half at
//! ratio 2. Blocks are emitted into a [`GraphBuilder`] so the same code path
//! serves free-standing block tests and full model assembly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::exec::{self, Mode};
use crate::graph::{GraphBuilder, ModelGraph};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GhostConvConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Primary (dense) branch kernel; odd.
    pub kernel: usize,
    pub stride: usize,
    /// Fraction denominator for the primary branch: it produces
    /// `out_channels / ratio` channels, the cheap branch the rest.
    pub ratio: usize,
    /// Depthwise kernel of the cheap branch; odd.
    pub cheap_kernel: usize,
}

impl GhostConvConfig {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self { in_channels, out_channels, kernel, stride, ratio: 2, cheap_kernel: 5 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratio < 2 || self.out_channels % self.ratio != 0 {
            return Err(Error::Config(format!(
                "ghost conv: ratio {} must be >= 2 and divide out_channels {}",
                self.ratio, self.out_channels
            )));
        }
        if self.kernel % 2 == 0 || self.cheap_kernel % 2 == 0 {
            return Err(Error::Config("ghost conv: kernels must be odd".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("ghost conv: stride must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmaConfig {
    pub channels: usize,
    pub groups: usize,
}

impl EmaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.channels % self.groups != 0 {
            return Err(Error::Config(format!(
                "ema: groups {} must divide channels {}",
                self.groups, self.channels
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct C3GhostConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Number of ghost convolutions in the bottleneck chain.
    pub depth: usize,
    /// Wrap the block in `x + f(x)`; requires in == out channels.
    pub residual: bool,
}

impl C3GhostConfig {
    pub fn new(channels: usize, depth: usize) -> Self {
        Self { in_channels: channels, out_channels: channels, depth, residual: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_channels % 2 != 0 {
            return Err(Error::Config("c3ghost: out_channels must be even".into()));
        }
        if self.residual && self.in_channels != self.out_channels {
            return Err(Error::Config(
                "c3ghost: residual requires in_channels == out_channels".into(),
            ));
        }
        if self.depth == 0 {
            return Err(Error::Config("c3ghost: depth must be >= 1".into()));
        }
        Ok(())
    }
}

/// Emit a ghost convolution into the builder; returns the output layer name.
pub fn build_ghost_conv<R: Rng>(
    b: &mut GraphBuilder<'_, R>,
    prefix: &str,
    from: &str,
    cfg: &GhostConvConfig,
    norm: bool,
) -> Result<String> {
    cfg.validate()?;
    if b.channels_of(from) != cfg.in_channels {
        return Err(Error::Config(format!(
            "ghost conv '{prefix}': input has {} channels, config says {}",
            b.channels_of(from),
            cfg.in_channels
        )));
    }
    let primary_c = cfg.out_channels / cfg.ratio;
    let mut p = b.conv(&format!("{prefix}.primary"), from, primary_c, cfg.kernel, cfg.stride, 1, false);
    if norm {
        p = b.bn(&format!("{prefix}.primary_bn"), &p);
    }
    p = b.silu(&format!("{prefix}.primary_act"), &p);
    let mut c = b.depthwise(&format!("{prefix}.cheap"), &p, cfg.cheap_kernel, 1, cfg.ratio - 1);
    if norm {
        c = b.bn(&format!("{prefix}.cheap_bn"), &c);
    }
    c = b.silu(&format!("{prefix}.cheap_act"), &c);
    Ok(b.concat(&format!("{prefix}.out"), &[&p, &c]))
}

/// CSP-style bottleneck with ghost convolutions inside and an optional
/// top-level residual.
pub fn build_c3ghost<R: Rng>(
    b: &mut GraphBuilder<'_, R>,
    prefix: &str,
    from: &str,
    cfg: &C3GhostConfig,
) -> Result<String> {
    cfg.validate()?;
    let hidden = cfg.out_channels / 2;
    let mut chain = build_ghost_conv(
        b,
        &format!("{prefix}.cv1"),
        from,
        &GhostConvConfig::new(cfg.in_channels, hidden, 1, 1),
        true,
    )?;
    for i in 0..cfg.depth {
        chain = build_ghost_conv(
            b,
            &format!("{prefix}.m{i}"),
            &chain,
            &GhostConvConfig::new(hidden, hidden, 3, 1),
            true,
        )?;
    }
    let cv2 = b.conv_bn_silu(&format!("{prefix}.cv2"), from, hidden, 1, 1);
    let cat = b.concat(&format!("{prefix}.cat"), &[&chain, &cv2]);
    let cv3 = b.conv_bn_silu(&format!("{prefix}.cv3"), &cat, cfg.out_channels, 1, 1);
    if cfg.residual {
        Ok(b.add(&format!("{prefix}.add"), &[from, &cv3]))
    } else {
        Ok(cv3)
    }
}

/// Plain convolutional counterpart of [`build_c3ghost`] (dense 3x3 stack),
/// used by the standard backbone variant and the accounting comparisons.
pub fn build_c3_standard<R: Rng>(
    b: &mut GraphBuilder<'_, R>,
    prefix: &str,
    from: &str,
    cfg: &C3GhostConfig,
) -> Result<String> {
    cfg.validate()?;
    let hidden = cfg.out_channels / 2;
    let mut chain = b.conv_bn_silu(&format!("{prefix}.cv1"), from, hidden, 1, 1);
    for i in 0..cfg.depth {
        chain = b.conv_bn_silu(&format!("{prefix}.m{i}"), &chain, hidden, 3, 1);
    }
    let cv2 = b.conv_bn_silu(&format!("{prefix}.cv2"), from, hidden, 1, 1);
    let cat = b.concat(&format!("{prefix}.cat"), &[&chain, &cv2]);
    let cv3 = b.conv_bn_silu(&format!("{prefix}.cv3"), &cat, cfg.out_channels, 1, 1);
    if cfg.residual {
        Ok(b.add(&format!("{prefix}.add"), &[from, &cv3]))
    } else {
        Ok(cv3)
    }
}

fn block_graph<R: Rng, F>(channels: usize, rng: &mut R, build: F) -> Result<ModelGraph>
where
    F: FnOnce(&mut GraphBuilder<'_, R>, &str) -> Result<String>,
{
    let mut b = GraphBuilder::new(rng);
    let input = b.input("x", channels);
    build(&mut b, &input)?;
    Ok(b.finish())
}

/// A free-standing block: a tiny graph with one input and one output, used by
/// block-level contracts and gradient checks.
pub struct Block {
    graph: ModelGraph,
}

impl Block {
    pub fn ghost_conv(cfg: &GhostConvConfig, norm: bool, rng: &mut impl Rng) -> Result<Self> {
        let graph = block_graph(cfg.in_channels, rng, |b, input| {
            build_ghost_conv(b, "ghost", input, cfg, norm)
        })?;
        Ok(Self { graph })
    }

    pub fn c3ghost(cfg: &C3GhostConfig, rng: &mut impl Rng) -> Result<Self> {
        let graph = block_graph(cfg.in_channels, rng, |b, input| build_c3ghost(b, "c3g", input, cfg))?;
        Ok(Self { graph })
    }

    pub fn ema(cfg: &EmaConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let graph = block_graph(cfg.channels, rng, |b, input| {
            Ok(b.ema("ema", input, cfg.groups))
        })?;
        Ok(Self { graph })
    }

    pub fn graph(&self) -> &ModelGraph {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut ModelGraph {
        &mut self.graph
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let acts = exec::forward(&self.graph, x, Mode::Train)?;
        let sink = *self.graph.sink_indices().last().unwrap();
        Ok(acts.out(sink).clone())
    }
}

/// Ghost convolution forward with freshly initialized weights.
pub fn ghost_conv_forward(x: &Tensor, cfg: &GhostConvConfig, rng: &mut impl Rng) -> Result<Tensor> {
    if x.channels() != cfg.in_channels {
        return Err(Error::Config(format!(
            "ghost conv expects {} input channels, got {}",
            cfg.in_channels,
            x.channels()
        )));
    }
    Block::ghost_conv(cfg, true, rng)?.forward(x)
}

/// Ghost bottleneck forward with freshly initialized weights.
pub fn c3ghost_forward(x: &Tensor, cfg: &C3GhostConfig, rng: &mut impl Rng) -> Result<Tensor> {
    if x.channels() != cfg.in_channels {
        return Err(Error::Config(format!(
            "c3ghost expects {} input channels, got {}",
            cfg.in_channels,
            x.channels()
        )));
    }
    Block::c3ghost(cfg, rng)?.forward(x)
}

/// EMA attention forward with freshly initialized weights.
pub fn ema_forward(x: &Tensor, cfg: &EmaConfig, rng: &mut impl Rng) -> Result<Tensor> {
    if x.channels() != cfg.channels {
        return Err(Error::Config(format!(
            "ema expects {} channels, got {}",
            cfg.channels,
            x.channels()
        )));
    }
    Block::ema(cfg, rng)?.forward(x)
}
