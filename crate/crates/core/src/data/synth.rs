//! Synthetic scene and clip generators.
//!
//! Scenes contain saturated "person" actors (a body slab plus a head disc)
//! over a cluttered, noisy background, with exact ground-truth boxes taken
//! from the rendered extent. Clips move the same actors under one of two
//! motion laws: close-range colliding oscillation (labelled violent) or
//! steady parallel walking (labelled non-violent), so inter-actor proximity
//! dynamics carry the class signal.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::detector::BoundingBox;
use crate::error::{Error, Result};

use super::{ClipLabel, DetectionScene, FrameBuf, VideoClip};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionLaw {
    Linear,
    CollidingOscillation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSceneConfig {
    /// Square canvas side in pixels.
    pub canvas: usize,
    pub actor_count: usize,
    pub motion: MotionLaw,
    /// Per-pixel Gaussian noise, 0-255 scale.
    pub noise: f64,
    /// Clip length in frames.
    pub frames: usize,
    pub seed: u64,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        Self {
            canvas: 128,
            actor_count: 2,
            motion: MotionLaw::CollidingOscillation,
            noise: 9.0,
            frames: 24,
            seed: 0,
        }
    }
}

impl SyntheticSceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.actor_count == 0 {
            return Err(Error::Config("actor count must be >= 1".into()));
        }
        if self.canvas < 48 {
            return Err(Error::Config("canvas must be at least 48 px".into()));
        }
        if self.frames == 0 {
            return Err(Error::Config("clip length must be >= 1 frame".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Actor {
    w: f64,
    h: f64,
    color: [u8; 3],
}

/// True actor positions per frame, kept next to generated clips so tests can
/// compute trajectory statistics without touching pixels.
#[derive(Debug, Clone)]
pub struct ClipTruth {
    /// positions[frame][actor] = (cx, cy)
    pub positions: Vec<Vec<(f64, f64)>>,
}

/// Variance over time of the mean inter-actor distance.
pub fn distance_variance(truth: &ClipTruth) -> f64 {
    let series: Vec<f64> = truth
        .positions
        .iter()
        .map(|actors| {
            let mut total = 0.0;
            let mut pairs = 0usize;
            for i in 0..actors.len() {
                for j in i + 1..actors.len() {
                    let dx = actors[i].0 - actors[j].0;
                    let dy = actors[i].1 - actors[j].1;
                    total += (dx * dx + dy * dy).sqrt();
                    pairs += 1;
                }
            }
            if pairs == 0 {
                0.0
            } else {
                total / pairs as f64
            }
        })
        .collect();
    let mean = series.iter().sum::<f64>() / series.len() as f64;
    series.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / series.len() as f64
}

fn scene_rng(cfg: &SyntheticSceneConfig, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

fn muted_color(rng: &mut ChaCha8Rng) -> [u8; 3] {
    let base = rng.gen_range(60..140) as i32;
    let mut c = [0u8; 3];
    for v in &mut c {
        *v = (base + rng.gen_range(-18..=18)).clamp(0, 255) as u8;
    }
    c
}

fn actor_color(rng: &mut ChaCha8Rng) -> [u8; 3] {
    let hot = rng.gen_range(0..3);
    let mut c = [0u8; 3];
    for (i, v) in c.iter_mut().enumerate() {
        *v = if i == hot { rng.gen_range(190..=255) } else { rng.gen_range(15..=80) };
    }
    c
}

fn sample_actor_scaled(scale: f64, rng: &mut ChaCha8Rng) -> Actor {
    // integer sides make the body slab rasterize to its exact area at any
    // sub-pixel position (opposite edge coverages are complementary)
    Actor {
        w: (rng.gen_range(8.0_f64..12.0) * scale).round().max(5.0),
        h: (rng.gen_range(17.0_f64..24.0) * scale).round().max(10.0),
        color: actor_color(rng),
    }
}

/// Per-scene camera-distance factor; crops normalize it away, whole frames
/// have to absorb it.
fn scene_scale(rng: &mut ChaCha8Rng) -> f64 {
    rng.gen_range(0.8..1.7)
}

fn sample_actor(cfg: &SyntheticSceneConfig, rng: &mut ChaCha8Rng) -> Actor {
    let _ = cfg;
    sample_actor_scaled(1.0, rng)
}

/// Paint background, clutter rectangles and noise.
fn background(cfg: &SyntheticSceneConfig, rng: &mut ChaCha8Rng) -> FrameBuf {
    let n = cfg.canvas;
    let mut f = FrameBuf::new(n, n);
    let base = rng.gen_range(85..125) as u8;
    for v in &mut f.rgb {
        *v = base;
    }
    let clutter = rng.gen_range(4..=8);
    for _ in 0..clutter {
        let w = rng.gen_range(8..24).min(n - 1);
        let h = rng.gen_range(8..24).min(n - 1);
        let x0 = rng.gen_range(0..n - w);
        let y0 = rng.gen_range(0..n - h);
        let color = muted_color(rng);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                f.set(y, x, color);
            }
        }
    }
    f
}

fn add_noise(f: &mut FrameBuf, sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma <= 0.0 {
        return;
    }
    for v in &mut f.rgb {
        let z: f64 = rng.sample(StandardNormal);
        *v = (*v as f64 + z * sigma).clamp(0.0, 255.0) as u8;
    }
}

/// Draw the actor centered at (cx, cy); returns the exact drawn extent.
fn draw_actor(f: &mut FrameBuf, actor: &Actor, cx: f64, cy: f64) -> Option<BoundingBox> {
    draw_actor_masked(f, actor, cx, cy, None)
}

/// Like [`draw_actor`], but with an occupancy mask: where two actors overlap
/// the colors mix, giving physical contact a distinct local texture.
fn draw_actor_masked(
    f: &mut FrameBuf,
    actor: &Actor,
    cx: f64,
    cy: f64,
    mut mask: Option<&mut [bool]>,
) -> Option<BoundingBox> {
    let n = f.width as f64;
    let (x1, y1, x2, y2) = (cx - actor.w / 2.0, cy - actor.h / 2.0, cx + actor.w / 2.0, cy + actor.h / 2.0);
    let r = head_radius(actor.w);
    let head_cy = y1 + r;
    let body_top = y1 + 2.0 * r;
    let mut drawn = false;
    let ylo = y1.floor().max(0.0) as usize;
    let yhi = (y2.ceil() as usize).min(f.height);
    let xlo = x1.floor().max(0.0) as usize;
    let xhi = (x2.ceil() as usize).min(f.width);
    // Coverage rasterization: exact overlap for the body slab, subsampled
    // for the head disc. The two shapes are tangent and disjoint, so their
    // coverages add. With integer slab sides, opposite edge pixels carry
    // complementary coverage and the filled slab area is exact at any
    // sub-pixel position.
    const SS: usize = 8;
    for y in ylo..yhi {
        for x in xlo..xhi {
            let (pl, pt) = (x as f64, y as f64);
            let ox = (x2.min(pl + 1.0) - x1.max(pl)).max(0.0);
            let oy = (y2.min(pt + 1.0) - body_top.max(pt)).max(0.0);
            let mut cov = ox * oy;
            // disc only matters near the head
            if pt < body_top + 1.0 {
                let mut inside = 0usize;
                for sy in 0..SS {
                    for sx in 0..SS {
                        let px = pl + (sx as f64 + 0.5) / SS as f64;
                        let py = pt + (sy as f64 + 0.5) / SS as f64;
                        let dx = px - cx;
                        let dy = py - head_cy;
                        if dx * dx + dy * dy <= r * r && py < body_top {
                            inside += 1;
                        }
                    }
                }
                cov += inside as f64 / (SS * SS) as f64;
            }
            if cov >= 0.5 {
                let idx = y * f.width + x;
                let occupied = mask.as_deref().is_some_and(|m| m[idx]);
                if occupied {
                    let i = idx * 3;
                    let mixed = [
                        ((f.rgb[i] as u16 + actor.color[0] as u16) / 2) as u8,
                        ((f.rgb[i + 1] as u16 + actor.color[1] as u16) / 2) as u8,
                        ((f.rgb[i + 2] as u16 + actor.color[2] as u16) / 2) as u8,
                    ];
                    f.set(y, x, mixed);
                } else {
                    f.set(y, x, actor.color);
                    if let Some(m) = mask.as_deref_mut() {
                        m[idx] = true;
                    }
                }
                drawn = true;
            }
        }
    }
    if !drawn {
        return None;
    }
    BoundingBox::new(x1.max(0.0), y1.max(0.0), x2.min(n), y2.min(f.height as f64), 1.0).ok()
}

/// Head radius: ~0.4 of the body width, snapped so the diameter is a whole
/// number of pixels and the body slab keeps an integer height.
fn head_radius(w: f64) -> f64 {
    (w * 0.8).round() / 2.0
}

/// Analytic drawn area: body slab plus the head disc (tangent, no overlap).
pub fn actor_area(w: f64, h: f64) -> f64 {
    let r = head_radius(w);
    w * (h - 2.0 * r) + std::f64::consts::PI * r * r
}

/// Count of actor-colored pixels after a clean render, for the area oracle.
pub fn rendered_actor_pixels(cfg: &SyntheticSceneConfig, index: usize) -> (f64, f64) {
    let mut rng = scene_rng(cfg, index);
    let actor = sample_actor(cfg, &mut rng);
    let mut f = FrameBuf::new(cfg.canvas, cfg.canvas);
    // generic sub-pixel placement (exact half-pixel alignment is a
    // measure-zero tie case for the coverage rule)
    let c = cfg.canvas as f64 / 2.0 + rng.gen_range(0.05..0.45);
    draw_actor(&mut f, &actor, c, c);
    let count = f
        .rgb
        .chunks(3)
        .filter(|px| px[0] == actor.color[0] && px[1] == actor.color[1] && px[2] == actor.color[2])
        .count();
    (count as f64, actor_area(actor.w, actor.h))
}

/// Labelled still images with exact ground-truth boxes.
pub fn gen_detection_scenes(n: usize, cfg: &SyntheticSceneConfig) -> Result<Vec<DetectionScene>> {
    cfg.validate()?;
    let canvas = cfg.canvas as f64;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = scene_rng(cfg, i);
        let mut image = background(cfg, &mut rng);
        let scale = scene_scale(&mut rng);
        let mut boxes: Vec<BoundingBox> = Vec::new();
        let mut centers: Vec<(f64, f64)> = Vec::new();
        for _ in 0..cfg.actor_count {
            let actor = sample_actor_scaled(scale, &mut rng);
            // keep actors apart and inside the frame
            let mut placed = None;
            for _try in 0..60 {
                let cx = rng.gen_range(actor.w / 2.0 + 1.0..canvas - actor.w / 2.0 - 1.0);
                let cy = rng.gen_range(actor.h / 2.0 + 1.0..canvas - actor.h / 2.0 - 1.0);
                let ok = centers.iter().all(|&(ox, oy)| {
                    let (dx, dy) = (cx - ox, cy - oy);
                    (dx * dx + dy * dy).sqrt() > actor.h * 1.2
                });
                if ok {
                    placed = Some((cx, cy));
                    break;
                }
            }
            if let Some((cx, cy)) = placed {
                if let Some(b) = draw_actor(&mut image, &actor, cx, cy) {
                    boxes.push(b);
                    centers.push((cx, cy));
                }
            }
        }
        add_noise(&mut image, cfg.noise, &mut rng);
        out.push(DetectionScene { image, boxes });
    }
    Ok(out)
}

struct Trajectory {
    actors: Vec<Actor>,
    /// positions[frame][actor]
    positions: Vec<Vec<(f64, f64)>>,
}

fn colliding_trajectory(cfg: &SyntheticSceneConfig, rng: &mut ChaCha8Rng) -> Trajectory {
    let canvas = cfg.canvas as f64;
    let count = cfg.actor_count.max(2);
    let scale = scene_scale(rng);
    let actors: Vec<Actor> = (0..count).map(|_| sample_actor_scaled(scale, rng)).collect();
    let w_avg = actors.iter().map(|a| a.w).sum::<f64>() / actors.len() as f64;
    let c0x = rng.gen_range(canvas * 0.35..canvas * 0.65);
    let c0y = rng.gen_range(canvas * 0.35..canvas * 0.65);
    let drift: (f64, f64) = (rng.gen_range(-0.25..0.25), rng.gen_range(-0.25..0.25));
    let period = rng.gen_range(6.0..12.0);
    let omega = std::f64::consts::TAU / period;
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    // bodies oscillate between full overlap and the same narrow walking gap
    // the calm class keeps, so only the contact phases separate the classes
    let d_min = rng.gen_range(0.0..3.0) * scale;
    let d_max = w_avg + rng.gen_range(2.0..8.0) * scale;
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);

    let mut positions = Vec::with_capacity(cfg.frames);
    let mut jitter = vec![(0.0f64, 0.0f64); count];
    for t in 0..cfg.frames {
        let cx = (c0x + drift.0 * t as f64).clamp(canvas * 0.2, canvas * 0.8);
        let cy = (c0y + drift.1 * t as f64).clamp(canvas * 0.2, canvas * 0.8);
        let d = d_min + (d_max - d_min) * (0.5 + 0.5 * (omega * t as f64 + phase).sin());
        let mut frame = Vec::with_capacity(count);
        for (i, j) in jitter.iter_mut().enumerate() {
            j.0 = (j.0 + rng.gen_range(-0.7..0.7)).clamp(-2.5, 2.5);
            j.1 = (j.1 + rng.gen_range(-0.7..0.7)).clamp(-2.5, 2.5);
            let ang = theta + std::f64::consts::TAU * i as f64 / count as f64;
            frame.push((cx + ang.cos() * d / 2.0 + j.0, cy + ang.sin() * d / 2.0 + j.1));
        }
        positions.push(frame);
    }
    Trajectory { actors, positions }
}

fn linear_trajectory(cfg: &SyntheticSceneConfig, rng: &mut ChaCha8Rng) -> Trajectory {
    let canvas = cfg.canvas as f64;
    let count = cfg.actor_count.max(2);
    let scale = scene_scale(rng);
    let actors: Vec<Actor> = (0..count).map(|_| sample_actor_scaled(scale, rng)).collect();
    let w_avg = actors.iter().map(|a| a.w).sum::<f64>() / actors.len() as f64;
    // shared walking direction, parallel lanes, bodies nearly touching but
    // never overlapping: the same center distance the violent class reaches
    // at its widest
    let dir: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (ux, uy) = (dir.cos(), dir.sin());
    let (px, py) = (-uy, ux);
    let base_speed = rng.gen_range(0.45..0.95);
    let margin = canvas * 0.16;
    let travel = base_speed * cfg.frames as f64;
    let half = travel / 2.0 + 1.0;
    let c = canvas / 2.0;
    let sep = w_avg + rng.gen_range(2.0..8.0) * scale;

    let mut positions = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        let mut frame = Vec::with_capacity(count);
        for i in 0..count {
            let lane = (i as f64 - (count as f64 - 1.0) / 2.0) * sep;
            let speed = base_speed * (1.0 + 0.02 * i as f64);
            let along = -half + speed * t as f64;
            let x = (c + ux * along + px * lane).clamp(margin, canvas - margin);
            let y = (c + uy * along + py * lane).clamp(margin, canvas - margin);
            frame.push((x, y));
        }
        positions.push(frame);
    }
    Trajectory { actors, positions }
}

fn render_clip(cfg: &SyntheticSceneConfig, traj: &Trajectory, rng: &mut ChaCha8Rng, label: ClipLabel) -> VideoClip {
    let bg = background(cfg, rng);
    let mut frames = Vec::with_capacity(cfg.frames);
    for frame_pos in &traj.positions {
        let mut f = bg.clone();
        let mut occupancy = vec![false; f.width * f.height];
        for (actor, &(cx, cy)) in traj.actors.iter().zip(frame_pos.iter()) {
            draw_actor_masked(&mut f, actor, cx, cy, Some(&mut occupancy));
        }
        add_noise(&mut f, cfg.noise, rng);
        frames.push(f);
    }
    VideoClip { frames, fps: 10.0, label }
}

/// Alternating violent / non-violent clips (even indices collide, odd walk),
/// yielding an exact 50/50 balance for even `n`.
pub fn gen_video_scenes_with_truth(
    n: usize,
    cfg: &SyntheticSceneConfig,
) -> Result<Vec<(VideoClip, ClipTruth)>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = scene_rng(cfg, i);
        let (traj, label) = if i % 2 == 0 {
            (colliding_trajectory(cfg, &mut rng), ClipLabel::Violent)
        } else {
            (linear_trajectory(cfg, &mut rng), ClipLabel::NonViolent)
        };
        let clip = render_clip(cfg, &traj, &mut rng, label);
        out.push((clip, ClipTruth { positions: traj.positions }));
    }
    Ok(out)
}

pub fn gen_video_scenes(n: usize, cfg: &SyntheticSceneConfig) -> Result<Vec<VideoClip>> {
    Ok(gen_video_scenes_with_truth(n, cfg)?.into_iter().map(|(c, _)| c).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detection_scene_counts_and_reproducibility() {
        let cfg = SyntheticSceneConfig { seed: 5, ..Default::default() };
        let a = gen_detection_scenes(4, &cfg).unwrap();
        let b = gen_detection_scenes(4, &cfg).unwrap();
        assert_eq!(a.len(), 4);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.boxes.len(), y.boxes.len());
        }
        assert!(gen_detection_scenes(0, &cfg).unwrap().is_empty());
    }

    #[test]
    fn rendered_extent_matches_label() {
        let cfg = SyntheticSceneConfig { noise: 0.0, actor_count: 1, seed: 11, ..Default::default() };
        let scenes = gen_detection_scenes(3, &cfg).unwrap();
        for s in &scenes {
            assert_eq!(s.boxes.len(), 1);
            let b = &s.boxes[0];
            // find drawn pixel extent (anything saturated)
            let (mut x1, mut y1, mut x2, mut y2) = (f64::MAX, f64::MAX, 0.0f64, 0.0f64);
            for y in 0..s.image.height {
                for x in 0..s.image.width {
                    let i = (y * s.image.width + x) * 3;
                    let px = &s.image.rgb[i..i + 3];
                    let mx = *px.iter().max().unwrap() as i32;
                    let mn = *px.iter().min().unwrap() as i32;
                    if mx >= 190 && mx - mn > 90 {
                        x1 = x1.min(x as f64);
                        y1 = y1.min(y as f64);
                        x2 = x2.max(x as f64 + 1.0);
                        y2 = y2.max(y as f64 + 1.0);
                    }
                }
            }
            assert!((x1 - b.x1).abs() <= 1.5, "x1 {x1} vs {}", b.x1);
            assert!((y1 - b.y1).abs() <= 1.5, "y1 {y1} vs {}", b.y1);
            assert!((x2 - b.x2).abs() <= 1.5, "x2 {x2} vs {}", b.x2);
            assert!((y2 - b.y2).abs() <= 1.5, "y2 {y2} vs {}", b.y2);
        }
    }

    #[test]
    fn pixel_count_matches_analytic_area() {
        let cfg = SyntheticSceneConfig::default();
        for i in 0..8 {
            let (pixels, area) = rendered_actor_pixels(&cfg, i);
            let rel = (pixels - area).abs() / area;
            assert!(rel < 0.05, "index {i}: {pixels} px vs analytic {area} ({rel:.3})");
        }
    }

    #[test]
    fn video_balance_and_determinism() {
        let cfg = SyntheticSceneConfig { frames: 8, seed: 2, ..Default::default() };
        let clips = gen_video_scenes(20, &cfg).unwrap();
        let violent = clips.iter().filter(|c| c.label == ClipLabel::Violent).count();
        assert_eq!(violent, 10);
        let again = gen_video_scenes(20, &cfg).unwrap();
        for (a, b) in clips.iter().zip(again.iter()) {
            assert_eq!(a.frames, b.frames);
        }
    }

    #[test]
    fn colliding_class_has_higher_distance_variance() {
        let cfg = SyntheticSceneConfig { frames: 24, seed: 31, ..Default::default() };
        let clips = gen_video_scenes_with_truth(40, &cfg).unwrap();
        let mut violent = Vec::new();
        let mut calm = Vec::new();
        for (clip, truth) in &clips {
            match clip.label {
                ClipLabel::Violent => violent.push(distance_variance(truth)),
                _ => calm.push(distance_variance(truth)),
            }
        }
        let mv = violent.iter().sum::<f64>() / violent.len() as f64;
        let mc = calm.iter().sum::<f64>() / calm.len() as f64;
        assert!(mv > 2.0 * mc, "violent {mv} vs calm {mc}");
    }
}
