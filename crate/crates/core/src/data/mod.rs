//! Dataset types and on-disk layouts.
//!
//! Detection samples are images plus YOLO-format label files (one line per
//! box: `class cx cy w h`, normalized). Video clips are directories of
//! zero-padded PNG frames grouped into one folder per class. Synthetic
//! generators producing both live in [`synth`].

pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::BoundingBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClipLabel {
    Violent,
    NonViolent,
    Unknown,
}

/// One frame stored as 8-bit RGB (HWC).
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBuf {
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<u8>,
}

impl FrameBuf {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, rgb: vec![0; height * width * 3] }
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.rgb[i..i + 3].copy_from_slice(&rgb);
    }

    /// `(1, 3, H, W)` tensor with values in [0, 1].
    pub fn to_tensor(&self) -> Tensor {
        let mut t = Tensor::zeros([1, 3, self.height, self.width]);
        for y in 0..self.height {
            for x in 0..self.width {
                let i = (y * self.width + x) * 3;
                for c in 0..3 {
                    *t.at_mut(0, c, y, x) = self.rgb[i + c] as f64 / 255.0;
                }
            }
        }
        t
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.rgb.clone())
            .ok_or_else(|| Error::Input("frame buffer size mismatch".into()))?;
        img.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Ok(Self {
            height: img.height() as usize,
            width: img.width() as usize,
            rgb: img.into_raw(),
        })
    }
}

/// An ordered stack of frames with a nominal frame rate and a label.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: Vec<FrameBuf>,
    pub fps: f64,
    pub label: ClipLabel,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// One image plus its ground-truth boxes (scores fixed at 1).
#[derive(Debug, Clone)]
pub struct DetectionScene {
    pub image: FrameBuf,
    pub boxes: Vec<BoundingBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub path: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub annotation: Option<PathBuf>,
}

/// A recorded train/test partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub seed: u64,
    pub items: Vec<ManifestItem>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Deterministic shuffled 80/20 partition. Needs at least 5 items so the test
/// side is non-empty.
pub fn split_dataset<T: Clone>(items: &[T], seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if items.len() < 5 {
        return Err(Error::Input(format!(
            "need at least 5 items to split 8:2, got {}",
            items.len()
        )));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let test_n = ((items.len() as f64) * 0.2).round().max(1.0) as usize;
    let train_n = items.len() - test_n;
    let train = order[..train_n].iter().map(|&i| items[i].clone()).collect();
    let test = order[train_n..].iter().map(|&i| items[i].clone()).collect();
    Ok((train, test))
}

fn yolo_line(b: &BoundingBox, w: f64, h: f64) -> String {
    let cx = (b.x1 + b.x2) / 2.0 / w;
    let cy = (b.y1 + b.y2) / 2.0 / h;
    let bw = (b.x2 - b.x1) / w;
    let bh = (b.y2 - b.y1) / h;
    format!("0 {cx:.6} {cy:.6} {bw:.6} {bh:.6}")
}

fn parse_yolo_line(line: &str, w: f64, h: f64) -> Result<BoundingBox> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 5 {
        return Err(Error::Input(format!("bad yolo label line '{line}'")));
    }
    let num = |s: &str| -> Result<f64> {
        s.parse::<f64>().map_err(|_| Error::Input(format!("bad number '{s}' in label")))
    };
    let (cx, cy, bw, bh) = (num(fields[1])?, num(fields[2])?, num(fields[3])?, num(fields[4])?);
    BoundingBox::new(
        (cx - bw / 2.0) * w,
        (cy - bh / 2.0) * h,
        (cx + bw / 2.0) * w,
        (cy + bh / 2.0) * h,
        1.0,
    )
}

/// Write scenes as `img_XXXX.png` plus `img_XXXX.txt` YOLO labels.
pub fn save_detection_scenes(dir: &Path, scenes: &[DetectionScene]) -> Result<Vec<ManifestItem>> {
    fs::create_dir_all(dir)?;
    let mut items = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let img = dir.join(format!("img_{i:04}.png"));
        let txt = dir.join(format!("img_{i:04}.txt"));
        scene.image.save_png(&img)?;
        let lines: Vec<String> = scene
            .boxes
            .iter()
            .map(|b| yolo_line(b, scene.image.width as f64, scene.image.height as f64))
            .collect();
        fs::write(&txt, lines.join("\n") + "\n")?;
        items.push(ManifestItem { path: img, label: None, annotation: Some(txt) });
    }
    Ok(items)
}

/// Load any YOLO-layout directory: every PNG with a sibling `.txt`.
pub fn load_detection_scenes(dir: &Path) -> Result<Vec<DetectionScene>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let image = FrameBuf::load_png(&p)?;
        let txt = p.with_extension("txt");
        let mut boxes = Vec::new();
        if txt.exists() {
            for line in fs::read_to_string(&txt)?.lines() {
                if !line.trim().is_empty() {
                    boxes.push(parse_yolo_line(line, image.width as f64, image.height as f64)?);
                }
            }
        }
        out.push(DetectionScene { image, boxes });
    }
    Ok(out)
}

fn class_dir(label: ClipLabel) -> &'static str {
    match label {
        ClipLabel::Violent => "violent",
        ClipLabel::NonViolent => "non_violent",
        ClipLabel::Unknown => "unknown",
    }
}

/// Write clips as `root/<class>/clip_XXXX/frame_XXXX.png`.
pub fn save_clips(root: &Path, clips: &[VideoClip]) -> Result<Vec<ManifestItem>> {
    let mut counters = std::collections::BTreeMap::new();
    let mut items = Vec::with_capacity(clips.len());
    for clip in clips {
        let class = class_dir(clip.label);
        let n = counters.entry(class).or_insert(0usize);
        let dir = root.join(class).join(format!("clip_{:04}", *n));
        *n += 1;
        fs::create_dir_all(&dir)?;
        for (t, frame) in clip.frames.iter().enumerate() {
            frame.save_png(&dir.join(format!("frame_{t:04}.png")))?;
        }
        items.push(ManifestItem { path: dir, label: Some(class.to_string()), annotation: None });
    }
    Ok(items)
}

/// Load one frame-folder clip (zero-padded numeric frame names).
pub fn load_clip(dir: &Path, label: ClipLabel, fps: f64) -> Result<VideoClip> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Input(format!("clip folder {} has no frames", dir.display())));
    }
    let frames = paths.iter().map(|p| FrameBuf::load_png(p)).collect::<Result<Vec<_>>>()?;
    Ok(VideoClip { frames, fps, label })
}

/// Load a directory-per-class video dataset rooted at `root`.
pub fn load_clip_dataset(root: &Path) -> Result<Vec<VideoClip>> {
    let mut out = Vec::new();
    for (label, sub) in [
        (ClipLabel::Violent, "violent"),
        (ClipLabel::NonViolent, "non_violent"),
    ] {
        let dir = root.join(sub);
        if !dir.exists() {
            continue;
        }
        let mut clip_dirs: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        clip_dirs.sort();
        for d in clip_dirs {
            out.push(load_clip(&d, label, 10.0)?);
        }
    }
    if out.is_empty() {
        return Err(Error::Input(format!(
            "no clips under {} (expected violent/ and non_violent/ subdirectories)",
            root.display()
        )));
    }
    Ok(out)
}
