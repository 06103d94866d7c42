//! Dataset ingestion, preprocessing and pair assembly.
//!
//! Loaders canonicalize every quaternion on the way in: unit norm within
//! 1e-9 (renormalizing only when actually off, so round trips are exact)
//! and non-negative w. Frame indices are strictly increasing within a
//! sequence, and training pairs never cross sequence boundaries.

mod png_io;
pub mod sevenscenes;
pub mod synth;
pub mod tum;

pub use png_io::{read_png, write_png};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{relative_motion, Pose, Quat, RelativeMotion, DEGENERATE_NORM};
use crate::optim::PairSample;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Dense image, channel-major (CHW), values in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageBuf {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl ImageBuf {
    pub fn new(c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(Error::Data(format!(
                "image buffer: {}x{}x{} needs {} values, got {}",
                c,
                h,
                w,
                c * h * w,
                data.len()
            )));
        }
        Ok(ImageBuf { c, h, w, data })
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        ImageBuf {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.c, self.h, self.w], self.data.clone()).expect("consistent dims")
    }

    fn at(&self, ch: usize, y: usize, x: usize) -> f64 {
        self.data[(ch * self.h + y) * self.w + x]
    }
}

/// Where a frame's pixels live.
#[derive(Debug, Clone)]
pub enum ImageSource {
    OnDisk(PathBuf),
    Loaded(ImageBuf),
}

impl ImageSource {
    pub fn load(&self) -> Result<ImageBuf> {
        match self {
            ImageSource::OnDisk(path) => read_png(path),
            ImageSource::Loaded(img) => Ok(img.clone()),
        }
    }
}

/// One frame of a sequence with its groundtruth pose.
#[derive(Debug, Clone)]
pub struct FrameRecord {
    pub sequence_id: String,
    pub frame_index: usize,
    pub timestamp: Option<f64>,
    pub image: ImageSource,
    pub pose: Pose,
}

#[derive(Debug, Clone)]
pub struct Sequence {
    pub id: String,
    pub frames: Vec<FrameRecord>,
}

impl Sequence {
    /// Enforce the strictly-increasing frame index invariant.
    pub fn validate(&self) -> Result<()> {
        for pair in self.frames.windows(2) {
            if pair[1].frame_index <= pair[0].frame_index {
                return Err(Error::Data(format!(
                    "sequence {}: frame index {} does not increase after {}",
                    self.id, pair[1].frame_index, pair[0].frame_index
                )));
            }
        }
        Ok(())
    }
}

/// Normalize (only when needed) and canonicalize an ingested quaternion.
pub fn ingest_quat(q: Quat) -> Result<Quat> {
    let n = q.norm();
    if n < DEGENERATE_NORM {
        return Err(Error::Geometry(format!(
            "degenerate quaternion: norm {n:e}"
        )));
    }
    let unit = if (n - 1.0).abs() <= 1e-9 {
        q
    } else {
        q.normalized()?
    };
    Ok(unit.canonicalized())
}

/// A consecutive frame pair with its groundtruth relative motion.
#[derive(Debug, Clone)]
pub struct FramePair<'a> {
    pub t: &'a FrameRecord,
    pub prev: &'a FrameRecord,
    pub rel_gt: RelativeMotion,
}

/// Consecutive pairs within one sequence. A sequence of length < 2 yields
/// an empty list.
pub fn make_pairs(sequence: &Sequence) -> Result<Vec<FramePair<'_>>> {
    sequence.validate()?;
    let mut pairs = Vec::new();
    for w in sequence.frames.windows(2) {
        let rel_gt = relative_motion(&w[1].pose, &w[0].pose)?;
        pairs.push(FramePair {
            t: &w[1],
            prev: &w[0],
            rel_gt,
        });
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreprocessMode {
    Train,
    Eval,
}

/// Preprocessing pipeline: rescale the shorter side, subtract the scene
/// mean image (computed at the rescaled resolution over the training
/// split), then crop (randomly at train time, centered at eval time).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub rescale_short_side: usize,
    pub crop: usize,
    /// Per-scene mean image at the rescaled resolution; `None` skips the
    /// subtraction.
    pub mean: Option<ImageBuf>,
}

impl PreprocessConfig {
    pub fn identity(size: usize) -> Self {
        PreprocessConfig {
            rescale_short_side: size,
            crop: size,
            mean: None,
        }
    }
}

/// Bilinear rescale so the shorter side equals `target`; the longer side is
/// scaled proportionally with round-half-up.
pub fn rescale_short_side(img: &ImageBuf, target: usize) -> Result<ImageBuf> {
    if target == 0 {
        return Err(Error::Config("rescale target must be positive".into()));
    }
    let (new_h, new_w) = if img.h <= img.w {
        (
            target,
            ((img.w as f64) * (target as f64) / (img.h as f64)).round() as usize,
        )
    } else {
        (
            ((img.h as f64) * (target as f64) / (img.w as f64)).round() as usize,
            target,
        )
    };
    if new_h == img.h && new_w == img.w {
        return Ok(img.clone());
    }
    let mut out = ImageBuf::zeros(img.c, new_h, new_w);
    let sy = img.h as f64 / new_h as f64;
    let sx = img.w as f64 / new_w as f64;
    for ch in 0..img.c {
        for y in 0..new_h {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(img.h - 1);
            let wy = fy - y0 as f64;
            for x in 0..new_w {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(img.w - 1);
                let wx = fx - x0 as f64;
                let v = img.at(ch, y0, x0) * (1.0 - wy) * (1.0 - wx)
                    + img.at(ch, y0, x1) * (1.0 - wy) * wx
                    + img.at(ch, y1, x0) * wy * (1.0 - wx)
                    + img.at(ch, y1, x1) * wy * wx;
                out.data[(ch * new_h + y) * new_w + x] = v;
            }
        }
    }
    Ok(out)
}

fn crop(img: &ImageBuf, size: usize, oy: usize, ox: usize) -> ImageBuf {
    let mut out = ImageBuf::zeros(img.c, size, size);
    for ch in 0..img.c {
        for y in 0..size {
            for x in 0..size {
                out.data[(ch * size + y) * size + x] = img.at(ch, y + oy, x + ox);
            }
        }
    }
    out
}

/// Full preprocessing of one image into a network-ready tensor.
pub fn preprocess(
    img: &ImageBuf,
    cfg: &PreprocessConfig,
    mode: PreprocessMode,
    rng: &mut Rng,
) -> Result<Tensor> {
    let rescaled = rescale_short_side(img, cfg.rescale_short_side)?;
    let mut work = rescaled;
    if let Some(mean) = &cfg.mean {
        if mean.c != work.c || mean.h != work.h || mean.w != work.w {
            return Err(Error::Config(format!(
                "mean image is {}x{}x{}, rescaled input is {}x{}x{}",
                mean.c, mean.h, mean.w, work.c, work.h, work.w
            )));
        }
        for (v, m) in work.data.iter_mut().zip(&mean.data) {
            *v -= m;
        }
    }
    if cfg.crop > work.h || cfg.crop > work.w {
        return Err(Error::Data(format!(
            "crop {} exceeds rescaled image {}x{}",
            cfg.crop, work.h, work.w
        )));
    }
    let (oy, ox) = match mode {
        PreprocessMode::Eval => ((work.h - cfg.crop) / 2, (work.w - cfg.crop) / 2),
        PreprocessMode::Train => (
            rng.below(work.h - cfg.crop + 1),
            rng.below(work.w - cfg.crop + 1),
        ),
    };
    let cropped = if cfg.crop == work.h && cfg.crop == work.w {
        work
    } else {
        crop(&work, cfg.crop, oy, ox)
    };
    Ok(cropped.to_tensor())
}

/// Pixel-wise mean of a set of images at the rescaled resolution.
pub fn compute_mean_image(
    images: impl Iterator<Item = Result<ImageBuf>>,
    rescale_target: usize,
) -> Result<ImageBuf> {
    let mut acc: Option<ImageBuf> = None;
    let mut count = 0usize;
    for img in images {
        let r = rescale_short_side(&img?, rescale_target)?;
        match &mut acc {
            None => acc = Some(r),
            Some(a) => {
                if a.h != r.h || a.w != r.w || a.c != r.c {
                    return Err(Error::Data(
                        "mean image: inconsistent rescaled dimensions across frames".into(),
                    ));
                }
                for (av, rv) in a.data.iter_mut().zip(&r.data) {
                    *av += rv;
                }
            }
        }
        count += 1;
    }
    let mut a = acc.ok_or_else(|| Error::Data("mean image: no frames".into()))?;
    for v in a.data.iter_mut() {
        *v /= count as f64;
    }
    Ok(a)
}

/// Preprocess every consecutive pair of every sequence into training
/// samples. Pairs never cross sequence boundaries.
pub fn assemble_samples(
    sequences: &[Sequence],
    cfg: &PreprocessConfig,
    mode: PreprocessMode,
    rng: &mut Rng,
) -> Result<Vec<PairSample>> {
    let mut samples = Vec::new();
    for seq in sequences {
        for pair in make_pairs(seq)? {
            let image_t = preprocess(&pair.t.image.load()?, cfg, mode, rng)?;
            let image_prev = preprocess(&pair.prev.image.load()?, cfg, mode, rng)?;
            samples.push(PairSample {
                image_t,
                image_prev,
                pose_t: pair.t.pose,
                pose_prev: pair.prev.pose,
                rel_gt: pair.rel_gt,
            });
        }
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(seq: &str, idx: usize, x: f64) -> FrameRecord {
        FrameRecord {
            sequence_id: seq.to_string(),
            frame_index: idx,
            timestamp: None,
            image: ImageSource::Loaded(ImageBuf::zeros(1, 4, 4)),
            pose: Pose::new([x, 0.0, 0.0], Quat::IDENTITY),
        }
    }

    #[test]
    fn pairs_stay_within_sequences() {
        let a = Sequence {
            id: "a".into(),
            frames: (0..3).map(|i| frame("a", i, i as f64)).collect(),
        };
        let b = Sequence {
            id: "b".into(),
            frames: (0..3).map(|i| frame("b", i, 10.0 + i as f64)).collect(),
        };
        let pairs_a = make_pairs(&a).unwrap();
        let pairs_b = make_pairs(&b).unwrap();
        assert_eq!(pairs_a.len() + pairs_b.len(), 4);
        for p in pairs_a.iter().chain(&pairs_b) {
            assert_eq!(p.t.sequence_id, p.prev.sequence_id);
        }
    }

    #[test]
    fn five_frames_make_four_pairs_and_short_sequences_none() {
        let s = Sequence {
            id: "s".into(),
            frames: (0..5).map(|i| frame("s", i, i as f64)).collect(),
        };
        assert_eq!(make_pairs(&s).unwrap().len(), 4);
        let single = Sequence {
            id: "one".into(),
            frames: vec![frame("one", 0, 0.0)],
        };
        assert!(make_pairs(&single).unwrap().is_empty());
    }

    #[test]
    fn pair_relative_motion_recomposes() {
        let mut rng = Rng::new(31);
        let mut frames = Vec::new();
        let mut pose = Pose::IDENTITY;
        for i in 0..10 {
            pose = Pose::new(
                [
                    pose.x[0] + rng.uniform_in(-0.2, 0.2),
                    pose.x[1] + rng.uniform_in(-0.2, 0.2),
                    0.0,
                ],
                Quat::from_yaw_deg(rng.uniform_in(-40.0, 40.0)),
            );
            frames.push(FrameRecord {
                pose,
                ..frame("s", i, 0.0)
            });
        }
        let seq = Sequence {
            id: "s".into(),
            frames,
        };
        for p in make_pairs(&seq).unwrap() {
            let recomposed = crate::geometry::compose(&p.prev.pose, &p.rel_gt).unwrap();
            assert!(crate::geometry::translation_distance(&recomposed.x, &p.t.pose.x) < 1e-10);
            assert!((recomposed.q.dot(&p.t.pose.q).abs() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn non_increasing_indices_are_rejected() {
        let s = Sequence {
            id: "s".into(),
            frames: vec![frame("s", 1, 0.0), frame("s", 1, 1.0)],
        };
        assert!(make_pairs(&s).is_err());
    }

    #[test]
    fn gray_image_minus_its_mean_is_zero() {
        let img = ImageBuf::new(1, 4, 4, vec![0.5; 16]).unwrap();
        let cfg = PreprocessConfig {
            rescale_short_side: 4,
            crop: 4,
            mean: Some(img.clone()),
        };
        let mut rng = Rng::new(0);
        let t = preprocess(&img, &cfg, PreprocessMode::Eval, &mut rng).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn center_crop_offsets_use_floor() {
        // 6x8 image, crop 4: offsets (1, 2).
        let mut img = ImageBuf::zeros(1, 6, 8);
        img.data[(1 * 8) + 2] = 1.0; // value at (y=1, x=2) lands at (0, 0)
        let cfg = PreprocessConfig {
            rescale_short_side: 6,
            crop: 4,
            mean: None,
        };
        let mut rng = Rng::new(0);
        let t = preprocess(&img, &cfg, PreprocessMode::Eval, &mut rng).unwrap();
        assert_eq!(t.data()[0], 1.0);
    }

    #[test]
    fn rescale_640x480_to_short_side_256() {
        let img = ImageBuf::zeros(1, 480, 640);
        let r = rescale_short_side(&img, 256).unwrap();
        assert_eq!((r.h, r.w), (256, 341)); // 640 * 256 / 480 = 341.33 -> 341
    }

    #[test]
    fn rescale_preserves_uniform_images() {
        let img = ImageBuf::new(2, 10, 10, vec![0.37; 200]).unwrap();
        let r = rescale_short_side(&img, 7).unwrap();
        assert!(r.data.iter().all(|&v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn crop_larger_than_image_is_an_error() {
        let img = ImageBuf::zeros(1, 4, 4);
        let cfg = PreprocessConfig {
            rescale_short_side: 4,
            crop: 8,
            mean: None,
        };
        let mut rng = Rng::new(0);
        assert!(preprocess(&img, &cfg, PreprocessMode::Eval, &mut rng).is_err());
    }

    #[test]
    fn ingest_quat_is_idempotent_and_canonical() {
        let q = Quat::new(-2.0, 0.0, 0.0, 0.0);
        let once = ingest_quat(q).unwrap();
        assert_eq!(once, Quat::IDENTITY);
        let twice = ingest_quat(once).unwrap();
        assert_eq!(once, twice);
        assert!(ingest_quat(Quat::new(0.0, 0.0, 0.0, 0.0)).is_err());
    }
}
