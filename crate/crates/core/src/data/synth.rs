//! Deterministic synthetic world: a smooth procedural texture field
//! observed by a downward-looking camera.
//!
//! The image at a pose is a window into the texture centered at the camera's
//! planar position, rotated by its yaw and scaled by its height, with a mild
//! yaw-dependent shading term. Pose is therefore recoverable from pixels
//! everywhere except inside the optional aliasing regions: poses inside
//! region B are remapped into region A before rendering, so the two regions
//! produce pixel-identical images at distinct locations.
//!
//! Trajectories are bounded random walks pulled along a fixed waypoint
//! cycle (the aliasing regions, when present, are on the cycle), with the
//! yaw steering toward the walk direction under a per-step turn bound.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose, Quat};
use crate::rng::Rng;
use crate::tensor::gradcheck::fnv1a;

use super::{FrameRecord, ImageBuf, ImageSource, Sequence};

/// A pair of equally-sized axis-aligned planar regions rendered identically.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AliasConfig {
    pub region_a_min: [f64; 2],
    pub region_b_min: [f64; 2],
    pub region_size: [f64; 2],
}

impl AliasConfig {
    fn contains(&self, min: [f64; 2], p: [f64; 2]) -> bool {
        p[0] >= min[0]
            && p[0] < min[0] + self.region_size[0]
            && p[1] >= min[1]
            && p[1] < min[1] + self.region_size[1]
    }

    pub fn in_region_a(&self, p: [f64; 2]) -> bool {
        self.contains(self.region_a_min, p)
    }

    pub fn in_region_b(&self, p: [f64; 2]) -> bool {
        self.contains(self.region_b_min, p)
    }

    fn overlaps(&self) -> bool {
        let (a, b, s) = (self.region_a_min, self.region_b_min, self.region_size);
        a[0] < b[0] + s[0] && b[0] < a[0] + s[0] && a[1] < b[1] + s[1] && b[1] < a[1] + s[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorldConfig {
    /// World is the square [0, extent] x [0, extent] meters in x, y.
    pub extent: f64,
    /// Rendered images are square with this many pixels per side.
    pub render_size: usize,
    /// Per-step translation bound, meters.
    pub max_step_translation: f64,
    /// Per-step yaw change bound, degrees.
    pub max_step_yaw_deg: f64,
    /// Absolute yaw clamp, degrees (keeps targets away from the 180 degree
    /// double-cover seam).
    pub yaw_limit_deg: f64,
    /// Camera height range; height scales the texture footprint.
    pub z_range: (f64, f64),
    /// Meters per pixel at height 1.
    pub footprint: f64,
    pub texture_seed: u64,
    pub aliasing: Option<AliasConfig>,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        SyntheticWorldConfig {
            extent: 10.0,
            render_size: 32,
            max_step_translation: 0.35,
            max_step_yaw_deg: 9.0,
            yaw_limit_deg: 70.0,
            z_range: (0.9, 1.1),
            footprint: 0.1,
            texture_seed: 0,
            aliasing: None,
        }
    }
}

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if !(self.extent > 0.0) {
            return cfg("world extent must be positive".into());
        }
        if self.render_size < 4 {
            return cfg("render_size must be at least 4".into());
        }
        if !(self.max_step_translation > 0.0 && self.max_step_yaw_deg > 0.0) {
            return cfg("step bounds must be positive".into());
        }
        if !(self.yaw_limit_deg > 0.0 && self.yaw_limit_deg <= 180.0) {
            return cfg("yaw limit must be in (0, 180]".into());
        }
        if !(self.z_range.0 > 0.0 && self.z_range.0 <= self.z_range.1) {
            return cfg("z_range must satisfy 0 < lo <= hi".into());
        }
        if !(self.footprint > 0.0) {
            return cfg("footprint must be positive".into());
        }
        if let Some(a) = &self.aliasing {
            if a.region_size[0] <= 0.0 || a.region_size[1] <= 0.0 {
                return cfg("aliasing regions must have positive size".into());
            }
            for min in [a.region_a_min, a.region_b_min] {
                if min[0] < 0.0
                    || min[1] < 0.0
                    || min[0] + a.region_size[0] > self.extent
                    || min[1] + a.region_size[1] > self.extent
                {
                    return cfg("aliasing regions must lie inside the world extent".into());
                }
            }
            if a.overlaps() {
                return cfg("aliasing regions must be disjoint".into());
            }
        }
        Ok(())
    }
}

/// Smooth periodic texture: per channel, a sum of seeded sinusoidal plane
/// waves squashed through tanh.
pub struct Texture {
    // (amplitude, omega_x, omega_y, phase) per component per channel
    components: Vec<Vec<(f64, f64, f64, f64)>>,
}

impl Texture {
    pub fn new(seed: u64, channels: usize) -> Self {
        let mut rng = Rng::new(seed).fork(0x746578);
        let components = (0..channels)
            .map(|_| {
                (0..10)
                    .map(|_| {
                        let angle = rng.uniform_in(0.0, std::f64::consts::TAU);
                        let cycles_per_m = rng.uniform_in(0.25, 1.8);
                        let omega = std::f64::consts::TAU * cycles_per_m;
                        (
                            rng.uniform_in(0.25, 0.6),
                            omega * angle.cos(),
                            omega * angle.sin(),
                            rng.uniform_in(0.0, std::f64::consts::TAU),
                        )
                    })
                    .collect()
            })
            .collect();
        Texture { components }
    }

    fn sample(&self, ch: usize, u: f64, v: f64) -> f64 {
        let s: f64 = self.components[ch]
            .iter()
            .map(|(a, wx, wy, phase)| a * (wx * u + wy * v + phase).sin())
            .sum();
        0.5 + 0.5 * (1.2 * s).tanh()
    }
}

fn yaw_of(q: &Quat) -> f64 {
    // Poses in this world rotate about z only.
    2.0 * q.z.atan2(q.w)
}

/// Deterministic rendering of a pose against the texture. Poses inside
/// aliasing region B are first translated into region A.
pub fn render(pose: &Pose, config: &SyntheticWorldConfig, texture: &Texture) -> ImageBuf {
    let mut px = pose.x[0];
    let mut py = pose.x[1];
    if let Some(alias) = &config.aliasing {
        if alias.in_region_b([px, py]) {
            px = px - alias.region_b_min[0] + alias.region_a_min[0];
            py = py - alias.region_b_min[1] + alias.region_a_min[1];
        }
    }
    let yaw = yaw_of(&pose.q);
    let (cy, sy) = (yaw.cos(), yaw.sin());
    let scale = config.footprint * pose.x[2];
    let shade = 1.0 + 0.1 * yaw.sin();
    let n = config.render_size;
    let half = n as f64 / 2.0;
    let mut img = ImageBuf::zeros(3, n, n);
    for r in 0..n {
        let vc = (r as f64 + 0.5 - half) * scale;
        for c in 0..n {
            let uc = (c as f64 + 0.5 - half) * scale;
            let u = px + cy * uc - sy * vc;
            let v = py + sy * uc + cy * vc;
            for ch in 0..3 {
                let val = (texture.sample(ch, u, v) * shade).clamp(0.0, 1.0);
                img.data[(ch * n + r) * n + c] = val;
            }
        }
    }
    img
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthFrame {
    pub index: usize,
    pub pose: Pose,
    /// Skipped by the manifest; pixels live in the image files.
    #[serde(skip, default = "placeholder_image")]
    pub image: ImageBuf,
}

fn placeholder_image() -> ImageBuf {
    ImageBuf {
        c: 0,
        h: 0,
        w: 0,
        data: Vec::new(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSequence {
    pub id: String,
    pub frames: Vec<SynthFrame>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthDataset {
    pub schema_version: String,
    pub seed: u64,
    pub config: SyntheticWorldConfig,
    /// Ids of sequences reserved for evaluation (the rest are the training
    /// split). Empty means no split was declared.
    #[serde(default)]
    pub test_sequences: Vec<String>,
    pub sequences: Vec<SynthSequence>,
}

fn waypoints(config: &SyntheticWorldConfig) -> Vec<[f64; 2]> {
    let e = config.extent;
    // With aliasing the walk crosses both regions along the same
    // within-region diagonal, so the two regions are observed at matching
    // interior offsets (maximally confusable for appearance-only models).
    // Otherwise it tours the world.
    if let Some(a) = &config.aliasing {
        let corner =
            |min: [f64; 2], t: f64| [min[0] + t * a.region_size[0], min[1] + t * a.region_size[1]];
        vec![
            corner(a.region_a_min, 0.2),
            corner(a.region_a_min, 0.8),
            corner(a.region_b_min, 0.2),
            corner(a.region_b_min, 0.8),
        ]
    } else {
        vec![
            [0.25 * e, 0.25 * e],
            [0.75 * e, 0.3 * e],
            [0.7 * e, 0.75 * e],
            [0.3 * e, 0.7 * e],
        ]
    }
}

fn generate_trajectory(
    config: &SyntheticWorldConfig,
    n_frames: usize,
    start_waypoint: usize,
    rng: &mut Rng,
) -> Result<Vec<Pose>> {
    let e = config.extent;
    let (lo, hi) = (0.03 * e, 0.97 * e);
    let pts = waypoints(config);
    let mut wp = start_waypoint % pts.len();
    let mut pos = [pts[wp][0], pts[wp][1]];
    let mut z = 0.5 * (config.z_range.0 + config.z_range.1);
    let mut yaw: f64 = 0.0;
    let max_step = config.max_step_translation;
    let mut out = Vec::with_capacity(n_frames);
    for _ in 0..n_frames {
        out.push(Pose::new([pos[0], pos[1], z], Quat::from_yaw_deg(yaw)));

        let target = pts[wp];
        let to_target = [target[0] - pos[0], target[1] - pos[1]];
        let dist = (to_target[0] * to_target[0] + to_target[1] * to_target[1]).sqrt();
        if dist < 0.08 * e {
            wp = (wp + 1) % pts.len();
        }
        let dir = if dist > 1e-9 {
            [to_target[0] / dist, to_target[1] / dist]
        } else {
            [1.0, 0.0]
        };
        // Resample the jitter until the step stays inside the world.
        let mut placed = false;
        for _attempt in 0..32 {
            let jx = rng.normal() * 0.15 * max_step;
            let jy = rng.normal() * 0.15 * max_step;
            let mut step = [dir[0] * 0.7 * max_step + jx, dir[1] * 0.7 * max_step + jy];
            let norm = (step[0] * step[0] + step[1] * step[1]).sqrt();
            if norm > max_step {
                step[0] *= max_step / norm;
                step[1] *= max_step / norm;
            }
            let cand = [pos[0] + step[0], pos[1] + step[1]];
            if cand[0] >= lo && cand[0] <= hi && cand[1] >= lo && cand[1] <= hi {
                pos = cand;
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Data(
                "synthetic trajectory could not stay inside the world extent".into(),
            ));
        }
        z = (z + rng.uniform_in(-0.01, 0.01) * (config.z_range.1 - config.z_range.0))
            .clamp(config.z_range.0, config.z_range.1);
        let target_yaw = dir[1].atan2(dir[0]).to_degrees();
        let mut delta = (target_yaw - yaw).rem_euclid(360.0);
        if delta > 180.0 {
            delta -= 360.0;
        }
        let max_turn = config.max_step_yaw_deg;
        let turn = delta.clamp(-0.8 * max_turn, 0.8 * max_turn)
            + rng.uniform_in(-0.2 * max_turn, 0.2 * max_turn);
        yaw = (yaw + turn.clamp(-max_turn, max_turn))
            .clamp(-config.yaw_limit_deg, config.yaw_limit_deg);
    }
    Ok(out)
}

/// Generate a deterministic synthetic dataset: `n_sequences` trajectories of
/// `n_frames` poses each, rendered against one shared texture field.
pub fn synth_generate(
    config: &SyntheticWorldConfig,
    n_frames: usize,
    n_sequences: usize,
    seed: u64,
) -> Result<SynthDataset> {
    config.validate()?;
    if n_frames == 0 {
        return Err(Error::Config("n_frames must be positive".into()));
    }
    if n_sequences == 0 {
        return Err(Error::Config("n_sequences must be positive".into()));
    }
    let texture = Texture::new(config.texture_seed, 3);
    let master = Rng::new(seed);
    let mut sequences = Vec::with_capacity(n_sequences);
    for s in 0..n_sequences {
        let mut rng = master.fork(0x7365 + s as u64);
        // Rotate the starting waypoint per sequence so short sequences
        // still cover the whole waypoint cycle between them.
        let poses = generate_trajectory(config, n_frames, s, &mut rng)?;
        let frames = poses
            .into_iter()
            .enumerate()
            .map(|(i, pose)| SynthFrame {
                index: i,
                pose,
                image: render(&pose, config, &texture),
            })
            .collect();
        sequences.push(SynthSequence {
            id: format!("seq-{s:02}"),
            frames,
        });
    }
    Ok(SynthDataset {
        schema_version: crate::VERSION.to_string(),
        seed,
        config: config.clone(),
        test_sequences: Vec::new(),
        sequences,
    })
}

impl SynthDataset {
    /// View as generic sequences for the training/evaluation pipeline.
    pub fn to_sequences(&self) -> Vec<Sequence> {
        self.sequences
            .iter()
            .map(|s| Sequence {
                id: s.id.clone(),
                frames: s
                    .frames
                    .iter()
                    .map(|f| FrameRecord {
                        sequence_id: s.id.clone(),
                        frame_index: f.index,
                        timestamp: None,
                        image: ImageSource::Loaded(f.image.clone()),
                        pose: f.pose,
                    })
                    .collect(),
            })
            .collect()
    }
}

/// Write a dataset as a manifest plus lossless image files. Refuses to
/// overwrite an existing manifest unless `force` is set.
pub fn write_dataset(ds: &SynthDataset, dir: &Path, force: bool) -> Result<()> {
    let manifest_path = dir.join("manifest.json");
    if manifest_path.exists() && !force {
        return Err(Error::Config(format!(
            "{} already exists; pass the overwrite flag to replace it",
            manifest_path.display()
        )));
    }
    fs::create_dir_all(dir)?;
    for seq in &ds.sequences {
        let seq_dir = dir.join("images").join(&seq.id);
        fs::create_dir_all(&seq_dir)?;
        for f in &seq.frames {
            super::write_png(&seq_dir.join(format!("frame-{:06}.png", f.index)), &f.image)?;
        }
    }
    let manifest =
        serde_json::to_string_pretty(ds).map_err(|e| Error::Data(format!("manifest: {e}")))?;
    fs::write(&manifest_path, manifest)?;
    Ok(())
}

/// Load a dataset written by [`write_dataset`]. Returns the dataset (with
/// images as quantized by the lossless files) and a content hash over the
/// manifest and all image bytes.
pub fn load_dataset(dir: &Path) -> Result<(SynthDataset, String)> {
    let manifest_path = dir.join("manifest.json");
    let manifest = fs::read(&manifest_path)
        .map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;
    let mut ds: SynthDataset = serde_json::from_slice(&manifest)
        .map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;
    ds.config.validate()?;
    let mut hash = fnv1a(&manifest);
    for seq in &mut ds.sequences {
        for f in &mut seq.frames {
            let path = dir
                .join("images")
                .join(&seq.id)
                .join(format!("frame-{:06}.png", f.index));
            let bytes =
                fs::read(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            hash ^= fnv1a(&bytes).rotate_left((f.index % 63) as u32);
            f.image = super::read_png(&path)?;
        }
    }
    Ok((ds, format!("{hash:016x}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::relative_motion;

    fn alias_config() -> SyntheticWorldConfig {
        SyntheticWorldConfig {
            aliasing: Some(AliasConfig {
                region_a_min: [1.0, 1.0],
                region_b_min: [7.0, 7.0],
                region_size: [2.0, 2.0],
            }),
            ..SyntheticWorldConfig::default()
        }
    }

    #[test]
    fn generation_is_bit_deterministic() {
        let config = SyntheticWorldConfig::default();
        let a = synth_generate(&config, 12, 2, 42).unwrap();
        let b = synth_generate(&config, 12, 2, 42).unwrap();
        for (sa, sb) in a.sequences.iter().zip(&b.sequences) {
            for (fa, fb) in sa.frames.iter().zip(&sb.frames) {
                assert_eq!(fa.pose, fb.pose);
                assert_eq!(fa.image.data, fb.image.data);
            }
        }
        let c = synth_generate(&config, 12, 2, 43).unwrap();
        assert_ne!(
            a.sequences[0].frames[5].pose, c.sequences[0].frames[5].pose,
            "different seeds should move differently"
        );
    }

    #[test]
    fn consecutive_poses_respect_motion_bounds() {
        let config = SyntheticWorldConfig::default();
        let ds = synth_generate(&config, 60, 1, 7).unwrap();
        for w in ds.sequences[0].frames.windows(2) {
            let rel = relative_motion(&w[1].pose, &w[0].pose).unwrap();
            let planar = (rel.x[0] * rel.x[0] + rel.x[1] * rel.x[1]).sqrt();
            assert!(
                planar <= config.max_step_translation + 1e-9,
                "step {planar}"
            );
            let dyaw = w[0].pose.q.angular_distance_deg(&w[1].pose.q);
            assert!(dyaw <= config.max_step_yaw_deg + 1e-9, "turn {dyaw}");
            assert!(w[1].pose.x[2] >= config.z_range.0 && w[1].pose.x[2] <= config.z_range.1);
        }
    }

    #[test]
    fn trajectory_stays_inside_the_world() {
        let config = alias_config();
        let ds = synth_generate(&config, 200, 1, 9).unwrap();
        for f in &ds.sequences[0].frames {
            assert!(f.pose.x[0] >= 0.0 && f.pose.x[0] <= config.extent);
            assert!(f.pose.x[1] >= 0.0 && f.pose.x[1] <= config.extent);
        }
    }

    #[test]
    fn aliased_regions_render_identically() {
        let config = alias_config();
        let texture = Texture::new(config.texture_seed, 3);
        // Exactly representable offset: region mins at 1.0 and 7.0.
        let pose_a = Pose::new([1.5, 1.25, 1.0], Quat::from_yaw_deg(20.0));
        let pose_b = Pose::new([7.5, 7.25, 1.0], Quat::from_yaw_deg(20.0));
        let img_a = render(&pose_a, &config, &texture);
        let img_b = render(&pose_b, &config, &texture);
        assert_eq!(
            img_a.data, img_b.data,
            "aliased poses must render identically"
        );

        // Outside the regions the renderer is informative: a different pose
        // gives a different image.
        let pose_c = Pose::new([4.0, 4.0, 1.0], Quat::from_yaw_deg(20.0));
        let img_c = render(&pose_c, &config, &texture);
        assert_ne!(img_a.data, img_c.data);
    }

    #[test]
    fn aliasing_waypoints_drive_the_walk_through_both_regions() {
        let config = alias_config();
        let ds = synth_generate(&config, 220, 1, 3).unwrap();
        let alias = config.aliasing.as_ref().unwrap();
        let mut hits_a = 0;
        let mut hits_b = 0;
        for f in &ds.sequences[0].frames {
            let p = [f.pose.x[0], f.pose.x[1]];
            if alias.in_region_a(p) {
                hits_a += 1;
            }
            if alias.in_region_b(p) {
                hits_b += 1;
            }
        }
        assert!(hits_a >= 5, "region A visited {hits_a} times");
        assert!(hits_b >= 5, "region B visited {hits_b} times");
    }

    #[test]
    fn zero_frames_is_an_error() {
        assert!(synth_generate(&SyntheticWorldConfig::default(), 0, 1, 1).is_err());
    }

    #[test]
    fn invalid_alias_regions_are_rejected() {
        let mut config = alias_config();
        config.aliasing = Some(AliasConfig {
            region_a_min: [1.0, 1.0],
            region_b_min: [2.0, 2.0],
            region_size: [3.0, 3.0],
        });
        assert!(config.validate().is_err(), "overlapping regions");
        config.aliasing = Some(AliasConfig {
            region_a_min: [9.0, 9.0],
            region_b_min: [1.0, 1.0],
            region_size: [2.0, 2.0],
        });
        assert!(config.validate().is_err(), "region outside extent");
    }

    #[test]
    fn dataset_round_trip_through_disk() {
        let dir = std::env::temp_dir().join(format!("synthds_{}", std::process::id()));
        std::fs::remove_dir_all(&dir).ok();
        let config = SyntheticWorldConfig {
            render_size: 8,
            ..SyntheticWorldConfig::default()
        };
        let ds = synth_generate(&config, 5, 2, 3).unwrap();
        write_dataset(&ds, &dir, false).unwrap();
        assert!(
            write_dataset(&ds, &dir, false).is_err(),
            "refuses to overwrite"
        );
        write_dataset(&ds, &dir, true).unwrap();
        let (loaded, hash1) = load_dataset(&dir).unwrap();
        assert_eq!(loaded.sequences.len(), 2);
        assert_eq!(loaded.sequences[0].frames.len(), 5);
        for (a, b) in ds.sequences[0]
            .frames
            .iter()
            .zip(&loaded.sequences[0].frames)
        {
            assert_eq!(a.pose, b.pose, "poses survive the manifest exactly");
            for (x, y) in a.image.data.iter().zip(&b.image.data) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-9, "quantization bound");
            }
        }
        let (_, hash2) = load_dataset(&dir).unwrap();
        assert_eq!(hash1, hash2, "content hash is stable");
        std::fs::remove_dir_all(&dir).ok();
    }
}
