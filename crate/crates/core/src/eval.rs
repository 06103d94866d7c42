//! Localization and odometry metrics, and report emission.
//!
//! Localization errors are the Euclidean translation distance in meters and
//! the geodesic rotation angle in degrees (sign-invariant under the
//! quaternion double cover). Odometry error follows a windowed protocol:
//! predicted relative motions are integrated from each window's start pose
//! and compared against the groundtruth endpoint, normalized by the window's
//! groundtruth path length; windows span 25/50/75/100% of each sequence's
//! path length at stride 1. A per-pair mode is available for comparison.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{compose, translation_distance, Pose, RelativeMotion};

/// Per-frame localization errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseErrors {
    pub frame_ids: Vec<usize>,
    pub translation_m: Vec<f64>,
    pub orientation_deg: Vec<f64>,
}

/// Translation and orientation error per aligned frame.
pub fn localization_errors(predictions: &[Pose], groundtruth: &[Pose]) -> Result<PoseErrors> {
    if predictions.len() != groundtruth.len() {
        return Err(Error::Data(format!(
            "localization_errors: {} predictions vs {} groundtruth frames",
            predictions.len(),
            groundtruth.len()
        )));
    }
    let mut translation = Vec::with_capacity(predictions.len());
    let mut orientation = Vec::with_capacity(predictions.len());
    for (p, g) in predictions.iter().zip(groundtruth) {
        translation.push(translation_distance(&p.x, &g.x));
        orientation.push(p.q.angular_distance_deg(&g.q));
    }
    Ok(PoseErrors {
        frame_ids: (0..predictions.len()).collect(),
        translation_m: translation,
        orientation_deg: orientation,
    })
}

/// Median: the middle order statistic, or the mean of the two middle order
/// statistics for even counts. Implemented by selection, not a full sort.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Data("median of an empty set".into()));
    }
    let mut work = values.to_vec();
    let n = work.len();
    let (_, mid, _) = work.select_nth_unstable_by(n / 2, |a, b| a.total_cmp(b));
    let hi = *mid;
    if n % 2 == 1 {
        Ok(hi)
    } else {
        let (left, _, _) = work.select_nth_unstable_by(n / 2, |a, b| a.total_cmp(b));
        let lo = left.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok((lo + hi) / 2.0)
    }
}

/// Fraction of errors at or below each threshold. Thresholds must be
/// strictly increasing and the last must cover the maximum error.
pub fn cumulative_histogram(errors: &[f64], thresholds: &[f64]) -> Result<Vec<f64>> {
    if errors.is_empty() {
        return Err(Error::Data(
            "cumulative_histogram of an empty error set".into(),
        ));
    }
    if thresholds.is_empty() {
        return Err(Error::Config(
            "cumulative_histogram needs thresholds".into(),
        ));
    }
    for w in thresholds.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::Config(format!(
                "thresholds must be strictly increasing ({} after {})",
                w[1], w[0]
            )));
        }
    }
    let max_err = errors.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let last = *thresholds.last().expect("non-empty");
    if last < max_err {
        return Err(Error::Config(format!(
            "final threshold {last} is below the maximum error {max_err}"
        )));
    }
    let n = errors.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&t| errors.iter().filter(|&&e| e <= t).count() as f64 / n)
        .collect())
}

/// Evenly spaced thresholds ending exactly at the maximum error.
pub fn auto_thresholds(errors: &[f64], bins: usize) -> Vec<f64> {
    let max_err = errors.iter().copied().fold(0.0f64, f64::max);
    if max_err == 0.0 {
        return vec![0.0];
    }
    let mut out: Vec<f64> = (1..bins)
        .map(|i| max_err * i as f64 / bins as f64)
        .collect();
    out.push(max_err);
    out.dedup();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoConfig {
    /// Window lengths as fractions of each sequence's total path length.
    pub window_fractions: Vec<f64>,
    /// Evaluate each consecutive pair as its own window instead.
    pub per_pair: bool,
}

impl Default for VoConfig {
    fn default() -> Self {
        VoConfig {
            window_fractions: vec![0.25, 0.5, 0.75, 1.0],
            per_pair: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoSummary {
    /// Mean endpoint translation error as a percentage of window path length.
    pub translation_percent: f64,
    /// Mean endpoint rotation error in degrees per meter of path.
    pub rotation_deg_per_m: f64,
    pub windows: usize,
    pub skipped: usize,
}

/// Windowed odometry error of predicted relative motions against the
/// groundtruth trajectory of one sequence.
pub fn vo_metrics(
    predicted_rel: &[RelativeMotion],
    gt_poses: &[Pose],
    config: &VoConfig,
) -> Result<VoSummary> {
    if gt_poses.len() < 2 {
        return Err(Error::Data("vo_metrics needs at least two poses".into()));
    }
    if predicted_rel.len() + 1 != gt_poses.len() {
        return Err(Error::Data(format!(
            "vo_metrics: {} relative predictions for {} poses (need len-1)",
            predicted_rel.len(),
            gt_poses.len()
        )));
    }
    // Cumulative groundtruth path length.
    let mut cum = Vec::with_capacity(gt_poses.len());
    cum.push(0.0);
    for w in gt_poses.windows(2) {
        let d = translation_distance(&w[0].x, &w[1].x);
        cum.push(cum.last().expect("non-empty") + d);
    }
    let total = *cum.last().expect("non-empty");

    let mut windows: Vec<(usize, usize)> = Vec::new();
    if config.per_pair {
        windows.extend((0..predicted_rel.len()).map(|i| (i, i + 1)));
    } else {
        for &frac in &config.window_fractions {
            let target = frac * total;
            for start in 0..gt_poses.len() - 1 {
                // First frame whose accumulated distance covers the target.
                let mut end = None;
                for j in (start + 1)..gt_poses.len() {
                    if cum[j] - cum[start] >= target - 1e-12 {
                        end = Some(j);
                        break;
                    }
                }
                match end {
                    Some(j) => windows.push((start, j)),
                    None => break, // remaining starts cover even less path
                }
            }
        }
    }

    let mut sum_trans_pct = 0.0;
    let mut sum_rot_per_m = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for (start, end) in windows {
        let path_len = cum[end] - cum[start];
        if path_len <= 0.0 {
            skipped += 1;
            continue;
        }
        let mut pred = gt_poses[start];
        for rel in &predicted_rel[start..end] {
            pred = compose(&pred, rel)?;
        }
        let trans_err = translation_distance(&pred.x, &gt_poses[end].x);
        let rot_err = pred.q.angular_distance_deg(&gt_poses[end].q);
        sum_trans_pct += 100.0 * trans_err / path_len;
        sum_rot_per_m += rot_err / path_len;
        used += 1;
    }
    if used == 0 {
        return Ok(VoSummary {
            translation_percent: 0.0,
            rotation_deg_per_m: 0.0,
            windows: 0,
            skipped,
        });
    }
    Ok(VoSummary {
        translation_percent: sum_trans_pct / used as f64,
        rotation_deg_per_m: sum_rot_per_m / used as f64,
        windows: used,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub thresholds: Vec<f64>,
    pub fractions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneReport {
    pub scene: String,
    pub frames: usize,
    pub median_translation_m: f64,
    pub median_orientation_deg: f64,
    pub histogram_translation: Histogram,
    pub histogram_orientation: Histogram,
    pub vo: Option<VoSummary>,
    pub per_frame: PoseErrors,
}

impl SceneReport {
    /// Build a scene report from per-frame errors (histograms over 20 bins).
    pub fn from_errors(
        scene: &str,
        errors: PoseErrors,
        vo: Option<VoSummary>,
    ) -> Result<SceneReport> {
        let t_thresholds = auto_thresholds(&errors.translation_m, 20);
        let o_thresholds = auto_thresholds(&errors.orientation_deg, 20);
        Ok(SceneReport {
            scene: scene.to_string(),
            frames: errors.frame_ids.len(),
            median_translation_m: median(&errors.translation_m)?,
            median_orientation_deg: median(&errors.orientation_deg)?,
            histogram_translation: Histogram {
                fractions: cumulative_histogram(&errors.translation_m, &t_thresholds)?,
                thresholds: t_thresholds,
            },
            histogram_orientation: Histogram {
                fractions: cumulative_histogram(&errors.orientation_deg, &o_thresholds)?,
                thresholds: o_thresholds,
            },
            vo,
            per_frame: errors,
        })
    }
}

/// Provenance stamped into every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub schema_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub dataset_hash: String,
    /// The first frame of each sequence receives the groundtruth previous
    /// pose; all later frames receive the model's prediction.
    pub first_frame_uses_groundtruth_prev: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metadata: RunMetadata,
    pub scenes: Vec<SceneReport>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<MetricsReport> {
        serde_json::from_str(text).map_err(|e| Error::Data(format!("metrics report: {e}")))
    }

    /// Tabular medians: one row per scene and component.
    pub fn medians_csv(&self) -> String {
        let mut out = String::from("scene,component,median\n");
        for s in &self.scenes {
            out.push_str(&format!(
                "{},translation_m,{}\n",
                s.scene, s.median_translation_m
            ));
            out.push_str(&format!(
                "{},orientation_deg,{}\n",
                s.scene, s.median_orientation_deg
            ));
        }
        out
    }
}

fn histogram_csv(h: &Histogram) -> String {
    let mut out = String::from("threshold,fraction\n");
    for (t, f) in h.thresholds.iter().zip(&h.fractions) {
        out.push_str(&format!("{t},{f}\n"));
    }
    out
}

/// Write the report files: full JSON, tabular medians, and per-scene
/// cumulative histograms. Returns the written paths.
pub fn emit_report(report: &MetricsReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let json_path = dir.join("report.json");
    fs::write(&json_path, report.to_json())?;
    written.push(json_path);
    let medians_path = dir.join("medians.csv");
    fs::write(&medians_path, report.medians_csv())?;
    written.push(medians_path);
    for s in &report.scenes {
        for (tag, h) in [
            ("translation", &s.histogram_translation),
            ("orientation", &s.histogram_orientation),
        ] {
            let path = dir.join(format!("histogram_{}_{tag}.csv", s.scene));
            fs::write(&path, histogram_csv(h))?;
            written.push(path);
        }
    }
    Ok(written)
}
