//! Trajectory lists in the plain-text `timestamp tx ty tz qx qy qz qw`
//! format. Quaternions are reordered to the internal (w, x, y, z) layout,
//! normalized when needed and canonicalized on ingestion.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Pose, Quat};

use super::{ingest_quat, FrameRecord, ImageSource, Sequence};

#[derive(Debug)]
pub struct TumLoadResult {
    pub sequence: Sequence,
    pub warnings: Vec<String>,
}

/// Parse a trajectory file. Lines starting with '#' and blank lines are
/// skipped. Non-monotone timestamps produce a warning and a stable sort;
/// duplicated timestamps keep their original relative order.
pub fn load_tum_file(path: &Path) -> Result<TumLoadResult> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut entries: Vec<(f64, Pose)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<f64> = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|e| {
                    Error::Data(format!(
                        "{}:{}: bad number {tok:?}: {e}",
                        path.display(),
                        lineno + 1
                    ))
                })
            })
            .collect::<Result<_>>()?;
        if fields.len() != 8 {
            return Err(Error::Data(format!(
                "{}:{}: expected 8 fields (timestamp tx ty tz qx qy qz qw), found {}",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        let q = ingest_quat(Quat::new(fields[7], fields[4], fields[5], fields[6]))
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        entries.push((fields[0], Pose::new([fields[1], fields[2], fields[3]], q)));
    }
    let mut warnings = Vec::new();
    let monotone = entries.windows(2).all(|w| w[0].0 <= w[1].0);
    if !monotone {
        warnings.push(format!(
            "{}: timestamps are not monotone; records were stably sorted",
            path.display()
        ));
        entries.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite timestamps"));
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "trajectory".to_string());
    let frames = entries
        .into_iter()
        .enumerate()
        .map(|(i, (ts, pose))| FrameRecord {
            sequence_id: id.clone(),
            frame_index: i,
            timestamp: Some(ts),
            image: ImageSource::Loaded(super::ImageBuf::zeros(1, 1, 1)),
            pose,
        })
        .collect();
    Ok(TumLoadResult {
        sequence: Sequence { id, frames },
        warnings,
    })
}

/// Write records in the same format, shortest round-trip float formatting.
/// Frames must carry timestamps.
pub fn write_tum_file(path: &Path, frames: &[FrameRecord]) -> Result<()> {
    let mut text = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for f in frames {
        let ts = f
            .timestamp
            .ok_or_else(|| Error::Data(format!("frame {} has no timestamp", f.frame_index)))?;
        let (x, q) = (&f.pose.x, &f.pose.q);
        text.push_str(&format!(
            "{ts} {} {} {} {} {} {} {}\n",
            x[0], x[1], x[2], q.x, q.y, q.z, q.w
        ));
    }
    fs::write(path, text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(())
}
