//! Scene layout with per-frame pose files.
//!
//! Layout: `<root>/seq-NN/frame-NNNNNN.color.png` plus
//! `frame-NNNNNN.pose.txt` holding a 4x4 row-major homogeneous
//! camera-to-world transform as 16 whitespace-separated reals, and
//! `TrainSplit.txt` / `TestSplit.txt` at the root listing sequence numbers
//! (one per line, e.g. `sequence1` or `seq-01` or a bare number).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{matrix_to_pose, pose_to_matrix, Pose};

use super::{ingest_quat, FrameRecord, ImageSource, Sequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    All,
}

/// Parse a 4x4 homogeneous transform file into a pose.
pub fn read_pose_file(path: &Path) -> Result<Pose> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let values: Vec<f64> = text
        .split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|e| Error::Data(format!("{}: bad number {tok:?}: {e}", path.display())))
        })
        .collect::<Result<_>>()?;
    if values.len() != 16 {
        return Err(Error::Data(format!(
            "{}: expected 16 values, found {}",
            path.display(),
            values.len()
        )));
    }
    let mut m = [[0.0; 4]; 4];
    for (i, v) in values.iter().enumerate() {
        m[i / 4][i % 4] = *v;
    }
    let pose = matrix_to_pose(&m).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(Pose {
        x: pose.x,
        q: ingest_quat(pose.q)?,
    })
}

/// Write a pose as a 4x4 transform, four values per line, shortest
/// round-trip float formatting.
pub fn write_pose_file(path: &Path, pose: &Pose) -> Result<()> {
    let m = pose_to_matrix(pose);
    let mut text = String::new();
    for row in &m {
        text.push_str(&format!("{} {} {} {}\n", row[0], row[1], row[2], row[3]));
    }
    fs::write(path, text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn parse_split_line(line: &str) -> Option<usize> {
    let digits: String = line.chars().filter(|c| c.is_ascii_digit()).collect();
    digits.parse().ok()
}

fn read_split_file(path: &Path) -> Result<Vec<usize>> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match parse_split_line(line) {
            Some(n) => out.push(n),
            None => {
                return Err(Error::Data(format!(
                    "{}: cannot parse sequence number from {line:?}",
                    path.display()
                )))
            }
        }
    }
    Ok(out)
}

fn load_sequence_dir(dir: &Path, id: String) -> Result<Sequence> {
    let mut indices = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))? {
        let entry = entry.map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(rest) = name.strip_prefix("frame-") {
            if let Some(num) = rest.strip_suffix(".pose.txt") {
                let idx: usize = num.parse().map_err(|_| {
                    Error::Data(format!("{}: bad frame number in {name}", dir.display()))
                })?;
                indices.push(idx);
            }
        }
    }
    if indices.is_empty() {
        return Err(Error::Data(format!(
            "{}: no pose files found",
            dir.display()
        )));
    }
    indices.sort_unstable();
    let mut frames = Vec::with_capacity(indices.len());
    for idx in indices {
        let pose_path = dir.join(format!("frame-{idx:06}.pose.txt"));
        let image_path = dir.join(format!("frame-{idx:06}.color.png"));
        if !image_path.exists() {
            return Err(Error::Data(format!(
                "missing image file {}",
                image_path.display()
            )));
        }
        frames.push(FrameRecord {
            sequence_id: id.clone(),
            frame_index: idx,
            timestamp: None,
            image: ImageSource::OnDisk(image_path),
            pose: read_pose_file(&pose_path)?,
        });
    }
    let seq = Sequence { id, frames };
    seq.validate()?;
    Ok(seq)
}

/// Load a scene directory, honoring its split files.
pub fn load_scene(root: &Path, split: Split) -> Result<Vec<Sequence>> {
    let seq_numbers: Vec<usize> = match split {
        Split::Train => read_split_file(&root.join("TrainSplit.txt"))?,
        Split::Test => read_split_file(&root.join("TestSplit.txt"))?,
        Split::All => {
            let mut nums = Vec::new();
            for entry in
                fs::read_dir(root).map_err(|e| Error::Data(format!("{}: {e}", root.display())))?
            {
                let entry = entry.map_err(|e| Error::Data(format!("{}: {e}", root.display())))?;
                let name = entry.file_name().to_string_lossy().into_owned();
                if let Some(rest) = name.strip_prefix("seq-") {
                    if let Ok(n) = rest.parse::<usize>() {
                        nums.push(n);
                    }
                }
            }
            nums.sort_unstable();
            nums
        }
    };
    if seq_numbers.is_empty() {
        return Err(Error::Data(format!(
            "{}: no sequences selected",
            root.display()
        )));
    }
    seq_numbers
        .into_iter()
        .map(|n| {
            let id = format!("seq-{n:02}");
            load_sequence_dir(&root.join(&id), id)
        })
        .collect()
}

/// Export sequences in the scene layout (used for fixtures and round-trip
/// tests); images must be loaded in memory.
pub fn write_scene(root: &Path, train: &[Sequence], test: &[Sequence]) -> Result<()> {
    fs::create_dir_all(root)?;
    let write_split = |name: &str, seqs: &[Sequence]| -> Result<()> {
        let mut text = String::new();
        for s in seqs {
            let n: String = s.id.chars().filter(|c| c.is_ascii_digit()).collect();
            text.push_str(&format!("sequence{}\n", n.parse::<usize>().unwrap_or(0)));
        }
        fs::write(root.join(name), text)?;
        Ok(())
    };
    write_split("TrainSplit.txt", train)?;
    write_split("TestSplit.txt", test)?;
    for seq in train.iter().chain(test) {
        let dir = root.join(&seq.id);
        fs::create_dir_all(&dir)?;
        for f in &seq.frames {
            write_pose_file(
                &dir.join(format!("frame-{:06}.pose.txt", f.frame_index)),
                &f.pose,
            )?;
            let img = f.image.load()?;
            super::write_png(
                &dir.join(format!("frame-{:06}.color.png", f.frame_index)),
                &img,
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageBuf;
    use crate::geometry::Quat;
    use crate::rng::Rng;
    use std::path::PathBuf;

    fn tmpdir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("scene_{tag}_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn identity_pose_file_parses_to_identity() {
        let dir = tmpdir("identity");
        let path = dir.join("frame-000000.pose.txt");
        std::fs::write(&path, "1 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1\n").unwrap();
        let pose = read_pose_file(&path).unwrap();
        assert_eq!(pose.x, [0.0; 3]);
        assert_eq!(pose.q, Quat::IDENTITY);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn malformed_pose_files_are_rejected_with_path() {
        let dir = tmpdir("malformed");
        let short = dir.join("short.pose.txt");
        std::fs::write(&short, "1 0 0\n").unwrap();
        let err = read_pose_file(&short).unwrap_err().to_string();
        assert!(err.contains("short.pose.txt"), "{err}");
        assert!(err.contains("16"), "{err}");

        let skewed = dir.join("skewed.pose.txt");
        std::fs::write(&skewed, "1 0.5 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1\n").unwrap();
        let err = read_pose_file(&skewed).unwrap_err().to_string();
        assert!(err.contains("orthonormal"), "{err}");

        let garbled = dir.join("garbled.pose.txt");
        std::fs::write(&garbled, "1 0 0 zero\n0 1 0 0\n0 0 1 0\n0 0 0 1\n").unwrap();
        assert!(read_pose_file(&garbled).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn pose_write_read_round_trip() {
        let dir = tmpdir("roundtrip");
        let mut rng = Rng::new(17);
        for i in 0..50 {
            let q = loop {
                let q = Quat::new(rng.normal(), rng.normal(), rng.normal(), rng.normal());
                if q.norm() > 0.1 {
                    break q.normalized().unwrap();
                }
            };
            let pose = Pose::new(
                [
                    rng.uniform_in(-5.0, 5.0),
                    rng.uniform_in(-5.0, 5.0),
                    rng.uniform_in(-5.0, 5.0),
                ],
                q,
            );
            let path = dir.join(format!("frame-{i:06}.pose.txt"));
            write_pose_file(&path, &pose).unwrap();
            let back = read_pose_file(&path).unwrap();
            let (ma, mb) = (pose_to_matrix(&pose), pose_to_matrix(&back));
            let mut dev = 0.0f64;
            for r in 0..4 {
                for c in 0..4 {
                    dev = dev.max((ma[r][c] - mb[r][c]).abs());
                }
            }
            assert!(dev < 1e-9, "round-trip deviation {dev}");
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn scene_round_trip_and_splits() {
        let dir = tmpdir("scene");
        let make_seq = |id: &str, n: usize, offset: f64| Sequence {
            id: id.to_string(),
            frames: (0..n)
                .map(|i| FrameRecord {
                    sequence_id: id.to_string(),
                    frame_index: i,
                    timestamp: None,
                    image: ImageSource::Loaded(ImageBuf::zeros(3, 4, 4)),
                    pose: Pose::new([offset + i as f64, 0.0, 0.0], Quat::IDENTITY),
                })
                .collect(),
        };
        let train = vec![make_seq("seq-01", 3, 0.0)];
        let test = vec![make_seq("seq-02", 2, 10.0)];
        write_scene(&dir, &train, &test).unwrap();

        let loaded_train = load_scene(&dir, Split::Train).unwrap();
        assert_eq!(loaded_train.len(), 1);
        assert_eq!(loaded_train[0].frames.len(), 3);
        assert_eq!(loaded_train[0].frames[2].pose.x[0], 2.0);
        let loaded_test = load_scene(&dir, Split::Test).unwrap();
        assert_eq!(loaded_test[0].frames.len(), 2);
        let all = load_scene(&dir, Split::All).unwrap();
        assert_eq!(all.len(), 2);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn split_lines_accept_common_forms() {
        assert_eq!(parse_split_line("sequence1"), Some(1));
        assert_eq!(parse_split_line("seq-07"), Some(7));
        assert_eq!(parse_split_line("12"), Some(12));
        assert_eq!(parse_split_line("nonsense"), None);
    }

    #[test]
    fn missing_pose_dir_is_an_error() {
        let dir = tmpdir("missing");
        assert!(load_scene(&dir.join("nope"), Split::All).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
