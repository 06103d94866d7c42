//! Command implementations: synth, train, eval, gradcheck, sweep.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use campose::data::synth::{load_dataset, synth_generate, write_dataset};
use campose::data::{
    assemble_samples, compute_mean_image, preprocess, sevenscenes, ImageBuf, PreprocessConfig,
    PreprocessMode, Sequence,
};
use campose::error::{Error, Result};
use campose::eval::{
    emit_report, localization_errors, vo_metrics, MetricsReport, PoseErrors, RunMetadata,
    SceneReport, VoConfig, VoSummary,
};
use campose::geometry::Pose;
use campose::losses::loss_suite;
use campose::model::{config_hash, load_checkpoint, save_checkpoint, Group, ModelParams};
use campose::optim::{fit, predict_sequence, records_to_csv};
use campose::rng::Rng;
use campose::tensor::gradcheck::{
    fnv1a, grad_check_with_fault, primitive_suite, SuiteRow, DEFAULT_STEP,
};
use campose::tensor::Tensor;

use crate::config::RunConfig;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitSel {
    Train,
    Test,
    All,
}

impl SplitSel {
    pub fn parse(s: &str) -> Result<SplitSel> {
        match s {
            "train" => Ok(SplitSel::Train),
            "test" => Ok(SplitSel::Test),
            "all" => Ok(SplitSel::All),
            other => Err(Error::Config(format!(
                "split must be train|test|all, got {other:?}"
            ))),
        }
    }
}

/// A dataset directory resolved to sequences of one split plus a content
/// hash. Synthetic datasets are recognized by their manifest; anything else
/// must be a scene layout with split files.
pub struct LoadedDataset {
    pub name: String,
    pub sequences: Vec<Sequence>,
    pub hash: String,
}

pub fn load_dataset_dir(path: &Path, split: SplitSel) -> Result<LoadedDataset> {
    if !path.exists() {
        return Err(Error::Data(format!(
            "dataset path {} does not exist",
            path.display()
        )));
    }
    let name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    if path.join("manifest.json").exists() {
        let (ds, hash) = load_dataset(path)?;
        let mut sequences = ds.to_sequences();
        if !ds.test_sequences.is_empty() {
            match split {
                SplitSel::Train => sequences.retain(|s| !ds.test_sequences.contains(&s.id)),
                SplitSel::Test => sequences.retain(|s| ds.test_sequences.contains(&s.id)),
                SplitSel::All => {}
            }
        }
        if sequences.is_empty() {
            return Err(Error::Data(format!(
                "dataset {} has no sequences in the requested split",
                path.display()
            )));
        }
        Ok(LoadedDataset {
            name,
            sequences,
            hash,
        })
    } else if path.join("TrainSplit.txt").exists() || path.join("TestSplit.txt").exists() {
        let scene_split = match split {
            SplitSel::Train => sevenscenes::Split::Train,
            SplitSel::Test => sevenscenes::Split::Test,
            SplitSel::All => sevenscenes::Split::All,
        };
        let sequences = sevenscenes::load_scene(path, scene_split)?;
        // Content hash over split files and pose files, in deterministic order.
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        for name in ["TrainSplit.txt", "TestSplit.txt"] {
            if let Ok(bytes) = fs::read(path.join(name)) {
                hash ^= fnv1a(&bytes);
            }
        }
        for seq in &sequences {
            for f in &seq.frames {
                let pose_path = path
                    .join(&seq.id)
                    .join(format!("frame-{:06}.pose.txt", f.frame_index));
                let bytes = fs::read(&pose_path)
                    .map_err(|e| Error::Data(format!("{}: {e}", pose_path.display())))?;
                hash ^= fnv1a(&bytes).rotate_left((f.frame_index % 63) as u32);
            }
        }
        Ok(LoadedDataset {
            name,
            sequences,
            hash: format!("{hash:016x}"),
        })
    } else {
        Err(Error::Data(format!(
            "{} is neither a synthetic dataset (manifest.json) nor a scene layout (TrainSplit.txt)",
            path.display()
        )))
    }
}

fn require_path(cfg: &RunConfig, key: &str) -> Result<PathBuf> {
    cfg.get(key)
        .map(PathBuf::from)
        .ok_or_else(|| Error::Config(format!("missing required config key {key}")))
}

/// Resolved-config file with provenance header comments.
fn write_resolved_config(cfg: &RunConfig, dir: &Path, dataset_hash: Option<&str>) -> Result<()> {
    let mut text = String::new();
    let _ = writeln!(text, "# config_hash = {}", cfg.hash());
    let _ = writeln!(text, "# library_version = {}", campose::VERSION);
    if let Some(h) = dataset_hash {
        let _ = writeln!(text, "# dataset_hash = {h}");
    }
    text.push_str(&cfg.to_text());
    fs::write(dir.join("config.resolved.txt"), text)?;
    Ok(())
}

// ── synth ───────────────────────────────────────────────────────────

/// Generate a synthetic dataset on disk. Returns the content hash.
pub fn cmd_synth(cfg: &RunConfig, force: bool) -> Result<String> {
    let out = require_path(cfg, "out")?;
    let world = cfg.synth_world()?;
    let frames = cfg.get_usize("synth.frames")?;
    let n_seq = cfg.get_usize("synth.sequences")?;
    let n_test = cfg.get_usize("synth.test_sequences")?;
    if n_test >= n_seq && n_test > 0 {
        return Err(Error::Config(format!(
            "synth.test_sequences {n_test} must be below synth.sequences {n_seq}"
        )));
    }
    let seed = cfg.get_u64("seed")?;
    let mut ds = synth_generate(&world, frames, n_seq, seed)?;
    ds.test_sequences = ds
        .sequences
        .iter()
        .rev()
        .take(n_test)
        .map(|s| s.id.clone())
        .collect();
    write_dataset(&ds, &out, force)?;
    write_resolved_config(cfg, &out, None)?;
    let (_, hash) = load_dataset(&out)?;
    Ok(hash)
}

// ── train ───────────────────────────────────────────────────────────

pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub curve: PathBuf,
    pub final_loss: f64,
}

fn preprocess_config(cfg: &RunConfig, train_seqs: &[Sequence]) -> Result<PreprocessConfig> {
    let rescale = cfg.get_usize("preprocess.rescale")?;
    let crop = cfg.get_usize("preprocess.crop")?;
    let mean = if cfg.get_bool("preprocess.mean")? {
        let images = train_seqs
            .iter()
            .flat_map(|s| s.frames.iter())
            .map(|f| f.image.load());
        Some(compute_mean_image(images, rescale)?)
    } else {
        None
    };
    Ok(PreprocessConfig {
        rescale_short_side: rescale,
        crop,
        mean,
    })
}

/// Train a model per the config and write checkpoint, loss curves and the
/// resolved config. The dataset is validated before any output is created.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let dataset_path = require_path(cfg, "dataset")?;
    let out = require_path(cfg, "out")?;
    let net = cfg.network()?;
    let train_cfg = cfg.train()?;
    let split = SplitSel::parse(cfg.get("train.split").unwrap_or("train"))?;

    // Everything that can fail cheaply happens before outputs are created.
    let ds = load_dataset_dir(&dataset_path, split)?;
    let pre = preprocess_config(cfg, &ds.sequences)?;
    let seed = cfg.get_u64("seed")?;
    let mut sample_rng = Rng::new(seed).fork(0x646174);
    let samples = assemble_samples(&ds.sequences, &pre, PreprocessMode::Train, &mut sample_rng)?;

    let mut params = ModelParams::build(&net, seed, cfg.scale_global()?, cfg.scale_vo()?)?;
    let required: Vec<&str> = cfg
        .get("init.require")
        .map(|s| s.split(',').map(str::trim).collect())
        .unwrap_or_default();
    for need in &required {
        let key = format!("init.{need}");
        if cfg.get(&key).is_none() {
            return Err(Error::Config(format!(
                "preset requires {key} to point at a checkpoint"
            )));
        }
    }
    let init_global = cfg.get("init.global").map(PathBuf::from);
    let init_vo = cfg.get("init.vo").map(PathBuf::from);
    if let Some(path) = &init_global {
        let donor = load_checkpoint(path)?;
        params.adopt_groups(
            &donor.params,
            &[
                Group::Shared,
                Group::GlobalOnly,
                Group::HeadsGlobal,
                Group::ScaleGlobal,
            ],
        )?;
    }
    if let Some(path) = &init_vo {
        let donor = load_checkpoint(path)?;
        let mut groups = vec![Group::OdomOnly, Group::HeadsOdom, Group::ScaleVo];
        if init_global.is_none() {
            // Without a global donor the shared trunk comes from the
            // odometry checkpoint.
            groups.push(Group::Shared);
        }
        params.adopt_groups(&donor.params, &groups)?;
    }

    let records = fit(&mut params, &samples, &train_cfg, None)?;

    fs::create_dir_all(&out)?;
    write_resolved_config(cfg, &out, Some(&ds.hash))?;
    let curve_path = out.join("loss_curve.csv");
    let mut curve = String::new();
    let _ = writeln!(curve, "# config_hash = {}", cfg.hash());
    let _ = writeln!(curve, "# library_version = {}", campose::VERSION);
    let _ = writeln!(curve, "# seed = {seed}");
    curve.push_str(&records_to_csv(&records));
    fs::write(&curve_path, curve)?;

    let mut aux = BTreeMap::new();
    aux.insert(
        "aux.preprocess.dims".to_string(),
        Tensor::vector(vec![pre.rescale_short_side as f64, pre.crop as f64]),
    );
    if let Some(mean) = &pre.mean {
        aux.insert(
            "aux.preprocess.mean_image".to_string(),
            Tensor::new(vec![mean.c, mean.h, mean.w], mean.data.clone())?,
        );
    }
    let mut meta = BTreeMap::new();
    meta.insert("run_config_hash".to_string(), cfg.hash());
    meta.insert("dataset_hash".to_string(), ds.hash.clone());
    meta.insert("seed".to_string(), seed.to_string());
    let ckpt_path = out.join("checkpoint.ckpt");
    save_checkpoint(&ckpt_path, &params, &aux, &meta)?;

    Ok(TrainOutcome {
        out_dir: out,
        checkpoint: ckpt_path,
        curve: curve_path,
        final_loss: records.last().map(|r| r.l_total).unwrap_or(f64::NAN),
    })
}

// ── eval ────────────────────────────────────────────────────────────

pub struct EvalOutcome {
    pub report: MetricsReport,
    pub files: Vec<PathBuf>,
}

/// Evaluate a checkpoint on a dataset split: sequential global predictions
/// (model's own previous pose, groundtruth anchor on each sequence's first
/// frame) and odometry metrics, written as report files.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalOutcome> {
    let ckpt_path = require_path(cfg, "checkpoint")?;
    let dataset_path = require_path(cfg, "dataset")?;
    let out = require_path(cfg, "out")?;
    let split = SplitSel::parse(cfg.get("eval.split").unwrap_or("test"))?;
    let per_pair = cfg.get_bool("eval.per_pair")?;

    let ck = load_checkpoint(&ckpt_path)?;
    let ds = load_dataset_dir(&dataset_path, split)?;

    let dims = ck
        .aux
        .get("aux.preprocess.dims")
        .ok_or_else(|| Error::Data("checkpoint lacks preprocessing dimensions".into()))?;
    let mean = ck.aux.get("aux.preprocess.mean_image").map(|t| ImageBuf {
        c: t.shape()[0],
        h: t.shape()[1],
        w: t.shape()[2],
        data: t.data().to_vec(),
    });
    let pre = PreprocessConfig {
        rescale_short_side: dims.data()[0] as usize,
        crop: dims.data()[1] as usize,
        mean,
    };

    let net = ck.params.config();
    if let Some(expected) = cfg.get("eval.expect_config_hash") {
        let actual = config_hash(net);
        if expected != actual {
            return Err(Error::Config(format!(
                "config hash mismatch: checkpoint has {actual}, caller expected {expected}"
            )));
        }
    }
    let mut rng = Rng::new(0);
    let probe = preprocess(
        &ds.sequences[0].frames[0].image.load()?,
        &pre,
        PreprocessMode::Eval,
        &mut rng,
    )?;
    let expect = [net.input_c, net.input_h, net.input_w];
    if probe.shape() != expect {
        return Err(Error::Config(format!(
            "config hash mismatch: checkpoint {} expects input {:?}, dataset {} preprocesses to {:?}",
            config_hash(net),
            expect,
            ds.name,
            probe.shape()
        )));
    }

    let mut all_errors = PoseErrors {
        frame_ids: Vec::new(),
        translation_m: Vec::new(),
        orientation_deg: Vec::new(),
    };
    let mut vo_parts: Vec<VoSummary> = Vec::new();
    let vo_cfg = VoConfig {
        per_pair,
        ..VoConfig::default()
    };
    for seq in &ds.sequences {
        let mut rng = Rng::new(0);
        let tensors: Vec<Tensor> = seq
            .frames
            .iter()
            .map(|f| preprocess(&f.image.load()?, &pre, PreprocessMode::Eval, &mut rng))
            .collect::<Result<_>>()?;
        let gt: Vec<Pose> = seq.frames.iter().map(|f| f.pose).collect();
        let (pred, rels) = predict_sequence(&ck.params, &tensors, &gt[0])?;
        let errs = localization_errors(&pred, &gt)?;
        let base = all_errors.frame_ids.len();
        all_errors
            .frame_ids
            .extend(errs.frame_ids.iter().map(|i| base + i));
        all_errors.translation_m.extend(errs.translation_m);
        all_errors.orientation_deg.extend(errs.orientation_deg);
        if gt.len() >= 2 {
            vo_parts.push(vo_metrics(&rels, &gt, &vo_cfg)?);
        }
    }
    let vo = aggregate_vo(&vo_parts);
    let seed = cfg.get_u64("seed")?;
    let report = MetricsReport {
        metadata: RunMetadata {
            schema_version: campose::VERSION.to_string(),
            config_hash: config_hash(net),
            seed,
            dataset_hash: ds.hash.clone(),
            first_frame_uses_groundtruth_prev: true,
        },
        scenes: vec![SceneReport::from_errors(&ds.name, all_errors, vo)?],
    };
    fs::create_dir_all(&out)?;
    write_resolved_config(cfg, &out, Some(&ds.hash))?;
    let files = emit_report(&report, &out)?;
    Ok(EvalOutcome { report, files })
}

fn aggregate_vo(parts: &[VoSummary]) -> Option<VoSummary> {
    let total_windows: usize = parts.iter().map(|p| p.windows).sum();
    if parts.is_empty() || total_windows == 0 {
        return None;
    }
    let wsum = |f: fn(&VoSummary) -> f64| -> f64 {
        parts.iter().map(|p| f(p) * p.windows as f64).sum::<f64>() / total_windows as f64
    };
    Some(VoSummary {
        translation_percent: wsum(|p| p.translation_percent),
        rotation_deg_per_m: wsum(|p| p.rotation_deg_per_m),
        windows: total_windows,
        skipped: parts.iter().map(|p| p.skipped).sum(),
    })
}

// ── gradcheck ───────────────────────────────────────────────────────

pub struct GradcheckOutcome {
    pub rows: Vec<SuiteRow>,
    pub all_pass: bool,
    pub table: String,
}

/// Verify every primitive and every loss against central differences at
/// seeded random points. `with_corrupted_control` appends a deliberately
/// broken entry that must fail, proving the harness detects bad gradients.
pub fn cmd_gradcheck(
    seed: u64,
    points: usize,
    with_corrupted_control: bool,
) -> Result<GradcheckOutcome> {
    let mut rows = primitive_suite(seed, points)?;
    rows.extend(loss_suite(seed, points)?);
    if with_corrupted_control {
        let err = grad_check_with_fault(
            |t, ids| t.sum(t.square(ids[0])?),
            &[Tensor::vector(vec![0.7, -1.3, 2.1])],
            DEFAULT_STEP,
            1.02,
        )?;
        rows.push(SuiteRow {
            name: "corrupted-control".to_string(),
            max_rel_err: err,
        });
    }
    let mut table = format!("{:<32} {:>14}  result\n", "op", "max rel err");
    let mut all_pass = true;
    for row in &rows {
        let pass = row.max_rel_err.is_finite() && row.max_rel_err < GRADCHECK_TOLERANCE;
        all_pass &= pass;
        let _ = writeln!(
            table,
            "{:<32} {:>14.3e}  {}",
            row.name,
            row.max_rel_err,
            if pass { "pass" } else { "FAIL" }
        );
    }
    Ok(GradcheckOutcome {
        rows,
        all_pass,
        table,
    })
}

// ── sweep ───────────────────────────────────────────────────────────

pub struct SweepOutcome {
    pub csv_path: PathBuf,
    pub rows: Vec<SweepRow>,
}

pub struct SweepRow {
    pub point: String,
    pub median_translation_m: f64,
    pub median_orientation_deg: f64,
    pub vo_translation_percent: f64,
    pub vo_rotation_deg_per_m: f64,
    pub config_hash: String,
    pub dataset_hash: String,
    pub seed: u64,
}

fn run_point(cfg: &RunConfig, out: &Path, point: &str) -> Result<SweepRow> {
    let mut point_cfg = cfg.clone();
    point_cfg.set("out", &out.join(point).display().to_string());
    let train = cmd_train(&point_cfg)?;
    let mut eval_cfg = point_cfg.clone();
    eval_cfg.set("checkpoint", &train.checkpoint.display().to_string());
    eval_cfg.set("out", &out.join(point).join("eval").display().to_string());
    let eval = cmd_eval(&eval_cfg)?;
    let scene = &eval.report.scenes[0];
    Ok(SweepRow {
        point: point.to_string(),
        median_translation_m: scene.median_translation_m,
        median_orientation_deg: scene.median_orientation_deg,
        vo_translation_percent: scene.vo.map(|v| v.translation_percent).unwrap_or(f64::NAN),
        vo_rotation_deg_per_m: scene.vo.map(|v| v.rotation_deg_per_m).unwrap_or(f64::NAN),
        config_hash: point_cfg.hash(),
        dataset_hash: eval.report.metadata.dataset_hash.clone(),
        seed: eval.report.metadata.seed,
    })
}

/// Run a named comparison grid with a shared seed and emit one CSV.
///
/// Grids: `fusion-stage` over the three deepest stages, `sharing-depth`
/// over every legal depth, `strategy` over joint and alternating, and
/// `init` over single-task and the three multitask initializations.
pub fn cmd_sweep(cfg: &RunConfig, name: &str) -> Result<SweepOutcome> {
    let out = require_path(cfg, "out")?;
    fs::create_dir_all(&out)?;
    let net = cfg.network()?;
    let n = net.num_stages();
    let mut rows = Vec::new();
    match name {
        "fusion-stage" => {
            for stage in n.saturating_sub(2).max(1)..=n {
                let mut c = cfg.clone();
                c.set("network.fuse", "true");
                c.set("network.fuse_stage", &stage.to_string());
                // Keep the fused feature budget fixed at four extra channels.
                let (h, w) = net.spatial_at_stage(stage);
                c.set("network.fc4_dim", &(4 * h * w).to_string());
                rows.push(run_point(&c, &out, &format!("fuse-stage-{stage}"))?);
            }
        }
        "sharing-depth" => {
            for share in 1..n {
                let mut c = cfg.clone();
                c.set("network.share_up_to", &share.to_string());
                rows.push(run_point(&c, &out, &format!("share-{share}"))?);
            }
        }
        "strategy" => {
            for strategy in ["joint", "alternating"] {
                let mut c = cfg.clone();
                c.set("train.strategy", strategy);
                c.set("train.task", "multitask");
                rows.push(run_point(&c, &out, strategy)?);
            }
        }
        "init" => {
            // Pretrain the two single-task donors, then the three
            // multitask initializations.
            let mut st = cfg.clone();
            st.set("train.task", "global");
            rows.push(run_point(&st, &out, "st")?);
            let st_ckpt = out.join("st").join("checkpoint.ckpt");

            let mut vo = cfg.clone();
            vo.set("train.task", "vo");
            let vo_train = {
                let mut c = vo.clone();
                c.set("out", &out.join("st-vo").display().to_string());
                cmd_train(&c)?
            };
            let vo_ckpt = vo_train.checkpoint;

            for (point, g, v) in [
                ("mt-gloc", true, false),
                ("mt-vo", false, true),
                ("mt-dual", true, true),
            ] {
                let mut c = cfg.clone();
                c.set("train.task", "multitask");
                if g {
                    c.set("init.global", &st_ckpt.display().to_string());
                }
                if v {
                    c.set("init.vo", &vo_ckpt.display().to_string());
                }
                rows.push(run_point(&c, &out, point)?);
            }
        }
        other => {
            return Err(Error::Config(format!(
                "unknown sweep {other:?} (known: fusion-stage, sharing-depth, strategy, init)"
            )))
        }
    }

    let mut csv = String::from(
        "sweep,point,median_translation_m,median_orientation_deg,\
         vo_translation_percent,vo_rotation_deg_per_m,config_hash,dataset_hash,seed\n",
    );
    for r in &rows {
        let _ = writeln!(
            csv,
            "{name},{},{},{},{},{},{},{},{}",
            r.point,
            r.median_translation_m,
            r.median_orientation_deg,
            r.vo_translation_percent,
            r.vo_rotation_deg_per_m,
            r.config_hash,
            r.dataset_hash,
            r.seed
        );
    }
    let csv_path = out.join("sweep.csv");
    fs::write(&csv_path, csv)?;
    Ok(SweepOutcome { csv_path, rows })
}
