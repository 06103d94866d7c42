//! Run configuration: a flat key=value file with presets and flag overrides.
//!
//! Precedence, lowest to highest: built-in defaults, preset(s), file keys,
//! command-line overrides. The effective merged configuration is written
//! next to every run's outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use campose::data::synth::{AliasConfig, SyntheticWorldConfig};
use campose::error::{Error, Result};
use campose::losses::{LossConfig, LossMode, ScaleParams};
use campose::model::{Activation, NetworkConfig};
use campose::optim::{AdamConfig, Strategy, TaskSet, TrainConfig};
use campose::tensor::gradcheck::fnv1a;

/// Flat, ordered key-value configuration.
#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

pub const KNOWN_PRESETS: &[&str] = &[
    "m1",
    "m2",
    "m3",
    "m4",
    "st",
    "st-vo",
    "mt",
    "mt-gloc",
    "mt-vo",
    "mt-dual",
    "7scenes",
    "cambridge",
    "full-schedule",
];

impl RunConfig {
    pub fn defaults() -> Self {
        let mut c = RunConfig::default();
        for (k, v) in [
            ("seed", "0"),
            ("network.input", "32x32x3"),
            ("network.stages", "16,32,64,128"),
            ("network.units", "2,2,2,2"),
            ("network.share_up_to", "2"),
            ("network.fuse", "true"),
            ("network.fuse_stage", "4"),
            ("network.fc4_dim", "64"),
            ("network.fc1_dim", "128"),
            ("network.dropout_keep", "0.8"),
            ("network.fuse_dropout_keep", "1"),
            ("network.activation", "elu"),
            ("loss.mode", "geo-sigma"),
            ("loss.beta", "1"),
            ("loss.s_x", "-1.5"),
            ("loss.s_q", "-4"),
            ("loss.s_x_vo", "-1.5"),
            ("loss.s_q_vo", "-4"),
            ("train.iterations", "5000"),
            ("train.batch", "16"),
            ("train.lr", "1e-4"),
            ("train.strategy", "joint"),
            ("train.task", "multitask"),
            ("train.split", "train"),
            ("preprocess.rescale", "32"),
            ("preprocess.crop", "32"),
            ("preprocess.mean", "true"),
            ("eval.split", "test"),
            ("eval.per_pair", "false"),
            ("synth.extent", "10"),
            ("synth.frames", "64"),
            ("synth.sequences", "1"),
            ("synth.test_sequences", "0"),
            ("synth.render", "32"),
            ("synth.step", "0.35"),
            ("synth.step_yaw", "9"),
            ("synth.yaw_limit", "70"),
            ("synth.z_min", "0.9"),
            ("synth.z_max", "1.1"),
            ("synth.footprint", "0.1"),
            ("synth.texture_seed", "0"),
            ("synth.alias", "false"),
            ("synth.alias_a", "1,1"),
            ("synth.alias_b", "7,7"),
            ("synth.alias_size", "2,2"),
        ] {
            c.values.insert(k.to_string(), v.to_string());
        }
        c
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing config key {key}")))
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        self.require(key)?
            .parse()
            .map_err(|e| Error::Config(format!("{key}: {e}")))
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        self.require(key)?
            .parse()
            .map_err(|e| Error::Config(format!("{key}: {e}")))
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        self.require(key)?
            .parse()
            .map_err(|e| Error::Config(format!("{key}: {e}")))
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        match self.require(key)? {
            "true" | "1" | "yes" | "on" => Ok(true),
            "false" | "0" | "no" | "off" => Ok(false),
            other => Err(Error::Config(format!(
                "{key}: expected a boolean, got {other:?}"
            ))),
        }
    }

    fn get_list(&self, key: &str) -> Result<Vec<f64>> {
        self.require(key)?
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("{key}: bad number {tok:?}: {e}")))
            })
            .collect()
    }

    fn get_usize_list(&self, key: &str) -> Result<Vec<usize>> {
        self.require(key)?
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::Config(format!("{key}: bad number {tok:?}: {e}")))
            })
            .collect()
    }

    /// Parse a `key = value` file (# and ; start comments).
    pub fn parse_file_text(text: &str, origin: &str) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{origin}:{}: expected key = value", lineno + 1))
            })?;
            out.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(out)
    }

    /// Apply a named preset on top of the current values.
    pub fn apply_preset(&mut self, preset: &str) -> Result<()> {
        let kv: &[(&str, &str)] = match preset {
            // Architecture/loss variants.
            "m1" => &[
                ("network.activation", "relu"),
                ("network.fuse", "false"),
                ("loss.mode", "beta"),
                ("loss.beta", "1"),
            ],
            "m2" => &[
                ("network.activation", "elu"),
                ("network.fuse", "false"),
                ("loss.mode", "beta"),
                ("loss.beta", "1"),
            ],
            "m3" => &[
                ("network.activation", "elu"),
                ("network.fuse", "true"),
                ("loss.mode", "geo-beta"),
                ("loss.beta", "1"),
            ],
            "m4" => &[
                ("network.activation", "elu"),
                ("network.fuse", "true"),
                ("loss.mode", "geo-sigma"),
            ],
            // Task/initialization variants.
            "st" => &[("train.task", "global")],
            "st-vo" => &[("train.task", "vo")],
            "mt" => &[("train.task", "multitask")],
            "mt-gloc" => &[("train.task", "multitask"), ("init.require", "global")],
            "mt-vo" => &[("train.task", "multitask"), ("init.require", "vo")],
            "mt-dual" => &[("train.task", "multitask"), ("init.require", "global,vo")],
            // Scale-weight initializations.
            "7scenes" => &[
                ("loss.s_x", "-1.5"),
                ("loss.s_q", "-4"),
                ("loss.s_x_vo", "-1.5"),
                ("loss.s_q_vo", "-4"),
                ("preprocess.rescale", "256"),
                ("preprocess.crop", "224"),
            ],
            "cambridge" => &[
                ("loss.s_x", "-3"),
                ("loss.s_q", "-6.5"),
                ("preprocess.rescale", "256"),
                ("preprocess.crop", "224"),
            ],
            // Full-size reference schedule (not a desk-scale target).
            "full-schedule" => &[
                ("train.iterations", "120000"),
                ("train.batch", "32"),
                ("train.lr", "1e-4"),
            ],
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?} (known: {})",
                    KNOWN_PRESETS.join(", ")
                )))
            }
        };
        for (k, v) in kv {
            self.set(k, v);
        }
        Ok(())
    }

    /// Build the effective config: defaults, presets, file, then overrides.
    pub fn resolve(
        file: Option<&Path>,
        flag_preset: Option<&str>,
        overrides: &[(String, String)],
    ) -> Result<RunConfig> {
        let mut cfg = RunConfig::defaults();
        let file_map = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                RunConfig::parse_file_text(&text, &path.display().to_string())?
            }
            None => BTreeMap::new(),
        };
        let preset_list = flag_preset
            .map(|s| s.to_string())
            .or_else(|| file_map.get("preset").cloned());
        if let Some(presets) = &preset_list {
            for p in presets.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                cfg.apply_preset(p)?;
            }
            cfg.set("preset", presets);
        }
        for (k, v) in &file_map {
            if k != "preset" {
                cfg.set(k, v);
            }
        }
        for (k, v) in overrides {
            cfg.set(k, v);
        }
        Ok(cfg)
    }

    /// Canonical serialization (sorted keys).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Hash of the canonical serialization, excluding filesystem locations:
    /// two runs that differ only in where inputs and outputs live are the
    /// same run and must produce bit-identical artifacts.
    pub fn hash(&self) -> String {
        let mut text = String::new();
        for (k, v) in &self.values {
            let path_like = k == "out"
                || k == "dataset"
                || k == "checkpoint"
                || k.starts_with("init.")
                || k == "eval.expect_config_hash";
            if !path_like {
                let _ = writeln!(text, "{k} = {v}");
            }
        }
        format!("{:016x}", fnv1a(text.as_bytes()))
    }

    // ── typed views ─────────────────────────────────────────────────

    pub fn network(&self) -> Result<NetworkConfig> {
        let input = self.require("network.input")?;
        let dims: Vec<usize> = input
            .split('x')
            .map(|t| {
                t.parse()
                    .map_err(|e| Error::Config(format!("network.input: {e}")))
            })
            .collect::<Result<_>>()?;
        if dims.len() != 3 {
            return Err(Error::Config(format!(
                "network.input must be HxWxC, got {input:?}"
            )));
        }
        let activation = match self.require("network.activation")? {
            "elu" => Activation::Elu,
            "relu" => Activation::Relu,
            other => {
                return Err(Error::Config(format!(
                    "network.activation must be elu or relu, got {other:?}"
                )))
            }
        };
        let config = NetworkConfig {
            input_h: dims[0],
            input_w: dims[1],
            input_c: dims[2],
            stage_channels: self.get_usize_list("network.stages")?,
            units_per_stage: self.get_usize_list("network.units")?,
            share_up_to_stage: self.get_usize("network.share_up_to")?,
            fuse_prev_pose: self.get_bool("network.fuse")?,
            fuse_at_stage: self.get_usize("network.fuse_stage")?,
            fc4_dim: self.get_usize("network.fc4_dim")?,
            fc1_dim: self.get_usize("network.fc1_dim")?,
            dropout_keep: self.get_f64("network.dropout_keep")?,
            fuse_dropout_keep: self.get_f64("network.fuse_dropout_keep")?,
            activation,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn loss(&self) -> Result<LossConfig> {
        let mode = match self.require("loss.mode")? {
            "beta" => LossMode::Beta,
            "sigma" => LossMode::Sigma,
            "geo-beta" => LossMode::GeoBeta,
            "geo-sigma" => LossMode::GeoSigma,
            other => {
                return Err(Error::Config(format!(
                    "loss.mode must be beta|sigma|geo-beta|geo-sigma, got {other:?}"
                )))
            }
        };
        let cfg = LossConfig {
            mode,
            beta: self.get_f64("loss.beta")?,
            gamma: 2,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn scale_global(&self) -> Result<ScaleParams> {
        Ok(ScaleParams::new(
            self.get_f64("loss.s_x")?,
            self.get_f64("loss.s_q")?,
        ))
    }

    pub fn scale_vo(&self) -> Result<ScaleParams> {
        Ok(ScaleParams::new(
            self.get_f64("loss.s_x_vo")?,
            self.get_f64("loss.s_q_vo")?,
        ))
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let strategy = match self.require("train.strategy")? {
            "joint" => Strategy::Joint,
            "alternating" => Strategy::Alternating,
            other => {
                return Err(Error::Config(format!(
                    "train.strategy must be joint or alternating, got {other:?}"
                )))
            }
        };
        let task = match self.require("train.task")? {
            "global" => TaskSet::Global,
            "vo" => TaskSet::Vo,
            "multitask" => TaskSet::Multitask,
            other => {
                return Err(Error::Config(format!(
                    "train.task must be global|vo|multitask, got {other:?}"
                )))
            }
        };
        Ok(TrainConfig {
            iterations: self.get_usize("train.iterations")?,
            batch_size: self.get_usize("train.batch")?,
            seed: self.get_u64("seed")?,
            adam: AdamConfig {
                lr: self.get_f64("train.lr")?,
                ..AdamConfig::default()
            },
            loss: self.loss()?,
            strategy,
            task,
        })
    }

    pub fn synth_world(&self) -> Result<SyntheticWorldConfig> {
        let aliasing = if self.get_bool("synth.alias")? {
            let a = self.get_list("synth.alias_a")?;
            let b = self.get_list("synth.alias_b")?;
            let s = self.get_list("synth.alias_size")?;
            if a.len() != 2 || b.len() != 2 || s.len() != 2 {
                return Err(Error::Config(
                    "synth.alias_a/alias_b/alias_size need two comma-separated numbers".into(),
                ));
            }
            Some(AliasConfig {
                region_a_min: [a[0], a[1]],
                region_b_min: [b[0], b[1]],
                region_size: [s[0], s[1]],
            })
        } else {
            None
        };
        let config = SyntheticWorldConfig {
            extent: self.get_f64("synth.extent")?,
            render_size: self.get_usize("synth.render")?,
            max_step_translation: self.get_f64("synth.step")?,
            max_step_yaw_deg: self.get_f64("synth.step_yaw")?,
            yaw_limit_deg: self.get_f64("synth.yaw_limit")?,
            z_range: (self.get_f64("synth.z_min")?, self.get_f64("synth.z_max")?),
            footprint: self.get_f64("synth.footprint")?,
            texture_seed: self.get_u64("synth.texture_seed")?,
            aliasing,
        };
        config.validate()?;
        Ok(config)
    }
}
