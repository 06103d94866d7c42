//! Desk-scale three-stream pose regression network.
//!
//! One trunk of bottleneck residual stages serves a global localization
//! stream; a Siamese pair of trunks serves odometry. Hard parameter sharing
//! ties the early stages of the global stream and the odometry stream that
//! consumes the current frame; the previous-frame stream is never shared.
//! The two odometry streams are concatenated before the last stage. The
//! global stream can fuse the previous pose through an inner-product layer
//! whose output is reshaped to a feature map and concatenated mid-trunk.
//!
//! Every convolution is followed by a learnable per-channel affine in place
//! of batch normalization (tiny deterministic batches make batch statistics
//! useless here) and the configured activation. Finiteness is checked by the
//! tape after every primitive, not just at stage boundaries.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose, DEGENERATE_NORM};
use crate::losses::ScaleParams;
use crate::rng::Rng;
use crate::tensor::{gradcheck::fnv1a, NodeId, Padding, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Elu,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Architecture knobs.
///
/// Stages are numbered from 1. Stage 1 contains the stem convolution and
/// keeps the input resolution; every later stage halves it. `stage_channels`
/// are bottleneck output widths (the 3x3 core uses a quarter of them).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub input_c: usize,
    pub stage_channels: Vec<usize>,
    pub units_per_stage: Vec<usize>,
    /// Stages 1..=k are shared between the global stream and the odometry
    /// current-frame stream. 0 means nothing is shared. Must leave at least
    /// the last stage unshared (the odometry trunk merges before it).
    pub share_up_to_stage: usize,
    /// Feed the previous pose into the global stream.
    pub fuse_prev_pose: bool,
    /// Stage whose first unit is followed by the pose fusion block.
    pub fuse_at_stage: usize,
    /// Width of the pose inner-product layer; reshaped to
    /// `[fc4_dim / (h*w), h, w]` at the fuse stage's resolution.
    pub fc4_dim: usize,
    pub fc1_dim: usize,
    /// Keep-probability of the dropout after fc1 (inverted scaling at train
    /// time, identity at eval).
    pub dropout_keep: f64,
    /// Keep-probability of the dropout on the fused previous-pose feature
    /// map. Training with intermittently missing pose features keeps the
    /// visual pathway primary, so sequential evaluation (which feeds back
    /// imperfect predictions) stays stable instead of dead-reckoning.
    pub fuse_dropout_keep: f64,
    pub activation: Activation,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_h: 32,
            input_w: 32,
            input_c: 3,
            stage_channels: vec![16, 32, 64, 128],
            units_per_stage: vec![2, 2, 2, 2],
            share_up_to_stage: 2,
            fuse_prev_pose: true,
            fuse_at_stage: 4,
            fc4_dim: 64,
            fc1_dim: 128,
            dropout_keep: 0.8,
            fuse_dropout_keep: 1.0,
            activation: Activation::Elu,
        }
    }
}

impl NetworkConfig {
    pub fn num_stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Spatial size of a stage's output feature maps.
    pub fn spatial_at_stage(&self, stage: usize) -> (usize, usize) {
        let mut h = self.input_h;
        let mut w = self.input_w;
        for _ in 2..=stage {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        (h, w)
    }

    /// Extra channels injected by pose fusion.
    pub fn fuse_channels(&self) -> usize {
        let (h, w) = self.spatial_at_stage(self.fuse_at_stage);
        self.fc4_dim / (h * w)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        let n = self.num_stages();
        if n < 2 {
            return cfg("at least two residual stages are required".into());
        }
        if self.units_per_stage.len() != n {
            return cfg(format!(
                "units_per_stage has {} entries for {} stages",
                self.units_per_stage.len(),
                n
            ));
        }
        if self.units_per_stage.iter().any(|&u| u == 0) {
            return cfg("every stage needs at least one unit".into());
        }
        for &c in &self.stage_channels {
            if c < 4 || c % 4 != 0 {
                return cfg(format!("stage channels must be multiples of 4, got {c}"));
            }
        }
        if self.input_h == 0 || self.input_w == 0 || self.input_c == 0 {
            return cfg("input resolution must be positive".into());
        }
        if self.share_up_to_stage >= n {
            return cfg(format!(
                "share_up_to_stage {} must leave the last of {} stages unshared",
                self.share_up_to_stage, n
            ));
        }
        if self.fuse_prev_pose {
            if self.fuse_at_stage == 0 || self.fuse_at_stage > n {
                return cfg(format!(
                    "fuse_at_stage {} out of range 1..={n}",
                    self.fuse_at_stage
                ));
            }
            let (h, w) = self.spatial_at_stage(self.fuse_at_stage);
            if self.fc4_dim == 0 || self.fc4_dim % (h * w) != 0 {
                return cfg(format!(
                    "fc4_dim {} must be a positive multiple of the {h}x{w} fuse-stage area",
                    self.fc4_dim
                ));
            }
        }
        if self.fc1_dim == 0 {
            return cfg("fc1_dim must be positive".into());
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return cfg(format!("dropout_keep {} not in (0, 1]", self.dropout_keep));
        }
        if !(self.fuse_dropout_keep > 0.0 && self.fuse_dropout_keep <= 1.0) {
            return cfg(format!(
                "fuse_dropout_keep {} not in (0, 1]",
                self.fuse_dropout_keep
            ));
        }
        Ok(())
    }
}

/// Hash of the serialized config, embedded in checkpoints and reports.
pub fn config_hash(config: &NetworkConfig) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    format!("{:016x}", fnv1a(json.as_bytes()))
}

/// Parameter partition. The first five sets are disjoint; together with the
/// two scale pairs they cover every trainable value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Group {
    /// Trunk stages used by both the global stream and the odometry
    /// current-frame stream.
    Shared,
    /// Global-stream trunk stages past the share point, plus the fusion
    /// projection.
    GlobalOnly,
    /// Odometry-specific trunk: current-stream tail, the whole
    /// previous-frame stream, and the merged last stage.
    OdomOnly,
    /// Global regression heads fc1/fc2/fc3 and the pose fusion fc4.
    HeadsGlobal,
    /// Odometry regression heads fc1/fc2/fc3.
    HeadsOdom,
    /// Loss scale weights of the global stream.
    ScaleGlobal,
    /// Loss scale weights of the odometry task.
    ScaleVo,
}

impl Group {
    pub const ALL: [Group; 7] = [
        Group::Shared,
        Group::GlobalOnly,
        Group::OdomOnly,
        Group::HeadsGlobal,
        Group::HeadsOdom,
        Group::ScaleGlobal,
        Group::ScaleVo,
    ];
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// The partitioned learnable parameters of the three-stream model.
#[derive(Debug, Clone)]
pub struct ModelParams {
    config: NetworkConfig,
    params: Vec<(Group, Param)>,
    by_name: BTreeMap<String, usize>,
}

/// Tape leaves for every parameter, index-aligned with [`ModelParams`].
pub struct Binding {
    ids: Vec<NodeId>,
}

impl Binding {
    pub fn id(&self, index: usize) -> NodeId {
        self.ids[index]
    }
}

struct Builder {
    rng: Rng,
    params: Vec<(Group, Param)>,
}

impl Builder {
    fn push(&mut self, group: Group, name: String, value: Tensor) {
        self.params.push((group, Param { name, value }));
    }

    fn gaussian(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor {
        let std = (2.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.normal() * std).collect();
        Tensor::new(shape, data).expect("consistent shape")
    }

    fn conv(&mut self, group: Group, name: &str, oc: usize, ic: usize, k: usize) {
        let w = self.gaussian(vec![oc, ic, k, k], ic * k * k);
        self.push(group, format!("{name}.w"), w);
    }

    fn affine(&mut self, group: Group, name: &str, c: usize) {
        self.push(group, format!("{name}.scale"), Tensor::filled(vec![c], 1.0));
        self.push(group, format!("{name}.bias"), Tensor::zeros(vec![c]));
    }

    fn fc(&mut self, group: Group, name: &str, out: usize, inp: usize) {
        let w = self.gaussian(vec![out, inp], inp);
        self.push(group, format!("{name}.w"), w);
        self.push(group, format!("{name}.b"), Tensor::zeros(vec![out]));
    }

    fn unit(&mut self, group: Group, name: &str, in_ch: usize, out_ch: usize, stride: usize) {
        let mid = out_ch / 4;
        self.conv(group, &format!("{name}.conv1"), mid, in_ch, 1);
        self.affine(group, &format!("{name}.affine1"), mid);
        self.conv(group, &format!("{name}.conv2"), mid, mid, 3);
        self.affine(group, &format!("{name}.affine2"), mid);
        self.conv(group, &format!("{name}.conv3"), out_ch, mid, 1);
        self.affine(group, &format!("{name}.affine3"), out_ch);
        if in_ch != out_ch || stride != 1 {
            self.conv(group, &format!("{name}.proj"), out_ch, in_ch, 1);
            self.affine(group, &format!("{name}.proj_affine"), out_ch);
        }
    }

    /// Emit one trunk stage under `prefix`. Returns the stage's out-channels.
    fn stage(
        &mut self,
        group: Group,
        prefix: &str,
        config: &NetworkConfig,
        stage: usize,
        in_ch: usize,
    ) -> usize {
        let out_ch = config.stage_channels[stage - 1];
        let mut cur_in = in_ch;
        if stage == 1 {
            self.conv(group, &format!("{prefix}.stage1.stem"), out_ch, in_ch, 3);
            self.affine(group, &format!("{prefix}.stage1.stem_affine"), out_ch);
            cur_in = out_ch;
        }
        for u in 0..config.units_per_stage[stage - 1] {
            let stride = if u == 0 && stage > 1 { 2 } else { 1 };
            self.unit(
                group,
                &format!("{prefix}.stage{stage}.unit{u}"),
                cur_in,
                out_ch,
                stride,
            );
            cur_in = out_ch;
        }
        out_ch
    }

    fn heads(&mut self, group: Group, prefix: &str, config: &NetworkConfig, trunk_out: usize) {
        self.fc(group, &format!("{prefix}.fc1"), config.fc1_dim, trunk_out);
        self.fc(group, &format!("{prefix}.fc2"), 3, config.fc1_dim);
        self.fc(group, &format!("{prefix}.fc3"), 4, config.fc1_dim);
    }
}

impl ModelParams {
    /// Deterministically initialize all parameter groups from a seed.
    /// Convolution and inner-product weights are zero-mean Gaussian with
    /// fan-in-scaled standard deviation; affine scales start at 1, biases at
    /// 0; the loss scale weights take the provided initial values.
    pub fn build(
        config: &NetworkConfig,
        seed: u64,
        scale_global: ScaleParams,
        scale_vo: ScaleParams,
    ) -> Result<ModelParams> {
        config.validate()?;
        let n = config.num_stages();
        let share = config.share_up_to_stage;
        let mut b = Builder {
            rng: Rng::new(seed).fork(0x6d6f64656c),
            params: Vec::new(),
        };

        // Global trunk: shared stages then global-only stages.
        let mut ch = config.input_c;
        for s in 1..=n {
            let (group, prefix) = if s <= share {
                (Group::Shared, "shared")
            } else {
                (Group::GlobalOnly, "global")
            };
            ch = b.stage(group, prefix, config, s, ch);
        }
        let trunk_out = ch;
        if config.fuse_prev_pose {
            let fused_in = config.stage_channels[config.fuse_at_stage - 1] + config.fuse_channels();
            let fuse_out = config.stage_channels[config.fuse_at_stage - 1];
            b.conv(Group::GlobalOnly, "global.fuse.proj", fuse_out, fused_in, 1);
            b.affine(Group::GlobalOnly, "global.fuse.proj_affine", fuse_out);
        }

        // Odometry current-frame tail (stages past the share point, before
        // the merge), previous-frame stream, and the merged last stage.
        let mut ch = if share == 0 {
            config.input_c
        } else {
            config.stage_channels[share - 1]
        };
        for s in (share + 1)..n {
            ch = b.stage(Group::OdomOnly, "odom.cur", config, s, ch);
        }
        let pre_merge = config.stage_channels[n - 2];
        let mut pch = config.input_c;
        for s in 1..n {
            pch = b.stage(Group::OdomOnly, "odom.prev", config, s, pch);
        }
        debug_assert_eq!(pch, pre_merge);
        let odom_out = b.stage(Group::OdomOnly, "odom.merge", config, n, 2 * pre_merge);

        // Heads and scale weights.
        b.heads(Group::HeadsGlobal, "heads.global", config, trunk_out);
        if config.fuse_prev_pose {
            b.fc(Group::HeadsGlobal, "heads.global.fc4", config.fc4_dim, 7);
        }
        b.heads(Group::HeadsOdom, "heads.odom", config, odom_out);
        b.push(
            Group::ScaleGlobal,
            "scale.global.s_x".into(),
            Tensor::scalar(scale_global.s_x),
        );
        b.push(
            Group::ScaleGlobal,
            "scale.global.s_q".into(),
            Tensor::scalar(scale_global.s_q),
        );
        b.push(
            Group::ScaleVo,
            "scale.vo.s_x".into(),
            Tensor::scalar(scale_vo.s_x),
        );
        b.push(
            Group::ScaleVo,
            "scale.vo.s_q".into(),
            Tensor::scalar(scale_vo.s_q),
        );

        let by_name = b
            .params
            .iter()
            .enumerate()
            .map(|(i, (_, p))| (p.name.clone(), i))
            .collect();
        Ok(ModelParams {
            config: config.clone(),
            params: b.params,
            by_name,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, index: usize) -> &Param {
        &self.params[index].1
    }

    pub fn group_of(&self, index: usize) -> Group {
        self.params[index].0
    }

    pub fn data_mut(&mut self, index: usize) -> &mut [f64] {
        self.params[index].1.value.data_mut()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn indices_of_group(&self, group: Group) -> Vec<usize> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, (g, _))| *g == group)
            .map(|(i, _)| i)
            .collect()
    }

    /// Total number of scalar values across all parameters.
    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|(_, p)| p.value.numel()).sum()
    }

    /// Copy every parameter whose group is in `groups` from `source`,
    /// matching by name. Shapes must agree.
    pub fn adopt_groups(&mut self, source: &ModelParams, groups: &[Group]) -> Result<()> {
        for g in groups {
            for idx in self.indices_of_group(*g) {
                let name = self.params[idx].1.name.clone();
                let src_idx = source.index_of(&name)?;
                let src = &source.params[src_idx].1.value;
                if src.shape() != self.params[idx].1.value.shape() {
                    return Err(Error::Config(format!(
                        "parameter {name}: shape {:?} does not match source {:?}",
                        self.params[idx].1.value.shape(),
                        src.shape()
                    )));
                }
                self.params[idx].1.value = src.clone();
            }
        }
        Ok(())
    }

    /// Register every parameter as a tape leaf. `trainable` controls whether
    /// gradients will be produced for them.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Result<Binding> {
        let mut ids = Vec::with_capacity(self.params.len());
        for (_, p) in &self.params {
            let t = if trainable {
                p.value.clone().with_grad()
            } else {
                p.value.clone()
            };
            ids.push(tape.leaf(t)?);
        }
        Ok(Binding { ids })
    }

    fn node(&self, b: &Binding, name: &str) -> Result<NodeId> {
        Ok(b.id(self.index_of(name)?))
    }
}

fn act(tape: &Tape, x: NodeId, a: Activation) -> Result<NodeId> {
    match a {
        Activation::Elu => tape.elu(x),
        Activation::Relu => tape.relu(x),
    }
}

struct TrunkCtx<'a> {
    params: &'a ModelParams,
    binding: &'a Binding,
    tape: &'a Tape,
    activation: Activation,
}

impl TrunkCtx<'_> {
    fn conv_affine(&self, x: NodeId, name: &str, affine: &str, stride: usize) -> Result<NodeId> {
        let w = self.params.node(self.binding, &format!("{name}.w"))?;
        let scale = self.params.node(self.binding, &format!("{affine}.scale"))?;
        let bias = self.params.node(self.binding, &format!("{affine}.bias"))?;
        let y = self.tape.conv2d(x, w, stride, Padding::Same)?;
        self.tape.channel_affine(y, scale, bias)
    }

    fn bottleneck(
        &self,
        x: NodeId,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
    ) -> Result<NodeId> {
        let t = self.tape;
        let h = self.conv_affine(x, &format!("{name}.conv1"), &format!("{name}.affine1"), 1)?;
        let h = act(t, h, self.activation)?;
        let h = self.conv_affine(
            h,
            &format!("{name}.conv2"),
            &format!("{name}.affine2"),
            stride,
        )?;
        let h = act(t, h, self.activation)?;
        let h = self.conv_affine(h, &format!("{name}.conv3"), &format!("{name}.affine3"), 1)?;
        let skip = if in_ch != out_ch || stride != 1 {
            self.conv_affine(
                x,
                &format!("{name}.proj"),
                &format!("{name}.proj_affine"),
                stride,
            )?
        } else {
            x
        };
        act(t, t.add(h, skip)?, self.activation)
    }

    /// Run one stage under `prefix`, optionally applying `post_first_unit`
    /// between the first and second unit.
    fn stage(
        &self,
        mut x: NodeId,
        prefix: &str,
        stage: usize,
        in_ch: usize,
        post_first_unit: Option<&dyn Fn(NodeId) -> Result<NodeId>>,
    ) -> Result<NodeId> {
        let config = &self.params.config;
        let out_ch = config.stage_channels[stage - 1];
        let mut cur_in = in_ch;
        if stage == 1 {
            x = self.conv_affine(
                x,
                &format!("{prefix}.stage1.stem"),
                &format!("{prefix}.stage1.stem_affine"),
                1,
            )?;
            x = act(self.tape, x, self.activation)?;
            cur_in = out_ch;
        }
        for u in 0..config.units_per_stage[stage - 1] {
            let stride = if u == 0 && stage > 1 { 2 } else { 1 };
            x = self.bottleneck(
                x,
                &format!("{prefix}.stage{stage}.unit{u}"),
                cur_in,
                out_ch,
                stride,
            )?;
            cur_in = out_ch;
            if u == 0 {
                if let Some(f) = post_first_unit {
                    x = f(x)?;
                }
            }
        }
        Ok(x)
    }

    fn fc(&self, x: NodeId, name: &str) -> Result<NodeId> {
        let w = self.params.node(self.binding, &format!("{name}.w"))?;
        let b = self.params.node(self.binding, &format!("{name}.b"))?;
        self.tape.add(self.tape.matmul(w, x)?, b)
    }

    /// Pool, fc1 with activation and dropout, then the regression pair.
    fn head(&self, x: NodeId, prefix: &str, mode: Mode, rng: &mut Rng) -> Result<(NodeId, NodeId)> {
        let t = self.tape;
        let v = t.global_avg_pool(x)?;
        let mut h = act(t, self.fc(v, &format!("{prefix}.fc1"))?, self.activation)?;
        if mode == Mode::Train && self.params.config.dropout_keep < 1.0 {
            h = t.dropout(h, self.params.config.dropout_keep, rng)?;
        }
        let xhat = self.fc(h, &format!("{prefix}.fc2"))?;
        let q_raw = self.fc(h, &format!("{prefix}.fc3"))?;
        let norm = t.l2norm(q_raw)?;
        if t.item(norm)? < DEGENERATE_NORM {
            return Err(Error::Geometry(
                "network produced a degenerate quaternion".into(),
            ));
        }
        let qhat = t.div_scalar(q_raw, norm)?;
        Ok((xhat, qhat))
    }
}

fn check_image(config: &NetworkConfig, image: &Tensor, what: &str) -> Result<()> {
    let expect = [config.input_c, config.input_h, config.input_w];
    if image.shape() != expect {
        return Err(Error::Shape {
            op: "forward",
            detail: format!(
                "{what} has shape {:?}, config expects {expect:?}",
                image.shape()
            ),
        });
    }
    Ok(())
}

/// Global localization stream: image plus previous pose to absolute pose.
/// Returns tape nodes for the translation (shape [3]) and the normalized
/// rotation quaternion (shape [4]).
pub fn forward_global(
    params: &ModelParams,
    binding: &Binding,
    tape: &Tape,
    image: &Tensor,
    prev_pose: &Pose,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(NodeId, NodeId)> {
    let config = &params.config;
    check_image(config, image, "image")?;
    prev_pose.q.normalized()?; // reject degenerate inputs early
    let ctx = TrunkCtx {
        params,
        binding,
        tape,
        activation: config.activation,
    };

    // Fusion dropout mask, drawn up front so the rng stream order does not
    // depend on the fuse stage.
    let fuse_mask: Option<Vec<f64>> =
        if config.fuse_prev_pose && mode == Mode::Train && config.fuse_dropout_keep < 1.0 {
            let keep = config.fuse_dropout_keep;
            Some(
                (0..config.fc4_dim)
                    .map(|_| {
                        if rng.uniform() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            )
        } else {
            None
        };

    let fuse = |x: NodeId| -> Result<NodeId> {
        let p7 = tape.constant(Tensor::vector(vec![
            prev_pose.x[0],
            prev_pose.x[1],
            prev_pose.x[2],
            prev_pose.q.w,
            prev_pose.q.x,
            prev_pose.q.y,
            prev_pose.q.z,
        ]))?;
        let mut h = ctx.fc(p7, "heads.global.fc4")?;
        // Soft clamp elu(h) - elu(h - 4): smooth, monotone, bounded to
        // (-1, 4) with slope at most 1. Sequential evaluation feeds back
        // imperfect poses; bounding the fused features keeps that feedback
        // loop from amplifying prediction errors.
        let shifted = tape.sub(h, tape.constant(Tensor::filled(vec![config.fc4_dim], 4.0))?)?;
        h = tape.sub(tape.elu(h)?, tape.elu(shifted)?)?;
        if let Some(mask) = &fuse_mask {
            h = tape.dropout_with_mask(h, mask.clone())?;
        }
        let (sh, sw) = config.spatial_at_stage(config.fuse_at_stage);
        let fmap = tape.reshape(h, vec![config.fuse_channels(), sh, sw])?;
        let cat = tape.concat_channels(x, fmap)?;
        let proj = ctx.conv_affine(cat, "global.fuse.proj", "global.fuse.proj_affine", 1)?;
        act(tape, proj, config.activation)
    };

    let mut x = tape.constant(image.clone())?;
    let mut ch = config.input_c;
    for s in 1..=config.num_stages() {
        let prefix = if s <= config.share_up_to_stage {
            "shared"
        } else {
            "global"
        };
        let hook: Option<&dyn Fn(NodeId) -> Result<NodeId>> =
            if config.fuse_prev_pose && s == config.fuse_at_stage {
                Some(&fuse)
            } else {
                None
            };
        x = ctx.stage(x, prefix, s, ch, hook)?;
        ch = config.stage_channels[s - 1];
    }
    ctx.head(x, "heads.global", mode, rng)
}

/// Odometry stream: two consecutive images to their relative motion.
/// The current-frame stream reuses the shared trunk stages; the previous
/// frame runs through its own unshared stream; features are concatenated
/// before the last stage.
pub fn forward_odometry(
    params: &ModelParams,
    binding: &Binding,
    tape: &Tape,
    image_t: &Tensor,
    image_prev: &Tensor,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(NodeId, NodeId)> {
    let config = &params.config;
    check_image(config, image_t, "current image")?;
    check_image(config, image_prev, "previous image")?;
    let ctx = TrunkCtx {
        params,
        binding,
        tape,
        activation: config.activation,
    };
    let n = config.num_stages();

    let mut cur = tape.constant(image_t.clone())?;
    let mut ch = config.input_c;
    for s in 1..n {
        let prefix = if s <= config.share_up_to_stage {
            "shared"
        } else {
            "odom.cur"
        };
        cur = ctx.stage(cur, prefix, s, ch, None)?;
        ch = config.stage_channels[s - 1];
    }

    let mut prev = tape.constant(image_prev.clone())?;
    let mut pch = config.input_c;
    for s in 1..n {
        prev = ctx.stage(prev, "odom.prev", s, pch, None)?;
        pch = config.stage_channels[s - 1];
    }

    let merged = tape.concat_channels(cur, prev)?;
    let out = ctx.stage(merged, "odom.merge", n, 2 * ch, None)?;
    ctx.head(out, "heads.odom", mode, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses;

    fn small_config() -> NetworkConfig {
        NetworkConfig {
            input_h: 8,
            input_w: 8,
            input_c: 3,
            stage_channels: vec![8, 8],
            units_per_stage: vec![1, 1],
            share_up_to_stage: 1,
            fuse_prev_pose: true,
            fuse_at_stage: 2,
            fc4_dim: 32,
            fc1_dim: 16,
            dropout_keep: 0.8,
            fuse_dropout_keep: 1.0,
            activation: Activation::Elu,
        }
    }

    fn build_small(seed: u64) -> ModelParams {
        ModelParams::build(
            &small_config(),
            seed,
            ScaleParams::new(0.0, -3.0),
            ScaleParams::new(-2.0, -4.0),
        )
        .unwrap()
    }

    fn random_image(rng: &mut Rng, config: &NetworkConfig) -> Tensor {
        let n = config.input_c * config.input_h * config.input_w;
        Tensor::new(
            vec![config.input_c, config.input_h, config.input_w],
            (0..n).map(|_| rng.uniform()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_small(7);
        let b = build_small(7);
        assert_eq!(a.len(), b.len());
        for i in 0..a.len() {
            assert_eq!(a.param(i).name, b.param(i).name);
            assert_eq!(a.param(i).value.data(), b.param(i).value.data());
        }
        let c = build_small(8);
        assert!(
            (0..a.len()).any(|i| a.param(i).value.data() != c.param(i).value.data()),
            "different seeds must differ"
        );
    }

    #[test]
    fn share_zero_means_empty_shared_set() {
        let mut config = small_config();
        config.share_up_to_stage = 0;
        let p = ModelParams::build(
            &config,
            1,
            ScaleParams::new(0.0, 0.0),
            ScaleParams::new(0.0, 0.0),
        )
        .unwrap();
        assert!(p.indices_of_group(Group::Shared).is_empty());
    }

    #[test]
    fn parameter_count_matches_hand_arithmetic() {
        // Independent arithmetic from the layer shapes of small_config().
        let p = build_small(3);
        let unit = |in_ch: usize, out_ch: usize, projected: bool| {
            let mid = out_ch / 4;
            let mut n = in_ch * mid + 2 * mid; // conv1 + affine1
            n += mid * mid * 9 + 2 * mid; // conv2 + affine2
            n += mid * out_ch + 2 * out_ch; // conv3 + affine3
            if projected {
                n += in_ch * out_ch + 2 * out_ch; // proj + affine
            }
            n
        };
        let stem = 3 * 8 * 9 + 2 * 8;
        let stage1 = stem + unit(8, 8, false);
        let stage2 = unit(8, 8, true); // stride-2 projection
        let fuse_extra = 32 / (4 * 4); // fc4_dim / fuse area
        let fuse = (8 + fuse_extra) * 8 + 2 * 8;
        let merge_stage2 = unit(16, 8, true);
        let heads = |trunk_out: usize| (trunk_out * 16 + 16) + (16 * 3 + 3) + (16 * 4 + 4);
        let fc4 = 7 * 32 + 32;
        let expected = stage1            // shared
            + stage2 + fuse              // global only
            + stage1 + merge_stage2      // odom.prev full + merge (odom.cur tail empty)
            + heads(8) + fc4             // heads.global
            + heads(8)                   // heads.odom
            + 4; // scale weights
        assert_eq!(p.total_scalars(), expected);
    }

    #[test]
    fn global_forward_contract() {
        let p = build_small(11);
        let mut rng = Rng::new(5);
        let img = random_image(&mut rng, p.config());
        let tape = Tape::new();
        let binding = p.bind(&tape, false).unwrap();
        let (x, q) = forward_global(
            &p,
            &binding,
            &tape,
            &img,
            &Pose::IDENTITY,
            Mode::Eval,
            &mut rng,
        )
        .unwrap();
        assert_eq!(tape.shape_of(x), vec![3]);
        assert_eq!(tape.shape_of(q), vec![4]);
        let qv = tape.value(q);
        let norm: f64 = qv.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn eval_forward_is_bitwise_deterministic() {
        let p = build_small(13);
        let mut rng = Rng::new(5);
        let img = random_image(&mut rng, p.config());
        let run = || {
            let tape = Tape::new();
            let binding = p.bind(&tape, false).unwrap();
            let mut r = Rng::new(999);
            let (x, q) = forward_global(
                &p,
                &binding,
                &tape,
                &img,
                &Pose::IDENTITY,
                Mode::Eval,
                &mut r,
            )
            .unwrap();
            (tape.value(x).data().to_vec(), tape.value(q).data().to_vec())
        };
        let (x1, q1) = run();
        let (x2, q2) = run();
        assert_eq!(x1, x2);
        assert_eq!(q1, q2);
    }

    #[test]
    fn fusion_is_live() {
        let p = build_small(17);
        let mut rng = Rng::new(6);
        let img = random_image(&mut rng, p.config());
        let out_for = |prev: Pose| {
            let tape = Tape::new();
            let binding = p.bind(&tape, false).unwrap();
            let mut r = Rng::new(0);
            let (x, _) =
                forward_global(&p, &binding, &tape, &img, &prev, Mode::Eval, &mut r).unwrap();
            tape.value(x).data().to_vec()
        };
        let base = out_for(Pose::IDENTITY);
        let moved = out_for(Pose::new(
            [0.5, -0.3, 0.2],
            crate::geometry::Quat::from_yaw_deg(25.0),
        ));
        let max_delta = base
            .iter()
            .zip(&moved)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_delta > 0.0, "previous pose does not reach the output");
    }

    #[test]
    fn odometry_forward_contract() {
        let p = build_small(19);
        let mut rng = Rng::new(7);
        let img_t = random_image(&mut rng, p.config());
        let img_p = random_image(&mut rng, p.config());
        let tape = Tape::new();
        let binding = p.bind(&tape, false).unwrap();
        let (x, q) =
            forward_odometry(&p, &binding, &tape, &img_t, &img_p, Mode::Eval, &mut rng).unwrap();
        assert_eq!(tape.shape_of(x), vec![3]);
        let qv = tape.value(q);
        let norm: f64 = qv.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);

        // Identical input pair: output must be finite (value not asserted).
        let tape2 = Tape::new();
        let binding2 = p.bind(&tape2, false).unwrap();
        let (x2, q2) =
            forward_odometry(&p, &binding2, &tape2, &img_t, &img_t, Mode::Eval, &mut rng).unwrap();
        assert!(tape2.value(x2).data().iter().all(|v| v.is_finite()));
        assert!(tape2.value(q2).data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn odometry_ignores_global_only_params_when_unshared() {
        let mut config = small_config();
        config.share_up_to_stage = 0;
        let mut p = ModelParams::build(
            &config,
            23,
            ScaleParams::new(0.0, 0.0),
            ScaleParams::new(0.0, 0.0),
        )
        .unwrap();
        let mut rng = Rng::new(8);
        let img_t = random_image(&mut rng, &config);
        let img_p = random_image(&mut rng, &config);
        let run = |p: &ModelParams| {
            let tape = Tape::new();
            let binding = p.bind(&tape, false).unwrap();
            let mut r = Rng::new(0);
            let (x, _) =
                forward_odometry(p, &binding, &tape, &img_t, &img_p, Mode::Eval, &mut r).unwrap();
            tape.value(x).data().to_vec()
        };
        let before = run(&p);
        for idx in p.indices_of_group(Group::GlobalOnly) {
            for v in p.data_mut(idx) {
                *v += 0.37;
            }
        }
        let after = run(&p);
        assert_eq!(before, after);
    }

    #[test]
    fn gradient_partition_between_tasks() {
        let p = build_small(29);
        let mut rng = Rng::new(9);
        let img_t = random_image(&mut rng, p.config());
        let img_p = random_image(&mut rng, p.config());
        let gt = Pose::new([0.2, 0.1, -0.3], crate::geometry::Quat::from_yaw_deg(10.0));
        let gt_rel = crate::geometry::RelativeMotion::IDENTITY;

        // Odometry task loss: no gradient on global-only, global heads, or
        // global scales; shared parameters do receive gradients.
        let tape = Tape::new();
        let binding = p.bind(&tape, true).unwrap();
        let (x, q) =
            forward_odometry(&p, &binding, &tape, &img_t, &img_p, Mode::Eval, &mut rng).unwrap();
        let s_vo = losses::ScaleNodes {
            s_x: binding.id(p.index_of("scale.vo.s_x").unwrap()),
            s_q: binding.id(p.index_of("scale.vo.s_q").unwrap()),
        };
        let loss = losses::vo_loss(&tape, &losses::PoseNodes { x, q }, &gt_rel, &s_vo).unwrap();
        let grads = tape.backward(loss).unwrap();
        for g in [Group::GlobalOnly, Group::HeadsGlobal, Group::ScaleGlobal] {
            for idx in p.indices_of_group(g) {
                assert!(
                    grads.get(binding.id(idx)).is_none(),
                    "{} must not receive odometry gradients",
                    p.param(idx).name
                );
            }
        }
        let shared_hit = p
            .indices_of_group(Group::Shared)
            .iter()
            .any(|&idx| grads.get(binding.id(idx)).is_some());
        assert!(shared_hit, "shared trunk must receive odometry gradients");

        // Global task loss: no gradient on odometry-only parameters.
        let tape = Tape::new();
        let binding = p.bind(&tape, true).unwrap();
        let (x, q) = forward_global(
            &p,
            &binding,
            &tape,
            &img_t,
            &Pose::IDENTITY,
            Mode::Eval,
            &mut rng,
        )
        .unwrap();
        let s = losses::ScaleNodes {
            s_x: binding.id(p.index_of("scale.global.s_x").unwrap()),
            s_q: binding.id(p.index_of("scale.global.s_q").unwrap()),
        };
        let loss = losses::geometric_consistency_loss(
            &tape,
            &losses::PoseNodes { x, q },
            &gt,
            &Pose::IDENTITY,
            &gt_rel,
            &s,
        )
        .unwrap();
        let grads = tape.backward(loss).unwrap();
        for g in [Group::OdomOnly, Group::HeadsOdom, Group::ScaleVo] {
            for idx in p.indices_of_group(g) {
                assert!(
                    grads.get(binding.id(idx)).is_none(),
                    "{} must not receive global gradients",
                    p.param(idx).name
                );
            }
        }
        let fc4_idx = p.index_of("heads.global.fc4.w").unwrap();
        assert!(
            grads.get(binding.id(fc4_idx)).is_some(),
            "fc4 must receive gradients from the global loss"
        );
    }

    #[test]
    fn rejects_wrong_resolution() {
        let p = build_small(31);
        let tape = Tape::new();
        let binding = p.bind(&tape, false).unwrap();
        let bad = Tensor::zeros(vec![3, 16, 16]);
        let mut rng = Rng::new(0);
        assert!(forward_global(
            &p,
            &binding,
            &tape,
            &bad,
            &Pose::IDENTITY,
            Mode::Eval,
            &mut rng
        )
        .is_err());
    }

    #[test]
    fn config_validation_catches_bad_knobs() {
        let mut c = small_config();
        c.share_up_to_stage = 2; // would share the merged stage
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.fc4_dim = 33; // not a multiple of the fuse area
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.stage_channels = vec![8, 9];
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.dropout_keep = 0.0;
        assert!(c.validate().is_err());
        assert!(NetworkConfig::default().validate().is_ok());
    }
}
