//! Adam and the multitask training strategies.
//!
//! Joint training backpropagates the sum of the global pose loss and the
//! odometry loss once and steps a single optimizer over all parameters.
//! Alternating training keeps one Adam state per task and executes them on
//! alternating steps against the task-specific loss only; the shared trunk
//! is covered by (and updated through) both optimizers, one phase at a time.
//! The previous pose is teacher-forced from groundtruth during training;
//! sequential evaluation feeds back the model's own prediction, with the
//! groundtruth pose anchoring the first frame of each sequence.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose, Quat, RelativeMotion};
use crate::losses::{self, LossConfig, LossMode, PoseNodes, ScaleNodes};
use crate::model::{forward_global, forward_odometry, Group, Mode, ModelParams};
use crate::rng::Rng;
use crate::tensor::{NodeId, Tape, Tensor};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-10,
        }
    }
}

/// Bias-corrected Adam update of one tensor, in place.
pub fn adam_update(
    cfg: &AdamConfig,
    step: u64,
    m: &mut [f64],
    v: &mut [f64],
    param: &mut [f64],
    grad: &[f64],
) {
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Adam moments for a fixed set of parameters (identified by their indices
/// in a [`ModelParams`]).
#[derive(Debug, Clone)]
pub struct AdamState {
    cfg: AdamConfig,
    covered: Vec<usize>,
    m: BTreeMap<usize, Vec<f64>>,
    v: BTreeMap<usize, Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, covered: Vec<usize>, params: &ModelParams) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for &idx in &covered {
            let n = params.param(idx).value.numel();
            m.insert(idx, vec![0.0; n]);
            v.insert(idx, vec![0.0; n]);
        }
        AdamState {
            cfg,
            covered,
            m,
            v,
            step: 0,
        }
    }

    pub fn covered(&self) -> &[usize] {
        &self.covered
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update. Parameters without a gradient entry are treated as
    /// having a zero gradient. Gradients must be finite.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &BTreeMap<usize, Vec<f64>>,
    ) -> Result<()> {
        for g in grads.values() {
            if !g.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite { op: "adam_step" });
            }
        }
        self.step += 1;
        for &idx in &self.covered {
            let m = self.m.get_mut(&idx).expect("covered");
            let v = self.v.get_mut(&idx).expect("covered");
            let param = params.data_mut(idx);
            match grads.get(&idx) {
                Some(grad) => adam_update(&self.cfg, self.step, m, v, param, grad),
                None => {
                    let zeros = vec![0.0; param.len()];
                    adam_update(&self.cfg, self.step, m, v, param, &zeros);
                }
            }
        }
        Ok(())
    }
}

/// Which sub-network(s) a run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskSet {
    /// Global localization stream only.
    Global,
    /// Odometry stream only.
    Vo,
    /// Both tasks.
    Multitask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Joint,
    Alternating,
}

/// Parameter indices reachable by the global task optimizer.
pub fn global_task_indices(params: &ModelParams) -> Vec<usize> {
    let mut idx = Vec::new();
    for g in [
        Group::Shared,
        Group::GlobalOnly,
        Group::HeadsGlobal,
        Group::ScaleGlobal,
    ] {
        idx.extend(params.indices_of_group(g));
    }
    idx.sort_unstable();
    idx
}

/// Parameter indices reachable by the odometry task optimizer.
pub fn odom_task_indices(params: &ModelParams) -> Vec<usize> {
    let mut idx = Vec::new();
    for g in [
        Group::Shared,
        Group::OdomOnly,
        Group::HeadsOdom,
        Group::ScaleVo,
    ] {
        idx.extend(params.indices_of_group(g));
    }
    idx.sort_unstable();
    idx
}

/// One training sample: a consecutive frame pair from a single sequence.
#[derive(Debug, Clone)]
pub struct PairSample {
    pub image_t: Tensor,
    pub image_prev: Tensor,
    pub pose_t: Pose,
    pub pose_prev: Pose,
    pub rel_gt: RelativeMotion,
}

/// Training schedule and hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub strategy: Strategy,
    pub task: TaskSet,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 5000,
            batch_size: 16,
            seed: 0,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            strategy: Strategy::Joint,
            task: TaskSet::Multitask,
        }
    }
}

/// Per-step loss bookkeeping. Component values are batch means at the
/// pre-update parameters; components a phase does not compute are zero.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub l_total: f64,
    pub l_global: f64,
    pub l_x: f64,
    pub l_q: f64,
    pub l_x_odom: f64,
    pub l_q_odom: f64,
    pub l_vo: f64,
    pub s_x: f64,
    pub s_q: f64,
    pub s_x_vo: f64,
    pub s_q_vo: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Global,
    Odometry,
    Both,
}

struct StepOutcome {
    root: NodeId,
    record: StepRecord,
}

fn mean_chain(tape: &Tape, terms: &[NodeId]) -> Result<NodeId> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    tape.scalar_mul(acc, 1.0 / terms.len() as f64)
}

#[allow(clippy::too_many_arguments)]
fn build_step_graph(
    params: &ModelParams,
    binding: &crate::model::Binding,
    tape: &Tape,
    batch: &[&PairSample],
    loss_cfg: &LossConfig,
    phase: Phase,
    step: usize,
    rng: &mut Rng,
) -> Result<StepOutcome> {
    let want_global = phase != Phase::Odometry;
    let want_vo = phase != Phase::Global;
    let s_global = ScaleNodes {
        s_x: binding.id(params.index_of("scale.global.s_x")?),
        s_q: binding.id(params.index_of("scale.global.s_q")?),
    };
    let s_vo = ScaleNodes {
        s_x: binding.id(params.index_of("scale.vo.s_x")?),
        s_q: binding.id(params.index_of("scale.vo.s_q")?),
    };

    let mut per_sample = Vec::with_capacity(batch.len());
    let mut global_terms = Vec::new();
    let mut vo_terms = Vec::new();
    let (mut lx_sum, mut lq_sum, mut lxo_sum, mut lqo_sum) = (0.0, 0.0, 0.0, 0.0);

    for sample in batch {
        let mut sample_terms = Vec::new();
        if want_global {
            let (xh, qh) = forward_global(
                params,
                binding,
                tape,
                &sample.image_t,
                &sample.pose_prev, // teacher forcing
                Mode::Train,
                rng,
            )?;
            let pred = PoseNodes { x: xh, q: qh };
            let composite = match loss_cfg.mode {
                LossMode::Beta => losses::beta_loss(tape, &pred, &sample.pose_t, loss_cfg.beta)?,
                LossMode::Sigma => losses::sigma_loss(tape, &pred, &sample.pose_t, &s_global)?,
                LossMode::GeoBeta => losses::geo_beta_loss(
                    tape,
                    &pred,
                    &sample.pose_t,
                    &sample.pose_prev,
                    &sample.rel_gt,
                    loss_cfg.beta,
                )?,
                LossMode::GeoSigma => losses::geometric_consistency_loss(
                    tape,
                    &pred,
                    &sample.pose_t,
                    &sample.pose_prev,
                    &sample.rel_gt,
                    &s_global,
                )?,
            };
            // Reporting-only component values (not part of the backward root).
            lx_sum += tape.item(losses::trans_loss(tape, pred.x, &sample.pose_t.x)?)?;
            lq_sum += tape.item(losses::rot_loss(tape, pred.q, &sample.pose_t.q)?)?;
            if loss_cfg.mode.uses_prev_pose() {
                let (r_x, r_q) = losses::odom_residuals(tape, &pred, &sample.pose_prev)?;
                let (lxo, lqo) = losses::odom_loss_terms(tape, r_x, r_q, &sample.rel_gt)?;
                lxo_sum += tape.item(lxo)?;
                lqo_sum += tape.item(lqo)?;
            }
            global_terms.push(composite);
            sample_terms.push(composite);
        }
        if want_vo {
            let (xr, qr) = forward_odometry(
                params,
                binding,
                tape,
                &sample.image_t,
                &sample.image_prev,
                Mode::Train,
                rng,
            )?;
            let lvo = losses::vo_loss(tape, &PoseNodes { x: xr, q: qr }, &sample.rel_gt, &s_vo)?;
            vo_terms.push(lvo);
            sample_terms.push(lvo);
        }
        let mut acc = sample_terms[0];
        for &t in &sample_terms[1..] {
            acc = tape.add(acc, t)?;
        }
        per_sample.push(acc);
    }

    let root = mean_chain(tape, &per_sample)?;
    let n = batch.len() as f64;
    let mean_of = |terms: &[NodeId]| -> Result<f64> {
        let mut s = 0.0;
        for &t in terms {
            s += tape.item(t)?;
        }
        Ok(s / n)
    };
    let l_global = if global_terms.is_empty() {
        0.0
    } else {
        mean_of(&global_terms)?
    };
    let l_vo = if vo_terms.is_empty() {
        0.0
    } else {
        mean_of(&vo_terms)?
    };
    let record = StepRecord {
        step,
        l_total: tape.item(root)?,
        l_global,
        l_x: if want_global { lx_sum / n } else { 0.0 },
        l_q: if want_global { lq_sum / n } else { 0.0 },
        l_x_odom: if want_global { lxo_sum / n } else { 0.0 },
        l_q_odom: if want_global { lqo_sum / n } else { 0.0 },
        l_vo,
        s_x: tape.item(s_global.s_x)?,
        s_q: tape.item(s_global.s_q)?,
        s_x_vo: tape.item(s_vo.s_x)?,
        s_q_vo: tape.item(s_vo.s_q)?,
    };
    Ok(StepOutcome { root, record })
}

/// Observer invoked after every optimizer update with the step record and
/// the post-update parameters.
pub type Observer<'a> = &'a mut dyn FnMut(&StepRecord, &ModelParams);

/// Deterministic minibatch training. Returns the per-step loss curves.
///
/// Batches cycle through a seeded shuffle of the pair list; dropout masks
/// derive from the same master seed, so identical seed, config and data
/// yield bit-identical parameters and curves.
pub fn fit(
    params: &mut ModelParams,
    dataset: &[PairSample],
    cfg: &TrainConfig,
    mut observer: Option<Observer<'_>>,
) -> Result<Vec<StepRecord>> {
    cfg.loss.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if cfg.strategy == Strategy::Alternating && cfg.task != TaskSet::Multitask {
        return Err(Error::Config(
            "alternating optimization needs both tasks".into(),
        ));
    }

    let master = Rng::new(cfg.seed);
    let mut shuffle_rng = master.fork(0x734866);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    shuffle_rng.shuffle(&mut order);
    let mut cursor = 0usize;

    let mut joint_opt = None;
    let mut global_opt = None;
    let mut odom_opt = None;
    match cfg.strategy {
        Strategy::Joint => {
            let covered = match cfg.task {
                TaskSet::Global => global_task_indices(params),
                TaskSet::Vo => odom_task_indices(params),
                TaskSet::Multitask => (0..params.len()).collect(),
            };
            joint_opt = Some(AdamState::new(cfg.adam, covered, params));
        }
        Strategy::Alternating => {
            global_opt = Some(AdamState::new(
                cfg.adam,
                global_task_indices(params),
                params,
            ));
            odom_opt = Some(AdamState::new(cfg.adam, odom_task_indices(params), params));
        }
    }

    let mut records = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                shuffle_rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(&dataset[order[cursor]]);
            cursor += 1;
        }

        let phase = match (cfg.strategy, cfg.task) {
            (_, TaskSet::Global) => Phase::Global,
            (_, TaskSet::Vo) => Phase::Odometry,
            (Strategy::Joint, TaskSet::Multitask) => Phase::Both,
            (Strategy::Alternating, TaskSet::Multitask) => {
                if step % 2 == 0 {
                    Phase::Global
                } else {
                    Phase::Odometry
                }
            }
        };

        let tape = Tape::new();
        let binding = params.bind(&tape, true)?;
        let mut step_rng = master.fork(step as u64 + 1);
        let outcome = match build_step_graph(
            params,
            &binding,
            &tape,
            &batch,
            &cfg.loss,
            phase,
            step,
            &mut step_rng,
        ) {
            Ok(o) => o,
            Err(Error::NonFinite { .. }) => return Err(Error::Diverged { step }),
            Err(e) => return Err(e),
        };
        if !outcome.record.l_total.is_finite() {
            return Err(Error::Diverged { step });
        }
        let grads = tape.backward(outcome.root)?;

        let opt = match (cfg.strategy, phase) {
            (Strategy::Joint, _) => joint_opt.as_mut().expect("joint optimizer"),
            (Strategy::Alternating, Phase::Global) => {
                global_opt.as_mut().expect("global optimizer")
            }
            (Strategy::Alternating, _) => odom_opt.as_mut().expect("odometry optimizer"),
        };
        let mut grad_map = BTreeMap::new();
        for &idx in opt.covered() {
            if let Some(g) = grads.get(binding.id(idx)) {
                grad_map.insert(idx, g.to_vec());
            }
        }
        opt.step(params, &grad_map)?;

        if let Some(obs) = observer.as_mut() {
            obs(&outcome.record, params);
        }
        records.push(outcome.record);
    }
    Ok(records)
}

/// Serialize loss curves in the documented CSV layout.
pub fn records_to_csv(records: &[StepRecord]) -> String {
    let mut out =
        String::from("step,L_total,L_x,L_q,L_x_odom,L_q_odom,L_vo,s_x,s_q,s_x_vo,s_q_vo\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.step,
            r.l_total,
            r.l_x,
            r.l_q,
            r.l_x_odom,
            r.l_q_odom,
            r.l_vo,
            r.s_x,
            r.s_q,
            r.s_x_vo,
            r.s_q_vo
        ));
    }
    out
}

/// Sequential evaluation of one sequence: the global stream receives the
/// model's previous prediction, except for the first frame which is anchored
/// at its groundtruth pose. Also returns the odometry stream's relative
/// motion prediction for every consecutive pair.
pub fn predict_sequence(
    params: &ModelParams,
    images: &[Tensor],
    first_gt: &Pose,
) -> Result<(Vec<Pose>, Vec<RelativeMotion>)> {
    let mut rng = Rng::new(0); // eval mode draws nothing
    let mut poses: Vec<Pose> = Vec::with_capacity(images.len());
    let mut rels = Vec::new();
    for (t, image) in images.iter().enumerate() {
        let prev = if t == 0 { *first_gt } else { poses[t - 1] };
        let tape = Tape::new();
        let binding = params.bind(&tape, false)?;
        let (xh, qh) = forward_global(params, &binding, &tape, image, &prev, Mode::Eval, &mut rng)?;
        let xv = tape.value(xh);
        let qv = tape.value(qh);
        poses.push(Pose::new(
            [xv.data()[0], xv.data()[1], xv.data()[2]],
            Quat::new(qv.data()[0], qv.data()[1], qv.data()[2], qv.data()[3]),
        ));
        if t > 0 {
            let tape = Tape::new();
            let binding = params.bind(&tape, false)?;
            let (xr, qr) = forward_odometry(
                params,
                &binding,
                &tape,
                image,
                &images[t - 1],
                Mode::Eval,
                &mut rng,
            )?;
            let xv = tape.value(xr);
            let qv = tape.value(qr);
            rels.push(RelativeMotion {
                x: [xv.data()[0], xv.data()[1], xv.data()[2]],
                q: Quat::new(qv.data()[0], qv.data()[1], qv.data()[2], qv.data()[3]),
            });
        }
    }
    Ok((poses, rels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::ScaleParams;
    use crate::model::{Activation, NetworkConfig};

    fn tiny_config() -> NetworkConfig {
        NetworkConfig {
            input_h: 8,
            input_w: 8,
            input_c: 1,
            stage_channels: vec![4, 8],
            units_per_stage: vec![1, 1],
            share_up_to_stage: 1,
            fuse_prev_pose: true,
            fuse_at_stage: 2,
            fc4_dim: 16,
            fc1_dim: 8,
            dropout_keep: 0.9,
            fuse_dropout_keep: 0.5,
            activation: Activation::Elu,
        }
    }

    fn tiny_params(seed: u64) -> ModelParams {
        ModelParams::build(
            &tiny_config(),
            seed,
            ScaleParams::new(0.0, -1.0),
            ScaleParams::new(0.0, -1.0),
        )
        .unwrap()
    }

    fn tiny_dataset(n: usize, seed: u64) -> Vec<PairSample> {
        let mut rng = Rng::new(seed);
        let cfg = tiny_config();
        let image = |rng: &mut Rng| {
            let n = cfg.input_c * cfg.input_h * cfg.input_w;
            Tensor::new(
                vec![cfg.input_c, cfg.input_h, cfg.input_w],
                (0..n).map(|_| rng.uniform()).collect(),
            )
            .unwrap()
        };
        (0..n)
            .map(|_| {
                let pose_prev = Pose::new(
                    [rng.uniform_in(-1.0, 1.0), rng.uniform_in(-1.0, 1.0), 0.0],
                    Quat::from_yaw_deg(rng.uniform_in(-30.0, 30.0)),
                );
                let pose_t = Pose::new(
                    [
                        pose_prev.x[0] + rng.uniform_in(-0.1, 0.1),
                        pose_prev.x[1] + rng.uniform_in(-0.1, 0.1),
                        0.0,
                    ],
                    Quat::from_yaw_deg(rng.uniform_in(-30.0, 30.0)),
                );
                let rel_gt = crate::geometry::relative_motion(&pose_t, &pose_prev).unwrap();
                PairSample {
                    image_t: image(&mut rng),
                    image_prev: image(&mut rng),
                    pose_t,
                    pose_prev,
                    rel_gt,
                }
            })
            .collect()
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = tiny_params(1);
        let before: Vec<Vec<f64>> = (0..params.len())
            .map(|i| params.param(i).value.data().to_vec())
            .collect();
        let mut opt = AdamState::new(AdamConfig::default(), (0..params.len()).collect(), &params);
        opt.step(&mut params, &BTreeMap::new()).unwrap();
        for i in 0..params.len() {
            assert_eq!(params.param(i).value.data(), before[i].as_slice());
        }
    }

    #[test]
    fn first_step_matches_scalar_hand_computation() {
        // One Adam step from zero moments with constant gradient g:
        // m^ = g, v^ = g^2, update = -lr * g / (|g| + eps).
        let mut params = tiny_params(2);
        let idx = params.index_of("scale.global.s_x").unwrap();
        let before = params.param(idx).value.data()[0];
        let cfg = AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        };
        let mut opt = AdamState::new(cfg, vec![idx], &params);
        let g = 0.3;
        let mut grads = BTreeMap::new();
        grads.insert(idx, vec![g]);
        opt.step(&mut params, &grads).unwrap();
        let after = params.param(idx).value.data()[0];
        let expected = before - cfg.lr * g / (g.abs() + cfg.eps);
        assert!((after - expected).abs() < 1e-15, "{after} vs {expected}");
        assert!(
            ((before - after).abs() - cfg.lr).abs() < 1e-6,
            "magnitude ~ lr"
        );
    }

    #[test]
    fn non_finite_gradients_are_rejected() {
        let mut params = tiny_params(3);
        let mut opt = AdamState::new(AdamConfig::default(), vec![0], &params);
        let mut grads = BTreeMap::new();
        grads.insert(0usize, vec![f64::NAN; params.param(0).value.numel()]);
        assert!(opt.step(&mut params, &grads).is_err());
    }

    #[test]
    fn adam_drives_scale_weight_to_log_loss() {
        // Minimize f(s) = c e^{-s} + s; the stationary point is s = ln c.
        let c = 2.0;
        let cfg = AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        };
        let mut s = 0.0f64;
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        for step in 1..=800u64 {
            let tape = Tape::new();
            let s_node = tape.leaf(Tensor::scalar(s).with_grad()).unwrap();
            let cn = tape.scalar_const(c).unwrap();
            let e = tape.exp(tape.scalar_mul(s_node, -1.0).unwrap()).unwrap();
            let f = tape.add(tape.mul(cn, e).unwrap(), s_node).unwrap();
            let grads = tape.backward(f).unwrap();
            let g = grads.get(s_node).unwrap()[0];
            let mut pslice = [s];
            adam_update(&cfg, step, &mut m, &mut v, &mut pslice, &[g]);
            s = pslice[0];
        }
        assert!(
            (s - c.ln()).abs() < 0.02,
            "s = {s}, expected ln {c} = {}",
            c.ln()
        );
    }

    #[test]
    fn joint_step_updates_every_group_and_reports_consistent_losses() {
        let mut params = tiny_params(4);
        let dataset = tiny_dataset(6, 11);
        let before: Vec<Vec<f64>> = (0..params.len())
            .map(|i| params.param(i).value.data().to_vec())
            .collect();
        let cfg = TrainConfig {
            iterations: 1,
            batch_size: 4,
            seed: 5,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            loss: LossConfig::default(),
            strategy: Strategy::Joint,
            task: TaskSet::Multitask,
        };
        let records = fit(&mut params, &dataset, &cfg, None).unwrap();
        assert_eq!(records.len(), 1);
        let r = &records[0];
        assert!(
            (r.l_total - (r.l_global + r.l_vo)).abs() < 1e-12,
            "total {} != global {} + vo {}",
            r.l_total,
            r.l_global,
            r.l_vo
        );
        for group in Group::ALL {
            let idxs = params.indices_of_group(group);
            if idxs.is_empty() {
                continue;
            }
            let touched = idxs
                .iter()
                .any(|&i| params.param(i).value.data() != before[i].as_slice());
            assert!(
                touched,
                "group {group:?} untouched by a joint multitask step"
            );
        }
    }

    #[test]
    fn alternating_phases_freeze_the_other_task() {
        let mut params = tiny_params(6);
        let dataset = tiny_dataset(6, 12);
        let cfg = TrainConfig {
            iterations: 2,
            batch_size: 3,
            seed: 9,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            loss: LossConfig::default(),
            strategy: Strategy::Alternating,
            task: TaskSet::Multitask,
        };
        let mut snapshots: Vec<Vec<Vec<f64>>> = vec![(0..params.len())
            .map(|i| params.param(i).value.data().to_vec())
            .collect()];
        let mut shared_touch_count = 0usize;
        {
            let mut observer = |_r: &StepRecord, p: &ModelParams| {
                let snap: Vec<Vec<f64>> = (0..p.len())
                    .map(|i| p.param(i).value.data().to_vec())
                    .collect();
                let prev = snapshots.last().unwrap();
                let shared_changed = p
                    .indices_of_group(Group::Shared)
                    .iter()
                    .any(|&i| snap[i] != prev[i]);
                if shared_changed {
                    shared_touch_count += 1;
                }
                snapshots.push(snap);
            };
            fit(&mut params, &dataset, &cfg, Some(&mut observer)).unwrap();
        }
        assert_eq!(snapshots.len(), 3);
        // Step 0 is the global phase: odometry-side parameters are bitwise
        // unchanged; step 1 is the odometry phase: global side unchanged.
        for g in [Group::OdomOnly, Group::HeadsOdom, Group::ScaleVo] {
            for idx in params.indices_of_group(g) {
                assert_eq!(
                    snapshots[0][idx], snapshots[1][idx],
                    "phase=global touched odometry"
                );
            }
        }
        for g in [Group::GlobalOnly, Group::HeadsGlobal, Group::ScaleGlobal] {
            for idx in params.indices_of_group(g) {
                assert_eq!(
                    snapshots[1][idx], snapshots[2][idx],
                    "phase=odometry touched global"
                );
            }
        }
        assert_eq!(
            shared_touch_count, 2,
            "shared set must be updated in both phases"
        );
    }

    #[test]
    fn fit_is_bitwise_deterministic() {
        let run = || {
            let mut params = tiny_params(7);
            let dataset = tiny_dataset(5, 13);
            let cfg = TrainConfig {
                iterations: 3,
                batch_size: 2,
                seed: 21,
                adam: AdamConfig {
                    lr: 1e-3,
                    ..AdamConfig::default()
                },
                loss: LossConfig::default(),
                strategy: Strategy::Joint,
                task: TaskSet::Multitask,
            };
            let records = fit(&mut params, &dataset, &cfg, None).unwrap();
            let flat: Vec<f64> = (0..params.len())
                .flat_map(|i| params.param(i).value.data().to_vec())
                .collect();
            (records_to_csv(&records), flat)
        };
        let (csv1, p1) = run();
        let (csv2, p2) = run();
        assert_eq!(csv1, csv2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn single_task_runs_do_not_touch_the_other_side() {
        let mut params = tiny_params(8);
        let dataset = tiny_dataset(4, 14);
        let before: Vec<Vec<f64>> = (0..params.len())
            .map(|i| params.param(i).value.data().to_vec())
            .collect();
        let cfg = TrainConfig {
            iterations: 2,
            batch_size: 2,
            seed: 3,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            loss: LossConfig::default(),
            strategy: Strategy::Joint,
            task: TaskSet::Global,
        };
        fit(&mut params, &dataset, &cfg, None).unwrap();
        for g in [Group::OdomOnly, Group::HeadsOdom, Group::ScaleVo] {
            for idx in params.indices_of_group(g) {
                assert_eq!(
                    params.param(idx).value.data(),
                    before[idx].as_slice(),
                    "single-task global training touched {}",
                    params.param(idx).name
                );
            }
        }
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let mut params = tiny_params(9);
        let cfg = TrainConfig::default();
        assert!(fit(&mut params, &[], &cfg, None).is_err());
    }

    #[test]
    fn loss_decreases_on_a_small_overfit_set() {
        // 100 steps on 8 samples: the 10-step moving average of the total
        // loss trends monotonically down.
        let mut params = tiny_params(12);
        let dataset = tiny_dataset(8, 16);
        let cfg = TrainConfig {
            iterations: 100,
            batch_size: 4,
            seed: 2,
            adam: AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
            loss: LossConfig::default(),
            strategy: Strategy::Joint,
            task: TaskSet::Multitask,
        };
        let records = fit(&mut params, &dataset, &cfg, None).unwrap();
        let ma: Vec<f64> = (0..10)
            .map(|w| {
                records[w * 10..(w + 1) * 10]
                    .iter()
                    .map(|r| r.l_total)
                    .sum::<f64>()
                    / 10.0
            })
            .collect();
        for pair in ma.windows(2) {
            assert!(pair[1] < pair[0], "moving average must trend down: {ma:?}");
        }
        assert!(ma[9] < 0.5 * ma[0], "no meaningful decrease: {ma:?}");
    }

    #[test]
    fn predict_sequence_bootstraps_from_groundtruth() {
        let params = tiny_params(10);
        let dataset = tiny_dataset(3, 15);
        let images: Vec<Tensor> = dataset.iter().map(|s| s.image_t.clone()).collect();
        let (poses, rels) = predict_sequence(&params, &images, &Pose::IDENTITY).unwrap();
        assert_eq!(poses.len(), 3);
        assert_eq!(rels.len(), 2);
        for p in &poses {
            assert!((p.q.norm() - 1.0).abs() < 1e-9);
        }
    }
}
