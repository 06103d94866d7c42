//! Differentiable loss family for global pose regression and odometry.
//!
//! All losses are built from tape primitives so gradients flow to the
//! predictions (and, where applicable, to the learnable scale weights). The
//! norm throughout is the unsquared Euclidean norm; its subgradient at zero
//! error is the zero vector. Rotation losses operate on the R^4 quaternion
//! difference of the (already normalized) prediction, not on a geodesic
//! distance; groundtruth quaternions are canonicalized to non-negative w on
//! ingestion so the difference is not corrupted by the double-cover sign.
//!
//! The previous predicted pose enters the consistency terms as a constant:
//! training works on image pairs, not unrolled sequences, so no gradient
//! flows into the previous timestep.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose, Quat, RelativeMotion};
use crate::tensor::{NodeId, Tape, Tensor};

/// Learnable loss-balancing weights (log-variance-like).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleParams {
    pub s_x: f64,
    pub s_q: f64,
}

impl ScaleParams {
    pub fn new(s_x: f64, s_q: f64) -> Self {
        ScaleParams { s_x, s_q }
    }
}

/// Which composite objective trains the global pose stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Fixed-weight Euclidean composite: `L_x + beta * L_q`.
    Beta,
    /// Learnable-scale composite: `L_x e^{-s_x} + s_x + L_q e^{-s_q} + s_q`.
    Sigma,
    /// Consistency composite with fixed weight:
    /// `(L_x + L_x_odom) + beta * (L_q + L_q_odom)`.
    GeoBeta,
    /// Geometric consistency loss:
    /// `(L_x + L_x_odom) e^{-s_x} + s_x + (L_q + L_q_odom) e^{-s_q} + s_q`.
    GeoSigma,
}

impl LossMode {
    pub fn uses_prev_pose(&self) -> bool {
        matches!(self, LossMode::GeoBeta | LossMode::GeoSigma)
    }

    pub fn uses_scales(&self) -> bool {
        matches!(self, LossMode::Sigma | LossMode::GeoSigma)
    }
}

/// Loss configuration. `gamma` selects the norm order and is fixed to 2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub mode: LossMode,
    pub beta: f64,
    pub gamma: u32,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            mode: LossMode::GeoSigma,
            beta: 1.0,
            gamma: 2,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma != 2 {
            return Err(Error::Config(format!(
                "only the L2 norm is supported (gamma = 2), got gamma = {}",
                self.gamma
            )));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// A pose prediction on the tape: translation node of shape [3] and rotation
/// node of shape [4] in (w, x, y, z) order.
#[derive(Debug, Clone, Copy)]
pub struct PoseNodes {
    pub x: NodeId,
    pub q: NodeId,
}

/// Scale weights bound to the tape as trainable scalars.
#[derive(Debug, Clone, Copy)]
pub struct ScaleNodes {
    pub s_x: NodeId,
    pub s_q: NodeId,
}

pub fn quat_to_vec4(q: &Quat) -> Vec<f64> {
    vec![q.w, q.x, q.y, q.z]
}

fn const_vec(tape: &Tape, data: Vec<f64>) -> Result<NodeId> {
    tape.constant(Tensor::vector(data))
}

/// Translation loss: Euclidean norm of the prediction error.
pub fn trans_loss(tape: &Tape, x_pred: NodeId, x_gt: &[f64; 3]) -> Result<NodeId> {
    let gt = const_vec(tape, x_gt.to_vec())?;
    tape.l2norm(tape.sub(gt, x_pred)?)
}

/// Rotation loss: Euclidean norm of the R^4 quaternion difference. The
/// prediction is expected to be normalized upstream.
pub fn rot_loss(tape: &Tape, q_pred: NodeId, q_gt: &Quat) -> Result<NodeId> {
    let gt = const_vec(tape, quat_to_vec4(q_gt))?;
    tape.l2norm(tape.sub(gt, q_pred)?)
}

/// Fixed-weight composite of translation and rotation losses.
pub fn beta_loss(tape: &Tape, pred: &PoseNodes, gt: &Pose, beta: f64) -> Result<NodeId> {
    let lx = trans_loss(tape, pred.x, &gt.x)?;
    let lq = rot_loss(tape, pred.q, &gt.q)?;
    tape.add(lx, tape.scalar_mul(lq, beta)?)
}

/// One learnable-scale term: `loss * e^{-s} + s`.
fn sigma_term(tape: &Tape, loss: NodeId, s: NodeId) -> Result<NodeId> {
    let weight = tape.exp(tape.scalar_mul(s, -1.0)?)?;
    tape.add(tape.mul(loss, weight)?, s)
}

/// Learnable-scale composite. Gradients flow into the prediction and into
/// both scale weights.
pub fn sigma_loss(tape: &Tape, pred: &PoseNodes, gt: &Pose, s: &ScaleNodes) -> Result<NodeId> {
    let lx = trans_loss(tape, pred.x, &gt.x)?;
    let lq = rot_loss(tape, pred.q, &gt.q)?;
    tape.add(sigma_term(tape, lx, s.s_x)?, sigma_term(tape, lq, s.s_q)?)
}

/// Relative motion computed from the network's predictions. The previous
/// prediction is a constant input; only the current prediction is
/// differentiated. Returns the translation residual (shape [3]) and the
/// rotation residual (shape [4]).
pub fn odom_residuals(
    tape: &Tape,
    pred_t: &PoseNodes,
    prev_pred: &Pose,
) -> Result<(NodeId, NodeId)> {
    let prev_x = const_vec(tape, prev_pred.x.to_vec())?;
    let r_x = tape.sub(pred_t.x, prev_x)?;
    // Hamilton product with a constant left factor is a linear map.
    let inv_prev = prev_pred.q.inverse()?;
    let m = inv_prev.left_mul_matrix();
    let m_flat: Vec<f64> = m.iter().flatten().copied().collect();
    let m_node = tape.constant(Tensor::new(vec![4, 4], m_flat)?)?;
    let r_q = tape.matmul(m_node, pred_t.q)?;
    Ok((r_x, r_q))
}

/// Odometry penalty terms: Euclidean distances between the groundtruth
/// relative motion and the predicted residuals (quaternions compared as R^4
/// vectors).
pub fn odom_loss_terms(
    tape: &Tape,
    r_x: NodeId,
    r_q: NodeId,
    gt_rel: &RelativeMotion,
) -> Result<(NodeId, NodeId)> {
    let gt_x = const_vec(tape, gt_rel.x.to_vec())?;
    let gt_q = const_vec(tape, quat_to_vec4(&gt_rel.q))?;
    let l_x_odom = tape.l2norm(tape.sub(gt_x, r_x)?)?;
    let l_q_odom = tape.l2norm(tape.sub(gt_q, r_q)?)?;
    Ok((l_x_odom, l_q_odom))
}

/// Geometric consistency loss: the learnable-scale composite over the sums
/// of absolute-pose and relative-motion errors,
/// `(L_x + L_x_odom) e^{-s_x} + s_x + (L_q + L_q_odom) e^{-s_q} + s_q`.
///
/// During training `prev_pred` is the groundtruth previous pose (teacher
/// forcing); during evaluation it is the network's previous prediction.
pub fn geometric_consistency_loss(
    tape: &Tape,
    pred_t: &PoseNodes,
    gt_t: &Pose,
    prev_pred: &Pose,
    gt_rel: &RelativeMotion,
    s: &ScaleNodes,
) -> Result<NodeId> {
    let lx = trans_loss(tape, pred_t.x, &gt_t.x)?;
    let lq = rot_loss(tape, pred_t.q, &gt_t.q)?;
    let (r_x, r_q) = odom_residuals(tape, pred_t, prev_pred)?;
    let (lxo, lqo) = odom_loss_terms(tape, r_x, r_q, gt_rel)?;
    let tx = sigma_term(tape, tape.add(lx, lxo)?, s.s_x)?;
    let tq = sigma_term(tape, tape.add(lq, lqo)?, s.s_q)?;
    tape.add(tx, tq)
}

/// Consistency composite with a fixed weight instead of learnable scales:
/// `(L_x + L_x_odom) + beta (L_q + L_q_odom)`.
pub fn geo_beta_loss(
    tape: &Tape,
    pred_t: &PoseNodes,
    gt_t: &Pose,
    prev_pred: &Pose,
    gt_rel: &RelativeMotion,
    beta: f64,
) -> Result<NodeId> {
    let lx = trans_loss(tape, pred_t.x, &gt_t.x)?;
    let lq = rot_loss(tape, pred_t.q, &gt_t.q)?;
    let (r_x, r_q) = odom_residuals(tape, pred_t, prev_pred)?;
    let (lxo, lqo) = odom_loss_terms(tape, r_x, r_q, gt_rel)?;
    let x_part = tape.add(lx, lxo)?;
    let q_part = tape.add(lq, lqo)?;
    tape.add(x_part, tape.scalar_mul(q_part, beta)?)
}

/// Visual odometry loss: the learnable-scale composite applied to the
/// predicted relative motion, with its own scale weights.
pub fn vo_loss(
    tape: &Tape,
    rel_pred: &PoseNodes,
    rel_gt: &RelativeMotion,
    s_vo: &ScaleNodes,
) -> Result<NodeId> {
    let as_pose = Pose {
        x: rel_gt.x,
        q: rel_gt.q,
    };
    sigma_loss(tape, rel_pred, &as_pose, s_vo)
}

/// Named gradient checks for every loss, for the verification harness.
/// Returns one row per loss with the worst relative error over `points`
/// seeded random points.
pub fn loss_suite(seed: u64, points: usize) -> Result<Vec<crate::tensor::gradcheck::SuiteRow>> {
    use crate::rng::Rng;
    use crate::tensor::gradcheck::{fnv1a, grad_check, SuiteRow, DEFAULT_STEP};

    fn rand_vec3(rng: &mut Rng) -> [f64; 3] {
        [
            rng.uniform_in(-2.0, 2.0),
            rng.uniform_in(-2.0, 2.0),
            rng.uniform_in(-2.0, 2.0),
        ]
    }
    fn rand_unit(rng: &mut Rng) -> Quat {
        loop {
            let q = Quat::new(rng.normal(), rng.normal(), rng.normal(), rng.normal());
            if q.norm() > 0.1 {
                return q.normalized().expect("norm checked");
            }
        }
    }
    fn rand_pose(rng: &mut Rng) -> Pose {
        Pose::new(rand_vec3(rng), rand_unit(rng))
    }
    fn t3(v: [f64; 3]) -> Tensor {
        Tensor::vector(v.to_vec())
    }
    fn t4(q: &Quat) -> Tensor {
        Tensor::vector(quat_to_vec4(q))
    }
    fn ts(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    type Item = (&'static str, Box<dyn Fn(&mut Rng) -> Result<f64>>);
    let items: Vec<Item> = vec![
        (
            "trans_loss",
            Box::new(|rng| {
                let gt = rand_vec3(rng);
                let pred = rand_vec3(rng);
                grad_check(
                    move |tape, ids| trans_loss(tape, ids[0], &gt),
                    &[t3(pred)],
                    DEFAULT_STEP,
                )
            }),
        ),
        (
            "rot_loss",
            Box::new(|rng| {
                let gt = rand_unit(rng);
                let pred = rand_unit(rng);
                grad_check(
                    move |tape, ids| rot_loss(tape, ids[0], &gt),
                    &[t4(&pred)],
                    DEFAULT_STEP,
                )
            }),
        ),
        (
            "beta_loss",
            Box::new(|rng| {
                let gt = rand_pose(rng);
                let beta = rng.uniform_in(0.5, 3.0);
                let (px, pq) = (rand_vec3(rng), rand_unit(rng));
                grad_check(
                    move |tape, ids| {
                        beta_loss(
                            tape,
                            &PoseNodes {
                                x: ids[0],
                                q: ids[1],
                            },
                            &gt,
                            beta,
                        )
                    },
                    &[t3(px), t4(&pq)],
                    DEFAULT_STEP,
                )
            }),
        ),
        (
            "sigma_loss",
            Box::new(|rng| {
                let gt = rand_pose(rng);
                let (px, pq) = (rand_vec3(rng), rand_unit(rng));
                let (sx, sq) = (rng.uniform_in(-2.0, 1.0), rng.uniform_in(-2.0, 1.0));
                grad_check(
                    move |tape, ids| {
                        sigma_loss(
                            tape,
                            &PoseNodes {
                                x: ids[0],
                                q: ids[1],
                            },
                            &gt,
                            &ScaleNodes {
                                s_x: ids[2],
                                s_q: ids[3],
                            },
                        )
                    },
                    &[t3(px), t4(&pq), ts(sx), ts(sq)],
                    DEFAULT_STEP,
                )
            }),
        ),
        (
            "odom_trans_term",
            Box::new(|rng| {
                let prev = rand_pose(rng);
                let gt_rel = RelativeMotion {
                    x: rand_vec3(rng),
                    q: rand_unit(rng),
                };
                let (px, pq) = (rand_vec3(rng), rand_unit(rng));
                grad_check(
                    move |tape, ids| {
                        let pred = PoseNodes {
                            x: ids[0],
                            q: ids[1],
                        };
                        let (r_x, r_q) = odom_residuals(tape, &pred, &prev)?;
                        let (lxo, _) = odom_loss_terms(tape, r_x, r_q, &gt_rel)?;
                        Ok(lxo)
                    },
                    &[t3(px), t4(&pq)],
                    DEFAULT_STEP,
                )
            }),
        ),
        (
            "odom_rot_term",
            Box::new(|rng| {
                let prev = rand_pose(rng);
                let gt_rel = RelativeMotion {
                    x: rand_vec3(rng),
                    q: rand_unit(rng),
                };
                let (px, pq) = (rand_vec3(rng), rand_unit(rng));
                grad_check(
                    move |tape, ids| {
                        let pred = PoseNodes {
                            x: ids[0],
                            q: ids[1],
                        };
                        let (r_x, r_q) = odom_residuals(tape, &pred, &prev)?;
                        let (_, lqo) = odom_loss_terms(tape, r_x, r_q, &gt_rel)?;
                        Ok(lqo)
                    },
                    &[t3(px), t4(&pq)],
                    DEFAULT_STEP,
                )
            }),
        ),
        (
            "geometric_consistency_loss",
            Box::new(|rng| {
                let gt = rand_pose(rng);
                let prev = rand_pose(rng);
                let gt_rel = crate::geometry::relative_motion(&gt, &prev)?;
                let (px, pq) = (rand_vec3(rng), rand_unit(rng));
                let (sx, sq) = (rng.uniform_in(-2.0, 1.0), rng.uniform_in(-2.0, 1.0));
                grad_check(
                    move |tape, ids| {
                        geometric_consistency_loss(
                            tape,
                            &PoseNodes {
                                x: ids[0],
                                q: ids[1],
                            },
                            &gt,
                            &prev,
                            &gt_rel,
                            &ScaleNodes {
                                s_x: ids[2],
                                s_q: ids[3],
                            },
                        )
                    },
                    &[t3(px), t4(&pq), ts(sx), ts(sq)],
                    DEFAULT_STEP,
                )
            }),
        ),
        (
            "vo_loss",
            Box::new(|rng| {
                let rel_gt = RelativeMotion {
                    x: rand_vec3(rng),
                    q: rand_unit(rng),
                };
                let (px, pq) = (rand_vec3(rng), rand_unit(rng));
                let (sx, sq) = (rng.uniform_in(-2.0, 1.0), rng.uniform_in(-2.0, 1.0));
                grad_check(
                    move |tape, ids| {
                        vo_loss(
                            tape,
                            &PoseNodes {
                                x: ids[0],
                                q: ids[1],
                            },
                            &rel_gt,
                            &ScaleNodes {
                                s_x: ids[2],
                                s_q: ids[3],
                            },
                        )
                    },
                    &[t3(px), t4(&pq), ts(sx), ts(sq)],
                    DEFAULT_STEP,
                )
            }),
        ),
    ];

    let mut rows = Vec::with_capacity(items.len());
    for (name, run) in &items {
        let mut rng = Rng::new(seed ^ fnv1a(name.as_bytes()));
        let mut worst = 0.0f64;
        for _ in 0..points {
            worst = worst.max(run(&mut rng)?);
        }
        rows.push(SuiteRow {
            name: name.to_string(),
            max_rel_err: worst,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rand_unit(rng: &mut Rng) -> Quat {
        loop {
            let q = Quat::new(rng.normal(), rng.normal(), rng.normal(), rng.normal());
            if q.norm() > 0.1 {
                return q.normalized().unwrap();
            }
        }
    }

    fn rand_vec3(rng: &mut Rng) -> [f64; 3] {
        [
            rng.uniform_in(-2.0, 2.0),
            rng.uniform_in(-2.0, 2.0),
            rng.uniform_in(-2.0, 2.0),
        ]
    }

    fn pose_nodes(tape: &Tape, x: [f64; 3], q: &Quat) -> PoseNodes {
        PoseNodes {
            x: tape.leaf(Tensor::vector(x.to_vec()).with_grad()).unwrap(),
            q: tape
                .leaf(Tensor::vector(quat_to_vec4(q)).with_grad())
                .unwrap(),
        }
    }

    fn scale_nodes(tape: &Tape, s_x: f64, s_q: f64) -> ScaleNodes {
        ScaleNodes {
            s_x: tape.leaf(Tensor::scalar(s_x).with_grad()).unwrap(),
            s_q: tape.leaf(Tensor::scalar(s_q).with_grad()).unwrap(),
        }
    }

    // Plain-f64 re-implementations, kept deliberately independent of the tape.
    fn norm3(v: [f64; 3]) -> f64 {
        (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
    }
    fn norm4(v: [f64; 4]) -> f64 {
        (v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + v[3] * v[3]).sqrt()
    }
    fn scalar_hamilton(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
        [
            a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
            a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
            a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
            a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
        ]
    }

    #[test]
    fn trans_loss_examples() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let zero = trans_loss(&tape, x, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(tape.item(zero).unwrap(), 0.0);

        let y = tape.constant(Tensor::vector(vec![1.0, 0.0, 0.0])).unwrap();
        let unit = trans_loss(&tape, y, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(tape.item(unit).unwrap(), 1.0);
    }

    #[test]
    fn beta_loss_substitutions() {
        // L_x = 1, L_q = 2, beta = 1 -> 3.
        let tape = Tape::new();
        let pred = PoseNodes {
            x: tape.constant(Tensor::vector(vec![1.0, 0.0, 0.0])).unwrap(),
            q: tape
                .constant(Tensor::vector(vec![1.0, 2.0, 0.0, 0.0]))
                .unwrap(),
        };
        let gt = Pose::IDENTITY;
        let l = beta_loss(&tape, &pred, &gt, 1.0).unwrap();
        assert!((tape.item(l).unwrap() - 3.0).abs() < 1e-15);

        // beta = 500, L_q = 0.01, L_x = 0 -> 5.
        let tape = Tape::new();
        let pred = PoseNodes {
            x: tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0])).unwrap(),
            q: tape
                .constant(Tensor::vector(vec![1.0, 0.01, 0.0, 0.0]))
                .unwrap(),
        };
        let l = beta_loss(&tape, &pred, &gt, 500.0).unwrap();
        assert!((tape.item(l).unwrap() - 5.0).abs() < 1e-12);

        // Perfect prediction -> 0.
        let tape = Tape::new();
        let pred = PoseNodes {
            x: tape.constant(Tensor::vector(vec![0.0; 3])).unwrap(),
            q: tape
                .constant(Tensor::vector(vec![1.0, 0.0, 0.0, 0.0]))
                .unwrap(),
        };
        let l = beta_loss(&tape, &pred, &gt, 1.0).unwrap();
        assert_eq!(tape.item(l).unwrap(), 0.0);
    }

    #[test]
    fn sigma_loss_substitutions() {
        // Perfect prediction, s_x = -3, s_q = -4 -> -7.
        let tape = Tape::new();
        let pred = pose_nodes(&tape, [0.0; 3], &Quat::IDENTITY);
        let s = scale_nodes(&tape, -3.0, -4.0);
        let l = sigma_loss(&tape, &pred, &Pose::IDENTITY, &s).unwrap();
        assert_eq!(tape.item(l).unwrap(), -7.0);

        // L_x = L_q = 1 at s = 0 -> 2.
        let tape = Tape::new();
        let pred = pose_nodes(&tape, [1.0, 0.0, 0.0], &Quat::new(1.0, 1.0, 0.0, 0.0));
        let s = scale_nodes(&tape, 0.0, 0.0);
        let l = sigma_loss(&tape, &pred, &Pose::IDENTITY, &s).unwrap();
        assert!((tape.item(l).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn sigma_loss_stationary_in_s_at_log_loss() {
        // dL/ds_x = -L_x e^{-s_x} + 1 vanishes where s_x = ln L_x; with
        // L_x = 1 that is s_x = 0.
        let tape = Tape::new();
        let pred = pose_nodes(&tape, [1.0, 0.0, 0.0], &Quat::IDENTITY);
        let s = scale_nodes(&tape, 0.0, -1.0);
        let l = sigma_loss(&tape, &pred, &Pose::IDENTITY, &s).unwrap();
        let grads = tape.backward(l).unwrap();
        let g_sx = grads.get(s.s_x).unwrap()[0];
        assert!(g_sx.abs() < 1e-12, "stationarity violated: {g_sx}");
    }

    #[test]
    fn odom_residuals_examples() {
        // Identical predictions -> zero translation, identity rotation.
        let tape = Tape::new();
        let prev = Pose::new([0.5, -1.0, 2.0], Quat::from_yaw_deg(30.0));
        let pred = pose_nodes(&tape, prev.x, &prev.q);
        let (r_x, r_q) = odom_residuals(&tape, &pred, &prev).unwrap();
        assert!(tape.value(r_x).data().iter().all(|v| v.abs() < 1e-15));
        let rq = tape.value(r_q);
        assert!((rq.data()[0] - 1.0).abs() < 1e-12);
        assert!(rq.data()[1..].iter().all(|v| v.abs() < 1e-12));

        // Pure forward step.
        let tape = Tape::new();
        let prev = Pose::IDENTITY;
        let pred = pose_nodes(&tape, [0.0, 0.0, 1.0], &Quat::IDENTITY);
        let (r_x, _) = odom_residuals(&tape, &pred, &prev).unwrap();
        assert_eq!(tape.value(r_x).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn odom_terms_three_four_five() {
        let tape = Tape::new();
        let prev = Pose::IDENTITY;
        let pred = pose_nodes(&tape, [0.3, 0.0, 0.4], &Quat::IDENTITY);
        let gt_rel = RelativeMotion::IDENTITY;
        let (r_x, r_q) = odom_residuals(&tape, &pred, &prev).unwrap();
        let (lxo, lqo) = odom_loss_terms(&tape, r_x, r_q, &gt_rel).unwrap();
        assert!((tape.item(lxo).unwrap() - 0.5).abs() < 1e-15);
        assert!(tape.item(lqo).unwrap() < 1e-12);

        // Residuals equal to the groundtruth motion -> (0, 0).
        let tape = Tape::new();
        let pred = pose_nodes(&tape, [0.25, 0.5, -0.75], &Quat::IDENTITY);
        let gt_rel = RelativeMotion {
            x: [0.25, 0.5, -0.75],
            q: Quat::IDENTITY,
        };
        let (r_x, r_q) = odom_residuals(&tape, &pred, &Pose::IDENTITY).unwrap();
        let (lxo, lqo) = odom_loss_terms(&tape, r_x, r_q, &gt_rel).unwrap();
        assert_eq!(tape.item(lxo).unwrap(), 0.0);
        assert_eq!(tape.item(lqo).unwrap(), 0.0);
    }

    #[test]
    fn odom_terms_match_scalar_oracle() {
        let mut rng = Rng::new(21);
        for _ in 0..100 {
            let prev = Pose::new(rand_vec3(&mut rng), rand_unit(&mut rng));
            let pq = rand_unit(&mut rng);
            let px = rand_vec3(&mut rng);
            let gt_rel = RelativeMotion {
                x: rand_vec3(&mut rng),
                q: rand_unit(&mut rng),
            };

            let tape = Tape::new();
            let pred = pose_nodes(&tape, px, &pq);
            let (r_x, r_q) = odom_residuals(&tape, &pred, &prev).unwrap();
            let (lxo, lqo) = odom_loss_terms(&tape, r_x, r_q, &gt_rel).unwrap();

            // Scalar oracle by hand formula.
            let rx = [px[0] - prev.x[0], px[1] - prev.x[1], px[2] - prev.x[2]];
            let exp_lxo = norm3([
                gt_rel.x[0] - rx[0],
                gt_rel.x[1] - rx[1],
                gt_rel.x[2] - rx[2],
            ]);
            let inv = [prev.q.w, -prev.q.x, -prev.q.y, -prev.q.z];
            let rq = scalar_hamilton(inv, [pq.w, pq.x, pq.y, pq.z]);
            let exp_lqo = norm4([
                gt_rel.q.w - rq[0],
                gt_rel.q.x - rq[1],
                gt_rel.q.y - rq[2],
                gt_rel.q.z - rq[3],
            ]);
            assert!((tape.item(lxo).unwrap() - exp_lxo).abs() < 1e-12);
            assert!((tape.item(lqo).unwrap() - exp_lqo).abs() < 1e-12);
        }
    }

    #[test]
    fn geo_loss_perfect_prediction_is_exactly_scale_sum() {
        // Zero motion with binary-exact translations: every loss term is an
        // exact float zero, so the total is exactly s_x + s_q.
        let tape = Tape::new();
        let gt = Pose::new([0.5, 0.25, -0.75], Quat::IDENTITY);
        let pred = pose_nodes(&tape, gt.x, &gt.q);
        let s = scale_nodes(&tape, -1.5, -2.25);
        let l = geometric_consistency_loss(&tape, &pred, &gt, &gt, &RelativeMotion::IDENTITY, &s)
            .unwrap();
        assert_eq!(tape.item(l).unwrap(), -3.75);
    }

    #[test]
    fn geo_loss_reduces_to_sigma_loss_when_odometry_terms_vanish() {
        // Choose the previous predicted pose so the predicted relative motion
        // equals the groundtruth relative motion; the consistency terms are
        // then ~0 and the composites agree.
        let mut rng = Rng::new(22);
        for _ in 0..100 {
            let gt = Pose::new(rand_vec3(&mut rng), rand_unit(&mut rng));
            let px = rand_vec3(&mut rng);
            let pq = rand_unit(&mut rng);
            let gt_rel = RelativeMotion {
                x: rand_vec3(&mut rng),
                q: rand_unit(&mut rng),
            };
            // prev = (pred_x - rel_x, pred_q * rel_q^-1)
            let prev = Pose::new(
                [
                    px[0] - gt_rel.x[0],
                    px[1] - gt_rel.x[1],
                    px[2] - gt_rel.x[2],
                ],
                pq.mul(&gt_rel.q.inverse().unwrap()).unwrap(),
            );
            let (sx, sq) = (rng.uniform_in(-3.0, 1.0), rng.uniform_in(-3.0, 1.0));

            let tape = Tape::new();
            let pred = pose_nodes(&tape, px, &pq);
            let s = scale_nodes(&tape, sx, sq);
            let geo = geometric_consistency_loss(&tape, &pred, &gt, &prev, &gt_rel, &s).unwrap();

            let tape2 = Tape::new();
            let pred2 = pose_nodes(&tape2, px, &pq);
            let s2 = scale_nodes(&tape2, sx, sq);
            let sig = sigma_loss(&tape2, &pred2, &gt, &s2).unwrap();

            let diff = (tape.item(geo).unwrap() - tape2.item(sig).unwrap()).abs();
            assert!(diff < 1e-12, "difference {diff}");
        }
    }

    #[test]
    fn sigma_at_zero_scales_equals_beta_at_one() {
        let mut rng = Rng::new(23);
        for _ in 0..100 {
            let gt = Pose::new(rand_vec3(&mut rng), rand_unit(&mut rng));
            let px = rand_vec3(&mut rng);
            let pq = rand_unit(&mut rng);

            let tape = Tape::new();
            let pred = pose_nodes(&tape, px, &pq);
            let s = scale_nodes(&tape, 0.0, 0.0);
            let sig = sigma_loss(&tape, &pred, &gt, &s).unwrap();

            let tape2 = Tape::new();
            let pred2 = pose_nodes(&tape2, px, &pq);
            let bet = beta_loss(&tape2, &pred2, &gt, 1.0).unwrap();

            let diff = (tape.item(sig).unwrap() - tape2.item(bet).unwrap()).abs();
            assert!(diff < 1e-12, "difference {diff}");
        }
    }

    #[test]
    fn vo_loss_is_sigma_loss_on_relative_quantities() {
        let mut rng = Rng::new(24);
        for _ in 0..100 {
            let rel_gt = RelativeMotion {
                x: rand_vec3(&mut rng),
                q: rand_unit(&mut rng),
            };
            let px = rand_vec3(&mut rng);
            let pq = rand_unit(&mut rng);
            let (sx, sq) = (rng.uniform_in(-3.0, 1.0), rng.uniform_in(-3.0, 1.0));

            let tape = Tape::new();
            let pred = pose_nodes(&tape, px, &pq);
            let s = scale_nodes(&tape, sx, sq);
            let vo = vo_loss(&tape, &pred, &rel_gt, &s).unwrap();

            let tape2 = Tape::new();
            let pred2 = pose_nodes(&tape2, px, &pq);
            let s2 = scale_nodes(&tape2, sx, sq);
            let gt_pose = Pose::new(rel_gt.x, rel_gt.q);
            let sig = sigma_loss(&tape2, &pred2, &gt_pose, &s2).unwrap();

            assert_eq!(tape.item(vo).unwrap(), tape2.item(sig).unwrap());
        }

        // Perfect relative prediction -> s_x + s_q.
        let tape = Tape::new();
        let rel_gt = RelativeMotion {
            x: [0.5, 0.0, -0.25],
            q: Quat::IDENTITY,
        };
        let pred = pose_nodes(&tape, rel_gt.x, &rel_gt.q);
        let s = scale_nodes(&tape, -1.0, -2.0);
        let vo = vo_loss(&tape, &pred, &rel_gt, &s).unwrap();
        assert_eq!(tape.item(vo).unwrap(), -3.0);
    }

    #[test]
    fn translation_error_monotonicity() {
        let gt = Pose::IDENTITY;
        let mut last_lx = -1.0;
        let mut last_total = f64::NEG_INFINITY;
        for k in 1..=5 {
            let offset = 0.3 * k as f64;
            let tape = Tape::new();
            let pred = pose_nodes(&tape, [offset, 0.0, 0.0], &Quat::IDENTITY);
            let lx = trans_loss(&tape, pred.x, &gt.x).unwrap();
            let s = scale_nodes(&tape, -1.0, -1.0);
            let total = sigma_loss(&tape, &pred, &gt, &s).unwrap();
            let lx_v = tape.item(lx).unwrap();
            let total_v = tape.item(total).unwrap();
            assert!(lx_v > last_lx, "L_x not strictly increasing");
            assert!(total_v > last_total, "total not strictly increasing");
            last_lx = lx_v;
            last_total = total_v;
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        for row in loss_suite(0xfeed, 20).unwrap() {
            assert!(
                row.max_rel_err < 1e-4,
                "{}: max relative error {}",
                row.name,
                row.max_rel_err
            );
        }
    }

    #[test]
    fn loss_config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig {
            gamma: 1,
            ..LossConfig::default()
        }
        .validate()
        .is_err());
        assert!(LossConfig {
            beta: 0.0,
            ..LossConfig::default()
        }
        .validate()
        .is_err());
    }
}
