//! Central-difference gradient verification.
//!
//! `grad_check` compares the tape's reverse-mode gradient of a scalar-valued
//! function against central finite differences, coordinate by coordinate, and
//! reports the largest relative error. The comparison is the oracle for every
//! primitive and every loss in this crate.

use crate::error::{Error, Result};
use crate::rng::Rng;

use super::{NodeId, Padding, Tape, Tensor};

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// A named suite entry result.
#[derive(Debug, Clone)]
pub struct SuiteRow {
    pub name: String,
    pub max_rel_err: f64,
}

/// Maximum over all coordinates of
/// `|analytic - central_difference| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, point: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&Tape, &[NodeId]) -> Result<NodeId>,
{
    grad_check_with_fault(f, point, step, 1.0)
}

/// `grad_check` with the analytic gradient deliberately scaled. A scale other
/// than 1 simulates a broken backward implementation; it exists so the
/// harness can prove it detects corrupted gradients.
pub fn grad_check_with_fault<F>(f: F, point: &[Tensor], step: f64, grad_scale: f64) -> Result<f64>
where
    F: Fn(&Tape, &[NodeId]) -> Result<NodeId>,
{
    if !(step > 0.0) {
        return Err(Error::Config(format!(
            "finite-difference step {step} must be positive"
        )));
    }
    // Analytic pass.
    let tape = Tape::new();
    let ids: Vec<NodeId> = point
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect::<Result<_>>()?;
    let root = f(&tape, &ids)?;
    if !tape.value(root).is_scalar() {
        return Err(Error::Autodiff(format!(
            "grad_check target must be scalar, got {:?}",
            tape.shape_of(root)
        )));
    }
    let grads = tape.backward(root)?;

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let ids: Vec<NodeId> = inputs
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect::<Result<_>>()?;
        let root = f(&tape, &ids)?;
        tape.item(root)
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = point.to_vec();
    for (i, input) in point.iter().enumerate() {
        for j in 0..input.numel() {
            let x = input.data()[j];
            work[i].data_mut()[j] = x + step;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = x - step;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = x;
            let numeric = (fp - fm) / (2.0 * step);
            let analytic = grads.get(ids[i]).map_or(0.0, |g| g[j]) * grad_scale;
            let err = (analytic - numeric).abs() / analytic.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn rand_tensor(rng: &mut Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_in(lo, hi)).collect();
    Tensor::new(shape, data).expect("consistent shape")
}

/// Mix the (possibly non-scalar) output into a scalar with random weights so
/// the upstream gradient seen by the checked op is non-uniform.
fn scalarize(tape: &Tape, out: NodeId, weights: &Tensor) -> Result<NodeId> {
    let w = tape.constant(weights.clone())?;
    let flat = tape.reshape(out, vec![weights.numel()])?;
    tape.sum(tape.mul(flat, w)?)
}

struct SuiteItem {
    name: &'static str,
    run: Box<dyn Fn(&mut Rng) -> Result<f64>>,
}

fn check_one<F>(rng: &mut Rng, inputs: Vec<Tensor>, out_numel: usize, f: F) -> Result<f64>
where
    F: Fn(&Tape, &[NodeId]) -> Result<NodeId>,
{
    let weights = rand_tensor(rng, vec![out_numel], -1.0, 1.0);
    grad_check(
        |tape, ids| {
            let out = f(tape, ids)?;
            scalarize(tape, out, &weights)
        },
        &inputs,
        DEFAULT_STEP,
    )
}

/// Gradient-check every tape primitive at `points` random points per
/// primitive. Returns one row per primitive with the worst relative error.
pub fn primitive_suite(seed: u64, points: usize) -> Result<Vec<SuiteRow>> {
    let items: Vec<SuiteItem> = vec![
        SuiteItem {
            name: "add",
            run: Box::new(|rng| {
                let inputs = vec![
                    rand_tensor(rng, vec![5], -2.0, 2.0),
                    rand_tensor(rng, vec![5], -2.0, 2.0),
                ];
                check_one(rng, inputs, 5, |t, ids| t.add(ids[0], ids[1]))
            }),
        },
        SuiteItem {
            name: "sub",
            run: Box::new(|rng| {
                let inputs = vec![
                    rand_tensor(rng, vec![5], -2.0, 2.0),
                    rand_tensor(rng, vec![5], -2.0, 2.0),
                ];
                check_one(rng, inputs, 5, |t, ids| t.sub(ids[0], ids[1]))
            }),
        },
        SuiteItem {
            name: "mul",
            run: Box::new(|rng| {
                let inputs = vec![
                    rand_tensor(rng, vec![5], -2.0, 2.0),
                    rand_tensor(rng, vec![5], -2.0, 2.0),
                ];
                check_one(rng, inputs, 5, |t, ids| t.mul(ids[0], ids[1]))
            }),
        },
        SuiteItem {
            name: "scalar_mul",
            run: Box::new(|rng| {
                let c = rng.uniform_in(-2.0, 2.0);
                let inputs = vec![rand_tensor(rng, vec![4], -2.0, 2.0)];
                check_one(rng, inputs, 4, move |t, ids| t.scalar_mul(ids[0], c))
            }),
        },
        SuiteItem {
            name: "div_scalar",
            run: Box::new(|rng| {
                let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
                let den = Tensor::scalar(sign * rng.uniform_in(0.5, 2.0));
                let inputs = vec![rand_tensor(rng, vec![3], -2.0, 2.0), den];
                check_one(rng, inputs, 3, |t, ids| t.div_scalar(ids[0], ids[1]))
            }),
        },
        SuiteItem {
            name: "matmul",
            run: Box::new(|rng| {
                let inputs = vec![
                    rand_tensor(rng, vec![3, 4], -1.5, 1.5),
                    rand_tensor(rng, vec![4, 2], -1.5, 1.5),
                ];
                check_one(rng, inputs, 6, |t, ids| t.matmul(ids[0], ids[1]))
            }),
        },
        SuiteItem {
            name: "matmul_vec",
            run: Box::new(|rng| {
                let inputs = vec![
                    rand_tensor(rng, vec![3, 4], -1.5, 1.5),
                    rand_tensor(rng, vec![4], -1.5, 1.5),
                ];
                check_one(rng, inputs, 3, |t, ids| t.matmul(ids[0], ids[1]))
            }),
        },
        SuiteItem {
            name: "conv2d_s1_valid",
            run: Box::new(|rng| {
                let inputs = vec![
                    rand_tensor(rng, vec![2, 5, 5], -1.0, 1.0),
                    rand_tensor(rng, vec![3, 2, 3, 3], -1.0, 1.0),
                ];
                check_one(rng, inputs, 3 * 3 * 3, |t, ids| {
                    t.conv2d(ids[0], ids[1], 1, Padding::Valid)
                })
            }),
        },
        SuiteItem {
            name: "conv2d_s1_same",
            run: Box::new(|rng| {
                let inputs = vec![
                    rand_tensor(rng, vec![2, 5, 5], -1.0, 1.0),
                    rand_tensor(rng, vec![3, 2, 3, 3], -1.0, 1.0),
                ];
                check_one(rng, inputs, 3 * 5 * 5, |t, ids| {
                    t.conv2d(ids[0], ids[1], 1, Padding::Same)
                })
            }),
        },
        SuiteItem {
            name: "conv2d_s2_same",
            run: Box::new(|rng| {
                let inputs = vec![
                    rand_tensor(rng, vec![2, 6, 6], -1.0, 1.0),
                    rand_tensor(rng, vec![3, 2, 3, 3], -1.0, 1.0),
                ];
                check_one(rng, inputs, 3 * 3 * 3, |t, ids| {
                    t.conv2d(ids[0], ids[1], 2, Padding::Same)
                })
            }),
        },
        SuiteItem {
            name: "conv2d_1x1",
            run: Box::new(|rng| {
                let inputs = vec![
                    rand_tensor(rng, vec![3, 4, 4], -1.0, 1.0),
                    rand_tensor(rng, vec![2, 3, 1, 1], -1.0, 1.0),
                ];
                check_one(rng, inputs, 2 * 4 * 4, |t, ids| {
                    t.conv2d(ids[0], ids[1], 1, Padding::Valid)
                })
            }),
        },
        SuiteItem {
            name: "elu",
            run: Box::new(|rng| {
                let inputs = vec![rand_tensor(rng, vec![6], -2.0, 2.0)];
                check_one(rng, inputs, 6, |t, ids| t.elu(ids[0]))
            }),
        },
        SuiteItem {
            name: "relu",
            run: Box::new(|rng| {
                // Keep samples away from the kink.
                let mut t = rand_tensor(rng, vec![6], -2.0, 2.0);
                for v in t.data_mut() {
                    if v.abs() < 0.1 {
                        *v += 0.2_f64.copysign(*v);
                    }
                }
                check_one(rng, vec![t], 6, |t, ids| t.relu(ids[0]))
            }),
        },
        SuiteItem {
            name: "channel_affine",
            run: Box::new(|rng| {
                let inputs = vec![
                    rand_tensor(rng, vec![3, 2, 2], -1.0, 1.0),
                    rand_tensor(rng, vec![3], 0.5, 1.5),
                    rand_tensor(rng, vec![3], -0.5, 0.5),
                ];
                check_one(rng, inputs, 12, |t, ids| {
                    t.channel_affine(ids[0], ids[1], ids[2])
                })
            }),
        },
        SuiteItem {
            name: "global_avg_pool",
            run: Box::new(|rng| {
                let inputs = vec![rand_tensor(rng, vec![3, 3, 3], -1.0, 1.0)];
                check_one(rng, inputs, 3, |t, ids| t.global_avg_pool(ids[0]))
            }),
        },
        SuiteItem {
            name: "concat_channels",
            run: Box::new(|rng| {
                let inputs = vec![
                    rand_tensor(rng, vec![2, 2, 2], -1.0, 1.0),
                    rand_tensor(rng, vec![3, 2, 2], -1.0, 1.0),
                ];
                check_one(rng, inputs, 20, |t, ids| t.concat_channels(ids[0], ids[1]))
            }),
        },
        SuiteItem {
            name: "reshape",
            run: Box::new(|rng| {
                let inputs = vec![rand_tensor(rng, vec![2, 6], -1.0, 1.0)];
                check_one(rng, inputs, 12, |t, ids| t.reshape(ids[0], vec![3, 4]))
            }),
        },
        SuiteItem {
            name: "exp",
            run: Box::new(|rng| {
                let inputs = vec![rand_tensor(rng, vec![4], -2.0, 1.0)];
                check_one(rng, inputs, 4, |t, ids| t.exp(ids[0]))
            }),
        },
        SuiteItem {
            name: "square",
            run: Box::new(|rng| {
                let inputs = vec![rand_tensor(rng, vec![5], -2.0, 2.0)];
                check_one(rng, inputs, 5, |t, ids| t.square(ids[0]))
            }),
        },
        SuiteItem {
            name: "sqrt",
            run: Box::new(|rng| {
                let inputs = vec![rand_tensor(rng, vec![4], 0.3, 3.0)];
                check_one(rng, inputs, 4, |t, ids| t.sqrt(ids[0]))
            }),
        },
        SuiteItem {
            name: "sum",
            run: Box::new(|rng| {
                let inputs = vec![rand_tensor(rng, vec![7], -2.0, 2.0)];
                check_one(rng, inputs, 1, |t, ids| t.sum(ids[0]))
            }),
        },
        SuiteItem {
            name: "l2norm",
            run: Box::new(|rng| {
                let mut t = rand_tensor(rng, vec![5], -2.0, 2.0);
                let norm: f64 = t.data().iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm < 0.3 {
                    t.data_mut()[0] += 1.0;
                }
                check_one(rng, vec![t], 1, |t, ids| t.l2norm(ids[0]))
            }),
        },
        SuiteItem {
            name: "dropout",
            run: Box::new(|rng| {
                let keep = 0.8;
                let mask: Vec<f64> = (0..6)
                    .map(|_| {
                        if rng.uniform() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let inputs = vec![rand_tensor(rng, vec![6], -2.0, 2.0)];
                check_one(rng, inputs, 6, move |t, ids| {
                    t.dropout_with_mask(ids[0], mask.clone())
                })
            }),
        },
    ];

    let mut rows = Vec::with_capacity(items.len());
    for item in &items {
        let mut rng = Rng::new(seed ^ fnv1a(item.name.as_bytes()));
        let mut worst = 0.0f64;
        for _ in 0..points {
            worst = worst.max((item.run)(&mut rng)?);
        }
        rows.push(SuiteRow {
            name: item.name.to_string(),
            max_rel_err: worst,
        });
    }
    Ok(rows)
}

/// FNV-1a hash, used for content hashes throughout the crate.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_matches_central_differences() {
        let err = grad_check(
            |t, ids| t.sum(t.square(ids[0]).unwrap()),
            &[Tensor::vector(vec![1.0, 2.0, 3.0])],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let err = grad_check(
            |t, _ids| t.scalar_const(3.5),
            &[Tensor::vector(vec![1.0, -2.0])],
            DEFAULT_STEP,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn fault_injection_is_detected() {
        let err = grad_check_with_fault(
            |t, ids| t.sum(t.square(ids[0]).unwrap()),
            &[Tensor::vector(vec![1.0, 2.0, 3.0])],
            DEFAULT_STEP,
            1.01,
        )
        .unwrap();
        assert!(err > 1e-4, "fault went undetected: {err}");
    }

    #[test]
    fn every_primitive_passes_at_100_points() {
        for row in primitive_suite(0x5eed, 100).unwrap() {
            assert!(
                row.max_rel_err < 1e-4,
                "{}: max relative error {}",
                row.name,
                row.max_rel_err
            );
        }
    }
}
