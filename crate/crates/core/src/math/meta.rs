//! Meta-gradient of the weighted two-level objective.
//!
//! The inner loop runs SGD on each task's support loss; the outer
//! objective is the weighted sum of query losses at the adapted
//! parameters. In second-order mode the whole inner trajectory lives on
//! one tape, so the outer backward differentiates through the inner
//! gradient steps exactly. First-order mode severs that dependency and
//! evaluates the query gradient at the adapted parameters directly.

use super::matrix::Matrix;
use super::mlp::{batch_loss_node, Batch, MlpGradient, MlpParams, ParamNodes};
use super::optim::sgd_step;
use super::tape::{NodeId, Tape};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    SecondOrder,
    FirstOrder,
}

/// One task's contribution to a meta-batch.
#[derive(Debug, Clone)]
pub struct WeightedTask {
    pub support: Batch,
    pub query: Batch,
    pub weight: f64,
}

/// Tolerance on the batch weights summing to one.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;

/// Gradient of sum_k w_k * L_query(theta'_k) with respect to theta, where
/// theta'_k is `inner_steps` SGD steps on task k's support loss.
///
/// `theta` is an arbitrary list of parameter matrices; the loss builders
/// receive tape handles for them in the same order. Tasks are processed
/// and reduced in index order, so the result is deterministic.
pub fn meta_grad_custom(
    theta: &[Matrix],
    weights: &[f64],
    alpha: f64,
    inner_steps: usize,
    mode: GradMode,
    mut support_loss: impl FnMut(&mut Tape, &[NodeId], usize) -> NodeId,
    mut query_loss: impl FnMut(&mut Tape, &[NodeId], usize) -> NodeId,
) -> Result<(f64, Vec<Matrix>)> {
    if weights.is_empty() {
        return Err(Error::Argument("empty task list".into()));
    }
    let wsum: f64 = weights.iter().sum();
    if (wsum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::Argument(format!(
            "task weights sum to {wsum}, expected 1"
        )));
    }

    let mut tape = Tape::new();
    let theta_nodes: Vec<NodeId> = theta.iter().map(|m| tape.input(m.clone())).collect();

    match mode {
        GradMode::SecondOrder => {
            let mut total: Option<NodeId> = None;
            for (k, &w) in weights.iter().enumerate() {
                let mut cur = theta_nodes.clone();
                for _ in 0..inner_steps {
                    let loss = support_loss(&mut tape, &cur, k);
                    let grads = tape.backward(loss, &cur);
                    cur = cur
                        .iter()
                        .zip(grads.iter())
                        .map(|(&p, &g)| {
                            let step = tape.scalar_mul(g, alpha);
                            tape.sub(p, step)
                        })
                        .collect();
                }
                let qloss = query_loss(&mut tape, &cur, k);
                let weighted = tape.scalar_mul(qloss, w);
                total = Some(match total {
                    None => weighted,
                    Some(t) => tape.add(t, weighted),
                });
            }
            let total = total.unwrap();
            let grads = tape.backward(total, &theta_nodes);
            let out = grads.iter().map(|&g| tape.value(g).clone()).collect();
            Ok((tape.scalar(total), out))
        }
        GradMode::FirstOrder => {
            let mut meta_loss = 0.0;
            let mut acc: Vec<Matrix> = theta
                .iter()
                .map(|m| Matrix::zeros(m.rows, m.cols))
                .collect();
            for (k, &w) in weights.iter().enumerate() {
                let mut cur = theta_nodes.clone();
                for _ in 0..inner_steps {
                    let loss = support_loss(&mut tape, &cur, k);
                    let grads = tape.backward(loss, &cur);
                    cur = cur
                        .iter()
                        .zip(grads.iter())
                        .map(|(&p, &g)| {
                            let step = tape.scalar_mul(g, alpha);
                            tape.sub(p, step)
                        })
                        .collect();
                }
                // Re-insert the adapted values as fresh leaves: the query
                // gradient stops at theta'_k (the identity path only).
                let adapted: Vec<NodeId> = cur
                    .iter()
                    .map(|&n| {
                        let v = tape.value(n).clone();
                        tape.input(v)
                    })
                    .collect();
                let qloss = query_loss(&mut tape, &adapted, k);
                let grads = tape.backward(qloss, &adapted);
                meta_loss += w * tape.scalar(qloss);
                for (a, &g) in acc.iter_mut().zip(grads.iter()) {
                    let gv = tape.value(g);
                    for (ai, &gi) in a.data.iter_mut().zip(gv.data.iter()) {
                        *ai += w * gi;
                    }
                }
            }
            Ok((meta_loss, acc))
        }
    }
}

/// [`meta_grad_custom`] specialized to the cross-entropy model: gradient
/// of the weighted query losses with respect to the model parameters.
pub fn meta_grad(
    params: &MlpParams,
    tasks: &[WeightedTask],
    alpha: f64,
    inner_steps: usize,
    mode: GradMode,
) -> Result<(f64, MlpGradient)> {
    if tasks.is_empty() {
        return Err(Error::Argument("empty task list".into()));
    }
    let nl = params.layers.len();
    let mut theta: Vec<Matrix> = params.layers.iter().map(|l| l.weight.clone()).collect();
    theta.extend(params.layers.iter().map(|l| Matrix::row(&l.bias)));
    let weights: Vec<f64> = tasks.iter().map(|t| t.weight).collect();
    let activations: Vec<_> = params.layers.iter().map(|l| l.activation).collect();

    let nodes_to_params = |nodes: &[NodeId]| ParamNodes {
        weights: nodes[..nl].to_vec(),
        biases: nodes[nl..].to_vec(),
        activations: activations.clone(),
    };

    let (loss, grads) = meta_grad_custom(
        &theta,
        &weights,
        alpha,
        inner_steps,
        mode,
        |tape, nodes, k| {
            let pn = nodes_to_params(nodes);
            batch_loss_node(tape, &pn, &tasks[k].support)
        },
        |tape, nodes, k| {
            let pn = nodes_to_params(nodes);
            batch_loss_node(tape, &pn, &tasks[k].query)
        },
    )?;

    let weights_g = grads[..nl].to_vec();
    let biases_g = grads[nl..].iter().map(|m| m.data.clone()).collect();
    Ok((
        loss,
        MlpGradient {
            weights: weights_g,
            biases: biases_g,
        },
    ))
}

/// Value-only inner adaptation: `steps` full-batch SGD steps on the
/// support cross-entropy. No taping; used for few-shot adaptation and as
/// the inner evaluator of the first-order path's oracle.
pub fn adapt_values(
    params: &MlpParams,
    support: &Batch,
    alpha: f64,
    steps: usize,
) -> Result<MlpParams> {
    if support.is_empty() {
        return Err(Error::Argument("empty support set".into()));
    }
    let mut cur = params.clone();
    for _ in 0..steps {
        let (_, g) = super::mlp::grad(&cur, support)?;
        let flat = sgd_step(&cur.flatten(), &g.flatten(), alpha)?;
        cur.unflatten_into(&flat)?;
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::mlp::{cross_entropy, forward, Layer};
    use crate::math::Activation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// L(theta) = theta^2 / 2 as a tape subgraph over a single 1x1 matrix.
    fn quadratic(tape: &mut Tape, nodes: &[NodeId], _k: usize) -> NodeId {
        let sq = tape.mul_elem(nodes[0], nodes[0]);
        tape.scalar_mul(sq, 0.5)
    }

    #[test]
    fn scalar_quadratic_second_order() {
        // theta' = 0.9 theta after one step at alpha = 0.1, so the meta
        // gradient is 0.81 theta. Exact to machine precision.
        let theta = vec![Matrix::from_vec(1, 1, vec![2.0]).unwrap()];
        let (_, g) = meta_grad_custom(
            &theta,
            &[1.0],
            0.1,
            1,
            GradMode::SecondOrder,
            quadratic,
            quadratic,
        )
        .unwrap();
        assert!((g[0].data[0] - 0.81 * 2.0).abs() < 1e-12);
    }

    #[test]
    fn scalar_quadratic_first_order() {
        // The inner Jacobian is dropped: gradient = theta' = 0.9 theta.
        let theta = vec![Matrix::from_vec(1, 1, vec![2.0]).unwrap()];
        let (_, g) = meta_grad_custom(
            &theta,
            &[1.0],
            0.1,
            1,
            GradMode::FirstOrder,
            quadratic,
            quadratic,
        )
        .unwrap();
        assert!((g[0].data[0] - 0.9 * 2.0).abs() < 1e-12);
    }

    #[test]
    fn five_inner_steps_geometric_decay() {
        // theta' = 0.9^5 theta; d/dtheta [theta'^2/2] = 0.9^10 theta.
        let theta = vec![Matrix::from_vec(1, 1, vec![1.0]).unwrap()];
        let (loss, g) = meta_grad_custom(
            &theta,
            &[1.0],
            0.1,
            5,
            GradMode::SecondOrder,
            quadratic,
            quadratic,
        )
        .unwrap();
        let adapted = 0.9f64.powi(5);
        assert!((loss - adapted * adapted / 2.0).abs() < 1e-12);
        assert!((g[0].data[0] - 0.9f64.powi(10)).abs() < 1e-12);
    }

    fn tiny_tasks(rng: &mut ChaCha8Rng, n_tasks: usize, dim: usize) -> Vec<WeightedTask> {
        (0..n_tasks)
            .map(|_| {
                let mk = |rng: &mut ChaCha8Rng| {
                    let rows: Vec<(Vec<f64>, f64)> = (0..3)
                        .map(|i| {
                            (
                                (0..dim).map(|_| rng.gen_range(0.0..1.0)).collect(),
                                (i % 2) as f64,
                            )
                        })
                        .collect();
                    let refs: Vec<(&[f64], f64)> =
                        rows.iter().map(|(f, y)| (f.as_slice(), *y)).collect();
                    Batch::from_rows(&refs).unwrap()
                };
                WeightedTask {
                    support: mk(rng),
                    query: mk(rng),
                    weight: 1.0 / n_tasks as f64,
                }
            })
            .collect()
    }

    /// Value of the full two-level objective, evaluated without any
    /// second-order machinery (inner adaptation by value, query loss by
    /// plain forward).
    fn two_level_value(
        params: &MlpParams,
        tasks: &[WeightedTask],
        alpha: f64,
        steps: usize,
    ) -> f64 {
        tasks
            .iter()
            .map(|t| {
                let adapted = adapt_values(params, &t.support, alpha, steps).unwrap();
                let q: f64 = (0..t.query.len())
                    .map(|i| {
                        let row: Vec<f64> = (0..t.query.x.cols)
                            .map(|c| t.query.x.at(i, c))
                            .collect();
                        cross_entropy(forward(&adapted, &row).unwrap(), t.query.y.data[i])
                    })
                    .sum::<f64>()
                    / t.query.len() as f64;
                t.weight * q
            })
            .sum()
    }

    #[test]
    fn second_order_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = MlpParams::random(&[2, 4, 1], &mut rng).unwrap();
        let tasks = tiny_tasks(&mut rng, 2, 2);
        let alpha = 0.1;
        let steps = 2;
        let (_, g) = meta_grad(&params, &tasks, alpha, steps, GradMode::SecondOrder).unwrap();
        let analytic = g.flatten();
        let flat = params.flatten();
        let h = 1e-4;
        for i in 0..flat.len() {
            let mut fp = flat.clone();
            let mut fm = flat.clone();
            fp[i] += h;
            fm[i] -= h;
            let mut pp = params.clone();
            let mut pm = params.clone();
            pp.unflatten_into(&fp).unwrap();
            pm.unflatten_into(&fm).unwrap();
            let fd = (two_level_value(&pp, &tasks, alpha, steps)
                - two_level_value(&pm, &tasks, alpha, steps))
                / (2.0 * h);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-6);
            assert!(
                (analytic[i] - fd).abs() / denom < 1e-4,
                "param {i}: analytic {} vs fd {fd}",
                analytic[i]
            );
        }
    }

    #[test]
    fn zero_inner_steps_is_plain_weighted_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = MlpParams::random(&[2, 3, 1], &mut rng).unwrap();
        let tasks = tiny_tasks(&mut rng, 2, 2);
        let (_, g) = meta_grad(&params, &tasks, 0.1, 0, GradMode::SecondOrder).unwrap();
        // Oracle: weighted sum of direct query gradients at theta.
        let mut expect = vec![0.0; params.param_count()];
        for t in &tasks {
            let (_, gq) = crate::math::mlp::grad(&params, &t.query).unwrap();
            for (e, gi) in expect.iter_mut().zip(gq.flatten()) {
                *e += t.weight * gi;
            }
        }
        for (a, e) in g.flatten().iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn equal_weights_match_unweighted_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = MlpParams::random(&[2, 3, 1], &mut rng).unwrap();
        let tasks = tiny_tasks(&mut rng, 4, 2);
        let (_, g) = meta_grad(&params, &tasks, 0.05, 1, GradMode::SecondOrder).unwrap();
        // Manually average four single-task runs.
        let mut mean = vec![0.0; params.param_count()];
        for t in &tasks {
            let one = vec![WeightedTask {
                support: t.support.clone(),
                query: t.query.clone(),
                weight: 1.0,
            }];
            let (_, gt) = meta_grad(&params, &one, 0.05, 1, GradMode::SecondOrder).unwrap();
            for (m, gi) in mean.iter_mut().zip(gt.flatten()) {
                *m += gi / tasks.len() as f64;
            }
        }
        for (a, e) in g.flatten().iter().zip(mean.iter()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_empty_tasks_and_bad_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = MlpParams::random(&[2, 1], &mut rng)
            .unwrap_or_else(|_| {
                MlpParams::new(vec![Layer {
                    weight: Matrix::zeros(2, 1),
                    bias: vec![0.0],
                    activation: Activation::Sigmoid,
                }])
                .unwrap()
            });
        assert!(meta_grad(&params, &[], 0.1, 1, GradMode::SecondOrder).is_err());
        let mut tasks = tiny_tasks(&mut rng, 2, 2);
        tasks[0].weight = 0.9; // sum now 1.4
        assert!(meta_grad(&params, &tasks, 0.1, 1, GradMode::SecondOrder).is_err());
    }

    #[test]
    fn adapt_values_zero_steps_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = MlpParams::random(&[2, 3, 1], &mut rng).unwrap();
        let tasks = tiny_tasks(&mut rng, 1, 2);
        let adapted = adapt_values(&params, &tasks[0].support, 0.1, 0).unwrap();
        assert_eq!(adapted, params);
    }
}
