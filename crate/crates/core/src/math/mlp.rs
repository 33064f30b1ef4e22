//! Dense feed-forward model: parameter container, forward evaluation,
//! cross-entropy loss, and tape-recorded gradients.

use super::matrix::{sigmoid, Matrix};
use super::tape::{NodeId, Tape};
use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Floor for probabilities before a log, keeping losses finite on
/// saturated sigmoids.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sigmoid,
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// (in_dim x out_dim), so a batch forward is `x * weight`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// Model parameters theta: an ordered list of dense layers ending in a
/// single sigmoid output unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

impl MlpParams {
    /// Validates that consecutive layer dimensions chain and the final
    /// layer is a single sigmoid unit.
    pub fn new(layers: Vec<Layer>) -> Result<MlpParams> {
        if layers.is_empty() {
            return Err(Error::Argument("model needs at least one layer".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.weight.cols {
                return Err(Error::Shape(format!(
                    "layer {}: bias len {} != weight cols {}",
                    i,
                    layer.bias.len(),
                    layer.weight.cols
                )));
            }
            if i + 1 < layers.len() && layer.weight.cols != layers[i + 1].weight.rows {
                return Err(Error::Shape(format!(
                    "layer {} out dim {} != layer {} in dim {}",
                    i,
                    layer.weight.cols,
                    i + 1,
                    layers[i + 1].weight.rows
                )));
            }
        }
        let last = layers.last().unwrap();
        if last.weight.cols != 1 || last.activation != Activation::Sigmoid {
            return Err(Error::Shape(
                "output layer must be a single sigmoid unit".into(),
            ));
        }
        Ok(MlpParams { layers })
    }

    /// Fresh network with the given layer widths, all-sigmoid activations
    /// and a 1-unit sigmoid head. Weights drawn uniform in
    /// +-sqrt(6 / (fan_in + fan_out)), biases zero.
    pub fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Result<MlpParams> {
        if dims.len() < 2 {
            return Err(Error::Argument("need input and output dims".into()));
        }
        let mut layers = Vec::new();
        for w in dims.windows(2) {
            layers.push(random_layer(w[0], w[1], Activation::Sigmoid, rng));
        }
        MlpParams::new(layers)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows
    }

    /// Per-layer output widths, input first.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.weight.cols));
        d
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data.len() + l.bias.len())
            .sum()
    }

    /// Flatten all parameters (weights then bias, layer by layer) into one
    /// vector, for the flat optimizers.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weight.data);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten) against this model's shape.
    pub fn unflatten_into(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "flat parameter count {} != {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let wn = l.weight.data.len();
            l.weight.data.copy_from_slice(&flat[off..off + wn]);
            off += wn;
            let bn = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + bn]);
            off += bn;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }
}

pub fn random_layer(
    fan_in: usize,
    fan_out: usize,
    activation: Activation,
    rng: &mut ChaCha8Rng,
) -> Layer {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Layer {
        weight: Matrix {
            rows: fan_in,
            cols: fan_out,
            data,
        },
        bias: vec![0.0; fan_out],
        activation,
    }
}

/// A labeled batch: `x` is (n x dim), `y` is (n x 1) with entries in {0, 1}.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Matrix,
    pub y: Matrix,
}

impl Batch {
    pub fn from_rows(rows: &[(&[f64], f64)]) -> Result<Batch> {
        if rows.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        let dim = rows[0].0.len();
        let mut x = Vec::with_capacity(rows.len() * dim);
        let mut y = Vec::with_capacity(rows.len());
        for (features, label) in rows {
            if features.len() != dim {
                return Err(Error::Shape("ragged feature rows".into()));
            }
            x.extend_from_slice(features);
            y.push(*label);
        }
        Ok(Batch {
            x: Matrix::from_vec(rows.len(), dim, x)?,
            y: Matrix::column(&y),
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows == 0
    }
}

/// Probability that a single sample is positive. Deterministic, no taping.
pub fn forward(params: &MlpParams, x: &[f64]) -> Result<f64> {
    if x.len() != params.input_dim() {
        return Err(Error::Shape(format!(
            "input dim {} != model dim {}",
            x.len(),
            params.input_dim()
        )));
    }
    let mut cur = x.to_vec();
    for layer in &params.layers {
        let mut next = layer.bias.clone();
        for (i, &v) in cur.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            let wrow = &layer.weight.data[i * layer.weight.cols..(i + 1) * layer.weight.cols];
            for (n, w) in next.iter_mut().zip(wrow.iter()) {
                *n += v * w;
            }
        }
        for n in next.iter_mut() {
            *n = match layer.activation {
                Activation::Sigmoid => sigmoid(*n),
                Activation::Relu => n.max(0.0),
                Activation::Identity => *n,
            };
        }
        cur = next;
    }
    Ok(cur[0])
}

/// Forward over an (n x dim) matrix of samples; returns n probabilities.
pub fn forward_batch(params: &MlpParams, x: &Matrix) -> Result<Vec<f64>> {
    if x.cols != params.input_dim() {
        return Err(Error::Shape(format!(
            "input dim {} != model dim {}",
            x.cols,
            params.input_dim()
        )));
    }
    let mut cur = x.clone();
    for layer in &params.layers {
        let mut next = cur.matmul(&layer.weight);
        for r in 0..next.rows {
            for c in 0..next.cols {
                let v = next.data[r * next.cols + c] + layer.bias[c];
                next.data[r * next.cols + c] = match layer.activation {
                    Activation::Sigmoid => sigmoid(v),
                    Activation::Relu => v.max(0.0),
                    Activation::Identity => v,
                };
            }
        }
        cur = next;
    }
    Ok(cur.data)
}

/// Cross-entropy of one prediction, with the probability clamped to
/// [LOG_CLAMP, 1 - LOG_CLAMP] before the logs.
pub fn cross_entropy(p: f64, y: f64) -> f64 {
    let p = p.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Mean cross-entropy over a batch of (probability, label) pairs.
pub fn cross_entropy_batch(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    Ok(pairs.iter().map(|&(p, y)| cross_entropy(p, y)).sum::<f64>() / pairs.len() as f64)
}

/// Tape handles for one model's parameters.
pub struct ParamNodes {
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
    pub activations: Vec<Activation>,
}

impl ParamNodes {
    /// Register `params` as differentiable inputs on the tape.
    pub fn insert(tape: &mut Tape, params: &MlpParams) -> ParamNodes {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut activations = Vec::new();
        for l in &params.layers {
            weights.push(tape.input(l.weight.clone()));
            biases.push(tape.input(Matrix::row(&l.bias)));
            activations.push(l.activation);
        }
        ParamNodes {
            weights,
            biases,
            activations,
        }
    }

    /// Forward pass over a constant input node of shape (n x dim);
    /// returns the (n x 1) probability node.
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        let mut cur = x;
        for i in 0..self.weights.len() {
            let z = tape.matmul(cur, self.weights[i]);
            let zb = tape.add_row(z, self.biases[i]);
            cur = match self.activations[i] {
                Activation::Sigmoid => tape.sigmoid(zb),
                Activation::Relu => tape.relu(zb),
                Activation::Identity => zb,
            };
        }
        cur
    }

    /// One-step SGD image of these parameters: theta - alpha * grad.
    /// The result stays differentiable with respect to the originals.
    pub fn sgd_image(&self, tape: &mut Tape, grads: &[NodeId], alpha: f64) -> ParamNodes {
        debug_assert_eq!(grads.len(), self.weights.len() + self.biases.len());
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (i, &w) in self.weights.iter().enumerate() {
            let step = tape.scalar_mul(grads[i], alpha);
            weights.push(tape.sub(w, step));
        }
        let nl = self.weights.len();
        for (i, &b) in self.biases.iter().enumerate() {
            let step = tape.scalar_mul(grads[nl + i], alpha);
            biases.push(tape.sub(b, step));
        }
        ParamNodes {
            weights,
            biases,
            activations: self.activations.clone(),
        }
    }

    /// All parameter nodes, weights first then biases, matching
    /// [`sgd_image`](Self::sgd_image)'s gradient ordering.
    pub fn all(&self) -> Vec<NodeId> {
        self.weights
            .iter()
            .chain(self.biases.iter())
            .copied()
            .collect()
    }
}

/// Mean cross-entropy node between a probability node (n x 1) and a
/// constant label node (n x 1).
pub fn cross_entropy_node(tape: &mut Tape, p: NodeId, y: NodeId, one_minus_y: NodeId) -> NodeId {
    let n = tape.value(p).rows as f64;
    let pc = tape.clamp(p, LOG_CLAMP, 1.0 - LOG_CLAMP);
    let lp = tape.ln(pc);
    let pos = tape.mul_elem(y, lp);
    let neg_p = tape.scalar_mul(pc, -1.0);
    let q = tape.add_scalar(neg_p, 1.0);
    let lq = tape.ln(q);
    let neg = tape.mul_elem(one_minus_y, lq);
    let s = tape.add(pos, neg);
    let total = tape.sum_all(s);
    tape.scalar_mul(total, -1.0 / n)
}

/// Builds the loss node for `params` on `batch`: forward + mean
/// cross-entropy.
pub fn batch_loss_node(tape: &mut Tape, params: &ParamNodes, batch: &Batch) -> NodeId {
    let x = tape.constant(batch.x.clone());
    let y = tape.constant(batch.y.clone());
    let omy = tape.constant(batch.y.map(|v| 1.0 - v));
    let p = params.forward(tape, x);
    cross_entropy_node(tape, p, y, omy)
}

/// Gradient of mean cross-entropy with the same shape as the parameters
/// (weight matrices and bias rows, layer by layer).
#[derive(Debug, Clone)]
pub struct MlpGradient {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpGradient {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(self.biases.iter()) {
            out.extend_from_slice(&w.data);
            out.extend_from_slice(b);
        }
        out
    }
}

/// Reverse-mode gradient of the mean cross-entropy over `batch`,
/// recorded on a fresh tape. Returns the loss and the gradient.
pub fn grad(params: &MlpParams, batch: &Batch) -> Result<(f64, MlpGradient)> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    if batch.x.cols != params.input_dim() {
        return Err(Error::Shape(format!(
            "batch dim {} != model dim {}",
            batch.x.cols,
            params.input_dim()
        )));
    }
    let mut tape = Tape::new();
    let nodes = ParamNodes::insert(&mut tape, params);
    let loss = batch_loss_node(&mut tape, &nodes, batch);
    let wrt = nodes.all();
    let grads = tape.backward(loss, &wrt);
    let nl = params.layers.len();
    let weights = grads[..nl].iter().map(|&g| tape.value(g).clone()).collect();
    let biases = grads[nl..]
        .iter()
        .map(|&g| tape.value(g).data.clone())
        .collect();
    Ok((tape.scalar(loss), MlpGradient { weights, biases }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn single_layer(w: f64, b: f64) -> MlpParams {
        MlpParams::new(vec![Layer {
            weight: Matrix::from_vec(1, 1, vec![w]).unwrap(),
            bias: vec![b],
            activation: Activation::Sigmoid,
        }])
        .unwrap()
    }

    #[test]
    fn forward_zero_weights_is_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = MlpParams::random(&[3, 4, 1], &mut rng).unwrap();
        for l in &mut params.layers {
            l.weight.data.iter_mut().for_each(|v| *v = 0.0);
            l.bias.iter_mut().for_each(|v| *v = 0.0);
        }
        let p = forward(&params, &[0.3, -0.2, 5.0]).unwrap();
        assert_eq!(p, 0.5);
    }

    #[test]
    fn forward_single_layer_at_zero_input() {
        // weight 2, bias 0, x = 0 -> sigmoid(0) = 0.5
        let p = forward(&single_layer(2.0, 0.0), &[0.0]).unwrap();
        assert_eq!(p, 0.5);
    }

    #[test]
    fn forward_log_three_gives_three_quarters() {
        // sigmoid(ln 3) = 3/4
        let p = forward(&single_layer(1.0, 0.0), &[3.0_f64.ln()]).unwrap();
        assert!((p - 0.75).abs() < 1e-15);
    }

    #[test]
    fn forward_rejects_dim_mismatch() {
        assert!(forward(&single_layer(1.0, 0.0), &[1.0, 2.0]).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        assert!(cross_entropy(1.0, 1.0) <= 1e-12);
        assert!((cross_entropy(0.5, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((cross_entropy(0.9, 0.0) - 2.302585092994046).abs() < 1e-12);
        // never negative, even at the clamp boundary
        assert!(cross_entropy(0.0, 0.0) >= 0.0);
        assert!(cross_entropy(1.0, 0.0) >= 0.0);
    }

    #[test]
    fn batch_mean_is_applied() {
        let l = cross_entropy_batch(&[(0.5, 1.0), (0.5, 0.0)]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(cross_entropy_batch(&[]).is_err());
    }

    #[test]
    fn forward_batch_matches_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = MlpParams::random(&[4, 6, 1], &mut rng).unwrap();
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let x = Matrix::from_vec(5, 4, flat).unwrap();
        let batch = forward_batch(&params, &x).unwrap();
        for (i, row) in rows.iter().enumerate() {
            let single = forward(&params, row).unwrap();
            assert_eq!(batch[i], single, "row {i}");
        }
    }

    #[test]
    fn grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let params = MlpParams::random(&[3, 5, 1], &mut rng).unwrap();
        let rows: Vec<(Vec<f64>, f64)> = (0..4)
            .map(|i| {
                let f: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
                (f, (i % 2) as f64)
            })
            .collect();
        let refs: Vec<(&[f64], f64)> = rows.iter().map(|(f, y)| (f.as_slice(), *y)).collect();
        let batch = Batch::from_rows(&refs).unwrap();
        let (_, g) = grad(&params, &batch).unwrap();
        let analytic = g.flatten();

        let flat = params.flatten();
        let h = 1e-4;
        for (i, &gi) in analytic.iter().enumerate() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            let mut fp = flat.clone();
            let mut fm = flat.clone();
            fp[i] += h;
            fm[i] -= h;
            plus.unflatten_into(&fp).unwrap();
            minus.unflatten_into(&fm).unwrap();
            let lp: f64 = rows
                .iter()
                .map(|(f, y)| cross_entropy(forward(&plus, f).unwrap(), *y))
                .sum::<f64>()
                / rows.len() as f64;
            let lm: f64 = rows
                .iter()
                .map(|(f, y)| cross_entropy(forward(&minus, f).unwrap(), *y))
                .sum::<f64>()
                / rows.len() as f64;
            let fd = (lp - lm) / (2.0 * h);
            let denom = gi.abs().max(fd.abs()).max(1e-8);
            assert!(
                (gi - fd).abs() / denom < 1e-5,
                "param {i}: analytic {gi} vs fd {fd}"
            );
        }
    }

    #[test]
    fn grad_rejects_empty_batch() {
        let params = single_layer(1.0, 0.0);
        let batch = Batch {
            x: Matrix::zeros(0, 1),
            y: Matrix::zeros(0, 1),
        };
        assert!(grad(&params, &batch).is_err());
    }

    #[test]
    fn dead_relu_path_has_zero_gradient() {
        // Hidden relu unit driven negative for every sample: its outgoing
        // weight never influences the loss, so the gradient entry is zero.
        let params = MlpParams::new(vec![
            Layer {
                weight: Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
                bias: vec![-10.0],
                activation: Activation::Relu,
            },
            Layer {
                weight: Matrix::from_vec(1, 1, vec![0.7]).unwrap(),
                bias: vec![0.0],
                activation: Activation::Sigmoid,
            },
        ])
        .unwrap();
        let batch = Batch::from_rows(&[(&[0.5][..], 1.0), (&[0.2][..], 0.0)]).unwrap();
        let (_, g) = grad(&params, &batch).unwrap();
        assert_eq!(g.weights[1].data[0], 0.0);
        assert_eq!(g.weights[0].data[0], 0.0);
    }
}
