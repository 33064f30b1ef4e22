//! Greedy layerwise unsupervised pretraining: two Bernoulli RBMs trained
//! by one-step contrastive divergence, then a denoising autoencoder.
//! The trained stack exports the initialization of the meta-learner's
//! base model.

use crate::error::{Error, Result};
use crate::math::mlp::random_layer;
use crate::math::{sigmoid, Activation, AdamState, Layer, Matrix, MlpParams, Tape};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Bernoulli RBM parameters: weights are (visible x hidden).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbmParams {
    pub w: Matrix,
    pub b_vis: Vec<f64>,
    pub b_hid: Vec<f64>,
}

impl RbmParams {
    pub fn new(n_visible: usize, n_hidden: usize, rng: &mut ChaCha8Rng) -> RbmParams {
        let bound = (6.0 / (n_visible + n_hidden) as f64).sqrt();
        let data = (0..n_visible * n_hidden)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        RbmParams {
            w: Matrix {
                rows: n_visible,
                cols: n_hidden,
                data,
            },
            b_vis: vec![0.0; n_visible],
            b_hid: vec![0.0; n_hidden],
        }
    }

    pub fn n_visible(&self) -> usize {
        self.w.rows
    }

    pub fn n_hidden(&self) -> usize {
        self.w.cols
    }

    /// p(h_j = 1 | v). Accumulation order matches the dense forward pass
    /// so the exported model reproduces these probabilities bit-exactly.
    pub fn hidden_probs(&self, v: &[f64]) -> Vec<f64> {
        let mut acc = self.b_hid.clone();
        for (i, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            let row = &self.w.data[i * self.w.cols..(i + 1) * self.w.cols];
            for (a, &wij) in acc.iter_mut().zip(row.iter()) {
                *a += vi * wij;
            }
        }
        acc.into_iter().map(sigmoid).collect()
    }

    /// p(v_i = 1 | h).
    pub fn visible_probs(&self, h: &[f64]) -> Vec<f64> {
        let mut acc = self.b_vis.clone();
        for i in 0..self.w.rows {
            let row = &self.w.data[i * self.w.cols..(i + 1) * self.w.cols];
            let mut s = 0.0;
            for (&hj, &wij) in h.iter().zip(row.iter()) {
                s += hj * wij;
            }
            acc[i] += s;
        }
        acc.into_iter().map(sigmoid).collect()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = self.w.data.clone();
        out.extend_from_slice(&self.b_vis);
        out.extend_from_slice(&self.b_hid);
        out
    }

    fn unflatten_into(&mut self, flat: &[f64]) {
        let wn = self.w.data.len();
        let vn = self.b_vis.len();
        self.w.data.copy_from_slice(&flat[..wn]);
        self.b_vis.copy_from_slice(&flat[wn..wn + vn]);
        self.b_hid.copy_from_slice(&flat[wn + vn..]);
    }
}

/// Log-likelihood ascent direction estimated by CD-1: positive phase
/// minus one-Gibbs-step negative phase, averaged over the batch.
#[derive(Debug, Clone)]
pub struct RbmGradient {
    pub w: Matrix,
    pub b_vis: Vec<f64>,
    pub b_hid: Vec<f64>,
}

impl RbmGradient {
    fn flatten(&self) -> Vec<f64> {
        let mut out = self.w.data.clone();
        out.extend_from_slice(&self.b_vis);
        out.extend_from_slice(&self.b_hid);
        out
    }
}

fn sample_bernoulli(probs: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    probs
        .iter()
        .map(|&p| if rng.gen::<f64>() < p { 1.0 } else { 0.0 })
        .collect()
}

/// One-step contrastive divergence over a batch of visible vectors in
/// [0, 1]. Deterministic given the rng state.
pub fn cd1_gradient(
    rbm: &RbmParams,
    batch: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
) -> Result<RbmGradient> {
    if batch.is_empty() {
        return Err(Error::Argument("empty CD-1 batch".into()));
    }
    let nv = rbm.n_visible();
    let nh = rbm.n_hidden();
    let mut gw = Matrix::zeros(nv, nh);
    let mut gbv = vec![0.0; nv];
    let mut gbh = vec![0.0; nh];
    for v in batch {
        if v.len() != nv {
            return Err(Error::Shape(format!(
                "visible vector has {} entries, RBM expects {nv}",
                v.len()
            )));
        }
        if v.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(Error::Argument(
                "visible values must lie in [0, 1]".into(),
            ));
        }
        let ph = rbm.hidden_probs(v);
        let h = sample_bernoulli(&ph, rng);
        let pv = rbm.visible_probs(&h);
        let v_neg = sample_bernoulli(&pv, rng);
        let ph_neg = rbm.hidden_probs(&v_neg);
        for i in 0..nv {
            for j in 0..nh {
                gw.data[i * nh + j] += v[i] * ph[j] - v_neg[i] * ph_neg[j];
            }
        }
        for i in 0..nv {
            gbv[i] += v[i] - v_neg[i];
        }
        for j in 0..nh {
            gbh[j] += ph[j] - ph_neg[j];
        }
    }
    let n = batch.len() as f64;
    gw.data.iter_mut().for_each(|x| *x /= n);
    gbv.iter_mut().for_each(|x| *x /= n);
    gbh.iter_mut().for_each(|x| *x /= n);
    Ok(RbmGradient {
        w: gw,
        b_vis: gbv,
        b_hid: gbh,
    })
}

/// Mean squared error between each sample and p(v | h sampled from
/// p(h|v)), over the full dataset.
pub fn reconstruction_error(rbm: &RbmParams, data: &[Vec<f64>], rng: &mut ChaCha8Rng) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for v in data {
        let ph = rbm.hidden_probs(v);
        let h = sample_bernoulli(&ph, rng);
        let recon = rbm.visible_probs(&h);
        for (a, b) in v.iter().zip(recon.iter()) {
            total += (a - b) * (a - b);
        }
        count += v.len();
    }
    total / count as f64
}

/// Adam-driven CD-1 training with seeded mini-batches. The returned log
/// has `epochs + 1` entries: index 0 is the pre-training reconstruction
/// error, then one entry per epoch.
pub fn train_rbm(
    mut rbm: RbmParams,
    data: &[Vec<f64>],
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<(RbmParams, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::Argument("empty RBM training data".into()));
    }
    let batch_size = batch_size.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log = vec![reconstruction_error(&rbm, data, &mut rng)];
    let mut adam = AdamState::new(rbm.flatten().len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let batch: Vec<Vec<f64>> = chunk.iter().map(|&i| data[i].clone()).collect();
            let g = cd1_gradient(&rbm, &batch, &mut rng)?;
            // Adam minimizes, so descend on the negated ascent direction.
            let descent: Vec<f64> = g.flatten().iter().map(|x| -x).collect();
            let mut flat = rbm.flatten();
            adam.step(&mut flat, &descent, lr)?;
            rbm.unflatten_into(&flat);
        }
        log.push(reconstruction_error(&rbm, data, &mut rng));
    }
    Ok((rbm, log))
}

/// Denoising autoencoder with sigmoid encoder/decoder and masking
/// corruption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaeParams {
    pub w_enc: Matrix,
    pub b_enc: Vec<f64>,
    pub w_dec: Matrix,
    pub b_dec: Vec<f64>,
    pub corruption_rate: f64,
}

impl DaeParams {
    pub fn new(n_in: usize, n_hidden: usize, corruption_rate: f64, rng: &mut ChaCha8Rng) -> Result<DaeParams> {
        if !(0.0..1.0).contains(&corruption_rate) {
            return Err(Error::Config(format!(
                "corruption rate {corruption_rate} not in [0, 1)"
            )));
        }
        let enc = random_layer(n_in, n_hidden, Activation::Sigmoid, rng);
        let dec = random_layer(n_hidden, n_in, Activation::Sigmoid, rng);
        Ok(DaeParams {
            w_enc: enc.weight,
            b_enc: enc.bias,
            w_dec: dec.weight,
            b_dec: dec.bias,
            corruption_rate,
        })
    }

    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        let mut acc = self.b_enc.clone();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &self.w_enc.data[i * self.w_enc.cols..(i + 1) * self.w_enc.cols];
            for (a, &w) in acc.iter_mut().zip(row.iter()) {
                *a += xi * w;
            }
        }
        acc.into_iter().map(sigmoid).collect()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = self.w_enc.data.clone();
        out.extend_from_slice(&self.b_enc);
        out.extend_from_slice(&self.w_dec.data);
        out.extend_from_slice(&self.b_dec);
        out
    }

    fn unflatten_into(&mut self, flat: &[f64]) {
        let mut off = 0;
        for buf in [
            &mut self.w_enc.data,
            &mut self.b_enc,
            &mut self.w_dec.data,
            &mut self.b_dec,
        ] {
            let len = buf.len();
            buf.copy_from_slice(&flat[off..off + len]);
            off += len;
        }
    }
}

#[derive(Debug, Clone)]
pub struct DaeGradient {
    pub w_enc: Matrix,
    pub b_enc: Vec<f64>,
    pub w_dec: Matrix,
    pub b_dec: Vec<f64>,
}

impl DaeGradient {
    fn flatten(&self) -> Vec<f64> {
        let mut out = self.w_enc.data.clone();
        out.extend_from_slice(&self.b_enc);
        out.extend_from_slice(&self.w_dec.data);
        out.extend_from_slice(&self.b_dec);
        out
    }
}

/// Masking corruption, reconstruction, and backprop through
/// z = sigmoid(W_dec sigmoid(W_enc x' + b_enc) + b_dec) with
/// L = mean squared error(x, z).
pub fn dae_loss_and_grad(
    dae: &DaeParams,
    batch: &Matrix,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, DaeGradient)> {
    if batch.rows == 0 {
        return Err(Error::Argument("empty DAE batch".into()));
    }
    if batch.cols != dae.w_enc.rows {
        return Err(Error::Shape(format!(
            "DAE input dim {} != batch dim {}",
            dae.w_enc.rows, batch.cols
        )));
    }
    // Each entry is zeroed independently with probability corruption_rate.
    let corrupted = Matrix {
        rows: batch.rows,
        cols: batch.cols,
        data: batch
            .data
            .iter()
            .map(|&x| {
                if rng.gen::<f64>() < dae.corruption_rate {
                    0.0
                } else {
                    x
                }
            })
            .collect(),
    };

    let mut tape = Tape::new();
    let w_enc = tape.input(dae.w_enc.clone());
    let b_enc = tape.input(Matrix::row(&dae.b_enc));
    let w_dec = tape.input(dae.w_dec.clone());
    let b_dec = tape.input(Matrix::row(&dae.b_dec));
    let xp = tape.constant(corrupted);
    let x = tape.constant(batch.clone());

    let ze = tape.matmul(xp, w_enc);
    let zeb = tape.add_row(ze, b_enc);
    let y = tape.sigmoid(zeb);
    let zd = tape.matmul(y, w_dec);
    let zdb = tape.add_row(zd, b_dec);
    let z = tape.sigmoid(zdb);

    let diff = tape.sub(z, x);
    let sq = tape.mul_elem(diff, diff);
    let total = tape.sum_all(sq);
    let loss = tape.scalar_mul(total, 1.0 / (batch.rows * batch.cols) as f64);

    let grads = tape.backward(loss, &[w_enc, b_enc, w_dec, b_dec]);
    Ok((
        tape.scalar(loss),
        DaeGradient {
            w_enc: tape.value(grads[0]).clone(),
            b_enc: tape.value(grads[1]).data.clone(),
            w_dec: tape.value(grads[2]).clone(),
            b_dec: tape.value(grads[3]).data.clone(),
        },
    ))
}

/// Adam training loop for the DAE; log has `epochs + 1` entries with the
/// pre-training loss first (computed corruption-free).
pub fn train_dae(
    mut dae: DaeParams,
    data: &Matrix,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<(DaeParams, Vec<f64>)> {
    if data.rows == 0 {
        return Err(Error::Argument("empty DAE training data".into()));
    }
    let batch_size = batch_size.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clean_loss = |dae: &DaeParams, data: &Matrix| -> f64 {
        let mut total = 0.0;
        for r in 0..data.rows {
            let x = &data.data[r * data.cols..(r + 1) * data.cols];
            let y = dae.encode(x);
            let mut acc = dae.b_dec.clone();
            for (i, &yi) in y.iter().enumerate() {
                let row = &dae.w_dec.data[i * dae.w_dec.cols..(i + 1) * dae.w_dec.cols];
                for (a, &w) in acc.iter_mut().zip(row.iter()) {
                    *a += yi * w;
                }
            }
            for (zi, &xi) in acc.into_iter().map(sigmoid).zip(x.iter()) {
                total += (zi - xi) * (zi - xi);
            }
        }
        total / (data.rows * data.cols) as f64
    };
    let mut log = vec![clean_loss(&dae, data)];
    let mut adam = AdamState::new(dae.flatten().len());
    let mut order: Vec<usize> = (0..data.rows).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let mut rows = Vec::with_capacity(chunk.len() * data.cols);
            for &i in chunk {
                rows.extend_from_slice(&data.data[i * data.cols..(i + 1) * data.cols]);
            }
            let batch = Matrix::from_vec(chunk.len(), data.cols, rows)?;
            let (_, g) = dae_loss_and_grad(&dae, &batch, &mut rng)?;
            let mut flat = dae.flatten();
            adam.step(&mut flat, &g.flatten(), lr)?;
            dae.unflatten_into(&flat);
        }
        log.push(clean_loss(&dae, data));
    }
    Ok((dae, log))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub h1: usize,
    pub h2: usize,
    pub h3: usize,
    pub rbm_epochs: usize,
    pub dae_epochs: usize,
    pub rbm_lr: f64,
    pub dae_lr: f64,
    pub corruption_rate: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            h1: 32,
            h2: 64,
            h3: 32,
            rbm_epochs: 20,
            dae_epochs: 20,
            rbm_lr: 1e-3,
            dae_lr: 1e-5,
            corruption_rate: 0.2,
            batch_size: 16,
        }
    }
}

/// The trained unsupervised stack plus training logs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainStack {
    pub rbm1: RbmParams,
    pub rbm2: RbmParams,
    pub dae: DaeParams,
    pub input_dim: usize,
    pub rbm1_log: Vec<f64>,
    pub rbm2_log: Vec<f64>,
    pub dae_log: Vec<f64>,
}

impl PretrainStack {
    /// Embedding of one input through rbm1 -> rbm2 -> DAE encoder.
    pub fn features(&self, v: &[f64]) -> Vec<f64> {
        let h1 = self.rbm1.hidden_probs(v);
        let h2 = self.rbm2.hidden_probs(&h1);
        self.dae.encode(&h2)
    }
}

/// Greedy layerwise pretraining: rbm1 on the raw data, rbm2 on rbm1's
/// hidden probabilities, the DAE on rbm2's. Exports the base model: the
/// three trained encoders as sigmoid layers plus a randomly initialized
/// 1-unit sigmoid head.
pub fn greedy_pretrain(
    data: &[Vec<f64>],
    config: &PretrainConfig,
    seed: u64,
) -> Result<(PretrainStack, MlpParams)> {
    if data.is_empty() {
        return Err(Error::Argument("empty pretraining data".into()));
    }
    let m_in = data[0].len();
    if config.h1 < m_in || config.h2 < config.h1 {
        return Err(Error::Config(format!(
            "hidden sizes must not shrink through the RBM stack: {} -> {} -> {}",
            m_in, config.h1, config.h2
        )));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let rbm1 = RbmParams::new(m_in, config.h1, &mut init_rng);
    let rbm2 = RbmParams::new(config.h1, config.h2, &mut init_rng);
    let dae = DaeParams::new(config.h2, config.h3, config.corruption_rate, &mut init_rng)?;
    let head = random_layer(config.h3, 1, Activation::Sigmoid, &mut init_rng);

    let (rbm1, rbm1_log) = train_rbm(
        rbm1,
        data,
        config.rbm_epochs,
        config.rbm_lr,
        config.batch_size,
        seed.wrapping_add(1),
    )?;
    let act1: Vec<Vec<f64>> = data.iter().map(|v| rbm1.hidden_probs(v)).collect();
    let (rbm2, rbm2_log) = train_rbm(
        rbm2,
        &act1,
        config.rbm_epochs,
        config.rbm_lr,
        config.batch_size,
        seed.wrapping_add(2),
    )?;
    let act2: Vec<f64> = act1
        .iter()
        .flat_map(|v| rbm2.hidden_probs(v))
        .collect();
    let act2 = Matrix::from_vec(data.len(), config.h2, act2)?;
    let (dae, dae_log) = train_dae(
        dae,
        &act2,
        config.dae_epochs,
        config.dae_lr,
        config.batch_size,
        seed.wrapping_add(3),
    )?;

    let f0 = MlpParams::new(vec![
        Layer {
            weight: rbm1.w.clone(),
            bias: rbm1.b_hid.clone(),
            activation: Activation::Sigmoid,
        },
        Layer {
            weight: rbm2.w.clone(),
            bias: rbm2.b_hid.clone(),
            activation: Activation::Sigmoid,
        },
        Layer {
            weight: dae.w_enc.clone(),
            bias: dae.b_enc.clone(),
            activation: Activation::Sigmoid,
        },
        head,
    ])?;

    Ok((
        PretrainStack {
            rbm1,
            rbm2,
            dae,
            input_dim: m_in,
            rbm1_log,
            rbm2_log,
            dae_log,
        },
        f0,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::forward;

    fn seeded(n: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(n)
    }

    #[test]
    fn zero_rbm_hidden_probs_are_half() {
        let rbm = RbmParams {
            w: Matrix::zeros(3, 2),
            b_vis: vec![0.0; 3],
            b_hid: vec![0.0; 2],
        };
        assert_eq!(rbm.hidden_probs(&[0.3, 0.9, 0.1]), vec![0.5, 0.5]);
    }

    #[test]
    fn cd1_rejects_out_of_range_values() {
        let rbm = RbmParams::new(2, 2, &mut seeded(0));
        let mut rng = seeded(1);
        assert!(cd1_gradient(&rbm, &[vec![0.5, 1.5]], &mut rng).is_err());
        assert!(cd1_gradient(&rbm, &[], &mut rng).is_err());
    }

    #[test]
    fn cd1_zero_when_chain_returns_to_data() {
        // With binary data and weights pushing the chain to reproduce v
        // almost surely, v' = v and the two phases cancel.
        let rbm = RbmParams {
            w: Matrix::from_vec(2, 1, vec![50.0, 50.0]).unwrap(),
            b_vis: vec![-25.0, -25.0],
            b_hid: vec![-50.0],
        };
        // v = (1,1): p(h|v) = sigmoid(50) ~ 1, h = 1; p(v|h) = sigmoid(25) ~ 1
        // so v' = v and p(h'|v') = p(h|v).
        let mut rng = seeded(3);
        let g = cd1_gradient(&rbm, &[vec![1.0, 1.0]], &mut rng).unwrap();
        for x in g.flatten() {
            assert!(x.abs() < 1e-9, "entry {x} should vanish");
        }
    }

    #[test]
    fn cd1_bias_gradient_unbiased_at_zero() {
        // At W = 0, b = 0 the expected visible-bias gradient is
        // mean(v) - 0.5 exactly; Monte-Carlo over 10^4 draws within 0.02.
        let rbm = RbmParams {
            w: Matrix::zeros(2, 2),
            b_vis: vec![0.0; 2],
            b_hid: vec![0.0; 2],
        };
        let batch = vec![vec![1.0, 0.0], vec![1.0, 1.0]];
        let mut rng = seeded(9);
        let mut acc = [0.0f64; 2];
        let draws = 10_000;
        for _ in 0..draws {
            let g = cd1_gradient(&rbm, &batch, &mut rng).unwrap();
            acc[0] += g.b_vis[0];
            acc[1] += g.b_vis[1];
        }
        let mean0 = acc[0] / draws as f64;
        let mean1 = acc[1] / draws as f64;
        assert!((mean0 - 0.5).abs() < 0.02, "got {mean0}, want 1.0 - 0.5");
        assert!((mean1 - 0.0).abs() < 0.02, "got {mean1}, want 0.5 - 0.5");
    }

    /// Exact log-likelihood gradient by full enumeration of states, for
    /// the 2-visible / 1-hidden oracle. Independent of the CD-1 path.
    fn exact_loglik_gradient(rbm: &RbmParams, batch: &[Vec<f64>]) -> Vec<f64> {
        let states_v: Vec<Vec<f64>> = vec![
            vec![0.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![1.0, 1.0],
        ];
        let states_h = [0.0, 1.0];
        let energy_exp = |v: &[f64], h: f64| -> f64 {
            let mut e = 0.0;
            for i in 0..2 {
                e += v[i] * rbm.w.data[i] * h + rbm.b_vis[i] * v[i];
            }
            e += rbm.b_hid[0] * h;
            e.exp()
        };
        let z: f64 = states_v
            .iter()
            .flat_map(|v| states_h.iter().map(move |&h| energy_exp(v, h)))
            .sum();
        // model expectations
        let mut ew = [0.0f64; 2];
        let mut ev = [0.0f64; 2];
        let mut eh = 0.0f64;
        for v in &states_v {
            for &h in &states_h {
                let p = energy_exp(v, h) / z;
                for i in 0..2 {
                    ew[i] += p * v[i] * h;
                    ev[i] += p * v[i];
                }
                eh += p * h;
            }
        }
        // data expectations
        let mut dw = [0.0f64; 2];
        let mut dv = [0.0f64; 2];
        let mut dh = 0.0f64;
        for v in batch {
            let ph = rbm.hidden_probs(v)[0];
            for i in 0..2 {
                dw[i] += v[i] * ph;
                dv[i] += v[i];
            }
            dh += ph;
        }
        let n = batch.len() as f64;
        vec![
            dw[0] / n - ew[0],
            dw[1] / n - ew[1],
            dv[0] / n - ev[0],
            dv[1] / n - ev[1],
            dh / n - eh,
        ]
    }

    #[test]
    fn cd1_matches_exact_gradient_on_enumeration_case() {
        let rbm = RbmParams {
            w: Matrix::from_vec(2, 1, vec![0.4, -0.3]).unwrap(),
            b_vis: vec![0.1, -0.2],
            b_hid: vec![0.05],
        };
        let batch = vec![vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 0.0]];
        let exact = exact_loglik_gradient(&rbm, &batch);
        let mut rng = seeded(21);
        let draws = 10_000;
        let mut acc = vec![0.0f64; 5];
        for _ in 0..draws {
            let g = cd1_gradient(&rbm, &batch, &mut rng).unwrap();
            let flat = g.flatten();
            for (a, x) in acc.iter_mut().zip(flat.iter()) {
                *a += x;
            }
        }
        for (i, (a, e)) in acc.iter().zip(exact.iter()).enumerate() {
            let mean = a / draws as f64;
            assert!(
                (mean - e).abs() < 0.05,
                "entry {i}: CD-1 mean {mean} vs exact {e}"
            );
        }
    }

    /// Two-prototype binary-ish dataset in [0,1]^dims.
    fn bimodal_data(n: usize, dims: usize, rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<f64>) {
        let proto_a: Vec<f64> = (0..dims).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
        let proto_b: Vec<f64> = proto_a.iter().map(|v| 1.0 - v).collect();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let proto = if i % 2 == 0 { &proto_a } else { &proto_b };
            let v: Vec<f64> = proto
                .iter()
                .map(|&p| {
                    if rng.gen::<f64>() < 0.05 {
                        1.0 - p
                    } else {
                        p
                    }
                })
                .collect();
            data.push(v);
            labels.push((i % 2) as f64);
        }
        (data, labels)
    }

    #[test]
    fn rbm_training_reduces_reconstruction_error() {
        let mut rng = seeded(17);
        let (data, _) = bimodal_data(256, 8, &mut rng);
        let rbm = RbmParams::new(8, 16, &mut rng);
        let (_, log) = train_rbm(rbm, &data, 20, 1e-3, 16, 99).unwrap();
        let initial = log[0];
        let final_err = *log.last().unwrap();
        assert!(
            final_err < 0.7 * initial,
            "reconstruction error {final_err} did not drop 30% from {initial}"
        );
    }

    #[test]
    fn rbm_training_zero_epochs_is_identity() {
        let mut rng = seeded(4);
        let (data, _) = bimodal_data(32, 8, &mut rng);
        let rbm = RbmParams::new(8, 12, &mut rng);
        let before = rbm.clone();
        let (after, log) = train_rbm(rbm, &data, 0, 1e-3, 16, 7).unwrap();
        assert_eq!(after, before);
        assert_eq!(log.len(), 1);
    }

    #[test]
    fn rbm_training_is_deterministic() {
        let mut rng = seeded(4);
        let (data, _) = bimodal_data(64, 8, &mut rng);
        let rbm = RbmParams::new(8, 12, &mut seeded(5));
        let (a, _) = train_rbm(rbm.clone(), &data, 3, 1e-3, 16, 42).unwrap();
        let (b, _) = train_rbm(rbm, &data, 3, 1e-3, 16, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dae_perfect_reconstruction_is_zero_loss() {
        // corruption 0 and an identity-behaving autoencoder is impossible
        // with sigmoids, but all-0.5 inputs under zero params reconstruct
        // exactly: z = sigmoid(0) = 0.5.
        let dae = DaeParams {
            w_enc: Matrix::zeros(4, 4),
            b_enc: vec![0.0; 4],
            w_dec: Matrix::zeros(4, 4),
            b_dec: vec![0.0; 4],
            corruption_rate: 0.0,
        };
        let x = Matrix::from_vec(2, 4, vec![0.5; 8]).unwrap();
        let (loss, _) = dae_loss_and_grad(&dae, &x, &mut seeded(0)).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn dae_gradient_matches_finite_differences() {
        let mut rng = seeded(31);
        let dae = DaeParams::new(4, 4, 0.0, &mut rng).unwrap();
        let x = Matrix::from_vec(
            3,
            4,
            (0..12).map(|i| (i as f64 * 0.07) % 1.0).collect(),
        )
        .unwrap();
        // corruption 0 makes the loss deterministic, so finite differences
        // are well defined.
        let (_, g) = dae_loss_and_grad(&dae, &x, &mut seeded(0)).unwrap();
        let analytic = g.flatten();
        let flat = dae.flatten();
        let h = 1e-5;
        for i in 0..flat.len() {
            let mut dp = dae.clone();
            let mut dm = dae.clone();
            let mut fp = flat.clone();
            let mut fm = flat.clone();
            fp[i] += h;
            fm[i] -= h;
            dp.unflatten_into(&fp);
            dm.unflatten_into(&fm);
            let (lp, _) = dae_loss_and_grad(&dp, &x, &mut seeded(0)).unwrap();
            let (lm, _) = dae_loss_and_grad(&dm, &x, &mut seeded(0)).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-8);
            assert!(
                (analytic[i] - fd).abs() / denom < 1e-5,
                "param {i}: {} vs {fd}",
                analytic[i]
            );
        }
    }

    #[test]
    fn greedy_pretrain_layer_dims() {
        let mut rng = seeded(8);
        let (data, _) = bimodal_data(64, 16, &mut rng);
        let config = PretrainConfig {
            h1: 32,
            h2: 64,
            h3: 32,
            rbm_epochs: 1,
            dae_epochs: 1,
            ..Default::default()
        };
        let (_, f0) = greedy_pretrain(&data, &config, 5).unwrap();
        assert_eq!(f0.dims(), vec![16, 32, 64, 32, 1]);
    }

    #[test]
    fn greedy_pretrain_rejects_shrinking_stack() {
        let mut rng = seeded(8);
        let (data, _) = bimodal_data(16, 16, &mut rng);
        let config = PretrainConfig {
            h1: 8,
            ..Default::default()
        };
        assert!(greedy_pretrain(&data, &config, 5).is_err());
    }

    #[test]
    fn exported_first_layer_reproduces_rbm_probs_bit_exactly() {
        let mut rng = seeded(13);
        let (data, _) = bimodal_data(64, 8, &mut rng);
        let config = PretrainConfig {
            h1: 8,
            h2: 12,
            h3: 6,
            rbm_epochs: 2,
            dae_epochs: 2,
            ..Default::default()
        };
        let (stack, f0) = greedy_pretrain(&data, &config, 3).unwrap();
        for v in data.iter().take(8) {
            let expected = stack.rbm1.hidden_probs(v);
            // forward through layer 1 only
            let one_layer = MlpParams {
                layers: vec![Layer {
                    weight: f0.layers[0].weight.clone(),
                    bias: f0.layers[0].bias.clone(),
                    activation: Activation::Sigmoid,
                }],
            };
            let mut got = Vec::new();
            // reuse the dense kernel via a temporary 1-output trick is not
            // possible here; evaluate all hidden units directly
            let w = &one_layer.layers[0].weight;
            let mut acc = one_layer.layers[0].bias.clone();
            for (i, &vi) in v.iter().enumerate() {
                if vi == 0.0 {
                    continue;
                }
                let row = &w.data[i * w.cols..(i + 1) * w.cols];
                for (a, &wij) in acc.iter_mut().zip(row.iter()) {
                    *a += vi * wij;
                }
            }
            got.extend(acc.into_iter().map(sigmoid));
            assert_eq!(got, expected);
        }
    }

    #[test]
    fn pretrained_features_probe_at_least_as_good_as_raw() {
        use crate::math::mlp::{grad, Batch};
        let mut rng = seeded(23);
        let (data, labels) = bimodal_data(128, 8, &mut rng);
        let config = PretrainConfig {
            h1: 16,
            h2: 24,
            h3: 12,
            rbm_epochs: 10,
            dae_epochs: 10,
            ..Default::default()
        };
        let (stack, _) = greedy_pretrain(&data, &config, 77).unwrap();

        // Logistic probe trained by Adam on given features.
        let probe_accuracy = |features: &[Vec<f64>], labels: &[f64]| -> f64 {
            let dim = features[0].len();
            let mut probe = MlpParams::random(&[dim, 1], &mut seeded(55)).unwrap();
            let rows: Vec<(&[f64], f64)> = features
                .iter()
                .zip(labels.iter())
                .map(|(f, &y)| (f.as_slice(), y))
                .collect();
            let batch = Batch::from_rows(&rows).unwrap();
            let mut adam = AdamState::new(probe.param_count());
            for _ in 0..300 {
                let (_, g) = grad(&probe, &batch).unwrap();
                let mut flat = probe.flatten();
                adam.step(&mut flat, &g.flatten(), 0.05).unwrap();
                probe.unflatten_into(&flat).unwrap();
            }
            let correct = features
                .iter()
                .zip(labels.iter())
                .filter(|(f, &y)| {
                    let p = forward(&probe, f).unwrap();
                    (p >= 0.5) == (y >= 0.5)
                })
                .count();
            correct as f64 / features.len() as f64
        };

        let raw_acc = probe_accuracy(&data, &labels);
        let emb: Vec<Vec<f64>> = data.iter().map(|v| stack.features(v)).collect();
        let emb_acc = probe_accuracy(&emb, &labels);
        assert!(
            emb_acc >= raw_acc,
            "probe on pretrained features {emb_acc} < raw {raw_acc}"
        );
    }
}
