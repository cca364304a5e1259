//! Next-token pretraining of the base model. This is the only code that ever
//! writes transformer weights; it consumes a fresh model and hands back a
//! finished one, after which the weights are frozen.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{gelu_grad, Activations, LnCache, ModelConfig, TokenSequence, Transformer};
use crate::error::{Error, Result};
use crate::optim::{Optimizer, OptimizerKind};
use crate::tensor::{dot, Matrix, Seed};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: Seed,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip_norm: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 8,
            learning_rate: 3e-3,
            seed: Seed(0),
            clip_norm: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
}

pub fn pretrain(
    config: ModelConfig,
    sequences: &[TokenSequence],
    train: &PretrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<(Transformer, PretrainReport)> {
    if sequences.is_empty() {
        return Err(Error::Empty("pretraining sequences"));
    }
    if train.batch_size == 0 {
        return Err(Error::Config("pretrain batch_size must be at least 1".into()));
    }
    let mut model = Transformer::init(config, train.seed.derive_str("init"))?;
    let shapes: Vec<_> = model.params().iter().map(|m| m.shape()).collect();
    let mut opt = Optimizer::new(OptimizerKind::default(), train.learning_rate, &shapes);
    let mut rng = train.seed.derive_str("batches").rng();
    let mut losses = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let batch: Vec<&TokenSequence> = (0..train.batch_size)
            .map(|_| &sequences[rng.gen_range(0..sequences.len())])
            .collect();
        let (loss, mut grads) = pretrain_loss_and_grad(&model, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NanLoss {
                step,
                pair: "pretraining batch".into(),
            });
        }
        if train.clip_norm > 0.0 {
            let norm = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
            if norm > train.clip_norm {
                let s = train.clip_norm / norm;
                grads.iter_mut().for_each(|g| *g = g.scale(s));
            }
        }
        opt.update(model.params_mut(), &grads);
        losses.push(loss);
        on_step(step, loss);
    }
    Ok((model, PretrainReport { losses }))
}

/// Mean next-token cross-entropy over every predicted position of the batch,
/// and its exact gradient with respect to every model parameter.
pub fn pretrain_loss_and_grad(model: &Transformer, batch: &[&TokenSequence]) -> Result<(f64, Vec<Matrix>)> {
    let targets: usize = batch.iter().map(|s| s.len().saturating_sub(1)).sum();
    if targets == 0 {
        return Err(Error::Empty("no next-token targets in batch"));
    }
    let scale = 1.0 / targets as f64;
    let per_seq: Vec<Result<(f64, Vec<Matrix>)>> = batch
        .par_iter()
        .map(|seq| {
            let acts = model.run(seq, None, true)?;
            Ok(backward(model, &acts, seq.ids(), scale))
        })
        .collect();
    let mut total = 0.0;
    let mut grads: Option<Vec<Matrix>> = None;
    for r in per_seq {
        let (loss, g) = r?;
        total += loss;
        match grads.as_mut() {
            None => grads = Some(g),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    a.add_assign(b)?;
                }
            }
        }
    }
    Ok((total * scale, grads.expect("non-empty batch")))
}

fn ln_backward(dy: &Matrix, cache: &LnCache, gain: &Matrix, dgain: &mut Matrix, dbias: &mut Matrix) -> Matrix {
    let n = dy.cols() as f64;
    let mut dx = Matrix::zeros(dy.rows(), dy.cols());
    let mut dxhat = vec![0.0; dy.cols()];
    for i in 0..dy.rows() {
        let g = dy.row(i);
        let xhat = cache.xhat.row(i);
        for j in 0..g.len() {
            dxhat[j] = g[j] * gain.data()[j];
            dgain.data_mut()[j] += g[j] * xhat[j];
            dbias.data_mut()[j] += g[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / n;
        let mean_dx = dot(&dxhat, xhat) / n;
        let rstd = cache.rstd[i];
        for (j, out) in dx.row_mut(i).iter_mut().enumerate() {
            *out = rstd * (dxhat[j] - mean_d - xhat[j] * mean_dx);
        }
    }
    dx
}

fn col_sums_into(m: &Matrix, out: &mut Matrix) {
    for i in 0..m.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(m.row(i)) {
            *o += v;
        }
    }
}

/// Returns the summed (unscaled) loss and `scale`-weighted gradients.
fn backward(model: &Transformer, acts: &Activations, ids: &[u32], scale: f64) -> (f64, Vec<Matrix>) {
    let mut grads: Vec<Matrix> = model.params().iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
    let n_params = grads.len();
    let logits = acts.logits.as_ref().expect("pretraining forward keeps logits");
    let t_len = ids.len();
    let vocab = logits.cols();

    let mut loss = 0.0;
    let mut dlogits = Matrix::zeros(t_len, vocab);
    for t in 0..t_len.saturating_sub(1) {
        let row = logits.row(t);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|l| (l - max).exp()).sum();
        let target = ids[t + 1] as usize;
        loss += -(row[target] - max - sum.ln());
        let d = dlogits.row_mut(t);
        for (j, dv) in d.iter_mut().enumerate() {
            *dv = (row[j] - max).exp() / sum * scale;
        }
        d[target] -= scale;
    }

    // Tied output embedding.
    let d_tok_out = dlogits.t_matmul(&acts.final_norm).expect("shapes");
    grads[0].add_assign(&d_tok_out).expect("shapes");
    let dz = dlogits.matmul(&model.tok_emb).expect("shapes");
    let (g_lnf, rest) = grads.split_at_mut(n_params - 1);
    let mut dh = ln_backward(&dz, &acts.lnf, &model.lnf_gain, &mut g_lnf[n_params - 2], &mut rest[0]);

    let d = model.config.d_model;
    let att_scale = (d as f64).sqrt();
    for (l, (w, a)) in model.layers.iter().zip(&acts.layers).enumerate().rev() {
        let base = 2 + 12 * l;
        let g = &mut grads[base..base + 12];
        // [ln1_gain, ln1_bias, w_q, w_k, w_v, w_o, ln2_gain, ln2_bias, w_up, b_up, w_down, b_down]
        let mut d_mid = dh.clone();
        g[10].add_assign(&a.act.t_matmul(&dh).unwrap()).unwrap();
        col_sums_into(&dh, &mut g[11]);
        let d_act = dh.matmul_t(&w.w_down).unwrap();
        let d_pre = Matrix::from_fn(d_act.rows(), d_act.cols(), |i, j| d_act.get(i, j) * gelu_grad(a.pre_act.get(i, j)));
        g[8].add_assign(&a.mlp_input.t_matmul(&d_pre).unwrap()).unwrap();
        col_sums_into(&d_pre, &mut g[9]);
        let d_y = d_pre.matmul_t(&w.w_up).unwrap();
        let (g_lo, g_hi) = g.split_at_mut(7);
        let dx2 = ln_backward(&d_y, &a.ln2, &w.ln2_gain, &mut g_lo[6], &mut g_hi[0]);
        d_mid.add_assign(&dx2).unwrap();

        g[5].add_assign(&a.attn.t_matmul(&d_mid).unwrap()).unwrap();
        let d_attn = d_mid.matmul_t(&w.w_o).unwrap();
        let mut dq = Matrix::zeros(t_len, d);
        let mut dk = Matrix::zeros(t_len, d);
        let mut dv = Matrix::zeros(t_len, d);
        let mut dp = Vec::with_capacity(t_len);
        for i in 0..t_len {
            let p = &a.probs[i];
            let da = d_attn.row(i);
            dp.clear();
            dp.extend((0..p.len()).map(|j| dot(da, a.v.row(j))));
            let inner = dot(p, &dp);
            let qrow = a.q.row(i);
            let dq_row = dq.row_mut(i);
            for j in 0..p.len() {
                for (o, &x) in dv.row_mut(j).iter_mut().zip(da) {
                    *o += p[j] * x;
                }
                let ds = p[j] * (dp[j] - inner) / att_scale;
                if ds == 0.0 {
                    continue;
                }
                for (o, &x) in dq_row.iter_mut().zip(a.k.row(j)) {
                    *o += ds * x;
                }
                for (o, &x) in dk.row_mut(j).iter_mut().zip(qrow) {
                    *o += ds * x;
                }
            }
        }
        g[2].add_assign(&a.attn_input.t_matmul(&dq).unwrap()).unwrap();
        g[3].add_assign(&a.attn_input.t_matmul(&dk).unwrap()).unwrap();
        g[4].add_assign(&a.attn_input.t_matmul(&dv).unwrap()).unwrap();
        let mut dx = dq.matmul_t(&w.w_q).unwrap();
        dx.add_assign(&dk.matmul_t(&w.w_k).unwrap()).unwrap();
        dx.add_assign(&dv.matmul_t(&w.w_v).unwrap()).unwrap();
        let (g_lo, g_hi) = g.split_at_mut(1);
        let dx1 = ln_backward(&dx, &a.ln1, &w.ln1_gain, &mut g_lo[0], &mut g_hi[0]);
        d_mid.add_assign(&dx1).unwrap();
        dh = d_mid;
    }

    for (t, &id) in ids.iter().enumerate() {
        let row = dh.row(t).to_vec();
        for (o, v) in grads[0].row_mut(id as usize).iter_mut().zip(&row) {
            *o += v;
        }
        for (o, v) in grads[1].row_mut(t).iter_mut().zip(&row) {
            *o += v;
        }
    }
    (loss, grads)
}
