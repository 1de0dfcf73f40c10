//! Training: hand-written reverse-mode gradients, Adam, and a gradient
//! checker against an independent f64 forward.

use super::forward::{
    add_matmul_at, add_matmul_bt, forward_impl, gelu_grad, ForwardCache, LN_EPS,
};
use super::inject::InjectionPlan;
use super::task::{sample_batch, Batch, TaskSpec};
use super::{ModelError, ModelParams, ModelResult, ParamSet};
use crate::tensor::RngStream;
use serde::{Deserialize, Serialize};

// ─── Optimizer ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_lr() -> f64 {
    3e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_batch() -> usize {
    32
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            batch_size: default_batch(),
        }
    }
}

/// Per-step training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainRecord {
    pub loss_curve: Vec<f64>,
}

// ─── Loss ────────────────────────────────────────────────────────────────────

/// Mean cross-entropy over scored positions and its logit gradient.
fn ce_backward(
    logits: &[f32],
    targets: &[u32],
    scored: &[bool],
    vocab: usize,
) -> Result<(f64, Vec<f32>), ModelError> {
    let counted = scored.iter().filter(|&&s| s).count();
    if counted == 0 {
        return Err(ModelError::InvalidConfig { field: "no scored positions in batch" });
    }
    let inv_rows = 1.0 / counted as f64;
    let mut loss = 0.0f64;
    let mut dlogits = vec![0.0f32; logits.len()];
    for (r, &target) in targets.iter().enumerate() {
        if !scored[r] {
            continue;
        }
        let row = &logits[r * vocab..(r + 1) * vocab];
        let maxv = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut denom = 0.0f64;
        for &z in row {
            denom += (z as f64 - maxv).exp();
        }
        let lse = denom.ln() + maxv;
        loss += lse - row[target as usize] as f64;
        let drow = &mut dlogits[r * vocab..(r + 1) * vocab];
        for (c, dz) in drow.iter_mut().enumerate() {
            let p = (row[c] as f64 - lse).exp();
            let indicator = if c == target as usize { 1.0 } else { 0.0 };
            *dz = ((p - indicator) * inv_rows) as f32;
        }
    }
    Ok((loss * inv_rows, dlogits))
}

// ─── Backward ────────────────────────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
fn layernorm_backward(
    d_out: &[f32],
    norm: &[f32],
    inv_std: &[f32],
    gain: &[f32],
    rows: usize,
    d: usize,
    d_x: &mut [f32],
    d_gain: &mut [f32],
    d_bias: &mut [f32],
) {
    let mut dxhat = vec![0.0f32; d];
    for (r, &is) in inv_std.iter().enumerate().take(rows) {
        let base = r * d;
        let mut mean_dxhat = 0.0f32;
        let mut mean_dxhat_norm = 0.0f32;
        for c in 0..d {
            let go = d_out[base + c];
            let nh = norm[base + c];
            d_gain[c] += go * nh;
            d_bias[c] += go;
            let dh = go * gain[c];
            dxhat[c] = dh;
            mean_dxhat += dh;
            mean_dxhat_norm += dh * nh;
        }
        mean_dxhat /= d as f32;
        mean_dxhat_norm /= d as f32;
        for c in 0..d {
            d_x[base + c] += is * (dxhat[c] - mean_dxhat - norm[base + c] * mean_dxhat_norm);
        }
    }
}

/// Gradients of the mean-token cross-entropy for one cached forward pass.
fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    tokens: &[u32],
    batch_size: usize,
    dlogits: &[f32],
) -> ParamSet {
    let c = &params.config;
    let (d, h, v, f) = (c.model_dim, c.heads, c.vocab, c.ffn_dim);
    let hd = c.head_dim();
    let rows = tokens.len();
    let t_len = rows / batch_size;
    let inv_sqrt_hd = 1.0 / (hd as f32).sqrt();
    let mut g = ParamSet::zeros(c);

    // Output head.
    let mut d_lnf_out = vec![0.0f32; rows * d];
    add_matmul_bt(&mut d_lnf_out, dlogits, &params.set.head, rows, d, v);
    add_matmul_at(&mut g.head, &cache.lnf_out, dlogits, rows, d, v);

    // Final layernorm.
    let mut dx = vec![0.0f32; rows * d];
    layernorm_backward(
        &d_lnf_out,
        &cache.lnf_norm,
        &cache.lnf_inv_std,
        &params.set.final_ln.gain,
        rows,
        d,
        &mut dx,
        &mut g.final_ln.gain,
        &mut g.final_ln.bias,
    );

    for l in (0..c.layers).rev() {
        let layer = &params.set.layers[l];
        let lc = &cache.layers[l];
        let gl = &mut g.layers[l];

        // FFN output projection: x_out = x_mid + ffn_act · w_out.
        let mut d_ffn_act = vec![0.0f32; rows * f];
        add_matmul_bt(&mut d_ffn_act, &dx, &layer.w_out, rows, f, d);
        add_matmul_at(&mut gl.w_out, &lc.ffn_act, &dx, rows, f, d);

        let mut d_ffn_pre = d_ffn_act;
        for (dp, &pre) in d_ffn_pre.iter_mut().zip(&lc.ffn_pre) {
            *dp *= gelu_grad(pre);
        }

        let mut d_ln2_out = vec![0.0f32; rows * d];
        add_matmul_bt(&mut d_ln2_out, &d_ffn_pre, &layer.w_in, rows, d, f);
        add_matmul_at(&mut gl.w_in, &lc.ln2_out, &d_ffn_pre, rows, d, f);

        // Residual around the FFN: d_x_mid = dx + ln2-path gradient.
        let mut d_x_mid = dx;
        layernorm_backward(
            &d_ln2_out,
            &lc.ln2_norm,
            &lc.ln2_inv_std,
            &layer.ln2.gain,
            rows,
            d,
            &mut d_x_mid,
            &mut gl.ln2.gain,
            &mut gl.ln2.bias,
        );

        // Attention output projection: x_mid = x_in + ctx · wo.
        let mut d_ctx = vec![0.0f32; rows * d];
        add_matmul_bt(&mut d_ctx, &d_x_mid, &layer.wo, rows, d, d);
        add_matmul_at(&mut gl.wo, &lc.ctx, &d_x_mid, rows, d, d);

        // Attention core.
        let mut dq = vec![0.0f32; rows * d];
        let mut dk = vec![0.0f32; rows * d];
        let mut dv = vec![0.0f32; rows * d];
        let mut da = vec![0.0f32; t_len];
        for b in 0..batch_size {
            for head in 0..h {
                let off = head * hd;
                for i in 0..t_len {
                    let arow = &lc.attn[((b * h + head) * t_len + i) * t_len..][..t_len];
                    let dctx_i = &d_ctx[(b * t_len + i) * d + off..][..hd];
                    let mut dot_sum = 0.0f32;
                    for j in 0..=i {
                        let vj = &lc.v[(b * t_len + j) * d + off..][..hd];
                        let dai: f32 = dctx_i.iter().zip(vj).map(|(x, y)| x * y).sum();
                        da[j] = dai;
                        dot_sum += dai * arow[j];
                    }
                    let qi_base = (b * t_len + i) * d + off;
                    for j in 0..=i {
                        let a = arow[j];
                        let ds = a * (da[j] - dot_sum) * inv_sqrt_hd;
                        let kj_base = (b * t_len + j) * d + off;
                        for u in 0..hd {
                            dq[qi_base + u] += ds * lc.k[kj_base + u];
                            dk[kj_base + u] += ds * lc.q[qi_base + u];
                            dv[kj_base + u] += a * dctx_i[u];
                        }
                    }
                }
            }
        }

        // Q/K/V projections share the ln1 output.
        let mut d_ln1_out = vec![0.0f32; rows * d];
        add_matmul_bt(&mut d_ln1_out, &dq, &layer.wq, rows, d, d);
        add_matmul_bt(&mut d_ln1_out, &dk, &layer.wk, rows, d, d);
        add_matmul_bt(&mut d_ln1_out, &dv, &layer.wv, rows, d, d);
        add_matmul_at(&mut gl.wq, &lc.ln1_out, &dq, rows, d, d);
        add_matmul_at(&mut gl.wk, &lc.ln1_out, &dk, rows, d, d);
        add_matmul_at(&mut gl.wv, &lc.ln1_out, &dv, rows, d, d);

        let mut d_x_in = d_x_mid;
        layernorm_backward(
            &d_ln1_out,
            &lc.ln1_norm,
            &lc.ln1_inv_std,
            &layer.ln1.gain,
            rows,
            d,
            &mut d_x_in,
            &mut gl.ln1.gain,
            &mut gl.ln1.bias,
        );
        dx = d_x_in;
    }

    for (r, &tok) in tokens.iter().enumerate() {
        let erow = &mut g.embed[tok as usize * d..][..d];
        for (e, &grad) in erow.iter_mut().zip(&dx[r * d..(r + 1) * d]) {
            *e += grad;
        }
    }
    g
}

pub(crate) fn loss_and_grads(
    params: &ModelParams,
    batch: &Batch,
) -> ModelResult<(f64, ParamSet)> {
    let pass = forward_impl(params, &batch.tokens, batch.batch_size, &InjectionPlan::empty(), true)?;
    let cache = pass.cache.expect("cache requested");
    let (loss, dlogits) = ce_backward(&pass.logits, &batch.targets, &batch.scored, params.config.vocab)?;
    let grads = backward(params, &cache, &batch.tokens, batch.batch_size, &dlogits);
    Ok((loss, grads))
}

// ─── Train loop ──────────────────────────────────────────────────────────────

/// Minimizes cross-entropy on `task` with Adam for `steps` steps. Pure
/// full-precision training (no injection); deterministic per stream state.
/// Zero steps is a no-op that leaves `params` untouched.
pub fn train(
    params: &mut ModelParams,
    task: &TaskSpec,
    steps: usize,
    opt: &OptimizerConfig,
    rng: &mut RngStream,
) -> ModelResult<TrainRecord> {
    task.validate(params.config.vocab, params.config.context)?;
    let mut m = ParamSet::zeros(&params.config);
    let mut v = ParamSet::zeros(&params.config);
    let mut loss_curve = Vec::with_capacity(steps);
    for step in 1..=steps {
        let batch = sample_batch(task, params.config.vocab, opt.batch_size, rng)?;
        let (loss, grads) = loss_and_grads(params, &batch)?;
        if !loss.is_finite() {
            return Err(ModelError::DivergedLoss { step });
        }
        loss_curve.push(loss);

        let bc1 = 1.0 - opt.beta1.powi(step as i32);
        let bc2 = 1.0 - opt.beta2.powi(step as i32);
        let mut p_t = params.set.tensors_mut();
        let g_t = grads.tensors();
        let mut m_t = m.tensors_mut();
        let mut v_t = v.tensors_mut();
        for idx in 0..p_t.len() {
            debug_assert_eq!(p_t[idx].0, g_t[idx].0);
            let p = &mut *p_t[idx].1;
            let g = g_t[idx].1;
            let mm = &mut *m_t[idx].1;
            let vv = &mut *v_t[idx].1;
            for j in 0..p.len() {
                let grad = g[j] as f64;
                let m_new = opt.beta1 * mm[j] as f64 + (1.0 - opt.beta1) * grad;
                let v_new = opt.beta2 * vv[j] as f64 + (1.0 - opt.beta2) * grad * grad;
                mm[j] = m_new as f32;
                vv[j] = v_new as f32;
                let update = opt.lr * (m_new / bc1) / ((v_new / bc2).sqrt() + opt.eps);
                p[j] -= update as f32;
            }
        }
    }
    Ok(TrainRecord { loss_curve })
}

// ─── Gradient check ──────────────────────────────────────────────────────────

/// Independent f64 forward computing the mean-token cross-entropy. No caches,
/// no injection; used only as the finite-difference oracle.
fn forward_loss_f64(params: &ModelParams, batch: &Batch) -> f64 {
    let c = &params.config;
    let (d, h, f) = (c.model_dim, c.heads, c.ffn_dim);
    let (v, t_len) = (c.vocab, batch.seq_len);
    let hd = c.head_dim();
    let rows = batch.tokens.len();
    let inv_sqrt_hd = 1.0 / (hd as f64).sqrt();

    let ln = |x: &[f64], gain: &[f32], bias: &[f32]| -> Vec<f64> {
        let mut out = vec![0.0f64; x.len()];
        for r in 0..x.len() / d {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&q| (q - mean) * (q - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS as f64).sqrt();
            for cdx in 0..d {
                out[r * d + cdx] = gain[cdx] as f64 * (row[cdx] - mean) * is + bias[cdx] as f64;
            }
        }
        out
    };
    let mm = |a: &[f64], b: &[f32], m: usize, k: usize, n: usize| -> Vec<f64> {
        let mut out = vec![0.0f64; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += av * b[p * n + j] as f64;
                }
            }
        }
        out
    };
    let gelu64 = |x: f64| -> f64 {
        let c0 = (2.0 / std::f64::consts::PI).sqrt();
        0.5 * x * (1.0 + (c0 * (x + 0.044715 * x * x * x)).tanh())
    };

    let mut x = vec![0.0f64; rows * d];
    for (r, &tok) in batch.tokens.iter().enumerate() {
        for cdx in 0..d {
            x[r * d + cdx] = params.set.embed[tok as usize * d + cdx] as f64;
        }
    }
    for layer in &params.set.layers {
        let ln1 = ln(&x, &layer.ln1.gain, &layer.ln1.bias);
        let q = mm(&ln1, &layer.wq, rows, d, d);
        let k = mm(&ln1, &layer.wk, rows, d, d);
        let vv = mm(&ln1, &layer.wv, rows, d, d);
        let mut ctx = vec![0.0f64; rows * d];
        for b in 0..batch.batch_size {
            for head in 0..h {
                let off = head * hd;
                for i in 0..t_len {
                    let qi = &q[(b * t_len + i) * d + off..][..hd];
                    let mut scores = vec![0.0f64; i + 1];
                    let mut maxv = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &k[(b * t_len + j) * d + off..][..hd];
                        *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * inv_sqrt_hd;
                        maxv = maxv.max(*s);
                    }
                    let denom: f64 = scores.iter().map(|s| (s - maxv).exp()).sum();
                    for (j, s) in scores.iter().enumerate() {
                        let a = (s - maxv).exp() / denom;
                        let vj = &vv[(b * t_len + j) * d + off..][..hd];
                        for u in 0..hd {
                            ctx[(b * t_len + i) * d + off + u] += a * vj[u];
                        }
                    }
                }
            }
        }
        let attn_out = mm(&ctx, &layer.wo, rows, d, d);
        for (xv, ao) in x.iter_mut().zip(&attn_out) {
            *xv += ao;
        }
        let ln2 = ln(&x, &layer.ln2.gain, &layer.ln2.bias);
        let pre = mm(&ln2, &layer.w_in, rows, d, f);
        let act: Vec<f64> = pre.iter().map(|&p| gelu64(p)).collect();
        let ffn_out = mm(&act, &layer.w_out, rows, f, d);
        for (xv, fo) in x.iter_mut().zip(&ffn_out) {
            *xv += fo;
        }
    }
    let lnf = ln(&x, &params.set.final_ln.gain, &params.set.final_ln.bias);
    let logits = mm(&lnf, &params.set.head, rows, d, v);
    let mut loss = 0.0f64;
    let mut counted = 0usize;
    for (r, &target) in batch.targets.iter().enumerate() {
        if !batch.scored[r] {
            continue;
        }
        counted += 1;
        let row = &logits[r * v..(r + 1) * v];
        let maxv = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&z| (z - maxv).exp()).sum::<f64>().ln() + maxv;
        loss += lse - row[target as usize];
    }
    loss / counted as f64
}

/// Result of a finite-difference gradient check.
///
/// `max_rel_error` is max over sampled coordinates of
/// |analytic − numeric| / max(|analytic|, |numeric|, 0.001·grad_scale),
/// where `grad_scale` is the largest analytic gradient magnitude; the floor
/// keeps coordinates whose true gradient sits at the f32 noise floor from
/// dividing by ~0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    pub checked: usize,
    pub grad_scale: f64,
}

/// Central-difference check of the analytic gradients on `n_coords` randomly
/// chosen parameter coordinates, using the independent f64 forward as the
/// loss oracle.
pub fn grad_check(
    params: &ModelParams,
    task: &TaskSpec,
    n_coords: usize,
    step: f64,
    seed: u64,
) -> ModelResult<GradCheckReport> {
    task.validate(params.config.vocab, params.config.context)?;
    let mut rng = RngStream::new(seed);
    let batch = sample_batch(task, params.config.vocab, 4, &mut rng)?;
    let (_, grads) = loss_and_grads(params, &batch)?;

    let grad_tensors = grads.tensors();
    let grad_scale = grad_tensors
        .iter()
        .flat_map(|(_, t)| t.iter())
        .fold(0.0f64, |acc, &g| acc.max(g.abs() as f64));
    let floor = (1e-3 * grad_scale).max(f64::MIN_POSITIVE);

    let total: usize = grad_tensors.iter().map(|(_, t)| t.len()).sum();
    let mut work = params.clone();
    let mut max_rel = 0.0f64;
    let mut sum_rel = 0.0f64;
    for _ in 0..n_coords {
        let flat = rng.next_index(total);
        // Locate (tensor, offset) for the flat coordinate.
        let mut remaining = flat;
        let mut tensor_idx = 0;
        for (i, (_, t)) in grad_tensors.iter().enumerate() {
            if remaining < t.len() {
                tensor_idx = i;
                break;
            }
            remaining -= t.len();
        }
        let analytic = grad_tensors[tensor_idx].1[remaining] as f64;

        let original = {
            let mut tensors = work.set.tensors_mut();
            let slot = &mut tensors[tensor_idx].1[remaining];
            let orig = *slot;
            *slot = (orig as f64 + step) as f32;
            orig
        };
        let plus = forward_loss_f64(&work, &batch);
        let minus_val = (original as f64 - step) as f32;
        {
            let mut tensors = work.set.tensors_mut();
            tensors[tensor_idx].1[remaining] = minus_val;
        }
        let minus = forward_loss_f64(&work, &batch);
        {
            let mut tensors = work.set.tensors_mut();
            tensors[tensor_idx].1[remaining] = original;
        }
        // Use the realized f32 step, not the nominal one.
        let realized = (original as f64 + step) as f32 as f64 - minus_val as f64;
        let numeric = (plus - minus) / realized;
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        max_rel = max_rel.max(rel);
        sum_rel += rel;
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        mean_rel_error: sum_rel / n_coords as f64,
        checked: n_coords,
        grad_scale,
    })
}
