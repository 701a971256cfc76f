//! Forward pass with activation cache and the matching reverse-mode pass.

use std::ops::Range;

use super::linalg::{
    dot, gelu, gelu_grad, layer_norm, layer_norm_backward, log_softmax, matmul_backward,
    matmul_bias,
};
use super::Model;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::types::{exact_sum, Mode, SequenceLogProb, TokenId, TokenSeq, VisualContext};

struct LayerCache<T> {
    ln1_xhat: Vec<T>,
    ln1_rstd: Vec<T>,
    a: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    attn: Vec<T>,
    ln2_xhat: Vec<T>,
    ln2_rstd: Vec<T>,
    c: Vec<T>,
    h: Vec<T>,
    g: Vec<T>,
}

struct Forward<T> {
    len: usize,
    layers: Vec<LayerCache<T>>,
    pred_rows: Range<usize>,
    lnf_xhat: Vec<T>,
    lnf_rstd: Vec<T>,
    z: Vec<T>,
    /// Log-softmax rows for `pred_rows`, each of width `vocab_size`.
    logp: Vec<T>,
}

/// Two disjoint mutable windows of the gradient vector; `a` must precede `b`.
fn pair_mut<T>(v: &mut [T], a: Range<usize>, b: Range<usize>) -> (&mut [T], &mut [T]) {
    assert!(a.end <= b.start);
    let (lo, hi) = v.split_at_mut(b.start);
    (&mut lo[a], &mut hi[..b.len()])
}

impl<T: Scalar> Model<T> {
    fn check_inputs(
        &self,
        visual: Option<&VisualContext>,
        instruction: &TokenSeq,
        continuation: &[TokenId],
    ) -> Result<()> {
        let cfg = &self.config;
        for seq in [instruction] {
            if seq.vocab_size as usize != cfg.vocab_size {
                return Err(Error::Shape(format!(
                    "sequence vocabulary {} differs from model vocabulary {}",
                    seq.vocab_size, cfg.vocab_size
                )));
            }
        }
        if let Some(&bad) = instruction
            .ids
            .iter()
            .chain(continuation)
            .find(|&&t| t as usize >= cfg.vocab_size)
        {
            return Err(Error::Shape(format!(
                "token {bad} outside model vocabulary"
            )));
        }
        if let Some(v) = visual {
            if v.feature_dim() != cfg.d_v {
                return Err(Error::Shape(format!(
                    "visual feature dim {} differs from model d_v {}",
                    v.feature_dim(),
                    cfg.d_v
                )));
            }
        }
        let len =
            visual.map_or(0, VisualContext::n_tokens) + instruction.len() + 1 + continuation.len();
        // The last continuation token is only ever a target, never an input.
        let input_len = len - usize::from(!continuation.is_empty());
        if input_len > cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: input_len,
                max: cfg.max_seq_len,
                id: None,
            });
        }
        Ok(())
    }

    fn forward(
        &self,
        visual: Option<&VisualContext>,
        text: &[TokenId],
        pred_rows: Range<usize>,
    ) -> Forward<T> {
        let cfg = &self.config;
        let p = &self.params;
        let lay = &self.layout;
        let (d, f, nh, dh) = (cfg.d_model, cfg.ff_dim(), cfg.n_heads, cfg.head_dim());
        let n_vis = visual.map_or(0, VisualContext::n_tokens);
        let len = n_vis + text.len();
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();

        let mut x = vec![T::zero(); len * d];
        if let Some(v) = visual {
            let feats: Vec<T> = v.features.iter().flatten().map(|&e| T::lit(e)).collect();
            matmul_bias(
                &feats,
                n_vis,
                cfg.d_v,
                &p[lay.vis_w.clone()],
                d,
                Some(&p[lay.vis_b.clone()]),
                &mut x[..n_vis * d],
            );
        }
        for (i, &tok) in text.iter().enumerate() {
            let row = &mut x[(n_vis + i) * d..(n_vis + i + 1) * d];
            row.copy_from_slice(&p[lay.token_embedding_row(tok, d)]);
        }
        let pos = &p[lay.pos_emb.clone()];
        for (xv, &pv) in x.iter_mut().zip(&pos[..len * d]) {
            *xv += pv;
        }

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for slots in &lay.layers {
            let x_in = x;
            let mut ln1_xhat = vec![T::zero(); len * d];
            let mut ln1_rstd = vec![T::zero(); len];
            let mut a = vec![T::zero(); len * d];
            layer_norm(
                &x_in,
                len,
                d,
                &p[slots.ln1_g.clone()],
                &p[slots.ln1_b.clone()],
                &mut ln1_xhat,
                &mut ln1_rstd,
                &mut a,
            );
            let mut qkv = vec![T::zero(); len * 3 * d];
            matmul_bias(
                &a,
                len,
                d,
                &p[slots.w_qkv.clone()],
                3 * d,
                Some(&p[slots.b_qkv.clone()]),
                &mut qkv,
            );
            let mut probs = vec![T::zero(); nh * len * len];
            let mut attn = vec![T::zero(); len * d];
            for hd in 0..nh {
                let qo = hd * dh;
                let ko = d + hd * dh;
                let vo = 2 * d + hd * dh;
                for i in 0..len {
                    let q = &qkv[i * 3 * d + qo..i * 3 * d + qo + dh];
                    let row = &mut probs[(hd * len + i) * len..(hd * len + i) * len + len];
                    let mut max = T::neg_infinity();
                    for j in 0..=i {
                        let k = &qkv[j * 3 * d + ko..j * 3 * d + ko + dh];
                        let s = dot(q, k) * scale;
                        row[j] = s;
                        max = max.max(s);
                    }
                    let mut z = T::zero();
                    for r in row[..=i].iter_mut() {
                        *r = (*r - max).exp();
                        z += *r;
                    }
                    for r in row[..=i].iter_mut() {
                        *r /= z;
                    }
                    let out = &mut attn[i * d + hd * dh..i * d + hd * dh + dh];
                    for j in 0..=i {
                        let w = row[j];
                        let vv = &qkv[j * 3 * d + vo..j * 3 * d + vo + dh];
                        for (o, &val) in out.iter_mut().zip(vv) {
                            *o += w * val;
                        }
                    }
                }
            }
            let mut x_mid = vec![T::zero(); len * d];
            matmul_bias(
                &attn,
                len,
                d,
                &p[slots.w_o.clone()],
                d,
                Some(&p[slots.b_o.clone()]),
                &mut x_mid,
            );
            for (m, &xi) in x_mid.iter_mut().zip(&x_in) {
                *m += xi;
            }
            let mut ln2_xhat = vec![T::zero(); len * d];
            let mut ln2_rstd = vec![T::zero(); len];
            let mut c = vec![T::zero(); len * d];
            layer_norm(
                &x_mid,
                len,
                d,
                &p[slots.ln2_g.clone()],
                &p[slots.ln2_b.clone()],
                &mut ln2_xhat,
                &mut ln2_rstd,
                &mut c,
            );
            let mut h = vec![T::zero(); len * f];
            matmul_bias(
                &c,
                len,
                d,
                &p[slots.w_fc.clone()],
                f,
                Some(&p[slots.b_fc.clone()]),
                &mut h,
            );
            let g: Vec<T> = h.iter().map(|&v| gelu(v)).collect();
            let mut x_out = vec![T::zero(); len * d];
            matmul_bias(
                &g,
                len,
                f,
                &p[slots.w_proj.clone()],
                d,
                Some(&p[slots.b_proj.clone()]),
                &mut x_out,
            );
            for (o, &m) in x_out.iter_mut().zip(&x_mid) {
                *o += m;
            }
            layers.push(LayerCache {
                ln1_xhat,
                ln1_rstd,
                a,
                qkv,
                probs,
                attn,
                ln2_xhat,
                ln2_rstd,
                c,
                h,
                g,
            });
            x = x_out;
        }

        let np = pred_rows.len();
        let xs = &x[pred_rows.start * d..pred_rows.end * d];
        let mut lnf_xhat = vec![T::zero(); np * d];
        let mut lnf_rstd = vec![T::zero(); np];
        let mut z = vec![T::zero(); np * d];
        layer_norm(
            xs,
            np,
            d,
            &p[lay.lnf_g.clone()],
            &p[lay.lnf_b.clone()],
            &mut lnf_xhat,
            &mut lnf_rstd,
            &mut z,
        );
        let v = cfg.vocab_size;
        let mut logits = vec![T::zero(); np * v];
        matmul_bias(
            &z,
            np,
            d,
            &p[lay.w_out.clone()],
            v,
            Some(&p[lay.b_out.clone()]),
            &mut logits,
        );
        let mut logp = vec![T::zero(); np * v];
        for r in 0..np {
            log_softmax(&logits[r * v..(r + 1) * v], &mut logp[r * v..(r + 1) * v]);
        }
        Forward {
            len,
            layers,
            pred_rows,
            lnf_xhat,
            lnf_rstd,
            z,
            logp,
        }
    }

    /// Accumulates `∂/∂θ Σ_r dlogits[r]·logits[r]` into `grad`.
    fn backward(
        &self,
        fwd: &Forward<T>,
        visual: Option<&VisualContext>,
        text: &[TokenId],
        dlogits: &[T],
        grad: &mut [T],
    ) {
        let cfg = &self.config;
        let p = &self.params;
        let lay = &self.layout;
        let (d, f, nh, dh, v) = (
            cfg.d_model,
            cfg.ff_dim(),
            cfg.n_heads,
            cfg.head_dim(),
            cfg.vocab_size,
        );
        let len = fwd.len;
        let np = fwd.pred_rows.len();
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();

        let mut dz = vec![T::zero(); np * d];
        {
            let (dw, db) = pair_mut(grad, lay.w_out.clone(), lay.b_out.clone());
            matmul_backward(
                &fwd.z,
                np,
                d,
                &p[lay.w_out.clone()],
                v,
                dlogits,
                Some(&mut dz),
                dw,
                Some(db),
            );
        }
        let mut dx = vec![T::zero(); len * d];
        {
            let (dg, db) = pair_mut(grad, lay.lnf_g.clone(), lay.lnf_b.clone());
            layer_norm_backward(
                &dz,
                np,
                d,
                &p[lay.lnf_g.clone()],
                &fwd.lnf_xhat,
                &fwd.lnf_rstd,
                &mut dx[fwd.pred_rows.start * d..fwd.pred_rows.end * d],
                dg,
                db,
            );
        }
        // Rows past the last prediction never influence the loss.
        let live = fwd.pred_rows.end;

        for (slots, cache) in lay.layers.iter().zip(&fwd.layers).rev() {
            // x_out = x_mid + gelu(c·W_fc + b_fc)·W_proj + b_proj
            let mut dg_act = vec![T::zero(); live * f];
            {
                let (dw, db) = pair_mut(grad, slots.w_proj.clone(), slots.b_proj.clone());
                matmul_backward(
                    &cache.g[..live * f],
                    live,
                    f,
                    &p[slots.w_proj.clone()],
                    d,
                    &dx[..live * d],
                    Some(&mut dg_act),
                    dw,
                    Some(db),
                );
            }
            for (dgv, &hv) in dg_act.iter_mut().zip(&cache.h) {
                *dgv *= gelu_grad(hv);
            }
            let mut dc = vec![T::zero(); live * d];
            {
                let (dw, db) = pair_mut(grad, slots.w_fc.clone(), slots.b_fc.clone());
                matmul_backward(
                    &cache.c[..live * d],
                    live,
                    d,
                    &p[slots.w_fc.clone()],
                    f,
                    &dg_act,
                    Some(&mut dc),
                    dw,
                    Some(db),
                );
            }
            let mut dx_mid = dx;
            {
                let (dg, db) = pair_mut(grad, slots.ln2_g.clone(), slots.ln2_b.clone());
                layer_norm_backward(
                    &dc,
                    live,
                    d,
                    &p[slots.ln2_g.clone()],
                    &cache.ln2_xhat,
                    &cache.ln2_rstd,
                    &mut dx_mid,
                    dg,
                    db,
                );
            }

            // x_mid = x_in + attn·W_o + b_o
            let mut dattn = vec![T::zero(); live * d];
            {
                let (dw, db) = pair_mut(grad, slots.w_o.clone(), slots.b_o.clone());
                matmul_backward(
                    &cache.attn[..live * d],
                    live,
                    d,
                    &p[slots.w_o.clone()],
                    d,
                    &dx_mid[..live * d],
                    Some(&mut dattn),
                    dw,
                    Some(db),
                );
            }
            let mut dqkv = vec![T::zero(); live * 3 * d];
            let mut dp = vec![T::zero(); live];
            for hd in 0..nh {
                let qo = hd * dh;
                let ko = d + hd * dh;
                let vo = 2 * d + hd * dh;
                for i in 0..live {
                    let row = &cache.probs[(hd * len + i) * len..(hd * len + i) * len + len];
                    let dout = &dattn[i * d + hd * dh..i * d + hd * dh + dh];
                    let mut weighted = T::zero();
                    for j in 0..=i {
                        let vv = &cache.qkv[j * 3 * d + vo..j * 3 * d + vo + dh];
                        dp[j] = dot(dout, vv);
                        weighted += row[j] * dp[j];
                        let dv = &mut dqkv[j * 3 * d + vo..j * 3 * d + vo + dh];
                        for (g, &o) in dv.iter_mut().zip(dout) {
                            *g += row[j] * o;
                        }
                    }
                    for j in 0..=i {
                        let ds = row[j] * (dp[j] - weighted) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        for t in 0..dh {
                            let kq = cache.qkv[j * 3 * d + ko + t];
                            let qv = cache.qkv[i * 3 * d + qo + t];
                            dqkv[i * 3 * d + qo + t] += ds * kq;
                            dqkv[j * 3 * d + ko + t] += ds * qv;
                        }
                    }
                }
            }
            let mut da = vec![T::zero(); live * d];
            {
                let (dw, db) = pair_mut(grad, slots.w_qkv.clone(), slots.b_qkv.clone());
                matmul_backward(
                    &cache.a[..live * d],
                    live,
                    d,
                    &p[slots.w_qkv.clone()],
                    3 * d,
                    &dqkv,
                    Some(&mut da),
                    dw,
                    Some(db),
                );
            }
            let mut dx_in = dx_mid;
            {
                let (dg, db) = pair_mut(grad, slots.ln1_g.clone(), slots.ln1_b.clone());
                layer_norm_backward(
                    &da,
                    live,
                    d,
                    &p[slots.ln1_g.clone()],
                    &cache.ln1_xhat,
                    &cache.ln1_rstd,
                    &mut dx_in,
                    dg,
                    db,
                );
            }
            dx = dx_in;
        }

        let n_vis = visual.map_or(0, VisualContext::n_tokens);
        {
            let dpos = &mut grad[lay.pos_emb.clone()];
            for (g, &dv) in dpos.iter_mut().zip(&dx[..live * d]) {
                *g += dv;
            }
        }
        for (i, &tok) in text.iter().enumerate() {
            let r = n_vis + i;
            if r >= live {
                break;
            }
            let dst = &mut grad[lay.token_embedding_row(tok, d)];
            for (g, &dv) in dst.iter_mut().zip(&dx[r * d..(r + 1) * d]) {
                *g += dv;
            }
        }
        if let Some(vis) = visual {
            let feats: Vec<T> = vis.features.iter().flatten().map(|&e| T::lit(e)).collect();
            let (dw, db) = pair_mut(grad, lay.vis_w.clone(), lay.vis_b.clone());
            matmul_backward(
                &feats,
                n_vis,
                cfg.d_v,
                &p[lay.vis_w.clone()],
                d,
                &dx[..n_vis * d],
                None,
                dw,
                Some(db),
            );
        }
    }

    fn score_inner(
        &self,
        visual: Option<&VisualContext>,
        instruction: &TokenSeq,
        response: &TokenSeq,
        seed: Option<(T, &mut [T])>,
    ) -> Result<SequenceLogProb> {
        if response.is_empty() {
            return Err(Error::invalid("cannot score an empty response"));
        }
        if response.vocab_size as usize != self.config.vocab_size {
            return Err(Error::Shape(format!(
                "response vocabulary {} differs from model vocabulary {}",
                response.vocab_size, self.config.vocab_size
            )));
        }
        self.check_inputs(visual, instruction, &response.ids)?;
        let n = response.len();
        let mut text = Vec::with_capacity(instruction.len() + n);
        text.extend_from_slice(&instruction.ids);
        text.push(self.config.bos_token);
        text.extend_from_slice(&response.ids[..n - 1]);
        let start = visual.map_or(0, VisualContext::n_tokens) + instruction.len();
        let fwd = self.forward(visual, &text, start..start + n);

        let v = self.config.vocab_size;
        let per_token: Vec<f64> = response
            .ids
            .iter()
            .enumerate()
            .map(|(t, &y)| fwd.logp[t * v + y as usize].as_f64())
            .collect();
        if let Some(t) = per_token.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                step: 0,
                what: format!("log-likelihood of response token {t}"),
            });
        }

        if let Some((seed, grad)) = seed {
            if grad.len() != self.params.len() {
                return Err(Error::Shape(format!(
                    "gradient buffer has {} entries, model has {}",
                    grad.len(),
                    self.params.len()
                )));
            }
            let mut dlogits = vec![T::zero(); n * v];
            for (t, &y) in response.ids.iter().enumerate() {
                let row = &mut dlogits[t * v..(t + 1) * v];
                for (k, dl) in row.iter_mut().enumerate() {
                    *dl = -seed * fwd.logp[t * v + k].exp();
                }
                row[y as usize] += seed;
            }
            self.backward(&fwd, visual, &text, &dlogits, grad);
        }

        let mode = if visual.is_some() {
            Mode::Multimodal
        } else {
            Mode::TextOnly
        };
        let total = exact_sum(&per_token);
        SequenceLogProb::with_total(per_token, total, mode, self.tag)
    }

    /// Per-token log-likelihood of `response`; text-only when `visual` is `None`.
    pub fn score_sequence(
        &self,
        visual: Option<&VisualContext>,
        instruction: &TokenSeq,
        response: &TokenSeq,
    ) -> Result<SequenceLogProb> {
        self.score_inner(visual, instruction, response, None)
    }

    /// Scores and returns `∂ total / ∂θ` as a fresh vector.
    pub fn score_gradient(
        &self,
        visual: Option<&VisualContext>,
        instruction: &TokenSeq,
        response: &TokenSeq,
    ) -> Result<(SequenceLogProb, Vec<T>)> {
        let mut grad = vec![T::zero(); self.params.len()];
        let lp = self.score_inner(visual, instruction, response, Some((T::one(), &mut grad)))?;
        Ok((lp, grad))
    }

    /// Scores and accumulates `seed · ∂ total / ∂θ` into `grad`.
    pub fn accumulate_gradient(
        &self,
        visual: Option<&VisualContext>,
        instruction: &TokenSeq,
        response: &TokenSeq,
        seed: T,
        grad: &mut [T],
    ) -> Result<SequenceLogProb> {
        self.score_inner(visual, instruction, response, Some((seed, grad)))
    }

    /// Full next-token log-distribution after `prefix` (the response generated so far).
    pub fn next_token_logprobs(
        &self,
        visual: Option<&VisualContext>,
        instruction: &TokenSeq,
        prefix: &[TokenId],
    ) -> Result<Vec<T>> {
        // `prefix` is all input here, so validate it as if one more token followed.
        let mut probe = prefix.to_vec();
        probe.push(0);
        self.check_inputs(visual, instruction, &probe)?;
        let mut text = Vec::with_capacity(instruction.len() + 1 + prefix.len());
        text.extend_from_slice(&instruction.ids);
        text.push(self.config.bos_token);
        text.extend_from_slice(prefix);
        let len = visual.map_or(0, VisualContext::n_tokens) + text.len();
        let fwd = self.forward(visual, &text, len - 1..len);
        Ok(fwd.logp)
    }
}
