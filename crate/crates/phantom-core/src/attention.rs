//! Grouped-query causal self-attention.
//!
//! Queries use `h_q` heads and keys/values use `h_kv` heads (`h_kv` divides
//! `h_q`); each key/value head serves a contiguous group of `h_q / h_kv`
//! query heads. All heads share one head dimension, projections carry no
//! bias, and positions enter through rotary embedding applied to queries and
//! keys only.

use serde::{Deserialize, Serialize};

use crate::error::{PhantomError, Result};
use crate::tensor::{Tape, Tensor, MASK_VALUE};

/// How token positions are encoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalMode {
    /// Rotary embedding on queries and keys.
    Rotary,
    /// No positional signal (useful for algebraic equivalence tests).
    None,
}

/// Attention geometry shared by every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_q: usize,
    pub d_kv: usize,
    pub h_q: usize,
    pub h_kv: usize,
    pub rotary_base: f64,
    pub positional_mode: PositionalMode,
}

impl AttentionConfig {
    pub fn head_dim(&self) -> usize {
        self.d_q / self.h_q
    }

    /// Query heads served per key/value head.
    pub fn group_size(&self) -> usize {
        self.h_q / self.h_kv
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(PhantomError::Config(msg));
        if self.d_q == 0 || self.d_kv == 0 || self.h_q == 0 || self.h_kv == 0 {
            return fail("attention dimensions and head counts must be positive".into());
        }
        if self.d_q % self.h_q != 0 {
            return fail(format!("d_q {} not divisible by h_q {}", self.d_q, self.h_q));
        }
        if self.d_kv % self.h_kv != 0 {
            return fail(format!(
                "d_kv {} not divisible by h_kv {}",
                self.d_kv, self.h_kv
            ));
        }
        if self.d_q / self.h_q != self.d_kv / self.h_kv {
            return fail(format!(
                "query head dim {} != key/value head dim {}",
                self.d_q / self.h_q,
                self.d_kv / self.h_kv
            ));
        }
        if self.h_q % self.h_kv != 0 {
            return fail(format!(
                "h_q {} not divisible by h_kv {}",
                self.h_q, self.h_kv
            ));
        }
        if self.rotary_base <= 0.0 {
            return fail(format!("rotary base must be positive, got {}", self.rotary_base));
        }
        Ok(())
    }
}

/// Projects a hidden state into per-head query/key/value tensors.
/// `wq: [d_q, d_q]`, `wk`/`wv`: `[d_q, d_kv]`; no biases.
pub fn project_qkv(
    tape: &Tape,
    hidden: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    cfg: &AttentionConfig,
) -> Result<(Tensor, Tensor, Tensor)> {
    let shape = hidden.dims();
    if shape.len() != 3 || shape[2] != cfg.d_q {
        return Err(PhantomError::InvalidShape {
            op: "project_qkv",
            msg: format!("hidden must be [B, N, {}], got {shape:?}", cfg.d_q),
        });
    }
    let (b, n) = (shape[0], shape[1]);
    let dh = cfg.head_dim();
    let q = tape.matmul(hidden, wq)?;
    let k = tape.matmul(hidden, wk)?;
    let v = tape.matmul(hidden, wv)?;
    Ok((
        tape.reshape(&q, &[b, n, cfg.h_q, dh])?,
        tape.reshape(&k, &[b, n, cfg.h_kv, dh])?,
        tape.reshape(&v, &[b, n, cfg.h_kv, dh])?,
    ))
}

/// Applies the configured positional encoding to queries and keys.
/// `positions` gives the absolute position of each of the `N` tokens.
pub fn apply_positions(
    tape: &Tape,
    q: &Tensor,
    k: &Tensor,
    positions: &[usize],
    cfg: &AttentionConfig,
) -> Result<(Tensor, Tensor)> {
    match cfg.positional_mode {
        PositionalMode::None => Ok((q.clone(), k.clone())),
        PositionalMode::Rotary => Ok((
            tape.rotary(q, positions, cfg.rotary_base)?,
            tape.rotary(k, positions, cfg.rotary_base)?,
        )),
    }
}

/// Builds the additive attention mask for a chunk of `n_new` queries placed
/// after `history` tokens, over `total = history + n_new` keys. Entry
/// `[b, 0, i, j]` is 0 when query `i` may see key `j` — `j ≤ history + i`
/// and `j` is a real (non-pad) position of row `b` — and a large negative
/// sentinel otherwise. `lengths[b]` is the row's real token count.
pub fn attention_mask(b: usize, n_new: usize, history: usize, lengths: &[usize]) -> Result<Tensor> {
    if lengths.len() != b {
        return Err(PhantomError::InvalidShape {
            op: "attention_mask",
            msg: format!("{} lengths for batch of {b}", lengths.len()),
        });
    }
    let total = history + n_new;
    let mut data = vec![0.0; b * n_new * total];
    for (r, &len) in lengths.iter().enumerate() {
        for i in 0..n_new {
            let row = &mut data[(r * n_new + i) * total..(r * n_new + i + 1) * total];
            for (j, slot) in row.iter_mut().enumerate() {
                if j > history + i || j >= len {
                    *slot = MASK_VALUE;
                }
            }
        }
    }
    Tensor::new(&[b, 1, n_new, total], data)
}

/// Head-major scaled dot-product attention:
/// `q: [B, h, N, dq']`, `k: [B, h, M, dq']`, `v: [B, h, M, dv']` →
/// `([B, h, N, dv'], probs [B, h, N, M])`.
pub fn scaled_attention_with_probs(
    tape: &Tape,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    scale: f64,
    mask: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let kt = tape.swap_axes(k, 2, 3)?;
    let scores = tape.scale(&tape.matmul(q, &kt)?, scale)?;
    let probs = tape.softmax_lastdim(&scores, Some(mask))?;
    let out = tape.matmul(&probs, v)?;
    Ok((out, probs))
}

/// Grouped-query attention over per-head inputs
/// (`q: [B, N, h_q, dh]`, `k`/`v`: `[B, N, h_kv, dh]`), returning the
/// attended heads `[B, N, h_q, dh]` and the attention probabilities.
pub fn grouped_attention_with_probs(
    tape: &Tape,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    cfg: &AttentionConfig,
    mask: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let qh = tape.swap_axes(q, 1, 2)?;
    let kh = tape.repeat_axis1(&tape.swap_axes(k, 1, 2)?, cfg.group_size())?;
    let vh = tape.repeat_axis1(&tape.swap_axes(v, 1, 2)?, cfg.group_size())?;
    let scale = (cfg.head_dim() as f64).powf(-0.5);
    let (out, probs) = scaled_attention_with_probs(tape, &qh, &kh, &vh, scale, mask)?;
    Ok((tape.swap_axes(&out, 1, 2)?, probs))
}

/// Causal grouped-query self-attention, flattened back to `[B, N, d_q]`.
/// Rotary (when configured) is expected to have been applied to `q`/`k`
/// already; `mask` carries causality and padding.
pub fn causal_mhsa(
    tape: &Tape,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    cfg: &AttentionConfig,
    mask: &Tensor,
) -> Result<Tensor> {
    let (heads, _probs) = grouped_attention_with_probs(tape, q, k, v, cfg, mask)?;
    let shape = heads.dims();
    tape.reshape(&heads, &[shape[0], shape[1], shape[2] * shape[3]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn cfg(d_q: usize, h_q: usize, h_kv: usize) -> AttentionConfig {
        AttentionConfig {
            d_q,
            d_kv: d_q / h_q * h_kv,
            h_q,
            h_kv,
            rotary_base: 10000.0,
            positional_mode: PositionalMode::Rotary,
        }
    }

    fn randomish(shape: &[usize], seed: u64) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|i| {
                let x = ((i as u64).wrapping_mul(2862933555777941757).wrapping_add(seed)) >> 33;
                (x as f64 / (1u64 << 31) as f64) - 0.5
            })
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn config_validation_catches_bad_geometry() {
        assert!(cfg(64, 4, 2).validate().is_ok());
        let mut c = cfg(64, 4, 2);
        c.d_q = 63;
        assert!(c.validate().is_err());
        let mut c = cfg(64, 4, 2);
        c.h_kv = 3;
        assert!(c.validate().is_err());
        let mut c = cfg(64, 4, 2);
        c.d_kv = 64; // kv head dim 32 != q head dim 16
        assert!(c.validate().is_err());
    }

    #[test]
    fn grouped_heads_match_physically_duplicated_heads() {
        // Grouped K/V repetition must agree with an ungrouped run where each
        // key/value head has been materially copied per query head.
        let c = cfg(24, 6, 2);
        let tape = Tape::no_grad();
        let (b, n, dh) = (2, 5, c.head_dim());
        let q = randomish(&[b, n, c.h_q, dh], 1);
        let k = randomish(&[b, n, c.h_kv, dh], 2);
        let v = randomish(&[b, n, c.h_kv, dh], 3);
        let mask = attention_mask(b, n, 0, &[n, n]).unwrap();
        let grouped = causal_mhsa(&tape, &q, &k, &v, &c, &mask).unwrap();

        // Duplicate kv heads by hand into full h_q-head tensors.
        let dup = |x: &Tensor| {
            let xv = x.value();
            let mut data = vec![0.0; b * n * c.h_q * dh];
            for bb in 0..b {
                for t in 0..n {
                    for h in 0..c.h_q {
                        let src = ((bb * n + t) * c.h_kv + h / c.group_size()) * dh;
                        let dst = ((bb * n + t) * c.h_q + h) * dh;
                        data[dst..dst + dh].copy_from_slice(&xv[src..src + dh]);
                    }
                }
            }
            Tensor::new(&[b, n, c.h_q, dh], data).unwrap()
        };
        let full_cfg = AttentionConfig {
            h_kv: c.h_q,
            d_kv: c.d_q,
            ..c.clone()
        };
        let full = causal_mhsa(&tape, &q, &dup(&k), &dup(&v), &full_cfg, &mask).unwrap();
        let (a, b_) = (grouped.value(), full.value());
        for i in 0..a.len() {
            assert!((a[i] - b_[i]).abs() < 1e-12, "element {i}: {} vs {}", a[i], b_[i]);
        }
    }

    #[test]
    fn causal_prefix_is_bitwise_invariant_to_suffix_edits() {
        let c = cfg(16, 4, 4);
        let tape = Tape::no_grad();
        let (b, n, dh) = (1, 6, c.head_dim());
        let q = randomish(&[b, n, c.h_q, dh], 4);
        let k = randomish(&[b, n, c.h_kv, dh], 5);
        let v = randomish(&[b, n, c.h_kv, dh], 6);
        let mask = attention_mask(b, n, 0, &[n]).unwrap();
        let base = causal_mhsa(&tape, &q, &k, &v, &c, &mask).unwrap();

        // Rewrite everything at positions > t and compare the prefix.
        let t = 3usize;
        let poison = |x: &Tensor| {
            let mut data = x.value();
            let row = c.h_kv.max(c.h_q) * dh; // both layouts share [B,N,heads,dh]
            let per_tok = x.numel() / n;
            assert!(per_tok <= row * 2);
            for tok in (t + 1)..n {
                for i in 0..per_tok {
                    data[tok * per_tok + i] = 99.0 + i as f64;
                }
            }
            Tensor::new(&x.dims(), data).unwrap()
        };
        let edited = causal_mhsa(&tape, &poison(&q), &poison(&k), &poison(&v), &c, &mask).unwrap();
        let (a, e) = (base.value(), edited.value());
        let per_tok = c.d_q;
        for tok in 0..=t {
            for i in 0..per_tok {
                let idx = tok * per_tok + i;
                assert!(
                    a[idx].to_bits() == e[idx].to_bits(),
                    "prefix position {tok} changed"
                );
            }
        }
    }

    #[test]
    fn attention_mask_blocks_future_and_padding() {
        let m = attention_mask(2, 3, 0, &[3, 2]).unwrap();
        let v = m.value();
        // Row 0: strictly lower-triangular allowance.
        let allowed = |b: usize, i: usize, j: usize| v[(b * 3 + i) * 3 + j] == 0.0;
        assert!(allowed(0, 0, 0) && !allowed(0, 0, 1));
        assert!(allowed(0, 2, 0) && allowed(0, 2, 2));
        // Row 1 has length 2: key 2 is padding for every query.
        assert!(!allowed(1, 2, 2) && allowed(1, 2, 1));
    }

    #[test]
    fn decode_mask_sees_all_history() {
        let m = attention_mask(1, 1, 4, &[5]).unwrap();
        assert!(m.value().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn positional_mode_none_is_identity() {
        let c = AttentionConfig {
            positional_mode: PositionalMode::None,
            ..cfg(16, 4, 2)
        };
        let tape = Tape::no_grad();
        let q = randomish(&[1, 3, 4, 4], 7);
        let k = randomish(&[1, 3, 2, 4], 8);
        let (q2, k2) = apply_positions(&tape, &q, &k, &[0, 1, 2], &c).unwrap();
        assert_eq!(q.value(), q2.value());
        assert_eq!(k.value(), k2.value());
    }

    #[test]
    fn single_head_attention_matches_direct_loops() {
        let c = cfg(4, 1, 1);
        let tape = Tape::no_grad();
        let n = 4;
        let dh = 4;
        let q = randomish(&[1, n, 1, dh], 9);
        let k = randomish(&[1, n, 1, dh], 10);
        let v = randomish(&[1, n, 1, dh], 11);
        let mask = attention_mask(1, n, 0, &[n]).unwrap();
        let got = causal_mhsa(&tape, &q, &k, &v, &c, &mask).unwrap();

        let (qv, kv, vv) = (q.value(), k.value(), v.value());
        let scale = (dh as f64).powf(-0.5);
        let mut want = vec![0.0; n * dh];
        for i in 0..n {
            let mut logits = vec![f64::NEG_INFINITY; n];
            for j in 0..=i {
                let mut dot = 0.0;
                for d in 0..dh {
                    dot += qv[i * dh + d] * kv[j * dh + d];
                }
                logits[j] = dot * scale;
            }
            let maxv = logits[..=i].iter().cloned().fold(f64::MIN, f64::max);
            let mut exps = vec![0.0; n];
            let mut sum = 0.0;
            for j in 0..=i {
                exps[j] = (logits[j] - maxv).exp();
                sum += exps[j];
            }
            for j in 0..=i {
                let p = exps[j] / sum;
                for d in 0..dh {
                    want[i * dh + d] += p * vv[j * dh + d];
                }
            }
        }
        let gv = got.value();
        for i in 0..want.len() {
            assert!((gv[i] - want[i]).abs() < 1e-12, "{}: {} vs {}", i, gv[i], want[i]);
        }
    }
}
