//! The phantom-dimension attention path.
//!
//! For each layer, the query/key/value projections of the start-of-sequence
//! token ("starred" features) are expanded to every position through a
//! single-token multi-head cross-attention, concatenated onto the ordinary
//! per-head features to double the head dimension, attended over causally,
//! and finally compressed back to the original width by mixing the two
//! halves of the attention output.
//!
//! With one key/value token the cross-attention weight is exactly 1, so the
//! expansion (without its optional residual) is the value/output projection
//! of the starred features, identical at every position. That makes the
//! doubled-width attention scores differ from the baseline scores by a
//! per-row constant, which softmax ignores — the starred half changes what
//! is *carried*, not where attention *looks*.

use serde::{Deserialize, Serialize};

use crate::attention::{
    apply_positions, grouped_attention_with_probs, project_qkv, scaled_attention_with_probs,
    AttentionConfig,
};
use crate::error::{PhantomError, Result};
use crate::tensor::{Tape, Tensor};

/// Default score coefficient λ. With the doubled head dimension `2·dh`, the
/// score scale `λ·(2·dh)^{−1/2}` then reduces to the familiar `dh^{−1/2}`.
pub const DEFAULT_LAMBDA: f64 = std::f64::consts::SQRT_2;

/// How the two halves of the doubled-width attention output are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressionMode {
    /// Learned gate: convex mix of the halves (or the unnormalized printed
    /// form when `normalized_mode` is off).
    WeightedAverage,
    /// Plain element-wise sum of the halves.
    Sum,
    /// Element-wise average of the halves.
    Mean,
}

/// Knobs of the phantom-dimension path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSettings {
    /// Score multiplier λ in `λ·(2·dh)^{−1/2}`.
    pub lambda: f64,
    /// Sequence position whose projections become the starred features.
    pub phantom_index: usize,
    /// Half-mixing strategy.
    pub compression_mode: CompressionMode,
    /// When true, the second gate is the complement of the first so the two
    /// gates sum to one; when false, both gates share the printed
    /// `e^{f(Õ)} / (e^{f(Ō)} + e^{g(Õ)})` denominator and need not.
    pub normalized_mode: bool,
    /// Adds the unprojected query to the cross-attention expansion, making
    /// the expanded half position-dependent.
    pub mhca_residual: bool,
}

impl Default for PhantomSettings {
    fn default() -> Self {
        PhantomSettings {
            lambda: DEFAULT_LAMBDA,
            phantom_index: 0,
            compression_mode: CompressionMode::WeightedAverage,
            normalized_mode: true,
            mhca_residual: false,
        }
    }
}

/// Projection weights of one cross-attention path (query, key, value and
/// output), each `[dh, dh]` and shared across heads.
#[derive(Debug, Clone)]
pub struct MhcaPathWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

impl MhcaPathWeights {
    pub fn validate(&self, dh: usize) -> Result<()> {
        for (name, t) in [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
        ] {
            if t.dims() != vec![dh, dh] {
                return Err(PhantomError::Config(format!(
                    "cross-attention weight {name} must be [{dh}, {dh}], got {:?}",
                    t.dims()
                )));
            }
        }
        Ok(())
    }
}

/// The three expansion paths of one layer: one per starred stream (Q*, K*, V*).
#[derive(Debug, Clone)]
pub struct MhcaWeights {
    pub q_path: MhcaPathWeights,
    pub k_path: MhcaPathWeights,
    pub v_path: MhcaPathWeights,
}

impl MhcaWeights {
    pub fn validate(&self, dh: usize) -> Result<()> {
        self.q_path.validate(dh)?;
        self.k_path.validate(dh)?;
        self.v_path.validate(dh)
    }
}

/// Parameters added by the expansion machinery over `layers` layers: four
/// square `[dh, dh]` projections per path, three paths per layer.
pub fn mhca_param_count(head_dim: usize, layers: usize) -> usize {
    head_dim * head_dim * 4 * 3 * layers
}

/// Gate networks `f` and `g`: one fully-connected layer each, mapping a head
/// vector to a scalar (weights `[dh]`, bias `[1]`, shared across heads and
/// positions).
#[derive(Debug, Clone)]
pub struct MixerWeights {
    pub f_weight: Tensor,
    pub f_bias: Tensor,
    pub g_weight: Tensor,
    pub g_bias: Tensor,
}

impl MixerWeights {
    pub fn validate(&self, dh: usize) -> Result<()> {
        for (name, t, want) in [
            ("f_weight", &self.f_weight, vec![dh]),
            ("f_bias", &self.f_bias, vec![1]),
            ("g_weight", &self.g_weight, vec![dh]),
            ("g_bias", &self.g_bias, vec![1]),
        ] {
            if t.dims() != want {
                return Err(PhantomError::Config(format!(
                    "mixer weight {name} must be {want:?}, got {:?}",
                    t.dims()
                )));
            }
        }
        Ok(())
    }
}

/// Weights of one transformer block, including the phantom additions when
/// the block participates in the phantom-dimension path.
#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub mhca: Option<MhcaWeights>,
    pub mixer: Option<MixerWeights>,
    pub ffn_norm: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_w2: Tensor,
}

/// Everything a block needs besides its weights.
#[derive(Debug, Clone)]
pub struct BlockConfig {
    pub attn: AttentionConfig,
    pub pd_enabled: bool,
    pub settings: PhantomSettings,
    pub rms_eps: f64,
}

/// Slices the starred features: the raw (pre-rotary) projections of the
/// token at `phantom_index`. The result is exactly `narrow` at that index,
/// bit for bit.
pub fn extract_phantom_qkv(
    tape: &Tape,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    phantom_index: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let n = q.dim(1);
    if phantom_index >= n {
        return Err(PhantomError::IndexOutOfRange {
            index: phantom_index,
            size: n,
        });
    }
    Ok((
        tape.narrow(q, 1, phantom_index, 1)?,
        tape.narrow(k, 1, phantom_index, 1)?,
        tape.narrow(v, 1, phantom_index, 1)?,
    ))
}

/// Expands a single starred token to every position of `queries` through
/// multi-head cross-attention: `queries [B, N, h, dh]` attend to the one
/// key/value token `starred [B, 1, h, dh]`. With a single key the attention
/// weight is identically 1, so without the residual the result is the
/// starred value/output projection broadcast over positions.
pub fn mhca_expand(
    tape: &Tape,
    queries: &Tensor,
    starred: &Tensor,
    w: &MhcaPathWeights,
    residual: bool,
) -> Result<Tensor> {
    let qshape = queries.dims();
    let sshape = starred.dims();
    if qshape.len() != 4 || sshape.len() != 4 || sshape[1] != 1 {
        return Err(PhantomError::InvalidShape {
            op: "mhca_expand",
            msg: format!("queries {qshape:?}, starred {sshape:?}"),
        });
    }
    if qshape[0] != sshape[0] || qshape[2] != sshape[2] || qshape[3] != sshape[3] {
        return Err(PhantomError::ShapeMismatch {
            op: "mhca_expand",
            lhs: qshape,
            rhs: sshape,
        });
    }
    let dh = qshape[3];
    w.validate(dh)?;

    let qp = tape.matmul(queries, &w.wq)?;
    let kp = tape.matmul(starred, &w.wk)?;
    let vp = tape.matmul(starred, &w.wv)?;
    // Head-major single-key attention.
    let qh = tape.swap_axes(&qp, 1, 2)?; // [B, h, N, dh]
    let kh = tape.swap_axes(&kp, 1, 2)?; // [B, h, 1, dh]
    let vh = tape.swap_axes(&vp, 1, 2)?;
    let scale = (dh as f64).powf(-0.5);
    let scores = tape.scale(&tape.matmul(&qh, &tape.swap_axes(&kh, 2, 3)?)?, scale)?;
    let probs = tape.softmax_lastdim(&scores, None)?; // single key ⇒ all ones
    let attended = tape.matmul(&probs, &vh)?;
    let back = tape.swap_axes(&attended, 1, 2)?;
    let out = tape.matmul(&back, &w.wo)?;
    if residual {
        tape.add(&out, queries)
    } else {
        Ok(out)
    }
}

/// Doubled-width causal attention. Base per-head features are concatenated
/// with their starred expansions, scores use `λ·(2·dh)^{−1/2}`, and the
/// attended output keeps the doubled width `[B, N, h_q, 2·dh]`.
#[allow(clippy::too_many_arguments)]
pub fn phantom_mhsa_with_probs(
    tape: &Tape,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    q_star: &Tensor,
    k_star: &Tensor,
    v_star: &Tensor,
    mhca: &MhcaWeights,
    cfg: &AttentionConfig,
    settings: &PhantomSettings,
    mask: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let dh = cfg.head_dim();
    let q_exp = mhca_expand(tape, q, q_star, &mhca.q_path, settings.mhca_residual)?;
    let k_exp = mhca_expand(tape, k, k_star, &mhca.k_path, settings.mhca_residual)?;
    let v_exp = mhca_expand(tape, v, v_star, &mhca.v_path, settings.mhca_residual)?;
    let qcat = tape.concat_lastdim(q, &q_exp)?;
    let kcat = tape.concat_lastdim(k, &k_exp)?;
    let vcat = tape.concat_lastdim(v, &v_exp)?;

    let qh = tape.swap_axes(&qcat, 1, 2)?;
    let kh = tape.repeat_axis1(&tape.swap_axes(&kcat, 1, 2)?, cfg.group_size())?;
    let vh = tape.repeat_axis1(&tape.swap_axes(&vcat, 1, 2)?, cfg.group_size())?;
    let scale = settings.lambda * (2.0 * dh as f64).powf(-0.5);
    let (out, probs) = scaled_attention_with_probs(tape, &qh, &kh, &vh, scale, mask)?;
    Ok((tape.swap_axes(&out, 1, 2)?, probs))
}

/// [`phantom_mhsa_with_probs`] without the probability probe.
#[allow(clippy::too_many_arguments)]
pub fn phantom_mhsa(
    tape: &Tape,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    q_star: &Tensor,
    k_star: &Tensor,
    v_star: &Tensor,
    mhca: &MhcaWeights,
    cfg: &AttentionConfig,
    settings: &PhantomSettings,
    mask: &Tensor,
) -> Result<Tensor> {
    phantom_mhsa_with_probs(
        tape, q, k, v, q_star, k_star, v_star, mhca, cfg, settings, mask,
    )
    .map(|(out, _)| out)
}

/// Evaluates one gate network over per-head vectors: `x [B, N, h, dh]`
/// against weight `[dh]` and bias `[1]`, yielding scores `[B, N, h]`.
fn gate_scores(tape: &Tape, x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let shape = x.dims();
    let dh = shape[3];
    let col = tape.reshape(weight, &[dh, 1])?;
    let scores = tape.matmul(x, &col)?; // [B, N, h, 1]
    let flat = tape.reshape(&scores, &[shape[0], shape[1], shape[2]])?;
    tape.add(&flat, bias)
}

/// Compresses the doubled-width attention output `[B, N, h, 2·dh]` back to
/// `[B, N, h, dh]` by mixing its halves Ō (base) and Õ (starred).
pub fn compress_output(
    tape: &Tape,
    attn_out: &Tensor,
    mixer: Option<&MixerWeights>,
    settings: &PhantomSettings,
) -> Result<Tensor> {
    let shape = attn_out.dims();
    if shape.len() != 4 {
        return Err(PhantomError::InvalidShape {
            op: "compress_output",
            msg: format!("expected [B, N, h, 2·dh], got {shape:?}"),
        });
    }
    let (o_bar, o_tilde) = tape.split_lastdim_half(attn_out)?;
    match settings.compression_mode {
        CompressionMode::Sum => tape.add(&o_bar, &o_tilde),
        CompressionMode::Mean => tape.scale(&tape.add(&o_bar, &o_tilde)?, 0.5),
        CompressionMode::WeightedAverage => {
            let mixer = mixer.ok_or_else(|| {
                PhantomError::Config("weighted-average compression requires mixer weights".into())
            })?;
            mixer.validate(shape[3] / 2)?;
            let f_bar = gate_scores(tape, &o_bar, &mixer.f_weight, &mixer.f_bias)?;
            let g_tilde = gate_scores(tape, &o_tilde, &mixer.g_weight, &mixer.g_bias)?;
            // w̄ = e^{f(Ō)} / (e^{f(Ō)} + e^{g(Õ)}) = σ(f(Ō) − g(Õ))
            let w_bar = tape.sigmoid(&tape.sub(&f_bar, &g_tilde)?)?;
            let w_tilde = if settings.normalized_mode {
                // Complement gate: the two gates sum to one.
                tape.sigmoid(&tape.sub(&g_tilde, &f_bar)?)?
            } else {
                // Printed form: e^{f(Õ)} over the same denominator,
                // computed stably as e^{f(Õ) − f(Ō)} · w̄.
                let f_tilde = gate_scores(tape, &o_tilde, &mixer.f_weight, &mixer.f_bias)?;
                let ratio = tape.exp(&tape.sub(&f_tilde, &f_bar)?)?;
                tape.mul(&ratio, &w_bar)?
            };
            let bar_part = tape.broadcast_mul(&o_bar, &w_bar)?;
            let tilde_part = tape.broadcast_mul(&o_tilde, &w_tilde)?;
            tape.add(&bar_part, &tilde_part)
        }
    }
}

/// One pre-norm transformer block with the phantom-dimension attention path.
///
/// `positions` are the absolute positions of the `N` tokens (rotary), and
/// `mask` the additive attention mask. With `pd_enabled` off this is exactly
/// the vanilla block: normalize, project, rotate, attend, project out,
/// residual-add, normalize, feed-forward, residual-add.
pub fn phantom_block_forward(
    tape: &Tape,
    hidden: &Tensor,
    weights: &BlockWeights,
    cfg: &BlockConfig,
    positions: &[usize],
    mask: &Tensor,
) -> Result<Tensor> {
    let shape = hidden.dims();
    let (b, n) = (shape[0], shape[1]);
    let normed = tape.rms_norm(hidden, &weights.attn_norm, cfg.rms_eps)?;
    let (q0, k0, v0) = project_qkv(tape, &normed, &weights.wq, &weights.wk, &weights.wv, &cfg.attn)?;

    let heads = if cfg.pd_enabled {
        let mhca = weights.mhca.as_ref().ok_or_else(|| {
            PhantomError::Config("phantom dimension enabled but block has no expansion weights".into())
        })?;
        // Starred features come from the raw projections, before rotary.
        let (q_star, k_star, v_star) =
            extract_phantom_qkv(tape, &q0, &k0, &v0, cfg.settings.phantom_index)?;
        let (q, k) = apply_positions(tape, &q0, &k0, positions, &cfg.attn)?;
        let doubled = phantom_mhsa_with_probs(
            tape,
            &q,
            &k,
            &v0,
            &q_star,
            &k_star,
            &v_star,
            mhca,
            &cfg.attn,
            &cfg.settings,
            mask,
        )?
        .0;
        compress_output(tape, &doubled, weights.mixer.as_ref(), &cfg.settings)?
    } else {
        let (q, k) = apply_positions(tape, &q0, &k0, positions, &cfg.attn)?;
        grouped_attention_with_probs(tape, &q, &k, &v0, &cfg.attn, mask)?.0
    };

    let flat = tape.reshape(&heads, &[b, n, cfg.attn.d_q])?;
    let projected = tape.matmul(&flat, &weights.wo)?;
    let mid = tape.add(hidden, &projected)?;
    let normed2 = tape.rms_norm(&mid, &weights.ffn_norm, cfg.rms_eps)?;
    let ff1 = tape.gelu(&tape.matmul(&normed2, &weights.ffn_w1)?)?;
    let ff2 = tape.matmul(&ff1, &weights.ffn_w2)?;
    tape.add(&mid, &ff2)
}
