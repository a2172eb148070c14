//! Differentiable operations. Each op validates shapes, computes its result
//! eagerly, and — when the tape is recording and any operand requires
//! gradients — appends a closure that routes the output gradient back to the
//! operands. Backward rules accumulate (`+=`), so a tensor used several times
//! collects contributions from every use.
//!
//! Broadcasting follows the usual right-aligned rule and is only ever applied
//! to the second operand: its trailing dimensions must each equal the first
//! operand's dimension or be 1, and missing leading dimensions repeat.

use crate::error::{PhantomError, Result};

use super::tape::Tape;
use super::{Tensor, MASK_ROW_THRESHOLD};

/// Right-aligned broadcast of `rhs` onto `lhs`: per-`lhs`-dimension strides
/// into `rhs`, with 0 marking a broadcast dimension.
struct BroadcastMap {
    lhs_shape: Vec<usize>,
    rhs_strides: Vec<usize>,
    identity: bool,
}

impl BroadcastMap {
    fn build(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<BroadcastMap> {
        if rhs.len() > lhs.len() {
            return Err(PhantomError::ShapeMismatch {
                op,
                lhs: lhs.to_vec(),
                rhs: rhs.to_vec(),
            });
        }
        let offset = lhs.len() - rhs.len();
        // Row-major strides of rhs.
        let mut strides = vec![0usize; rhs.len()];
        let mut acc = 1usize;
        for i in (0..rhs.len()).rev() {
            strides[i] = acc;
            acc *= rhs[i];
        }
        let mut rhs_strides = vec![0usize; lhs.len()];
        let mut identity = rhs.len() == lhs.len();
        for i in 0..lhs.len() {
            if i < offset {
                rhs_strides[i] = 0;
            } else if rhs[i - offset] == lhs[i] {
                rhs_strides[i] = strides[i - offset];
            } else if rhs[i - offset] == 1 {
                rhs_strides[i] = 0;
                if lhs[i] != 1 {
                    identity = false;
                }
            } else {
                return Err(PhantomError::ShapeMismatch {
                    op,
                    lhs: lhs.to_vec(),
                    rhs: rhs.to_vec(),
                });
            }
        }
        Ok(BroadcastMap {
            lhs_shape: lhs.to_vec(),
            rhs_strides,
            identity,
        })
    }

    /// Maps a flat index into `lhs` to the matching flat index into `rhs`.
    fn rhs_index(&self, mut flat: usize) -> usize {
        if self.identity {
            return flat;
        }
        let mut off = 0;
        for i in (0..self.lhs_shape.len()).rev() {
            let c = flat % self.lhs_shape[i];
            flat /= self.lhs_shape[i];
            off += c * self.rhs_strides[i];
        }
        off
    }
}

/// Symmetric broadcast of two batch-dimension lists (for matmul).
fn broadcast_batch(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let ad = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let bd = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        if ad == bd || ad == 1 || bd == 1 {
            out[i] = ad.max(bd);
        } else {
            return Err(PhantomError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
    }
    Ok(out)
}

/// Per-batch-cell offsets into a possibly-broadcast operand.
fn batch_offsets(out_batch: &[usize], operand_batch: &[usize]) -> Vec<usize> {
    let cells: usize = out_batch.iter().product();
    let n = out_batch.len();
    // Row-major strides of the operand batch (0 where broadcast).
    let mut strides = vec![0usize; n];
    let mut acc = 1usize;
    for i in (0..operand_batch.len()).rev() {
        let oi = i + n - operand_batch.len();
        if operand_batch[i] == 1 && out_batch[oi] != 1 {
            strides[oi] = 0;
        } else {
            strides[oi] = acc;
        }
        acc *= operand_batch[i];
    }
    let mut offsets = Vec::with_capacity(cells);
    for mut flat in 0..cells {
        let mut off = 0;
        let mut f = flat;
        for i in (0..n).rev() {
            let c = f % out_batch[i];
            f /= out_batch[i];
            off += c * strides[i];
        }
        flat = off;
        offsets.push(flat);
    }
    offsets
}

impl Tape {
    fn track2(&self, a: &Tensor, b: &Tensor) -> bool {
        self.is_recording() && (a.requires_grad() || b.requires_grad())
    }

    fn track1(&self, a: &Tensor) -> bool {
        self.is_recording() && a.requires_grad()
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    /// Batched matrix product. The trailing two dimensions multiply as
    /// `[m,k] × [k,n] → [m,n]`; leading dimensions broadcast.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (ashape, bshape) = (a.dims(), b.dims());
        if ashape.len() < 2 || bshape.len() < 2 {
            return Err(PhantomError::InvalidShape {
                op: "matmul",
                msg: format!("operands must have rank >= 2, got {ashape:?} and {bshape:?}"),
            });
        }
        let (m, ka) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
        let (kb, n) = (bshape[bshape.len() - 2], bshape[bshape.len() - 1]);
        if ka != kb {
            return Err(PhantomError::ShapeMismatch {
                op: "matmul",
                lhs: ashape.clone(),
                rhs: bshape.clone(),
            });
        }
        let k = ka;
        let a_batch = ashape[..ashape.len() - 2].to_vec();
        let b_batch = bshape[..bshape.len() - 2].to_vec();
        let out_batch = broadcast_batch("matmul", &a_batch, &b_batch)?;
        let cells: usize = out_batch.iter().product();
        let a_off = batch_offsets(&out_batch, &a_batch);
        let b_off = batch_offsets(&out_batch, &b_batch);

        let mut out_shape = out_batch.clone();
        out_shape.push(m);
        out_shape.push(n);
        let mut out_data = vec![0.0; cells * m * n];
        {
            let ad = a.borrow();
            let bd = b.borrow();
            for c in 0..cells {
                let ablock = &ad.data[a_off[c] * m * k..a_off[c] * m * k + m * k];
                let bblock = &bd.data[b_off[c] * k * n..b_off[c] * k * n + k * n];
                let oblock = &mut out_data[c * m * n..(c + 1) * m * n];
                for i in 0..m {
                    let arow = &ablock[i * k..(i + 1) * k];
                    let orow = &mut oblock[i * n..(i + 1) * n];
                    for (kk, &av) in arow.iter().enumerate() {
                        if av == 0.0 {
                            continue;
                        }
                        let brow = &bblock[kk * n..(kk + 1) * n];
                        for j in 0..n {
                            orow[j] += av * brow[j];
                        }
                    }
                }
            }
        }

        let track = self.track2(a, b);
        let out = Tensor::from_parts(out_shape, out_data, track);
        if track {
            a.ensure_grad();
            b.ensure_grad();
            let (a2, b2, out2) = (a.clone(), b.clone(), out.clone());
            self.record(Box::new(move || {
                let g = match out2.borrow().grad.clone() {
                    Some(g) => g,
                    None => return,
                };
                let a_rg = a2.requires_grad();
                let b_rg = b2.requires_grad();
                let mut da = if a_rg { vec![0.0; a2.numel()] } else { Vec::new() };
                let mut db = if b_rg { vec![0.0; b2.numel()] } else { Vec::new() };
                {
                    let ad = a2.borrow();
                    let bd = b2.borrow();
                    for c in 0..cells {
                        let gblock = &g[c * m * n..(c + 1) * m * n];
                        if a_rg {
                            // da += g · bᵀ
                            let bblock = &bd.data[b_off[c] * k * n..b_off[c] * k * n + k * n];
                            let dablock = &mut da[a_off[c] * m * k..a_off[c] * m * k + m * k];
                            for i in 0..m {
                                let grow = &gblock[i * n..(i + 1) * n];
                                let darow = &mut dablock[i * k..(i + 1) * k];
                                for kk in 0..k {
                                    let brow = &bblock[kk * n..(kk + 1) * n];
                                    let mut acc = 0.0;
                                    for j in 0..n {
                                        acc += grow[j] * brow[j];
                                    }
                                    darow[kk] += acc;
                                }
                            }
                        }
                        if b_rg {
                            // db += aᵀ · g
                            let ablock = &ad.data[a_off[c] * m * k..a_off[c] * m * k + m * k];
                            let dbblock = &mut db[b_off[c] * k * n..b_off[c] * k * n + k * n];
                            for i in 0..m {
                                let grow = &gblock[i * n..(i + 1) * n];
                                let arow = &ablock[i * k..(i + 1) * k];
                                for kk in 0..k {
                                    let av = arow[kk];
                                    if av == 0.0 {
                                        continue;
                                    }
                                    let dbrow = &mut dbblock[kk * n..(kk + 1) * n];
                                    for j in 0..n {
                                        dbrow[j] += av * grow[j];
                                    }
                                }
                            }
                        }
                    }
                }
                if a_rg {
                    a2.accumulate_grad(&da);
                }
                if b_rg {
                    b2.accumulate_grad(&db);
                }
            }));
        }
        Ok(out)
    }

    // ── Elementwise binary ──────────────────────────────────────────────

    /// `a + b`, broadcasting `b` onto `a` (right-aligned; dims equal or 1).
    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_broadcast("add", a, b, |x, y| x + y, 1.0)
    }

    /// `a - b`, broadcasting `b` onto `a`.
    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_broadcast("sub", a, b, |x, y| x - y, -1.0)
    }

    fn binary_broadcast(
        &self,
        op: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: fn(f64, f64) -> f64,
        db_sign: f64,
    ) -> Result<Tensor> {
        let map = BroadcastMap::build(op, &a.dims(), &b.dims())?;
        let numel = a.numel();
        let mut out_data = vec![0.0; numel];
        {
            let ad = a.borrow();
            let bd = b.borrow();
            if map.identity {
                for i in 0..numel {
                    out_data[i] = f(ad.data[i], bd.data[i]);
                }
            } else {
                for i in 0..numel {
                    out_data[i] = f(ad.data[i], bd.data[map.rhs_index(i)]);
                }
            }
        }
        let track = self.track2(a, b);
        let out = Tensor::from_parts(a.dims(), out_data, track);
        if track {
            a.ensure_grad();
            b.ensure_grad();
            let (a2, b2, out2) = (a.clone(), b.clone(), out.clone());
            self.record(Box::new(move || {
                let g = match out2.borrow().grad.clone() {
                    Some(g) => g,
                    None => return,
                };
                if a2.requires_grad() {
                    a2.accumulate_grad(&g);
                }
                if b2.requires_grad() {
                    let mut db = vec![0.0; b2.numel()];
                    if map.identity {
                        for i in 0..g.len() {
                            db[i] += db_sign * g[i];
                        }
                    } else {
                        for i in 0..g.len() {
                            db[map.rhs_index(i)] += db_sign * g[i];
                        }
                    }
                    b2.accumulate_grad(&db);
                }
            }));
        }
        Ok(out)
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.dims() != b.dims() {
            return Err(PhantomError::ShapeMismatch {
                op: "mul",
                lhs: a.dims(),
                rhs: b.dims(),
            });
        }
        let numel = a.numel();
        let mut out_data = vec![0.0; numel];
        {
            let ad = a.borrow();
            let bd = b.borrow();
            for i in 0..numel {
                out_data[i] = ad.data[i] * bd.data[i];
            }
        }
        let track = self.track2(a, b);
        let out = Tensor::from_parts(a.dims(), out_data, track);
        if track {
            a.ensure_grad();
            b.ensure_grad();
            let (a2, b2, out2) = (a.clone(), b.clone(), out.clone());
            self.record(Box::new(move || {
                let g = match out2.borrow().grad.clone() {
                    Some(g) => g,
                    None => return,
                };
                let (da, db) = {
                    let ad = a2.borrow();
                    let bd = b2.borrow();
                    let da: Vec<f64> = if a2.requires_grad() {
                        g.iter().zip(&bd.data).map(|(gi, bi)| gi * bi).collect()
                    } else {
                        Vec::new()
                    };
                    let db: Vec<f64> = if b2.requires_grad() {
                        g.iter().zip(&ad.data).map(|(gi, ai)| gi * ai).collect()
                    } else {
                        Vec::new()
                    };
                    (da, db)
                };
                if a2.requires_grad() {
                    a2.accumulate_grad(&da);
                }
                if b2.requires_grad() {
                    b2.accumulate_grad(&db);
                }
            }));
        }
        Ok(out)
    }

    /// Multiplies `value[..., d]` by a per-row weight `w[...]` whose shape is
    /// `value`'s shape with the last dimension removed. This is the gating
    /// product used when mixing split attention halves.
    pub fn broadcast_mul(&self, value: &Tensor, w: &Tensor) -> Result<Tensor> {
        let vshape = value.dims();
        let wshape = w.dims();
        if vshape.len() < 1 || wshape[..] != vshape[..vshape.len() - 1] {
            return Err(PhantomError::ShapeMismatch {
                op: "broadcast_mul",
                lhs: vshape,
                rhs: wshape,
            });
        }
        let d = vshape[vshape.len() - 1];
        let numel = value.numel();
        let mut out_data = vec![0.0; numel];
        {
            let vd = value.borrow();
            let wd = w.borrow();
            for i in 0..numel {
                out_data[i] = vd.data[i] * wd.data[i / d];
            }
        }
        let track = self.track2(value, w);
        let out = Tensor::from_parts(value.dims(), out_data, track);
        if track {
            value.ensure_grad();
            w.ensure_grad();
            let (v2, w2, out2) = (value.clone(), w.clone(), out.clone());
            self.record(Box::new(move || {
                let g = match out2.borrow().grad.clone() {
                    Some(g) => g,
                    None => return,
                };
                let (dv, dw) = {
                    let vd = v2.borrow();
                    let wd = w2.borrow();
                    let dv: Vec<f64> = if v2.requires_grad() {
                        (0..g.len()).map(|i| g[i] * wd.data[i / d]).collect()
                    } else {
                        Vec::new()
                    };
                    let dw: Vec<f64> = if w2.requires_grad() {
                        let mut dw = vec![0.0; wd.data.len()];
                        for i in 0..g.len() {
                            dw[i / d] += g[i] * vd.data[i];
                        }
                        dw
                    } else {
                        Vec::new()
                    };
                    (dv, dw)
                };
                if v2.requires_grad() {
                    v2.accumulate_grad(&dv);
                }
                if w2.requires_grad() {
                    w2.accumulate_grad(&dw);
                }
            }));
        }
        Ok(out)
    }

    /// Multiplies by a compile-time constant.
    pub fn scale(&self, x: &Tensor, c: f64) -> Result<Tensor> {
        self.unary(x, move |v| c * v, move |v, _y| {
            let _ = v;
            c
        })
    }

    /// Adds a constant to every element.
    pub fn add_scalar(&self, x: &Tensor, c: f64) -> Result<Tensor> {
        self.unary(x, move |v| v + c, |_v, _y| 1.0)
    }

    // ── Elementwise unary ───────────────────────────────────────────────

    /// Gaussian error linear unit in its exact form, `x · Φ(x)` with the
    /// normal CDF expressed through `erf`.
    pub fn gelu(&self, x: &Tensor) -> Result<Tensor> {
        const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
        const INV_SQRT_2PI: f64 = 0.3989422804014327;
        self.unary(
            x,
            |v| 0.5 * v * (1.0 + libm::erf(v * FRAC_1_SQRT_2)),
            |v, _y| {
                let phi_cdf = 0.5 * (1.0 + libm::erf(v * FRAC_1_SQRT_2));
                let phi_pdf = INV_SQRT_2PI * (-0.5 * v * v).exp();
                phi_cdf + v * phi_pdf
            },
        )
    }

    /// Logistic sigmoid, computed without overflow on either tail.
    pub fn sigmoid(&self, x: &Tensor) -> Result<Tensor> {
        self.unary(
            x,
            |v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            },
            |_v, y| y * (1.0 - y),
        )
    }

    /// `log σ(x)`, computed as `min(x, 0) − ln(1 + e^{-|x|})` so large
    /// negative inputs stay finite.
    pub fn log_sigmoid(&self, x: &Tensor) -> Result<Tensor> {
        self.unary(
            x,
            |v| {
                if v >= 0.0 {
                    -(-v).exp().ln_1p()
                } else {
                    v - v.exp().ln_1p()
                }
            },
            |v, _y| {
                // d/dx log σ(x) = σ(−x)
                if v >= 0.0 {
                    let e = (-v).exp();
                    e / (1.0 + e)
                } else {
                    1.0 / (1.0 + v.exp())
                }
            },
        )
    }

    pub fn exp(&self, x: &Tensor) -> Result<Tensor> {
        self.unary(x, |v| v.exp(), |_v, y| y)
    }

    /// Natural logarithm. The caller is responsible for keeping inputs
    /// positive; non-positive values propagate IEEE semantics.
    pub fn log(&self, x: &Tensor) -> Result<Tensor> {
        self.unary(x, |v| v.ln(), |v, _y| 1.0 / v)
    }

    fn unary(
        &self,
        x: &Tensor,
        f: impl Fn(f64) -> f64 + 'static,
        // derivative as a function of (input, output)
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Tensor> {
        let numel = x.numel();
        let mut out_data = vec![0.0; numel];
        {
            let xd = x.borrow();
            for i in 0..numel {
                out_data[i] = f(xd.data[i]);
            }
        }
        let track = self.track1(x);
        let out = Tensor::from_parts(x.dims(), out_data, track);
        if track {
            x.ensure_grad();
            let (x2, out2) = (x.clone(), out.clone());
            self.record(Box::new(move || {
                let g = match out2.borrow().grad.clone() {
                    Some(g) => g,
                    None => return,
                };
                let dx: Vec<f64> = {
                    let xd = x2.borrow();
                    let od = out2.borrow();
                    (0..g.len())
                        .map(|i| g[i] * df(xd.data[i], od.data[i]))
                        .collect()
                };
                x2.accumulate_grad(&dx);
            }));
        }
        Ok(out)
    }

    // ── Softmax, normalization, losses ──────────────────────────────────

    /// Softmax over the last dimension with an optional additive mask
    /// (broadcast onto `x`; masked entries carry a large negative value).
    /// Rows whose every entry is masked are rejected.
    pub fn softmax_lastdim(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let z = match mask {
            Some(m) => {
                debug_assert!(!m.requires_grad(), "attention masks are constants");
                self.add(x, m)?
            }
            None => x.clone(),
        };
        let shape = z.dims();
        if shape.is_empty() {
            return Err(PhantomError::InvalidShape {
                op: "softmax_lastdim",
                msg: "rank must be >= 1".into(),
            });
        }
        let d = shape[shape.len() - 1];
        if d == 0 {
            return Err(PhantomError::InvalidShape {
                op: "softmax_lastdim",
                msg: "last dimension must be non-empty".into(),
            });
        }
        let rows = z.numel() / d;
        let mut out_data = vec![0.0; z.numel()];
        {
            let zd = z.borrow();
            for r in 0..rows {
                let row = &zd.data[r * d..(r + 1) * d];
                let mut maxv = f64::NEG_INFINITY;
                for &v in row {
                    if v > maxv {
                        maxv = v;
                    }
                }
                if maxv < MASK_ROW_THRESHOLD {
                    return Err(PhantomError::FullyMaskedRow);
                }
                let orow = &mut out_data[r * d..(r + 1) * d];
                let mut sum = 0.0;
                for i in 0..d {
                    let e = (row[i] - maxv).exp();
                    orow[i] = e;
                    sum += e;
                }
                let inv = 1.0 / sum;
                for o in orow.iter_mut() {
                    *o *= inv;
                }
            }
        }
        let track = self.track1(&z);
        let out = Tensor::from_parts(shape, out_data, track);
        if track {
            z.ensure_grad();
            let (z2, out2) = (z.clone(), out.clone());
            self.record(Box::new(move || {
                let g = match out2.borrow().grad.clone() {
                    Some(g) => g,
                    None => return,
                };
                let dz: Vec<f64> = {
                    let od = out2.borrow();
                    let mut dz = vec![0.0; g.len()];
                    for r in 0..rows {
                        let y = &od.data[r * d..(r + 1) * d];
                        let u = &g[r * d..(r + 1) * d];
                        let mut dot = 0.0;
                        for i in 0..d {
                            dot += u[i] * y[i];
                        }
                        let drow = &mut dz[r * d..(r + 1) * d];
                        for i in 0..d {
                            drow[i] = y[i] * (u[i] - dot);
                        }
                    }
                    dz
                };
                z2.accumulate_grad(&dz);
            }));
        }
        Ok(out)
    }

    /// Root-mean-square normalization over the last dimension with a learned
    /// per-channel gain.
    pub fn rms_norm(&self, x: &Tensor, gamma: &Tensor, eps: f64) -> Result<Tensor> {
        let shape = x.dims();
        if shape.is_empty() {
            return Err(PhantomError::InvalidShape {
                op: "rms_norm",
                msg: "rank must be >= 1".into(),
            });
        }
        let d = shape[shape.len() - 1];
        if gamma.dims() != vec![d] {
            return Err(PhantomError::ShapeMismatch {
                op: "rms_norm",
                lhs: shape,
                rhs: gamma.dims(),
            });
        }
        let rows = x.numel() / d;
        let mut out_data = vec![0.0; x.numel()];
        let mut inv_rms = vec![0.0; rows];
        {
            let xd = x.borrow();
            let gd = gamma.borrow();
            for r in 0..rows {
                let row = &xd.data[r * d..(r + 1) * d];
                let mut ms = 0.0;
                for &v in row {
                    ms += v * v;
                }
                ms /= d as f64;
                let inv = 1.0 / (ms + eps).sqrt();
                inv_rms[r] = inv;
                let orow = &mut out_data[r * d..(r + 1) * d];
                for i in 0..d {
                    orow[i] = row[i] * inv * gd.data[i];
                }
            }
        }
        let track = self.track2(x, gamma);
        let out = Tensor::from_parts(x.dims(), out_data, track);
        if track {
            x.ensure_grad();
            gamma.ensure_grad();
            let (x2, g2, out2) = (x.clone(), gamma.clone(), out.clone());
            self.record(Box::new(move || {
                let g = match out2.borrow().grad.clone() {
                    Some(g) => g,
                    None => return,
                };
                let (dx, dgamma) = {
                    let xd = x2.borrow();
                    let gd = g2.borrow();
                    let mut dx = vec![0.0; xd.data.len()];
                    let mut dgamma = vec![0.0; d];
                    for r in 0..rows {
                        let row = &xd.data[r * d..(r + 1) * d];
                        let u = &g[r * d..(r + 1) * d];
                        let inv = inv_rms[r];
                        // s = Σ_i u_i γ_i x_i
                        let mut s = 0.0;
                        for i in 0..d {
                            s += u[i] * gd.data[i] * row[i];
                        }
                        let coeff = inv * inv * inv * s / d as f64;
                        let drow = &mut dx[r * d..(r + 1) * d];
                        for i in 0..d {
                            drow[i] = inv * gd.data[i] * u[i] - coeff * row[i];
                            dgamma[i] += u[i] * row[i] * inv;
                        }
                    }
                    (dx, dgamma)
                };
                if x2.requires_grad() {
                    x2.accumulate_grad(&dx);
                }
                if g2.requires_grad() {
                    g2.accumulate_grad(&dgamma);
                }
            }));
        }
        Ok(out)
    }

    /// Per-position log-probability of the given target under a softmax over
    /// the last dimension: `out[p] = logits[p, target[p]] − lse(logits[p, :])`.
    pub fn gather_log_probs(&self, logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
        let shape = logits.dims();
        if shape.len() < 2 {
            return Err(PhantomError::InvalidShape {
                op: "gather_log_probs",
                msg: format!("logits must have rank >= 2, got {shape:?}"),
            });
        }
        let v = shape[shape.len() - 1];
        let rows = logits.numel() / v;
        if targets.len() != rows {
            return Err(PhantomError::InvalidShape {
                op: "gather_log_probs",
                msg: format!("{} targets for {} positions", targets.len(), rows),
            });
        }
        for &t in targets {
            if t >= v {
                return Err(PhantomError::IndexOutOfRange { index: t, size: v });
            }
        }
        let out_shape = shape[..shape.len() - 1].to_vec();
        let mut out_data = vec![0.0; rows];
        let mut probs = vec![0.0; logits.numel()];
        {
            let ld = logits.borrow();
            for r in 0..rows {
                let row = &ld.data[r * v..(r + 1) * v];
                let mut maxv = f64::NEG_INFINITY;
                for &x in row {
                    if x > maxv {
                        maxv = x;
                    }
                }
                let prow = &mut probs[r * v..(r + 1) * v];
                let mut sum = 0.0;
                for i in 0..v {
                    let e = (row[i] - maxv).exp();
                    prow[i] = e;
                    sum += e;
                }
                let inv = 1.0 / sum;
                for p in prow.iter_mut() {
                    *p *= inv;
                }
                out_data[r] = row[targets[r]] - (maxv + sum.ln());
            }
        }
        let track = self.track1(logits);
        let out = Tensor::from_parts(out_shape, out_data, track);
        if track {
            logits.ensure_grad();
            let targets = targets.to_vec();
            let (l2, out2) = (logits.clone(), out.clone());
            self.record(Box::new(move || {
                let g = match out2.borrow().grad.clone() {
                    Some(g) => g,
                    None => return,
                };
                let mut dl = vec![0.0; l2.numel()];
                for r in 0..rows {
                    let u = g[r];
                    if u == 0.0 {
                        continue;
                    }
                    let prow = &probs[r * v..(r + 1) * v];
                    let drow = &mut dl[r * v..(r + 1) * v];
                    for i in 0..v {
                        drow[i] = -u * prow[i];
                    }
                    drow[targets[r]] += u;
                }
                l2.accumulate_grad(&dl);
            }));
        }
        Ok(out)
    }

    /// Mean negative log-likelihood over positions where `mask` is nonzero.
    /// `logits` has shape `[..., V]`; `targets` and `mask` are flat over the
    /// leading dimensions. Errors when the mask selects nothing.
    pub fn cross_entropy(&self, logits: &Tensor, targets: &[usize], mask: &Tensor) -> Result<Tensor> {
        let shape = logits.dims();
        let v = shape[shape.len() - 1];
        let rows = logits.numel() / v;
        if mask.numel() != rows {
            return Err(PhantomError::ShapeMismatch {
                op: "cross_entropy",
                lhs: shape,
                rhs: mask.dims(),
            });
        }
        let mask_data = mask.value();
        let count: f64 = mask_data.iter().filter(|&&m| m != 0.0).count() as f64;
        if count == 0.0 {
            return Err(PhantomError::EmptyLossMask);
        }
        let logp = self.gather_log_probs(logits, targets)?;
        // loss = −(Σ mask·logp) / count
        let masked = self.mul(&logp, &Tensor::new(&[rows], mask_data)?.reshaped_like(&logp)?)?;
        let total = self.sum_all(&masked)?;
        self.scale(&total, -1.0 / count)
    }

    // ── Reductions ──────────────────────────────────────────────────────

    /// Sum of all elements, as a single-element tensor.
    pub fn sum_all(&self, x: &Tensor) -> Result<Tensor> {
        let total: f64 = x.borrow().data.iter().sum();
        let track = self.track1(x);
        let out = Tensor::from_parts(vec![1], vec![total], track);
        if track {
            x.ensure_grad();
            let (x2, out2) = (x.clone(), out.clone());
            self.record(Box::new(move || {
                let g = match out2.borrow().grad.clone() {
                    Some(g) => g,
                    None => return,
                };
                let dx = vec![g[0]; x2.numel()];
                x2.accumulate_grad(&dx);
            }));
        }
        Ok(out)
    }

    /// Arithmetic mean of all elements, as a single-element tensor.
    pub fn mean_all(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.numel();
        if n == 0 {
            return Err(PhantomError::InvalidShape {
                op: "mean_all",
                msg: "empty tensor".into(),
            });
        }
        let s = self.sum_all(x)?;
        self.scale(&s, 1.0 / n as f64)
    }

    /// Sums over the last dimension: `[..., d] → [...]` (a lone dimension
    /// reduces to `[1]`).
    pub fn sum_lastdim(&self, x: &Tensor) -> Result<Tensor> {
        let shape = x.dims();
        if shape.is_empty() {
            return Err(PhantomError::InvalidShape {
                op: "sum_lastdim",
                msg: "rank must be >= 1".into(),
            });
        }
        let d = shape[shape.len() - 1];
        let rows = x.numel() / d;
        let out_shape = if shape.len() == 1 {
            vec![1]
        } else {
            shape[..shape.len() - 1].to_vec()
        };
        let mut out_data = vec![0.0; rows];
        {
            let xd = x.borrow();
            for r in 0..rows {
                out_data[r] = xd.data[r * d..(r + 1) * d].iter().sum();
            }
        }
        let track = self.track1(x);
        let out = Tensor::from_parts(out_shape, out_data, track);
        if track {
            x.ensure_grad();
            let (x2, out2) = (x.clone(), out.clone());
            self.record(Box::new(move || {
                let g = match out2.borrow().grad.clone() {
                    Some(g) => g,
                    None => return,
                };
                let mut dx = vec![0.0; x2.numel()];
                for r in 0..rows {
                    for i in 0..d {
                        dx[r * d + i] = g[r];
                    }
                }
                x2.accumulate_grad(&dx);
            }));
        }
        Ok(out)
    }

    // ── Structure: reshape, transpose, slicing, concatenation ───────────

    /// Reinterprets the (row-major) data under a new shape of equal size.
    pub fn reshape(&self, x: &Tensor, new_shape: &[usize]) -> Result<Tensor> {
        let numel: usize = new_shape.iter().product();
        if numel != x.numel() {
            return Err(PhantomError::InvalidShape {
                op: "reshape",
                msg: format!("cannot view {:?} as {new_shape:?}", x.dims()),
            });
        }
        let out_data = x.value();
        let track = self.track1(x);
        let out = Tensor::from_parts(new_shape.to_vec(), out_data, track);
        if track {
            x.ensure_grad();
            let (x2, out2) = (x.clone(), out.clone());
            self.record(Box::new(move || {
                let g = match out2.borrow().grad.clone() {
                    Some(g) => g,
                    None => return,
                };
                x2.accumulate_grad(&g);
            }));
        }
        Ok(out)
    }

    /// Swaps two axes (a transposing copy).
    pub fn swap_axes(&self, x: &Tensor, a: usize, b: usize) -> Result<Tensor> {
        let shape = x.dims();
        if a >= shape.len() || b >= shape.len() {
            return Err(PhantomError::InvalidShape {
                op: "swap_axes",
                msg: format!("axes ({a},{b}) out of range for {shape:?}"),
            });
        }
        let (out_shape, out_data) = swap_axes_data(&shape, &x.borrow().data, a, b);
        let track = self.track1(x);
        let out = Tensor::from_parts(out_shape.clone(), out_data, track);
        if track {
            x.ensure_grad();
            let (x2, out2) = (x.clone(), out.clone());
            self.record(Box::new(move || {
                let g = match out2.borrow().grad.clone() {
                    Some(g) => g,
                    None => return,
                };
                let (_, dx) = swap_axes_data(&out_shape, &g, a, b);
                x2.accumulate_grad(&dx);
            }));
        }
        Ok(out)
    }

    /// Takes `len` positions starting at `start` along `axis`.
    pub fn narrow(&self, x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = x.dims();
        if axis >= shape.len() {
            return Err(PhantomError::InvalidShape {
                op: "narrow",
                msg: format!("axis {axis} out of range for {shape:?}"),
            });
        }
        if start + len > shape[axis] {
            return Err(PhantomError::IndexOutOfRange {
                index: start + len,
                size: shape[axis],
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let axis_size = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut out_data = vec![0.0; outer * len * inner];
        {
            let xd = x.borrow();
            for o in 0..outer {
                for l in 0..len {
                    let src = (o * axis_size + start + l) * inner;
                    let dst = (o * len + l) * inner;
                    out_data[dst..dst + inner].copy_from_slice(&xd.data[src..src + inner]);
                }
            }
        }
        let track = self.track1(x);
        let out = Tensor::from_parts(out_shape, out_data, track);
        if track {
            x.ensure_grad();
            let (x2, out2) = (x.clone(), out.clone());
            self.record(Box::new(move || {
                let g = match out2.borrow().grad.clone() {
                    Some(g) => g,
                    None => return,
                };
                let mut dx = vec![0.0; x2.numel()];
                for o in 0..outer {
                    for l in 0..len {
                        let dst = (o * axis_size + start + l) * inner;
                        let src = (o * len + l) * inner;
                        dx[dst..dst + inner].copy_from_slice(&g[src..src + inner]);
                    }
                }
                x2.accumulate_grad(&dx);
            }));
        }
        Ok(out)
    }

    /// Concatenates along the last dimension; leading dimensions must match.
    pub fn concat_lastdim(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let ashape = a.dims();
        let bshape = b.dims();
        if ashape.len() != bshape.len()
            || ashape.is_empty()
            || ashape[..ashape.len() - 1] != bshape[..bshape.len() - 1]
        {
            return Err(PhantomError::ShapeMismatch {
                op: "concat_lastdim",
                lhs: ashape,
                rhs: bshape,
            });
        }
        let da = ashape[ashape.len() - 1];
        let db = bshape[bshape.len() - 1];
        let rows = a.numel() / da;
        let mut out_shape = ashape.clone();
        *out_shape.last_mut().unwrap() = da + db;
        let mut out_data = vec![0.0; rows * (da + db)];
        {
            let ad = a.borrow();
            let bd = b.borrow();
            for r in 0..rows {
                let dst = r * (da + db);
                out_data[dst..dst + da].copy_from_slice(&ad.data[r * da..(r + 1) * da]);
                out_data[dst + da..dst + da + db].copy_from_slice(&bd.data[r * db..(r + 1) * db]);
            }
        }
        let track = self.track2(a, b);
        let out = Tensor::from_parts(out_shape, out_data, track);
        if track {
            a.ensure_grad();
            b.ensure_grad();
            let (a2, b2, out2) = (a.clone(), b.clone(), out.clone());
            self.record(Box::new(move || {
                let g = match out2.borrow().grad.clone() {
                    Some(g) => g,
                    None => return,
                };
                if a2.requires_grad() {
                    let mut dag = vec![0.0; a2.numel()];
                    for r in 0..rows {
                        dag[r * da..(r + 1) * da]
                            .copy_from_slice(&g[r * (da + db)..r * (da + db) + da]);
                    }
                    a2.accumulate_grad(&dag);
                }
                if b2.requires_grad() {
                    let mut dbg = vec![0.0; b2.numel()];
                    for r in 0..rows {
                        dbg[r * db..(r + 1) * db]
                            .copy_from_slice(&g[r * (da + db) + da..(r + 1) * (da + db)]);
                    }
                    b2.accumulate_grad(&dbg);
                }
            }));
        }
        Ok(out)
    }

    /// Splits the (even) last dimension into two equal halves. The halves
    /// are exact copies: concatenating them back reproduces `x` bitwise.
    pub fn split_lastdim_half(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let shape = x.dims();
        let d = *shape.last().ok_or_else(|| PhantomError::InvalidShape {
            op: "split_lastdim_half",
            msg: "rank must be >= 1".into(),
        })?;
        if d % 2 != 0 {
            return Err(PhantomError::InvalidShape {
                op: "split_lastdim_half",
                msg: format!("last dimension {d} is odd"),
            });
        }
        let axis = shape.len() - 1;
        let lo = self.narrow(x, axis, 0, d / 2)?;
        let hi = self.narrow(x, axis, d / 2, d / 2)?;
        Ok((lo, hi))
    }

    /// Repeats axis 1 `rep` times in grouped order: `out[:, h] = x[:, h / rep]`.
    /// Used to expand grouped key/value heads to the query-head count.
    pub fn repeat_axis1(&self, x: &Tensor, rep: usize) -> Result<Tensor> {
        let shape = x.dims();
        if shape.len() < 2 {
            return Err(PhantomError::InvalidShape {
                op: "repeat_axis1",
                msg: format!("rank must be >= 2, got {shape:?}"),
            });
        }
        if rep == 0 {
            return Err(PhantomError::InvalidShape {
                op: "repeat_axis1",
                msg: "repeat count must be positive".into(),
            });
        }
        let d0 = shape[0];
        let d1 = shape[1];
        let inner: usize = shape[2..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[1] = d1 * rep;
        let mut out_data = vec![0.0; d0 * d1 * rep * inner];
        {
            let xd = x.borrow();
            for i0 in 0..d0 {
                for h in 0..d1 * rep {
                    let src = (i0 * d1 + h / rep) * inner;
                    let dst = (i0 * d1 * rep + h) * inner;
                    out_data[dst..dst + inner].copy_from_slice(&xd.data[src..src + inner]);
                }
            }
        }
        let track = self.track1(x);
        let out = Tensor::from_parts(out_shape, out_data, track);
        if track {
            x.ensure_grad();
            let (x2, out2) = (x.clone(), out.clone());
            self.record(Box::new(move || {
                let g = match out2.borrow().grad.clone() {
                    Some(g) => g,
                    None => return,
                };
                let mut dx = vec![0.0; x2.numel()];
                for i0 in 0..d0 {
                    for h in 0..d1 * rep {
                        let dst = (i0 * d1 + h / rep) * inner;
                        let src = (i0 * d1 * rep + h) * inner;
                        for i in 0..inner {
                            dx[dst + i] += g[src + i];
                        }
                    }
                }
                x2.accumulate_grad(&dx);
            }));
        }
        Ok(out)
    }

    /// Replaces selected rows of `base[B,T,d]` with rows of `insert[B,P,d]`:
    /// row `r`'s positions (strictly increasing, each `< T`) consume
    /// `insert[r, 0..]` in order. Rows may use fewer than `P` positions;
    /// unused insert rows receive zero gradient.
    pub fn splice_rows(
        &self,
        base: &Tensor,
        insert: &Tensor,
        positions: &[Vec<usize>],
    ) -> Result<Tensor> {
        let bshape = base.dims();
        let ishape = insert.dims();
        if bshape.len() != 3 || ishape.len() != 3 || bshape[0] != ishape[0] || bshape[2] != ishape[2]
        {
            return Err(PhantomError::ShapeMismatch {
                op: "splice_rows",
                lhs: bshape,
                rhs: ishape,
            });
        }
        let (bsz, t, d) = (bshape[0], bshape[1], bshape[2]);
        let p = ishape[1];
        if positions.len() != bsz {
            return Err(PhantomError::InvalidShape {
                op: "splice_rows",
                msg: format!("{} position lists for batch of {bsz}", positions.len()),
            });
        }
        for row in positions {
            if row.len() > p {
                return Err(PhantomError::InvalidShape {
                    op: "splice_rows",
                    msg: format!("{} positions but only {p} insert rows", row.len()),
                });
            }
            for (i, &pos) in row.iter().enumerate() {
                if pos >= t {
                    return Err(PhantomError::IndexOutOfRange { index: pos, size: t });
                }
                if i > 0 && row[i - 1] >= pos {
                    return Err(PhantomError::InvalidShape {
                        op: "splice_rows",
                        msg: "positions must be strictly increasing".into(),
                    });
                }
            }
        }
        let mut out_data = base.value();
        {
            let idata = insert.borrow();
            for (r, row) in positions.iter().enumerate() {
                for (j, &pos) in row.iter().enumerate() {
                    let dst = (r * t + pos) * d;
                    let src = (r * p + j) * d;
                    out_data[dst..dst + d].copy_from_slice(&idata.data[src..src + d]);
                }
            }
        }
        let track = self.track2(base, insert);
        let out = Tensor::from_parts(bshape, out_data, track);
        if track {
            base.ensure_grad();
            insert.ensure_grad();
            let positions = positions.to_vec();
            let (b2, i2, out2) = (base.clone(), insert.clone(), out.clone());
            self.record(Box::new(move || {
                let g = match out2.borrow().grad.clone() {
                    Some(g) => g,
                    None => return,
                };
                if b2.requires_grad() {
                    let mut db = g.clone();
                    for (r, row) in positions.iter().enumerate() {
                        for &pos in row {
                            let dst = (r * t + pos) * d;
                            for v in &mut db[dst..dst + d] {
                                *v = 0.0;
                            }
                        }
                    }
                    b2.accumulate_grad(&db);
                }
                if i2.requires_grad() {
                    let mut di = vec![0.0; i2.numel()];
                    for (r, row) in positions.iter().enumerate() {
                        for (j, &pos) in row.iter().enumerate() {
                            let src = (r * t + pos) * d;
                            let dst = (r * p + j) * d;
                            di[dst..dst + d].copy_from_slice(&g[src..src + d]);
                        }
                    }
                    i2.accumulate_grad(&di);
                }
            }));
        }
        Ok(out)
    }

    // ── Embedding and rotary positions ──────────────────────────────────

    /// Row lookup: `out[p, :] = table[ids[p], :]`, shaped `[b, t, d]`.
    pub fn embedding(&self, table: &Tensor, ids: &[usize], b: usize, t: usize) -> Result<Tensor> {
        let tshape = table.dims();
        if tshape.len() != 2 {
            return Err(PhantomError::InvalidShape {
                op: "embedding",
                msg: format!("table must be [vocab, dim], got {tshape:?}"),
            });
        }
        let (vocab, d) = (tshape[0], tshape[1]);
        if ids.len() != b * t {
            return Err(PhantomError::InvalidShape {
                op: "embedding",
                msg: format!("{} ids for b*t = {}", ids.len(), b * t),
            });
        }
        for &id in ids {
            if id >= vocab {
                return Err(PhantomError::IndexOutOfRange {
                    index: id,
                    size: vocab,
                });
            }
        }
        let mut out_data = vec![0.0; b * t * d];
        {
            let td = table.borrow();
            for (p, &id) in ids.iter().enumerate() {
                out_data[p * d..(p + 1) * d].copy_from_slice(&td.data[id * d..(id + 1) * d]);
            }
        }
        let track = self.track1(table);
        let out = Tensor::from_parts(vec![b, t, d], out_data, track);
        if track {
            table.ensure_grad();
            let ids = ids.to_vec();
            let (t2, out2) = (table.clone(), out.clone());
            self.record(Box::new(move || {
                let g = match out2.borrow().grad.clone() {
                    Some(g) => g,
                    None => return,
                };
                let mut dt = vec![0.0; t2.numel()];
                for (p, &id) in ids.iter().enumerate() {
                    for i in 0..d {
                        dt[id * d + i] += g[p * d + i];
                    }
                }
                t2.accumulate_grad(&dt);
            }));
        }
        Ok(out)
    }

    /// Rotary position encoding on `x[B, N, h, dh]` (dh even): channel pairs
    /// `(i, i + dh/2)` rotate by `positions[n] · base^(−2i/dh)`. The rotation
    /// is orthogonal, so backward applies the inverse rotation.
    pub fn rotary(&self, x: &Tensor, positions: &[usize], base: f64) -> Result<Tensor> {
        let shape = x.dims();
        if shape.len() != 4 {
            return Err(PhantomError::InvalidShape {
                op: "rotary",
                msg: format!("expected [B, N, h, dh], got {shape:?}"),
            });
        }
        let (bsz, n, h, dh) = (shape[0], shape[1], shape[2], shape[3]);
        if dh % 2 != 0 {
            return Err(PhantomError::InvalidShape {
                op: "rotary",
                msg: format!("head dimension {dh} is odd"),
            });
        }
        if positions.len() != n {
            return Err(PhantomError::InvalidShape {
                op: "rotary",
                msg: format!("{} positions for {} tokens", positions.len(), n),
            });
        }
        let half = dh / 2;
        // Precompute cos/sin per (position, pair).
        let mut cos = vec![0.0; n * half];
        let mut sin = vec![0.0; n * half];
        for (t, &pos) in positions.iter().enumerate() {
            for i in 0..half {
                let theta = (pos as f64) * base.powf(-2.0 * i as f64 / dh as f64);
                cos[t * half + i] = theta.cos();
                sin[t * half + i] = theta.sin();
            }
        }
        let rotate = move |src: &[f64], dst: &mut [f64], cos: &[f64], sin: &[f64], invert: bool| {
            for b in 0..bsz {
                for t in 0..n {
                    for hh in 0..h {
                        let off = ((b * n + t) * h + hh) * dh;
                        for i in 0..half {
                            let (c, s) = (cos[t * half + i], sin[t * half + i]);
                            let s = if invert { -s } else { s };
                            let x1 = src[off + i];
                            let x2 = src[off + half + i];
                            dst[off + i] = x1 * c - x2 * s;
                            dst[off + half + i] = x1 * s + x2 * c;
                        }
                    }
                }
            }
        };
        let mut out_data = vec![0.0; x.numel()];
        rotate(&x.borrow().data, &mut out_data, &cos, &sin, false);
        let track = self.track1(x);
        let out = Tensor::from_parts(shape, out_data, track);
        if track {
            x.ensure_grad();
            let (x2, out2) = (x.clone(), out.clone());
            self.record(Box::new(move || {
                let g = match out2.borrow().grad.clone() {
                    Some(g) => g,
                    None => return,
                };
                let mut dx = vec![0.0; g.len()];
                rotate(&g, &mut dx, &cos, &sin, true);
                x2.accumulate_grad(&dx);
            }));
        }
        Ok(out)
    }
}

impl Tensor {
    /// Views this tensor's data under the shape of `like` (sizes must agree).
    /// Plumbing used by ops that build constants matching another tensor.
    fn reshaped_like(&self, like: &Tensor) -> Result<Tensor> {
        if self.numel() != like.numel() {
            return Err(PhantomError::InvalidShape {
                op: "reshaped_like",
                msg: format!("{} vs {} elements", self.numel(), like.numel()),
            });
        }
        Ok(Tensor::from_parts(like.dims(), self.value(), false))
    }
}

fn swap_axes_data(shape: &[usize], data: &[f64], a: usize, b: usize) -> (Vec<usize>, Vec<f64>) {
    let mut out_shape = shape.to_vec();
    out_shape.swap(a, b);
    if a == b {
        return (out_shape, data.to_vec());
    }
    let n = shape.len();
    let mut in_strides = vec![1usize; n];
    for i in (0..n - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut out_strides_in = out_shape.clone();
    // out_strides_in[i] = stride in the INPUT for output axis i
    for i in 0..n {
        let src_axis = if i == a {
            b
        } else if i == b {
            a
        } else {
            i
        };
        out_strides_in[i] = in_strides[src_axis];
    }
    let numel = data.len();
    let mut out = vec![0.0; numel];
    let mut coords = vec![0usize; n];
    for (flat, slot) in out.iter_mut().enumerate() {
        let mut f = flat;
        for i in (0..n).rev() {
            coords[i] = f % out_shape[i];
            f /= out_shape[i];
        }
        let mut src = 0;
        for i in 0..n {
            src += coords[i] * out_strides_in[i];
        }
        *slot = data[src];
    }
    (out_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::MASK_VALUE;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!(
                (x - y).abs() <= tol,
                "element {i}: {x} vs {y} (tol {tol})"
            );
        }
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::no_grad();
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let eye = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = tape.matmul(&a, &eye).unwrap();
        assert_eq!(out.value(), a.value());
    }

    #[test]
    fn matmul_batched_broadcast() {
        // a: [2, 1, 2, 3], b: [3, 2] → out: [2, 1, 2, 2]
        let tape = Tape::no_grad();
        let a = Tensor::new(&[2, 1, 2, 3], (0..12).map(|v| v as f64).collect()).unwrap();
        let b = Tensor::new(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let out = tape.matmul(&a, &b).unwrap();
        assert_eq!(out.dims(), vec![2, 1, 2, 2]);
        // First row of first cell: [0,1,2] → [0*1+2*1, 1+2] = [2, 3]
        assert_eq!(out.value()[0..2], [2.0, 3.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let tape = Tape::no_grad();
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        assert!(matches!(
            tape.matmul(&a, &b),
            Err(PhantomError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn matmul_grads_match_hand_values() {
        // y = sum(a·b): dy/da = ones·bᵀ, dy/db = aᵀ·ones
        let tape = Tape::new();
        let a = Tensor::param(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::param(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = tape.matmul(&a, &b).unwrap();
        let y = tape.sum_all(&c).unwrap();
        tape.backward(&y).unwrap();
        assert_close(&a.grad().unwrap(), &[11.0, 15.0, 11.0, 15.0], 1e-12);
        assert_close(&b.grad().unwrap(), &[4.0, 4.0, 6.0, 6.0], 1e-12);
    }

    #[test]
    fn add_broadcasts_bias_and_mask_shapes() {
        let tape = Tape::no_grad();
        let x = Tensor::new(&[2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        let bias = Tensor::new(&[2], vec![10.0, 20.0]).unwrap();
        let out = tape.add(&x, &bias).unwrap();
        assert_eq!(out.value()[0..4], [10.0, 21.0, 12.0, 23.0]);

        // [B,1,N,M] onto [B,h,N,M]
        let scores = Tensor::zeros(&[2, 3, 2, 2]);
        let mask = Tensor::new(&[2, 1, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        let out = tape.add(&scores, &mask).unwrap();
        let v = out.value();
        for h in 0..3 {
            assert_eq!(v[h * 4..h * 4 + 4], [0.0, 1.0, 2.0, 3.0]);
        }
    }

    #[test]
    fn add_broadcast_backward_reduces() {
        let tape = Tape::new();
        let x = Tensor::param(&[2, 3], vec![0.0; 6]).unwrap();
        let b = Tensor::param(&[3], vec![0.0; 3]).unwrap();
        let y = tape.add(&x, &b).unwrap();
        let s = tape.sum_all(&y).unwrap();
        tape.backward(&s).unwrap();
        assert_close(&b.grad().unwrap(), &[2.0, 2.0, 2.0], 1e-12);
        assert_close(&x.grad().unwrap(), &[1.0; 6], 1e-12);
    }

    #[test]
    fn broadcast_mul_weights_rows() {
        let tape = Tape::new();
        let v = Tensor::param(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::param(&[2], vec![10.0, 100.0]).unwrap();
        let out = tape.broadcast_mul(&v, &w).unwrap();
        assert_eq!(out.value(), vec![10.0, 20.0, 300.0, 400.0]);
        let s = tape.sum_all(&out).unwrap();
        tape.backward(&s).unwrap();
        assert_close(&w.grad().unwrap(), &[3.0, 7.0], 1e-12);
        assert_close(&v.grad().unwrap(), &[10.0, 10.0, 100.0, 100.0], 1e-12);
    }

    #[test]
    fn softmax_rows_live_on_simplex() {
        let tape = Tape::no_grad();
        let x = Tensor::new(&[2, 4], vec![0.3, -1.2, 5.0, 0.0, 2.0, 2.0, 2.0, 2.0]).unwrap();
        let y = tape.softmax_lastdim(&x, None).unwrap();
        let v = y.value();
        for r in 0..2 {
            let row = &v[r * 4..(r + 1) * 4];
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
        assert_close(&v[4..8], &[0.25; 4], 1e-15);
    }

    #[test]
    fn softmax_shift_invariance() {
        let tape = Tape::no_grad();
        let x = Tensor::new(&[1, 3], vec![0.1, 0.7, -0.4]).unwrap();
        let shifted = tape.add_scalar(&x, 123.456).unwrap();
        let a = tape.softmax_lastdim(&x, None).unwrap();
        let b = tape.softmax_lastdim(&shifted, None).unwrap();
        assert_close(&a.value(), &b.value(), 1e-12);
    }

    #[test]
    fn softmax_mask_zeroes_and_renormalizes() {
        let tape = Tape::no_grad();
        let x = Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let mask = Tensor::new(&[1, 3], vec![0.0, MASK_VALUE, 0.0]).unwrap();
        let y = tape.softmax_lastdim(&x, Some(&mask)).unwrap();
        let v = y.value();
        assert_eq!(v[1], 0.0);
        let e1 = 1.0f64.exp();
        let e3 = 3.0f64.exp();
        assert_close(&[v[0], v[2]], &[e1 / (e1 + e3), e3 / (e1 + e3)], 1e-12);
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let tape = Tape::no_grad();
        let x = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let mask = Tensor::new(&[1, 2], vec![MASK_VALUE, MASK_VALUE]).unwrap();
        assert!(matches!(
            tape.softmax_lastdim(&x, Some(&mask)),
            Err(PhantomError::FullyMaskedRow)
        ));
    }

    #[test]
    fn softmax_backward_rows_sum_to_zero() {
        let tape = Tape::new();
        let x = Tensor::param(&[2, 3], vec![0.3, -0.1, 0.9, 1.0, 2.0, -3.0]).unwrap();
        let y = tape.softmax_lastdim(&x, None).unwrap();
        let w = Tensor::new(&[2, 3], vec![0.2, -1.0, 0.5, 2.0, 0.0, 1.0]).unwrap();
        let s = tape.sum_all(&tape.mul(&y, &w).unwrap()).unwrap();
        tape.backward(&s).unwrap();
        let g = x.grad().unwrap();
        for r in 0..2 {
            let sum: f64 = g[r * 3..(r + 1) * 3].iter().sum();
            assert!(sum.abs() < 1e-12, "row {r} grad sum {sum}");
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let tape = Tape::no_grad();
        let logits = Tensor::zeros(&[1, 2, 16]);
        let mask = Tensor::ones(&[1, 2]);
        let loss = tape.cross_entropy(&logits, &[3, 11], &mask).unwrap();
        assert!((loss.item() - (16.0f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_respects_mask() {
        let tape = Tape::no_grad();
        let mut data = vec![0.0; 2 * 4];
        data[0] = 50.0; // position 0 puts all mass on class 0
        let logits = Tensor::new(&[1, 2, 4], data).unwrap();
        let mask = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let loss = tape.cross_entropy(&logits, &[0, 1], &mask).unwrap();
        assert!(loss.item() < 1e-9, "masked-out position leaked into loss");
    }

    #[test]
    fn cross_entropy_empty_mask_errors() {
        let tape = Tape::no_grad();
        let logits = Tensor::zeros(&[1, 2, 4]);
        let mask = Tensor::zeros(&[1, 2]);
        assert!(matches!(
            tape.cross_entropy(&logits, &[0, 0], &mask),
            Err(PhantomError::EmptyLossMask)
        ));
    }

    #[test]
    fn gather_log_probs_matches_direct_evaluation() {
        let tape = Tape::no_grad();
        let logits = Tensor::new(&[1, 2, 3], vec![0.1, 0.2, 0.3, -1.0, 2.0, 0.5]).unwrap();
        let lp = tape.gather_log_probs(&logits, &[2, 1]).unwrap();
        let v = logits.value();
        for (r, &tgt) in [2usize, 1].iter().enumerate() {
            let row = &v[r * 3..(r + 1) * 3];
            let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
            assert!((lp.value()[r] - (row[tgt] - lse)).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_then_split_is_identity() {
        let tape = Tape::no_grad();
        let a = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(&[2, 3], vec![-1.0, -2.0, -3.0, -4.0, -5.0, -6.0]).unwrap();
        let cat = tape.concat_lastdim(&a, &b).unwrap();
        assert_eq!(cat.dims(), vec![2, 6]);
        let (lo, hi) = tape.split_lastdim_half(&cat).unwrap();
        assert_eq!(lo.value(), a.value());
        assert_eq!(hi.value(), b.value());
    }

    #[test]
    fn split_routes_gradients_to_matching_half() {
        let tape = Tape::new();
        let x = Tensor::param(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (lo, _hi) = tape.split_lastdim_half(&x).unwrap();
        let s = tape.sum_all(&lo).unwrap();
        tape.backward(&s).unwrap();
        assert_close(&x.grad().unwrap(), &[1.0, 1.0, 0.0, 0.0], 1e-15);
    }

    #[test]
    fn swap_axes_round_trips() {
        let tape = Tape::no_grad();
        let x = Tensor::new(&[2, 3, 4], (0..24).map(|v| v as f64).collect()).unwrap();
        let y = tape.swap_axes(&x, 0, 2).unwrap();
        assert_eq!(y.dims(), vec![4, 3, 2]);
        let z = tape.swap_axes(&y, 0, 2).unwrap();
        assert_eq!(z.value(), x.value());
    }

    #[test]
    fn repeat_axis1_groups_heads() {
        let tape = Tape::new();
        let x = Tensor::param(&[1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = tape.repeat_axis1(&x, 2).unwrap();
        assert_eq!(y.dims(), vec![1, 4, 1, 2]);
        assert_eq!(y.value(), vec![1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0]);
        let s = tape.sum_all(&y).unwrap();
        tape.backward(&s).unwrap();
        assert_close(&x.grad().unwrap(), &[2.0; 4], 1e-15);
    }

    #[test]
    fn splice_rows_overwrites_and_routes_gradients() {
        let tape = Tape::new();
        let base = Tensor::param(&[1, 3, 2], vec![0.0; 6]).unwrap();
        let insert = Tensor::param(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = tape
            .splice_rows(&base, &insert, &[vec![0, 2]])
            .unwrap();
        assert_eq!(out.value(), vec![1.0, 2.0, 0.0, 0.0, 3.0, 4.0]);
        let s = tape.sum_all(&out).unwrap();
        tape.backward(&s).unwrap();
        assert_close(&base.grad().unwrap(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0], 1e-15);
        assert_close(&insert.grad().unwrap(), &[1.0; 4], 1e-15);
    }

    #[test]
    fn splice_rows_with_no_positions_is_identity() {
        let tape = Tape::no_grad();
        let base = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let insert = Tensor::zeros(&[1, 0, 2]);
        let out = tape.splice_rows(&base, &insert, &[vec![]]).unwrap();
        assert_eq!(out.value(), base.value());
    }

    #[test]
    fn embedding_looks_up_and_scatters_gradient() {
        let tape = Tape::new();
        let table = Tensor::param(&[3, 2], vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0]).unwrap();
        let out = tape.embedding(&table, &[2, 0, 2], 1, 3).unwrap();
        assert_eq!(out.value(), vec![20.0, 21.0, 0.0, 1.0, 20.0, 21.0]);
        let s = tape.sum_all(&out).unwrap();
        tape.backward(&s).unwrap();
        assert_close(&table.grad().unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0], 1e-15);
    }

    #[test]
    fn rotary_position_zero_is_identity_and_norm_preserved() {
        let tape = Tape::no_grad();
        let x = Tensor::new(&[1, 2, 1, 4], vec![1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = tape.rotary(&x, &[0, 7], 10000.0).unwrap();
        let v = y.value();
        assert_close(&v[0..4], &[1.0, 2.0, 3.0, 4.0], 1e-15);
        let n_in: f64 = (1.0f64 + 4.0 + 9.0 + 16.0).sqrt();
        let n_out: f64 = v[4..8].iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!((n_in - n_out).abs() < 1e-12);
    }

    #[test]
    fn rotary_relative_phase_matches_complex_rotation() {
        // q at position m against k at position n depends only on m−n:
        // dot(rot(q,m), rot(k,n)) = Re⟨q, k·e^{i(m−n)θ}⟩ per channel pair.
        let tape = Tape::no_grad();
        let base = 10000.0;
        let q = vec![0.3, -1.2, 0.8, 0.4];
        let k = vec![1.1, 0.2, -0.7, 0.9];
        let dh = 4;
        let half = dh / 2;
        let (m, n) = (9usize, 3usize);
        let qx = Tensor::new(&[1, 1, 1, dh], q.clone()).unwrap();
        let kx = Tensor::new(&[1, 1, 1, dh], k.clone()).unwrap();
        let qr = tape.rotary(&qx, &[m], base).unwrap();
        let kr = tape.rotary(&kx, &[n], base).unwrap();
        let dot: f64 = qr
            .value()
            .iter()
            .zip(kr.value())
            .map(|(a, b)| a * b)
            .sum();
        // Direct complex evaluation with relative angle (m−n)·θ_i.
        let mut want = 0.0;
        for i in 0..half {
            let theta = ((m - n) as f64) * (base as f64).powf(-2.0 * i as f64 / dh as f64);
            let (qc_re, qc_im) = (q[i], q[i + half]);
            let (kc_re, kc_im) = (k[i], k[i + half]);
            // Re[(q)(conj k) e^{i·rel}] with rel = (m−n)θ
            let re = qc_re * kc_re + qc_im * kc_im;
            let im = qc_im * kc_re - qc_re * kc_im;
            want += re * theta.cos() - im * theta.sin();
        }
        assert!((dot - want).abs() < 1e-10, "{dot} vs {want}");
    }

    #[test]
    fn gradient_accumulates_across_multiple_uses() {
        let tape = Tape::new();
        let x = Tensor::param(&[1], vec![3.0]).unwrap();
        let y = tape.mul(&x, &x).unwrap(); // x²
        let z = tape.add(&y, &x).unwrap(); // x² + x
        tape.backward(&z).unwrap();
        assert_close(&x.grad().unwrap(), &[7.0], 1e-12); // 2x + 1
    }

    #[test]
    fn backward_of_sum_equals_sum_of_backwards() {
        let data = vec![0.4, -0.3, 1.2, 0.7];
        let run = |pick: Option<usize>| -> Vec<f64> {
            let tape = Tape::new();
            let x = Tensor::param(&[2, 2], data.clone()).unwrap();
            let y = tape.mul(&x, &x).unwrap();
            let a = tape.narrow(&y, 1, 0, 1).unwrap();
            let b = tape.narrow(&y, 1, 1, 1).unwrap();
            let (sa, sb) = (tape.sum_all(&a).unwrap(), tape.sum_all(&b).unwrap());
            let root = match pick {
                None => tape.add(&sa, &sb).unwrap(),
                Some(0) => sa,
                _ => sb,
            };
            tape.backward(&root).unwrap();
            x.grad().unwrap()
        };
        let joint = run(None);
        let left = run(Some(0));
        let right = run(Some(1));
        let summed: Vec<f64> = left.iter().zip(&right).map(|(a, b)| a + b).collect();
        assert_close(&joint, &summed, 1e-12);
    }

    #[test]
    fn log_sigmoid_at_zero_is_minus_ln_two() {
        let tape = Tape::no_grad();
        let x = Tensor::new(&[1], vec![0.0]).unwrap();
        let y = tape.log_sigmoid(&x).unwrap();
        assert!((y.item() + std::f64::consts::LN_2).abs() < 1e-15);
        // Stays finite far into the tails.
        let t = tape
            .log_sigmoid(&Tensor::new(&[2], vec![-745.0, 745.0]).unwrap())
            .unwrap();
        assert!(t.value().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn sigmoid_reference_value() {
        let tape = Tape::no_grad();
        let y = tape
            .sigmoid(&Tensor::new(&[1], vec![-0.5]).unwrap())
            .unwrap();
        assert!((y.item() - 0.377541).abs() < 1e-6);
    }

    #[test]
    fn gelu_reference_values() {
        let tape = Tape::no_grad();
        let x = Tensor::new(&[3], vec![0.0, 1.0, -1.0]).unwrap();
        let y = tape.gelu(&x).unwrap();
        let v = y.value();
        assert!((v[0] - 0.0).abs() < 1e-15);
        // x·Φ(x) at ±1 with Φ(1) = 0.8413447460685429
        assert!((v[1] - 0.8413447460685429).abs() < 1e-12);
        assert!((v[2] + (1.0 - 0.8413447460685429)).abs() < 1e-12);
    }

    #[test]
    fn narrow_out_of_range_errors() {
        let tape = Tape::no_grad();
        let x = Tensor::zeros(&[2, 3]);
        assert!(matches!(
            tape.narrow(&x, 1, 2, 2),
            Err(PhantomError::IndexOutOfRange { .. })
        ));
    }
}
