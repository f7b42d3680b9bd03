//! Post-training weight quantization.
//!
//! Three paths share the MX block quantizer from [`crate::formats`]:
//! round-to-nearest, per-row clipping search, and Hessian-guided blockwise
//! quantization with clipping search and error propagation into the
//! columns not yet quantized. Activation rotation applies an orthonormal
//! Hadamard transform before the activation quantizer and undoes it after.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compiler::{rope_tables, DecoderWeights, ModelSpec, RMS_EPS};
use crate::formats::{dequantize_block, fake_quantize_row, fwht_in_place, quantize_block, round_minifloat, DataFormat, FormatError, MXTensor};

#[derive(Debug, Error)]
pub enum QuantError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("Gram + {lambda}·I is not positive definite (K = {k}); calibration may be degenerate")]
    NotPositiveDefinite { k: usize, lambda: f64 },
    #[error("shape: {0}")]
    Shape(String),
    #[error("invalid plan: {0}")]
    Plan(String),
}

pub type Result<T> = std::result::Result<T, QuantError>;

pub const DEFAULT_PERCENTILES: [f64; 7] = [0.5, 0.6, 0.7, 0.8, 0.9, 0.99, 1.0];
pub const DEFAULT_DAMPING: f64 = 0.01;

/// Calibration inputs of one linear layer, row-major `rows × cols`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub layer_id: String,
    pub x: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl CalibrationSet {
    pub fn new(layer_id: impl Into<String>, x: Vec<f64>, rows: usize, cols: usize) -> Result<CalibrationSet> {
        if rows == 0 || x.len() != rows * cols {
            return Err(QuantError::Shape(format!("calibration {} values for {rows}×{cols}", x.len())));
        }
        Ok(CalibrationSet { layer_id: layer_id.into(), x, rows, cols })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantPlan {
    pub weight_fmt: DataFormat,
    pub act_fmt: DataFormat,
    pub kv_fmt: DataFormat,
    pub percentiles: Vec<f64>,
    pub damping: f64,
    pub rotated_layers: BTreeSet<String>,
}

impl Default for QuantPlan {
    fn default() -> Self {
        QuantPlan {
            weight_fmt: DataFormat::mxint(4, 16),
            act_fmt: DataFormat::mxint(8, 16),
            kv_fmt: DataFormat::mxint(8, 16),
            percentiles: DEFAULT_PERCENTILES.to_vec(),
            damping: DEFAULT_DAMPING,
            rotated_layers: BTreeSet::new(),
        }
    }
}

impl QuantPlan {
    pub fn validate(&self) -> Result<()> {
        for f in [self.weight_fmt, self.act_fmt, self.kv_fmt] {
            f.validate()?;
            if !f.is_mx() {
                return Err(QuantError::Plan(format!("{f} is not an MX format")));
            }
        }
        if self.percentiles.is_empty() {
            return Err(QuantError::Plan("empty percentile set".into()));
        }
        if let Some(p) = self.percentiles.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
            return Err(QuantError::Plan(format!("percentile {p} outside (0, 1]")));
        }
        if !(self.damping > 0.0 && self.damping.is_finite()) {
            return Err(QuantError::Plan(format!("damping {} must be positive", self.damping)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    /// `N × K` weights.
    pub q: MXTensor,
    /// Scaled errors of the last block, `N × B`.
    pub e: Vec<f64>,
    /// Chosen clip fraction, `N × blocks`.
    pub percentiles: Vec<f64>,
}

impl QuantizedLayer {
    pub fn weights(&self) -> Vec<f64> {
        self.q.dequantize().expect("codes come from the quantizer")
    }

    pub fn blocks(&self) -> usize {
        self.q.padded_inner() / self.q.format.block_size as usize
    }
}

/// Upper-triangular `U` with `UᵀU = (2XᵀX + λI)⁻¹`, `λ = damping · mean(diag XᵀX)`.
pub fn hessian_inverse_cholesky(x: &[f64], m: usize, k: usize, damping: f64) -> Result<DMatrix<f64>> {
    if k == 0 || m == 0 || x.len() != m * k {
        return Err(QuantError::Shape(format!("calibration {} values for {m}×{k}", x.len())));
    }
    let xm = DMatrix::from_row_slice(m, k, x);
    let gram = xm.transpose() * &xm;
    let lambda = damping * gram.diagonal().mean();
    let mut h = gram * 2.0;
    for i in 0..k {
        h[(i, i)] += lambda;
    }
    let bad = || QuantError::NotPositiveDefinite { k, lambda };
    let hinv = h.cholesky().ok_or_else(bad)?.inverse();
    // symmetrize before the second factorization
    let hinv = (&hinv + hinv.transpose()) * 0.5;
    Ok(hinv.cholesky().ok_or_else(bad)?.l().transpose())
}

/// Result of the clipping search over one column block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockChoice {
    /// Dequantized block, `N × B`.
    pub q: Vec<f64>,
    pub codes: Vec<u32>,
    pub exponents: Vec<i32>,
    pub p: Vec<f64>,
    pub err: Vec<f64>,
}

/// `‖Xb·dᵀ‖²` for one row difference `d`.
pub fn output_error(xb: &[f64], d: &[f64]) -> f64 {
    xb.chunks(d.len()).map(|r| r.iter().zip(d).map(|(a, b)| a * b).sum::<f64>().powi(2)).sum()
}

/// Per row of `wb` (`N × B`), the clip fraction in `p` minimizing the
/// output error on `xb` (`M × B`). Equal errors keep the larger fraction.
pub fn search_block_clipping(wb: &[f64], xb: &[f64], fmt: DataFormat, p: &[f64]) -> Result<BlockChoice> {
    let b = fmt.block_size as usize;
    if wb.len() % b != 0 || xb.len() % b != 0 || p.is_empty() {
        return Err(QuantError::Shape(format!("block width must be {b} and P non-empty")));
    }
    let mut order = p.to_vec();
    order.sort_by(|a, b| b.total_cmp(a));
    let n = wb.len() / b;
    let mut out = BlockChoice { q: vec![0.0; n * b], codes: vec![0; n * b], exponents: vec![0; n], p: vec![0.0; n], err: vec![0.0; n] };
    for i in 0..n {
        let row = &wb[i * b..(i + 1) * b];
        let mut best: Option<(f64, f64, Vec<u32>, i32, Vec<f64>)> = None;
        for &pp in &order {
            let (codes, e) = quantize_block(row, fmt, pp)?;
            let q = dequantize_block(&codes, e, fmt)?;
            let d: Vec<f64> = row.iter().zip(&q).map(|(a, b)| a - b).collect();
            let err = output_error(xb, &d);
            if best.as_ref().is_none_or(|bst| err < bst.0) {
                best = Some((err, pp, codes, e, q));
            }
        }
        let (err, pp, codes, e, q) = best.unwrap();
        out.q[i * b..(i + 1) * b].copy_from_slice(&q);
        out.codes[i * b..(i + 1) * b].copy_from_slice(&codes);
        out.exponents[i] = e;
        out.p[i] = pp;
        out.err[i] = err;
    }
    Ok(out)
}

fn pad_cols(a: &[f64], rows: usize, k: usize, kp: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * kp];
    for r in 0..rows {
        out[r * kp..r * kp + k].copy_from_slice(&a[r * k..(r + 1) * k]);
    }
    out
}

fn block_cols(a: &[f64], rows: usize, kp: usize, c0: usize, b: usize) -> Vec<f64> {
    (0..rows).flat_map(|r| a[r * kp + c0..r * kp + c0 + b].iter().copied()).collect()
}

fn check_layer(w: &[f64], n: usize, k: usize, calib: &CalibrationSet) -> Result<()> {
    if w.len() != n * k || calib.cols != k {
        return Err(QuantError::Shape(format!("weights {} for {n}×{k}, calibration width {}", w.len(), calib.cols)));
    }
    Ok(())
}

fn quantize_blocks(w: &[f64], n: usize, k: usize, calib: &CalibrationSet, fmt: DataFormat, p: &[f64], factor: Option<&DMatrix<f64>>) -> Result<QuantizedLayer> {
    check_layer(w, n, k, calib)?;
    fmt.validate()?;
    let b = fmt.block_size as usize;
    let kp = k.div_ceil(b) * b;
    let nb = kp / b;
    let mut wk = pad_cols(w, n, k, kp);
    let x = pad_cols(&calib.x, calib.rows, k, kp);
    let mut codes = vec![0u32; n * kp];
    let mut scales = vec![0i8; n * nb];
    let mut pct = vec![0.0; n * nb];
    let mut e = vec![0.0; n * b];
    for blk in 0..nb {
        let c0 = blk * b;
        let wb = block_cols(&wk, n, kp, c0, b);
        let xb = block_cols(&x, calib.rows, kp, c0, b);
        let ch = search_block_clipping(&wb, &xb, fmt, p)?;
        for i in 0..n {
            codes[i * kp + c0..i * kp + c0 + b].copy_from_slice(&ch.codes[i * b..(i + 1) * b]);
            scales[i * nb + blk] = ch.exponents[i] as i8;
            pct[i * nb + blk] = ch.p[i];
        }
        let Some(u) = factor else { continue };
        for i in 0..n {
            for c in 0..b {
                e[i * b + c] = (wb[i * b + c] - ch.q[i * b + c]) / u[(c0 + c, c0 + c)];
            }
        }
        for i in 0..n {
            for j in c0 + b..kp {
                let mut s = 0.0;
                for c in 0..b {
                    s += e[i * b + c] * u[(c0 + c, j)];
                }
                wk[i * kp + j] -= s;
            }
        }
    }
    if factor.is_none() {
        // E is the raw last-block error when nothing is propagated
        for i in 0..n {
            for c in 0..b {
                let idx = i * kp + kp - b + c;
                let q = fmt.decode_element(codes[idx])? * f64::powi(2.0, scales[i * nb + nb - 1] as i32);
                e[i * b + c] = wk[idx] - q;
            }
        }
    }
    let q = MXTensor { shape: vec![n, k], format: fmt, codes, scales };
    Ok(QuantizedLayer { q, e, percentiles: pct })
}

/// Hessian-guided blockwise quantization with per-row clipping search.
/// `w` is `N × K`; a partial last block is zero-padded.
pub fn gptq_quantize_layer(w: &[f64], n: usize, k: usize, calib: &CalibrationSet, fmt: DataFormat, p: &[f64], damping: f64) -> Result<QuantizedLayer> {
    check_layer(w, n, k, calib)?;
    let b = fmt.block_size as usize;
    let kp = k.div_ceil(b) * b;
    let u = hessian_inverse_cholesky(&pad_cols(&calib.x, calib.rows, k, kp), calib.rows, kp, damping)?;
    quantize_blocks(w, n, k, calib, fmt, p, Some(&u))
}

/// Clipping search alone: every block is chosen against the calibration
/// inputs but no error is propagated.
pub fn clip_quantize_layer(w: &[f64], n: usize, k: usize, calib: &CalibrationSet, fmt: DataFormat, p: &[f64]) -> Result<QuantizedLayer> {
    quantize_blocks(w, n, k, calib, fmt, p, None)
}

/// Round-to-nearest at full range, `w` is `N × K`.
pub fn rtn_quantize(w: &[f64], n: usize, k: usize, fmt: DataFormat) -> Result<MXTensor> {
    if w.len() != n * k {
        return Err(QuantError::Shape(format!("weights {} for {n}×{k}", w.len())));
    }
    Ok(MXTensor::quantize(w, &[n, k], fmt)?)
}

/// `‖X·Wᵀ − X·Qᵀ‖_F` with `X` `M × K` and `W`, `Q` `N × K`.
pub fn layer_output_error(x: &[f64], m: usize, w: &[f64], q: &[f64], n: usize, k: usize) -> f64 {
    let d: Vec<f64> = w.iter().zip(q).map(|(a, b)| a - b).collect();
    let xm = DMatrix::from_row_slice(m, k, x);
    let dm = DMatrix::from_row_slice(n, k, &d);
    (xm * dm.transpose()).norm()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Rowwise orthonormal Hadamard transform of `a` (`rows × cols`).
pub fn rotate_activations(a: &[f64], cols: usize, _direction: Direction) -> Result<Vec<f64>> {
    // H is symmetric and orthonormal, so both directions apply the same map
    let mut out = a.to_vec();
    for row in out.chunks_mut(cols.max(1)) {
        fwht_in_place(row)?;
    }
    Ok(out)
}

/// Activation quantizer as the GEMM sees it, optionally through rotation.
pub fn quantize_activations(a: &[f64], cols: usize, fmt: DataFormat, rotate: bool) -> Result<Vec<f64>> {
    let mut v = if rotate { rotate_activations(a, cols, Direction::Forward)? } else { a.to_vec() };
    for row in v.chunks_mut(cols) {
        fake_quantize_row(row, &fmt, 1.0)?;
    }
    if rotate {
        v = rotate_activations(&v, cols, Direction::Inverse)?;
    }
    Ok(v)
}

/// A named projection, `n × k` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    pub name: String,
    pub w: Vec<f64>,
    pub n: usize,
    pub k: usize,
}

/// Mean squared output error of `Q_act(X)·Q_w(W)ᵀ` against `X·Wᵀ`.
pub fn activation_mse(layer: &LinearLayer, calib: &CalibrationSet, act: DataFormat, weight: DataFormat, rotate: bool) -> Result<f64> {
    check_layer(&layer.w, layer.n, layer.k, calib)?;
    let wq = MXTensor::quantize(&layer.w, &[layer.n, layer.k], weight)?.dequantize()?;
    let xq = quantize_activations(&calib.x, calib.cols, act, rotate)?;
    let xm = DMatrix::from_row_slice(calib.rows, calib.cols, &calib.x);
    let xqm = DMatrix::from_row_slice(calib.rows, calib.cols, &xq);
    let wm = DMatrix::from_row_slice(layer.n, layer.k, &layer.w);
    let wqm = DMatrix::from_row_slice(layer.n, layer.k, &wq);
    let d = xm * wm.transpose() - xqm * wqm.transpose();
    Ok(d.norm_squared() / d.len() as f64)
}

/// Layers whose output error strictly drops when their input activations
/// are rotated. Layers without a calibration set are skipped.
pub fn select_rotation_layers(layers: &[LinearLayer], calib: &[CalibrationSet], act: DataFormat, weight: DataFormat) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    for l in layers {
        let Some(c) = calib.iter().find(|c| c.layer_id == l.name) else { continue };
        if activation_mse(l, c, act, weight, true)? < activation_mse(l, c, act, weight, false)? {
            out.insert(l.name.clone());
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Decoder-level helpers

pub const PROJECTIONS: [&str; 7] = ["q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj"];

fn layer_name(l: usize, p: &str) -> String {
    format!("layers.{l}.{p}")
}

/// Every projection of the decoder with its `(n, k)`, in execution order.
pub fn decoder_layers(spec: &ModelSpec, w: &DecoderWeights) -> Vec<LinearLayer> {
    let (d, f, kvd) = (spec.hidden, spec.ffn_dim, spec.kv_heads * spec.head_dim);
    let mut out = Vec::new();
    for (l, lw) in w.layers.iter().enumerate() {
        let mats = [(&lw.wq, d, d), (&lw.wk, kvd, d), (&lw.wv, kvd, d), (&lw.wo, d, d), (&lw.w_gate, f, d), (&lw.w_up, f, d), (&lw.w_down, d, f)];
        for (p, (m, n, k)) in PROJECTIONS.iter().zip(mats) {
            out.push(LinearLayer { name: layer_name(l, p), w: m.clone(), n, k });
        }
    }
    out.push(LinearLayer { name: "lm_head".into(), w: w.lm_head.clone(), n: spec.vocab, k: d });
    out
}

fn weight_mut<'a>(w: &'a mut DecoderWeights, name: &str) -> Option<&'a mut Vec<f64>> {
    if name == "lm_head" {
        return Some(&mut w.lm_head);
    }
    let rest = name.strip_prefix("layers.")?;
    let (l, p) = rest.split_once('.')?;
    let lw = w.layers.get_mut(l.parse::<usize>().ok()?)?;
    Some(match p {
        "q_proj" => &mut lw.wq,
        "k_proj" => &mut lw.wk,
        "v_proj" => &mut lw.wv,
        "o_proj" => &mut lw.wo,
        "gate_proj" => &mut lw.w_gate,
        "up_proj" => &mut lw.w_up,
        "down_proj" => &mut lw.w_down,
        _ => return None,
    })
}

/// Numerics applied by [`forward`]; `None` fields are exact.
#[derive(Debug, Clone, Default)]
pub struct Emulation {
    pub act: Option<DataFormat>,
    pub kv: Option<DataFormat>,
    pub fp: Option<DataFormat>,
    pub rotated: BTreeSet<String>,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Vec<f64>,
    /// Input activations of every projection, keyed by layer name.
    pub inputs: BTreeMap<String, Vec<f64>>,
}

/// Double-precision decoder pass with optional format emulation at the
/// GEMM inputs, the KV cache and every intermediate result.
pub fn forward(spec: &ModelSpec, w: &DecoderWeights, tokens: &[usize], em: &Emulation) -> Result<Forward> {
    let (t, d, hd, f) = (tokens.len(), spec.hidden, spec.head_dim, spec.ffn_dim);
    let kvd = spec.kv_heads * hd;
    let round = |v: &mut [f64]| {
        if let Some(fp) = em.fp {
            let mx = fp.max_value();
            v.iter_mut().for_each(|x| *x = round_minifloat(x.clamp(-mx, mx), fp));
        }
    };
    let mut inputs = BTreeMap::new();
    let mut linear = |name: String, x: &[f64], wm: &[f64], n: usize, k: usize| -> Result<Vec<f64>> {
        inputs.insert(name.clone(), x.to_vec());
        let xq = match em.act {
            Some(a) => quantize_activations(x, k, a, em.rotated.contains(&name))?,
            None => x.to_vec(),
        };
        let xm = DMatrix::from_row_slice(x.len() / k, k, &xq);
        let wmat = DMatrix::from_row_slice(n, k, wm);
        let y = xm * wmat.transpose();
        let mut out: Vec<f64> = y.transpose().as_slice().to_vec();
        round(&mut out);
        Ok(out)
    };
    let rms = |x: &[f64], g: &[f64]| -> Vec<f64> {
        let mut out: Vec<f64> = x
            .chunks(d)
            .flat_map(|r| {
                let s = (r.iter().map(|v| v * v).sum::<f64>() / d as f64 + RMS_EPS).sqrt();
                r.iter().zip(g).map(move |(v, w)| v / s * w).collect::<Vec<_>>()
            })
            .collect();
        round(&mut out);
        out
    };
    let (cos, sin) = rope_tables(t, hd);
    let rope = |x: &mut [f64], width: usize| {
        let half = hd / 2;
        for p in 0..t {
            for h in 0..width / hd {
                let base = p * width + h * hd;
                let old = x[base..base + hd].to_vec();
                for j in 0..hd {
                    let rot = if j < half { -old[j + half] } else { old[j - half] };
                    x[base + j] = old[j] * cos[p * hd + j] + rot * sin[p * hd + j];
                }
            }
        }
        round(x);
    };
    let kvq = |x: &mut Vec<f64>| -> Result<()> {
        if let Some(fmt) = em.kv {
            for row in x.chunks_mut(hd) {
                fake_quantize_row(row, &fmt, 1.0)?;
            }
        }
        Ok(())
    };
    let mut x: Vec<f64> = tokens.iter().flat_map(|&tok| w.embed[tok * d..(tok + 1) * d].iter().copied()).collect();
    round(&mut x);
    let group = spec.heads / spec.kv_heads;
    for (l, lw) in w.layers.iter().enumerate() {
        let h = rms(&x, &lw.attn_norm);
        let mut q = linear(layer_name(l, "q_proj"), &h, &lw.wq, d, d)?;
        let mut k = linear(layer_name(l, "k_proj"), &h, &lw.wk, kvd, d)?;
        let mut v = linear(layer_name(l, "v_proj"), &h, &lw.wv, kvd, d)?;
        rope(&mut q, d);
        rope(&mut k, kvd);
        kvq(&mut k)?;
        kvq(&mut v)?;
        let mut o = vec![0.0; t * d];
        for head in 0..spec.heads {
            let g = head / group;
            for i in 0..t {
                let s: Vec<f64> = (0..=i)
                    .map(|j| (0..hd).map(|c| q[i * d + head * hd + c] * k[j * kvd + g * hd + c]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let m = s.iter().copied().fold(f64::MIN, f64::max);
                let e: Vec<f64> = s.iter().map(|z| (z - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..hd {
                    o[i * d + head * hd + c] = (0..=i).map(|j| e[j] * v[j * kvd + g * hd + c]).sum::<f64>() / z;
                }
            }
        }
        round(&mut o);
        let a = linear(layer_name(l, "o_proj"), &o, &lw.wo, d, d)?;
        x.iter_mut().zip(&a).for_each(|(p, q)| *p += q);
        round(&mut x);
        let h2 = rms(&x, &lw.ffn_norm);
        let gt = linear(layer_name(l, "gate_proj"), &h2, &lw.w_gate, f, d)?;
        let up = linear(layer_name(l, "up_proj"), &h2, &lw.w_up, f, d)?;
        let mut act: Vec<f64> = gt.iter().zip(&up).map(|(a, b)| a / (1.0 + (-a).exp()) * b).collect();
        round(&mut act);
        let dn = linear(layer_name(l, "down_proj"), &act, &lw.w_down, d, f)?;
        x.iter_mut().zip(&dn).for_each(|(p, q)| *p += q);
        round(&mut x);
    }
    let hf = rms(&x, &w.final_norm);
    let logits = linear("lm_head".into(), &hf, &w.lm_head, spec.vocab, d)?;
    Ok(Forward { logits, inputs })
}

/// Relative Frobenius distance `‖a − b‖ / ‖b‖`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den.max(f64::MIN_POSITIVE)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub n: usize,
    pub k: usize,
    /// Relative output error on the calibration inputs.
    pub rtn_error: f64,
    pub gptq_error: f64,
    pub percentile_histogram: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    pub plan: QuantPlan,
    pub layers: Vec<LayerReport>,
    pub rotated_layers: BTreeSet<String>,
    /// Relative logits error against the unquantized model.
    pub rtn_logits_error: f64,
    pub gptq_logits_error: f64,
}

/// Quantize every projection of a decoder against calibration inputs
/// captured from its own double-precision pass over `tokens`. The
/// embedding is rounded to nearest. Rotation is selected per layer and
/// recorded in the report and returned plan.
pub fn quantize_decoder(spec: &ModelSpec, w: &DecoderWeights, tokens: &[usize], plan: &QuantPlan) -> Result<(DecoderWeights, QuantReport)> {
    plan.validate()?;
    spec.validate().map_err(|e| QuantError::Shape(e.to_string()))?;
    let base = forward(spec, w, tokens, &Emulation::default())?;
    let layers = decoder_layers(spec, w);
    let calib: Vec<CalibrationSet> = layers
        .iter()
        .map(|l| CalibrationSet::new(l.name.clone(), base.inputs[&l.name].clone(), tokens.len(), l.k))
        .collect::<Result<_>>()?;
    let mut out = w.clone();
    out.embed = rtn_quantize(&w.embed, spec.vocab, spec.hidden, plan.weight_fmt)?.dequantize()?;
    let rtn = w.quantized(spec, plan.weight_fmt).map_err(|e| QuantError::Shape(e.to_string()))?;
    let mut reports = Vec::new();
    for (l, c) in layers.iter().zip(&calib) {
        let ql = gptq_quantize_layer(&l.w, l.n, l.k, c, plan.weight_fmt, &plan.percentiles, plan.damping)?;
        let qw = ql.weights();
        let r = rtn_quantize(&l.w, l.n, l.k, plan.weight_fmt)?.dequantize()?;
        let zero = vec![0.0; l.w.len()];
        let scale = layer_output_error(&c.x, c.rows, &l.w, &zero, l.n, l.k).max(f64::MIN_POSITIVE);
        let mut hist = BTreeMap::new();
        for p in &ql.percentiles {
            *hist.entry(format!("{p:.2}")).or_insert(0) += 1;
        }
        reports.push(LayerReport {
            name: l.name.clone(),
            n: l.n,
            k: l.k,
            rtn_error: layer_output_error(&c.x, c.rows, &l.w, &r, l.n, l.k) / scale,
            gptq_error: layer_output_error(&c.x, c.rows, &l.w, &qw, l.n, l.k) / scale,
            percentile_histogram: hist,
        });
        *weight_mut(&mut out, &l.name).expect("name from decoder_layers") = qw;
    }
    let rotated = select_rotation_layers(&layers, &calib, plan.act_fmt, plan.weight_fmt)?;
    let mut plan = plan.clone();
    plan.rotated_layers = rotated.clone();
    let exact = Emulation::default();
    let report = QuantReport {
        plan,
        layers: reports,
        rotated_layers: rotated,
        rtn_logits_error: relative_error(&forward(spec, &rtn, tokens, &exact)?.logits, &base.logits),
        gptq_logits_error: relative_error(&forward(spec, &out, tokens, &exact)?.logits, &base.logits),
    };
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_hessian() {
        let u = hessian_inverse_cholesky(&[2.0], 1, 1, 0.01).unwrap();
        assert!((u[(0, 0)].powi(2) - 1.0 / 8.04).abs() < 1e-15);
    }

    #[test]
    fn weight_names_resolve() {
        let spec = ModelSpec::tiny();
        let mut w = DecoderWeights::random(&spec, 0);
        for l in decoder_layers(&spec, &w.clone()) {
            assert_eq!(weight_mut(&mut w, &l.name).unwrap().len(), l.n * l.k, "{}", l.name);
        }
        assert!(weight_mut(&mut w, "layers.9.q_proj").is_none());
    }
}
