//! Error-bounded mirrors of the lowered kernels.
//!
//! A [`Rows`] value holds exact centers (double precision, no quantization)
//! and, per row, a radius bounding the 2-norm distance between that row and
//! the row the machine produces. Each function follows the emitted
//! instruction sequence and charges what the hardware does at that point:
//! MX quantization of matrix operands, minifloat rounding of every
//! vector/scalar result, and the slope of the nonlinear maps in between.
//! GEMMs propagate through the spectral norm of the weight, RMSNorm through
//! the Lipschitz constant of `x / rms(x)`, and attention through the
//! perturbation of normalized softmax weights (the running max cancels).

use nalgebra::DMatrix;

use crate::formats::{compute_scale, fake_quantize_row, DataFormat, Kind};
use crate::machine::ArchConfig;

use super::{rope_tables, DecoderWeights, ModelSpec, RMS_EPS};

const EPS: f64 = f64::EPSILON;
const SILU_LIP: f64 = 1.0999;

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn maxabs(x: &[f64]) -> f64 {
    x.iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

/// Row-major centers with one 2-norm radius per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Rows {
    pub rows: usize,
    pub cols: usize,
    pub v: Vec<f64>,
    pub r: Vec<f64>,
}

impl Rows {
    pub fn exact(v: Vec<f64>, rows: usize, cols: usize) -> Rows {
        assert_eq!(v.len(), rows * cols);
        Rows { rows, cols, v, r: vec![0.0; rows] }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.v[i * self.cols..(i + 1) * self.cols]
    }

    fn norm(&self, i: usize) -> f64 {
        norm(self.row(i))
    }

    fn maxabs(&self, i: usize) -> f64 {
        maxabs(self.row(i))
    }

    /// Distance of each machine row from its center.
    pub fn distances(&self, machine: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|i| {
                let m = &machine[i * self.cols..(i + 1) * self.cols];
                norm(&self.row(i).iter().zip(m).map(|(a, b)| a - b).collect::<Vec<_>>())
            })
            .collect()
    }

    /// Largest `distance / allowance` over rows; at most 1 means every row
    /// is inside its bound. The allowance adds 1e-9 relative slack for the
    /// f64 evaluation of the bound itself.
    pub fn worst_ratio(&self, machine: &[f64]) -> f64 {
        self.distances(machine)
            .iter()
            .zip(&self.r)
            .enumerate()
            .map(|(i, (d, r))| d / (r * (1.0 + 1e-9) + 1e-12 * (1.0 + self.norm(i))))
            .fold(0.0, f64::max)
    }

    pub fn contains(&self, machine: &[f64]) -> bool {
        machine.len() == self.v.len() && self.worst_ratio(machine) <= 1.0
    }

    pub fn max_radius(&self) -> f64 {
        self.r.iter().copied().fold(0.0, f64::max)
    }

    /// Radius over center norm, worst row.
    pub fn max_relative_radius(&self) -> f64 {
        (0..self.rows).map(|i| self.r[i] / self.norm(i).max(f64::MIN_POSITIVE)).fold(0.0, f64::max)
    }
}

/// Largest singular value, slightly inflated.
pub fn spectral_norm(w: &[f64], n: usize, k: usize) -> f64 {
    let m = DMatrix::from_row_slice(n, k, w);
    m.singular_values().max() * (1.0 + 1e-10)
}

/// Rounding model of one architecture.
#[derive(Debug, Clone)]
pub struct Numerics {
    pub fp: DataFormat,
    pub act: DataFormat,
    pub kv: DataFormat,
    pub mlen: usize,
    pub blen: usize,
    u: f64,
    mu: f64,
    max: f64,
}

impl Numerics {
    pub fn new(arch: &ArchConfig) -> Numerics {
        let fp = arch.fp_setting;
        Numerics {
            fp,
            act: arch.act_fmt,
            kv: arch.kv_fmt,
            mlen: arch.mlen,
            blen: arch.blen,
            u: fp.unit_roundoff(),
            mu: fp.min_positive() / 2.0,
            max: fp.max_value(),
        }
    }

    /// Bound on `||cast(y) - y||` for an n-vector with the given norm and
    /// largest magnitude.
    pub fn round_err(&self, norm: f64, maxabs: f64, n: usize) -> f64 {
        let sn = (n as f64).sqrt();
        let sat = if maxabs > self.max { sn * (maxabs - self.max) } else { 0.0 };
        self.u * norm + sn * self.mu + sat + 4.0 * EPS * norm
    }

    /// Charge one cast on every row.
    pub fn cast(&self, x: &mut Rows) {
        for i in 0..x.rows {
            let r = x.r[i];
            x.r[i] = r + self.round_err(x.norm(i) + r, x.maxabs(i) + r, x.cols);
        }
    }

    fn round(&self, v: f64) -> f64 {
        self.fp.round_element(v.clamp(-self.max, self.max))
    }

    /// Exact values as the machine holds them after one cast; the radius is
    /// the actual rounding error.
    pub fn cast_exact(&self, v: Vec<f64>, rows: usize, cols: usize) -> Rows {
        let mut x = Rows::exact(v, rows, cols);
        for i in 0..rows {
            x.r[i] = norm(&x.row(i).iter().map(|&a| self.round(a) - a).collect::<Vec<_>>());
        }
        x
    }

    /// Bound on the distance from the center `v` after MX quantization of
    /// a row whose machine value lies within `r` of `v`.
    pub fn mx_err(&self, v: &[f64], r: f64, fmt: DataFormat) -> f64 {
        if r == 0.0 {
            let mut q = v.to_vec();
            fake_quantize_row(&mut q, &fmt, 1.0).expect("finite row");
            return norm(&q.iter().zip(v).map(|(a, b)| a - b).collect::<Vec<_>>());
        }
        let mut sq = 0.0;
        for blk in v.chunks(fmt.block_size as usize) {
            let e_up = compute_scale(&[maxabs(blk) + r], fmt);
            let step = (e_up as f64).exp2();
            let h = match fmt.kind {
                Kind::MxInt => step / 2.0,
                _ => step * fmt.min_positive() / 2.0,
            };
            sq += blk.len() as f64 * h * h;
        }
        let rel = if fmt.kind == Kind::MxInt { 0.0 } else { fmt.unit_roundoff() * (norm(v) + r) };
        r + rel + sq.sqrt()
    }

    pub fn mx(&self, x: &Rows, fmt: DataFormat) -> Rows {
        let mut out = x.clone();
        for i in 0..x.rows {
            out.r[i] = self.mx_err(x.row(i), x.r[i], fmt);
        }
        out
    }

    /// `x · wᵀ` for exact weights `w` (`n × k`): act-quantized input, cast output.
    pub fn gemm(&self, x: &Rows, w: &[f64], n: usize) -> Rows {
        let k = x.cols;
        let wn = spectral_norm(w, n, k);
        let wf = norm(w);
        let xq = self.mx(x, self.act);
        let mut y = Rows::exact(vec![0.0; x.rows * n], x.rows, n);
        for i in 0..x.rows {
            let xr = x.row(i);
            for j in 0..n {
                y.v[i * n + j] = xr.iter().zip(&w[j * k..(j + 1) * k]).map(|(a, b)| a * b).sum();
            }
            y.r[i] = wn * xq.r[i] + 2.0 * k as f64 * EPS * (x.norm(i) + xq.r[i]) * wf;
        }
        self.cast(&mut y);
        y
    }

    /// `x + y`, cast.
    pub fn add(&self, x: &Rows, y: &Rows) -> Rows {
        let mut out = x.clone();
        out.v.iter_mut().zip(&y.v).for_each(|(a, b)| *a += b);
        out.r.iter_mut().zip(&y.r).for_each(|(a, b)| *a += b);
        self.cast(&mut out);
        out
    }

    /// `x * rsqrt(mean(x²) + eps) * w` per row, following the chunked
    /// reduction the lowering emits.
    pub fn rmsnorm(&self, x: &Rows, w: &[f64], eps: f64) -> Rows {
        let (d, u, mu) = (x.cols, self.u, self.mu);
        let sd = (d as f64).sqrt();
        let nc = d.div_ceil(self.mlen) as i32;
        // squares, chunk sums, running sum, 1/d and its constant, eps and its constant, rsqrt
        let eta = (1.0 + u).powi(nc + 6) - 1.0 + (d as f64 + 2.0 * nc as f64 + 6.0) * mu / eps;
        let gamma = (1.0 - eta).max(f64::MIN_POSITIVE).powf(-0.5) * (1.0 + u) - 1.0 + mu / eps.sqrt();
        let wr: Vec<f64> = w.iter().map(|&a| self.round(a)).collect();
        let mw = maxabs(&wr);
        let mut out = Rows::exact(vec![0.0; x.v.len()], x.rows, d);
        for i in 0..x.rows {
            let (xn, r) = (x.norm(i), x.r[i]);
            let rc = (xn * xn / d as f64 + eps).sqrt();
            let r_lo = (rc - r / sd).max(eps.sqrt());
            let lip = (r / r_lo + xn * (r / sd) / (rc * r_lo)).min(2.0 * sd);
            let f: Vec<f64> = x.row(i).iter().map(|a| a / rc).collect();
            let mut rf = lip + sd * gamma;
            rf += self.round_err(sd * (1.0 + gamma), sd * (1.0 + gamma), d);
            let fdw = norm(&f.iter().zip(w.iter().zip(&wr)).map(|(a, (b, c))| a * (b - c)).collect::<Vec<_>>());
            for (c, (a, b)) in f.iter().zip(w).enumerate() {
                out.v[i * d + c] = a * b;
            }
            out.r[i] = rf * mw + fdw;
        }
        self.cast(&mut out);
        out
    }

    /// Rotary embedding on `rows × width` (heads of `hd` side by side) for
    /// positions `0..rows`. The half-rotated operand is an exact signed
    /// permutation of `x`, so only the table roundings and casts add error.
    pub fn rope(&self, x: &Rows, hd: usize) -> Rows {
        let (t, width) = (x.rows, x.cols);
        let (cos, sin) = rope_tables(t, hd);
        let half = hd / 2;
        let mut out = x.clone();
        for p in 0..t {
            let tab = |tb: &[f64]| (0..hd).map(|j| (self.round(tb[p * hd + j]) - tb[p * hd + j]).abs()).fold(0.0, f64::max);
            let (ec, es) = (tab(&cos), tab(&sin));
            let row = x.row(p).to_vec();
            for c in 0..width {
                let (h, j) = (c / hd, c % hd);
                let rot = if j < half { -row[h * hd + j + half] } else { row[h * hd + j - half] };
                out.v[p * width + c] = row[c] * cos[p * hd + j] + rot * sin[p * hd + j];
            }
            let (up, mx) = (x.norm(p) + x.r[p], x.maxabs(p) + x.r[p]);
            let mut rr = x.r[p] + up * (ec + es);
            rr += self.round_err(up * (1.0 + ec), mx, width);
            rr += self.round_err(up * (1.0 + es), mx, width);
            rr += self.round_err(up * (2.0 + ec + es), 2.0 * mx, width);
            out.r[p] = rr;
        }
        out
    }

    /// `silu(g) ⊙ u` computed as `g · rec(1 + exp(-g)) · u`.
    pub fn silu_mul(&self, g: &Rows, up: &Rows) -> Rows {
        let (n, u, mu) = (g.cols, self.u, self.mu);
        let sn = (n as f64).sqrt();
        let theta = (1.0 + u).powi(4) - 1.0;
        let silu = |x: f64| x / (1.0 + (-x).exp());
        let mut out = Rows::exact(vec![0.0; g.v.len()], g.rows, n);
        for i in 0..g.rows {
            let (gr, ur) = (g.row(i), up.row(i));
            let s: Vec<f64> = gr.iter().map(|&x| silu(x)).collect();
            let mg = maxabs(gr) + g.r[i];
            let mut abs = sn * (3.0 * mu * mg + mu);
            if gr.iter().map(|x| -x).fold(f64::MIN, f64::max) + g.r[i] > self.max.ln() {
                // exp saturates; both results are within |g| / max of zero
                abs += sn * mg / self.max;
            }
            let rs = SILU_LIP * g.r[i] + theta * (norm(&s) + SILU_LIP * g.r[i]) + abs;
            for c in 0..n {
                out.v[i * n + c] = s[c] * ur[c];
            }
            out.r[i] = rs * (maxabs(ur) + up.r[i]) + maxabs(&s) * up.r[i];
        }
        self.cast(&mut out);
        out
    }

    /// Causal or full attention of query heads over shared K/V heads, with
    /// the tiling of the lowered kernel (BLEN queries, MLEN keys per tile).
    /// `q` is `tq × heads·hd`; `k`, `v` are `t × kv_heads·hd` before KV
    /// quantization.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(&self, q: &Rows, k: &Rows, v: &Rows, heads: usize, kv_heads: usize, hd: usize, causal: bool) -> Rows {
        let (tq, t, ml, u, mu) = (q.rows, k.rows, self.mlen, self.u, self.mu);
        let group = heads / kv_heads;
        let sigma = 1.0 / (hd as f64).sqrt();
        let sig_m = self.round(sigma);
        let hrow = |x: &Rows, i: usize, h: usize| x.row(i)[h * hd..(h + 1) * hd].to_vec();
        // quantization error of a P element relative to its block max
        let qdiv = match self.act.kind {
            Kind::MxInt => 1.0 / self.act.max_value(),
            _ => self.act.min_positive() / self.act.max_value(),
        };
        let qrel = if self.act.kind == Kind::MxInt { 0.0 } else { self.act.unit_roundoff() };
        let lnu = (1.0 + u).ln();
        let mut out = Rows::exact(vec![0.0; tq * heads * hd], tq, heads * hd);
        let mut rad2 = vec![0.0; tq];
        for g in 0..kv_heads {
            let kc: Vec<Vec<f64>> = (0..t).map(|j| hrow(k, j, g)).collect();
            let vc: Vec<Vec<f64>> = (0..t).map(|j| hrow(v, j, g)).collect();
            let rk: Vec<f64> = (0..t).map(|j| self.mx_err(&kc[j], k.r[j], self.kv)).collect();
            let rv: Vec<f64> = (0..t).map(|j| self.mx_err(&vc[j], v.r[j], self.kv)).collect();
            let vn: Vec<f64> = (0..t).map(|j| norm(&vc[j]) + rv[j]).collect();
            for h in g * group..(g + 1) * group {
                for i in 0..tq {
                    let qc = hrow(q, i, h);
                    let qn = norm(&qc);
                    let qs: Vec<f64> = qc.iter().map(|a| a * sigma).collect();
                    let mut rq = sig_m * q.r[i] + qn * (sig_m - sigma).abs();
                    rq += self.round_err(sig_m * (qn + q.r[i]), sig_m * (maxabs(&qc) + q.r[i]), hd);
                    let rqa = self.mx_err(&qs, rq, self.act);
                    let qsn = norm(&qs);
                    let mb = i / self.blen;
                    let last_q = (mb * self.blen + self.blen - 1).min(tq - 1);
                    let ntiles = if causal { last_q.min(t - 1) / ml + 1 } else { t.div_ceil(ml) };
                    let keys = if causal { i.min(t - 1) + 1 } else { t };
                    let s: Vec<f64> = (0..keys).map(|j| qs.iter().zip(&kc[j]).map(|(a, b)| a * b).sum()).collect();
                    let e: Vec<f64> = (0..keys)
                        .map(|j| {
                            let kn = norm(&kc[j]) + rk[j];
                            let d = rqa * kn + qsn * rk[j] + 2.0 * hd as f64 * EPS * (qsn + rqa) * kn;
                            d + u * (s[j].abs() + d) + mu
                        })
                        .collect();
                    let tiles: Vec<usize> = (0..ntiles).filter(|&tt| tt * ml < keys).collect();
                    let (mut m, mut em) = (f64::MIN, 0.0f64);
                    let (mut m_t, mut e_t) = (Vec::new(), Vec::new());
                    for &tt in &tiles {
                        for j in tt * ml..((tt + 1) * ml).min(keys) {
                            m = m.max(s[j]);
                            em = em.max(e[j]);
                        }
                        m_t.push(m);
                        e_t.push(em);
                    }
                    // log-perturbation added by the rescale after tile idx
                    let alpha_err: Vec<f64> = (0..tiles.len())
                        .map(|idx| if idx == 0 { 0.0 } else { u * (m_t[idx] - m_t[idx - 1] + 2.0 * e_t[idx]) + mu + lnu })
                        .collect();
                    let mut dj = vec![0.0; keys];
                    for (idx, &tt) in tiles.iter().enumerate() {
                        let later: f64 = alpha_err[idx + 1..].iter().sum();
                        for j in tt * ml..((tt + 1) * ml).min(keys) {
                            dj[j] = e[j] + u * (m_t[idx] - s[j] + e[j] + e_t[idx]) + mu + lnu + later;
                        }
                    }
                    let wts: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
                    let z: f64 = wts.iter().sum();
                    let pi: Vec<f64> = wts.iter().map(|w| w / z).collect();
                    let dbar: f64 = pi.iter().zip(&dj).map(|(p, d)| p * d).sum();
                    let zplus: f64 = pi.iter().zip(&dj).map(|(p, d)| p * d.exp()).sum();
                    let mv = vn[..keys].iter().copied().fold(0.0, f64::max);
                    let (mut term1, mut term_v) = (0.0, 0.0);
                    for j in 0..keys {
                        let dev = ((dj[j] + dbar).exp() - 1.0).max(1.0 - (-dj[j]).exp() / zplus);
                        term1 += pi[j] * dev * vn[j];
                        term_v += pi[j] * rv[j];
                    }
                    term1 = term1.min(2.0 * mv);
                    // P is quantized again before the PV product
                    let bs = self.act.block_size as usize;
                    let mut term_q = 0.0;
                    let mut j0 = 0;
                    while j0 < keys {
                        let j1 = (j0 + bs).min(keys);
                        let pm = |j: usize| pi[j] * (dj[j] + dbar).exp();
                        let pmax = (j0..j1).map(pm).fold(0.0, f64::max);
                        let vmax = vn[j0..j1].iter().copied().fold(0.0, f64::max);
                        let prel: f64 = (j0..j1).map(|j| pm(j) * qrel * vn[j]).sum();
                        term_q += (j1 - j0) as f64 * pmax * qdiv * vmax + prel;
                        j0 = j1;
                    }
                    let acc = (1.0 + u).powi(3 * tiles.len() as i32 + 3) - 1.0;
                    let dmax = dj.iter().copied().fold(0.0, f64::max);
                    let tiny = (hd as f64).sqrt() * mu * (3 * tiles.len() + 3) as f64 * (dmax + dbar).exp();
                    let r_o = term1 + term_v + term_q + 2.0 * acc * (mv + term_q) + tiny;
                    for c in 0..hd {
                        out.v[i * heads * hd + h * hd + c] = (0..keys).map(|j| pi[j] * vc[j][c]).sum();
                    }
                    rad2[i] += r_o * r_o;
                }
            }
        }
        out.r = rad2.into_iter().map(f64::sqrt).collect();
        out
    }

    /// Bounded logits (`T × vocab`) of the lowered decoder, given the
    /// dequantized weights the machine multiplies by.
    pub fn decoder(&self, spec: &ModelSpec, w: &DecoderWeights, tokens: &[usize]) -> Rows {
        let (t, d, hd) = (tokens.len(), spec.hidden, spec.head_dim);
        let kvd = spec.kv_heads * hd;
        let emb: Vec<f64> = tokens.iter().flat_map(|&tok| w.embed[tok * d..(tok + 1) * d].to_vec()).collect();
        let mut x = self.cast_exact(emb, t, d);
        for lw in &w.layers {
            let h = self.rmsnorm(&x, &lw.attn_norm, RMS_EPS);
            let q = self.rope(&self.gemm(&h, &lw.wq, d), hd);
            let k = self.rope(&self.gemm(&h, &lw.wk, kvd), hd);
            let v = self.gemm(&h, &lw.wv, kvd);
            let o = self.attention(&q, &k, &v, spec.heads, spec.kv_heads, hd, true);
            x = self.add(&x, &self.gemm(&o, &lw.wo, d));
            let h2 = self.rmsnorm(&x, &lw.ffn_norm, RMS_EPS);
            let g = self.gemm(&h2, &lw.w_gate, spec.ffn_dim);
            let up = self.gemm(&h2, &lw.w_up, spec.ffn_dim);
            let f = self.gemm(&self.silu_mul(&g, &up), &lw.w_down, d);
            x = self.add(&x, &f);
        }
        let hf = self.rmsnorm(&x, &w.final_norm, RMS_EPS);
        self.gemm(&hf, &w.lm_head, spec.vocab)
    }
}
