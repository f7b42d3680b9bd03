//! Numeric formats: MX block integers and floats, element minifloats,
//! the MXTensor container with its binary file format, and the
//! orthonormal fast Walsh-Hadamard transform.
//!
//! Scales are powers of two chosen as `ceil(log2(max|x| / max_elem))`,
//! so no unclipped value saturates. Rounding is ties-to-even. Minifloats
//! have subnormals and saturate instead of producing infinities.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_BLOCK: u32 = 16;
pub const DEFAULT_SCALE_BITS: u8 = 8;
const MAGIC: &[u8; 4] = b"PLXT";
const FILE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("invalid format: {0}")]
    Invalid(String),
    #[error("unknown format name `{0}`")]
    UnknownName(String),
    #[error("non-finite value {0} in quantizer input")]
    NonFinite(f64),
    #[error("code {code:#x} outside the value set of {format}")]
    CodeOutOfRange { code: u32, format: DataFormat },
    #[error("clip fraction {0} outside (0, 1]")]
    BadClip(f64),
    #[error("block length {got} does not match block size {want}")]
    BlockLength { got: usize, want: usize },
    #[error("length {0} is not a power of two")]
    NotPowerOfTwo(usize),
    #[error("shape {shape:?} does not match {len} values")]
    Shape { shape: Vec<usize>, len: usize },
    #[error("bad tensor file: {0}")]
    File(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Kind {
    MxInt,
    MxFp,
    MiniFloat,
}

impl Kind {
    fn code(self) -> u8 {
        match self {
            Kind::MxInt => 0,
            Kind::MxFp => 1,
            Kind::MiniFloat => 2,
        }
    }

    fn from_code(c: u8) -> Option<Kind> {
        match c {
            0 => Some(Kind::MxInt),
            1 => Some(Kind::MxFp),
            2 => Some(Kind::MiniFloat),
            _ => None,
        }
    }
}

/// Descriptor of a numeric format. Serialized as its name, e.g.
/// `MXINT4`, `MXFP_E4M3@32`, `E6M5`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DataFormat {
    pub kind: Kind,
    pub element_bits: u8,
    pub exponent_bits: u8,
    pub mantissa_bits: u8,
    pub block_size: u32,
    pub scale_bits: u8,
}

fn pow2(n: i32) -> f64 {
    if (-1022..=1023).contains(&n) {
        f64::from_bits(((n + 1023) as u64) << 52)
    } else {
        2f64.powi(n)
    }
}

/// floor(log2(a)) for finite a > 0, exact.
fn ilog2(a: f64) -> i32 {
    let bits = a.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32;
    if exp == 0 {
        // f64 subnormal
        let mant = bits & ((1u64 << 52) - 1);
        -1074 + (63 - mant.leading_zeros() as i32)
    } else {
        exp - 1023
    }
}

impl DataFormat {
    pub fn mxint(bits: u8, block_size: u32) -> DataFormat {
        DataFormat {
            kind: Kind::MxInt,
            element_bits: bits,
            exponent_bits: 0,
            mantissa_bits: 0,
            block_size,
            scale_bits: DEFAULT_SCALE_BITS,
        }
    }

    pub fn mxfp(exponent_bits: u8, mantissa_bits: u8, block_size: u32) -> DataFormat {
        DataFormat {
            kind: Kind::MxFp,
            element_bits: 1 + exponent_bits + mantissa_bits,
            exponent_bits,
            mantissa_bits,
            block_size,
            scale_bits: DEFAULT_SCALE_BITS,
        }
    }

    pub fn minifloat(exponent_bits: u8, mantissa_bits: u8) -> DataFormat {
        DataFormat {
            kind: Kind::MiniFloat,
            element_bits: 1 + exponent_bits + mantissa_bits,
            exponent_bits,
            mantissa_bits,
            block_size: 1,
            scale_bits: 0,
        }
    }

    pub fn with_block(mut self, block_size: u32) -> DataFormat {
        self.block_size = block_size;
        self
    }

    pub fn is_mx(&self) -> bool {
        matches!(self.kind, Kind::MxInt | Kind::MxFp)
    }

    pub fn validate(&self) -> Result<(), FormatError> {
        let bad = |m: &str| Err(FormatError::Invalid(format!("{self}: {m}")));
        match self.kind {
            Kind::MxInt => {
                if !(2..=16).contains(&self.element_bits) {
                    return bad("MXINT element bits must be in 2..=16");
                }
            }
            Kind::MxFp | Kind::MiniFloat => {
                if self.exponent_bits < 1 || self.mantissa_bits < 1 {
                    return bad("float formats need at least one exponent and one mantissa bit");
                }
                if self.element_bits != 1 + self.exponent_bits + self.mantissa_bits {
                    return bad("element bits must equal 1 + exponent + mantissa");
                }
                if self.exponent_bits > 10 || self.mantissa_bits > 23 {
                    return bad("exponent or mantissa field too wide");
                }
            }
        }
        if self.is_mx() {
            if self.block_size == 0 {
                return bad("block size must be at least 1");
            }
            if !(2..=16).contains(&self.scale_bits) {
                return bad("scale bits must be in 2..=16");
            }
        }
        Ok(())
    }

    pub fn bias(&self) -> i32 {
        (1 << (self.exponent_bits.max(1) - 1)) - 1
    }

    fn emin(&self) -> i32 {
        1 - self.bias()
    }

    fn emax(&self) -> i32 {
        (1 << self.exponent_bits) - 1 - self.bias()
    }

    /// Largest representable element magnitude (max_τ); min_τ = -max_τ.
    pub fn max_value(&self) -> f64 {
        match self.kind {
            Kind::MxInt => ((1i64 << (self.element_bits - 1)) - 1) as f64,
            _ => (2.0 - pow2(-(self.mantissa_bits as i32))) * pow2(self.emax()),
        }
    }

    pub fn min_value(&self) -> f64 {
        -self.max_value()
    }

    /// Smallest positive element magnitude.
    pub fn min_positive(&self) -> f64 {
        match self.kind {
            Kind::MxInt => 1.0,
            _ => pow2(self.emin() - self.mantissa_bits as i32),
        }
    }

    /// Half the relative spacing of normal float elements, 2^-(m+1).
    pub fn unit_roundoff(&self) -> f64 {
        match self.kind {
            Kind::MxInt => 0.5,
            _ => pow2(-(self.mantissa_bits as i32) - 1),
        }
    }

    pub fn scale_range(&self) -> (i32, i32) {
        let half = 1i32 << (self.scale_bits.max(1) - 1);
        (-half, half - 1)
    }

    /// Round a value (already divided by the scale) onto the element grid,
    /// saturating at max_τ.
    pub fn round_element(&self, v: f64) -> f64 {
        match self.kind {
            Kind::MxInt => {
                let q = self.max_value();
                v.round_ties_even().clamp(-q, q)
            }
            _ => {
                let (e, m) = round_float(v.abs(), self.exponent_bits as i32, self.mantissa_bits as i32);
                let mag = float_value(e, m, self.exponent_bits as i32, self.mantissa_bits as i32);
                if v.is_sign_negative() {
                    -mag
                } else {
                    mag
                }
            }
        }
    }

    /// Encode an element value (already divided by the scale) as raw code bits.
    pub fn encode_element(&self, v: f64) -> u32 {
        match self.kind {
            Kind::MxInt => {
                let q = self.max_value();
                let i = v.round_ties_even().clamp(-q, q) as i64;
                (i as u64 & ((1u64 << self.element_bits) - 1)) as u32
            }
            _ => {
                let (e, m) = round_float(v.abs(), self.exponent_bits as i32, self.mantissa_bits as i32);
                let sign = u32::from(v.is_sign_negative());
                (sign << (self.element_bits - 1)) | (e << self.mantissa_bits) | m
            }
        }
    }

    /// Decode raw code bits into the element value (before scaling).
    pub fn decode_element(&self, code: u32) -> Result<f64, FormatError> {
        let bits = self.element_bits as u32;
        if bits < 32 && code >> bits != 0 {
            return Err(FormatError::CodeOutOfRange { code, format: *self });
        }
        match self.kind {
            Kind::MxInt => {
                let sign_bit = 1u32 << (bits - 1);
                if code == sign_bit {
                    // -2^(b-1) is excluded from the symmetric range
                    return Err(FormatError::CodeOutOfRange { code, format: *self });
                }
                let v = if code & sign_bit != 0 {
                    code as i64 - (1i64 << bits)
                } else {
                    code as i64
                };
                Ok(v as f64)
            }
            _ => {
                let m = self.mantissa_bits as u32;
                let e = self.exponent_bits as u32;
                let mant = code & ((1 << m) - 1);
                let exp = (code >> m) & ((1 << e) - 1);
                let mag = float_value(exp, mant, e as i32, m as i32);
                Ok(if code >> (bits - 1) & 1 == 1 { -mag } else { mag })
            }
        }
    }
}

/// Round a non-negative magnitude to (exponent code, mantissa) with
/// ties-to-even, subnormals, and saturation at the largest finite value.
fn round_float(a: f64, e: i32, m: i32) -> (u32, u32) {
    let bias = (1 << (e - 1)) - 1;
    let emin = 1 - bias;
    let emax = (1 << e) - 1 - bias;
    let max_exp_code = ((1 << e) - 1) as u32;
    let max_mant = ((1 << m) - 1) as u32;
    if a == 0.0 {
        return (0, 0);
    }
    let maxv = (2.0 - pow2(-m)) * pow2(emax);
    if a >= maxv {
        return (max_exp_code, max_mant);
    }
    let mut ex = ilog2(a).max(emin);
    let mut k = (a * pow2(m - ex)).round_ties_even() as u64;
    if k == 0 {
        return (0, 0);
    }
    if k >= 1u64 << (m + 1) {
        ex += 1;
        k >>= 1;
    }
    if ex > emax {
        return (max_exp_code, max_mant);
    }
    if k < 1u64 << m {
        (0, k as u32)
    } else {
        ((ex + bias) as u32, (k - (1u64 << m)) as u32)
    }
}

fn float_value(exp: u32, mant: u32, e: i32, m: i32) -> f64 {
    let bias = (1 << (e - 1)) - 1;
    if exp == 0 {
        mant as f64 * pow2(1 - bias - m)
    } else {
        ((1u64 << m) + mant as u64) as f64 * pow2(exp as i32 - bias - m)
    }
}

impl fmt::Display for DataFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            Kind::MxInt => write!(f, "MXINT{}", self.element_bits)?,
            Kind::MxFp => write!(f, "MXFP_E{}M{}", self.exponent_bits, self.mantissa_bits)?,
            Kind::MiniFloat => return write!(f, "E{}M{}", self.exponent_bits, self.mantissa_bits),
        }
        if self.block_size != DEFAULT_BLOCK {
            write!(f, "@{}", self.block_size)?;
        }
        Ok(())
    }
}

fn parse_em(s: &str) -> Option<(u8, u8)> {
    let rest = s.strip_prefix('E')?;
    let (e, m) = rest.split_once('M')?;
    Some((e.parse().ok()?, m.parse().ok()?))
}

impl FromStr for DataFormat {
    type Err = FormatError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || FormatError::UnknownName(s.to_string());
        let upper = s.trim().to_ascii_uppercase();
        let (name, block) = match upper.split_once('@') {
            Some((n, b)) => (n.to_string(), Some(b.parse::<u32>().map_err(|_| unknown())?)),
            None => (upper.clone(), None),
        };
        let block = block.unwrap_or(DEFAULT_BLOCK);
        let f = if let Some(b) = name.strip_prefix("MXINT") {
            DataFormat::mxint(b.parse().map_err(|_| unknown())?, block)
        } else if let Some(em) = name.strip_prefix("MXFP_").or_else(|| name.strip_prefix("MXFP")) {
            let (e, m) = parse_em(em).ok_or_else(unknown)?;
            DataFormat::mxfp(e, m, block)
        } else if let Some((e, m)) = parse_em(&name) {
            if upper.contains('@') {
                return Err(unknown());
            }
            DataFormat::minifloat(e, m)
        } else {
            return Err(unknown());
        };
        f.validate()?;
        Ok(f)
    }
}

impl TryFrom<String> for DataFormat {
    type Error = FormatError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<DataFormat> for String {
    fn from(f: DataFormat) -> String {
        f.to_string()
    }
}

/// One decoded minifloat element.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MiniFloatValue {
    pub sign: u8,
    pub exponent: u32,
    pub mantissa: u32,
    pub format: DataFormat,
}

impl MiniFloatValue {
    pub fn from_bits(bits: u32, format: DataFormat) -> MiniFloatValue {
        let m = format.mantissa_bits as u32;
        let e = format.exponent_bits as u32;
        MiniFloatValue {
            sign: ((bits >> (e + m)) & 1) as u8,
            exponent: (bits >> m) & ((1 << e) - 1),
            mantissa: bits & ((1 << m) - 1),
            format,
        }
    }

    pub fn to_bits(&self) -> u32 {
        let m = self.format.mantissa_bits as u32;
        let e = self.format.exponent_bits as u32;
        ((self.sign as u32) << (e + m)) | (self.exponent << m) | self.mantissa
    }

    pub fn to_f64(&self) -> f64 {
        let mag = float_value(
            self.exponent,
            self.mantissa,
            self.format.exponent_bits as i32,
            self.format.mantissa_bits as i32,
        );
        if self.sign == 1 {
            -mag
        } else {
            mag
        }
    }
}

/// Round `x` into a minifloat, saturating on overflow.
pub fn cast_minifloat(x: f64, fmt: DataFormat) -> Result<MiniFloatValue, FormatError> {
    if x.is_nan() {
        return Err(FormatError::NonFinite(x));
    }
    if fmt.exponent_bits < 1 || fmt.mantissa_bits < 1 || fmt.kind == Kind::MxInt {
        return Err(FormatError::Invalid(format!("{fmt} is not a float format")));
    }
    let (exponent, mantissa) = round_float(x.abs(), fmt.exponent_bits as i32, fmt.mantissa_bits as i32);
    Ok(MiniFloatValue { sign: u8::from(x.is_sign_negative()), exponent, mantissa, format: fmt })
}

/// Value-level minifloat rounding used on the vector datapath.
#[inline]
pub fn round_minifloat(x: f64, fmt: DataFormat) -> f64 {
    fmt.round_element(x)
}

fn check_clip(clip: f64) -> Result<(), FormatError> {
    if clip > 0.0 && clip <= 1.0 {
        Ok(())
    } else {
        Err(FormatError::BadClip(clip))
    }
}

/// Smallest e with max_abs <= max_elem * 2^e, clamped to the scale range.
fn exponent_for(max_abs: f64, fmt: &DataFormat) -> i32 {
    let (lo, hi) = fmt.scale_range();
    if max_abs == 0.0 {
        return 0;
    }
    let q = fmt.max_value();
    let mut e = ilog2(max_abs) - ilog2(q);
    while q * pow2(e) < max_abs {
        e += 1;
    }
    while e > lo && q * pow2(e - 1) >= max_abs {
        e -= 1;
    }
    e.clamp(lo, hi)
}

/// Shared power-of-two exponent for one block.
pub fn compute_scale(block: &[f64], fmt: DataFormat) -> i32 {
    let m = block.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    exponent_for(m, &fmt)
}

/// Quantize one block to element codes and a scale exponent.
pub fn quantize_block(block: &[f64], fmt: DataFormat, clip: f64) -> Result<(Vec<u32>, i32), FormatError> {
    check_clip(clip)?;
    if block.len() != fmt.block_size as usize {
        return Err(FormatError::BlockLength { got: block.len(), want: fmt.block_size as usize });
    }
    let (codes, e) = quantize_slice(block, &fmt, clip)?;
    Ok((codes, e))
}

fn quantize_slice(block: &[f64], fmt: &DataFormat, clip: f64) -> Result<(Vec<u32>, i32), FormatError> {
    let mut m = 0.0f64;
    for &x in block {
        if !x.is_finite() {
            return Err(FormatError::NonFinite(x));
        }
        m = m.max(x.abs());
    }
    let mut e = exponent_for(clip * m, fmt);
    let mut vals: Vec<f64> = block.iter().map(|&x| fmt.round_element(x * pow2(-e))).collect();
    let top = vals.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if top == 0.0 {
        e = 0;
    } else {
        // Canonical form: if rounding left the block within half the range,
        // the same values are representable at a smaller scale. Without this
        // step re-quantizing the dequantized block would pick that scale.
        let (lo, _) = fmt.scale_range();
        let mut top = top;
        while e > lo && top * 2.0 <= fmt.max_value() {
            e -= 1;
            top *= 2.0;
            vals.iter_mut().for_each(|v| *v *= 2.0);
        }
    }
    Ok((vals.iter().map(|&v| fmt.encode_element(v)).collect(), e))
}

pub fn dequantize_block(codes: &[u32], exponent: i32, fmt: DataFormat) -> Result<Vec<f64>, FormatError> {
    let s = pow2(exponent);
    codes.iter().map(|&c| Ok(fmt.decode_element(c)? * s)).collect()
}

/// Quantize then dequantize a row in place, blockwise along the row.
/// A trailing partial block behaves as if zero-padded. Returns the
/// per-block exponents.
pub fn fake_quantize_row(row: &mut [f64], fmt: &DataFormat, clip: f64) -> Result<Vec<i32>, FormatError> {
    check_clip(clip)?;
    let b = fmt.block_size as usize;
    let mut exps = Vec::with_capacity(row.len().div_ceil(b));
    for chunk in row.chunks_mut(b) {
        let mut m = 0.0f64;
        for &x in chunk.iter() {
            if !x.is_finite() {
                return Err(FormatError::NonFinite(x));
            }
            m = m.max(x.abs());
        }
        let e = exponent_for(clip * m, fmt);
        let s = pow2(e);
        let inv = pow2(-e);
        for x in chunk.iter_mut() {
            *x = fmt.round_element(*x * inv) * s;
        }
        exps.push(e);
    }
    Ok(exps)
}

/// Convenience wrapper over [`fake_quantize_row`] for a row-major matrix.
pub fn fake_quantize_matrix(data: &[f64], cols: usize, fmt: &DataFormat) -> Result<Vec<f64>, FormatError> {
    let mut out = data.to_vec();
    for row in out.chunks_mut(cols.max(1)) {
        fake_quantize_row(row, fmt, 1.0)?;
    }
    Ok(out)
}

/// Tensor of MX blocks. The innermost dimension is zero-padded to a
/// multiple of the block size; `codes` holds the padded rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MXTensor {
    pub shape: Vec<usize>,
    pub format: DataFormat,
    pub codes: Vec<u32>,
    pub scales: Vec<i8>,
}

impl MXTensor {
    pub fn quantize(data: &[f64], shape: &[usize], format: DataFormat) -> Result<MXTensor, FormatError> {
        Self::quantize_clipped(data, shape, format, 1.0)
    }

    pub fn quantize_clipped(data: &[f64], shape: &[usize], format: DataFormat, clip: f64) -> Result<MXTensor, FormatError> {
        format.validate()?;
        if !format.is_mx() {
            return Err(FormatError::Invalid(format!("{format} is not an MX format")));
        }
        check_clip(clip)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.is_empty() {
            return Err(FormatError::Shape { shape: shape.to_vec(), len: data.len() });
        }
        let inner = *shape.last().unwrap();
        let b = format.block_size as usize;
        let padded = inner.div_ceil(b) * b;
        let rows = if inner == 0 { 0 } else { numel / inner };
        let mut codes = Vec::with_capacity(rows * padded);
        let mut scales = Vec::with_capacity(rows * padded / b.max(1));
        let mut buf = vec![0.0; b];
        for r in 0..rows {
            let row = &data[r * inner..(r + 1) * inner];
            for blk in 0..padded / b {
                buf.fill(0.0);
                let lo = blk * b;
                let hi = (lo + b).min(inner);
                buf[..hi - lo].copy_from_slice(&row[lo..hi]);
                let (c, e) = quantize_slice(&buf, &format, clip)?;
                codes.extend(c);
                scales.push(e as i8);
            }
        }
        Ok(MXTensor { shape: shape.to_vec(), format, codes, scales })
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn inner(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn padded_inner(&self) -> usize {
        let b = self.format.block_size as usize;
        self.inner().div_ceil(b) * b
    }

    pub fn rows(&self) -> usize {
        if self.inner() == 0 {
            0
        } else {
            self.numel() / self.inner()
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.scales.len()
    }

    /// Dequantized values in the unpadded shape.
    pub fn dequantize(&self) -> Result<Vec<f64>, FormatError> {
        let inner = self.inner();
        let padded = self.padded_inner();
        let b = self.format.block_size as usize;
        let mut out = Vec::with_capacity(self.numel());
        for r in 0..self.rows() {
            for c in 0..inner {
                let idx = r * padded + c;
                let s = pow2(self.scales[idx / b] as i32);
                out.push(self.format.decode_element(self.codes[idx])? * s);
            }
        }
        Ok(out)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), FormatError> {
        w.write_all(MAGIC)?;
        w.write_all(&FILE_VERSION.to_le_bytes())?;
        let f = &self.format;
        w.write_all(&[f.kind.code(), f.element_bits, f.exponent_bits, f.mantissa_bits])?;
        w.write_all(&f.block_size.to_le_bytes())?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&pack_codes(&self.codes, f.element_bits as u32))?;
        let scales: Vec<u8> = self.scales.iter().map(|&s| s as u8).collect();
        w.write_all(&scales)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<MXTensor, FormatError> {
        let bad = |m: &str| FormatError::File(m.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("magic mismatch"));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        if u32::from_le_bytes(u32buf) != FILE_VERSION {
            return Err(bad("unsupported version"));
        }
        let mut hdr = [0u8; 4];
        r.read_exact(&mut hdr)?;
        let kind = Kind::from_code(hdr[0]).ok_or_else(|| bad("unknown kind"))?;
        r.read_exact(&mut u32buf)?;
        let block_size = u32::from_le_bytes(u32buf);
        let format = DataFormat {
            kind,
            element_bits: hdr[1],
            exponent_bits: hdr[2],
            mantissa_bits: hdr[3],
            block_size,
            scale_bits: DEFAULT_SCALE_BITS,
        };
        format.validate()?;
        if !format.is_mx() {
            return Err(bad("tensor files hold MX formats only"));
        }
        r.read_exact(&mut u32buf)?;
        let ndim = u32::from_le_bytes(u32buf) as usize;
        if ndim == 0 || ndim > 16 {
            return Err(bad("bad rank"));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut u64buf = [0u8; 8];
        for _ in 0..ndim {
            r.read_exact(&mut u64buf)?;
            shape.push(u64::from_le_bytes(u64buf) as usize);
        }
        let mut t = MXTensor { shape, format, codes: Vec::new(), scales: Vec::new() };
        let n_codes = t.rows() * t.padded_inner();
        let n_scales = n_codes / block_size as usize;
        let mut packed = vec![0u8; packed_len(n_codes, format.element_bits as u32)];
        r.read_exact(&mut packed)?;
        t.codes = unpack_codes(&packed, format.element_bits as u32, n_codes);
        let mut scales = vec![0u8; n_scales];
        r.read_exact(&mut scales)?;
        t.scales = scales.into_iter().map(|s| s as i8).collect();
        for &c in &t.codes {
            format.decode_element(c)?;
        }
        Ok(t)
    }
}

pub fn packed_len(n: usize, bits: u32) -> usize {
    (n * bits as usize).div_ceil(8)
}

/// Bit-pack codes LSB-first into little-endian bytes.
pub fn pack_codes(codes: &[u32], bits: u32) -> Vec<u8> {
    let mut out = vec![0u8; packed_len(codes.len(), bits)];
    let mut pos = 0usize;
    for &c in codes {
        for b in 0..bits {
            if (c >> b) & 1 == 1 {
                out[pos / 8] |= 1 << (pos % 8);
            }
            pos += 1;
        }
    }
    out
}

pub fn unpack_codes(bytes: &[u8], bits: u32, n: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(n);
    let mut pos = 0usize;
    for _ in 0..n {
        let mut c = 0u32;
        for b in 0..bits {
            if (bytes[pos / 8] >> (pos % 8)) & 1 == 1 {
                c |= 1 << b;
            }
            pos += 1;
        }
        out.push(c);
    }
    out
}

/// In-place orthonormal Walsh-Hadamard transform (self-inverse).
pub fn fwht_in_place(v: &mut [f64]) -> Result<(), FormatError> {
    let n = v.len();
    if n == 0 || !n.is_power_of_two() {
        return Err(FormatError::NotPowerOfTwo(n));
    }
    let mut h = 1;
    while h < n {
        for i in (0..n).step_by(2 * h) {
            for j in i..i + h {
                let (a, b) = (v[j], v[j + h]);
                v[j] = a + b;
                v[j + h] = a - b;
            }
        }
        h *= 2;
    }
    let s = 1.0 / (n as f64).sqrt();
    v.iter_mut().for_each(|x| *x *= s);
    Ok(())
}

/// Orthonormal Hadamard transform. With 1/sqrt(n) scaling H = H^T = H^-1,
/// so `inverse` selects the same operation.
pub fn fwht(v: &[f64], inverse: bool) -> Result<Vec<f64>, FormatError> {
    let _ = inverse;
    let mut out = v.to_vec();
    fwht_in_place(&mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mxint4() -> DataFormat {
        DataFormat::mxint(4, 4)
    }

    #[test]
    fn scale_examples() {
        assert_eq!(compute_scale(&[1.0, -2.0, 3.0, 4.0], mxint4()), 0);
        assert_eq!(compute_scale(&[0.0; 4], mxint4()), 0);
        assert_eq!(compute_scale(&[14.0], DataFormat::mxint(4, 1)), 1);
    }

    #[test]
    fn quantize_examples() {
        let (c, e) = quantize_block(&[1.0, -2.0, 3.0, 4.0], mxint4(), 1.0).unwrap();
        assert_eq!(e, 0);
        assert_eq!(dequantize_block(&c, e, mxint4()).unwrap(), vec![1.0, -2.0, 3.0, 4.0]);

        let f2 = DataFormat::mxint(4, 2);
        let (c, e) = quantize_block(&[7.0, -7.0], f2, 1.0).unwrap();
        assert_eq!(dequantize_block(&c, e, f2).unwrap(), vec![7.0, -7.0]);

        let (c, e) = quantize_block(&[7.0, 1.0], f2, 0.5).unwrap();
        assert_eq!(e, -1);
        assert_eq!(f2.decode_element(c[0]).unwrap(), 7.0);
        assert_eq!(dequantize_block(&c, e, f2).unwrap()[0], 3.5);
    }

    #[test]
    fn dequantize_examples() {
        let f1 = DataFormat::mxint(4, 1);
        assert_eq!(dequantize_block(&[7], 1, f1).unwrap(), vec![14.0]);
        assert_eq!(dequantize_block(&[0, 0, 0, 0], 5, mxint4()).unwrap(), vec![0.0; 4]);
        assert!(dequantize_block(&[0b1000], 0, f1).is_err());
        assert!(dequantize_block(&[0x10], 0, f1).is_err());
    }

    #[test]
    fn quantize_rejects_bad_input() {
        assert!(matches!(
            quantize_block(&[f64::NAN, 0.0, 0.0, 0.0], mxint4(), 1.0),
            Err(FormatError::NonFinite(_))
        ));
        assert!(quantize_block(&[1.0; 4], mxint4(), 0.0).is_err());
        assert!(quantize_block(&[1.0; 3], mxint4(), 1.0).is_err());
    }

    #[test]
    fn minifloat_examples() {
        let e6m5 = DataFormat::minifloat(6, 5);
        let z = cast_minifloat(0.0, e6m5).unwrap();
        assert_eq!((z.sign, z.exponent, z.mantissa), (0, 0, 0));
        let one = cast_minifloat(1.0, e6m5).unwrap();
        assert_eq!(one.exponent as i32, e6m5.bias());
        assert_eq!(one.mantissa, 0);
        assert_eq!(one.to_f64(), 1.0);
        let v = cast_minifloat(1.03, e6m5).unwrap().to_f64();
        assert!((v - 1.03).abs() / 1.03 <= 2f64.powi(-6));
        assert!(cast_minifloat(f64::NAN, e6m5).is_err());
        let big = cast_minifloat(1e300, e6m5).unwrap().to_f64();
        assert_eq!(big, e6m5.max_value());
    }

    #[test]
    fn known_float_maxima() {
        assert_eq!(DataFormat::mxfp(2, 1, 32).max_value(), 6.0);
        assert_eq!(DataFormat::mxfp(4, 3, 32).max_value(), 480.0);
        assert_eq!(DataFormat::mxfp(1, 2, 32).max_value(), 3.5);
        assert_eq!(DataFormat::mxint(8, 32).max_value(), 127.0);
    }

    #[test]
    fn names_roundtrip() {
        for n in ["MXINT4", "MXINT8@32", "MXFP_E4M3", "MXFP_E2M1@8", "E6M5", "E8M5"] {
            let f: DataFormat = n.parse().unwrap();
            assert_eq!(f.to_string(), n);
        }
        assert!("MXQ4".parse::<DataFormat>().is_err());
        let j = serde_json::to_string(&DataFormat::mxint(4, 16)).unwrap();
        assert_eq!(j, "\"MXINT4\"");
    }

    #[test]
    fn fwht_examples() {
        assert_eq!(fwht(&[1.0, 0.0, 0.0, 0.0], false).unwrap(), vec![0.5; 4]);
        assert!(matches!(fwht(&[1.0, 2.0, 3.0], false), Err(FormatError::NotPowerOfTwo(3))));
    }

    #[test]
    fn tensor_padding_and_file() {
        let data: Vec<f64> = (0..30).map(|i| i as f64 * 0.37 - 4.0).collect();
        let t = MXTensor::quantize(&data, &[3, 10], DataFormat::mxint(4, 4)).unwrap();
        assert_eq!(t.padded_inner(), 12);
        assert_eq!(t.scales.len(), 9);
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let back = MXTensor::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.dequantize().unwrap().len(), 30);
    }
}
