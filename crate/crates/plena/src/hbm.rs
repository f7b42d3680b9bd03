//! Off-chip memory: region layout (element blocks first, scales trailing),
//! the image with its manifest, and a flat bandwidth/latency channel.
//!
//! Timing contract: the channel serves bytes in request order at
//! `floor(bandwidth_gbps / clock_ghz)` bytes per cycle. A row becomes
//! ready `fixed_latency_cycles` after the cycle its last byte is served,
//! so an isolated transfer of `n` bytes issued at `t` is fully ready at
//! `t + fixed_latency + ceil(n / budget)`.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formats::{pack_codes, unpack_codes, DataFormat, FormatError, Kind, MXTensor};

#[derive(Debug, Error)]
pub enum HbmError {
    #[error("capacity exceeded: need {need} bytes, capacity {capacity}")]
    Capacity { need: u64, capacity: u64 },
    #[error("base {0:#x} is not aligned")]
    Misaligned(u64),
    #[error("region `{0}` already exists")]
    Duplicate(String),
    #[error("no region named `{0}`")]
    UnknownRegion(String),
    #[error("no region at base {0:#x}")]
    NoRegionAt(u64),
    #[error("access {offset}+{len} outside region `{region}` of {size} elements")]
    OutOfRange { region: String, offset: u64, len: u64, size: u64 },
    #[error("store to `{region}` at element {offset} is not block aligned")]
    Unaligned { region: String, offset: u64 },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HbmConfig {
    pub capacity_bytes: u64,
    pub bandwidth_gbps: f64,
    pub fixed_latency_cycles: u64,
    pub alignment: u64,
}

impl Default for HbmConfig {
    fn default() -> Self {
        HbmConfig {
            capacity_bytes: 1 << 32,
            bandwidth_gbps: 1024.0,
            fixed_latency_cycles: 100,
            alignment: 64,
        }
    }
}

impl HbmConfig {
    /// Per-cycle byte budget, rounded down; at least one byte.
    pub fn bytes_per_cycle(&self, clock_ghz: f64) -> u64 {
        let b = (self.bandwidth_gbps / clock_ghz).floor();
        if b >= u64::MAX as f64 {
            u64::MAX
        } else {
            (b as u64).max(1)
        }
    }
}

/// One tensor stored in HBM: `rows × cols` elements (cols already padded
/// to the block size), codes bit-packed from `base`, scales at
/// `base + scale_offset`. Minifloat regions have no scale area.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    pub base: u64,
    pub rows: usize,
    pub cols: usize,
    pub format: DataFormat,
    pub scale_offset: u64,
    pub len: u64,
}

impl Region {
    pub fn elements(&self) -> u64 {
        (self.rows * self.cols) as u64
    }

    fn block(&self) -> u64 {
        if self.format.is_mx() {
            self.format.block_size as u64
        } else {
            1
        }
    }

    /// Bytes moved when transferring `n` elements starting at a block
    /// boundary: packed codes plus one scale byte per block touched.
    pub fn transfer_bytes(&self, n: u64) -> u64 {
        let codes = (n * self.format.element_bits as u64).div_ceil(8);
        if self.format.is_mx() {
            codes + n.div_ceil(self.block())
        } else {
            codes
        }
    }
}

fn region_sizes(rows: usize, cols: usize, fmt: &DataFormat) -> (u64, u64) {
    let n = (rows * cols) as u64;
    let code_bytes = (n * fmt.element_bits as u64).div_ceil(8);
    let scale_bytes = if fmt.is_mx() { n / fmt.block_size as u64 } else { 0 };
    (code_bytes, scale_bytes)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    config: HbmConfig,
    regions: Vec<Region>,
    blob_len: u64,
}

/// Address map plus backing bytes.
#[derive(Debug, Clone)]
pub struct HbmImage {
    pub config: HbmConfig,
    regions: BTreeMap<String, Region>,
    by_base: BTreeMap<u64, String>,
    data: Vec<u8>,
    next_free: u64,
}

impl HbmImage {
    pub fn new(config: HbmConfig) -> HbmImage {
        HbmImage { config, regions: BTreeMap::new(), by_base: BTreeMap::new(), data: Vec::new(), next_free: 0 }
    }

    pub fn regions(&self) -> impl Iterator<Item = &Region> {
        self.regions.values()
    }

    pub fn region(&self, name: &str) -> Result<&Region, HbmError> {
        self.regions.get(name).ok_or_else(|| HbmError::UnknownRegion(name.to_string()))
    }

    pub fn region_at(&self, base: u64) -> Result<&Region, HbmError> {
        let name = self.by_base.get(&base).ok_or(HbmError::NoRegionAt(base))?;
        Ok(&self.regions[name])
    }

    pub fn used_bytes(&self) -> u64 {
        self.next_free
    }

    fn aligned(&self, v: u64) -> u64 {
        v.div_ceil(self.config.alignment) * self.config.alignment
    }

    fn reserve(&mut self, name: &str, base: u64, rows: usize, cols: usize, format: DataFormat) -> Result<Region, HbmError> {
        if self.regions.contains_key(name) {
            return Err(HbmError::Duplicate(name.to_string()));
        }
        if base % self.config.alignment != 0 {
            return Err(HbmError::Misaligned(base));
        }
        let (code_bytes, scale_bytes) = region_sizes(rows, cols, &format);
        let len = code_bytes + scale_bytes;
        let end = base + len;
        if end > self.config.capacity_bytes {
            return Err(HbmError::Capacity { need: end, capacity: self.config.capacity_bytes });
        }
        if self.regions.values().any(|r| base < r.base + r.len.max(1) && r.base < end.max(base + 1)) {
            return Err(HbmError::Misaligned(base));
        }
        if self.data.len() < end as usize {
            self.data.resize(end as usize, 0);
        }
        let region = Region { name: name.to_string(), base, rows, cols, format, scale_offset: code_bytes, len };
        self.regions.insert(name.to_string(), region.clone());
        self.by_base.insert(base, name.to_string());
        self.next_free = self.next_free.max(self.aligned(end));
        Ok(region)
    }

    /// Place an MX tensor at `base`: codes first, scales after them.
    pub fn layout_tensor(&mut self, name: &str, t: &MXTensor, base: u64) -> Result<Region, HbmError> {
        let region = self.reserve(name, base, t.rows(), t.padded_inner(), t.format)?;
        let codes = pack_codes(&t.codes, t.format.element_bits as u32);
        let b = base as usize;
        self.data[b..b + codes.len()].copy_from_slice(&codes);
        let s = (base + region.scale_offset) as usize;
        for (i, &e) in t.scales.iter().enumerate() {
            self.data[s + i] = e as u8;
        }
        Ok(region)
    }

    /// Place an MX tensor at the next aligned free address.
    pub fn alloc_tensor(&mut self, name: &str, t: &MXTensor) -> Result<Region, HbmError> {
        let base = self.aligned(self.next_free);
        self.layout_tensor(name, t, base)
    }

    /// Reserve a zero-filled region (codes 0, exponents 0).
    pub fn alloc_zeroed(&mut self, name: &str, rows: usize, cols: usize, format: DataFormat) -> Result<Region, HbmError> {
        let cols = if format.is_mx() { cols.div_ceil(format.block_size as usize) * format.block_size as usize } else { cols };
        let base = self.aligned(self.next_free);
        self.reserve(name, base, rows, cols, format)
    }

    /// Store row-major values in a minifloat region.
    pub fn alloc_minifloat(&mut self, name: &str, values: &[f64], rows: usize, cols: usize, format: DataFormat) -> Result<Region, HbmError> {
        if format.kind != Kind::MiniFloat || values.len() != rows * cols {
            return Err(HbmError::Manifest(format!("bad minifloat region `{name}`")));
        }
        let region = self.alloc_zeroed(name, rows, cols, format)?;
        self.write_elements(&region.clone(), 0, values)?;
        Ok(region)
    }

    /// Decode `n` elements starting at flat element `offset`.
    pub fn read_elements(&self, region: &Region, offset: u64, n: u64) -> Result<Vec<f64>, HbmError> {
        if offset + n > region.elements() {
            return Err(HbmError::OutOfRange { region: region.name.clone(), offset, len: n, size: region.elements() });
        }
        let bits = region.format.element_bits as u64;
        let mut out = Vec::with_capacity(n as usize);
        let block = region.block();
        for e in offset..offset + n {
            let code = read_bits(&self.data, region.base * 8 + e * bits, bits as u32);
            let v = region.format.decode_element(code)?;
            let s = if region.format.is_mx() {
                let exp = self.data[(region.base + region.scale_offset + e / block) as usize] as i8;
                2f64.powi(exp as i32)
            } else {
                1.0
            };
            out.push(v * s);
        }
        Ok(out)
    }

    /// Quantize `values` into the region at flat element `offset`. For MX
    /// regions the span must start on a block boundary; a trailing partial
    /// block is zero-padded.
    pub fn write_elements(&mut self, region: &Region, offset: u64, values: &[f64]) -> Result<(), HbmError> {
        let n = values.len() as u64;
        if offset + n > region.elements() {
            return Err(HbmError::OutOfRange { region: region.name.clone(), offset, len: n, size: region.elements() });
        }
        let bits = region.format.element_bits as u32;
        if region.format.is_mx() {
            let b = region.format.block_size as u64;
            if offset % b != 0 {
                return Err(HbmError::Unaligned { region: region.name.clone(), offset });
            }
            let mut padded = values.to_vec();
            padded.resize((n.div_ceil(b) * b) as usize, 0.0);
            if offset + padded.len() as u64 > region.elements() {
                return Err(HbmError::Unaligned { region: region.name.clone(), offset });
            }
            let t = MXTensor::quantize(&padded, &[padded.len()], region.format)?;
            for (i, &c) in t.codes.iter().enumerate() {
                write_bits(&mut self.data, region.base * 8 + (offset + i as u64) * bits as u64, bits, c);
            }
            for (i, &e) in t.scales.iter().enumerate() {
                self.data[(region.base + region.scale_offset + offset / b) as usize + i] = e as u8;
            }
        } else {
            for (i, &v) in values.iter().enumerate() {
                if !v.is_finite() {
                    return Err(FormatError::NonFinite(v).into());
                }
                let c = region.format.encode_element(v);
                write_bits(&mut self.data, region.base * 8 + (offset + i as u64) * bits as u64, bits, c);
            }
        }
        Ok(())
    }

    /// Reassemble an MX region as a tensor with the region's padded shape.
    pub fn read_tensor(&self, name: &str) -> Result<MXTensor, HbmError> {
        let r = self.region(name)?;
        if !r.format.is_mx() {
            return Err(HbmError::Manifest(format!("region `{name}` is not MX")));
        }
        let n = r.elements() as usize;
        let bytes = &self.data[r.base as usize..(r.base + r.scale_offset) as usize];
        let codes = unpack_codes(bytes, r.format.element_bits as u32, n);
        let s0 = (r.base + r.scale_offset) as usize;
        let scales = self.data[s0..s0 + n / r.format.block_size as usize].iter().map(|&b| b as i8).collect();
        Ok(MXTensor { shape: vec![r.rows, r.cols], format: r.format, codes, scales })
    }

    /// Write `<stem>.json` (manifest) and `<stem>.bin` (blob).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(), HbmError> {
        let manifest = Manifest {
            config: self.config,
            regions: self.regions.values().cloned().collect(),
            blob_len: self.data.len() as u64,
        };
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&manifest)?)?;
        std::fs::write(dir.join(format!("{stem}.bin")), &self.data)?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<HbmImage, HbmError> {
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        let data = std::fs::read(dir.join(format!("{stem}.bin")))?;
        if data.len() as u64 != manifest.blob_len {
            return Err(HbmError::Manifest("blob length mismatch".into()));
        }
        let mut img = HbmImage::new(manifest.config);
        for r in manifest.regions {
            if r.base + r.len > data.len() as u64 {
                return Err(HbmError::Manifest(format!("region `{}` exceeds blob", r.name)));
            }
            img.next_free = img.next_free.max(img.aligned(r.base + r.len));
            img.by_base.insert(r.base, r.name.clone());
            img.regions.insert(r.name.clone(), r);
        }
        img.data = data;
        Ok(img)
    }
}

fn read_bits(data: &[u8], bit: u64, n: u32) -> u32 {
    let mut v = 0u32;
    for i in 0..n as u64 {
        let p = bit + i;
        if (data[(p / 8) as usize] >> (p % 8)) & 1 == 1 {
            v |= 1 << i;
        }
    }
    v
}

fn write_bits(data: &mut [u8], bit: u64, n: u32, v: u32) {
    for i in 0..n as u64 {
        let p = bit + i;
        let byte = &mut data[(p / 8) as usize];
        if (v >> i) & 1 == 1 {
            *byte |= 1 << (p % 8);
        } else {
            *byte &= !(1 << (p % 8));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Engine {
    Matrix,
    Vector,
    Store,
}

/// Request-order channel with a per-cycle byte budget. Computes ready
/// cycles at submission time; equivalent to stepping [`HbmController`]
/// when requests arrive in distinct cycles.
#[derive(Debug, Clone)]
pub struct Channel {
    budget: u64,
    latency: u64,
    cursor: u128,
    pub bytes: u64,
}

impl Channel {
    pub fn new(budget: u64, latency: u64) -> Channel {
        Channel { budget: budget.max(1), latency, cursor: 0, bytes: 0 }
    }

    /// Submit a transfer of rows with the given sizes at `cycle`; returns
    /// each row's ready cycle.
    pub fn submit(&mut self, cycle: u64, row_bytes: &[u64]) -> Vec<u64> {
        let b = self.budget as u128;
        let mut pos = self.cursor.max(cycle as u128 * b);
        let mut out = Vec::with_capacity(row_bytes.len());
        for &n in row_bytes {
            pos += n as u128;
            self.bytes += n;
            // cycle in which the last byte of this row is served
            let last = if n == 0 { pos / b } else { (pos - 1) / b };
            out.push((last as u64).saturating_add(1).saturating_add(self.latency));
        }
        self.cursor = pos;
        out
    }
}

/// Handle of a queued transfer.
pub type TransferId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeliveredRow {
    pub transfer: TransferId,
    pub engine: Engine,
    pub row: usize,
    pub ready_cycle: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone)]
struct Queued {
    id: TransferId,
    enqueued: u64,
    rows: Vec<u64>,
    next_row: usize,
    served_in_row: u64,
}

/// Cycle-stepped model with one FIFO per engine. Each cycle the budget
/// goes to the oldest pending transfer across engines; ties between
/// engines enqueued in the same cycle rotate round-robin.
#[derive(Debug, Clone)]
pub struct HbmController {
    budget: u64,
    latency: u64,
    pub cycle: u64,
    queues: BTreeMap<Engine, VecDeque<Queued>>,
    next_id: TransferId,
    rr: usize,
    pub served_bytes: u64,
    pub requested_bytes: u64,
}

const ENGINES: [Engine; 3] = [Engine::Matrix, Engine::Vector, Engine::Store];

impl HbmController {
    pub fn new(budget: u64, latency: u64) -> HbmController {
        let queues = ENGINES.iter().map(|&e| (e, VecDeque::new())).collect();
        HbmController { budget: budget.max(1), latency, cycle: 0, queues, next_id: 0, rr: 0, served_bytes: 0, requested_bytes: 0 }
    }

    pub fn enqueue(&mut self, engine: Engine, row_bytes: Vec<u64>) -> TransferId {
        let id = self.next_id;
        self.next_id += 1;
        self.requested_bytes += row_bytes.iter().sum::<u64>();
        let q = Queued { id, enqueued: self.cycle, rows: row_bytes, next_row: 0, served_in_row: 0 };
        self.queues.get_mut(&engine).unwrap().push_back(q);
        id
    }

    pub fn is_idle(&self) -> bool {
        self.queues.values().all(VecDeque::is_empty)
    }

    fn pick(&self) -> Option<Engine> {
        let oldest = self.queues.values().filter_map(|q| q.front().map(|t| t.enqueued)).min()?;
        (0..ENGINES.len())
            .map(|k| ENGINES[(self.rr + k) % ENGINES.len()])
            .find(|e| self.queues[e].front().is_some_and(|t| t.enqueued == oldest))
    }

    /// Serve one cycle's budget; returns rows whose last byte was served.
    pub fn service_cycle(&mut self) -> Vec<DeliveredRow> {
        let mut left = self.budget;
        let mut done = Vec::new();
        while left > 0 {
            let Some(engine) = self.pick() else { break };
            let q = self.queues.get_mut(&engine).unwrap();
            let t = q.front_mut().unwrap();
            while left > 0 && t.next_row < t.rows.len() {
                let need = t.rows[t.next_row] - t.served_in_row;
                let take = need.min(left);
                left -= take;
                t.served_in_row += take;
                self.served_bytes += take;
                if t.served_in_row == t.rows[t.next_row] {
                    done.push(DeliveredRow {
                        transfer: t.id,
                        engine,
                        row: t.next_row,
                        ready_cycle: self.cycle + 1 + self.latency,
                        bytes: t.rows[t.next_row],
                    });
                    t.next_row += 1;
                    t.served_in_row = 0;
                }
            }
            if t.next_row == t.rows.len() {
                q.pop_front();
                self.rr = (ENGINES.iter().position(|&e| e == engine).unwrap() + 1) % ENGINES.len();
            }
        }
        self.cycle += 1;
        done
    }
}
