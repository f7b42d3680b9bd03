//! Instruction builder. Tracks known integer register contents so address
//! materialization reuses registers or bridges from a nearby value with a
//! single `S_ADDI_INT`.

use std::collections::BTreeMap;

use crate::hbm::Region;
use crate::isa::{Instruction, Mnemonic, Program, IMM_MAX};

/// Scratch for constants that need a multiply; holds 2048 once set.
const SHIFT_REG: u8 = 31;
const POOL: std::ops::RangeInclusive<u8> = 1..=30;
const ADDI_MAX: i64 = 1023;

#[derive(Debug, Clone)]
pub struct Emitter {
    pub insts: Vec<Instruction>,
    vals: [Option<i64>; 32],
    used: [u64; 32],
    tick: u64,
    addr: BTreeMap<u64, (u8, i64)>,
    addr_next: u8,
    scale: Option<i64>,
    lut: Option<i64>,
}

impl Default for Emitter {
    fn default() -> Self {
        Self::new()
    }
}

impl Emitter {
    pub fn new() -> Emitter {
        let mut vals = [None; 32];
        vals[0] = Some(0);
        Emitter { insts: Vec::new(), vals, used: [0; 32], tick: 0, addr: BTreeMap::new(), addr_next: 1, scale: None, lut: None }
    }

    pub fn push(&mut self, m: Mnemonic, rd: u8, rs1: u8, rs2: u8, imm: i32) {
        self.insts.push(Instruction::new(m, rd, rs1, rs2, imm));
    }

    pub fn finish(mut self) -> Program {
        self.push(Mnemonic::C_BREAK, 0, 0, 0, 0);
        Program::new(self.insts)
    }

    fn touch(&mut self, r: u8) {
        self.tick += 1;
        self.used[r as usize] = self.tick;
    }

    fn li(&mut self, r: u8, v: i64) {
        if v < 0 {
            self.li(r, -v);
            self.push(Mnemonic::S_SUB_INT, r, 0, r, 0);
        } else if v <= ADDI_MAX {
            self.push(Mnemonic::S_ADDI_INT, r, 0, 0, v as i32);
        } else {
            let hi = (v + 1024) >> 11;
            let lo = v - (hi << 11);
            if hi <= IMM_MAX as i64 {
                self.push(Mnemonic::S_LUI_INT, r, 0, 0, hi as i32);
            } else {
                self.li(r, hi);
                if self.vals[SHIFT_REG as usize] != Some(2048) {
                    self.push(Mnemonic::S_LUI_INT, SHIFT_REG, 0, 0, 1);
                    self.vals[SHIFT_REG as usize] = Some(2048);
                }
                self.push(Mnemonic::S_MUL_INT, r, r, SHIFT_REG, 0);
            }
            if lo != 0 {
                self.push(Mnemonic::S_ADDI_INT, r, r, 0, lo as i32);
            }
        }
        self.vals[r as usize] = Some(v);
    }

    /// A register holding `v`, materializing it if needed.
    pub fn reg(&mut self, v: i64) -> u8 {
        if v == 0 {
            return 0;
        }
        if let Some(r) = POOL.clone().find(|&r| self.vals[r as usize] == Some(v)) {
            self.touch(r);
            return r;
        }
        let victim = POOL.clone().min_by_key(|&r| (self.vals[r as usize].is_some(), self.used[r as usize])).unwrap();
        let near = (0..32u8)
            .filter_map(|r| self.vals[r as usize].map(|w| (r, v - w)))
            .filter(|&(_, d)| d.abs() <= ADDI_MAX)
            .min_by_key(|&(_, d)| d.abs());
        match near {
            Some((src, d)) => self.push(Mnemonic::S_ADDI_INT, victim, src, 0, d as i32),
            None => self.li(victim, v),
        }
        self.vals[victim as usize] = Some(v);
        self.touch(victim);
        victim
    }

    /// Address register bound to `region`, with row stride = region columns.
    pub fn addr_reg(&mut self, region: &Region) -> u8 {
        let stride = region.cols as i64;
        if let Some(&(a, s)) = self.addr.get(&region.base) {
            if s == stride {
                return a;
            }
        }
        let a = self.addr_next;
        self.addr_next = if self.addr_next == 31 { 1 } else { self.addr_next + 1 };
        self.addr.retain(|_, (r, _)| *r != a);
        let base = self.reg(region.base as i64);
        let st = self.reg(stride);
        self.push(Mnemonic::C_SET_ADDR_REG, a, base, st, 0);
        self.addr.insert(region.base, (a, stride));
        a
    }

    fn ensure_scale(&mut self, region: &Region) {
        let want = if region.format.is_mx() { region.scale_offset as i64 } else { return };
        if self.scale != Some(want) {
            let r = self.reg(want);
            self.push(Mnemonic::C_SET_SCALE_REG, r, 0, 0, 0);
            self.scale = Some(want);
        }
    }

    pub fn set_lut(&mut self, idx: i64) {
        if self.lut != Some(idx) {
            let r = self.reg(idx);
            self.push(Mnemonic::C_SET_LUT_REG, r, 0, 0, 0);
            self.lut = Some(idx);
        }
    }

    /// Memory transfer of `count` rows, split at the immediate limit. The
    /// HBM side advances by the region's row stride, the SRAM side by
    /// `dst_step` (1 for matrix rows, VLEN for vector rows).
    pub fn transfer(&mut self, m: Mnemonic, dst: usize, dst_step: usize, region: &Region, offset: usize, count: usize) {
        let mut done = 0;
        while done < count {
            let n = (count - done).min(IMM_MAX as usize);
            let a = self.addr_reg(region);
            self.ensure_scale(region);
            let rd = self.reg((dst + done * dst_step) as i64);
            let rs2 = self.reg((offset + done * region.cols) as i64);
            self.push(m, rd, a, rs2, n as i32);
            done += n;
        }
    }

    pub fn vv(&mut self, m: Mnemonic, d: usize, a: usize, b: usize) {
        let (rd, ra, rb) = self.three(d, a, b);
        self.push(m, rd, ra, rb, 0);
    }

    fn three(&mut self, d: usize, a: usize, b: usize) -> (u8, u8, u8) {
        let rd = self.reg(d as i64);
        let ra = self.reg(a as i64);
        let rb = self.reg(b as i64);
        (rd, ra, rb)
    }

    pub fn vf(&mut self, m: Mnemonic, d: usize, a: usize, f: u8) {
        let rd = self.reg(d as i64);
        let ra = self.reg(a as i64);
        self.push(m, rd, ra, f, 0);
    }

    pub fn v1(&mut self, m: Mnemonic, d: usize, a: usize) {
        let rd = self.reg(d as i64);
        let ra = self.reg(a as i64);
        self.push(m, rd, ra, 0, 0);
    }

    pub fn red(&mut self, m: Mnemonic, f: u8, a: usize) {
        let ra = self.reg(a as i64);
        self.push(m, f, ra, 0, 0);
    }

    pub fn vld(&mut self, d: usize, f: u8) {
        let rd = self.reg(d as i64);
        self.push(Mnemonic::V_LD_F, rd, f, 0, 0);
    }

    pub fn mm(&mut self, m: Mnemonic, a: usize, b: usize) {
        let ra = self.reg(a as i64);
        let rb = self.reg(b as i64);
        self.push(m, 0, ra, rb, 0);
    }

    pub fn wo(&mut self, m: Mnemonic, d: usize) {
        let rd = self.reg(d as i64);
        self.push(m, rd, 0, 0, 0);
    }

    pub fn fp_mem(&mut self, m: Mnemonic, f: u8, addr: usize) {
        if addr <= IMM_MAX as usize {
            self.push(m, f, 0, 0, addr as i32);
        } else {
            let r = self.reg(addr as i64);
            self.push(m, f, r, 0, 0);
        }
    }

    pub fn fop(&mut self, m: Mnemonic, d: u8, a: u8, b: u8) {
        self.push(m, d, a, b, 0);
    }
}
