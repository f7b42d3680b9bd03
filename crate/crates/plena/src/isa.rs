//! The 32-bit instruction set: opcode table, encoding, assembler and
//! disassembler, and the `PLSM` binary program file.
//!
//! Field layout (the ABI of this crate):
//!
//! ```text
//!  31      26 25   21 20   16 15   11 10          0
//! +----------+-------+-------+-------+-------------+
//! |  opcode  |  rd   |  rs1  |  rs2  |     imm     |
//! +----------+-------+-------+-------+-------------+
//! ```
//!
//! Opcode 0 is reserved. Fields a mnemonic does not use must be zero, so
//! decoding is injective. Immediates are zero-extended for addresses and
//! row counts and sign-extended for arithmetic (`S_ADDI_INT`).

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

const MAGIC: &[u8; 4] = b"PLSM";
pub const IMM_BITS: u32 = 11;
pub const IMM_MAX: i32 = (1 << IMM_BITS) - 1;
pub const NUM_REGS: u8 = 32;

#[derive(Debug, Error)]
pub enum IsaError {
    #[error("illegal instruction word {0:#010x}")]
    IllegalInstruction(u32),
    #[error("{mnemonic}: field {field} value {value} out of range")]
    FieldOverflow { mnemonic: Mnemonic, field: &'static str, value: i64 },
    #[error("line {line}: {msg}")]
    Asm { line: usize, msg: String },
    #[error("bad program file: {0}")]
    File(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Class {
    Matrix,
    Vector,
    Scalar,
    Memory,
    Control,
}

/// Register file a field refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reg {
    Int,
    Fp,
    Addr,
}

impl Reg {
    fn prefix(self) -> char {
        match self {
            Reg::Int => 'x',
            Reg::Fp => 'f',
            Reg::Addr => 'a',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Imm {
    None,
    Unsigned,
    Signed,
}

/// Which fields a mnemonic uses, in assembly operand order rd, rs1, rs2, imm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Operands {
    pub rd: Option<Reg>,
    pub rs1: Option<Reg>,
    pub rs2: Option<Reg>,
    pub imm: Imm,
}

macro_rules! isa_table {
    ($( $name:ident = $op:expr, $class:ident, [$($rd:ident)?, $($rs1:ident)?, $($rs2:ident)?, $imm:ident]; )*) => {
        #[allow(non_camel_case_types)]
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum Mnemonic { $($name),* }

        impl Mnemonic {
            pub const ALL: &'static [Mnemonic] = &[$(Mnemonic::$name),*];

            pub fn opcode(self) -> u32 {
                match self { $(Mnemonic::$name => $op),* }
            }

            pub fn class(self) -> Class {
                match self { $(Mnemonic::$name => Class::$class),* }
            }

            pub fn operands(self) -> Operands {
                match self {
                    $(Mnemonic::$name => Operands {
                        rd: None $(.or(Some(Reg::$rd)))?,
                        rs1: None $(.or(Some(Reg::$rs1)))?,
                        rs2: None $(.or(Some(Reg::$rs2)))?,
                        imm: Imm::$imm,
                    }),*
                }
            }

            pub fn name(self) -> &'static str {
                match self { $(Mnemonic::$name => stringify!($name)),* }
            }
        }
    };
}

isa_table! {
    M_MM = 1, Matrix, [Int, Int, Int, None];
    M_TMM = 2, Matrix, [Int, Int, Int, None];
    M_MV = 3, Matrix, [Int, Int, Int, None];
    M_TMV = 4, Matrix, [Int, Int, Int, None];
    M_MV_WO = 5, Matrix, [Int, , , Unsigned];
    M_MM_WO = 6, Matrix, [Int, , , Unsigned];

    V_ADD_VV = 8, Vector, [Int, Int, Int, None];
    V_ADD_VF = 9, Vector, [Int, Int, Fp, None];
    V_SUB_VV = 10, Vector, [Int, Int, Int, None];
    V_SUB_VF = 11, Vector, [Int, Int, Fp, None];
    V_MUL_VV = 12, Vector, [Int, Int, Int, None];
    V_MUL_VF = 13, Vector, [Int, Int, Fp, None];
    V_EXP_V = 14, Vector, [Int, Int, , None];
    V_REC_V = 15, Vector, [Int, Int, , None];
    V_LD_F = 16, Vector, [Int, Fp, , None];
    V_RED_SUM = 17, Vector, [Fp, Int, , None];
    V_RED_MAX = 18, Vector, [Fp, Int, , None];
    V_ROTATION_EN = 19, Vector, [Int, Int, , None];
    V_INV_ROTATION_EN = 20, Vector, [Int, Int, , None];

    S_ADD_INT = 24, Scalar, [Int, Int, Int, None];
    S_ADDI_INT = 25, Scalar, [Int, Int, , Signed];
    S_SUB_INT = 26, Scalar, [Int, Int, Int, None];
    S_LUI_INT = 27, Scalar, [Int, , , Unsigned];
    S_MUL_INT = 28, Scalar, [Int, Int, Int, None];
    S_DIV_INT = 29, Scalar, [Int, Int, Int, None];
    S_LD_INT = 30, Scalar, [Int, Int, , Unsigned];
    S_ST_INT = 31, Scalar, [Int, Int, , Unsigned];
    S_ADD_FP = 32, Scalar, [Fp, Fp, Fp, None];
    S_SUB_FP = 33, Scalar, [Fp, Fp, Fp, None];
    S_MUL_FP = 34, Scalar, [Fp, Fp, Fp, None];
    S_EXP_FP = 35, Scalar, [Fp, Fp, , None];
    S_MAX_FP = 36, Scalar, [Fp, Fp, Fp, None];
    S_LD_FP = 37, Scalar, [Fp, Int, , Unsigned];
    S_ST_FP = 38, Scalar, [Fp, Int, , Unsigned];
    S_LUT_FP = 39, Scalar, [Fp, Fp, , None];
    S_NOP = 40, Scalar, [, , , None];

    H_PREFETCH_M = 48, Memory, [Int, Addr, Int, Unsigned];
    H_PREFETCH_V = 49, Memory, [Int, Addr, Int, Unsigned];
    H_STORE_V = 50, Memory, [Int, Addr, Int, Unsigned];

    C_SET_ADDR_REG = 56, Control, [Addr, Int, Int, None];
    C_SET_SCALE_REG = 57, Control, [Int, , , None];
    C_SET_LUT_REG = 58, Control, [Int, , , None];
    C_BREAK = 63, Control, [, , , None];
}

impl Mnemonic {
    pub fn from_opcode(op: u32) -> Option<Mnemonic> {
        Mnemonic::ALL.iter().copied().find(|m| m.opcode() == op)
    }

    pub fn from_name(s: &str) -> Option<Mnemonic> {
        Mnemonic::ALL.iter().copied().find(|m| m.name() == s)
    }
}

impl fmt::Display for Mnemonic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Nonlinear functions selectable through `C_SET_LUT_REG`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LutFn {
    Exp = 0,
    Reciprocal = 1,
    Rsqrt = 2,
}

impl LutFn {
    pub fn from_index(i: i64) -> Option<LutFn> {
        match i {
            0 => Some(LutFn::Exp),
            1 => Some(LutFn::Reciprocal),
            2 => Some(LutFn::Rsqrt),
            _ => None,
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            LutFn::Exp => x.exp(),
            LutFn::Reciprocal => 1.0 / x,
            LutFn::Rsqrt => 1.0 / x.sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub mnemonic: Mnemonic,
    pub rd: u8,
    pub rs1: u8,
    pub rs2: u8,
    pub imm: i32,
}

impl Instruction {
    pub fn new(mnemonic: Mnemonic, rd: u8, rs1: u8, rs2: u8, imm: i32) -> Instruction {
        Instruction { mnemonic, rd, rs1, rs2, imm }
    }

    pub fn nullary(mnemonic: Mnemonic) -> Instruction {
        Instruction::new(mnemonic, 0, 0, 0, 0)
    }

    pub fn class(&self) -> Class {
        self.mnemonic.class()
    }

    pub fn encode(&self) -> Result<u32, IsaError> {
        let m = self.mnemonic;
        let ops = m.operands();
        let overflow = |field, value: i64| IsaError::FieldOverflow { mnemonic: m, field, value };
        let reg = |used: Option<Reg>, v: u8, field| {
            if used.is_none() && v != 0 || v >= NUM_REGS {
                Err(overflow(field, v as i64))
            } else {
                Ok(v as u32)
            }
        };
        let rd = reg(ops.rd, self.rd, "rd")?;
        let rs1 = reg(ops.rs1, self.rs1, "rs1")?;
        let rs2 = reg(ops.rs2, self.rs2, "rs2")?;
        let imm = match ops.imm {
            Imm::None if self.imm != 0 => return Err(overflow("imm", self.imm as i64)),
            Imm::None => 0,
            Imm::Unsigned if !(0..=IMM_MAX).contains(&self.imm) => return Err(overflow("imm", self.imm as i64)),
            Imm::Unsigned => self.imm as u32,
            Imm::Signed => {
                let half = 1 << (IMM_BITS - 1);
                if !(-half..half).contains(&self.imm) {
                    return Err(overflow("imm", self.imm as i64));
                }
                (self.imm as u32) & IMM_MAX as u32
            }
        };
        Ok(m.opcode() << 26 | rd << 21 | rs1 << 16 | rs2 << 11 | imm)
    }

    pub fn decode(w: u32) -> Result<Instruction, IsaError> {
        let illegal = || IsaError::IllegalInstruction(w);
        let m = Mnemonic::from_opcode(w >> 26).ok_or_else(illegal)?;
        let ops = m.operands();
        let rd = ((w >> 21) & 31) as u8;
        let rs1 = ((w >> 16) & 31) as u8;
        let rs2 = ((w >> 11) & 31) as u8;
        let raw = (w & IMM_MAX as u32) as i32;
        if ops.rd.is_none() && rd != 0 || ops.rs1.is_none() && rs1 != 0 || ops.rs2.is_none() && rs2 != 0 {
            return Err(illegal());
        }
        let imm = match ops.imm {
            Imm::None if raw != 0 => return Err(illegal()),
            Imm::None => 0,
            Imm::Unsigned => raw,
            Imm::Signed => (raw << (32 - IMM_BITS)) >> (32 - IMM_BITS),
        };
        Ok(Instruction { mnemonic: m, rd, rs1, rs2, imm })
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ops = self.mnemonic.operands();
        let mut parts = Vec::new();
        for (r, v) in [(ops.rd, self.rd), (ops.rs1, self.rs1), (ops.rs2, self.rs2)] {
            if let Some(r) = r {
                parts.push(format!("{}{}", r.prefix(), v));
            }
        }
        if ops.imm != Imm::None {
            parts.push(self.imm.to_string());
        }
        if parts.is_empty() {
            write!(f, "{}", self.mnemonic)
        } else {
            write!(f, "{} {}", self.mnemonic, parts.join(", "))
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Program {
    pub instructions: Vec<Instruction>,
    pub labels: BTreeMap<String, usize>,
}

impl Program {
    pub fn new(instructions: Vec<Instruction>) -> Program {
        Program { instructions, labels: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    pub fn encode(&self) -> Result<Vec<u32>, IsaError> {
        self.instructions.iter().map(Instruction::encode).collect()
    }

    pub fn decode(words: &[u32]) -> Result<Program, IsaError> {
        Ok(Program::new(words.iter().map(|&w| Instruction::decode(w)).collect::<Result<_, _>>()?))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), IsaError> {
        let words = self.encode()?;
        w.write_all(MAGIC)?;
        w.write_all(&(words.len() as u32).to_le_bytes())?;
        for word in words {
            w.write_all(&word.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Program, IsaError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(IsaError::File("magic mismatch".into()));
        }
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        let n = u32::from_le_bytes(b) as usize;
        let mut words = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b)?;
            words.push(u32::from_le_bytes(b));
        }
        Program::decode(&words)
    }
}

fn parse_int(tok: &str) -> Option<i64> {
    let (neg, t) = match tok.strip_prefix('-') {
        Some(t) => (true, t),
        None => (false, tok),
    };
    let v = if let Some(h) = t.strip_prefix("0x") {
        i64::from_str_radix(h, 16).ok()?
    } else {
        t.parse::<i64>().ok()?
    };
    Some(if neg { -v } else { v })
}

fn is_ident(s: &str) -> bool {
    let mut c = s.chars();
    matches!(c.next(), Some(ch) if ch.is_ascii_alphabetic() || ch == '_')
        && c.all(|ch| ch.is_ascii_alphanumeric() || ch == '_')
}

/// Assemble text into a program. One instruction per line, `#` starts a
/// comment, `name:` defines a label at the next instruction and `@name`
/// in an immediate position resolves to that instruction index.
pub fn assemble(text: &str) -> Result<Program, IsaError> {
    struct Pending {
        line: usize,
        mnemonic: Mnemonic,
        regs: [u8; 3],
        imm: Result<i64, String>,
    }
    let mut labels = BTreeMap::new();
    let mut pending = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |msg: String| IsaError::Asm { line, msg };
        let mut body = raw.split('#').next().unwrap_or("").trim();
        while let Some((head, rest)) = body.split_once(':') {
            let name = head.trim();
            if !is_ident(name) {
                break;
            }
            if labels.insert(name.to_string(), pending.len()).is_some() {
                return Err(err(format!("duplicate label `{name}`")));
            }
            body = rest.trim();
        }
        if body.is_empty() {
            continue;
        }
        let (name, rest) = match body.split_once(char::is_whitespace) {
            Some((n, r)) => (n, r.trim()),
            None => (body, ""),
        };
        let mnemonic = Mnemonic::from_name(&name.to_ascii_uppercase())
            .ok_or_else(|| err(format!("unknown mnemonic `{name}`")))?;
        let toks: Vec<&str> = if rest.is_empty() {
            Vec::new()
        } else {
            rest.split(',').map(str::trim).collect()
        };
        let ops = mnemonic.operands();
        let fields = [ops.rd, ops.rs1, ops.rs2];
        let want = fields.iter().flatten().count() + usize::from(ops.imm != Imm::None);
        if toks.len() != want {
            return Err(err(format!("{mnemonic} takes {want} operands, got {}", toks.len())));
        }
        let mut regs = [0u8; 3];
        let mut it = toks.iter();
        for (slot, kind) in fields.iter().enumerate() {
            let Some(kind) = kind else { continue };
            let tok = it.next().unwrap();
            let idx = tok
                .strip_prefix(kind.prefix())
                .and_then(|n| n.parse::<u8>().ok())
                .filter(|&n| n < NUM_REGS)
                .ok_or_else(|| err(format!("expected {}-register, got `{tok}`", kind.prefix())))?;
            regs[slot] = idx;
        }
        let imm = match it.next() {
            None => Ok(0),
            Some(tok) => match tok.strip_prefix('@') {
                Some(l) => Err(l.to_string()),
                None => Ok(parse_int(tok).ok_or_else(|| err(format!("bad immediate `{tok}`")))?),
            },
        };
        pending.push(Pending { line, mnemonic, regs, imm });
    }
    let mut instructions = Vec::with_capacity(pending.len());
    for p in pending {
        let imm = match p.imm {
            Ok(v) => v,
            Err(l) => *labels
                .get(&l)
                .ok_or_else(|| IsaError::Asm { line: p.line, msg: format!("unresolved label `{l}`") })?
                as i64,
        };
        let inst = Instruction::new(p.mnemonic, p.regs[0], p.regs[1], p.regs[2], imm.clamp(i32::MIN as i64, i32::MAX as i64) as i32);
        inst.encode().map_err(|e| IsaError::Asm { line: p.line, msg: e.to_string() })?;
        instructions.push(inst);
    }
    Ok(Program { instructions, labels })
}

pub fn disassemble(p: &Program) -> String {
    let mut out = String::new();
    for i in &p.instructions {
        out.push_str(&i.to_string());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_counts() {
        let count = |c| Mnemonic::ALL.iter().filter(|m| m.class() == c).count();
        assert_eq!(Mnemonic::ALL.len(), 43);
        assert_eq!(count(Class::Matrix), 6);
        assert_eq!(count(Class::Vector), 13);
        assert_eq!(count(Class::Scalar), 17);
        assert_eq!(count(Class::Memory), 3);
        assert_eq!(count(Class::Control), 4);
    }

    #[test]
    fn field_packing() {
        let w = Instruction::new(Mnemonic::V_ADD_VV, 1, 2, 3, 0).encode().unwrap();
        assert_eq!(w, 8 << 26 | 1 << 21 | 2 << 16 | 3 << 11);
        let b = Instruction::nullary(Mnemonic::C_BREAK).encode().unwrap();
        assert_eq!(b, 63 << 26);
        assert!(matches!(Instruction::decode(0), Err(IsaError::IllegalInstruction(0))));
    }

    #[test]
    fn signed_immediate() {
        let i = Instruction::new(Mnemonic::S_ADDI_INT, 1, 0, 0, -5);
        assert_eq!(Instruction::decode(i.encode().unwrap()).unwrap(), i);
        assert!(Instruction::new(Mnemonic::S_ADDI_INT, 1, 0, 0, 1024).encode().is_err());
        assert!(Instruction::new(Mnemonic::M_MM_WO, 1, 0, 0, -1).encode().is_err());
    }

    #[test]
    fn assembler_basics() {
        let p = assemble("C_BREAK").unwrap();
        assert_eq!(p.len(), 1);
        let t = "M_MM x0, x1, x2\n";
        assert_eq!(disassemble(&assemble(t).unwrap()), t);
        let p = assemble("top: S_ADDI_INT x1, x0, @end # comment\n  end:\nC_BREAK").unwrap();
        assert_eq!(p.instructions[0].imm, 1);
        assert!(assemble("FOO x1").is_err());
        assert!(assemble("M_MM x0, x1").is_err());
        assert!(assemble("S_ADDI_INT x1, x0, @nowhere").is_err());
        assert!(assemble("V_ADD_VF x1, x2, x3").is_err());
    }
}
