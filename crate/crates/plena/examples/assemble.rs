//! Assemble a scalar program, round-trip it through the binary encoding and
//! run it on the emulator.

use plena::hbm::{HbmConfig, HbmImage};
use plena::isa::{assemble, disassemble, Program};
use plena::machine::{ArchConfig, Machine};

const SRC: &str = "
    S_ADDI_INT x1, x0, 6
    S_ADDI_INT x2, x0, 7
    S_MUL_INT  x3, x1, x2      # 42
    S_LD_FP    f1, x0, 0       # 1.5 from FP SRAM
    S_MUL_FP   f2, f1, f1
    S_ST_INT   x3, x0, 4
    C_BREAK
";

fn main() -> anyhow::Result<()> {
    let program = assemble(SRC)?;
    let words = program.encode()?;
    for (i, w) in words.iter().enumerate() {
        println!("{i:3}  {w:#010x}  {}", program.instructions[i]);
    }
    let back = Program::decode(&words)?;
    assert_eq!(disassemble(&back), disassemble(&program));

    let mut m = Machine::new(ArchConfig::new(4, 16, 16), HbmImage::new(HbmConfig::default()))?;
    m.load_fp(0, &[1.5])?;
    let report = m.run(&program, 1_000)?;
    println!("\nx3 = {}, f2 = {}", m.gpr(3), m.fpr(2));
    println!("{report}");
    Ok(())
}
