//! Extended-XYZ snapshot output.

use std::fmt::Write as _;

use super::system::AtomSystem;

/// Extended-XYZ text with species, positions (Å) and per-atom energy (eV).
pub fn to_extxyz(sys: &AtomSystem, atom_energy: &[f64], comment: &str) -> String {
    let mut s = String::with_capacity(64 * sys.len() + 256);
    let l = sys.cell.lengths;
    let _ = writeln!(s, "{}", sys.len());
    let _ = writeln!(
        s,
        "Lattice=\"{:.6} 0 0 0 {:.6} 0 0 0 {:.6}\" Properties=species:S:1:pos:R:3:energy:R:1 pbc=\"T T T\" Time={:.3} {}",
        l[0] * 10.0,
        l[1] * 10.0,
        l[2] * 10.0,
        sys.time_fs,
        comment
    );
    for (i, p) in sys.positions.iter().enumerate() {
        let e = atom_energy.get(i).copied().unwrap_or(0.0);
        let _ = writeln!(
            s,
            "C {:.6} {:.6} {:.6} {:.6}",
            p[0] * 10.0,
            p[1] * 10.0,
            p[2] * 10.0,
            e
        );
    }
    s
}
