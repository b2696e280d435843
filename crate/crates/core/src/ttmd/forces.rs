//! Tersoff energy and analytic forces.
//!
//! Atoms are processed in fixed-size chunks. Each chunk scatters its bond
//! and three-body contributions into a private buffer, and the buffers are
//! merged serially in chunk order, so the result does not depend on how
//! many workers ran the chunks.

use rayon::prelude::*;

use super::neighbor::NeighborList;
use super::system::{Cell, Vec3};
use super::tersoff::TersoffParams;
use super::MdError;

/// Atoms per work unit.
pub const CHUNK: usize = 256;

/// Closest approach tolerated before the dynamics is declared blown up, nm.
pub const HARD_CORE_NM: f64 = 0.04;

#[derive(Debug, Clone, Default)]
pub struct ForceOutput {
    pub energy: f64,
    pub atom_energy: Vec<f64>,
    pub forces: Vec<Vec3>,
}

struct Scratch {
    acc: Vec<Vec3>,
    touched: Vec<u32>,
    mark: Vec<bool>,
    bonds: Vec<Bond>,
}

impl Scratch {
    fn new(n: usize) -> Self {
        Self {
            acc: vec![[0.0; 3]; n],
            touched: Vec::new(),
            mark: vec![false; n],
            bonds: Vec::with_capacity(32),
        }
    }

    #[inline]
    fn add(&mut self, i: usize, f: Vec3) {
        if !self.mark[i] {
            self.mark[i] = true;
            self.touched.push(i as u32);
        }
        let a = &mut self.acc[i];
        a[0] += f[0];
        a[1] += f[1];
        a[2] += f[2];
    }

    fn drain(&mut self) -> Vec<(u32, Vec3)> {
        let out: Vec<(u32, Vec3)> = self
            .touched
            .iter()
            .map(|&i| (i, self.acc[i as usize]))
            .collect();
        for &i in &self.touched {
            self.acc[i as usize] = [0.0; 3];
            self.mark[i as usize] = false;
        }
        self.touched.clear();
        out
    }
}

#[derive(Clone, Copy)]
struct Bond {
    j: usize,
    unit: Vec3,
    r: f64,
    fc: f64,
    dfc: f64,
}

struct ChunkOut {
    energy: f64,
    atom_energy: Vec<f64>,
    contrib: Vec<(u32, Vec3)>,
}

/// Energy, per-atom energies and forces for the current configuration.
/// The neighbour list must be current for `positions`.
pub fn tersoff_energy_forces(
    cell: &Cell,
    positions: &[Vec3],
    nl: &NeighborList,
    params: &TersoffParams,
    out: &mut ForceOutput,
) -> Result<(), MdError> {
    let n = positions.len();
    let chunks = n.div_ceil(CHUNK);
    let results: Result<Vec<ChunkOut>, MdError> = (0..chunks)
        .into_par_iter()
        .map_init(
            || Scratch::new(n),
            |s, c| {
                let lo = c * CHUNK;
                let hi = ((c + 1) * CHUNK).min(n);
                chunk(cell, positions, nl, params, lo, hi, s)
            },
        )
        .collect();
    let results = results?;
    out.forces.clear();
    out.forces.resize(n, [0.0; 3]);
    out.atom_energy.clear();
    out.energy = 0.0;
    for r in results {
        out.energy += r.energy;
        out.atom_energy.extend_from_slice(&r.atom_energy);
        for (i, f) in r.contrib {
            let a = &mut out.forces[i as usize];
            a[0] += f[0];
            a[1] += f[1];
            a[2] += f[2];
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn chunk(
    cell: &Cell,
    x: &[Vec3],
    nl: &NeighborList,
    p: &TersoffParams,
    lo: usize,
    hi: usize,
    s: &mut Scratch,
) -> Result<ChunkOut, MdError> {
    let mut atom_energy = Vec::with_capacity(hi - lo);
    let mut total = 0.0;
    let rc = p.r_outer;
    let mut bonds = std::mem::take(&mut s.bonds);
    for i in lo..hi {
        bonds.clear();
        for &j in nl.of(i) {
            let j = j as usize;
            let d = cell.delta(&x[i], &x[j]);
            let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
            if r2 >= rc * rc {
                continue;
            }
            let r = r2.sqrt();
            if r < HARD_CORE_NM {
                s.bonds = bonds;
                return Err(MdError::HardCore { i, j, r });
            }
            let (fc, dfc) = p.fc(r);
            bonds.push(Bond {
                j,
                unit: [d[0] / r, d[1] / r, d[2] / r],
                r,
                fc,
                dfc,
            });
        }
        let mut ei = 0.0;
        for (a, bij) in bonds.iter().enumerate() {
            let mut zeta = 0.0;
            for (c, bik) in bonds.iter().enumerate() {
                if c == a {
                    continue;
                }
                let cos = dot(&bij.unit, &bik.unit);
                zeta += bik.fc * p.angular(cos).0;
            }
            let fr = p.a * (-p.lambda1 * bij.r).exp();
            let fa = -p.b * (-p.lambda2 * bij.r).exp();
            let (b, db) = p.bond_order(zeta);
            ei += 0.5 * bij.fc * (fr + b * fa);

            let de_dr = 0.5 * (bij.dfc * (fr + b * fa) + bij.fc * (-p.lambda1 * fr - b * p.lambda2 * fa));
            let fpair = scale(&bij.unit, de_dr);
            s.add(i, fpair);
            s.add(bij.j, neg(&fpair));

            let pref = 0.5 * bij.fc * fa * db;
            if pref == 0.0 {
                continue;
            }
            for (c, bik) in bonds.iter().enumerate() {
                if c == a {
                    continue;
                }
                let cos = dot(&bij.unit, &bik.unit);
                let (g, dg) = p.angular(cos);
                // ∂cos/∂x_j and ∂cos/∂x_k
                let mut dcj = [0.0; 3];
                let mut dck = [0.0; 3];
                for q in 0..3 {
                    dcj[q] = (bik.unit[q] - cos * bij.unit[q]) / bij.r;
                    dck[q] = (bij.unit[q] - cos * bik.unit[q]) / bik.r;
                }
                let mut gj = [0.0; 3];
                let mut gk = [0.0; 3];
                for q in 0..3 {
                    gj[q] = pref * bik.fc * dg * dcj[q];
                    gk[q] = pref * (bik.dfc * g * bik.unit[q] + bik.fc * dg * dck[q]);
                }
                s.add(bij.j, neg(&gj));
                s.add(bik.j, neg(&gk));
                s.add(i, [gj[0] + gk[0], gj[1] + gk[1], gj[2] + gk[2]]);
            }
        }
        atom_energy.push(ei);
        total += ei;
    }
    s.bonds = bonds;
    Ok(ChunkOut {
        energy: total,
        atom_energy,
        contrib: s.drain(),
    })
}

#[inline]
fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
fn scale(a: &Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
fn neg(a: &Vec3) -> Vec3 {
    [-a[0], -a[1], -a[2]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_stream;
    use crate::ttmd::system::build_diamond_cell;

    fn eval(cell: &Cell, x: &[Vec3], p: &TersoffParams) -> ForceOutput {
        let mut nl = NeighborList::new(p.cutoff(), 0.1);
        nl.build(cell, x);
        let mut out = ForceOutput::default();
        tersoff_energy_forces(cell, x, &nl, p, &mut out).unwrap();
        out
    }

    #[test]
    fn perfect_lattice_matches_closed_form() {
        let p = TersoffParams::carbon();
        let (r0, e0) = p.diamond_equilibrium();
        let a0 = r0 * 4.0 / 3f64.sqrt();
        let s = build_diamond_cell([3.0 * a0; 3], a0, 0.0, &mut seeded_stream(0, 0)).unwrap();
        let out = eval(&s.cell, &s.positions, &p);
        let per = out.energy / s.len() as f64;
        assert!((per - e0).abs() < 1e-9, "{per} vs {e0}");
        let fmax = out.forces.iter().flat_map(|f| f.iter()).fold(0f64, |m, v| m.max(v.abs()));
        assert!(fmax < 1e-8, "{fmax}");
    }

    #[test]
    fn rigid_translation_keeps_energy() {
        let p = TersoffParams::carbon();
        let mut s = build_diamond_cell([1.1; 3], 0.3567, 600.0, &mut seeded_stream(2, 0)).unwrap();
        for (x, v) in s.positions.iter_mut().zip(&s.velocities) {
            for k in 0..3 {
                x[k] += 20.0 * v[k];
            }
        }
        s.wrap_positions();
        let e1 = eval(&s.cell, &s.positions, &p).energy;
        for x in &mut s.positions {
            x[0] += 0.123;
            x[1] -= 0.071;
            x[2] += 0.5;
        }
        s.wrap_positions();
        let e2 = eval(&s.cell, &s.positions, &p).energy;
        assert!((e1 - e2).abs() < 1e-9 * e1.abs());
    }
}
