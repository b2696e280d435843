//! Periodic orthorhombic cells and the atom state evolved by the engine.

use serde::{Deserialize, Serialize};

use super::MdError;
use crate::rng::RandomStream;
use crate::units::{AMU, BOLTZMANN_EV, CARBON_MASS_AMU};

pub type Vec3 = [f64; 3];

/// Orthorhombic periodic box, edge lengths in nm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub lengths: Vec3,
}

impl Cell {
    pub fn new(lengths: Vec3) -> Self {
        Self { lengths }
    }

    pub fn volume(&self) -> f64 {
        self.lengths[0] * self.lengths[1] * self.lengths[2]
    }

    pub fn min_length(&self) -> f64 {
        self.lengths.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Minimum-image displacement.
    #[inline]
    pub fn min_image(&self, mut d: Vec3) -> Vec3 {
        for k in 0..3 {
            let l = self.lengths[k];
            d[k] -= l * (d[k] / l).round();
        }
        d
    }

    #[inline]
    pub fn delta(&self, from: &Vec3, to: &Vec3) -> Vec3 {
        self.min_image([to[0] - from[0], to[1] - from[1], to[2] - from[2]])
    }

    #[inline]
    pub fn wrap(&self, p: &mut Vec3) {
        for k in 0..3 {
            let l = self.lengths[k];
            p[k] -= l * (p[k] / l).floor();
            if p[k] >= l {
                p[k] -= l;
            }
        }
    }
}

#[inline]
pub fn norm(v: &Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Atom positions (nm), velocities (nm/fs) and masses (eV·fs²/nm²), with the
/// ideal lattice the configuration started from.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomSystem {
    pub cell: Cell,
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    pub masses: Vec<f64>,
    pub reference: Vec<Vec3>,
    pub time_fs: f64,
    pub a0: f64,
}

impl AtomSystem {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn kinetic_energy(&self) -> f64 {
        self.velocities
            .iter()
            .zip(&self.masses)
            .map(|(v, m)| 0.5 * m * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]))
            .sum()
    }

    /// Instantaneous kinetic temperature (3N degrees of freedom).
    pub fn temperature(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        2.0 * self.kinetic_energy() / (3.0 * self.len() as f64 * BOLTZMANN_EV)
    }

    pub fn momentum(&self) -> Vec3 {
        let mut p = [0.0; 3];
        for (v, m) in self.velocities.iter().zip(&self.masses) {
            for k in 0..3 {
                p[k] += m * v[k];
            }
        }
        p
    }

    pub fn wrap_positions(&mut self) {
        let cell = self.cell;
        for p in &mut self.positions {
            cell.wrap(p);
        }
    }

    /// Maxwell–Boltzmann velocities at `temperature` with zero net momentum,
    /// rescaled so the kinetic temperature equals the target exactly.
    pub fn thermalize(&mut self, temperature: f64, rng: &mut RandomStream) {
        for (v, &m) in self.velocities.iter_mut().zip(&self.masses) {
            let s = (BOLTZMANN_EV * temperature / m).sqrt();
            for c in v.iter_mut() {
                *c = s * rng.normal();
            }
        }
        if temperature == 0.0 || self.len() < 2 {
            for v in &mut self.velocities {
                *v = [0.0; 3];
            }
            return;
        }
        let p = self.momentum();
        let mtot: f64 = self.masses.iter().sum();
        for v in &mut self.velocities {
            for k in 0..3 {
                v[k] -= p[k] / mtot;
            }
        }
        let scale = (temperature / self.temperature()).sqrt();
        for v in &mut self.velocities {
            for c in v.iter_mut() {
                *c *= scale;
            }
        }
    }
}

/// Diamond lattice basis in units of a0.
pub const DIAMOND_BASIS: [Vec3; 8] = [
    [0.0, 0.0, 0.0],
    [0.0, 0.5, 0.5],
    [0.5, 0.0, 0.5],
    [0.5, 0.5, 0.0],
    [0.25, 0.25, 0.25],
    [0.25, 0.75, 0.75],
    [0.75, 0.25, 0.75],
    [0.75, 0.75, 0.25],
];

/// Whole conventional cells that fit each requested dimension (at least one).
pub fn cells_for(dims_nm: Vec3, a0: f64) -> [usize; 3] {
    let mut n = [0usize; 3];
    for k in 0..3 {
        n[k] = ((dims_nm[k] / a0).round() as usize).max(1);
    }
    n
}

/// Ideal diamond sites for `reps` conventional cells.
pub fn diamond_sites(reps: [usize; 3], a0: f64) -> Vec<Vec3> {
    let mut sites = Vec::with_capacity(8 * reps[0] * reps[1] * reps[2]);
    for i in 0..reps[0] {
        for j in 0..reps[1] {
            for k in 0..reps[2] {
                for b in &DIAMOND_BASIS {
                    sites.push([
                        (i as f64 + b[0]) * a0,
                        (j as f64 + b[1]) * a0,
                        (k as f64 + b[2]) * a0,
                    ]);
                }
            }
        }
    }
    sites
}

/// Perfect diamond block of carbon atoms. Dimensions are rounded to whole
/// conventional cells.
pub fn build_diamond_cell(
    dims_nm: Vec3,
    a0: f64,
    temperature: f64,
    rng: &mut RandomStream,
) -> Result<AtomSystem, MdError> {
    if !(a0 > 0.0) || dims_nm.iter().any(|&d| !(d > 0.0)) {
        return Err(MdError::Geometry("cell dimensions and a0 must be positive".into()));
    }
    if !(temperature >= 0.0) {
        return Err(MdError::Geometry("temperature must be non-negative".into()));
    }
    if dims_nm.iter().any(|&d| d < 0.5 * a0) {
        return Err(MdError::Geometry(format!(
            "dimensions {dims_nm:?} nm hold no conventional cell of a0 = {a0} nm"
        )));
    }
    let reps = cells_for(dims_nm, a0);
    let sites = diamond_sites(reps, a0);
    let n = sites.len();
    let cell = Cell::new([
        reps[0] as f64 * a0,
        reps[1] as f64 * a0,
        reps[2] as f64 * a0,
    ]);
    let mut sys = AtomSystem {
        cell,
        positions: sites.clone(),
        velocities: vec![[0.0; 3]; n],
        masses: vec![CARBON_MASS_AMU * AMU; n],
        reference: sites,
        time_fs: 0.0,
        a0,
    };
    sys.thermalize(temperature, rng);
    Ok(sys)
}
