//! Physical constants and the handful of unit conversions used across the crate.
//!
//! Lengths are nm, energies eV, MD times fs, temperatures K, stopping powers
//! keV/nm. Spin-trace abscissae carry their own units (see [`crate::odmr`]).

/// Boltzmann constant in eV/K.
pub const BOLTZMANN_EV: f64 = 8.617_333_262e-5;

/// Conventional cubic lattice constant of diamond, nm.
pub const DIAMOND_A0_NM: f64 = 0.3567;

/// Refractive index of diamond in the visible.
pub const DIAMOND_REFRACTIVE_INDEX: f64 = 2.4;

/// Atomic mass unit expressed in eV·fs²/nm².
pub const AMU: f64 = 10_364.269_9;

/// Carbon atomic mass, amu.
pub const CARBON_MASS_AMU: f64 = 12.011;

/// Ion rest energy per nucleon used for kinematics, MeV.
pub const AMU_MEV: f64 = 931.494_102;

/// Electron rest energy, keV.
pub const ELECTRON_MASS_KEV: f64 = 510.998_95;

/// nm³ per cm³.
pub const NM3_PER_CM3: f64 = 1e21;

/// nm² per cm².
pub const NM2_PER_CM2: f64 = 1e14;

/// Lattice description of the diamond host. The atomic number density is
/// always derived from `a0` so that `n = 8 / a0³` holds exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diamond {
    pub a0: f64,
}

impl Default for Diamond {
    fn default() -> Self {
        Self { a0: DIAMOND_A0_NM }
    }
}

impl Diamond {
    pub fn new(a0: f64) -> Self {
        Self { a0 }
    }

    /// Atoms per nm³.
    pub fn number_density_nm3(&self) -> f64 {
        8.0 / (self.a0 * self.a0 * self.a0)
    }

    /// Atoms per cm³.
    pub fn number_density_cm3(&self) -> f64 {
        self.number_density_nm3() * NM3_PER_CM3
    }

    /// First-neighbour (bond) distance, nm.
    pub fn bond_length(&self) -> f64 {
        self.a0 * 3f64.sqrt() / 4.0
    }

    /// Second-neighbour distance, nm.
    pub fn second_neighbor(&self) -> f64 {
        self.a0 / 2f64.sqrt()
    }

    pub fn ppm_to_cm3(&self, ppm: f64) -> f64 {
        ppm * 1e-6 * self.number_density_cm3()
    }

    pub fn cm3_to_ppm(&self, per_cm3: f64) -> f64 {
        per_cm3 / self.number_density_cm3() * 1e6
    }

    pub fn ppm_to_nm3(&self, ppm: f64) -> f64 {
        ppm * 1e-6 * self.number_density_nm3()
    }
}

/// Optical probe depth from the piezo-stage coordinate: `z = n · z_stage`.
pub fn stage_to_depth(z_stage_um: f64, refractive_index: f64) -> f64 {
    refractive_index * z_stage_um
}

pub fn celsius_to_kelvin(c: f64) -> f64 {
    c + 273.15
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn density_matches_lattice_constant() {
        let d = Diamond::default();
        let n = d.number_density_nm3();
        assert!((n * d.a0.powi(3) - 8.0).abs() < 1e-12);
        // 1.763e23 cm^-3 to four digits
        assert!((d.number_density_cm3() / 1.763e23 - 1.0).abs() < 5e-4);
    }

    #[test]
    fn ppm_round_trip() {
        let d = Diamond::default();
        for ppm in [0.0, 0.2, 1.0, 60.0, 100.0, 200.0, 1e6] {
            let back = d.cm3_to_ppm(d.ppm_to_cm3(ppm));
            assert!((back - ppm).abs() <= 4.0 * f64::EPSILON * ppm.max(1.0));
        }
    }

    #[test]
    fn stage_depth() {
        assert_eq!(stage_to_depth(12.5, 2.4), 30.0);
        assert_eq!(stage_to_depth(0.0, 2.4), 0.0);
        assert_eq!(stage_to_depth(1.0, 1.0), 1.0);
    }

    #[test]
    fn carbon_mass_units() {
        // 1 amu = 1.66053907e-27 kg; eV fs^2 / nm^2 = 1.602176634e-31 kg
        let expect = 1.660_539_07e-27 / 1.602_176_634e-31;
        assert!((AMU / expect - 1.0).abs() < 1e-6);
    }
}
