//! Velocity-Verlet integration with a skin-triggered neighbour list.

use super::forces::{tersoff_energy_forces, ForceOutput};
use super::neighbor::NeighborList;
use super::system::AtomSystem;
use super::tersoff::TersoffParams;
use super::MdError;

/// Default neighbour-list skin, nm.
pub const DEFAULT_SKIN_NM: f64 = 0.1;

/// Largest timestep accepted by [`MdEngine::step_nve`], fs.
pub const MAX_DT_FS: f64 = 2.0;

/// Force field plus cached neighbour list and forces for one system.
#[derive(Debug, Clone)]
pub struct MdEngine {
    pub params: TersoffParams,
    pub nl: NeighborList,
    pub out: ForceOutput,
    fresh: bool,
}

impl MdEngine {
    pub fn new(params: TersoffParams, skin: f64) -> Self {
        let nl = NeighborList::new(params.cutoff(), skin);
        Self {
            params,
            nl,
            out: ForceOutput::default(),
            fresh: false,
        }
    }

    pub fn carbon() -> Self {
        Self::new(TersoffParams::carbon(), DEFAULT_SKIN_NM)
    }

    /// Checks the cutoff against the cell and evaluates forces from scratch.
    pub fn attach(&mut self, sys: &AtomSystem) -> Result<(), MdError> {
        let half = 0.5 * sys.cell.min_length();
        if self.params.cutoff() >= half {
            return Err(MdError::Geometry(format!(
                "cutoff {} nm is not below half the smallest cell edge ({half} nm)",
                self.params.cutoff()
            )));
        }
        self.nl.build(&sys.cell, &sys.positions);
        self.compute(sys)?;
        self.fresh = true;
        Ok(())
    }

    fn compute(&mut self, sys: &AtomSystem) -> Result<(), MdError> {
        tersoff_energy_forces(&sys.cell, &sys.positions, &self.nl, &self.params, &mut self.out)
    }

    /// Potential energy of the last evaluated configuration.
    pub fn potential_energy(&self) -> f64 {
        self.out.energy
    }

    pub fn total_energy(&self, sys: &AtomSystem) -> f64 {
        self.out.energy + sys.kinetic_energy()
    }

    /// Half kick: v += ½ dt F / m.
    pub fn half_kick(&self, sys: &mut AtomSystem, dt: f64) {
        for ((v, f), m) in sys.velocities.iter_mut().zip(&self.out.forces).zip(&sys.masses) {
            let c = 0.5 * dt / m;
            v[0] += c * f[0];
            v[1] += c * f[1];
            v[2] += c * f[2];
        }
    }

    /// Drift, wrap, refresh the list if needed, recompute forces.
    pub fn drift(&mut self, sys: &mut AtomSystem, dt: f64) -> Result<(), MdError> {
        let cell = sys.cell;
        for (x, v) in sys.positions.iter_mut().zip(&sys.velocities) {
            x[0] += dt * v[0];
            x[1] += dt * v[1];
            x[2] += dt * v[2];
            cell.wrap(x);
        }
        sys.time_fs += dt;
        self.nl.update(&sys.cell, &sys.positions);
        self.compute(sys)
    }

    /// One velocity-Verlet step.
    pub fn step_nve(&mut self, sys: &mut AtomSystem, dt: f64) -> Result<(), MdError> {
        if !(dt > 0.0 && dt <= MAX_DT_FS) {
            return Err(MdError::Timestep(dt));
        }
        if !self.fresh {
            self.attach(sys)?;
        }
        self.half_kick(sys, dt);
        self.drift(sys, dt)?;
        self.half_kick(sys, dt);
        Ok(())
    }

    /// Largest atomic speed, nm/fs.
    pub fn max_speed(sys: &AtomSystem) -> f64 {
        sys.velocities
            .iter()
            .map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt())
            .fold(0.0, f64::max)
    }
}

/// Free-function form of [`MdEngine::step_nve`].
pub fn step_nve(engine: &mut MdEngine, sys: &mut AtomSystem, dt: f64) -> Result<(), MdError> {
    engine.step_nve(sys, dt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_stream;
    use crate::ttmd::system::build_diamond_cell;

    #[test]
    fn lattice_at_rest_stays_put() {
        let p = TersoffParams::carbon();
        let a0 = p.diamond_lattice_constant();
        let mut s = build_diamond_cell([3.0 * a0; 3], a0, 0.0, &mut seeded_stream(0, 0)).unwrap();
        let start = s.positions.clone();
        let mut e = MdEngine::new(p, DEFAULT_SKIN_NM);
        for _ in 0..50 {
            e.step_nve(&mut s, 0.2).unwrap();
        }
        let moved = s
            .positions
            .iter()
            .zip(&start)
            .map(|(a, b)| s.cell.delta(a, b).iter().map(|x| x.abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        assert!(moved < 1e-10, "{moved}");
    }

    #[test]
    fn momentum_conserved() {
        let mut s = build_diamond_cell([1.1; 3], 0.3567, 1000.0, &mut seeded_stream(5, 0)).unwrap();
        let mut e = MdEngine::carbon();
        for _ in 0..1000 {
            e.step_nve(&mut s, 0.5).unwrap();
        }
        let p = s.momentum();
        let scale = s.masses[0] * 0.01 * s.len() as f64;
        assert!(p.iter().all(|c| c.abs() < 1e-10 * scale), "{p:?}");
    }

    #[test]
    fn rejects_bad_timestep() {
        let mut s = build_diamond_cell([1.1; 3], 0.3567, 0.0, &mut seeded_stream(5, 0)).unwrap();
        let mut e = MdEngine::carbon();
        assert!(matches!(e.step_nve(&mut s, 0.0), Err(MdError::Timestep(_))));
        assert!(matches!(e.step_nve(&mut s, 10.0), Err(MdError::Timestep(_))));
    }
}
