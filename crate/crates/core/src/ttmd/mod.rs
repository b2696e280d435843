//! Two-temperature molecular dynamics of a carbon lattice crossed by an ion.

pub mod electronic;
pub mod forces;
pub mod integrate;
pub mod neighbor;
pub mod segment;
pub mod system;
pub mod tersoff;
pub mod xyz;

use thiserror::Error;

pub use electronic::{Boundary, ElectronicGrid, TtmParams};
pub use forces::{tersoff_energy_forces, ForceOutput};
pub use integrate::{step_nve, MdEngine};
pub use neighbor::{CellList, NeighborList};
pub use segment::{run_track_segment, EnergyLedger, SegmentResult, SegmentSpec, TrackMdParams};
pub use system::{build_diamond_cell, AtomSystem, Cell, Vec3};
pub use tersoff::TersoffParams;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MdError {
    #[error("invalid potential or model parameters: {0}")]
    Params(String),
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("atoms {i} and {j} at {r:.4} nm, inside the hard-core limit")]
    HardCore { i: usize, j: usize, r: f64 },
    #[error("timestep {0} fs outside the supported window")]
    Timestep(f64),
    #[error("diffusion step {dt} fs needs {substeps} sub-steps")]
    Cfl { dt: f64, substeps: usize },
    #[error("electronic temperature {value} K in zone {zone}")]
    NegativeTemperature { zone: usize, value: f64 },
    #[error("wall-clock budget of {0} s exceeded")]
    WallBudget(f64),
}
