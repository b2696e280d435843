//! Depth-indexed stopping-power tables for an ion in diamond.
//!
//! Tables are ingested from a plain column format:
//!
//! ```text
//! # ion = U-238
//! # z = 92
//! # mass_u = 238.05
//! # energy_mev = 1100.0
//! z_um  Se_keV_per_nm  Sn_keV_per_nm  vac_per_nm
//! 0.000 49.16 0.0828 0.368
//! ...
//! ```
//!
//! Columns may be separated by whitespace or commas. The vacancy column is
//! optional and defaults to zero. `# key = value` comment lines carry the ion
//! metadata; any other comment line is ignored.

use serde::Serialize;
use thiserror::Error;

pub const U_DIAMOND_TABLE: &str = include_str!("../data/u_diamond.tsv");
pub const AU_DIAMOND_TABLE: &str = include_str!("../data/au_diamond.tsv");

/// Relative tolerance of the energy-balance self-check.
pub const ENERGY_BALANCE_TOL: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum StoppingError {
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: depth {depth} is not strictly greater than the previous row")]
    NonMonotone { line: usize, depth: f64 },
    #[error("line {line}: negative value in column {column}")]
    Negative { line: usize, column: &'static str },
    #[error("table needs at least two data rows")]
    Empty,
    #[error("depth grid must start at 0, found {0}")]
    BadOrigin(f64),
    #[error("missing metadata key `{0}`")]
    MissingMetadata(&'static str),
    #[error("energy balance off by {ratio:.3} (integral / E0)")]
    EnergyBalance { ratio: f64 },
}

#[derive(Debug, Clone, Serialize)]
pub struct IonSpecies {
    pub label: String,
    pub atomic_number: f64,
    pub mass_u: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StoppingTable {
    pub ion: IonSpecies,
    pub energy_mev: f64,
    depth_um: Vec<f64>,
    se: Vec<f64>,
    sn: Vec<f64>,
    vacancies: Vec<f64>,
    range_um: f64,
    /// Cumulative (Se + Sn) integral at each node, MeV.
    cumulative_mev: Vec<f64>,
}

impl StoppingTable {
    pub fn uranium_1100mev() -> Self {
        Self::bundled(U_DIAMOND_TABLE)
    }

    pub fn gold_950mev() -> Self {
        Self::bundled(AU_DIAMOND_TABLE)
    }

    /// Bundled tables by short name (`U`, `Au`).
    pub fn by_name(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "u" | "u-238" | "uranium" => Some(Self::uranium_1100mev()),
            "au" | "au-197" | "gold" => Some(Self::gold_950mev()),
            _ => None,
        }
    }

    fn bundled(text: &str) -> Self {
        let t = parse_stopping_table(text).expect("bundled table parses");
        t.check_energy_balance().expect("bundled table is self-consistent");
        t
    }

    pub fn depths(&self) -> &[f64] {
        &self.depth_um
    }

    pub fn electronic(&self) -> &[f64] {
        &self.se
    }

    pub fn nuclear(&self) -> &[f64] {
        &self.sn
    }

    pub fn vacancy_rates(&self) -> &[f64] {
        &self.vacancies
    }

    /// Largest depth reached by the interpolated Se + Sn before it returns to
    /// zero (the first zero node after the last nonzero one), µm.
    pub fn range(&self) -> f64 {
        self.range_um
    }

    /// (Se, Sn) in keV/nm at depth `z_um`, linear between nodes, zero past the range.
    pub fn stopping_at_depth(&self, z_um: f64) -> (f64, f64) {
        match self.locate(z_um) {
            Some((i, t)) => (lerp(self.se[i], self.se[i + 1], t), lerp(self.sn[i], self.sn[i + 1], t)),
            None => (0.0, 0.0),
        }
    }

    /// Elastic-collision vacancy production rate, vacancies/nm.
    pub fn nuclear_vacancy_rate(&self, z_um: f64) -> f64 {
        match self.locate(z_um) {
            Some((i, t)) => lerp(self.vacancies[i], self.vacancies[i + 1], t),
            None => 0.0,
        }
    }

    /// Energy lost between the surface and `z_um`, MeV. Exact for the
    /// piecewise-linear stopping curve.
    pub fn energy_lost(&self, z_um: f64) -> f64 {
        let z = z_um.clamp(0.0, self.range_um);
        if self.depth_um.len() < 2 {
            return 0.0;
        }
        let i = interval_index(&self.depth_um, z);
        let z0 = self.depth_um[i];
        let s0 = self.se[i] + self.sn[i];
        let (se, sn) = self.stopping_at_depth(z);
        // keV/nm * µm = MeV
        self.cumulative_mev[i] + 0.5 * (s0 + se + sn) * (z - z0)
    }

    /// ∫₀^R (Se + Sn) dz divided by the initial kinetic energy.
    pub fn energy_balance_ratio(&self) -> f64 {
        self.energy_lost(self.range_um) / self.energy_mev
    }

    pub fn check_energy_balance(&self) -> Result<(), StoppingError> {
        let ratio = self.energy_balance_ratio();
        if (ratio - 1.0).abs() > ENERGY_BALANCE_TOL {
            return Err(StoppingError::EnergyBalance { ratio });
        }
        Ok(())
    }

    /// Interval index and fraction for a depth inside the range.
    fn locate(&self, z_um: f64) -> Option<(usize, f64)> {
        if !(z_um >= 0.0) || z_um > self.range_um || self.depth_um.len() < 2 {
            return None;
        }
        let i = interval_index(&self.depth_um, z_um);
        let (a, b) = (self.depth_um[i], self.depth_um[i + 1]);
        Some((i, ((z_um - a) / (b - a)).clamp(0.0, 1.0)))
    }

    /// Same table with every stopping and vacancy value multiplied by
    /// `factor`. Used for zero-excitation control runs.
    pub fn scaled(&self, factor: f64) -> StoppingTable {
        let mut t = self.clone();
        t.se.iter_mut().for_each(|v| *v *= factor);
        t.sn.iter_mut().for_each(|v| *v *= factor);
        t.vacancies.iter_mut().for_each(|v| *v *= factor);
        t.finish();
        t
    }

    fn finish(&mut self) {
        let n = self.depth_um.len();
        let last_positive = (0..n).rev().find(|&i| self.se[i] + self.sn[i] > 0.0);
        self.range_um = match last_positive {
            None => 0.0,
            Some(i) if i + 1 < n => self.depth_um[i + 1],
            Some(i) => self.depth_um[i],
        };
        self.cumulative_mev = vec![0.0; n];
        for i in 1..n {
            let s = 0.5 * (self.se[i - 1] + self.sn[i - 1] + self.se[i] + self.sn[i]);
            self.cumulative_mev[i] = self.cumulative_mev[i - 1] + s * (self.depth_um[i] - self.depth_um[i - 1]);
        }
    }
}

/// Index `i` such that `grid[i] <= z < grid[i+1]`, clamped to the last interval.
fn interval_index(grid: &[f64], z: f64) -> usize {
    let p = grid.partition_point(|&g| g <= z);
    p.saturating_sub(1).min(grid.len() - 2)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

pub fn range_of(table: &StoppingTable) -> f64 {
    table.range()
}

/// Parse the column format described in the module docs.
pub fn parse_stopping_table(text: &str) -> Result<StoppingTable, StoppingError> {
    let mut label = None;
    let mut atomic_number = None;
    let mut mass_u = None;
    let mut energy = None;
    let mut z = Vec::new();
    let mut se = Vec::new();
    let mut sn = Vec::new();
    let mut vac = Vec::new();
    let mut header_seen = false;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some((k, v)) = comment.split_once('=') {
                let (k, v) = (k.trim(), v.trim());
                let num = || {
                    v.parse::<f64>().map_err(|_| StoppingError::Malformed {
                        line: line_no,
                        msg: format!("metadata `{k}` is not a number"),
                    })
                };
                match k {
                    "ion" => label = Some(v.to_string()),
                    "z" => atomic_number = Some(num()?),
                    "mass_u" => mass_u = Some(num()?),
                    "energy_mev" => energy = Some(num()?),
                    _ => {}
                }
            }
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .collect();
        if !header_seen && fields.first().is_some_and(|f| f.parse::<f64>().is_err()) {
            header_seen = true;
            continue;
        }
        if fields.len() < 3 || fields.len() > 4 {
            return Err(StoppingError::Malformed {
                line: line_no,
                msg: format!("expected 3 or 4 columns, found {}", fields.len()),
            });
        }
        let mut vals = [0.0; 4];
        for (j, f) in fields.iter().enumerate() {
            vals[j] = f.parse::<f64>().map_err(|_| StoppingError::Malformed {
                line: line_no,
                msg: format!("cannot parse `{f}` as a number"),
            })?;
            if !vals[j].is_finite() {
                return Err(StoppingError::Malformed {
                    line: line_no,
                    msg: format!("non-finite value `{f}`"),
                });
            }
        }
        const NAMES: [&str; 4] = ["z_um", "Se", "Sn", "vac_per_nm"];
        for (j, name) in NAMES.iter().enumerate() {
            if vals[j] < 0.0 {
                return Err(StoppingError::Negative { line: line_no, column: name });
            }
        }
        if let Some(&prev) = z.last() {
            if vals[0] <= prev {
                return Err(StoppingError::NonMonotone { line: line_no, depth: vals[0] });
            }
        }
        z.push(vals[0]);
        se.push(vals[1]);
        sn.push(vals[2]);
        vac.push(vals[3]);
    }

    if z.len() < 2 {
        return Err(StoppingError::Empty);
    }
    if z[0] != 0.0 {
        return Err(StoppingError::BadOrigin(z[0]));
    }
    let mut table = StoppingTable {
        ion: IonSpecies {
            label: label.ok_or(StoppingError::MissingMetadata("ion"))?,
            atomic_number: atomic_number.ok_or(StoppingError::MissingMetadata("z"))?,
            mass_u: mass_u.ok_or(StoppingError::MissingMetadata("mass_u"))?,
        },
        energy_mev: energy.ok_or(StoppingError::MissingMetadata("energy_mev"))?,
        depth_um: z,
        se,
        sn,
        vacancies: vac,
        range_um: 0.0,
        cumulative_mev: Vec::new(),
    };
    table.finish();
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    const META: &str = "# ion = X\n# z = 6\n# mass_u = 12\n# energy_mev = 1\n";

    #[test]
    fn duplicated_depth_rejected() {
        let text = format!("{META}z Se Sn\n0 1 0\n1 1 0\n1 1 0\n");
        assert!(matches!(parse_stopping_table(&text), Err(StoppingError::NonMonotone { line: 8, .. })));
    }

    #[test]
    fn malformed_row_reports_line() {
        let text = format!("{META}z Se Sn\n0 1 0\n1 abc 0\n");
        assert!(matches!(parse_stopping_table(&text), Err(StoppingError::Malformed { line: 7, .. })));
    }

    #[test]
    fn negative_rejected() {
        let text = format!("{META}0 1 -0.1\n1 0 0\n");
        assert!(matches!(parse_stopping_table(&text), Err(StoppingError::Negative { column: "Sn", .. })));
    }

    #[test]
    fn csv_and_optional_vacancy_column() {
        let text = format!("{META}z_um,Se,Sn\n0,2,0\n0.5,1,0\n1,0,0\n");
        let t = parse_stopping_table(&text).unwrap();
        assert_eq!(t.range(), 1.0);
        assert_eq!(t.nuclear_vacancy_rate(0.2), 0.0);
        // 0.5 µm * 1.5 keV/nm + 0.5 µm * 0.5 keV/nm = 1.0 MeV
        assert!((t.energy_lost(1.0) - 1.0).abs() < 1e-12);
        t.check_energy_balance().unwrap();
    }

    #[test]
    fn zeroed_table_has_zero_range() {
        let t = StoppingTable::uranium_1100mev().scaled(0.0);
        assert_eq!(t.range(), 0.0);
        assert_eq!(t.stopping_at_depth(1.0), (0.0, 0.0));
    }

    #[test]
    fn exact_at_nodes_and_midpoints() {
        let t = StoppingTable::uranium_1100mev();
        let z = t.depths();
        for i in (0..z.len() - 2).step_by(17) {
            let (se, sn) = t.stopping_at_depth(z[i]);
            assert_eq!(se, t.electronic()[i]);
            assert_eq!(sn, t.nuclear()[i]);
            let mid = 0.5 * (z[i] + z[i + 1]);
            let (se_m, _) = t.stopping_at_depth(mid);
            let expect = 0.5 * (t.electronic()[i] + t.electronic()[i + 1]);
            assert!((se_m - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn beyond_range_is_zero() {
        let t = StoppingTable::uranium_1100mev();
        assert_eq!(t.stopping_at_depth(35.0), (0.0, 0.0));
        assert_eq!(t.nuclear_vacancy_rate(35.0), 0.0);
    }

    #[test]
    fn energy_lost_is_monotone() {
        let t = StoppingTable::gold_950mev();
        let mut prev = -1.0;
        for k in 0..=300 {
            let e = t.energy_lost(k as f64 * 0.1);
            assert!(e >= prev);
            prev = e;
        }
        assert!((t.energy_lost(0.0)).abs() < 1e-15);
    }
}
