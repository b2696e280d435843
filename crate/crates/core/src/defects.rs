//! Wigner–Seitz point-defect analysis and vacancy clustering.
//!
//! Each atom is assigned to its nearest reference site under the periodic
//! minimum image. Empty sites are vacancies; every atom beyond the first on
//! a site is an interstitial. Vacancies whose sites lie within a cutoff of
//! each other are joined into clusters.

use serde::Serialize;
use thiserror::Error;

use crate::ttmd::{Cell, CellList, Vec3};

#[derive(Debug, Error, PartialEq)]
pub enum DefectError {
    #[error("reference cell {reference:?} nm does not match snapshot cell {snapshot:?} nm")]
    CellMismatch { reference: Vec3, snapshot: Vec3 },
    #[error("reference lattice is empty")]
    EmptyReference,
    #[error("cluster cutoff must be positive, got {0}")]
    Cutoff(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Interstitial {
    pub site: usize,
    /// Atoms on this site beyond the nearest one.
    pub atoms: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DefectSet {
    pub vacancies: Vec<usize>,
    pub interstitials: Vec<Interstitial>,
    pub occupancy: Vec<u32>,
    /// `histogram[k]` = number of sites holding k atoms.
    pub histogram: Vec<usize>,
    /// Site assigned to each atom.
    pub assignment: Vec<usize>,
}

impl DefectSet {
    pub fn vacancy_count(&self) -> usize {
        self.vacancies.len()
    }

    pub fn interstitial_count(&self) -> usize {
        self.interstitials.iter().map(|i| i.atoms.len()).sum()
    }

    /// vacancies − interstitials == sites − atoms.
    pub fn conserves(&self) -> bool {
        let sites = self.occupancy.len() as i64;
        let atoms: i64 = self.occupancy.iter().map(|&o| o as i64).sum();
        self.vacancy_count() as i64 - self.interstitial_count() as i64 == sites - atoms
            && atoms == self.assignment.len() as i64
    }
}

/// Nearest reference site for every atom.
pub fn wigner_seitz(
    reference_cell: &Cell,
    reference: &[Vec3],
    cell: &Cell,
    positions: &[Vec3],
) -> Result<DefectSet, DefectError> {
    if reference.is_empty() {
        return Err(DefectError::EmptyReference);
    }
    let mismatch = reference_cell
        .lengths
        .iter()
        .zip(&cell.lengths)
        .any(|(a, b)| (a - b).abs() > 1e-9 * a.abs().max(1.0));
    if mismatch {
        return Err(DefectError::CellMismatch {
            reference: reference_cell.lengths,
            snapshot: cell.lengths,
        });
    }
    let finder = NearestSite::new(cell, reference);
    let assignment: Vec<usize> = positions.iter().map(|p| finder.nearest(p)).collect();
    Ok(tally(reference, cell, positions, assignment))
}

/// All-pairs reference implementation of [`wigner_seitz`].
pub fn wigner_seitz_brute(cell: &Cell, reference: &[Vec3], positions: &[Vec3]) -> DefectSet {
    let assignment = positions
        .iter()
        .map(|p| {
            let mut best = (f64::INFINITY, usize::MAX);
            for (s, site) in reference.iter().enumerate() {
                let d = cell.delta(p, site);
                let d2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                if d2 < best.0 {
                    best = (d2, s);
                }
            }
            best.1
        })
        .collect();
    tally(reference, cell, positions, assignment)
}

fn tally(reference: &[Vec3], cell: &Cell, positions: &[Vec3], assignment: Vec<usize>) -> DefectSet {
    let mut occupants: Vec<Vec<usize>> = vec![Vec::new(); reference.len()];
    for (a, &s) in assignment.iter().enumerate() {
        occupants[s].push(a);
    }
    let occupancy: Vec<u32> = occupants.iter().map(|o| o.len() as u32).collect();
    let max_occ = occupancy.iter().cloned().max().unwrap_or(0) as usize;
    let mut histogram = vec![0usize; max_occ + 1];
    for &o in &occupancy {
        histogram[o as usize] += 1;
    }
    let vacancies = (0..reference.len()).filter(|&s| occupancy[s] == 0).collect();
    let interstitials = occupants
        .iter()
        .enumerate()
        .filter(|(_, o)| o.len() >= 2)
        .map(|(s, o)| {
            let mut by_dist: Vec<(f64, usize)> = o
                .iter()
                .map(|&a| {
                    let d = cell.delta(&reference[s], &positions[a]);
                    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2], a)
                })
                .collect();
            by_dist.sort_by(|x, y| x.partial_cmp(y).unwrap());
            Interstitial {
                site: s,
                atoms: by_dist[1..].iter().map(|&(_, a)| a).collect(),
            }
        })
        .collect();
    DefectSet {
        vacancies,
        interstitials,
        occupancy,
        histogram,
        assignment,
    }
}

/// Cell-list nearest-site lookup with an exact fallback.
struct NearestSite<'a> {
    cell: Cell,
    sites: &'a [Vec3],
    list: CellList,
    /// Any site within this distance of a point is guaranteed to lie in the
    /// searched 3×3×3 block.
    reach: f64,
}

impl<'a> NearestSite<'a> {
    fn new(cell: &Cell, sites: &'a [Vec3]) -> Self {
        // about two sites per bin keeps the block search cheap
        let spacing = (cell.volume() / sites.len() as f64).cbrt();
        let list = CellList::new(*cell, 1.3 * spacing, sites);
        let bins = list.bins();
        let reach = (0..3)
            .map(|k| {
                if bins[k] < 3 {
                    f64::INFINITY
                } else {
                    cell.lengths[k] / bins[k] as f64
                }
            })
            .fold(f64::INFINITY, f64::min);
        Self {
            cell: *cell,
            sites,
            list,
            reach,
        }
    }

    fn nearest(&self, p: &Vec3) -> usize {
        let mut best = (f64::INFINITY, usize::MAX);
        for s in self.list.candidates(p) {
            let d = self.cell.delta(p, &self.sites[s]);
            let d2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
            if d2 < best.0 || (d2 == best.0 && s < best.1) {
                best = (d2, s);
            }
        }
        if best.0.sqrt() < self.reach {
            return best.1;
        }
        for (s, site) in self.sites.iter().enumerate() {
            let d = self.cell.delta(p, site);
            let d2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
            if d2 < best.0 || (d2 == best.0 && s < best.1) {
                best = (d2, s);
            }
        }
        best.1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterSet {
    /// Sorted site lists, ordered by their smallest site index.
    pub clusters: Vec<Vec<usize>>,
    pub isolated: usize,
    /// Vacancies that belong to clusters of two or more.
    pub clustered: usize,
    /// Number of connected groups among interstitial sites (tallied only).
    pub interstitial_clusters: usize,
    pub cutoff: f64,
}

impl ClusterSet {
    pub fn total(&self) -> usize {
        self.isolated + self.clustered
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.clusters.iter().map(|c| c.len()).collect()
    }

    pub fn largest(&self) -> usize {
        self.clusters.iter().map(|c| c.len()).max().unwrap_or(0)
    }
}

/// Union-find clustering of vacancy sites with pairwise distance ≤ `cutoff`.
pub fn cluster_defects(
    defects: &DefectSet,
    reference: &[Vec3],
    cell: &Cell,
    cutoff: f64,
) -> Result<ClusterSet, DefectError> {
    if !(cutoff > 0.0) {
        return Err(DefectError::Cutoff(cutoff));
    }
    let clusters = connected_sites(&defects.vacancies, reference, cell, cutoff);
    let inter_sites: Vec<usize> = defects.interstitials.iter().map(|i| i.site).collect();
    let inter = connected_sites(&inter_sites, reference, cell, cutoff);
    let isolated = clusters.iter().filter(|c| c.len() == 1).count();
    let clustered = clusters.iter().filter(|c| c.len() >= 2).map(|c| c.len()).sum();
    Ok(ClusterSet {
        clusters,
        isolated,
        clustered,
        interstitial_clusters: inter.len(),
        cutoff,
    })
}

/// Connected components of `sites` under the distance cutoff.
pub fn connected_sites(sites: &[usize], reference: &[Vec3], cell: &Cell, cutoff: f64) -> Vec<Vec<usize>> {
    let mut sorted: Vec<usize> = sites.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let pts: Vec<Vec3> = sorted.iter().map(|&s| reference[s]).collect();
    let mut uf = UnionFind::new(pts.len());
    if !pts.is_empty() {
        let list = CellList::new(*cell, cutoff, &pts);
        let c2 = cutoff * cutoff;
        for (a, p) in pts.iter().enumerate() {
            for b in list.candidates(p) {
                if b <= a {
                    continue;
                }
                let d = cell.delta(p, &pts[b]);
                if d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= c2 {
                    uf.union(a, b);
                }
            }
        }
    }
    group(&mut uf, &sorted)
}

fn group(uf: &mut UnionFind, sorted: &[usize]) -> Vec<Vec<usize>> {
    let mut by_root: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..sorted.len() {
        let r = uf.find(i);
        by_root.entry(r).or_default().push(sorted[i]);
    }
    let mut out: Vec<Vec<usize>> = by_root.into_values().collect();
    for c in &mut out {
        c.sort_unstable();
    }
    out.sort_by_key(|c| c[0]);
    out
}

/// All-pairs connected components, for checking [`connected_sites`].
pub fn connected_sites_brute(sites: &[usize], reference: &[Vec3], cell: &Cell, cutoff: f64) -> Vec<Vec<usize>> {
    let mut sorted: Vec<usize> = sites.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut uf = UnionFind::new(sorted.len());
    for a in 0..sorted.len() {
        for b in a + 1..sorted.len() {
            let d = cell.delta(&reference[sorted[a]], &reference[sorted[b]]);
            if d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= cutoff * cutoff {
                uf.union(a, b);
            }
        }
    }
    group(&mut uf, &sorted)
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

/// Isolated and clustered vacancies per nm of track.
pub fn linear_densities(clusters: &ClusterSet, track_length_nm: f64) -> (f64, f64) {
    (
        clusters.isolated as f64 / track_length_nm,
        clusters.clustered as f64 / track_length_nm,
    )
}

/// CSV listing of vacancy sites with their cluster membership.
pub fn clusters_to_csv(clusters: &ClusterSet, reference: &[Vec3]) -> String {
    let mut s = String::from("site,x_nm,y_nm,z_nm,cluster_id,cluster_size\n");
    for (id, c) in clusters.clusters.iter().enumerate() {
        for &site in c {
            let p = reference[site];
            s.push_str(&format!("{site},{},{},{},{id},{}\n", p[0], p[1], p[2], c.len()));
        }
    }
    s
}
