//! Cell lists and Verlet neighbour lists under periodic boundaries.

use super::system::{Cell, Vec3};

/// Spatial binning of points into a periodic grid of bins no smaller than
/// `min_bin` along any axis.
#[derive(Debug, Clone)]
pub struct CellList {
    cell: Cell,
    bins: [usize; 3],
    heads: Vec<Vec<u32>>,
}

impl CellList {
    pub fn new(cell: Cell, min_bin: f64, points: &[Vec3]) -> Self {
        let mut bins = [1usize; 3];
        for k in 0..3 {
            bins[k] = ((cell.lengths[k] / min_bin).floor() as usize).max(1);
        }
        let mut heads = vec![Vec::new(); bins[0] * bins[1] * bins[2]];
        let mut list = Self { cell, bins, heads: Vec::new() };
        for (i, p) in points.iter().enumerate() {
            let b = list.bin_of(p);
            heads[list.flat(b)].push(i as u32);
        }
        list.heads = heads;
        list
    }

    pub fn bins(&self) -> [usize; 3] {
        self.bins
    }

    #[inline]
    fn flat(&self, b: [usize; 3]) -> usize {
        (b[0] * self.bins[1] + b[1]) * self.bins[2] + b[2]
    }

    #[inline]
    pub fn bin_of(&self, p: &Vec3) -> [usize; 3] {
        let mut b = [0usize; 3];
        for k in 0..3 {
            let l = self.cell.lengths[k];
            let f = (p[k] / l).rem_euclid(1.0);
            b[k] = ((f * self.bins[k] as f64) as usize).min(self.bins[k] - 1);
        }
        b
    }

    /// Indices of the distinct bins in the 3×3×3 block around `b`.
    pub fn neighbor_bins(&self, b: [usize; 3]) -> Vec<usize> {
        let mut out = Vec::with_capacity(27);
        let axis = |k: usize| -> Vec<usize> {
            let n = self.bins[k];
            let mut v: Vec<usize> = [n - 1, 0, 1]
                .iter()
                .map(|&o| (b[k] + o) % n)
                .collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        let (ax, ay, az) = (axis(0), axis(1), axis(2));
        for &x in &ax {
            for &y in &ay {
                for &z in &az {
                    out.push(self.flat([x, y, z]));
                }
            }
        }
        out
    }

    /// Points in the bins surrounding `p`, in a fixed order.
    pub fn candidates(&self, p: &Vec3) -> impl Iterator<Item = usize> + '_ {
        self.neighbor_bins(self.bin_of(p))
            .into_iter()
            .flat_map(move |f| self.heads[f].iter().map(|&i| i as usize))
    }
}

/// Full (both directions) neighbour list within `cutoff + skin`.
#[derive(Debug, Clone)]
pub struct NeighborList {
    pub cutoff: f64,
    pub skin: f64,
    offsets: Vec<usize>,
    indices: Vec<u32>,
    anchor: Vec<Vec3>,
    builds: usize,
}

impl NeighborList {
    pub fn new(cutoff: f64, skin: f64) -> Self {
        Self {
            cutoff,
            skin,
            offsets: vec![0],
            indices: Vec::new(),
            anchor: Vec::new(),
            builds: 0,
        }
    }

    pub fn list_radius(&self) -> f64 {
        self.cutoff + self.skin
    }

    pub fn build(&mut self, cell: &Cell, positions: &[Vec3]) {
        let rl = self.list_radius();
        let rl2 = rl * rl;
        let cl = CellList::new(*cell, rl, positions);
        self.offsets.clear();
        self.indices.clear();
        self.offsets.push(0);
        for (i, p) in positions.iter().enumerate() {
            for j in cl.candidates(p) {
                if j == i {
                    continue;
                }
                let d = cell.delta(p, &positions[j]);
                if d[0] * d[0] + d[1] * d[1] + d[2] * d[2] < rl2 {
                    self.indices.push(j as u32);
                }
            }
            self.offsets.push(self.indices.len());
        }
        self.anchor = positions.to_vec();
        self.builds += 1;
    }

    /// True when some atom moved more than half the skin since the last build.
    pub fn needs_rebuild(&self, cell: &Cell, positions: &[Vec3]) -> bool {
        if self.anchor.len() != positions.len() {
            return true;
        }
        let lim = 0.25 * self.skin * self.skin;
        positions.iter().zip(&self.anchor).any(|(p, a)| {
            let d = cell.delta(a, p);
            d[0] * d[0] + d[1] * d[1] + d[2] * d[2] > lim
        })
    }

    pub fn update(&mut self, cell: &Cell, positions: &[Vec3]) -> bool {
        if self.needs_rebuild(cell, positions) {
            self.build(cell, positions);
            true
        } else {
            false
        }
    }

    #[inline]
    pub fn of(&self, i: usize) -> &[u32] {
        &self.indices[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn builds(&self) -> usize {
        self.builds
    }
}
