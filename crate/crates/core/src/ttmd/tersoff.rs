//! Tersoff bond-order potential for carbon.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::MdError;

pub const CARBON_PARAMS: &str = include_str!("../../data/tersoff_carbon.toml");

/// Parameter set in nm / eV units. The angular term carries no exponential
/// (λ3 = 0), which is the carbon convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TersoffParams {
    pub name: String,
    pub a: f64,
    pub b: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta: f64,
    pub n: f64,
    pub c: f64,
    pub d: f64,
    pub h: f64,
    /// Start of the smooth cutoff, nm.
    pub r_inner: f64,
    /// End of the cutoff, nm.
    pub r_outer: f64,
}

impl TersoffParams {
    pub fn carbon() -> Self {
        Self::from_toml(CARBON_PARAMS).expect("bundled Tersoff parameters parse")
    }

    pub fn from_toml(text: &str) -> Result<Self, MdError> {
        let p: Self = toml::from_str(text).map_err(|e| MdError::Params(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), MdError> {
        let positive = [
            ("a", self.a),
            ("b", self.b),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("beta", self.beta),
            ("n", self.n),
            ("c", self.c),
            ("d", self.d),
            ("r_inner", self.r_inner),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(MdError::Params(format!("{name} must be positive")));
            }
        }
        if !(self.r_outer > self.r_inner) {
            return Err(MdError::Params("r_outer must exceed r_inner".into()));
        }
        Ok(())
    }

    pub fn cutoff(&self) -> f64 {
        self.r_outer
    }

    /// Smooth cutoff and its radial derivative.
    #[inline]
    pub fn fc(&self, r: f64) -> (f64, f64) {
        if r <= self.r_inner {
            (1.0, 0.0)
        } else if r >= self.r_outer {
            (0.0, 0.0)
        } else {
            let w = PI / (self.r_outer - self.r_inner);
            let x = w * (r - self.r_inner);
            (0.5 + 0.5 * x.cos(), -0.5 * w * x.sin())
        }
    }

    /// Angular function g(cos θ) and dg/dcos θ.
    #[inline]
    pub fn angular(&self, cos_t: f64) -> (f64, f64) {
        let c2 = self.c * self.c;
        let d2 = self.d * self.d;
        let hc = self.h - cos_t;
        let den = d2 + hc * hc;
        let g = 1.0 + c2 / d2 - c2 / den;
        let dg = -2.0 * c2 * hc / (den * den);
        (g, dg)
    }

    /// Bond order b(ζ) and db/dζ.
    #[inline]
    pub fn bond_order(&self, zeta: f64) -> (f64, f64) {
        if zeta <= 0.0 {
            return (1.0, 0.0);
        }
        let bz = self.beta * zeta;
        let x = bz.powf(self.n);
        let inv = -1.0 / (2.0 * self.n);
        let base = 1.0 + x;
        let b = base.powf(inv);
        // db/dζ = -½ (1 + x)^(inv - 1) · x / ζ
        let db = -0.5 * b / base * x / zeta;
        (b, db)
    }

    /// Energy per atom of a perfect diamond lattice with bond length `r`.
    /// Every atom has four neighbours at the tetrahedral angle, so the sum
    /// collapses to a closed form.
    pub fn diamond_energy_per_atom(&self, r: f64) -> f64 {
        let (fc, _) = self.fc(r);
        let (g, _) = self.angular(-1.0 / 3.0);
        let zeta = 3.0 * fc * g;
        let (b, _) = self.bond_order(zeta);
        let fr = self.a * (-self.lambda1 * r).exp();
        let fa = -self.b * (-self.lambda2 * r).exp();
        // four bonds per atom, each bond shared between two atoms
        0.5 * 4.0 * fc * (fr + b * fa)
    }

    /// Equilibrium bond length and cohesive energy of perfect diamond, by
    /// golden-section search on the closed form.
    pub fn diamond_equilibrium(&self) -> (f64, f64) {
        let f = |r: f64| self.diamond_energy_per_atom(r);
        let (mut lo, mut hi) = (0.12, self.r_inner);
        let phi = 0.5 * (5f64.sqrt() - 1.0);
        let mut x1 = hi - phi * (hi - lo);
        let mut x2 = lo + phi * (hi - lo);
        let (mut f1, mut f2) = (f(x1), f(x2));
        for _ in 0..200 {
            if f1 < f2 {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - phi * (hi - lo);
                f1 = f(x1);
            } else {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + phi * (hi - lo);
                f2 = f(x2);
            }
        }
        let r = 0.5 * (lo + hi);
        (r, f(r))
    }

    /// Equilibrium cubic lattice constant implied by [`Self::diamond_equilibrium`].
    pub fn diamond_lattice_constant(&self) -> f64 {
        self.diamond_equilibrium().0 * 4.0 / 3f64.sqrt()
    }
}
