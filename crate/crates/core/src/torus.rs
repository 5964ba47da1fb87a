//! Geometry of the unit circle 𝕋 = [0, 1) and the von Mises mixture used
//! for initial opinions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{SeedSpec, Stream};

/// A position on the unit torus, always in `[0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
#[repr(transparent)]
pub struct TorusPoint(f64);

impl TorusPoint {
    pub fn new(x: f64) -> Result<Self> {
        wrap(x)
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for TorusPoint {
    type Error = Error;
    fn try_from(x: f64) -> Result<Self> {
        wrap(x)
    }
}

impl From<TorusPoint> for f64 {
    fn from(p: TorusPoint) -> f64 {
        p.0
    }
}

/// Reduces `x` modulo 1 into `[0, 1)`.
pub fn wrap(x: f64) -> Result<TorusPoint> {
    if !x.is_finite() {
        return Err(Error::NonFinite(x));
    }
    Ok(TorusPoint(wrap_f64(x)))
}

/// Unchecked `x mod 1`; the caller guarantees `x` is finite.
#[inline]
pub fn wrap_f64(x: f64) -> f64 {
    // one-period excursions are the common case inside the integrators
    if (0.0..1.0).contains(&x) {
        return x;
    } else if (-1.0..0.0).contains(&x) {
        let r = x + 1.0;
        return if r >= 1.0 { 0.0 } else { r };
    } else if (1.0..2.0).contains(&x) {
        return x - 1.0;
    }
    let r = x - x.floor();
    // x slightly below an integer can round up to exactly 1.0
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// Signed displacement `r` in `[-0.5, 0.5)` with `x + r ≡ y (mod 1)`.
#[inline]
pub fn geodesic_disp(x: f64, y: f64) -> f64 {
    let d = y - x;
    let r = if (-0.5..0.5).contains(&d) {
        d
    } else if (0.5..1.5).contains(&d) {
        d - 1.0
    } else if (-1.5..-0.5).contains(&d) {
        d + 1.0
    } else {
        d - (d + 0.5).floor()
    };
    if r >= 0.5 {
        r - 1.0
    } else {
        r
    }
}

#[inline]
pub fn geodesic_dist(x: f64, y: f64) -> f64 {
    geodesic_disp(x, y).abs()
}

/// One von Mises component `exp(κ cos(2π(x − μ))) / Z_κ` on `[0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VonMises {
    pub mean: f64,
    pub kappa: f64,
}

impl VonMises {
    /// `Z_κ = ∫₀¹ exp(κ cos 2πx) dx` by the periodic trapezoid rule, which
    /// converges geometrically for this integrand.
    pub fn normaliser(kappa: f64) -> f64 {
        const NODES: usize = 128;
        let h = 1.0 / NODES as f64;
        (0..NODES)
            .map(|i| (kappa * (std::f64::consts::TAU * i as f64 * h).cos()).exp())
            .sum::<f64>()
            * h
    }

    pub fn density(&self, x: f64) -> f64 {
        (self.kappa * (std::f64::consts::TAU * (x - self.mean)).cos()).exp()
            / Self::normaliser(self.kappa)
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        // uniform proposal under the envelope exp(κ)
        loop {
            let x: f64 = rng.random();
            let u: f64 = rng.random();
            let log_ratio = self.kappa * ((std::f64::consts::TAU * (x - self.mean)).cos() - 1.0);
            if u.ln() < log_ratio {
                return x;
            }
        }
    }
}

/// Finite mixture of von Mises components with normalised weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VonMisesMixture {
    pub components: Vec<(f64, VonMises)>,
}

impl VonMisesMixture {
    /// Two opinion clusters, ½f(·|0.65, 4) + ½f(·|0.25, 8).
    pub fn two_clusters() -> Self {
        Self {
            components: vec![
                (0.5, VonMises { mean: 0.65, kappa: 4.0 }),
                (0.5, VonMises { mean: 0.25, kappa: 8.0 }),
            ],
        }
    }

    pub fn density(&self, x: f64) -> f64 {
        let total: f64 = self.components.iter().map(|(w, _)| w).sum();
        self.components
            .iter()
            .map(|(w, c)| w * c.density(x))
            .sum::<f64>()
            / total
    }

    /// Draws `count` i.i.d. samples by picking a component, then rejection
    /// sampling inside it.
    pub fn sample<R: Rng>(&self, rng: &mut R, count: usize) -> Vec<TorusPoint> {
        let total: f64 = self.components.iter().map(|(w, _)| w).sum();
        (0..count)
            .map(|_| {
                let mut pick = rng.random::<f64>() * total;
                let mut chosen = &self.components[self.components.len() - 1].1;
                for (w, c) in &self.components {
                    if pick < *w {
                        chosen = c;
                        break;
                    }
                    pick -= w;
                }
                TorusPoint(wrap_f64(chosen.sample(rng)))
            })
            .collect()
    }
}

/// Initial-opinion sampler of the two-cluster scenario; a pure function of
/// `(seed, count)`.
pub fn sample_von_mises_mixture(seed: &SeedSpec, count: usize) -> Vec<TorusPoint> {
    let mut rng = seed.rng(Stream::InitialConditions);
    VonMisesMixture::two_clusters().sample(&mut rng, count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn displacement_examples() {
        assert_eq!(geodesic_disp(0.2, 0.2), 0.0);
        assert_abs_diff_eq!(geodesic_disp(0.9, 0.1), 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(geodesic_disp(0.1, 0.9), -0.2, epsilon = 1e-12);
        assert_eq!(geodesic_disp(0.0, 0.5), -0.5);
        assert_eq!(geodesic_disp(0.5, 0.0), -0.5);
    }

    #[test]
    fn wrap_examples() {
        assert_eq!(wrap(1.25).unwrap().get(), 0.25);
        assert_abs_diff_eq!(wrap(-0.1).unwrap().get(), 0.9, epsilon = 1e-15);
        assert_eq!(wrap(0.0).unwrap().get(), 0.0);
        assert_eq!(wrap(-1e-18).unwrap().get(), 0.0);
        assert!(wrap(f64::NAN).is_err());
        assert!(wrap(f64::INFINITY).is_err());
    }

    #[test]
    fn normaliser_matches_bessel_i0() {
        // I0(4) and I0(8) from tables
        assert_abs_diff_eq!(VonMises::normaliser(4.0), 11.301_921_952_136_33, epsilon = 1e-9);
        assert_abs_diff_eq!(VonMises::normaliser(8.0), 427.564_115_721_804_7, epsilon = 1e-7);
    }

    #[test]
    fn sampler_is_deterministic_and_supported() {
        let s = SeedSpec::new(11);
        let a = sample_von_mises_mixture(&s, 500);
        let b = sample_von_mises_mixture(&s, 500);
        assert_eq!(a, b);
        assert!(a.iter().all(|p| (0.0..1.0).contains(&p.get())));
    }

    proptest! {
        #[test]
        fn displacement_antisymmetric(x in 0.0f64..1.0, y in 0.0f64..1.0) {
            let d = geodesic_disp(x, y);
            prop_assert!((-0.5..0.5).contains(&d));
            if d != -0.5 && geodesic_disp(y, x) != -0.5 {
                prop_assert_eq!(d, -geodesic_disp(y, x));
            }
            prop_assert!((wrap_f64(x + d) - y).abs() < 1e-12 || (wrap_f64(x + d) - y).abs() > 1.0 - 1e-12);
        }

        #[test]
        fn wrap_idempotent(x in -1e6f64..1e6) {
            let w = wrap(x).unwrap().get();
            prop_assert!((0.0..1.0).contains(&w));
            prop_assert_eq!(wrap(w).unwrap().get(), w);
        }
    }
}
