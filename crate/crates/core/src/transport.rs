//! Wasserstein-2 distances between equal-weight empirical measures on the
//! line and on the circle, and between an empirical measure and a grid
//! density on the circle.

use crate::error::{Error, Result};
use crate::meanfield::GridDensity;
use crate::torus::{geodesic_disp, wrap_f64};

/// Uniform atomic measure `(1/n) Σ δ_{x_i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    atoms: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(atoms: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::EmptyMeasure);
        }
        if let Some(&x) = atoms.iter().find(|x| !x.is_finite()) {
            return Err(Error::NonFinite(x));
        }
        Ok(Self { atoms })
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    fn sorted(&self) -> Vec<f64> {
        let mut v = self.atoms.clone();
        v.sort_by(f64::total_cmp);
        v
    }

    /// Sorted atoms of the circle measure, each wrapped into `[0, 1)`.
    fn sorted_on_circle(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.atoms.iter().map(|&x| wrap_f64(x)).collect();
        v.sort_by(f64::total_cmp);
        v
    }

    /// Quantile resampling to `m` equal-mass atoms: atom `i` sits at the
    /// `(i + ½)/m` quantile of the step CDF.
    fn resample_sorted(sorted: &[f64], m: usize) -> Vec<f64> {
        let n = sorted.len();
        (0..m)
            .map(|i| {
                let q = (i as f64 + 0.5) / m as f64;
                sorted[((q * n as f64) as usize).min(n - 1)]
            })
            .collect()
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Common atom count for two measures: the least common multiple, or the
/// larger count when the lcm exceeds [`MAX_RESAMPLED_ATOMS`].
pub const MAX_RESAMPLED_ATOMS: usize = 4096;

fn common_size(n: usize, m: usize) -> usize {
    let l = n / gcd(n, m) * m;
    if l <= MAX_RESAMPLED_ATOMS {
        l
    } else {
        n.max(m)
    }
}

fn equalise(a: Vec<f64>, b: Vec<f64>) -> (Vec<f64>, Vec<f64>) {
    if a.len() == b.len() {
        return (a, b);
    }
    let m = common_size(a.len(), b.len());
    (
        EmpiricalMeasure::resample_sorted(&a, m),
        EmpiricalMeasure::resample_sorted(&b, m),
    )
}

/// Exact W2 on ℝ between equal-weight measures: match sorted atoms.
pub fn w2_line(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> f64 {
    let (x, y) = equalise(mu.sorted(), nu.sorted());
    let sum: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum();
    (sum / x.len() as f64).sqrt()
}

/// Squared circle distance for sorted atom sequences, minimised over the
/// `n` cyclic shifts of the matching.
fn w2_sq_circle_sorted(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let mut best = f64::INFINITY;
    for shift in 0..n {
        let mut sum = 0.0;
        for i in 0..n {
            let d = geodesic_disp(x[i], y[(i + shift) % n]);
            sum += d * d;
            if sum >= best {
                break;
            }
        }
        best = best.min(sum);
    }
    best / n as f64
}

/// Exact W2 on the unit circle with geodesic ground cost. For equal-weight
/// atoms some optimal matching is a cyclic shift of the sorted orders.
pub fn w2_circle(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> f64 {
    let (x, y) = equalise(mu.sorted_on_circle(), nu.sorted_on_circle());
    w2_sq_circle_sorted(&x, &y).sqrt()
}

/// `m` equal-mass atoms at the `(i − ½)/m` quantiles of `g`, using the
/// piecewise-linear CDF through the cell faces.
pub fn density_quantiles(g: &GridDensity, m: usize) -> Vec<f64> {
    let n = g.len();
    let dx = g.dx();
    let mut cdf = Vec::with_capacity(n + 1);
    cdf.push(0.0);
    for v in g.values() {
        cdf.push(cdf.last().unwrap() + v * dx);
    }
    let total = cdf[n];
    let mut out = Vec::with_capacity(m);
    let mut cell = 0;
    for i in 0..m {
        let q = (i as f64 + 0.5) / m as f64 * total;
        while cell + 1 < n && cdf[cell + 1] < q {
            cell += 1;
        }
        let mass = cdf[cell + 1] - cdf[cell];
        let frac = if mass > 0.0 { (q - cdf[cell]) / mass } else { 0.5 };
        out.push(wrap_f64((cell as f64 + frac.clamp(0.0, 1.0)) * dx));
    }
    out
}

/// Atom count used against a grid density: the smallest multiple of the
/// atom count not below `max(min_atoms, n_atoms)`, capped by
/// [`MAX_RESAMPLED_ATOMS`] unless the measure itself is larger.
pub fn default_quantile_count(n_atoms: usize, min_atoms: usize) -> usize {
    let target = min_atoms.max(n_atoms);
    let mult = target.div_ceil(n_atoms) * n_atoms;
    if mult <= MAX_RESAMPLED_ATOMS {
        mult
    } else {
        n_atoms.max(MAX_RESAMPLED_ATOMS)
    }
}

/// W2 on the circle between `mu` and a grid density, via `m` quantile atoms
/// of `g` and `mu` resampled to `m` atoms.
pub fn w2_circle_density(mu: &EmpiricalMeasure, g: &GridDensity, m: usize) -> Result<f64> {
    if m < mu.len() {
        return Err(Error::InvalidParameter(format!(
            "quantile count {m} is below the atom count {}",
            mu.len()
        )));
    }
    let mass = g.mass();
    if (mass - 1.0).abs() > 1e-10 {
        return Err(Error::Unnormalised { mass });
    }
    let x = EmpiricalMeasure::resample_sorted(&mu.sorted_on_circle(), m);
    let mut y = density_quantiles(g, m);
    y.sort_by(f64::total_cmp);
    Ok(w2_sq_circle_sorted(&x, &y).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::torus::geodesic_dist;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn em(v: &[f64]) -> EmpiricalMeasure {
        EmpiricalMeasure::new(v.to_vec()).unwrap()
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    fn brute_w2(x: &[f64], y: &[f64], cost: impl Fn(f64, f64) -> f64) -> f64 {
        let best = permutations(x.len())
            .iter()
            .map(|p| p.iter().enumerate().map(|(i, &j)| cost(x[i], y[j])).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        (best / x.len() as f64).sqrt()
    }

    #[test]
    fn line_examples() {
        assert_eq!(w2_line(&em(&[0.2, 0.4]), &em(&[0.2, 0.4])), 0.0);
        assert_abs_diff_eq!(w2_line(&em(&[0.0]), &em(&[0.5])), 0.5);
        let (x, y) = ([0.1, 0.5, 0.9], [0.2, 0.4, 0.8]);
        let brute = brute_w2(&x, &y, |a, b| (a - b).powi(2));
        assert_abs_diff_eq!(w2_line(&em(&x), &em(&y)), brute, epsilon = 1e-14);
    }

    #[test]
    fn circle_examples() {
        assert_abs_diff_eq!(w2_circle(&em(&[0.0]), &em(&[0.9])), 0.1, epsilon = 1e-15);
        let mu = em(&[0.1, 0.7, 0.95]);
        assert_eq!(w2_circle(&mu, &mu), 0.0);
        assert!(EmpiricalMeasure::new(vec![]).is_err());
    }

    #[test]
    fn unequal_sizes_resample_to_common_count() {
        assert_eq!(common_size(2, 3), 6);
        assert_eq!(common_size(4096, 4095), 4096);
        let d = w2_line(&em(&[0.0, 1.0]), &em(&[0.0, 0.5, 1.0]));
        assert!(d > 0.0 && d < 0.5);
    }

    #[test]
    fn quantile_count_is_a_multiple() {
        assert_eq!(default_quantile_count(99, 256), 297);
        assert_eq!(default_quantile_count(256, 256), 256);
        assert_eq!(default_quantile_count(5000, 256), 5000);
    }

    #[test]
    fn density_self_distance_is_small() {
        let g = GridDensity::from_fn(64, |x| 1.0 + 0.5 * (2.0 * std::f64::consts::PI * x).cos()).unwrap();
        let q = density_quantiles(&g, 128);
        let d = w2_circle_density(&em(&q), &g, 128).unwrap();
        assert!(d < 1e-12, "{d}");
    }

    #[test]
    fn uniform_density_against_equispaced_atoms() {
        for n in [4, 16, 64] {
            let g = GridDensity::uniform(64).unwrap();
            let atoms: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
            let d = w2_circle_density(&em(&atoms), &g, n).unwrap();
            assert!(d < 1.0 / n as f64, "n = {n}: {d}");
        }
    }

    #[test]
    fn narrow_bump_against_antipode() {
        let n = 128;
        let mut values = vec![0.0; n];
        values[n / 2] = n as f64;
        let g = GridDensity::new(values).unwrap();
        let d = w2_circle_density(&em(&[0.0]), &g, 256).unwrap();
        assert!((d - 0.5).abs() < 2.0 / n as f64, "{d}");
    }

    #[test]
    fn density_rejects_bad_inputs() {
        let g = GridDensity::uniform(8).unwrap();
        assert!(w2_circle_density(&em(&[0.1, 0.2]), &g, 1).is_err());
        let bad = GridDensity::new_unchecked(vec![2.0; 8]);
        assert!(matches!(
            w2_circle_density(&em(&[0.1]), &bad, 4),
            Err(Error::Unnormalised { .. })
        ));
    }

    proptest! {
        #[test]
        fn circle_matches_brute_force(x in prop::collection::vec(0.0..1.0f64, 5), y in prop::collection::vec(0.0..1.0f64, 5)) {
            let brute = brute_w2(&x, &y, |a, b| geodesic_dist(a, b).powi(2));
            prop_assert!((w2_circle(&em(&x), &em(&y)) - brute).abs() < 1e-12);
        }

        #[test]
        fn symmetric_and_triangle(
            x in prop::collection::vec(0.0..1.0f64, 6),
            y in prop::collection::vec(0.0..1.0f64, 6),
            z in prop::collection::vec(0.0..1.0f64, 6),
        ) {
            let (a, b, c) = (em(&x), em(&y), em(&z));
            prop_assert!((w2_line(&a, &b) - w2_line(&b, &a)).abs() < 1e-12);
            prop_assert!((w2_circle(&a, &b) - w2_circle(&b, &a)).abs() < 1e-12);
            prop_assert!(w2_line(&a, &c) <= w2_line(&a, &b) + w2_line(&b, &c) + 1e-12);
            prop_assert!(w2_circle(&a, &c) <= w2_circle(&a, &b) + w2_circle(&b, &c) + 1e-12);
            prop_assert!(w2_circle(&a, &b) <= w2_line(&a, &b) + 1e-12);
        }

        #[test]
        fn shifted_copy_bound(x in prop::collection::vec(0.0..1.0f64, 1..8), s in -0.5..0.5f64) {
            let shifted: Vec<f64> = x.iter().map(|&v| wrap_f64(v + s)).collect();
            let d = w2_circle(&em(&x), &em(&shifted));
            prop_assert!(d <= s.abs().min(1.0 - s.abs()) + 1e-12);
            if x.len() == 1 {
                prop_assert!((d - s.abs()).abs() < 1e-12);
            }
        }
    }
}
