//! Sample-set statistics: spread, mode coverage, fidelity under the data
//! density, and exact 2-Wasserstein distance between equal-size sets.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::oracle::{Condition, Oracle};

/// Largest set size accepted by [`wasserstein2`].
pub const MAX_W2_SIZE: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleMeta {
    pub variant: String,
    pub seed_index: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    samples: Vec<DVector<f64>>,
    meta: Vec<SampleMeta>,
}

impl SampleSet {
    pub fn new(samples: Vec<DVector<f64>>, meta: Vec<SampleMeta>) -> Result<Self> {
        if samples.len() != meta.len() {
            return Err(Error::Metric(format!(
                "{} samples but {} metadata rows",
                samples.len(),
                meta.len()
            )));
        }
        if let Some(first) = samples.first() {
            let dim = first.len();
            if let Some(bad) = samples.iter().find(|s| s.len() != dim) {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: bad.len(),
                });
            }
        }
        Ok(Self { samples, meta })
    }

    /// A set with no variant label and seed indices `0..n`.
    pub fn from_vectors(samples: Vec<DVector<f64>>) -> Result<Self> {
        let meta = (0..samples.len() as u64)
            .map(|i| SampleMeta {
                variant: String::new(),
                seed_index: i,
            })
            .collect();
        Self::new(samples, meta)
    }

    pub fn samples(&self) -> &[DVector<f64>] {
        &self.samples
    }

    pub fn meta(&self) -> &[SampleMeta] {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.samples.first().map(|s| s.len())
    }
}

/// Mean Euclidean distance over all unordered pairs.
pub fn pairwise_diversity(set: &SampleSet) -> Result<f64> {
    let xs = set.samples();
    if xs.len() < 2 {
        return Err(Error::Metric("diversity needs at least two samples".into()));
    }
    let mut total = 0.0;
    for i in 0..xs.len() {
        for j in i + 1..xs.len() {
            total += (&xs[i] - &xs[j]).norm();
        }
    }
    let pairs = xs.len() * (xs.len() - 1) / 2;
    Ok(total / pairs as f64)
}

/// Number of modes with at least one sample within `tau`.
pub fn mode_coverage(set: &SampleSet, modes: &[DVector<f64>], tau: f64) -> Result<usize> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::Metric(format!("radius must be positive, got {tau}")));
    }
    Ok(modes
        .iter()
        .filter(|m| {
            set.samples()
                .iter()
                .any(|x| x.len() == m.len() && (x - *m).norm() <= tau)
        })
        .count())
}

/// Mean of `−log p₀(x | y)` over the set.
pub fn fidelity_nll(set: &SampleSet, oracle: &Oracle, y: Condition) -> Result<f64> {
    let mixture = oracle.mixture(y)?;
    if set.is_empty() {
        return Err(Error::Metric("fidelity needs at least one sample".into()));
    }
    let mut total = 0.0;
    for x in set.samples() {
        total -= mixture.log_density(x)?;
    }
    Ok(total / set.len() as f64)
}

/// `√(min over matchings of mean ‖a_i − b_σ(i)‖²)`, solved exactly.
pub fn wasserstein2(a: &SampleSet, b: &SampleSet) -> Result<f64> {
    let n = a.len();
    if n != b.len() {
        return Err(Error::Metric(format!("set sizes differ: {n} vs {}", b.len())));
    }
    if n == 0 {
        return Err(Error::Metric("sets are empty".into()));
    }
    if n > MAX_W2_SIZE {
        return Err(Error::Metric(format!("sets of {n} exceed the limit of {MAX_W2_SIZE}")));
    }
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim().unwrap_or(0),
            got: b.dim().unwrap_or(0),
        });
    }
    let cost: Vec<Vec<f64>> = a
        .samples()
        .iter()
        .map(|x| b.samples().iter().map(|z| (x - z).norm_squared()).collect())
        .collect();
    let (_, total) = min_cost_assignment(&cost);
    Ok((total.max(0.0) / n as f64).sqrt())
}

/// Minimum-cost perfect matching on a square cost matrix.
///
/// Shortest augmenting paths with row and column potentials, `O(n³)`.
/// Returns `assignment[row] = column` and the total cost.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let n = cost.len();
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    // 1-based arrays with a virtual column 0 holding the row being inserted.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut min_to = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r = owner[col0];
            let mut delta = f64::INFINITY;
            let mut next = 0;
            for col in 1..=n {
                if used[col] {
                    continue;
                }
                let reduced = cost[r - 1][col - 1] - u[r] - v[col];
                if reduced < min_to[col] {
                    min_to[col] = reduced;
                    way[col] = col0;
                }
                if min_to[col] < delta {
                    delta = min_to[col];
                    next = col;
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[owner[col]] += delta;
                    v[col] -= delta;
                } else {
                    min_to[col] -= delta;
                }
            }
            col0 = next;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for col in 1..=n {
        assignment[owner[col] - 1] = col - 1;
    }
    let total = assignment.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
    (assignment, total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{Component, GaussianMixture};
    use crate::schedule::NoiseSchedule;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn set(xs: &[&[f64]]) -> SampleSet {
        SampleSet::from_vectors(xs.iter().map(|x| DVector::from_column_slice(x)).collect()).unwrap()
    }

    fn brute_force(cost: &[Vec<f64>]) -> f64 {
        fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
            if row == cost.len() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for c in 0..cost.len() {
                if !used[c] {
                    used[c] = true;
                    best = best.min(cost[row][c] + go(cost, row + 1, used));
                    used[c] = false;
                }
            }
            best
        }
        go(cost, 0, &mut vec![false; cost.len()])
    }

    #[test]
    fn diversity_examples() {
        assert_eq!(
            pairwise_diversity(&set(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]])).unwrap(),
            0.0
        );
        assert_eq!(pairwise_diversity(&set(&[&[0.0], &[4.0]])).unwrap(), 4.0);
        assert!(pairwise_diversity(&set(&[&[0.0]])).is_err());
    }

    #[test]
    fn coverage_examples() {
        let modes = vec![DVector::from_vec(vec![-2.0]), DVector::from_vec(vec![2.0])];
        assert_eq!(mode_coverage(&set(&[&[0.0], &[0.5]]), &modes, 1.0).unwrap(), 0);
        assert_eq!(mode_coverage(&set(&[&[-2.0], &[2.0]]), &modes, 0.1).unwrap(), 2);
        assert_eq!(mode_coverage(&set(&[&[1.5]]), &modes, 1.0).unwrap(), 1);
        assert!(mode_coverage(&set(&[&[1.5]]), &modes, 0.0).is_err());
    }

    #[test]
    fn nll_at_mode_centers() {
        let s = 0.1;
        let m = GaussianMixture::new(vec![
            Component::new(0.5, DVector::from_vec(vec![-2.0]), s),
            Component::new(0.5, DVector::from_vec(vec![2.0]), s),
        ])
        .unwrap();
        let o = Oracle::single(NoiseSchedule::default(), m).unwrap();
        let y = Condition::Label(0);
        let peak = 1.0 / (s * (2.0 * std::f64::consts::PI).sqrt());
        // the other component contributes exp(−800), far below f64 resolution
        let want = -(0.5 * peak).ln();
        assert_relative_eq!(
            fidelity_nll(&set(&[&[-2.0], &[2.0]]), &o, y).unwrap(),
            want,
            epsilon = 1e-12
        );
        let far = fidelity_nll(&set(&[&[1e3]]), &o, y).unwrap();
        assert!(far.is_finite() && far > 1e7);
        assert!(fidelity_nll(&set(&[&[0.0]]), &o, Condition::Label(3)).is_err());
    }

    #[test]
    fn w2_examples() {
        let a = set(&[&[0.0, 1.0], &[2.0, -1.0], &[5.0, 5.0]]);
        assert_eq!(wasserstein2(&a, &a).unwrap(), 0.0);
        assert_eq!(wasserstein2(&set(&[&[0.0]]), &set(&[&[3.0]])).unwrap(), 3.0);
        assert!(wasserstein2(&a, &set(&[&[0.0, 0.0]])).is_err());
        let big = SampleSet::from_vectors(vec![DVector::zeros(1); 257]).unwrap();
        assert!(wasserstein2(&big, &big).is_err());
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut s = crate::rng::stream(0, 0, "hungarian");
        for n in 1..=7 {
            for _ in 0..20 {
                let flat = crate::rng::standard_normal(&mut s, n * n);
                let cost: Vec<Vec<f64>> = (0..n)
                    .map(|r| (0..n).map(|c| flat[r * n + c].abs() * 10.0).collect())
                    .collect();
                let (assign, total) = min_cost_assignment(&cost);
                let mut seen = assign.clone();
                seen.sort();
                assert_eq!(seen, (0..n).collect::<Vec<_>>());
                assert!((total - brute_force(&cost)).abs() < 1e-9);
            }
        }
    }

    fn vecs(raw: Vec<Vec<f64>>) -> SampleSet {
        SampleSet::from_vectors(raw.into_iter().map(DVector::from_vec).collect()).unwrap()
    }

    fn pts() -> impl Strategy<Value = Vec<Vec<f64>>> {
        proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 2), 6)
    }

    proptest! {
        #[test]
        fn w2_symmetric_and_triangle(a in pts(), b in pts(), c in pts()) {
            let (a, b, c) = (vecs(a), vecs(b), vecs(c));
            let ab = wasserstein2(&a, &b).unwrap();
            prop_assert!((ab - wasserstein2(&b, &a).unwrap()).abs() <= 1e-9);
            let bc = wasserstein2(&b, &c).unwrap();
            let ac = wasserstein2(&a, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-9);
        }

        #[test]
        fn metrics_permutation_invariant(a in pts(), b in pts(), shift in -3.0f64..3.0, k in 0.1f64..4.0) {
            let mut rev = a.clone();
            rev.reverse();
            let (sa, sr, sb) = (vecs(a.clone()), vecs(rev), vecs(b));
            let d = pairwise_diversity(&sa).unwrap();
            prop_assert!((d - pairwise_diversity(&sr).unwrap()).abs() <= 1e-9);
            prop_assert!((wasserstein2(&sa, &sb).unwrap() - wasserstein2(&sr, &sb).unwrap()).abs() <= 1e-9);
            let modes: Vec<DVector<f64>> = sb.samples().to_vec();
            prop_assert_eq!(mode_coverage(&sa, &modes, 1.0).unwrap(), mode_coverage(&sr, &modes, 1.0).unwrap());

            let moved = vecs(a.iter().map(|x| x.iter().map(|v| v + shift).collect()).collect());
            prop_assert!((pairwise_diversity(&moved).unwrap() - d).abs() <= 1e-9);
            let scaled = vecs(a.iter().map(|x| x.iter().map(|v| v * k).collect()).collect());
            prop_assert!((pairwise_diversity(&scaled).unwrap() - k * d).abs() <= 1e-9 * (1.0 + k * d));
        }
    }
}
