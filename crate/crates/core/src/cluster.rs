//! Size-penalized 1-D k-means for grouping layers by weight spread.
//!
//! The objective being minimized is
//!
//! ```text
//! sum_j [ sum_{x in C_j} (x - mu_j)^2  +  lambda * (|C_j| - N/K)^2 ]
//! ```
//!
//! so `lambda = 0` is plain k-means and large `lambda` forces near-equal
//! cluster sizes. Because the penalty depends only on cluster sizes, some
//! global optimum always puts each cluster on a contiguous run of the
//! sorted features (swapping two out-of-order points between clusters keeps
//! every size and never increases distortion), so the exact minimizer is
//! found by dynamic programming over segment boundaries in O(K * N^2) —
//! no iterative descent, no local optima.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    /// Cluster index per feature, aligned with the input order.
    pub assignment: Vec<usize>,
    /// One centroid per cluster, ascending; empty clusters report 0.
    pub centroids: Vec<f64>,
    pub lambda: f64,
    /// Value of the objective at the returned assignment.
    pub objective: f64,
}

impl ClusterAssignment {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.centroids.len()];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }
}

/// Evaluates the clustering objective for an explicit assignment.
pub fn cluster_objective(
    features: &[f64],
    assignment: &[usize],
    centroids: &[f64],
    lambda: f64,
) -> f64 {
    let k = centroids.len();
    let target = features.len() as f64 / k as f64;
    let mut sizes = vec![0usize; k];
    let mut distortion = 0.0;
    for (&x, &a) in features.iter().zip(assignment) {
        distortion += (x - centroids[a]).powi(2);
        sizes[a] += 1;
    }
    let penalty: f64 = sizes.iter().map(|&s| (s as f64 - target).powi(2)).sum();
    distortion + lambda * penalty
}

/// Clusters 1-D features into `k` groups under the size-penalized objective.
///
/// Returns the exact global minimizer. Clusters are (possibly empty)
/// contiguous segments of the features sorted by `(value, input index)`,
/// which loses no generality for this objective; the best segmentation is
/// chosen by dynamic programming. Deterministic: cost ties prefer the
/// longer trailing segment, so equal-cost solutions resolve the same way
/// every run.
pub fn adaptive_kmeans(features: &[f64], k: usize, lambda: f64) -> Result<ClusterAssignment> {
    let n = features.len();
    if k == 0 {
        return Err(Error::InvalidArg("cluster count must be positive".into()));
    }
    if k > n {
        return Err(Error::InvalidArg(format!("cannot split {n} features into {k} clusters")));
    }
    if features.iter().any(|f| !f.is_finite()) {
        return Err(Error::InvalidArg("features must be finite".into()));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArg(format!("lambda must be non-negative, got {lambda}")));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| features[a].total_cmp(&features[b]).then(a.cmp(&b)));
    let sorted: Vec<f64> = order.iter().map(|&i| features[i]).collect();

    // Prefix sums so any segment's sum of squared deviations from its mean
    // is O(1): sse([i, j)) = sum(x^2) - sum(x)^2 / len.
    let mut ps = vec![0.0f64; n + 1];
    let mut pss = vec![0.0f64; n + 1];
    for (i, &x) in sorted.iter().enumerate() {
        ps[i + 1] = ps[i] + x;
        pss[i + 1] = pss[i] + x * x;
    }
    let seg_sse = |i: usize, j: usize| -> f64 {
        if j <= i {
            return 0.0;
        }
        let s = ps[j] - ps[i];
        ((pss[j] - pss[i]) - s * s / (j - i) as f64).max(0.0)
    };
    let target = n as f64 / k as f64;
    let size_pen = |len: usize| lambda * (len as f64 - target).powi(2);

    // dp[j][i]: least cost of covering the first i sorted points with j
    // segments (clusters), counting each segment's size penalty.
    let mut dp = vec![vec![f64::INFINITY; n + 1]; k + 1];
    let mut cut = vec![vec![0usize; n + 1]; k + 1];
    dp[0][0] = 0.0;
    for j in 1..=k {
        for i in 0..=n {
            for prev in 0..=i {
                let base = dp[j - 1][prev];
                if !base.is_finite() {
                    continue;
                }
                let cand = base + seg_sse(prev, i) + size_pen(i - prev);
                if cand < dp[j][i] {
                    dp[j][i] = cand;
                    cut[j][i] = prev;
                }
            }
        }
    }

    let mut bounds = vec![0usize; k + 1];
    bounds[k] = n;
    for j in (1..=k).rev() {
        bounds[j - 1] = cut[j][bounds[j]];
    }

    let mut assignment = vec![0usize; n];
    let mut centroids = vec![0.0f64; k];
    for j in 0..k {
        let (lo, hi) = (bounds[j], bounds[j + 1]);
        for t in lo..hi {
            assignment[order[t]] = j;
        }
        if hi > lo {
            centroids[j] = (ps[hi] - ps[lo]) / (hi - lo) as f64;
        }
    }
    let objective = cluster_objective(features, &assignment, &centroids, lambda);
    Ok(ClusterAssignment { assignment, centroids, lambda, objective })
}

/// Maps clusters to bitwidths: ascending centroid gets ascending bits.
///
/// `bitset` must hold exactly `k` distinct widths. When some clusters are
/// empty, the unused widths are the smallest ones, so the populated clusters
/// always receive the largest available bits in centroid order. Returns the
/// width per cluster index.
pub fn assign_bitwidths(clusters: &ClusterAssignment, bitset: &[u8]) -> Result<Vec<u8>> {
    let k = clusters.k();
    if bitset.len() != k {
        return Err(Error::InvalidArg(format!(
            "bitset holds {} widths for {k} clusters",
            bitset.len()
        )));
    }
    let mut bits = bitset.to_vec();
    bits.sort_unstable();
    bits.dedup();
    if bits.len() != k {
        return Err(Error::InvalidArg("bitset widths must be distinct".into()));
    }

    let sizes = clusters.sizes();
    let mut populated: Vec<usize> = (0..k).filter(|&j| sizes[j] > 0).collect();
    populated.sort_by(|&a, &b| {
        clusters.centroids[a].total_cmp(&clusters.centroids[b]).then(a.cmp(&b))
    });

    let mut out = vec![0u8; k];
    // Leftover (smallest) widths go to empty clusters; nothing maps to them.
    let offset = k - populated.len();
    let mut spare = bits[..offset].iter().copied();
    for j in 0..k {
        if sizes[j] == 0 {
            out[j] = spare.next().expect("one spare width per empty cluster");
        }
    }
    for (rank, &j) in populated.iter().enumerate() {
        out[j] = bits[offset + rank];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive minimum of the objective over all k^n assignments, with
    /// centroids at cluster means.
    pub(crate) fn brute_force_optimum(features: &[f64], k: usize, lambda: f64) -> f64 {
        let n = features.len();
        let mut best = f64::INFINITY;
        let total = k.pow(n as u32);
        for code in 0..total {
            let mut c = code;
            let mut assignment = vec![0usize; n];
            for slot in assignment.iter_mut() {
                *slot = c % k;
                c /= k;
            }
            let mut sums = vec![0.0f64; k];
            let mut sizes = vec![0usize; k];
            for (&x, &a) in features.iter().zip(&assignment) {
                sums[a] += x;
                sizes[a] += 1;
            }
            let centroids: Vec<f64> = (0..k)
                .map(|j| if sizes[j] > 0 { sums[j] / sizes[j] as f64 } else { 0.0 })
                .collect();
            best = best.min(cluster_objective(features, &assignment, &centroids, lambda));
        }
        best
    }

    #[test]
    fn two_pair_worked_example() {
        let ca = adaptive_kmeans(&[1.0, 2.0, 10.0, 11.0], 2, 0.0).unwrap();
        assert_eq!(ca.centroids, vec![1.5, 10.5]);
        assert!((ca.objective - 1.0).abs() < 1e-12);
        assert_eq!(ca.assignment, vec![0, 0, 1, 1]);
    }

    #[test]
    fn size_penalty_trades_distortion_for_balance() {
        let features = [0.0, 0.0, 0.0, 10.0];
        let loose = adaptive_kmeans(&features, 2, 0.0).unwrap();
        let mut sizes = loose.sizes();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![1, 3]);
        assert!(loose.objective.abs() < 1e-12);

        let tight = adaptive_kmeans(&features, 2, 1000.0).unwrap();
        assert_eq!(tight.sizes(), vec![2, 2]);
        assert!((tight.objective - 50.0).abs() < 1e-9);
    }

    #[test]
    fn matches_brute_force_on_small_plain_kmeans_instances() {
        // The third case traps single-start descent methods in a local
        // optimum (objective 5.8 instead of 0.01); the exact segmentation
        // must still find the global one.
        let cases: &[(&[f64], usize)] = &[
            (&[0.2, 0.25, 5.0, 5.5, 9.0], 3),
            (&[1.0, 1.1, 1.2, 8.0], 2),
            (&[-3.0, -2.9, 0.0, 3.0, 3.05, 3.1], 3),
            (&[0.5, 0.51, 0.52, 0.9, 0.91, 0.1], 2),
        ];
        for &(features, k) in cases {
            let got = adaptive_kmeans(features, k, 0.0).unwrap().objective;
            let want = brute_force_optimum(features, k, 0.0);
            assert!((got - want).abs() < 1e-9, "features {features:?}: {got} vs {want}");
        }
    }

    #[test]
    fn matches_brute_force_with_size_penalty() {
        let cases: &[(&[f64], usize, f64)] = &[
            (&[0.0, 0.0, 0.0, 10.0], 2, 1.0),
            (&[0.0, 0.0, 0.0, 10.0], 2, 1000.0),
            (&[1.0, 1.5, 2.0, 7.0, 7.5], 3, 2.5),
            (&[-1.0, 0.0, 0.5, 4.0, 4.1, 9.0], 3, 0.7),
        ];
        for &(features, k, lambda) in cases {
            let got = adaptive_kmeans(features, k, lambda).unwrap().objective;
            let want = brute_force_optimum(features, k, lambda);
            assert!(
                (got - want).abs() < 1e-9,
                "features {features:?} lambda {lambda}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn k_equals_n_gives_zero_objective() {
        let ca = adaptive_kmeans(&[4.0, -1.0, 2.0], 3, 7.0).unwrap();
        assert!(ca.objective.abs() < 1e-12);
        let mut seen = ca.assignment.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 3);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(adaptive_kmeans(&[1.0, 2.0], 3, 0.0).is_err());
        assert!(adaptive_kmeans(&[1.0, f64::NAN], 2, 0.0).is_err());
        assert!(adaptive_kmeans(&[1.0, 2.0], 0, 0.0).is_err());
        assert!(adaptive_kmeans(&[1.0, 2.0], 2, -1.0).is_err());
        assert!(adaptive_kmeans(&[1.0, 2.0], 2, f64::INFINITY).is_err());
    }

    #[test]
    fn reported_objective_matches_recomputation() {
        let features = [0.01, 0.02, 0.3, 0.5, 0.51, 0.9];
        let ca = adaptive_kmeans(&features, 3, 2.5).unwrap();
        let recomputed = cluster_objective(&features, &ca.assignment, &ca.centroids, ca.lambda);
        assert!((ca.objective - recomputed).abs() < 1e-9);
    }

    #[test]
    fn bitwidths_follow_centroid_order() {
        let ca = ClusterAssignment {
            assignment: vec![2, 0, 1, 3],
            centroids: vec![0.05, 0.01, 0.2, 0.09],
            lambda: 0.0,
            objective: 0.0,
        };
        let bits = assign_bitwidths(&ca, &[2, 4, 6, 8]).unwrap();
        // Centroid order: cluster 1 < 0 < 3 < 2.
        assert_eq!(bits, vec![4, 2, 8, 6]);
    }

    #[test]
    fn empty_clusters_absorb_the_smallest_bits() {
        // Two populated clusters out of four: they take 6 and 8.
        let ca = ClusterAssignment {
            assignment: vec![0, 0, 3],
            centroids: vec![0.4, 0.0, 0.0, 0.1],
            lambda: 0.0,
            objective: 0.0,
        };
        let bits = assign_bitwidths(&ca, &[2, 4, 6, 8]).unwrap();
        assert_eq!(bits[3], 6);
        assert_eq!(bits[0], 8);
    }

    #[test]
    fn identical_features_collapse_to_one_bitwidth() {
        let ca = adaptive_kmeans(&[0.3; 6], 4, 0.0).unwrap();
        let bits = assign_bitwidths(&ca, &[2, 4, 6, 8]).unwrap();
        let per_layer: Vec<u8> = ca.assignment.iter().map(|&a| bits[a]).collect();
        assert!(per_layer.iter().all(|&b| b == per_layer[0]));
        assert_eq!(per_layer[0], 8);
    }

    #[test]
    fn bitset_must_match_cluster_count() {
        let ca = adaptive_kmeans(&[1.0, 2.0, 3.0], 3, 0.0).unwrap();
        assert!(assign_bitwidths(&ca, &[2, 4]).is_err());
        assert!(assign_bitwidths(&ca, &[4, 4, 8]).is_err());
        assert!(assign_bitwidths(&ca, &[2, 4, 6]).is_ok());
    }

    proptest! {
        #[test]
        fn deterministic_valid_and_self_consistent(
            features in proptest::collection::vec(-10.0f64..10.0, 2..24),
            k in 1usize..5,
            lambda in prop_oneof![Just(0.0f64), 0.0f64..5.0],
        ) {
            prop_assume!(k <= features.len());
            let a = adaptive_kmeans(&features, k, lambda).unwrap();
            let b = adaptive_kmeans(&features, k, lambda).unwrap();
            prop_assert_eq!(&a, &b);
            for &c in &a.assignment {
                prop_assert!(c < k);
            }
            let recomputed = cluster_objective(&features, &a.assignment, &a.centroids, lambda);
            prop_assert!((a.objective - recomputed).abs() < 1e-9);
        }

        /// Reordering the input layers must permute the assignment the same
        /// way (checked on distinct values; exact duplicates may split
        /// across a boundary by input position).
        #[test]
        fn permuting_distinct_features_permutes_assignment(
            base in proptest::collection::vec(-10.0f64..10.0, 2..12),
            k in 1usize..5,
            lambda in 0.0f64..5.0,
            rot in 0usize..12,
        ) {
            let mut features = base;
            features.sort_by(f64::total_cmp);
            features.dedup();
            prop_assume!(features.len() >= 2 && k <= features.len());
            let rot = rot % features.len();
            let mut rotated = features.clone();
            rotated.rotate_left(rot);
            let a = adaptive_kmeans(&features, k, lambda).unwrap();
            let b = adaptive_kmeans(&rotated, k, lambda).unwrap();
            let mut expect = a.assignment.clone();
            expect.rotate_left(rot);
            prop_assert_eq!(b.assignment, expect);
            prop_assert_eq!(b.centroids, a.centroids);
        }
    }
}
