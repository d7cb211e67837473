//! Rank statistics and controlled-assignment constructions backing the
//! ablation reports and the coding-map/error-map comparison.

use graincode::{mix_seed, GrainSpec};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Ranks with ties averaged, 1-based.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation. Degenerate inputs (constant vector, fewer
/// than two points) return 0.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "rank correlation needs paired samples");
    if a.len() < 2 {
        return 0.0;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..a.len() {
        let (da, db) = (ra[i] - mean, rb[i] - mean);
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// How many regions an assignment gives to each granularity.
pub fn grain_counts(assignment: &[usize], k_g: usize) -> Vec<usize> {
    let mut counts = vec![0usize; k_g];
    for &k in assignment {
        counts[k] += 1;
    }
    counts
}

/// Uniformly random region assignment with exactly the given per-grain
/// counts: the multiset is fixed, only placement is shuffled.
pub fn shuffled_assignment(counts: &[usize], seed: u64, image_index: u64) -> Vec<usize> {
    let mut cells: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(k, &c)| std::iter::repeat(k).take(c))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed ^ 0x5_4aff1e, image_index));
    cells.shuffle(&mut rng);
    cells
}

/// Monotone fineness score of an assigned granularity: the number of
/// codes the region emits, so finer granularities rank higher.
pub fn fineness(spec: &GrainSpec, k: usize) -> f64 {
    spec.codes_per_region(k) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_hand_values() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&a, &[10.0, 20.0, 25.0, 40.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&a, &[4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        // classic six-point example with one swap
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let y = [1.0, 2.0, 3.0, 4.0, 6.0, 5.0];
        assert!((spearman(&x, &y) - (1.0 - 6.0 * 2.0 / (6.0 * 35.0))).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 1.0], &[2.0, 3.0]), 0.0);
    }

    #[test]
    fn tied_ranks_are_averaged() {
        // ties in both vectors, correlation of [1.5,1.5,3] with itself
        let v = [5.0, 5.0, 9.0];
        assert!((spearman(&v, &v) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shuffled_assignment_preserves_counts() {
        let counts = vec![3, 5, 2];
        let a = shuffled_assignment(&counts, 7, 0);
        assert_eq!(grain_counts(&a, 3), counts);
        let b = shuffled_assignment(&counts, 7, 1);
        assert_eq!(grain_counts(&b, 3), counts);
        assert_ne!(a, b);
        assert_eq!(shuffled_assignment(&counts, 7, 1), b);
    }
}
