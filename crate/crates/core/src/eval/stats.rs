//! Rank correlation and permutation tests.

use rand::seq::SliceRandom;
use rand::Rng;

/// Ranks starting at 1; ties get the average of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation; `None` when either side is constant or the inputs
/// are shorter than two.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    pearson(&average_ranks(a), &average_ranks(b))
}

/// One-sided permutation p-value for `rho < 0`: the fraction of label
/// shuffles whose Spearman correlation is at most the observed one, with
/// the usual +1 correction.
pub fn spearman_negative_p_value<R: Rng + ?Sized>(
    a: &[f64],
    b: &[f64],
    permutations: usize,
    rng: &mut R,
) -> Option<f64> {
    let ra = average_ranks(a);
    let mut rb = average_ranks(b);
    let observed = pearson(&ra, &rb)?;
    let mut hits = 0usize;
    for _ in 0..permutations {
        rb.shuffle(rng);
        if pearson(&ra, &rb).is_some_and(|r| r <= observed) {
            hits += 1;
        }
    }
    Some((hits + 1) as f64 / (permutations + 1) as f64)
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

/// `mean(values | flag) − mean(values | !flag)`.
pub fn mean_gap(values: &[f64], flags: &[bool]) -> Option<f64> {
    let on = mean(values.iter().zip(flags).filter(|(_, f)| **f).map(|(v, _)| *v))?;
    let off = mean(values.iter().zip(flags).filter(|(_, f)| !**f).map(|(v, _)| *v))?;
    Some(on - off)
}

/// One-sided permutation p-value for a positive [`mean_gap`].
pub fn gap_p_value<R: Rng + ?Sized>(values: &[f64], flags: &[bool], permutations: usize, rng: &mut R) -> Option<f64> {
    let observed = mean_gap(values, flags)?;
    let mut shuffled = flags.to_vec();
    let mut hits = 0usize;
    for _ in 0..permutations {
        shuffled.shuffle(rng);
        if mean_gap(values, &shuffled).is_some_and(|g| g >= observed) {
            hits += 1;
        }
    }
    Some((hits + 1) as f64 / (permutations + 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ranks_with_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn spearman_known_values() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(spearman(&a, &[2.0, 4.0, 8.0, 16.0, 32.0]), Some(1.0));
        assert_eq!(spearman(&a, &[5.0, 4.0, 3.0, 2.0, 1.0]), Some(-1.0));
        // d = (0, 1, −1, 0, 0): 1 − 6·2/(5·24) = 0.9
        let r = spearman(&a, &[1.0, 3.0, 2.0, 4.0, 5.0]).unwrap();
        assert!((r - 0.9).abs() < 1e-12);
        assert_eq!(spearman(&a, &[1.0; 5]), None);
    }

    #[test]
    fn permutation_tests_detect_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a: Vec<f64> = (0..60).map(f64::from).collect();
        let b: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!(spearman_negative_p_value(&a, &b, 500, &mut rng).unwrap() < 0.01);
        assert!(spearman_negative_p_value(&a, &a, 500, &mut rng).unwrap() > 0.9);

        let flags: Vec<bool> = (0..60).map(|i| i >= 30).collect();
        assert!((mean_gap(&a, &flags).unwrap() - 30.0).abs() < 1e-12);
        assert!(gap_p_value(&a, &flags, 500, &mut rng).unwrap() < 0.01);
        assert_eq!(mean_gap(&a, &[true; 60]), None);
    }

    proptest! {
        #[test]
        fn spearman_is_bounded_and_rank_invariant(v in prop::collection::vec(-100.0f64..100.0, 3..40)) {
            let w: Vec<f64> = v.iter().enumerate().map(|(i, x)| x * 0.5 + (i % 7) as f64).collect();
            if let Some(r) = spearman(&v, &w) {
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
                let squashed: Vec<f64> = v.iter().map(|x| (x / 10.0).exp()).collect();
                let r2 = spearman(&squashed, &w).unwrap();
                prop_assert!((r - r2).abs() < 1e-9);
            }
        }
    }
}
