//! Rank and linear correlation between predictions and opinion scores.

use crate::error::{Error, Result};

fn check_pair(pred: &[f64], label: &[f64], what: &str) -> Result<()> {
    if pred.len() != label.len() {
        return Err(Error::invalid(format!(
            "{what}: prediction and label lengths differ ({} vs {})",
            pred.len(),
            label.len()
        )));
    }
    if pred.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!("{what} needs at least 2 samples, got {}", pred.len())));
    }
    if pred.iter().chain(label).any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{what}: non-finite input")));
    }
    Ok(())
}

fn pearson_unchecked(x: &[f64], y: &[f64], what: &str) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation(format!("{what}: zero variance")));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// Spearman rank-order correlation.
pub fn srcc(pred: &[f64], label: &[f64]) -> Result<f64> {
    check_pair(pred, label, "srcc")?;
    pearson_unchecked(&average_ranks(pred), &average_ranks(label), "srcc")
}

/// Pearson linear correlation on raw values.
pub fn plcc(pred: &[f64], label: &[f64]) -> Result<f64> {
    check_pair(pred, label, "plcc")?;
    pearson_unchecked(pred, label, "plcc")
}

/// Median; the mean of the two middle order statistics for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() || values.iter().any(|v| v.is_nan()) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Quadratic-time reference: rank by counting smaller and equal values.
    fn brute_ranks(v: &[f64]) -> Vec<f64> {
        v.iter()
            .map(|&x| {
                let less = v.iter().filter(|&&y| y < x).count() as f64;
                let equal = v.iter().filter(|&&y| y == x).count() as f64;
                less + (equal + 1.0) / 2.0
            })
            .collect()
    }

    fn brute_pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        let sxx: f64 = x.iter().map(|a| a * a).sum();
        let syy: f64 = y.iter().map(|b| b * b).sum();
        (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
    }

    #[test]
    fn perfect_and_reversed() {
        assert_eq!(srcc(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(srcc(&[3.0, 2.0, 1.0], &[10.0, 20.0, 30.0]).unwrap(), -1.0);
        let p = [0.3, -1.2, 4.0, 2.2];
        let affine: Vec<f64> = p.iter().map(|v| 2.0 * v + 3.0).collect();
        assert!((plcc(&p, &affine).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = p.iter().map(|v| -v).collect();
        assert!((plcc(&p, &neg).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn undefined_cases_are_rejected() {
        assert!(matches!(srcc(&[1.0], &[1.0]), Err(Error::UndefinedCorrelation(_))));
        assert!(matches!(srcc(&[1.0, 2.0], &[5.0, 5.0]), Err(Error::UndefinedCorrelation(_))));
        assert!(matches!(plcc(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::UndefinedCorrelation(_))));
        assert!(srcc(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0, 3.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn matches_brute_force_on_tied_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..1000).map(|_| (rng.random_range(0..40) as f64) * 0.5).collect();
        let y: Vec<f64> = x.iter().map(|v| v + rng.random_range(-6.0..6.0_f64).round()).collect();
        let want = brute_pearson(&brute_ranks(&x), &brute_ranks(&y));
        assert!((srcc(&x, &y).unwrap() - want).abs() < 1e-12);
        assert!((plcc(&x, &y).unwrap() - brute_pearson(&x, &y)).abs() < 1e-12);
    }

    #[test]
    fn median_definition() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        let ten: Vec<f64> = (1..=10).rev().map(f64::from).collect();
        assert_eq!(median(&ten), Some(5.5));
        assert_eq!(median(&[]), None);
    }

    proptest! {
        #[test]
        fn invariances(v in prop::collection::vec((-50i32..50, -50i32..50), 3..40)) {
            let x: Vec<f64> = v.iter().map(|p| f64::from(p.0)).collect();
            let y: Vec<f64> = v.iter().map(|p| f64::from(p.1)).collect();
            let (Ok(s), Ok(p)) = (srcc(&x, &y), plcc(&x, &y)) else { return Ok(()) };
            prop_assert!((-1.0..=1.0).contains(&s) && (-1.0..=1.0).contains(&p));
            prop_assert!((srcc(&y, &x).unwrap() - s).abs() < 1e-12);
            prop_assert!((plcc(&y, &x).unwrap() - p).abs() < 1e-12);
            let mono: Vec<f64> = x.iter().map(|a| a.powi(3) + 7.0 * a).collect();
            prop_assert!((srcc(&mono, &y).unwrap() - s).abs() < 1e-12);
            let aff: Vec<f64> = x.iter().map(|a| 3.5 * a - 2.0).collect();
            prop_assert!((plcc(&aff, &y).unwrap() - p).abs() < 1e-12);
            let flipped: Vec<f64> = x.iter().map(|a| -0.25 * a).collect();
            prop_assert!((plcc(&flipped, &y).unwrap() + p).abs() < 1e-12);
            let ranked = plcc(&average_ranks(&x), &average_ranks(&y)).unwrap();
            prop_assert!((ranked - s).abs() < 1e-12);
        }
    }
}
