use std::collections::{BTreeMap, BTreeSet};

use super::SimError;

/// Probability mass per bitstring.
pub type Distribution = BTreeMap<String, f64>;

const NORMALIZATION_TOL: f64 = 1e-9;

pub fn normalize_counts(counts: &BTreeMap<String, u64>) -> Distribution {
    let total: u64 = counts.values().sum();
    if total == 0 {
        return Distribution::new();
    }
    counts
        .iter()
        .map(|(k, &v)| (k.clone(), v as f64 / total as f64))
        .collect()
}

fn check_normalized(d: &Distribution) -> Result<(), SimError> {
    let sum: f64 = d.values().sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOL || d.values().any(|v| *v < 0.0) {
        return Err(SimError::NotNormalized(sum));
    }
    Ok(())
}

/// Half the L1 distance over the union of supports.
pub fn total_variation_distance(p: &Distribution, q: &Distribution) -> Result<f64, SimError> {
    check_normalized(p)?;
    check_normalized(q)?;
    let keys: BTreeSet<&String> = p.keys().chain(q.keys()).collect();
    let l1: f64 = keys
        .into_iter()
        .map(|k| (p.get(k).copied().unwrap_or(0.0) - q.get(k).copied().unwrap_or(0.0)).abs())
        .sum();
    Ok((0.5 * l1).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(entries: &[(&str, f64)]) -> Distribution {
        entries.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn identical_is_zero() {
        let p = dist(&[("00", 0.25), ("11", 0.75)]);
        assert_eq!(total_variation_distance(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn hand_computed_half() {
        let p = dist(&[("0", 1.0)]);
        let q = dist(&[("0", 0.5), ("1", 0.5)]);
        assert_eq!(total_variation_distance(&p, &q).unwrap(), 0.5);
    }

    #[test]
    fn rejects_unnormalized() {
        let p = dist(&[("0", 0.7)]);
        assert!(matches!(total_variation_distance(&p, &p), Err(SimError::NotNormalized(_))));
    }

    #[test]
    fn normalizes_counts() {
        let c: BTreeMap<String, u64> = [("0".to_string(), 3), ("1".to_string(), 1)].into();
        assert_eq!(normalize_counts(&c), dist(&[("0", 0.75), ("1", 0.25)]));
    }
}
