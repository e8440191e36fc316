//! Per-sample informativeness scores and their conversion to a querying
//! density over the unlabeled pool.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PoolState};
use crate::error::{Error, Result};
use crate::idscore::{normalize_scores, IdConfidence};
use crate::learner::ClassifierModel;

/// Querying density `u` and normalized ID confidence `m`, aligned with the
/// unlabeled indices they describe.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    indices: Vec<usize>,
    u: Vec<f64>,
    m: Vec<f64>,
}

impl ScoreTable {
    pub fn new(indices: Vec<usize>, u: Vec<f64>, m: Vec<f64>) -> Result<Self> {
        if indices.len() != u.len() || u.len() != m.len() {
            return Err(Error::Invalid(format!(
                "score table columns differ in length ({}, {}, {})",
                indices.len(),
                u.len(),
                m.len()
            )));
        }
        if u.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Invalid("querying density has a negative or non-finite entry".into()));
        }
        let total: f64 = u.iter().sum();
        if !u.is_empty() && (total - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("querying density sums to {total}")));
        }
        if m.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("ID confidence outside [0, 1]".into()));
        }
        Ok(Self { indices, u, m })
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    /// Pool indices, one per table position.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn m(&self) -> &[f64] {
        &self.m
    }

    /// Restriction to `positions`, with `u` renormalized to sum to one.
    pub fn restrict(&self, positions: &[usize]) -> Result<ScoreTable> {
        let u: Vec<f64> = positions.iter().map(|&p| self.u[p]).collect();
        let density = querying_density(&u)?;
        ScoreTable::new(
            positions.iter().map(|&p| self.indices[p]).collect(),
            density.u,
            positions.iter().map(|&p| self.m[p]).collect(),
        )
    }
}

fn check_probs(probs: &[Vec<f64>]) -> Result<()> {
    for row in probs {
        if row.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::Invalid("negative or NaN probability".into()));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("probability row sums to {s}")));
        }
    }
    Ok(())
}

/// Shannon entropy (natural log) of each row, with `0 ln 0 = 0`.
pub fn entropy_scores(probs: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_probs(probs)?;
    Ok(probs
        .iter()
        .map(|row| {
            -row.iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| p * p.ln())
                .sum::<f64>()
        })
        .collect())
}

/// `1 - (p1 - p2)` for the two largest probabilities of each row.
pub fn margin_scores(probs: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_probs(probs)?;
    probs
        .iter()
        .map(|row| {
            if row.len() < 2 {
                return Err(Error::Invalid("margin needs at least 2 classes".into()));
            }
            let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for &p in row {
                if p > first {
                    second = first;
                    first = p;
                } else if p > second {
                    second = p;
                }
            }
            Ok(1.0 - (first - second))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Density {
    pub u: Vec<f64>,
    /// Set when every score was zero and the uniform fallback was used.
    pub degenerate: bool,
}

/// `u_i = alpha_i / sum(alpha)`; uniform when the scores sum to zero.
pub fn querying_density(alpha: &[f64]) -> Result<Density> {
    if alpha.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFinite("acquisition scores"));
    }
    if alpha.iter().any(|&a| a < 0.0) {
        return Err(Error::Invalid("acquisition scores must be non-negative".into()));
    }
    let total: f64 = alpha.iter().sum();
    if total > 0.0 {
        Ok(Density {
            u: alpha.iter().map(|a| a / total).collect(),
            degenerate: false,
        })
    } else {
        if !alpha.is_empty() {
            log::warn!("all acquisition scores are zero; using a uniform density");
        }
        let n = alpha.len().max(1) as f64;
        Ok(Density {
            u: vec![1.0 / n; alpha.len()],
            degenerate: true,
        })
    }
}

/// Source of the informativeness column `u`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Acquisition {
    Entropy,
    Margin,
    /// Raw ID confidence shifted to be non-negative.
    Maha,
    /// Seeded uniform draws.
    Random,
}

/// Scores every unlabeled sample of `pool` with `acquisition` and `scorer`.
pub fn build_score_table<R: Rng + ?Sized>(
    model: &ClassifierModel,
    scorer: &dyn IdConfidence,
    ds: &Dataset,
    pool: &PoolState,
    acquisition: Acquisition,
    rng: &mut R,
) -> Result<ScoreTable> {
    let indices = pool.unlabeled().to_vec();
    if indices.is_empty() {
        return Err(Error::Invalid("unlabeled pool is empty".into()));
    }
    let x = ds.gather(&indices);
    let raw_m = scorer.id_confidence(&x)?;
    let alpha = match acquisition {
        Acquisition::Entropy => entropy_scores(&model.predict_proba(&x, ds.dim())?)?,
        Acquisition::Margin => margin_scores(&model.predict_proba(&x, ds.dim())?)?,
        Acquisition::Maha => {
            let lo = raw_m.iter().copied().fold(f64::INFINITY, f64::min);
            raw_m.iter().map(|v| v - lo).collect()
        }
        Acquisition::Random => (0..indices.len()).map(|_| rng.random::<f64>()).collect(),
    };
    let u = querying_density(&alpha)?.u;
    ScoreTable::new(indices, u, normalize_scores(&raw_m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, init_pool, SyntheticSpec};
    use crate::idscore::{fit_gmm_per_class, GmmConfig};
    use crate::learner::LearnerConfig;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn entropy_examples() {
        let e = entropy_scores(&[vec![0.5, 0.5], vec![1.0, 0.0], vec![0.25; 4]]).unwrap();
        assert_abs_diff_eq!(e[0], 0.693147, epsilon = 1e-6);
        assert_eq!(e[1], 0.0);
        assert_abs_diff_eq!(e[2], 1.386294, epsilon = 1e-6);
        assert!(entropy_scores(&[vec![1.5, -0.5]]).is_err());
    }

    #[test]
    fn margin_examples() {
        let m = margin_scores(&[vec![0.5, 0.5], vec![0.0, 1.0], vec![0.7, 0.2, 0.1]]).unwrap();
        assert_abs_diff_eq!(m[0], 1.0);
        assert_abs_diff_eq!(m[1], 0.0);
        assert_abs_diff_eq!(m[2], 0.5, epsilon = 1e-12);
        assert!(margin_scores(&[vec![1.0]]).is_err());
    }

    #[test]
    fn density_examples() {
        assert_eq!(querying_density(&[1.0; 4]).unwrap().u, vec![0.25; 4]);
        assert_eq!(querying_density(&[0.0, 2.0]).unwrap().u, vec![0.0, 1.0]);
        let d = querying_density(&[0.0, 0.0]).unwrap();
        assert_eq!(d.u, vec![0.5, 0.5]);
        assert!(d.degenerate);
        assert!(querying_density(&[1.0, -1.0]).is_err());
    }

    fn fixture() -> (Dataset, PoolState) {
        let ds = gen_synthetic(&SyntheticSpec {
            n_id_per_class: 30,
            n_ood: 10,
            ..Default::default()
        })
        .unwrap();
        let pool = init_pool(&ds, 10, 3).unwrap();
        (ds, pool)
    }

    #[test]
    fn table_alignment_and_special_cases() {
        let (ds, pool) = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gmm = fit_gmm_per_class(&ds, &pool, &GmmConfig::default(), &mut rng).unwrap();
        let untrained = ClassifierModel::zeros(2, 2, LearnerConfig::default()).unwrap();

        let t = build_score_table(&untrained, &gmm, &ds, &pool, Acquisition::Entropy, &mut rng).unwrap();
        assert_eq!(t.len(), pool.unlabeled().len());
        assert_eq!(t.indices(), pool.unlabeled());
        let uniform = 1.0 / t.len() as f64;
        assert!(t.u().iter().all(|&u| (u - uniform).abs() < 1e-12));

        let a = build_score_table(&untrained, &gmm, &ds, &pool, Acquisition::Random, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = build_score_table(&untrained, &gmm, &ds, &pool, Acquisition::Random, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);

        let maha = build_score_table(&untrained, &gmm, &ds, &pool, Acquisition::Maha, &mut rng).unwrap();
        let raw = gmm.id_confidence(&ds.gather(pool.unlabeled())).unwrap();
        let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let shifted: Vec<f64> = raw.iter().map(|v| v - lo).collect();
        assert_eq!(maha.u(), querying_density(&shifted).unwrap().u.as_slice());
    }

    #[test]
    fn restrict_renormalizes() {
        let t = ScoreTable::new(vec![10, 11, 12, 13], vec![0.1, 0.2, 0.3, 0.4], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let r = t.restrict(&[1, 3]).unwrap();
        assert_eq!(r.indices(), &[11, 13]);
        assert_abs_diff_eq!(r.u()[0], 1.0 / 3.0, epsilon = 1e-12);
        assert_eq!(r.m(), &[0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn density_preserves_order(alpha in prop::collection::vec(0.0f64..10.0, 1..40)) {
            let u = querying_density(&alpha).unwrap().u;
            prop_assert!((u.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for i in 0..alpha.len() {
                for j in 0..alpha.len() {
                    if alpha[i] < alpha[j] {
                        prop_assert!(u[i] < u[j]);
                    }
                }
            }
        }

        #[test]
        fn scores_are_row_equivariant(rows in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 3), 2..10)) {
            let probs: Vec<Vec<f64>> = rows.iter().map(|r| {
                let s: f64 = r.iter().sum();
                r.iter().map(|v| v / s).collect()
            }).collect();
            let mut rev = probs.clone();
            rev.reverse();
            let mut e = entropy_scores(&probs).unwrap();
            e.reverse();
            prop_assert_eq!(e, entropy_scores(&rev).unwrap());
            let mut m = margin_scores(&probs).unwrap();
            m.reverse();
            prop_assert_eq!(m, margin_scores(&rev).unwrap());
        }
    }
}
