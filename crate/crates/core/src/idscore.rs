//! In-distribution confidence scores.
//!
//! Both scorers return `max` over fitted Gaussians of the negative squared
//! Mahalanobis distance, so larger means "more in-distribution" and every
//! score is `<= 0`.
//!
//! Covariances are regularized by adding `(1e-6 * trace / d + 1e-10) * I`.
//! Inside EM that ridge enters as a fixed penalty `eps/2 * tr(Sigma^-1)` per
//! component (MAP-EM), which keeps the monitored objective monotone.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PoolState};
use crate::error::{Error, Result};

const REL_RIDGE: f64 = 1e-6;
const ABS_RIDGE: f64 = 1e-10;

/// Ridge added to a covariance with the given trace.
pub fn ridge(trace: f64, dim: usize) -> f64 {
    REL_RIDGE * trace / dim as f64 + ABS_RIDGE
}

/// Symmetric positive definite matrix kept as its lower Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedCov {
    lower: DMatrix<f64>,
    log_det: f64,
}

impl FactorizedCov {
    pub fn new(cov: DMatrix<f64>) -> Result<Self> {
        if !cov.is_square() {
            return Err(Error::Invalid("covariance must be square".into()));
        }
        let chol = nalgebra::Cholesky::new(cov)
            .ok_or_else(|| Error::Invalid("covariance is not positive definite".into()))?;
        let lower = chol.unpack();
        let log_det = 2.0 * lower.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Self { lower, log_det })
    }

    pub fn identity(dim: usize) -> Self {
        Self::new(DMatrix::identity(dim, dim)).expect("identity is SPD")
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.lower * self.lower.transpose()
    }

    /// `diff^T Sigma^-1 diff` by forward substitution on the factor.
    pub fn quad_form(&self, diff: &[f64]) -> f64 {
        let d = self.dim();
        let mut z = [0.0f64; 32];
        let mut heap;
        let z: &mut [f64] = if d <= z.len() {
            &mut z[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        let mut total = 0.0;
        for i in 0..d {
            let mut acc = diff[i];
            for j in 0..i {
                acc -= self.lower[(i, j)] * z[j];
            }
            z[i] = acc / self.lower[(i, i)];
            total += z[i] * z[i];
        }
        total
    }

    /// `tr(Sigma^-1) = ||L^-1||_F^2`.
    fn inverse_trace(&self) -> f64 {
        let d = self.dim();
        let mut inv = DMatrix::<f64>::identity(d, d);
        self.lower.solve_lower_triangular_mut(&mut inv);
        inv.iter().map(|v| v * v).sum()
    }
}

/// Squared Mahalanobis distance `(x - mu)^T Sigma^-1 (x - mu)`.
pub fn mahalanobis_sq(x: &[f64], mu: &[f64], cov: &FactorizedCov) -> Result<f64> {
    if x.len() != mu.len() || x.len() != cov.dim() {
        return Err(Error::Dimension {
            expected: cov.dim(),
            got: if x.len() != cov.dim() { x.len() } else { mu.len() },
        });
    }
    let diff: Vec<f64> = x.iter().zip(mu).map(|(a, b)| a - b).collect();
    Ok(cov.quad_form(&diff).max(0.0))
}

fn log_gauss(x: &[f64], mu: &[f64], cov: &FactorizedCov, diff: &mut [f64]) -> f64 {
    for ((d, a), b) in diff.iter_mut().zip(x).zip(mu) {
        *d = a - b;
    }
    let dim = x.len() as f64;
    -0.5 * (dim * (2.0 * std::f64::consts::PI).ln() + cov.log_det + cov.quad_form(diff))
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|s| (s - m).exp()).sum::<f64>().ln()
}

/// Anything that turns feature rows into ID confidence scores.
pub trait IdConfidence: Send + Sync {
    fn dim(&self) -> usize;

    /// One score per row of the row-major matrix `x`.
    fn id_confidence(&self, x: &[f64]) -> Result<Vec<f64>>;
}

fn check_matrix(x: &[f64], dim: usize) -> Result<()> {
    if x.len() % dim != 0 {
        return Err(Error::Dimension {
            expected: dim,
            got: x.len() % dim,
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Class-conditional GMMs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmConfig {
    /// Largest component count tried per class; BIC picks among `1..=c_max`.
    pub c_max: usize,
    pub max_iters: usize,
    /// Relative change of the EM objective that counts as converged.
    pub rel_tol: f64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            c_max: 3,
            max_iters: 200,
            rel_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: FactorizedCov,
}

/// EM result for one set of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub components: Vec<GaussianComponent>,
    /// EM objective after each E-step (penalized log-likelihood).
    pub objective_trace: Vec<f64>,
    pub log_likelihood: f64,
    pub bic: f64,
    pub diagonal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMixture {
    pub class: usize,
    pub mixture: Mixture,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    dim: usize,
    pub classes: Vec<ClassMixture>,
    /// ID classes with no labeled samples; they contribute no components.
    pub missing_classes: Vec<usize>,
}

fn sample_covariance(samples: &[f64], dim: usize, mean: &[f64]) -> DMatrix<f64> {
    let n = samples.len() / dim;
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for row in samples.chunks_exact(dim) {
        for i in 0..dim {
            let di = row[i] - mean[i];
            for j in 0..=i {
                cov[(i, j)] += di * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..dim {
        for j in 0..i {
            cov[(j, i)] = cov[(i, j)];
        }
    }
    cov / n as f64
}

fn column_mean(samples: &[f64], dim: usize) -> Vec<f64> {
    let n = (samples.len() / dim) as f64;
    let mut mean = vec![0.0; dim];
    for row in samples.chunks_exact(dim) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

fn add_ridge(mut cov: DMatrix<f64>, eps: f64, diagonal: bool) -> DMatrix<f64> {
    let d = cov.nrows();
    for i in 0..d {
        for j in 0..d {
            if diagonal && i != j {
                cov[(i, j)] = 0.0;
            }
        }
        cov[(i, i)] += eps;
    }
    cov
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Farthest-point seeding: a random first sample, then repeatedly the sample
/// farthest from every chosen mean (lowest index on ties).
fn farthest_point_means<R: Rng + ?Sized>(samples: &[f64], dim: usize, c: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = samples.len() / dim;
    let row = |i: usize| &samples[i * dim..(i + 1) * dim];
    let first = rng.random_range(0..n);
    let mut means = vec![row(first).to_vec()];
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &means[0])).collect();
    while means.len() < c {
        let mut best = 0;
        for i in 1..n {
            if nearest[i] > nearest[best] {
                best = i;
            }
        }
        let m = row(best).to_vec();
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), &m));
        }
        means.push(m);
    }
    means
}

fn parameter_count(c: usize, dim: usize, diagonal: bool) -> usize {
    let cov = if diagonal { dim } else { dim * (dim + 1) / 2 };
    c * (dim + cov) + c - 1
}

/// Runs EM for a fixed number of components. Classes with fewer than `d+1`
/// samples use diagonal covariances.
pub fn fit_mixture<R: Rng + ?Sized>(
    samples: &[f64],
    dim: usize,
    n_components: usize,
    config: &GmmConfig,
    rng: &mut R,
) -> Result<Mixture> {
    check_matrix(samples, dim)?;
    let n = samples.len() / dim;
    if n == 0 || n_components == 0 || n_components > n {
        return Err(Error::Invalid(format!(
            "cannot fit {n_components} components to {n} samples"
        )));
    }
    let diagonal = n < dim + 1;
    let mean = column_mean(samples, dim);
    let base = sample_covariance(samples, dim, &mean);
    let reg = ridge(base.trace(), dim);
    // Penalty weight chosen so a single component ends at `cov + reg * I`.
    let eps = reg * n as f64 / n_components as f64;

    let init_cov = FactorizedCov::new(add_ridge(base.clone(), reg, diagonal))?;
    let mut components: Vec<GaussianComponent> = farthest_point_means(samples, dim, n_components, rng)
        .into_iter()
        .map(|mean| GaussianComponent {
            weight: 1.0 / n_components as f64,
            mean,
            cov: init_cov.clone(),
        })
        .collect();

    let mut resp = vec![0.0; n * n_components];
    let mut diff = vec![0.0; dim];
    let mut logp = vec![0.0; n_components];
    let mut trace = Vec::new();
    for _ in 0..config.max_iters {
        // E-step
        let mut ll = 0.0;
        for (i, row) in samples.chunks_exact(dim).enumerate() {
            for (c, comp) in components.iter().enumerate() {
                logp[c] = comp.weight.ln() + log_gauss(row, &comp.mean, &comp.cov, &mut diff);
            }
            let lse = log_sum_exp(&logp);
            ll += lse;
            for c in 0..n_components {
                resp[i * n_components + c] = (logp[c] - lse).exp();
            }
        }
        let penalty: f64 = components.iter().map(|c| 0.5 * eps * c.cov.inverse_trace()).sum();
        let objective = ll - penalty;
        let converged = trace
            .last()
            .is_some_and(|&prev: &f64| (objective - prev).abs() <= config.rel_tol * prev.abs());
        trace.push(objective);
        if converged {
            break;
        }

        // M-step
        let mut next = Vec::with_capacity(n_components);
        for c in 0..n_components {
            let nk: f64 = (0..n).map(|i| resp[i * n_components + c]).sum();
            if nk < 1e-10 {
                return Err(Error::Invalid(format!("component {c} lost all responsibility")));
            }
            let mut mu = vec![0.0; dim];
            for (i, row) in samples.chunks_exact(dim).enumerate() {
                let r = resp[i * n_components + c];
                for (m, v) in mu.iter_mut().zip(row) {
                    *m += r * v;
                }
            }
            mu.iter_mut().for_each(|m| *m /= nk);
            let mut scatter = DMatrix::<f64>::zeros(dim, dim);
            for (i, row) in samples.chunks_exact(dim).enumerate() {
                let r = resp[i * n_components + c];
                for a in 0..dim {
                    let da = row[a] - mu[a];
                    for b in 0..=a {
                        scatter[(a, b)] += r * da * (row[b] - mu[b]);
                    }
                }
            }
            for a in 0..dim {
                for b in 0..a {
                    scatter[(b, a)] = scatter[(a, b)];
                }
            }
            let cov = add_ridge(scatter, eps, diagonal) / nk;
            next.push(GaussianComponent {
                weight: nk / n as f64,
                mean: mu,
                cov: FactorizedCov::new(cov)?,
            });
        }
        components = next;
    }

    let mut ll = 0.0;
    for row in samples.chunks_exact(dim) {
        for (c, comp) in components.iter().enumerate() {
            logp[c] = comp.weight.ln() + log_gauss(row, &comp.mean, &comp.cov, &mut diff);
        }
        ll += log_sum_exp(&logp);
    }
    let p = parameter_count(n_components, dim, diagonal) as f64;
    Ok(Mixture {
        components,
        objective_trace: trace,
        log_likelihood: ll,
        bic: -2.0 * ll + p * (n as f64).ln(),
        diagonal,
    })
}

/// Fits `1..=c_max` components and keeps the lowest BIC. A count `c > 1` is
/// only tried when every component can own `d+1` samples on average.
pub fn fit_class_mixture<R: Rng + ?Sized>(
    samples: &[f64],
    dim: usize,
    config: &GmmConfig,
    rng: &mut R,
) -> Result<Mixture> {
    let n = samples.len() / dim;
    let mut best: Option<Mixture> = None;
    for c in 1..=config.c_max.max(1) {
        if c > 1 && n < c * (dim + 1) {
            break;
        }
        match fit_mixture(samples, dim, c, config, rng) {
            Ok(m) => {
                if best.as_ref().is_none_or(|b| m.bic < b.bic) {
                    best = Some(m);
                }
            }
            Err(e) if c == 1 => return Err(e),
            Err(e) => log::debug!("skipping {c}-component fit: {e}"),
        }
    }
    best.ok_or_else(|| Error::Invalid("no mixture could be fitted".into()))
}

fn labeled_by_class(ds: &Dataset, pool: &PoolState) -> Vec<Vec<usize>> {
    let mut per_class = vec![Vec::new(); ds.k_classes()];
    for &(i, y) in pool.labeled() {
        per_class[y].push(i);
    }
    per_class
}

/// One GMM per ID class from the labeled set.
pub fn fit_gmm_per_class<R: Rng + ?Sized>(
    ds: &Dataset,
    pool: &PoolState,
    config: &GmmConfig,
    rng: &mut R,
) -> Result<GmmModel> {
    let mut classes = Vec::new();
    let mut missing = Vec::new();
    for (k, rows) in labeled_by_class(ds, pool).iter().enumerate() {
        if rows.is_empty() {
            missing.push(k);
            continue;
        }
        let samples = ds.gather(rows);
        let mixture = fit_class_mixture(&samples, ds.dim(), config, rng)?;
        classes.push(ClassMixture { class: k, mixture });
    }
    if !missing.is_empty() {
        log::warn!("classes {missing:?} have no labeled samples; omitted from the GMM");
    }
    if classes.is_empty() {
        return Err(Error::Invalid("no labeled samples to fit a GMM".into()));
    }
    Ok(GmmModel {
        dim: ds.dim(),
        classes,
        missing_classes: missing,
    })
}

impl GmmModel {
    pub fn from_classes(dim: usize, classes: Vec<ClassMixture>) -> Self {
        Self {
            dim,
            classes,
            missing_classes: Vec::new(),
        }
    }
}

impl IdConfidence for GmmModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn id_confidence(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_matrix(x, self.dim)?;
        let mut diff = vec![0.0; self.dim];
        Ok(x.chunks_exact(self.dim)
            .map(|row| {
                let mut best = f64::NEG_INFINITY;
                for comp in self.classes.iter().flat_map(|c| &c.mixture.components) {
                    for ((d, a), b) in diff.iter_mut().zip(row).zip(&comp.mean) {
                        *d = a - b;
                    }
                    best = best.max(-comp.cov.quad_form(&diff).max(0.0));
                }
                best
            })
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Tied-covariance class Gaussians
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct TiedGaussModel {
    /// `(class, mean)` for every class with labeled samples.
    pub means: Vec<(usize, Vec<f64>)>,
    pub cov: FactorizedCov,
}

/// Class means plus the pooled within-class scatter divided by the labeled
/// count. Falls back to a diagonal covariance when the pooled scatter has
/// fewer degrees of freedom than dimensions.
pub fn fit_tied_gaussians(ds: &Dataset, pool: &PoolState) -> Result<TiedGaussModel> {
    let total = pool.labeled().len();
    if total < 2 {
        return Err(Error::Invalid("tied Gaussians need at least 2 labeled samples".into()));
    }
    let dim = ds.dim();
    let mut means = Vec::new();
    let mut scatter = DMatrix::<f64>::zeros(dim, dim);
    for (k, rows) in labeled_by_class(ds, pool).iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let samples = ds.gather(rows);
        let mean = column_mean(&samples, dim);
        scatter += sample_covariance(&samples, dim, &mean) * rows.len() as f64;
        means.push((k, mean));
    }
    let cov = scatter / total as f64;
    let diagonal = total - means.len() < dim;
    let trace = cov.trace();
    if trace == 0.0 {
        log::warn!("labeled samples coincide within every class; covariance is the ridge alone");
    }
    let cov = FactorizedCov::new(add_ridge(cov, ridge(trace, dim), diagonal))?;
    Ok(TiedGaussModel { means, cov })
}

impl IdConfidence for TiedGaussModel {
    fn dim(&self) -> usize {
        self.cov.dim()
    }

    fn id_confidence(&self, x: &[f64]) -> Result<Vec<f64>> {
        let dim = self.dim();
        check_matrix(x, dim)?;
        let mut diff = vec![0.0; dim];
        Ok(x.chunks_exact(dim)
            .map(|row| {
                let mut best = f64::NEG_INFINITY;
                for (_, mu) in &self.means {
                    for ((d, a), b) in diff.iter_mut().zip(row).zip(mu) {
                        *d = a - b;
                    }
                    best = best.max(-self.cov.quad_form(&diff).max(0.0));
                }
                best
            })
            .collect())
    }
}

/// Which ID scorer the harness fits each round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum IdScorerKind {
    #[default]
    Gmm,
    Tied,
}

impl IdScorerKind {
    pub fn fit<R: Rng + ?Sized>(
        self,
        ds: &Dataset,
        pool: &PoolState,
        config: &GmmConfig,
        rng: &mut R,
    ) -> Result<Box<dyn IdConfidence>> {
        Ok(match self {
            IdScorerKind::Gmm => Box::new(fit_gmm_per_class(ds, pool, config, rng)?),
            IdScorerKind::Tied => Box::new(fit_tied_gaussians(ds, pool)?),
        })
    }
}

/// Affine map onto `[0, 1]` keeping larger-is-more-ID; a constant input maps
/// to 0.5 everywhere.
pub fn normalize_scores(m: &[f64]) -> Vec<f64> {
    let lo = m.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![0.5; m.len()];
    }
    m.iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{init_pool, Dataset};
    use nalgebra::DVector;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn diag(v: &[f64]) -> FactorizedCov {
        FactorizedCov::new(DMatrix::from_diagonal(&DVector::from_row_slice(v))).unwrap()
    }

    #[test]
    fn mahalanobis_closed_forms() {
        let id = FactorizedCov::identity(2);
        assert_eq!(mahalanobis_sq(&[1.0, 2.0], &[1.0, 2.0], &id).unwrap(), 0.0);
        assert_abs_diff_eq!(mahalanobis_sq(&[3.0, 4.0], &[0.0, 0.0], &id).unwrap(), 25.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            mahalanobis_sq(&[2.0, 1.0], &[0.0, 0.0], &diag(&[4.0, 1.0])).unwrap(),
            2.0,
            epsilon = 1e-12
        );
        assert!(mahalanobis_sq(&[1.0], &[0.0, 0.0], &id).is_err());
    }

    #[test]
    fn mahalanobis_matches_explicit_inverse() {
        let cov = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let inv = cov.clone().try_inverse().unwrap();
        let f = FactorizedCov::new(cov).unwrap();
        let d = DVector::from_row_slice(&[0.3, -1.2, 2.0]);
        let expected = (d.transpose() * inv * &d)[(0, 0)];
        assert_abs_diff_eq!(f.quad_form(d.as_slice()), expected, epsilon = 1e-12);
    }

    fn single_component(samples: &[f64], dim: usize) -> Mixture {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        fit_mixture(samples, dim, 1, &GmmConfig::default(), &mut rng).unwrap()
    }

    #[test]
    fn single_component_is_regularized_mle() {
        let samples = [0.0, 0.0, 2.0, 0.0, 0.0, 4.0, 2.0, 4.0];
        let m = single_component(&samples, 2);
        let comp = &m.components[0];
        assert_abs_diff_eq!(comp.mean[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(comp.mean[1], 2.0, epsilon = 1e-12);
        let reg = ridge(5.0, 2);
        let cov = comp.cov.covariance();
        assert_abs_diff_eq!(cov[(0, 0)], 1.0 + reg, epsilon = 1e-12);
        assert_abs_diff_eq!(cov[(1, 1)], 4.0 + reg, epsilon = 1e-12);
        assert_abs_diff_eq!(cov[(0, 1)], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(comp.weight, 1.0);
    }

    /// Plain k-means used as an independent oracle for the two-cluster case.
    fn kmeans_2(samples: &[f64], dim: usize) -> [Vec<f64>; 2] {
        let n = samples.len() / dim;
        let row = |i: usize| &samples[i * dim..(i + 1) * dim];
        let mut c = [row(0).to_vec(), row(n - 1).to_vec()];
        for _ in 0..50 {
            let mut sums = [vec![0.0; dim], vec![0.0; dim]];
            let mut counts = [0.0; 2];
            for i in 0..n {
                let k = usize::from(sq_dist(row(i), &c[1]) < sq_dist(row(i), &c[0]));
                counts[k] += 1.0;
                for (s, v) in sums[k].iter_mut().zip(row(i)) {
                    *s += v;
                }
            }
            for k in 0..2 {
                c[k] = sums[k].iter().map(|s| s / counts[k]).collect();
            }
        }
        c
    }

    #[test]
    fn two_separated_clusters_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let centers = [[0.0, 0.0], [10.0, 0.0]];
        let mut samples = Vec::new();
        for c in centers {
            for _ in 0..40 {
                samples.push(c[0] + noise.sample(&mut rng));
                samples.push(c[1] + noise.sample(&mut rng));
            }
        }
        let oracle = kmeans_2(&samples, 2);
        let config = GmmConfig {
            c_max: 2,
            ..Default::default()
        };
        let m = fit_class_mixture(&samples, 2, &config, &mut rng).unwrap();
        assert_eq!(m.components.len(), 2);
        let mut means: Vec<Vec<f64>> = m.components.iter().map(|c| c.mean.clone()).collect();
        means.sort_by(|a, b| a[0].total_cmp(&b[0]));
        let mut oracle = oracle.to_vec();
        oracle.sort_by(|a, b| a[0].total_cmp(&b[0]));
        for ((mean, o), truth) in means.iter().zip(&oracle).zip(centers) {
            assert!(sq_dist(mean, &truth).sqrt() < 0.1);
            assert!(sq_dist(mean, o).sqrt() < 1e-3);
        }
        let total: f64 = m.components.iter().map(|c| c.weight).sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn em_objective_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let samples: Vec<f64> = (0..120)
            .map(|i| noise.sample(&mut rng) + if i % 3 == 0 { 3.0 } else { 0.0 })
            .collect();
        for c in 1..=3 {
            let m = fit_mixture(&samples, 2, c, &GmmConfig::default(), &mut rng).unwrap();
            for w in m.objective_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-8, "{} -> {}", w[0], w[1]);
            }
        }
    }

    fn two_class_1d() -> (Dataset, PoolState) {
        let ds = Dataset::new(
            "t",
            vec![-1.0, 1.0, 9.0, 11.0],
            1,
            vec![0, 0, 1, 1],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let pool = init_pool(&ds, 4, 0).unwrap();
        (ds, pool)
    }

    #[test]
    fn tied_hand_computed() {
        let (ds, pool) = two_class_1d();
        let model = fit_tied_gaussians(&ds, &pool).unwrap();
        let mut means = model.means.clone();
        means.sort_by_key(|m| m.0);
        assert_eq!(means[0].1, vec![0.0]);
        assert_eq!(means[1].1, vec![10.0]);
        // brute-force scatter: (-1)^2 + 1^2 + (-1)^2 + 1^2 = 4 over 4 samples
        let brute: f64 = [(-1.0f64, 0.0), (1.0, 0.0), (9.0, 10.0), (11.0, 10.0)]
            .iter()
            .map(|(x, m)| (x - m).powi(2))
            .sum::<f64>()
            / 4.0;
        assert_abs_diff_eq!(model.cov.covariance()[(0, 0)], brute + ridge(1.0, 1), epsilon = 1e-12);

        let s = model.id_confidence(&[5.0, 0.0, 10.0]).unwrap();
        assert_abs_diff_eq!(s[0], -25.0 / (1.0 + ridge(1.0, 1)), epsilon = 1e-12);
        assert_abs_diff_eq!(s[0], -25.0, epsilon = 1e-4);
        assert_eq!(s[1], 0.0);
        assert_eq!(s[2], 0.0);
    }

    #[test]
    fn tied_one_sample_per_class_is_ridge() {
        let ds = Dataset::new(
            "t",
            vec![0.0, 0.0, 1.0, 1.0],
            2,
            vec![0, 1],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let pool = init_pool(&ds, 2, 0).unwrap();
        let model = fit_tied_gaussians(&ds, &pool).unwrap();
        let cov = model.cov.covariance();
        assert_abs_diff_eq!(cov[(0, 0)], ABS_RIDGE, epsilon = 1e-20);
        assert_eq!(cov[(0, 1)], 0.0);
    }

    #[test]
    fn tied_pools_identical_scatter() {
        // both classes have covariance diag(1, 4)
        let pts = [[-1.0, -2.0], [1.0, -2.0], [-1.0, 2.0], [1.0, 2.0]];
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for (k, off) in [(0, 0.0), (1, 20.0)] {
            for p in pts {
                feats.extend_from_slice(&[p[0] + off, p[1]]);
                labels.push(k);
            }
        }
        let ds = Dataset::new("t", feats, 2, labels, vec!["a".into(), "b".into()]).unwrap();
        let pool = init_pool(&ds, 8, 0).unwrap();
        let cov = fit_tied_gaussians(&ds, &pool).unwrap().cov.covariance();
        let reg = ridge(5.0, 2);
        assert_abs_diff_eq!(cov[(0, 0)], 1.0 + reg, epsilon = 1e-12);
        assert_abs_diff_eq!(cov[(1, 1)], 4.0 + reg, epsilon = 1e-12);
    }

    fn unit_component(mean: f64, weight: f64) -> GaussianComponent {
        GaussianComponent {
            weight,
            mean: vec![mean],
            cov: FactorizedCov::identity(1),
        }
    }

    fn mixture(components: Vec<GaussianComponent>) -> Mixture {
        Mixture {
            components,
            objective_trace: vec![],
            log_likelihood: 0.0,
            bic: 0.0,
            diagonal: false,
        }
    }

    #[test]
    fn gmm_score_takes_closest_component() {
        let model = GmmModel::from_classes(
            1,
            vec![ClassMixture {
                class: 0,
                mixture: mixture(vec![unit_component(0.0, 0.5), unit_component(10.0, 0.5)]),
            }],
        );
        let s = model.id_confidence(&[1.0, 10.0, 0.0]).unwrap();
        assert_eq!(s, vec![-1.0, 0.0, 0.0]);
    }

    #[test]
    fn gmm_single_component_is_negative_distance() {
        let (ds, pool) = two_class_1d();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sub = ds.subset(&[0, 1]);
        let pool_one = init_pool(&sub, 2, 0).unwrap();
        let m = fit_gmm_per_class(&sub, &pool_one, &GmmConfig::default(), &mut rng).unwrap();
        assert_eq!(m.missing_classes, vec![1]);
        let comp = &m.classes[0].mixture.components[0];
        let x = [3.5];
        assert_eq!(
            m.id_confidence(&x).unwrap()[0],
            -mahalanobis_sq(&x, &comp.mean, &comp.cov).unwrap()
        );
        let full = fit_gmm_per_class(&ds, &pool, &GmmConfig::default(), &mut rng).unwrap();
        assert!(full.missing_classes.is_empty());
        for s in full.id_confidence(&[-3.0, 0.0, 5.0, 12.0]).unwrap() {
            assert!(s <= 0.0);
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_scores(&[-4.0, -2.0, 0.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize_scores(&[3.0, 3.0]), vec![0.5, 0.5]);
        assert_eq!(normalize_scores(&[0.0, 1.0, 0.25]), vec![0.0, 1.0, 0.25]);
    }

    proptest! {
        #[test]
        fn gmm_score_ignores_order_and_duplicates(
            means in prop::collection::vec(-5.0f64..5.0, 2..5),
            x in -8.0f64..8.0,
        ) {
            let comps: Vec<_> = means.iter().map(|&m| unit_component(m, 1.0 / means.len() as f64)).collect();
            let base = GmmModel::from_classes(1, vec![
                ClassMixture { class: 0, mixture: mixture(comps[..1].to_vec()) },
                ClassMixture { class: 1, mixture: mixture(comps[1..].to_vec()) },
            ]);
            let mut rev = comps.clone();
            rev.reverse();
            let mut dup = rev.clone();
            dup[0].weight /= 2.0;
            dup.push(dup[0].clone());
            let permuted = GmmModel::from_classes(1, vec![
                ClassMixture { class: 1, mixture: mixture(dup) },
            ]);
            prop_assert_eq!(base.id_confidence(&[x]).unwrap(), permuted.id_confidence(&[x]).unwrap());
        }

        #[test]
        fn normalize_preserves_order(v in prop::collection::vec(-100.0f64..100.0, 1..30)) {
            let n = normalize_scores(&v);
            for i in 0..v.len() {
                prop_assert!((0.0..=1.0).contains(&n[i]));
                for j in 0..v.len() {
                    if v[i] < v[j] {
                        prop_assert!(n[i] <= n[j]);
                    }
                }
            }
            let again = normalize_scores(&n);
            for (a, b) in n.iter().zip(&again) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
