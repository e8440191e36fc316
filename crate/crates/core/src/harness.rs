//! Experiment loop, metrics and report files.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::build_score_table;
use crate::data::{
    gen_synthetic, init_pool, make_ood_split, oracle_query, parse_libsvm, read_csv, restrict_classes, CsvOptions,
    Dataset, LabelColumn, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::idscore::{GmmConfig, IdScorerKind};
use crate::learner::{fit, LearnerConfig};
use crate::pareto::ParetoConfig;
use crate::strategies::{SelectionContext, Strategy, StrategyParams, StrategyRegistry};

pub const AUBC_RULE: &str =
    "trapezoidal area of test accuracy over budget spent, round 0 included, divided by the budget span";

fn default_true() -> bool {
    true
}

fn default_label_column() -> LabelColumn {
    LabelColumn::Index(0)
}

fn default_trials() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic {
        #[serde(default)]
        spec: SyntheticSpec,
    },
    Libsvm {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_path: Option<PathBuf>,
    },
    Csv {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_path: Option<PathBuf>,
        #[serde(default = "default_true")]
        has_header: bool,
        #[serde(default = "default_label_column")]
        label_column: LabelColumn,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub strategy: String,
    pub n_init: usize,
    pub budget: usize,
    pub batch_size: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub base_seed: u64,
    /// Class names treated as ID; required for file sources, unused for the
    /// synthetic generator.
    #[serde(default)]
    pub id_classes: Vec<String>,
    /// Class names kept as OOD; every non-ID class when empty. Rows of other
    /// classes are dropped.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ood_classes: Vec<String>,
    /// ID rows held out as the test set when no test file is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_test: Option<usize>,
    /// ID rows kept for the pool, initial labeled set included; all when
    /// unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool_id: Option<usize>,
    /// OOD rows kept for the pool; all when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool_ood: Option<usize>,
    #[serde(default)]
    pub id_scorer: IdScorerKind,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub learner: LearnerConfig,
    #[serde(default)]
    pub gmm: GmmConfig,
    #[serde(default)]
    pub pareto: ParetoConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative dataset paths are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut cfg.dataset {
            DatasetSource::Synthetic { .. } => {}
            DatasetSource::Libsvm { path, test_path } | DatasetSource::Csv { path, test_path, .. } => {
                rebase(path);
                if let Some(t) = test_path {
                    rebase(t);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.budget == 0 {
            return Err(Error::Config("budget must be at least 1".into()));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.n_init == 0 {
            return Err(Error::Config("n_init must be at least 1".into()));
        }
        if self.pareto.p_inv == 0 || self.pareto.sm_multiplier == 0 {
            return Err(Error::Config("p_inv and sm_multiplier must be at least 1".into()));
        }
        let has_test_file = match &self.dataset {
            DatasetSource::Synthetic { spec } => {
                spec.validate()?;
                if !self.id_classes.is_empty() || !self.ood_classes.is_empty() {
                    return Err(Error::Config("class lists are not used with synthetic data".into()));
                }
                false
            }
            DatasetSource::Libsvm { test_path, .. } | DatasetSource::Csv { test_path, .. } => {
                if self.id_classes.is_empty() {
                    return Err(Error::Config("id_classes is required for file datasets".into()));
                }
                test_path.is_some()
            }
        };
        match (has_test_file, self.n_test) {
            (true, Some(_)) => Err(Error::Config("n_test conflicts with test_path".into())),
            (false, None) => Err(Error::Config("n_test is required without test_path".into())),
            _ => Ok(()),
        }?;
        StrategyRegistry::default().create(&self.strategy, &StrategyParams::default())?;
        Ok(())
    }

    pub fn strategy(&self, registry: &StrategyRegistry) -> Result<Box<dyn Strategy>> {
        registry.create(&self.strategy, &StrategyParams { pareto: self.pareto })
    }
}

/// Loaded data shared by every trial: the full labeled table, and the test
/// table when it comes from its own file.
#[derive(Debug, Clone)]
pub struct SourceData {
    pub full: Dataset,
    pub test: Option<Dataset>,
}

fn read_table(source: &DatasetSource, path: &Path) -> Result<Dataset> {
    match source {
        DatasetSource::Libsvm { .. } => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_libsvm(&text)
        }
        DatasetSource::Csv {
            has_header,
            label_column,
            ..
        } => {
            let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
            read_csv(
                file,
                &CsvOptions {
                    has_header: *has_header,
                    label_column: label_column.clone(),
                },
            )
        }
        DatasetSource::Synthetic { .. } => unreachable!("synthetic data has no file"),
    }
}

pub fn load_source(config: &ExperimentConfig) -> Result<SourceData> {
    match &config.dataset {
        DatasetSource::Synthetic { spec } => Ok(SourceData {
            full: gen_synthetic(spec)?,
            test: None,
        }),
        source @ (DatasetSource::Libsvm { path, test_path } | DatasetSource::Csv { path, test_path, .. }) => {
            let load = |p: &Path| -> Result<Dataset> {
                let raw = read_table(source, p)?;
                let raw = if config.ood_classes.is_empty() {
                    raw
                } else {
                    let all: Vec<String> = config.id_classes.iter().chain(&config.ood_classes).cloned().collect();
                    restrict_classes(&raw, &all)?
                };
                make_ood_split(&raw, &config.id_classes)
            };
            let full = load(path)?;
            let test = match test_path {
                Some(tp) => {
                    let t = load(tp)?;
                    if t.class_names() != full.class_names() || t.dim() != full.dim() {
                        return Err(Error::Config(format!(
                            "test file {} does not match the training file's classes or width",
                            tp.display()
                        )));
                    }
                    Some(t.subset(&t.id_rows()))
                }
                None => None,
            };
            Ok(SourceData { full, test })
        }
    }
}

/// Draws one trial's test set and pool from `source`.
pub fn split_for_trial(source: &SourceData, config: &ExperimentConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let full = &source.full;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut id = full.id_rows();
    let mut ood: Vec<usize> = (0..full.len()).filter(|&i| full.is_ood(i)).collect();
    id.shuffle(&mut rng);
    ood.shuffle(&mut rng);
    let test = match &source.test {
        Some(t) => t.clone(),
        None => {
            let n_test = config.n_test.unwrap_or(0);
            if n_test >= id.len() {
                return Err(Error::Config(format!(
                    "n_test = {n_test} leaves no ID rows out of {}",
                    id.len()
                )));
            }
            let rows: Vec<usize> = id.drain(..n_test).collect();
            full.subset(&rows)
        }
    };
    let take = |rows: &mut Vec<usize>, n: Option<usize>, what: &str| -> Result<()> {
        if let Some(n) = n {
            if n > rows.len() {
                return Err(Error::Config(format!(
                    "{what} = {n} exceeds the {} rows available",
                    rows.len()
                )));
            }
            rows.truncate(n);
        }
        Ok(())
    };
    take(&mut id, config.pool_id, "pool_id")?;
    take(&mut ood, config.pool_ood, "pool_ood")?;
    let mut pool_rows: Vec<usize> = id.into_iter().chain(ood).collect();
    pool_rows.sort_unstable();
    Ok((full.subset(&pool_rows), test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub trial: usize,
    pub round: usize,
    pub budget_spent: usize,
    pub labeled_count: usize,
    pub cumulative_ood_selected: usize,
    pub test_accuracy: f64,
    #[serde(skip)]
    pub wall_secs: f64,
}

fn accuracy(model: &crate::learner::ClassifierModel, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Config("test set is empty".into()));
    }
    let pred = model.predict(test.features(), test.dim())?;
    let hits = pred
        .iter()
        .zip(test.labels())
        .filter(|(p, &y)| y >= 0 && **p == y as usize)
        .count();
    Ok(hits as f64 / test.len() as f64)
}

/// Runs one active-learning trial and returns one record per round, the
/// pre-query round 0 included.
pub fn run_trial(
    config: &ExperimentConfig,
    source: &SourceData,
    strategy: &dyn Strategy,
    trial: usize,
    seed: u64,
) -> Result<Vec<RoundRecord>> {
    let (ds, test) = split_for_trial(source, config, seed)?;
    let mut pool = init_pool(&ds, config.n_init, seed)?;
    let initial_classes: std::collections::BTreeSet<usize> = pool.labeled_targets().into_iter().collect();
    if initial_classes.len() < 2 {
        return Err(Error::Config("the initial labeled set must cover at least two classes".into()));
    }
    if config.budget > pool.unlabeled().len() {
        log::warn!(
            "budget {} exceeds the unlabeled pool of {}; the trial ends when the pool is empty",
            config.budget,
            pool.unlabeled().len()
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let k = ds.k_classes();
    let mut records = Vec::new();
    for round in 0.. {
        let started = Instant::now();
        let labeled = pool.labeled_indices();
        let model = fit(&ds.gather(&labeled), ds.dim(), &pool.labeled_targets(), k, config.learner)?;
        let test_accuracy = accuracy(&model, &test)?;
        let mut record = RoundRecord {
            trial,
            round,
            budget_spent: pool.budget_spent(),
            labeled_count: pool.labeled().len(),
            cumulative_ood_selected: pool.exhausted().len(),
            test_accuracy,
            wall_secs: 0.0,
        };
        let remaining = config.budget.saturating_sub(pool.budget_spent());
        if remaining == 0 || pool.unlabeled().is_empty() {
            record.wall_secs = started.elapsed().as_secs_f64();
            records.push(record);
            break;
        }
        let b = config.batch_size.min(remaining).min(pool.unlabeled().len());
        let scorer = config.id_scorer.fit(&ds, &pool, &config.gmm, &mut rng)?;
        let table = build_score_table(&model, scorer.as_ref(), &ds, &pool, strategy.acquisition(), &mut rng)?;
        let mask: Option<Vec<bool>> = strategy
            .needs_ground_truth()
            .then(|| table.indices().iter().map(|&i| ds.is_ood(i)).collect());
        let mut ctx = SelectionContext {
            rng: &mut rng,
            ood_mask: mask.as_deref(),
        };
        let batch = strategy.select(&table, b, &mut ctx)?;
        for idx in batch {
            oracle_query(&ds, &mut pool, idx)?;
        }
        record.wall_secs = started.elapsed().as_secs_f64();
        records.push(record);
        log::debug!(
            "trial {trial} round {round}: budget {} accuracy {:.4}",
            pool.budget_spent(),
            test_accuracy
        );
    }
    Ok(records)
}

/// Normalized trapezoidal area under accuracy over budget.
pub fn aubc(records: &[RoundRecord]) -> Result<f64> {
    if records.len() < 2 {
        return Err(Error::Invalid("AUBC needs at least two records".into()));
    }
    let first = records[0].budget_spent as f64;
    let last = records[records.len() - 1].budget_spent as f64;
    if !(last > first) {
        return Err(Error::Invalid("AUBC needs a positive budget span".into()));
    }
    let area: f64 = records
        .windows(2)
        .map(|w| {
            let dx = w[1].budget_spent as f64 - w[0].budget_spent as f64;
            0.5 * dx * (w[0].test_accuracy + w[1].test_accuracy)
        })
        .sum();
    Ok(area / (last - first))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMean {
    pub round: usize,
    pub budget_spent: f64,
    pub accuracy: f64,
    pub cumulative_ood_selected: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub strategy: String,
    pub trials: usize,
    pub aubc_mean: f64,
    pub aubc_sd: f64,
    pub aubc: Vec<f64>,
    pub seeds: Vec<u64>,
    pub version: String,
    pub aubc_rule: String,
    pub per_round: Vec<RoundMean>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub summary: Summary,
    pub records: Vec<RoundRecord>,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(strategy: &str, seeds: &[u64], trials: &[Vec<RoundRecord>]) -> Result<Summary> {
    let scores = trials.iter().map(|r| aubc(r)).collect::<Result<Vec<_>>>()?;
    let (aubc_mean, aubc_sd) = mean_sd(&scores);
    let rounds = trials.iter().map(Vec::len).max().unwrap_or(0);
    let per_round = (0..rounds)
        .map(|round| {
            let rows: Vec<&RoundRecord> = trials.iter().filter_map(|t| t.get(round)).collect();
            let n = rows.len() as f64;
            RoundMean {
                round,
                budget_spent: rows.iter().map(|r| r.budget_spent as f64).sum::<f64>() / n,
                accuracy: rows.iter().map(|r| r.test_accuracy).sum::<f64>() / n,
                cumulative_ood_selected: rows.iter().map(|r| r.cumulative_ood_selected as f64).sum::<f64>() / n,
            }
        })
        .collect();
    Ok(Summary {
        strategy: strategy.to_string(),
        trials: trials.len(),
        aubc_mean,
        aubc_sd,
        aubc: scores,
        seeds: seeds.to_vec(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        aubc_rule: AUBC_RULE.to_string(),
        per_round,
    })
}

/// Runs every trial (in parallel, seeds `base_seed + i`) and aggregates.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let registry = StrategyRegistry::default();
    let strategy = config.strategy(&registry)?;
    let source = load_source(config)?;
    let seeds: Vec<u64> = (0..config.trials as u64).map(|i| config.base_seed.wrapping_add(i)).collect();
    let trials: Vec<Vec<RoundRecord>> = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| {
            run_trial(config, &source, strategy.as_ref(), i, seed).map_err(|e| Error::Trial {
                seed,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    let summary = summarize(&strategy.name(), &seeds, &trials)?;
    Ok(ExperimentResult {
        config: config.clone(),
        summary,
        records: trials.into_iter().flatten().collect(),
    })
}

/// `%.17g`-style rendering: 17 significant digits, trailing zeros dropped.
pub fn format_real(v: f64) -> String {
    if !v.is_finite() {
        return format!("{v}");
    }
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{v:.16e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-5..17).contains(&exp) {
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{mantissa}e{sign}{:02}", exp.abs());
    }
    let decimals = (16 - exp).max(0) as usize;
    trim_zeros(&format!("{v:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

const ROUND_HEADER: [&str; 6] = [
    "trial",
    "round",
    "budget_spent",
    "labeled_count",
    "cumulative_ood_selected",
    "test_accuracy",
];

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(file))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

pub fn write_rounds_csv(path: &Path, records: &[RoundRecord]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(ROUND_HEADER).map_err(|e| csv_err(path, e))?;
    for r in records {
        w.write_record([
            r.trial.to_string(),
            r.round.to_string(),
            r.budget_spent.to_string(),
            r.labeled_count.to_string(),
            r.cumulative_ood_selected.to_string(),
            format_real(r.test_accuracy),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rounds_csv(path: &Path) -> Result<Vec<RoundRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().ne(ROUND_HEADER) {
        return Err(Error::parse(1, "unexpected rounds.csv header"));
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::parse(line, e.to_string()))?;
        let int = |k: usize| -> Result<usize> {
            row[k]
                .parse()
                .map_err(|_| Error::parse(line, format!("bad integer `{}`", &row[k])))
        };
        out.push(RoundRecord {
            trial: int(0)?,
            round: int(1)?,
            budget_spent: int(2)?,
            labeled_count: int(3)?,
            cumulative_ood_selected: int(4)?,
            test_accuracy: row[5]
                .parse()
                .map_err(|_| Error::parse(line, format!("bad real `{}`", &row[5])))?,
            wall_secs: 0.0,
        });
    }
    Ok(out)
}

pub fn write_per_round_csv(path: &Path, rows: &[RoundMean]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["round", "budget_spent_mean", "accuracy_mean", "cumulative_ood_selected_mean"])
        .map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record([
            r.round.to_string(),
            format_real(r.budget_spent),
            format_real(r.accuracy),
            format_real(r.cumulative_ood_selected),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize)]
struct SummaryFile<'a> {
    strategy: &'a str,
    trials: usize,
    aubc_mean: f64,
    aubc_sd: f64,
    version: &'a str,
    seeds: &'a [u64],
    aubc: &'a [f64],
    config: &'a ExperimentConfig,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    version: &'a str,
    aubc_rule: &'a str,
    files: [&'a str; 3],
    config: &'a ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct SummaryView {
    pub strategy: String,
    pub trials: usize,
    pub aubc_mean: f64,
    pub aubc_sd: f64,
    pub version: String,
    pub seeds: Vec<u64>,
    pub aubc: Vec<f64>,
}

pub const ROUNDS_FILE: &str = "rounds.csv";
pub const PER_ROUND_FILE: &str = "per_round.csv";
pub const SUMMARY_FILE: &str = "summary.toml";
pub const MANIFEST_FILE: &str = "manifest.toml";

/// Writes `rounds.csv`, `per_round.csv`, `summary.toml` and `manifest.toml`
/// into `dir`, creating it if needed.
pub fn write_report(result: &ExperimentResult, dir: &Path) -> Result<()> {
    if result.records.is_empty() {
        return Err(Error::Invalid("no records to write".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_rounds_csv(&dir.join(ROUNDS_FILE), &result.records)?;
    write_per_round_csv(&dir.join(PER_ROUND_FILE), &result.summary.per_round)?;
    let s = &result.summary;
    let summary = SummaryFile {
        strategy: &s.strategy,
        trials: s.trials,
        aubc_mean: s.aubc_mean,
        aubc_sd: s.aubc_sd,
        version: &s.version,
        seeds: &s.seeds,
        aubc: &s.aubc,
        config: &result.config,
    };
    let manifest = Manifest {
        version: &s.version,
        aubc_rule: &s.aubc_rule,
        files: [ROUNDS_FILE, PER_ROUND_FILE, SUMMARY_FILE],
        config: &result.config,
    };
    let write = |name: &str, text: String| {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    write(SUMMARY_FILE, toml::to_string(&summary).map_err(|e| Error::Invalid(e.to_string()))?)?;
    write(MANIFEST_FILE, toml::to_string(&manifest).map_err(|e| Error::Invalid(e.to_string()))?)?;
    Ok(())
}

pub fn read_summary(dir: &Path) -> Result<SummaryView> {
    let path = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    #[derive(Deserialize)]
    struct Partial {
        strategy: String,
        trials: usize,
        aubc_mean: f64,
        aubc_sd: f64,
        version: String,
        seeds: Vec<u64>,
        aubc: Vec<f64>,
    }
    let p: Partial = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(SummaryView {
        strategy: p.strategy,
        trials: p.trials,
        aubc_mean: p.aubc_mean,
        aubc_sd: p.aubc_sd,
        version: p.version,
        seeds: p.seeds,
        aubc: p.aubc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn rec(budget: usize, acc: f64) -> RoundRecord {
        RoundRecord {
            trial: 0,
            round: 0,
            budget_spent: budget,
            labeled_count: 0,
            cumulative_ood_selected: 0,
            test_accuracy: acc,
            wall_secs: 0.0,
        }
    }

    fn small_config(strategy: &str) -> ExperimentConfig {
        ExperimentConfig::from_toml_str(&format!(
            r#"
strategy = "{strategy}"
n_init = 10
budget = 20
batch_size = 10
n_test = 40
trials = 1

[dataset]
kind = "synthetic"

[dataset.spec]
n_id_per_class = 60
n_ood = 30

[pareto]
max_iters = 400
"#
        ))
        .unwrap()
    }

    #[test]
    fn aubc_examples() {
        assert_abs_diff_eq!(aubc(&[rec(0, 0.6), rec(10, 0.6), rec(20, 0.6)]).unwrap(), 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(aubc(&[rec(0, 0.0), rec(5, 0.5), rec(10, 1.0)]).unwrap(), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(aubc(&[rec(0, 0.5), rec(10, 0.7), rec(20, 0.9)]).unwrap(), 0.7, epsilon = 1e-15);
        assert!(aubc(&[rec(0, 0.5)]).is_err());
        assert!(aubc(&[rec(3, 0.5), rec(3, 0.6)]).is_err());
    }

    #[test]
    fn mean_sd_examples() {
        assert_eq!(mean_sd(&[0.4]), (0.4, 0.0));
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn format_real_examples() {
        assert_eq!(format_real(0.7), "0.69999999999999996");
        assert_eq!(format_real(1.0), "1");
        assert_eq!(format_real(0.5), "0.5");
        assert_eq!(format_real(0.0), "0");
        assert_eq!(format_real(1e-7), "9.9999999999999995e-08");
        assert_eq!(format_real(123.25), "123.25");
        assert_eq!(format_real(1e20), "1e+20");
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let base = small_config("rand").to_toml_string();
        assert!(ExperimentConfig::from_toml_str(&base).is_ok());
        assert!(ExperimentConfig::from_toml_str(&format!("bogus = 1\n{base}")).is_err());
        let nested = base.replace("[pareto]", "[pareto]\nwindow = 3");
        assert!(ExperimentConfig::from_toml_str(&nested).is_err());
        let in_spec = base.replace("[dataset.spec]", "[dataset.spec]\nradius = 3.0");
        assert!(ExperimentConfig::from_toml_str(&in_spec).is_err());
        let bad_strategy = base.replace("strategy = \"rand\"", "strategy = \"badge\"");
        assert!(ExperimentConfig::from_toml_str(&bad_strategy).is_err());
    }

    #[test]
    fn config_round_trips() {
        let cfg = small_config("weighted:0.2:0.8");
        assert_eq!(ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
        assert_eq!(cfg.pareto.p_inv, 100);
        assert_eq!(cfg.learner, LearnerConfig::default());
    }

    #[test]
    fn budget_arithmetic_and_determinism() {
        let cfg = small_config("poal");
        let source = load_source(&cfg).unwrap();
        let strategy = cfg.strategy(&StrategyRegistry::default()).unwrap();
        let a = run_trial(&cfg, &source, strategy.as_ref(), 0, 7).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a.iter().map(|r| r.budget_spent).collect::<Vec<_>>(), vec![0, 10, 20]);
        let b = run_trial(&cfg, &source, strategy.as_ref(), 0, 7).unwrap();
        let strip = |v: Vec<RoundRecord>| v.into_iter().map(|r| RoundRecord { wall_secs: 0.0, ..r }).collect::<Vec<_>>();
        assert_eq!(strip(a), strip(b));
    }

    #[test]
    fn partial_last_batch() {
        let mut cfg = small_config("ent");
        cfg.budget = 25;
        let source = load_source(&cfg).unwrap();
        let strategy = cfg.strategy(&StrategyRegistry::default()).unwrap();
        let r = run_trial(&cfg, &source, strategy.as_ref(), 0, 1).unwrap();
        assert_eq!(r.iter().map(|r| r.budget_spent).collect::<Vec<_>>(), vec![0, 10, 20, 25]);
        for w in r.windows(2) {
            assert!(w[1].cumulative_ood_selected >= w[0].cumulative_ood_selected);
        }
        for x in &r {
            assert!(x.cumulative_ood_selected <= x.budget_spent);
            assert_eq!(x.labeled_count + x.cumulative_ood_selected, 10 + x.budget_spent);
        }
    }

    #[test]
    fn ideal_ent_avoids_ood() {
        let cfg = small_config("ideal-ent");
        let source = load_source(&cfg).unwrap();
        let strategy = cfg.strategy(&StrategyRegistry::default()).unwrap();
        let r = run_trial(&cfg, &source, strategy.as_ref(), 0, 3).unwrap();
        assert!(r.iter().all(|x| x.cumulative_ood_selected == 0));
    }

    #[test]
    fn experiment_summary_rules() {
        let mut cfg = small_config("rand");
        let one = run_experiment(&cfg).unwrap();
        assert_eq!(one.summary.aubc_sd, 0.0);
        assert_eq!(one.summary.aubc_mean, one.summary.aubc[0]);
        cfg.trials = 3;
        let three = run_experiment(&cfg).unwrap();
        assert_eq!(three.summary.seeds, vec![0, 1, 2]);
        assert!(three.summary.aubc_sd > 0.0);
        assert!(three.records.windows(2).all(|w| w[0].trial <= w[1].trial));
    }

    #[test]
    fn report_round_trip() {
        let cfg = small_config("maha");
        let result = run_experiment(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_report(&result, dir.path()).unwrap();
        let back = read_rounds_csv(&dir.path().join(ROUNDS_FILE)).unwrap();
        assert_eq!(back, result.records.iter().map(|r| RoundRecord { wall_secs: 0.0, ..r.clone() }).collect::<Vec<_>>());
        let text = fs::read_to_string(dir.path().join(ROUNDS_FILE)).unwrap();
        assert!(!text.contains('\r'));
        assert!(text.starts_with("trial,round,budget_spent,labeled_count,cumulative_ood_selected,test_accuracy\n"));
        let summary = read_summary(dir.path()).unwrap();
        assert_eq!(summary.aubc_mean, aubc(&back).unwrap());
        assert_eq!(summary.strategy, "maha");

        let empty = ExperimentResult {
            records: Vec::new(),
            ..result
        };
        let target = dir.path().join("nothing");
        assert!(write_report(&empty, &target).is_err());
        assert!(!target.exists());
    }

    proptest! {
        #[test]
        fn format_real_round_trips(v in prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO) {
            let s = format_real(v);
            prop_assert_eq!(s.parse::<f64>().unwrap(), v);
        }
    }
}
