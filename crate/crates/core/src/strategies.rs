//! Batch-selection strategies behind one trait, looked up by name.
//!
//! Every strategy turns a [`ScoreTable`] into `b` pool indices. The registry
//! maps a name such as `poal` or `weighted:0.2:0.8` to a boxed strategy.

use std::collections::BTreeMap;
use std::fmt;

use rand_chacha::ChaCha8Rng;

use crate::acquisition::{Acquisition, ScoreTable};
use crate::error::{Error, Result};
use crate::pareto::{mc_poal, pre_select, ParetoConfig};

/// Per-call inputs besides the score table.
pub struct SelectionContext<'a> {
    pub rng: &'a mut ChaCha8Rng,
    /// Ground-truth OOD flags aligned with the table; only handed to
    /// strategies that report [`Strategy::needs_ground_truth`].
    pub ood_mask: Option<&'a [bool]>,
}

pub trait Strategy: Send + Sync + fmt::Debug {
    fn name(&self) -> String;

    /// Which informativeness score fills the table's `u` column.
    fn acquisition(&self) -> Acquisition;

    fn needs_ground_truth(&self) -> bool {
        false
    }

    /// Returns table positions of the chosen batch.
    fn select_positions(&self, table: &ScoreTable, b: usize, ctx: &mut SelectionContext<'_>) -> Result<Vec<usize>>;

    /// Returns the chosen batch as pool indices.
    fn select(&self, table: &ScoreTable, b: usize, ctx: &mut SelectionContext<'_>) -> Result<Vec<usize>> {
        if b == 0 || b > table.len() {
            return Err(Error::Invalid(format!(
                "batch size {b} must be in 1..={}",
                table.len()
            )));
        }
        let positions = self.select_positions(table, b, ctx)?;
        Ok(positions.iter().map(|&p| table.indices()[p]).collect())
    }
}

/// Positions of the `b` largest scores, ties to the smaller position.
pub fn select_topk(scores: &[f64], b: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    order.truncate(b);
    order
}

/// Top-`b` by `u`, as used by ENT, Margin, MAHA and RAND.
#[derive(Debug, Clone, Copy)]
pub struct TopK {
    acquisition: Acquisition,
}

impl TopK {
    pub fn new(acquisition: Acquisition) -> Self {
        Self { acquisition }
    }
}

impl Strategy for TopK {
    fn name(&self) -> String {
        match self.acquisition {
            Acquisition::Entropy => "ent",
            Acquisition::Margin => "margin",
            Acquisition::Maha => "maha",
            Acquisition::Random => "rand",
        }
        .to_string()
    }

    fn acquisition(&self) -> Acquisition {
        self.acquisition
    }

    fn select_positions(&self, table: &ScoreTable, b: usize, _: &mut SelectionContext<'_>) -> Result<Vec<usize>> {
        Ok(select_topk(table.u(), b))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Poal {
    pub config: ParetoConfig,
}

impl Strategy for Poal {
    fn name(&self) -> String {
        "poal".into()
    }

    fn acquisition(&self) -> Acquisition {
        Acquisition::Entropy
    }

    fn select_positions(&self, table: &ScoreTable, b: usize, ctx: &mut SelectionContext<'_>) -> Result<Vec<usize>> {
        select_poal(table, b, &self.config, ctx.rng)
    }
}

/// Pre-selects on large pools, then runs the Monte-Carlo Pareto search.
pub fn select_poal(table: &ScoreTable, b: usize, config: &ParetoConfig, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if table.len() > config.preselect_threshold {
        if config.sm_multiplier == 0 {
            return Err(Error::Config("sm_multiplier must be at least 1".into()));
        }
        let kept = pre_select(table, config.sm_multiplier * b);
        let reduced = table.restrict(&kept)?;
        let out = mc_poal(&reduced, b, config, rng)?;
        log::debug!(
            "poal: {} of {} kept, {} iterations, archive {}",
            kept.len(),
            table.len(),
            out.iterations,
            out.archive.len()
        );
        Ok(out.chosen.positions().iter().map(|&p| kept[p]).collect())
    } else {
        let out = mc_poal(table, b, config, rng)?;
        log::debug!("poal: {} iterations, archive {}", out.iterations, out.archive.len());
        Ok(out.chosen.positions().to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedSum {
    pub w_u: f64,
    pub w_m: f64,
}

impl WeightedSum {
    /// `(eta, 1 - eta)`.
    pub fn from_eta(eta: f64) -> Self {
        Self {
            w_u: eta,
            w_m: 1.0 - eta,
        }
    }
}

impl Strategy for WeightedSum {
    fn name(&self) -> String {
        format!("weighted:{}:{}", self.w_u, self.w_m)
    }

    fn acquisition(&self) -> Acquisition {
        Acquisition::Entropy
    }

    fn select_positions(&self, table: &ScoreTable, b: usize, _: &mut SelectionContext<'_>) -> Result<Vec<usize>> {
        Ok(select_weighted_sum(table, b, self.w_u, self.w_m))
    }
}

pub fn select_weighted_sum(table: &ScoreTable, b: usize, w_u: f64, w_m: f64) -> Vec<usize> {
    let scores: Vec<f64> = table
        .u()
        .iter()
        .zip(table.m())
        .map(|(u, m)| w_u * u + w_m * m)
        .collect();
    select_topk(&scores, b)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TwoStage;

impl Strategy for TwoStage {
    fn name(&self) -> String {
        "twostage".into()
    }

    fn acquisition(&self) -> Acquisition {
        Acquisition::Entropy
    }

    fn select_positions(&self, table: &ScoreTable, b: usize, _: &mut SelectionContext<'_>) -> Result<Vec<usize>> {
        Ok(select_two_stage(table, b))
    }
}

/// Keeps `m >= mean(m)`, takes the top-`b` kept by `u`, and tops up with the
/// highest-`m` rejected samples.
pub fn select_two_stage(table: &ScoreTable, b: usize) -> Vec<usize> {
    let m = table.m();
    if m.is_empty() {
        return Vec::new();
    }
    let mean = m.iter().sum::<f64>() / m.len() as f64;
    let (kept, rejected): (Vec<usize>, Vec<usize>) = (0..m.len()).partition(|&i| m[i] >= mean);
    let u = table.u();
    let kept_u: Vec<f64> = kept.iter().map(|&i| u[i]).collect();
    let mut out: Vec<usize> = select_topk(&kept_u, b).into_iter().map(|p| kept[p]).collect();
    if out.len() < b {
        let rejected_m: Vec<f64> = rejected.iter().map(|&i| m[i]).collect();
        out.extend(
            select_topk(&rejected_m, b - out.len())
                .into_iter()
                .map(|p| rejected[p]),
        );
    }
    out
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdealEnt;

impl Strategy for IdealEnt {
    fn name(&self) -> String {
        "ideal-ent".into()
    }

    fn acquisition(&self) -> Acquisition {
        Acquisition::Entropy
    }

    fn needs_ground_truth(&self) -> bool {
        true
    }

    fn select_positions(&self, table: &ScoreTable, b: usize, ctx: &mut SelectionContext<'_>) -> Result<Vec<usize>> {
        let mask = ctx
            .ood_mask
            .ok_or_else(|| Error::Usage("ideal-ent needs the ground-truth OOD mask".into()))?;
        select_ideal_ent(table, mask, b)
    }
}

/// Top-`b` by `u` among true-ID samples, filling with OOD samples by `u`.
pub fn select_ideal_ent(table: &ScoreTable, ood_mask: &[bool], b: usize) -> Result<Vec<usize>> {
    if ood_mask.len() != table.len() {
        return Err(Error::Dimension {
            expected: table.len(),
            got: ood_mask.len(),
        });
    }
    let u = table.u();
    let (id, ood): (Vec<usize>, Vec<usize>) = (0..u.len()).partition(|&i| !ood_mask[i]);
    let pick = |rows: &[usize], k: usize| -> Vec<usize> {
        let scores: Vec<f64> = rows.iter().map(|&i| u[i]).collect();
        select_topk(&scores, k).into_iter().map(|p| rows[p]).collect()
    };
    let mut out = pick(&id, b);
    if out.len() < b {
        out.extend(pick(&ood, b - out.len()));
    }
    Ok(out)
}

/// Settings shared by strategy constructors.
#[derive(Debug, Clone, Copy, Default)]
pub struct StrategyParams {
    pub pareto: ParetoConfig,
}

pub type Factory = fn(args: &[&str], params: &StrategyParams) -> Result<Box<dyn Strategy>>;

/// Name to constructor map. Names may carry `:`-separated arguments, which
/// are passed to the factory registered under the part before the first `:`.
pub struct StrategyRegistry {
    factories: BTreeMap<String, Factory>,
}

fn no_args(name: &str, args: &[&str]) -> Result<()> {
    if args.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("strategy `{name}` takes no arguments")))
    }
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register("poal", |a, p| {
            no_args("poal", a)?;
            Ok(Box::new(Poal { config: p.pareto }))
        });
        r.register("ent", |a, _| {
            no_args("ent", a)?;
            Ok(Box::new(TopK::new(Acquisition::Entropy)))
        });
        r.register("margin", |a, _| {
            no_args("margin", a)?;
            Ok(Box::new(TopK::new(Acquisition::Margin)))
        });
        r.register("maha", |a, _| {
            no_args("maha", a)?;
            Ok(Box::new(TopK::new(Acquisition::Maha)))
        });
        r.register("rand", |a, _| {
            no_args("rand", a)?;
            Ok(Box::new(TopK::new(Acquisition::Random)))
        });
        r.register("twostage", |a, _| {
            no_args("twostage", a)?;
            Ok(Box::new(TwoStage))
        });
        r.register("ideal-ent", |a, _| {
            no_args("ideal-ent", a)?;
            Ok(Box::new(IdealEnt))
        });
        r.register("weighted", |a, _| {
            let parse = |s: &str| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Config(format!("bad weight `{s}`")))
            };
            match a {
                [w_u, w_m] => Ok(Box::new(WeightedSum {
                    w_u: parse(w_u)?,
                    w_m: parse(w_m)?,
                })),
                _ => Err(Error::Config("expected `weighted:<w_u>:<w_m>`".into())),
            }
        });
        r
    }
}

impl StrategyRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, factory: Factory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn create(&self, spec: &str, params: &StrategyParams) -> Result<Box<dyn Strategy>> {
        let mut parts = spec.split(':');
        let head = parts.next().unwrap_or_default();
        let args: Vec<&str> = parts.collect();
        let factory = self.factories.get(head).ok_or_else(|| {
            Error::Config(format!(
                "unknown strategy `{spec}` (known: {})",
                self.names().collect::<Vec<_>>().join(", ")
            ))
        })?;
        factory(&args, params)
    }
}
