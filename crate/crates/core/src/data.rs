//! Datasets, ingestion, ID/OOD splitting, the synthetic generator and the
//! simulated oracle.
//!
//! Labels are stored as `i32`: `0..K` for in-distribution classes and
//! [`OOD_LABEL`] for rows outside the task's label space.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Read;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label the oracle answers for out-of-distribution samples.
pub const OOD_LABEL: i32 = -1;

/// Dense feature matrix with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<i32>,
    k_classes: usize,
    /// Original label of each ID class, indexed by the remapped label.
    class_names: Vec<String>,
    pub name: String,
}

impl Dataset {
    /// Builds a dataset from row-major features, validating every invariant.
    pub fn new(
        name: impl Into<String>,
        features: Vec<f64>,
        dim: usize,
        labels: Vec<i32>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("feature dimension must be at least 1".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::Dimension {
                expected: labels.len() * dim,
                got: features.len(),
            });
        }
        let k = class_names.len();
        let mut seen = vec![false; k];
        for &y in &labels {
            if y == OOD_LABEL {
                continue;
            }
            if y < 0 || y as usize >= k {
                return Err(Error::Invalid(format!("label {y} outside [0, {k})")));
            }
            seen[y as usize] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Invalid(format!(
                "ID class {missing} ({}) has no rows",
                class_names[missing]
            )));
        }
        Ok(Self {
            features,
            dim,
            labels,
            k_classes: k,
            class_names,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k_classes(&self) -> usize {
        self.k_classes
    }

    pub fn labels(&self) -> &[i32] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> i32 {
        self.labels[i]
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn is_ood(&self, i: usize) -> bool {
        self.labels[i] == OOD_LABEL
    }

    pub fn id_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.is_ood(i)).collect()
    }

    pub fn ood_count(&self) -> usize {
        self.labels.iter().filter(|&&y| y == OOD_LABEL).count()
    }

    /// Row-major copy of the selected rows.
    pub fn gather(&self, rows: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            out.extend_from_slice(self.row(r));
        }
        out
    }

    /// Sub-dataset over `rows`, keeping the class mapping. Classes that end up
    /// with no rows are still counted in `k_classes`.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            features: self.gather(rows),
            dim: self.dim,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            k_classes: self.k_classes,
            class_names: self.class_names.clone(),
            name: self.name.clone(),
        }
    }
}

fn label_key(token: &str) -> Option<f64> {
    token.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Parses LIBSVM text (`<label> <idx>:<val> ...`, 1-based strictly increasing
/// indices). Labels are remapped to `0..K` in ascending numeric order; the
/// original values survive as [`Dataset::class_names`].
pub fn parse_libsvm(text: &str) -> Result<Dataset> {
    let mut rows: Vec<(f64, Vec<(usize, f64)>)> = Vec::new();
    let mut dim = 0usize;
    for (lineno, raw) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let line = raw.trim_end_matches('\r');
        let line = match line.find('#') {
            Some(p) => &line[..p],
            None => line,
        };
        let mut tokens = line.split_whitespace();
        let Some(label_tok) = tokens.next() else {
            continue;
        };
        let label = label_key(label_tok)
            .ok_or_else(|| Error::parse(line_no, format!("bad label `{label_tok}`")))?;
        let mut entries = Vec::new();
        let mut last = 0usize;
        for tok in tokens {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| Error::parse(line_no, format!("malformed token `{tok}`")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::parse(line_no, format!("bad index in `{tok}`")))?;
            if idx == 0 {
                return Err(Error::parse(line_no, "indices are 1-based"));
            }
            if idx <= last {
                return Err(Error::parse(
                    line_no,
                    format!("non-increasing index {idx} after {last}"),
                ));
            }
            let val: f64 = val
                .parse()
                .map_err(|_| Error::parse(line_no, format!("bad value in `{tok}`")))?;
            if !val.is_finite() {
                return Err(Error::parse(line_no, format!("non-finite value in `{tok}`")));
            }
            last = idx;
            entries.push((idx, val));
        }
        dim = dim.max(last);
        rows.push((label, entries));
    }
    if rows.is_empty() {
        return Err(Error::parse(0, "empty input"));
    }
    if dim == 0 {
        return Err(Error::parse(1, "no feature entries in input"));
    }

    let mut distinct: Vec<f64> = rows.iter().map(|(l, _)| *l).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let class_names: Vec<String> = distinct.iter().map(|v| format!("{v}")).collect();

    let mut features = vec![0.0; rows.len() * dim];
    let mut labels = Vec::with_capacity(rows.len());
    for (r, (label, entries)) in rows.iter().enumerate() {
        let class = distinct
            .binary_search_by(|probe| probe.total_cmp(label))
            .expect("label collected above");
        labels.push(class as i32);
        for &(idx, val) in entries {
            features[r * dim + idx - 1] = val;
        }
    }
    Dataset::new("libsvm", features, dim, labels, class_names)
}

/// Writes `ds` as LIBSVM text. Zero entries are omitted except the last
/// column, which is always written so the dimensionality survives a re-parse.
/// OOD rows carry the label `-1`.
pub fn serialize_libsvm(ds: &Dataset) -> String {
    let mut out = String::new();
    for i in 0..ds.len() {
        let y = ds.label(i);
        if y == OOD_LABEL {
            out.push_str("-1");
        } else {
            out.push_str(&ds.class_names[y as usize]);
        }
        for (j, &v) in ds.row(i).iter().enumerate() {
            if v != 0.0 || j + 1 == ds.dim {
                let _ = write!(out, " {}:{}", j + 1, v);
            }
        }
        out.push('\n');
    }
    out
}

/// Where the label lives in a CSV file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelColumn {
    Index(usize),
    Name(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvOptions {
    pub has_header: bool,
    pub label_column: LabelColumn,
}

/// Reads a CSV table; every column other than the label column is a real
/// feature. Labels are class names, ordered numerically when all of them
/// parse as numbers and lexicographically otherwise.
pub fn read_csv<R: Read>(reader: R, opts: &CsvOptions) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(opts.has_header)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let label_idx = match &opts.label_column {
        LabelColumn::Index(i) => *i,
        LabelColumn::Name(name) => {
            if !opts.has_header {
                return Err(Error::Config(format!(
                    "label column `{name}` given by name but the file has no header"
                )));
            }
            let headers = rdr
                .headers()
                .map_err(|e| Error::parse(1, e.to_string()))?;
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Config(format!("no column named `{name}`")))?
        }
    };

    let first_line = if opts.has_header { 2 } else { 1 };
    let mut raw_labels = Vec::new();
    let mut features = Vec::new();
    let mut dim = None;
    for (r, rec) in rdr.records().enumerate() {
        let line = first_line + r;
        let rec = rec.map_err(|e| Error::parse(line, e.to_string()))?;
        if rec.len() <= label_idx {
            return Err(Error::parse(line, "label column out of range"));
        }
        let width = rec.len() - 1;
        match dim {
            None => dim = Some(width),
            Some(d) if d != width => {
                return Err(Error::parse(line, format!("expected {d} features, found {width}")))
            }
            _ => {}
        }
        for (j, field) in rec.iter().enumerate() {
            if j == label_idx {
                raw_labels.push(field.to_string());
            } else {
                let v: f64 = field
                    .parse()
                    .map_err(|_| Error::parse(line, format!("bad number `{field}`")))?;
                if !v.is_finite() {
                    return Err(Error::parse(line, format!("non-finite value `{field}`")));
                }
                features.push(v);
            }
        }
    }
    let dim = dim.ok_or_else(|| Error::parse(0, "empty input"))?;

    let numeric = raw_labels.iter().all(|l| label_key(l).is_some());
    let names: Vec<String> = if numeric {
        let mut vals: Vec<f64> = raw_labels.iter().filter_map(|l| label_key(l)).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        vals.iter().map(|v| format!("{v}")).collect()
    } else {
        let set: BTreeSet<&String> = raw_labels.iter().collect();
        set.into_iter().cloned().collect()
    };
    let lookup: BTreeMap<&str, i32> = names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i as i32))
        .collect();
    let labels = raw_labels
        .iter()
        .map(|l| {
            let key = if numeric {
                format!("{}", label_key(l).unwrap())
            } else {
                l.clone()
            };
            lookup[key.as_str()]
        })
        .collect();
    Dataset::new("csv", features, dim, labels, names)
}

/// Keeps the rows whose original label is in `id_classes` as ID classes
/// `0..K` (sorted by their current class order) and marks everything else
/// OOD. Row order and features are untouched.
pub fn make_ood_split(ds: &Dataset, id_classes: &[String]) -> Result<Dataset> {
    if id_classes.is_empty() {
        return Err(Error::Config("id_classes must not be empty".into()));
    }
    let mut keep: Vec<usize> = Vec::with_capacity(id_classes.len());
    for name in id_classes {
        let pos = class_position(ds, name)
            .ok_or_else(|| Error::Config(format!("id class `{name}` not present in data")))?;
        keep.push(pos);
    }
    keep.sort_unstable();
    keep.dedup();
    let mut remap = vec![OOD_LABEL; ds.k_classes];
    for (new, &old) in keep.iter().enumerate() {
        remap[old] = new as i32;
    }
    let labels = ds
        .labels
        .iter()
        .map(|&y| if y == OOD_LABEL { OOD_LABEL } else { remap[y as usize] })
        .collect();
    let names = keep.iter().map(|&k| ds.class_names[k].clone()).collect();
    Dataset::new(ds.name.clone(), ds.features.clone(), ds.dim, labels, names)
}

fn class_position(ds: &Dataset, name: &str) -> Option<usize> {
    ds.class_names
        .iter()
        .position(|n| n == name || label_key(n).zip(label_key(name)).is_some_and(|(a, b)| a == b))
}

/// Keeps only the rows whose class is one of `classes`. Class names and
/// numbering are unchanged.
pub fn restrict_classes(ds: &Dataset, classes: &[String]) -> Result<Dataset> {
    let mut keep = vec![false; ds.k_classes];
    for name in classes {
        let pos = class_position(ds, name)
            .ok_or_else(|| Error::Config(format!("class `{name}` not present in data")))?;
        keep[pos] = true;
    }
    let rows: Vec<usize> = (0..ds.len())
        .filter(|&i| ds.labels[i] != OOD_LABEL && keep[ds.labels[i] as usize])
        .collect();
    Ok(ds.subset(&rows))
}

/// Parameters of the two-band generator with one OOD blob.
///
/// The two ID classes fill bands of height `band_height` above and below a
/// circular arc of radius `boundary_radius`, over `x` in
/// `[-half_width, half_width]`. The arc is shifted so that its mean height
/// is zero, so the best straight boundary is close to the `x` axis but no
/// line separates the classes. `id_spread` jitter makes them overlap near
/// the arc, `class_gap` leaves an empty strip of that height around it. The OOD blob is centred at `(ood_offset, 0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_id_per_class: usize,
    pub n_ood: usize,
    pub half_width: f64,
    pub band_height: f64,
    pub boundary_radius: f64,
    pub class_gap: f64,
    /// Standard deviation of Gaussian jitter added to ID points.
    pub id_spread: f64,
    pub ood_offset: f64,
    pub ood_spread: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        // 460 training ID + 306 test ID rows, 210 OOD rows.
        Self {
            n_id_per_class: 383,
            n_ood: 210,
            half_width: 1.0,
            band_height: 1.0,
            boundary_radius: 10.0,
            class_gap: 0.0,
            id_spread: 0.15,
            ood_offset: 2.5,
            ood_spread: 0.06,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_id_per_class == 0 {
            return Err(Error::Config("n_id_per_class must be at least 1".into()));
        }
        let positive = [
            ("half_width", self.half_width),
            ("band_height", self.band_height),
            ("ood_spread", self.ood_spread),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.boundary_radius > self.half_width && self.boundary_radius.is_finite()) {
            return Err(Error::Config("boundary_radius must be finite and exceed half_width".into()));
        }
        for (name, v) in [
            ("ood_offset", self.ood_offset),
            ("id_spread", self.id_spread),
            ("class_gap", self.class_gap),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    /// Height of the class boundary at `x`.
    pub fn boundary(&self, x: f64) -> f64 {
        let (r, l) = (self.boundary_radius, self.half_width);
        let mean_sqrt = (l * (r * r - l * l).sqrt() + r * r * (l / r).asin()) / (2.0 * l);
        mean_sqrt - (r * r - x * x).sqrt()
    }

    pub fn id_centers(&self) -> [[f64; 2]; 2] {
        let h = (self.band_height + self.class_gap) / 2.0;
        [[0.0, h], [0.0, -h]]
    }

    pub fn ood_center(&self) -> [f64; 2] {
        [self.ood_offset, 0.0]
    }
}

/// Generates the 2-D synthetic dataset. Rows are ordered class 0 (above the
/// boundary), class 1, then OOD.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let ood_noise = Normal::new(0.0, spec.ood_spread).expect("validated spread");
    let id_noise = Normal::new(0.0, spec.id_spread).expect("validated spread");
    let n = 2 * spec.n_id_per_class + spec.n_ood;
    let mut features = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for class in 0..2 {
        let sign = if class == 0 { 1.0 } else { -1.0 };
        for _ in 0..spec.n_id_per_class {
            let x = rng.random_range(-spec.half_width..=spec.half_width);
            let depth: f64 = rng.random_range(0.0..spec.band_height);
            let y = spec.boundary(x) + sign * (spec.class_gap / 2.0 + depth);
            features.extend_from_slice(&[x + id_noise.sample(&mut rng), y + id_noise.sample(&mut rng)]);
            labels.push(class);
        }
    }
    let [cx, cy] = spec.ood_center();
    for _ in 0..spec.n_ood {
        features.push(cx + ood_noise.sample(&mut rng));
        features.push(cy + ood_noise.sample(&mut rng));
        labels.push(OOD_LABEL);
    }
    Dataset::new(
        "synthetic",
        features,
        2,
        labels,
        vec!["0".to_string(), "1".to_string()],
    )
}

/// Partition of the training rows into labeled ID, exhausted OOD and
/// unlabeled indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolState {
    labeled: Vec<(usize, usize)>,
    exhausted: BTreeSet<usize>,
    unlabeled: Vec<usize>,
    budget_spent: usize,
    initial_labeled: usize,
    universe: usize,
}

impl PoolState {
    pub fn labeled(&self) -> &[(usize, usize)] {
        &self.labeled
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        self.labeled.iter().map(|&(i, _)| i).collect()
    }

    pub fn labeled_targets(&self) -> Vec<usize> {
        self.labeled.iter().map(|&(_, y)| y).collect()
    }

    pub fn exhausted(&self) -> &BTreeSet<usize> {
        &self.exhausted
    }

    pub fn unlabeled(&self) -> &[usize] {
        &self.unlabeled
    }

    pub fn budget_spent(&self) -> usize {
        self.budget_spent
    }

    pub fn initial_labeled(&self) -> usize {
        self.initial_labeled
    }

    /// Verifies the partition and accounting invariants.
    pub fn check_invariants(&self) -> Result<()> {
        let mut seen = vec![false; self.universe];
        let all = self
            .labeled
            .iter()
            .map(|&(i, _)| i)
            .chain(self.exhausted.iter().copied())
            .chain(self.unlabeled.iter().copied());
        let mut count = 0;
        for i in all {
            if i >= self.universe || seen[i] {
                return Err(Error::Invalid(format!("index {i} duplicated or out of range")));
            }
            seen[i] = true;
            count += 1;
        }
        if count != self.universe {
            return Err(Error::Invalid("pool partition does not cover every row".into()));
        }
        if self.budget_spent + self.initial_labeled != self.labeled.len() + self.exhausted.len() {
            return Err(Error::Invalid("budget accounting mismatch".into()));
        }
        Ok(())
    }
}

/// Draws an ID-only initial labeled set of `n_init` rows, round-robin over
/// classes with a random order inside each class.
pub fn init_pool(ds: &Dataset, n_init: usize, seed: u64) -> Result<PoolState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); ds.k_classes()];
    for i in 0..ds.len() {
        let y = ds.label(i);
        if y != OOD_LABEL {
            per_class[y as usize].push(i);
        }
    }
    let total_id: usize = per_class.iter().map(Vec::len).sum();
    if total_id < n_init {
        return Err(Error::Config(format!(
            "n_init = {n_init} exceeds the {total_id} ID rows available"
        )));
    }
    for rows in &mut per_class {
        rows.shuffle(&mut rng);
    }
    let mut cursors = vec![0usize; per_class.len()];
    let mut labeled = Vec::with_capacity(n_init);
    'outer: while labeled.len() < n_init {
        for (k, rows) in per_class.iter().enumerate() {
            if labeled.len() == n_init {
                break 'outer;
            }
            if cursors[k] < rows.len() {
                labeled.push((rows[cursors[k]], k));
                cursors[k] += 1;
            }
        }
    }
    if cursors.iter().any(|&c| c == 0) {
        log::warn!("initial labeled set leaves some ID classes unrepresented");
    }
    let mut taken = vec![false; ds.len()];
    for &(i, _) in &labeled {
        taken[i] = true;
    }
    let unlabeled = (0..ds.len()).filter(|&i| !taken[i]).collect();
    let pool = PoolState {
        initial_labeled: labeled.len(),
        labeled,
        exhausted: BTreeSet::new(),
        unlabeled,
        budget_spent: 0,
        universe: ds.len(),
    };
    debug_assert!(pool.check_invariants().is_ok());
    Ok(pool)
}

/// Asks the simulated oracle for the label of `idx`. OOD answers consume
/// budget but add nothing to the labeled set.
pub fn oracle_query(ds: &Dataset, pool: &mut PoolState, idx: usize) -> Result<i32> {
    let pos = pool
        .unlabeled
        .iter()
        .position(|&i| i == idx)
        .ok_or_else(|| Error::Usage(format!("index {idx} is not in the unlabeled pool")))?;
    pool.unlabeled.remove(pos);
    let y = ds.label(idx);
    if y == OOD_LABEL {
        pool.exhausted.insert(idx);
    } else {
        pool.labeled.push((idx, y as usize));
    }
    pool.budget_spent += 1;
    debug_assert!(pool.check_invariants().is_ok());
    Ok(y)
}
