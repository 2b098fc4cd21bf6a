//! Synthetic biased data, CSV ingestion and deterministic batching.
//!
//! The generator draws `(a, y)` cells from a joint distribution with two
//! multiplicative factors over a uniform base:
//!
//! * a correlation factor `P(y | a)` that puts `1/N + ρ(1 − 1/N)` on the
//!   group's aligned class `a mod N` and spreads the rest evenly, which is
//!   `(1 + ρ)/2` for binary targets;
//! * an imbalance factor that multiplies cells with `a == y mod M` by
//!   `imbalance_level`, so within each target class the aligned group is
//!   `imbalance_level` times as frequent as each other group.
//!
//! Features are laid out as `signal_dims` class-mean channels (class `y` has
//! mean `class_separation · (y − (N−1)/2)` in each), one leak channel holding
//! `a · leak_strength`, and pure-noise channels up to `d`. Every channel gets
//! independent `N(0, noise_std²)` noise.
//!
//! With [`LeakEncoding::Polarity`] (the default) the leak channel is then
//! multiplied by the sign of the channel after it. Its magnitude still
//! carries `a · leak_strength`, but no single linear read-out recovers the
//! group: decoding it takes a nonlinear interaction of two channels, which
//! deeper layers can learn and a briefly trained probe on shallow features
//! mostly misses.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use log::warn;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Matrix;

/// Regeneration attempts before an empty split cell becomes an error.
pub const MAX_GENERATION_ATTEMPTS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledInstance {
    pub features: Vec<f64>,
    pub target: usize,
    pub sensitive: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub d: usize,
    pub n_classes: usize,
    pub n_groups: usize,
    /// ρ in `[0, 1]`.
    pub bias_corr: f64,
    pub leak_strength: f64,
    /// Group-imbalance ratio, at least 1.
    pub imbalance_level: f64,
    pub class_separation: f64,
    pub signal_dims: usize,
    pub noise_std: f64,
    pub leak_encoding: LeakEncoding,
    pub seed: u64,
}

/// How the leak channel presents the group.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeakEncoding {
    /// `a · leak_strength + noise`, linearly decodable.
    Additive,
    /// The additive value with its sign flipped wherever the next (pure
    /// noise) channel is negative.
    #[default]
    Polarity,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_train: 7000,
            n_val: 1000,
            n_test: 2000,
            d: 8,
            n_classes: 2,
            n_groups: 2,
            bias_corr: 0.8,
            leak_strength: 2.0,
            imbalance_level: 1.0,
            class_separation: 1.0,
            signal_dims: 4,
            noise_std: 1.0,
            leak_encoding: LeakEncoding::default(),
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn n_total(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    /// Index of the leak channel.
    pub fn leak_channel(&self) -> usize {
        self.signal_dims
    }

    /// Channels the leak occupies: itself, plus the polarity channel.
    fn leak_channels(&self) -> usize {
        match self.leak_encoding {
            LeakEncoding::Additive => 1,
            LeakEncoding::Polarity => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return bad("split sizes must be positive".into());
        }
        if self.n_classes < 2 || self.n_groups < 1 {
            return bad(format!(
                "need at least 2 classes and 1 group, got {} and {}",
                self.n_classes, self.n_groups
            ));
        }
        if !(0.0..=1.0).contains(&self.bias_corr) {
            return bad(format!("bias_corr must lie in [0,1], got {}", self.bias_corr));
        }
        if !(self.imbalance_level >= 1.0 && self.imbalance_level.is_finite()) {
            return bad(format!(
                "imbalance_level must be >= 1, got {}",
                self.imbalance_level
            ));
        }
        let needed = self.signal_dims + self.leak_channels();
        if self.d < needed {
            return bad(format!(
                "d = {} cannot hold {} signal channels plus {} leak channel(s)",
                self.d,
                self.signal_dims,
                self.leak_channels()
            ));
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be positive, got {}", self.noise_std));
        }
        if !self.leak_strength.is_finite() || !self.class_separation.is_finite() {
            return bad("leak_strength and class_separation must be finite".into());
        }
        Ok(())
    }

    /// Joint cell probabilities indexed `[a][y]`.
    pub fn cell_probabilities(&self) -> Vec<Vec<f64>> {
        let n = self.n_classes as f64;
        let rho = self.bias_corr;
        let mut w = vec![vec![0.0; self.n_classes]; self.n_groups];
        for (a, row) in w.iter_mut().enumerate() {
            for (y, cell) in row.iter_mut().enumerate() {
                let corr = if y == a % self.n_classes {
                    1.0 / n + rho * (1.0 - 1.0 / n)
                } else {
                    (1.0 - rho) / n
                };
                let imb = if a == y % self.n_groups {
                    self.imbalance_level
                } else {
                    1.0
                };
                *cell = corr * imb;
            }
        }
        let total: f64 = w.iter().flatten().sum();
        for v in w.iter_mut().flatten() {
            *v /= total;
        }
        w
    }
}

/// Disjoint train/validation/test partitions.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<LabeledInstance>,
    pub val: Vec<LabeledInstance>,
    pub test: Vec<LabeledInstance>,
    pub n_classes: usize,
    pub n_groups: usize,
}

impl Split {
    pub fn input_dim(&self) -> usize {
        self.train.first().map_or(0, |i| i.features.len())
    }
}

pub fn generate_synthetic(spec: &DatasetSpec) -> Result<Split> {
    spec.validate()?;
    let probs = spec.cell_probabilities();
    let mut last_err = None;
    for attempt in 0..MAX_GENERATION_ATTEMPTS {
        let seed = spec
            .seed
            .wrapping_add((attempt as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        match generate_attempt(spec, &probs, seed) {
            Ok(split) => return Ok(split),
            Err(e @ Error::EmptyCell { .. }) => {
                warn!("synthetic generation attempt {attempt} left an empty cell; retrying");
                last_err = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    Err(last_err.expect("at least one attempt"))
}

fn generate_attempt(spec: &DatasetSpec, probs: &[Vec<f64>], seed: u64) -> Result<Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells: Vec<(usize, usize)> = (0..spec.n_groups)
        .flat_map(|a| (0..spec.n_classes).map(move |y| (a, y)))
        .collect();
    let weights: Vec<f64> = cells.iter().map(|&(a, y)| probs[a][y]).collect();
    let picker = WeightedIndex::new(&weights)
        .map_err(|e| Error::Parameter(format!("degenerate cell distribution: {e}")))?;
    let noise = Normal::new(0.0, spec.noise_std)
        .map_err(|e| Error::Parameter(format!("noise distribution: {e}")))?;
    let center = (spec.n_classes as f64 - 1.0) / 2.0;

    let mut all = Vec::with_capacity(spec.n_total());
    for _ in 0..spec.n_total() {
        let (a, y) = cells[picker.sample(&mut rng)];
        let mut features = Vec::with_capacity(spec.d);
        for j in 0..spec.d {
            let mean = if j < spec.signal_dims {
                spec.class_separation * (y as f64 - center)
            } else if j == spec.leak_channel() {
                a as f64 * spec.leak_strength
            } else {
                0.0
            };
            features.push(mean + noise.sample(&mut rng));
        }
        if spec.leak_encoding == LeakEncoding::Polarity {
            let k = spec.leak_channel();
            if features[k + 1] < 0.0 {
                features[k] = -features[k];
            }
        }
        all.push(LabeledInstance {
            features,
            target: y,
            sensitive: a,
        });
    }

    // Stratify by (y, a) cell.
    let mut by_cell: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, inst) in all.iter().enumerate() {
        by_cell
            .entry((inst.target, inst.sensitive))
            .or_default()
            .push(i);
    }
    let expected: Vec<(usize, usize)> = cells
        .iter()
        .filter(|&&(a, y)| probs[a][y] > 0.0)
        .map(|&(a, y)| (y, a))
        .collect();
    for &(y, a) in &expected {
        if !by_cell.contains_key(&(y, a)) {
            return Err(Error::EmptyCell {
                class: y,
                group: a,
                context: "no instances generated".into(),
            });
        }
    }
    let keys: Vec<(usize, usize)> = by_cell.keys().copied().collect();
    let counts: Vec<usize> = keys.iter().map(|k| by_cell[k].len()).collect();
    let val_q = apportion(&counts, spec.n_val, &vec![0; counts.len()])?;
    let test_q = apportion(&counts, spec.n_test, &val_q)?;

    let mut train_idx = Vec::with_capacity(spec.n_train);
    let mut val_idx = Vec::with_capacity(spec.n_val);
    let mut test_idx = Vec::with_capacity(spec.n_test);
    for (c, key) in keys.iter().enumerate() {
        let mut members = by_cell[key].clone();
        members.shuffle(&mut rng);
        let (v, t) = (val_q[c], test_q[c]);
        if v == 0 || t == 0 || members.len() <= v + t {
            return Err(Error::EmptyCell {
                class: key.0,
                group: key.1,
                context: format!("{} instances cannot cover all three splits", members.len()),
            });
        }
        val_idx.extend_from_slice(&members[..v]);
        test_idx.extend_from_slice(&members[v..v + t]);
        train_idx.extend_from_slice(&members[v + t..]);
    }
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    test_idx.sort_unstable();
    let take = |idx: &[usize]| idx.iter().map(|&i| all[i].clone()).collect::<Vec<_>>();
    Ok(Split {
        train: take(&train_idx),
        val: take(&val_idx),
        test: take(&test_idx),
        n_classes: spec.n_classes,
        n_groups: spec.n_groups,
    })
}

/// Largest-remainder allocation of `total` across cells proportional to
/// `counts`, giving every cell at least one slot when it has room beyond
/// what `reserved` already took.
fn apportion(counts: &[usize], total: usize, reserved: &[usize]) -> Result<Vec<usize>> {
    let n: usize = counts.iter().sum();
    let mut quota: Vec<usize> = counts.iter().map(|&c| c * total / n).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    // Ties resolved by cell order for determinism.
    order.sort_by(|&i, &j| {
        let ri = (counts[i] * total) % n;
        let rj = (counts[j] * total) % n;
        rj.cmp(&ri).then(i.cmp(&j))
    });
    let mut assigned: usize = quota.iter().sum();
    for &i in order.iter().cycle().take(counts.len() * 2) {
        if assigned >= total {
            break;
        }
        quota[i] += 1;
        assigned += 1;
    }
    // Guarantee coverage, borrowing from the largest quota.
    for i in 0..counts.len() {
        if quota[i] == 0 && counts[i] > reserved[i] + 1 {
            let donor = (0..counts.len())
                .filter(|&j| quota[j] > 1)
                .max_by_key(|&j| (quota[j], std::cmp::Reverse(j)));
            if let Some(j) = donor {
                quota[j] -= 1;
                quota[i] += 1;
            }
        }
    }
    if quota.iter().sum::<usize>() != total {
        return Err(Error::Input(format!(
            "cannot allocate {total} instances across {} cells",
            counts.len()
        )));
    }
    Ok(quota)
}

/// Ranges used to validate labels while reading CSV data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CsvSchema {
    pub n_classes: usize,
    pub n_groups: usize,
}

pub fn load_csv(path: impl AsRef<Path>, schema: CsvSchema) -> Result<Vec<LabeledInstance>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema)
}

/// Parses `f0,...,f{d-1},target,sensitive` records. Rows are numbered as file
/// lines, header included.
pub fn read_csv<R: Read>(reader: R, schema: CsvSchema) -> Result<Vec<LabeledInstance>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            row: 1,
            column: "header".into(),
            message: e.to_string(),
        })?
        .clone();
    let find = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            row: 1,
            column: name.into(),
            message: "missing column".into(),
        })
    };
    let target_col = find("target")?;
    let sensitive_col = find("sensitive")?;
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|&c| c != target_col && c != sensitive_col)
        .collect();

    let mut out = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| Error::Parse {
            row,
            column: "*".into(),
            message: e.to_string(),
        })?;
        let field = |c: usize| -> Result<&str> {
            record.get(c).ok_or_else(|| Error::Parse {
                row,
                column: headers[c].to_string(),
                message: "missing value".into(),
            })
        };
        let mut features = Vec::with_capacity(feature_cols.len());
        for &c in &feature_cols {
            let raw = field(c)?;
            let v: f64 = raw.parse().map_err(|_| Error::Parse {
                row,
                column: headers[c].to_string(),
                message: format!("non-numeric feature {raw:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: headers[c].to_string(),
                    message: format!("non-finite feature {raw:?}"),
                });
            }
            features.push(v);
        }
        let label = |c: usize, limit: usize| -> Result<usize> {
            let raw = field(c)?;
            let v: usize = raw.parse().map_err(|_| Error::Parse {
                row,
                column: headers[c].to_string(),
                message: format!("label {raw:?} is not a nonnegative integer"),
            })?;
            if v >= limit {
                return Err(Error::Parse {
                    row,
                    column: headers[c].to_string(),
                    message: format!("label {v} out of range 0..{limit}"),
                });
            }
            Ok(v)
        };
        out.push(LabeledInstance {
            features,
            target: label(target_col, schema.n_classes)?,
            sensitive: label(sensitive_col, schema.n_groups)?,
        });
    }
    Ok(out)
}

pub fn write_csv<W: Write>(writer: W, data: &[LabeledInstance]) -> Result<()> {
    let d = data.first().map_or(0, |i| i.features.len());
    let mut wtr = csv::WriterBuilder::new().from_writer(writer);
    let serde_err = |e: csv::Error| Error::Serde(e.to_string());
    let mut header: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
    header.push("target".into());
    header.push("sensitive".into());
    wtr.write_record(&header).map_err(serde_err)?;
    for inst in data {
        if inst.features.len() != d {
            return Err(Error::dim(
                "write_csv",
                format!("instance with {} features among {d}", inst.features.len()),
            ));
        }
        let mut rec: Vec<String> = inst.features.iter().map(|v| v.to_string()).collect();
        rec.push(inst.target.to_string());
        rec.push(inst.sensitive.to_string());
        wtr.write_record(&rec).map_err(serde_err)?;
    }
    wtr.flush().map_err(|e| Error::Serde(e.to_string()))?;
    Ok(())
}

pub fn save_csv(path: impl AsRef<Path>, data: &[LabeledInstance]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(std::io::BufWriter::new(file), data)
}

/// A minibatch in matrix form.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub features: Matrix,
    pub targets: Vec<usize>,
    pub sensitives: Vec<usize>,
}

impl Batch {
    pub fn from_instances<'a>(items: impl IntoIterator<Item = &'a LabeledInstance>) -> Result<Self> {
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        let mut sensitives = Vec::new();
        for inst in items {
            rows.push(inst.features.as_slice());
            targets.push(inst.target);
            sensitives.push(inst.sensitive);
        }
        Ok(Self {
            features: Matrix::from_rows(&rows)?,
            targets,
            sensitives,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Index batches over `0..n`; a seeded permutation when `shuffle`, input order
/// otherwise. The final partial batch is kept.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Parameter("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

pub fn batches(
    data: &[LabeledInstance],
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> Result<Vec<Batch>> {
    batch_indices(data.len(), batch_size, seed, shuffle)?
        .into_iter()
        .map(|idx| Batch::from_instances(idx.iter().map(|&i| &data[i])))
        .collect()
}
