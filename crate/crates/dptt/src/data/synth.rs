//! Synthetic shifted tabular data.
//!
//! A fixed logistic ground truth over embedded categorical codes and two
//! continuous features generates labels; a `shift` knob in [0, 1]
//! interpolates both the category marginals and the logistic weights
//! between an upstream regime (shift 0) and a downstream one (shift 1),
//! emulating a geographic transfer with covariate and concept shift.
//!
//! The task itself (marginals, weights) is derived from a fixed internal
//! key, so datasets generated with different sampling seeds or shifts are
//! draws from the same underlying family. The sampling `seed` controls
//! only which rows are drawn.

use super::{CatColumn, ContColumn, DatasetSchema, LabelRule, TabularDataset};
use crate::rng::{key, StreamRng};

/// Default vocabulary sizes (including the reserved 0 slot), echoing the
/// cardinalities of a census-style income table.
pub const VOCAB_SIZES: [usize; 8] = [9, 24, 5, 50, 50, 18, 2, 9];
pub const N_CONTINUOUS: usize = 2;

/// Label smoothness: labels are Bernoulli(sigmoid(z / TAU)).
const TAU: f64 = 0.4;
/// Scale of the concept shift applied to the logistic weights.
const CONCEPT_SHIFT: f64 = 0.8;
/// Scale of the mean shift applied to continuous features.
const MEAN_SHIFT: f64 = 0.5;

const TASK_KEY: u64 = 0x7AB5_11FE;

struct Task {
    vocab_sizes: Vec<usize>,
    n_cont: usize,
    /// Per column: unnormalized marginal weights at shift 0 and 1 over
    /// codes 1..vocab_size-1.
    marginals0: Vec<Vec<f64>>,
    marginals1: Vec<Vec<f64>>,
    /// Per column, per code: logistic weight and its shift delta.
    theta0: Vec<Vec<f64>>,
    dtheta: Vec<Vec<f64>>,
    /// Continuous weights, deltas, and means.
    beta0: Vec<f64>,
    dbeta: Vec<f64>,
    mu0: Vec<f64>,
    dmu: Vec<f64>,
}

impl Task {
    fn new(vocab_sizes: &[usize], n_cont: usize) -> Self {
        let mut marginals0 = Vec::new();
        let mut marginals1 = Vec::new();
        let mut theta0 = Vec::new();
        let mut dtheta = Vec::new();
        for (j, &v) in vocab_sizes.iter().enumerate() {
            let codes = v - 1;
            let mut m0 = StreamRng::new(&[TASK_KEY, 1, j as u64]);
            let mut m1 = StreamRng::new(&[TASK_KEY, 2, j as u64]);
            // Exp(1) draws give a flat-Dirichlet marginal once normalized.
            marginals0.push((0..codes).map(|_| -m0.next_unit().max(1e-12).ln()).collect());
            marginals1.push((0..codes).map(|_| -m1.next_unit().max(1e-12).ln()).collect());
            let mut t0 = StreamRng::new(&[TASK_KEY, 3, j as u64]);
            let mut dt = StreamRng::new(&[TASK_KEY, 4, j as u64]);
            theta0.push((0..codes).map(|_| t0.next_gaussian()).collect());
            dtheta.push((0..codes).map(|_| dt.next_gaussian() * CONCEPT_SHIFT).collect());
        }
        let mut b0 = StreamRng::new(&[TASK_KEY, 5]);
        let mut db = StreamRng::new(&[TASK_KEY, 6]);
        let mut mu = StreamRng::new(&[TASK_KEY, 7]);
        let mut dm = StreamRng::new(&[TASK_KEY, 8]);
        Task {
            vocab_sizes: vocab_sizes.to_vec(),
            n_cont,
            marginals0,
            marginals1,
            theta0,
            dtheta,
            beta0: (0..n_cont).map(|_| b0.next_gaussian()).collect(),
            dbeta: (0..n_cont).map(|_| db.next_gaussian() * CONCEPT_SHIFT).collect(),
            mu0: (0..n_cont).map(|_| mu.next_gaussian()).collect(),
            dmu: (0..n_cont).map(|_| dm.next_gaussian() * MEAN_SHIFT).collect(),
        }
    }

    fn marginal(&self, j: usize, shift: f64) -> Vec<f64> {
        self.marginals0[j]
            .iter()
            .zip(&self.marginals1[j])
            .map(|(&a, &b)| (1.0 - shift) * a + shift * b)
            .collect()
    }

    /// Ground-truth logit for a row of raw values, under the weights at
    /// the given shift. Codes are 1-based; `conts` are raw (unstandardized).
    fn logit(&self, cats: &[u32], conts: &[f32], shift: f64) -> f64 {
        let dims = (cats.len() + conts.len()) as f64;
        let mut z = 0.0;
        for (j, &c) in cats.iter().enumerate() {
            let i = (c as usize) - 1;
            z += self.theta0[j][i] + shift * self.dtheta[j][i];
        }
        for (k, &x) in conts.iter().enumerate() {
            let beta = self.beta0[k] + shift * self.dbeta[k];
            z += beta * (f64::from(x) - self.mu0[k]);
        }
        z / dims.sqrt()
    }
}

struct RawSynth {
    cats: Vec<u32>,
    conts: Vec<f32>,
    labels: Vec<u8>,
    n_rows: usize,
}

fn generate_raw(task: &Task, n_rows: usize, shift: f64, seed: u64) -> RawSynth {
    let n_cat = task.vocab_sizes.len();
    let marginals: Vec<Vec<f64>> = (0..n_cat).map(|j| task.marginal(j, shift)).collect();
    let mut cats = Vec::with_capacity(n_rows * n_cat);
    let mut conts = Vec::with_capacity(n_rows * task.n_cont);
    let mut labels = Vec::with_capacity(n_rows);
    let mut rng = StreamRng::new(&[seed, 0x5A17, shift.to_bits()]);
    for _ in 0..n_rows {
        let row_start = cats.len();
        for marg in marginals.iter() {
            cats.push((rng.next_weighted(marg) + 1) as u32);
        }
        let cont_start = conts.len();
        for k in 0..task.n_cont {
            let mu = task.mu0[k] + shift * task.dmu[k];
            conts.push((mu + rng.next_gaussian()) as f32);
        }
        let z = task.logit(&cats[row_start..], &conts[cont_start..], shift);
        let p = crate::tensor::sigmoid(z / TAU);
        labels.push(u8::from(rng.next_unit() < p));
    }
    RawSynth { cats, conts, labels, n_rows }
}

fn schema_from(task: &Task, raw: &RawSynth) -> DatasetSchema {
    let categorical = task
        .vocab_sizes
        .iter()
        .enumerate()
        .map(|(j, &v)| CatColumn {
            name: format!("cat{j}"),
            vocab: (1..v).map(|c| (c.to_string(), c as u32)).collect(),
        })
        .collect();
    let continuous = (0..task.n_cont)
        .map(|k| {
            let values: Vec<f64> = (0..raw.n_rows)
                .map(|r| f64::from(raw.conts[r * task.n_cont + k]))
                .collect();
            let n = values.len().max(1) as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let std = if var.sqrt() > 0.0 { var.sqrt() } else { 1.0 };
            ContColumn { name: format!("num{k}"), mean, std }
        })
        .collect();
    DatasetSchema {
        categorical,
        continuous,
        label: LabelRule { name: "label".to_string(), threshold: 0.5 },
    }
}

fn standardize(raw: &RawSynth, n_cat: usize, schema: &DatasetSchema) -> TabularDataset {
    let n_cont = schema.continuous.len();
    let conts = raw
        .conts
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = &schema.continuous[i % n_cont];
            ((f64::from(v) - c.mean) / c.std) as f32
        })
        .collect();
    TabularDataset::new(n_cat, n_cont, raw.cats.clone(), conts, raw.labels.clone())
}

/// One dataset at the given shift, standardized by its own statistics.
pub fn generate(n_rows: usize, shift: f64, seed: u64) -> (TabularDataset, DatasetSchema) {
    generate_with_config(n_rows, shift, seed, &VOCAB_SIZES, N_CONTINUOUS)
}

/// Like [`generate`] with custom dimensions (used by small tests).
pub fn generate_with_config(
    n_rows: usize,
    shift: f64,
    seed: u64,
    vocab_sizes: &[usize],
    n_cont: usize,
) -> (TabularDataset, DatasetSchema) {
    let task = Task::new(vocab_sizes, n_cont);
    let raw = generate_raw(&task, n_rows, shift, seed);
    let schema = schema_from(&task, &raw);
    let data = standardize(&raw, vocab_sizes.len(), &schema);
    (data, schema)
}

/// Upstream dataset at shift 0 plus a downstream dataset at `shift`, both
/// standardized with the upstream statistics — the same regime as fitting
/// a schema on pretraining CSVs and applying it downstream.
pub fn generate_pair(
    upstream_rows: usize,
    downstream_rows: usize,
    shift: f64,
    seed: u64,
) -> (TabularDataset, TabularDataset, DatasetSchema) {
    let task = Task::new(&VOCAB_SIZES, N_CONTINUOUS);
    let raw_up = generate_raw(&task, upstream_rows, 0.0, key(&[seed, 0xA0]));
    let raw_down = generate_raw(&task, downstream_rows, shift, key(&[seed, 0xB0]));
    let schema = schema_from(&task, &raw_up);
    let up = standardize(&raw_up, VOCAB_SIZES.len(), &schema);
    let down = standardize(&raw_down, VOCAB_SIZES.len(), &schema);
    (up, down, schema)
}

/// Writes a raw (unstandardized) synthetic CSV that round-trips through
/// the CSV loaders, plus a summary. Returns (rows, base rate).
pub fn write_csv(path: &std::path::Path, n_rows: usize, shift: f64, seed: u64) -> std::io::Result<(usize, f64)> {
    let task = Task::new(&VOCAB_SIZES, N_CONTINUOUS);
    let raw = generate_raw(&task, n_rows, shift, seed);
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..VOCAB_SIZES.len()).map(|j| format!("cat{j}")).collect();
    header.extend((0..N_CONTINUOUS).map(|k| format!("num{k}")));
    header.push("label".to_string());
    w.write_record(&header)?;
    let n_cat = VOCAB_SIZES.len();
    for r in 0..raw.n_rows {
        let mut rec: Vec<String> = raw.cats[r * n_cat..(r + 1) * n_cat]
            .iter()
            .map(|c| c.to_string())
            .collect();
        rec.extend(
            raw.conts[r * N_CONTINUOUS..(r + 1) * N_CONTINUOUS]
                .iter()
                .map(|v| format!("{v}")),
        );
        rec.push(raw.labels[r].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    let base = raw.labels.iter().map(|&l| f64::from(l)).sum::<f64>() / raw.n_rows.max(1) as f64;
    Ok((raw.n_rows, base))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_dataset() {
        let (a, sa) = generate(500, 0.0, 42);
        let (b, sb) = generate(500, 0.0, 42);
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        let (c, _) = generate(500, 0.0, 43);
        assert_ne!(a, c);
    }

    #[test]
    fn base_rate_is_moderate() {
        for shift in [0.0, 0.5, 1.0] {
            let (data, _) = generate(4_000, shift, 7);
            let rate = data.base_rate();
            assert!((0.2..=0.8).contains(&rate), "base rate {rate} at shift {shift}");
        }
    }

    #[test]
    fn full_shift_flips_at_least_ten_percent_of_optimal_decisions() {
        let task = Task::new(&VOCAB_SIZES, N_CONTINUOUS);
        let raw = generate_raw(&task, 4_000, 0.0, 99);
        let n_cat = VOCAB_SIZES.len();
        let mut changed = 0;
        for r in 0..raw.n_rows {
            let cats = &raw.cats[r * n_cat..(r + 1) * n_cat];
            let conts = &raw.conts[r * N_CONTINUOUS..(r + 1) * N_CONTINUOUS];
            let d0 = task.logit(cats, conts, 0.0) > 0.0;
            let d1 = task.logit(cats, conts, 1.0) > 0.0;
            if d0 != d1 {
                changed += 1;
            }
        }
        let frac = f64::from(changed) / raw.n_rows as f64;
        assert!(frac >= 0.10, "only {frac:.3} of decisions changed");
    }

    #[test]
    fn vocab_indices_stay_in_range() {
        let (data, schema) = generate(1_000, 1.0, 3);
        data.validate_indices(&schema.vocab_sizes()).unwrap();
        assert_eq!(schema.vocab_sizes(), VOCAB_SIZES.to_vec());
    }

    #[test]
    fn pair_standardizes_downstream_with_upstream_stats() {
        let (up, down, schema) = generate_pair(2_000, 1_000, 1.0, 5);
        assert_eq!(up.n_rows(), 2_000);
        assert_eq!(down.n_rows(), 1_000);
        // Upstream data standardized by its own stats: mean ~ 0.
        let mean_up: f64 = (0..up.n_rows())
            .map(|r| f64::from(up.example(r).conts[0]))
            .sum::<f64>()
            / up.n_rows() as f64;
        assert!(mean_up.abs() < 1e-3, "upstream mean {mean_up}");
        // Downstream at shift 1 keeps its distribution shift visible.
        let mean_down: f64 = (0..down.n_rows())
            .map(|r| f64::from(down.example(r).conts[0]))
            .sum::<f64>()
            / down.n_rows() as f64;
        let c = &schema.continuous[0];
        assert!(c.std > 0.0);
        assert!(mean_down.abs() > 1e-3, "downstream mean unexpectedly centered");
    }

    #[test]
    fn csv_round_trip_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("synth.csv");
        let (rows, base) = write_csv(&path, 300, 0.5, 11).unwrap();
        assert_eq!(rows, 300);
        assert!((0.1..=0.9).contains(&base));
        let mapping = super::super::ColumnMapping {
            categorical: (0..8).map(|j| format!("cat{j}")).collect(),
            continuous: (0..2).map(|k| format!("num{k}")).collect(),
            label: "label".to_string(),
            label_threshold: 0.5,
        };
        let (data, schema, report) = super::super::load_csv_fit(&path, &mapping).unwrap();
        assert_eq!(report.rows_loaded, 300);
        assert_eq!(data.n_rows(), 300);
        data.validate_indices(&schema.vocab_sizes()).unwrap();
    }
}
