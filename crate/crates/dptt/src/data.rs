//! Tabular data ingestion: schema fitting, CSV loading, splits, and the
//! synthetic shifted-dataset generator used for desk-scale experiments.
//!
//! Vocabularies and normalization statistics are always fitted on the
//! upstream (pretraining) data and reused verbatim downstream. Index 0 of
//! every categorical column is reserved for values never seen upstream.

pub mod synth;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::StreamRng;

/// One categorical column: raw code -> index (1-based; 0 is reserved for
/// unknown codes).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatColumn {
    pub name: String,
    pub vocab: BTreeMap<String, u32>,
}

impl CatColumn {
    /// Table size including the reserved unknown slot.
    pub fn vocab_size(&self) -> usize {
        self.vocab.len() + 1
    }

    pub fn index_of(&self, raw: &str) -> u32 {
        self.vocab.get(raw).copied().unwrap_or(0)
    }
}

/// One continuous column with its upstream standardization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContColumn {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

/// Binary label: `value > threshold`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRule {
    pub name: String,
    pub threshold: f64,
}

/// Column types, vocabularies and normalization statistics, all fitted on
/// the pretraining split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub categorical: Vec<CatColumn>,
    pub continuous: Vec<ContColumn>,
    pub label: LabelRule,
}

impl DatasetSchema {
    pub fn vocab_sizes(&self) -> Vec<usize> {
        self.categorical.iter().map(CatColumn::vocab_size).collect()
    }

    pub fn n_continuous(&self) -> usize {
        self.continuous.len()
    }

    pub fn save_json(&self, path: &Path) -> Result<(), DataError> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(file, self).map_err(|e| DataError::SchemaJson(e.to_string()))
    }

    pub fn load_json(path: &Path) -> Result<Self, DataError> {
        let file = std::fs::File::open(path)?;
        serde_json::from_reader(file).map_err(|e| DataError::SchemaJson(e.to_string()))
    }
}

/// Indexed, standardized rows ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularDataset {
    n_rows: usize,
    n_cat: usize,
    n_cont: usize,
    cats: Vec<u32>,
    conts: Vec<f32>,
    labels: Vec<u8>,
}

/// Borrowed view of one example.
#[derive(Clone, Copy, Debug)]
pub struct ExampleView<'a> {
    pub cats: &'a [u32],
    pub conts: &'a [f32],
    pub label: f32,
}

impl TabularDataset {
    pub fn new(n_cat: usize, n_cont: usize, cats: Vec<u32>, conts: Vec<f32>, labels: Vec<u8>) -> Self {
        let n_rows = labels.len();
        assert_eq!(cats.len(), n_rows * n_cat, "categorical matrix size mismatch");
        assert_eq!(conts.len(), n_rows * n_cont, "continuous matrix size mismatch");
        Self { n_rows, n_cat, n_cont, cats, conts, labels }
    }

    pub fn empty(n_cat: usize, n_cont: usize) -> Self {
        Self::new(n_cat, n_cont, Vec::new(), Vec::new(), Vec::new())
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_categorical(&self) -> usize {
        self.n_cat
    }

    pub fn n_continuous(&self) -> usize {
        self.n_cont
    }

    pub fn example(&self, row: usize) -> ExampleView<'_> {
        ExampleView {
            cats: &self.cats[row * self.n_cat..(row + 1) * self.n_cat],
            conts: &self.conts[row * self.n_cont..(row + 1) * self.n_cont],
            label: f32::from(self.labels[row]),
        }
    }

    pub fn label(&self, row: usize) -> u8 {
        self.labels[row]
    }

    /// Fraction of positive labels.
    pub fn base_rate(&self) -> f64 {
        if self.n_rows == 0 {
            return 0.0;
        }
        self.labels.iter().map(|&l| f64::from(l)).sum::<f64>() / self.n_rows as f64
    }

    /// New dataset containing the given rows, in order.
    pub fn select(&self, rows: &[usize]) -> TabularDataset {
        let mut cats = Vec::with_capacity(rows.len() * self.n_cat);
        let mut conts = Vec::with_capacity(rows.len() * self.n_cont);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            cats.extend_from_slice(&self.cats[r * self.n_cat..(r + 1) * self.n_cat]);
            conts.extend_from_slice(&self.conts[r * self.n_cont..(r + 1) * self.n_cont]);
            labels.push(self.labels[r]);
        }
        TabularDataset::new(self.n_cat, self.n_cont, cats, conts, labels)
    }

    /// Checks every categorical index against the given vocabulary sizes.
    pub fn validate_indices(&self, vocab_sizes: &[usize]) -> Result<(), DataError> {
        if vocab_sizes.len() != self.n_cat {
            return Err(DataError::SchemaMismatch {
                detail: format!(
                    "dataset has {} categorical columns, schema has {}",
                    self.n_cat,
                    vocab_sizes.len()
                ),
            });
        }
        for r in 0..self.n_rows {
            let row = &self.cats[r * self.n_cat..(r + 1) * self.n_cat];
            for (j, &idx) in row.iter().enumerate() {
                if idx as usize >= vocab_sizes[j] {
                    return Err(DataError::SchemaMismatch {
                        detail: format!(
                            "row {r} column {j}: index {idx} >= vocab size {}",
                            vocab_sizes[j]
                        ),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Ingestion accounting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub rows_read: usize,
    pub rows_loaded: usize,
    pub rows_dropped: usize,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("column `{name}` not found in CSV header")]
    MissingColumn { name: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("schema json: {0}")]
    SchemaJson(String),
    #[error("mapping json: {0}")]
    MappingJson(String),
    #[error("dataset does not match schema: {detail}")]
    SchemaMismatch { detail: String },
    #[error("dataset is empty")]
    Empty,
}

/// Maps schema roles onto CSV header names. The default targets the
/// ACS income extract: 8 categorical codes, age and weekly hours, and a
/// dollar income threshold of 50,000.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnMapping {
    pub categorical: Vec<String>,
    pub continuous: Vec<String>,
    pub label: String,
    pub label_threshold: f64,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        Self {
            categorical: ["COW", "SCHL", "MAR", "OCCP", "POBP", "RELP", "SEX", "RAC1P"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            continuous: vec!["AGEP".to_string(), "WKHP".to_string()],
            label: "PINCP".to_string(),
            label_threshold: 50_000.0,
        }
    }
}

impl ColumnMapping {
    pub fn load_json(path: &Path) -> Result<Self, DataError> {
        let file = std::fs::File::open(path)?;
        serde_json::from_reader(file).map_err(|e| DataError::MappingJson(e.to_string()))
    }
}

/// Reference vocabulary sizes for the ACS income schema, used for
/// parameter-count reports when no data is loaded. Each size spans the
/// raw code space of the column's data dictionary, shifted by one so
/// index 0 stays reserved: size = max dictionary code + 2.
pub fn acs_reference_vocab_sizes() -> Vec<usize> {
    // COW 1..9, SCHL 1..24, MAR 1..5, OCCP 10..9920, POBP 1..554,
    // RELP 0..17, SEX 1..2, RAC1P 1..9.
    vec![11, 26, 7, 9922, 556, 19, 4, 11]
}

struct RawRows {
    cats: Vec<Vec<String>>,
    conts: Vec<Vec<f64>>,
    labels: Vec<u8>,
    report: LoadReport,
}

fn read_raw(path: &Path, mapping: &ColumnMapping) -> Result<RawRows, DataError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| -> Result<usize, DataError> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DataError::MissingColumn { name: name.to_string() })
    };
    let cat_idx: Vec<usize> = mapping
        .categorical
        .iter()
        .map(|n| find(n))
        .collect::<Result<_, _>>()?;
    let cont_idx: Vec<usize> = mapping
        .continuous
        .iter()
        .map(|n| find(n))
        .collect::<Result<_, _>>()?;
    let label_idx = find(&mapping.label)?;

    let mut raw = RawRows {
        cats: Vec::new(),
        conts: Vec::new(),
        labels: Vec::new(),
        report: LoadReport::default(),
    };
    for record in reader.records() {
        let record = record?;
        raw.report.rows_read += 1;
        let mut cats = Vec::with_capacity(cat_idx.len());
        let mut conts = Vec::with_capacity(cont_idx.len());
        let mut ok = true;
        for &i in &cat_idx {
            match record.get(i).map(str::trim) {
                Some(v) if !v.is_empty() && v != "NA" => cats.push(v.to_string()),
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            for &i in &cont_idx {
                match record.get(i).and_then(|v| v.trim().parse::<f64>().ok()) {
                    Some(v) if v.is_finite() => conts.push(v),
                    _ => {
                        ok = false;
                        break;
                    }
                }
            }
        }
        let label = record
            .get(label_idx)
            .and_then(|v| v.trim().parse::<f64>().ok())
            .filter(|v| v.is_finite());
        match (ok, label) {
            (true, Some(value)) => {
                raw.cats.push(cats);
                raw.conts.push(conts);
                raw.labels.push(u8::from(value > mapping.label_threshold));
                raw.report.rows_loaded += 1;
            }
            _ => raw.report.rows_dropped += 1,
        }
    }
    Ok(raw)
}

fn index_rows(raw: &RawRows, schema: &DatasetSchema) -> TabularDataset {
    let n_cat = schema.categorical.len();
    let n_cont = schema.continuous.len();
    let mut cats = Vec::with_capacity(raw.labels.len() * n_cat);
    let mut conts = Vec::with_capacity(raw.labels.len() * n_cont);
    for row in &raw.cats {
        for (j, v) in row.iter().enumerate() {
            cats.push(schema.categorical[j].index_of(v));
        }
    }
    for row in &raw.conts {
        for (k, &v) in row.iter().enumerate() {
            let c = &schema.continuous[k];
            conts.push(((v - c.mean) / c.std) as f32);
        }
    }
    TabularDataset::new(n_cat, n_cont, cats, conts, raw.labels.clone())
}

/// Loads a CSV and fits a fresh schema on it: vocabularies from the
/// observed codes (sorted, indices from 1), means and stds from the
/// observed values. An empty file yields an empty dataset and a zero-row
/// report, not an error.
pub fn load_csv_fit(
    path: &Path,
    mapping: &ColumnMapping,
) -> Result<(TabularDataset, DatasetSchema, LoadReport), DataError> {
    let raw = read_raw(path, mapping)?;

    let mut categorical = Vec::with_capacity(mapping.categorical.len());
    for (j, name) in mapping.categorical.iter().enumerate() {
        let mut distinct: Vec<&str> = raw.cats.iter().map(|row| row[j].as_str()).collect();
        distinct.sort_unstable();
        distinct.dedup();
        let vocab: BTreeMap<String, u32> = distinct
            .into_iter()
            .enumerate()
            .map(|(i, v)| (v.to_string(), (i + 1) as u32))
            .collect();
        categorical.push(CatColumn { name: name.clone(), vocab });
    }

    let mut continuous = Vec::with_capacity(mapping.continuous.len());
    for (k, name) in mapping.continuous.iter().enumerate() {
        let values: Vec<f64> = raw.conts.iter().map(|row| row[k]).collect();
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = if var.sqrt() > 0.0 { var.sqrt() } else { 1.0 };
        continuous.push(ContColumn { name: name.clone(), mean, std });
    }

    let schema = DatasetSchema {
        categorical,
        continuous,
        label: LabelRule { name: mapping.label.clone(), threshold: mapping.label_threshold },
    };
    let data = index_rows(&raw, &schema);
    Ok((data, schema, raw.report))
}

/// Loads a CSV under an existing schema. Vocabularies are not mutated;
/// unseen codes map to the reserved index 0, and standardization uses the
/// schema's (upstream) statistics.
pub fn load_csv_with(
    path: &Path,
    schema: &DatasetSchema,
) -> Result<(TabularDataset, LoadReport), DataError> {
    let mapping = ColumnMapping {
        categorical: schema.categorical.iter().map(|c| c.name.clone()).collect(),
        continuous: schema.continuous.iter().map(|c| c.name.clone()).collect(),
        label: schema.label.name.clone(),
        label_threshold: schema.label.threshold,
    };
    let raw = read_raw(path, &mapping)?;
    Ok((index_rows(&raw, schema), raw.report))
}

/// Seeded disjoint split; the test side takes `ceil(n * test_fraction)`
/// rows of a shuffled order.
pub fn split(
    data: &TabularDataset,
    test_fraction: f64,
    seed: u64,
) -> (TabularDataset, TabularDataset) {
    assert!((0.0..=1.0).contains(&test_fraction), "test_fraction out of range");
    let n = data.n_rows();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = StreamRng::new(&[seed, 0x5911f]);
    rng.shuffle(&mut order);
    let n_test = (n as f64 * test_fraction).ceil() as usize;
    let test = data.select(&order[..n_test]);
    let train = data.select(&order[n_test..]);
    (train, test)
}

/// JSON summary of an ingested dataset.
pub fn summary(data: &TabularDataset, schema: &DatasetSchema, report: &LoadReport) -> serde_json::Value {
    serde_json::json!({
        "rows": data.n_rows(),
        "rows_read": report.rows_read,
        "rows_dropped": report.rows_dropped,
        "vocab_sizes": schema.vocab_sizes(),
        "label_base_rate": data.base_rate(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    fn tiny_mapping() -> ColumnMapping {
        ColumnMapping {
            categorical: vec!["job".into(), "edu".into()],
            continuous: vec!["age".into()],
            label: "income".into(),
            label_threshold: 50_000.0,
        }
    }

    #[test]
    fn fit_builds_vocab_and_standardizes() {
        let f = write_csv(
            "job,edu,age,income\n\
             a,x,20,60000\n\
             b,x,40,40000\n\
             a,y,60,70000\n",
        );
        let (data, schema, report) = load_csv_fit(f.path(), &tiny_mapping()).unwrap();
        assert_eq!(report.rows_loaded, 3);
        assert_eq!(report.rows_dropped, 0);
        assert_eq!(schema.vocab_sizes(), vec![3, 3]); // 2 codes + reserved, 2 codes + reserved
        assert_eq!(data.n_rows(), 3);
        assert_eq!(data.example(0).cats, &[1, 1]); // "a", "x"
        assert_eq!(data.example(1).cats, &[2, 1]); // "b", "x"
        assert_eq!(data.label(0), 1);
        assert_eq!(data.label(1), 0);
        // age standardized with fitted stats: mean 40, population std
        let std = ((400.0 + 0.0 + 400.0) / 3.0f64).sqrt();
        assert!((f64::from(data.example(0).conts[0]) - (20.0 - 40.0) / std).abs() < 1e-6);
    }

    #[test]
    fn missing_column_is_named() {
        let f = write_csv("job,age,income\na,20,60000\n");
        let err = load_csv_fit(f.path(), &tiny_mapping()).unwrap_err();
        match err {
            DataError::MissingColumn { name } => assert_eq!(name, "edu"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn unparseable_rows_are_dropped_and_counted() {
        let f = write_csv(
            "job,edu,age,income\n\
             a,x,20,60000\n\
             b,x,notanumber,40000\n\
             ,y,30,70000\n\
             c,y,50,\n\
             d,z,35,80000\n",
        );
        let (data, _, report) = load_csv_fit(f.path(), &tiny_mapping()).unwrap();
        assert_eq!(report.rows_read, 5);
        assert_eq!(report.rows_loaded, 2);
        assert_eq!(report.rows_dropped, 3);
        assert_eq!(data.n_rows(), 2);
    }

    #[test]
    fn empty_file_yields_empty_dataset() {
        let f = write_csv("job,edu,age,income\n");
        let (data, schema, report) = load_csv_fit(f.path(), &tiny_mapping()).unwrap();
        assert_eq!(data.n_rows(), 0);
        assert_eq!(report.rows_read, 0);
        assert_eq!(schema.vocab_sizes(), vec![1, 1]);
    }

    #[test]
    fn apply_maps_unseen_codes_to_reserved_zero_and_keeps_vocab() {
        let fit = write_csv("job,edu,age,income\na,x,20,60000\nb,y,40,40000\n");
        let (_, schema, _) = load_csv_fit(fit.path(), &tiny_mapping()).unwrap();
        let before = schema.clone();

        let downstream = write_csv("job,edu,age,income\nZZ,x,30,60000\na,QQ,50,10000\n");
        let (data, report) = load_csv_with(downstream.path(), &schema).unwrap();
        assert_eq!(report.rows_loaded, 2);
        assert_eq!(data.example(0).cats, &[0, 1]); // ZZ unseen -> 0
        assert_eq!(data.example(1).cats, &[1, 0]); // QQ unseen -> 0
        assert_eq!(schema, before, "downstream ingestion must not mutate the schema");
        // standardization uses upstream stats (mean 30, std 10)
        assert!((f64::from(data.example(0).conts[0]) - 0.0).abs() < 1e-6);
        assert!((f64::from(data.example(1).conts[0]) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn split_sizes_use_ceil_on_test() {
        let n = 35_022;
        let data = TabularDataset::new(1, 0, vec![1; n], vec![], vec![0; n]);
        let (train, test) = split(&data, 0.2, 9);
        assert_eq!(test.n_rows(), 7_005);
        assert_eq!(train.n_rows(), 28_017);
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let n = 100;
        let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let cats: Vec<u32> = (0..n).map(|i| i as u32).collect();
        let data = TabularDataset::new(1, 0, cats, vec![], labels);
        let (tr1, te1) = split(&data, 0.25, 4);
        let (tr2, te2) = split(&data, 0.25, 4);
        assert_eq!(tr1, tr2);
        assert_eq!(te1, te2);
        let mut seen: Vec<u32> = Vec::new();
        for r in 0..tr1.n_rows() {
            seen.push(tr1.example(r).cats[0]);
        }
        for r in 0..te1.n_rows() {
            seen.push(te1.example(r).cats[0]);
        }
        seen.sort_unstable();
        assert_eq!(seen, (0..n as u32).collect::<Vec<_>>());
    }

    #[test]
    fn zero_fraction_gives_empty_test() {
        let data = TabularDataset::new(1, 0, vec![1, 1, 1], vec![], vec![0, 1, 0]);
        let (train, test) = split(&data, 0.0, 1);
        assert_eq!(test.n_rows(), 0);
        assert_eq!(train.n_rows(), 3);
    }

    #[test]
    fn acs_reference_sizes_sum() {
        let v = acs_reference_vocab_sizes();
        assert_eq!(v.len(), 8);
        assert_eq!(v.iter().sum::<usize>(), 10_556);
    }
}
