//! Experiment drivers: declarative run configuration, the
//! pretrain -> freeze -> PEFT fine-tune -> evaluate pipeline, and a
//! resumable grid runner that sweeps (method, upstream budget,
//! downstream budget, seed) and emits CSV reports.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accountant::{calibrate_sigma, AccountantError, PhaseLedger};
use crate::checkpoint::{self, CheckpointError};
use crate::data::{self, synth, DataError, DatasetSchema, TabularDataset};
use crate::dp::{self, DpConfig, DpError};
use crate::model::{ConfigError, Model, ModelConfig};
use crate::peft::{self, PeftConfig, PeftError, PeftVariant};
use crate::rng::key;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ConfigError),
    #[error(transparent)]
    Peft(#[from] PeftError),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error(transparent)]
    Accountant(#[from] AccountantError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl ExperimentError {
    /// Process exit code: 2 config, 3 data, 4 infeasible budget, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Accountant(AccountantError::Infeasible { .. }) => 4,
            ExperimentError::Config(_)
            | ExperimentError::Model(_)
            | ExperimentError::Peft(_)
            | ExperimentError::Dp(_)
            | ExperimentError::Accountant(_) => 2,
            ExperimentError::Data(_) | ExperimentError::Checkpoint(_) => 3,
            ExperimentError::Io(_) => 1,
        }
    }
}

/// Architecture dimensions, as written in run files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub embed_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub mlp_layers: usize,
    pub mlp_units: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let m = ModelConfig::standard();
        Self {
            embed_dim: m.embed_dim,
            n_blocks: m.n_blocks,
            n_heads: m.n_heads,
            ffn_hidden: m.ffn_hidden,
            mlp_layers: m.mlp_layers,
            mlp_units: m.mlp_units,
        }
    }
}

impl ArchConfig {
    pub fn to_model_config(&self) -> ModelConfig {
        ModelConfig {
            embed_dim: self.embed_dim,
            n_blocks: self.n_blocks,
            n_heads: self.n_heads,
            ffn_hidden: self.ffn_hidden,
            mlp_layers: self.mlp_layers,
            mlp_units: self.mlp_units,
            n_categorical: 0,
            vocab_sizes: Vec::new(),
            n_continuous: 0,
        }
    }
}

/// PEFT selection, as written in run files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PeftSection {
    pub variant: String,
    pub lora_rank: usize,
    pub lora_alpha: Option<f64>,
    pub adapter_bottleneck: usize,
    pub tuned_units: usize,
}

impl Default for PeftSection {
    fn default() -> Self {
        Self {
            variant: "lora".to_string(),
            lora_rank: 1,
            lora_alpha: None,
            adapter_bottleneck: 4,
            tuned_units: 8,
        }
    }
}

impl PeftSection {
    pub fn to_peft_config(&self) -> Result<PeftConfig, ExperimentError> {
        self.to_peft_config_for(&self.variant)
    }

    pub fn to_peft_config_for(&self, variant: &str) -> Result<PeftConfig, ExperimentError> {
        let variant: PeftVariant = variant.parse()?;
        Ok(PeftConfig {
            variant,
            lora_rank: self.lora_rank,
            lora_alpha: self.lora_alpha,
            adapter_bottleneck: self.adapter_bottleneck,
            tuned_units: self.tuned_units,
        })
    }
}

/// One training phase, as written in run files. Noise comes either from
/// an explicit multiplier (0 = non-private) or from a target epsilon that
/// the accountant calibrates against the phase's sampling rate and step
/// count. `clip_norm = inf` disables clipping for non-private baselines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseConfig {
    pub target_epsilon: Option<f64>,
    pub noise_multiplier: Option<f64>,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub delta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self {
            target_epsilon: None,
            noise_multiplier: None,
            clip_norm: 2.0,
            batch_size: 64,
            delta: 1e-5,
            learning_rate: 0.05,
            epochs: 5,
        }
    }
}

/// Data source, as written in run files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// "synth" or "csv".
    pub source: String,
    pub pretrain_rows: usize,
    pub finetune_rows: usize,
    pub shift: f64,
    pub data_seed: u64,
    pub test_fraction: f64,
    pub pretrain_csv: Option<PathBuf>,
    pub finetune_csv: Option<PathBuf>,
    pub mapping: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: "synth".to_string(),
            pretrain_rows: 20_000,
            finetune_rows: 5_000,
            shift: 0.75,
            data_seed: 7,
            test_fraction: 0.2,
            pretrain_csv: None,
            finetune_csv: None,
            mapping: None,
        }
    }
}

/// Grid axes, as written in run files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub methods: Vec<String>,
    pub eps_pretrain: Vec<f64>,
    pub eps_finetune: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            methods: PeftVariant::all().iter().map(|v| v.label().to_string()).collect(),
            eps_pretrain: vec![0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0],
            eps_finetune: vec![0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0],
            seeds: vec![1, 2, 3],
        }
    }
}

/// Top-level run configuration; maps 1:1 onto the TOML run file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub model: ArchConfig,
    pub peft: PeftSection,
    pub pretrain: PhaseConfig,
    pub finetune: PhaseConfig,
    pub data: DataConfig,
    pub grid: GridConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ExperimentError> {
        toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn from_toml_path(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }
}

/// Loaded and split data for one experiment.
pub struct ExperimentData {
    pub pretrain: TabularDataset,
    pub fine_train: TabularDataset,
    pub fine_test: TabularDataset,
    pub schema: DatasetSchema,
}

/// Loads (or generates) the upstream and downstream datasets. The schema
/// is always fitted on the upstream data; the downstream test split is
/// fixed by `data_seed`, independent of run seeds.
pub fn load_data(cfg: &DataConfig) -> Result<ExperimentData, ExperimentError> {
    let (pretrain, fine_full, schema) = match cfg.source.as_str() {
        "synth" => synth::generate_pair(cfg.pretrain_rows, cfg.finetune_rows, cfg.shift, cfg.data_seed),
        "csv" => {
            let mapping = match &cfg.mapping {
                Some(path) => data::ColumnMapping::load_json(path)?,
                None => data::ColumnMapping::default(),
            };
            let pre_path = cfg
                .pretrain_csv
                .as_ref()
                .ok_or_else(|| ExperimentError::Config("data.pretrain_csv is required for source = \"csv\"".into()))?;
            let fine_path = cfg
                .finetune_csv
                .as_ref()
                .ok_or_else(|| ExperimentError::Config("data.finetune_csv is required for source = \"csv\"".into()))?;
            let (pre, schema, _) = data::load_csv_fit(pre_path, &mapping)?;
            let (fine, _) = data::load_csv_with(fine_path, &schema)?;
            (pre, fine, schema)
        }
        other => {
            return Err(ExperimentError::Config(format!(
                "data.source must be \"synth\" or \"csv\", got {other:?}"
            )))
        }
    };
    if pretrain.n_rows() == 0 || fine_full.n_rows() == 0 {
        return Err(ExperimentError::Data(DataError::Empty));
    }
    let (fine_train, fine_test) = data::split(&fine_full, cfg.test_fraction, key(&[cfg.data_seed, 0x7E57]));
    Ok(ExperimentData { pretrain, fine_train, fine_test, schema })
}

/// A phase with its noise multiplier resolved (calibrated if requested)
/// and its accountant ledger prepared.
pub struct ResolvedPhase {
    pub dp: DpConfig,
    pub ledger: Option<PhaseLedger>,
    pub target_epsilon: Option<f64>,
}

/// Computes steps and sampling rate from the dataset size and resolves
/// the noise multiplier.
pub fn resolve_phase(
    phase: &PhaseConfig,
    n_train: usize,
    seed: u64,
) -> Result<ResolvedPhase, ExperimentError> {
    if phase.batch_size == 0 || phase.epochs == 0 {
        return Err(ExperimentError::Config("batch_size and epochs must be positive".into()));
    }
    let steps_per_epoch = n_train / phase.batch_size;
    if steps_per_epoch == 0 {
        return Err(ExperimentError::Config(format!(
            "batch_size {} exceeds training rows {n_train}",
            phase.batch_size
        )));
    }
    let steps = steps_per_epoch * phase.epochs;
    let q = phase.batch_size as f64 / n_train as f64;
    let sigma = match (phase.noise_multiplier, phase.target_epsilon) {
        (Some(s), _) => {
            if s < 0.0 {
                return Err(ExperimentError::Config("noise_multiplier must be nonnegative".into()));
            }
            s
        }
        (None, Some(eps)) => calibrate_sigma(eps, phase.delta, q, steps)?,
        (None, None) => {
            return Err(ExperimentError::Config(
                "phase needs target_epsilon or noise_multiplier".into(),
            ))
        }
    };
    let ledger = if sigma > 0.0 { Some(PhaseLedger::new(q, sigma)?) } else { None };
    Ok(ResolvedPhase {
        dp: DpConfig {
            clip_norm: phase.clip_norm,
            noise_multiplier: sigma,
            sampling_rate: q,
            batch_size: phase.batch_size,
            delta: phase.delta,
            learning_rate: phase.learning_rate,
            steps,
            seed,
        },
        ledger,
        target_epsilon: phase.target_epsilon,
    })
}

/// Losses and privacy spend of one executed phase.
pub struct PhaseOutcome {
    pub losses: Vec<f64>,
    pub ledger: Option<PhaseLedger>,
    pub target_epsilon: Option<f64>,
}

impl PhaseOutcome {
    pub fn achieved_epsilon(&self, delta: f64) -> Option<f64> {
        self.ledger.as_ref().map(|l| l.epsilon(delta).0)
    }

    fn empty() -> Self {
        Self { losses: Vec::new(), ledger: None, target_epsilon: None }
    }
}

const PRETRAIN_SALT: u64 = 0x9E7;
const FINETUNE_SALT: u64 = 0xF1E;
const INIT_SALT: u64 = 0x141;

/// DP-pretrains a fresh model on the upstream dataset.
pub fn pretrain_model(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    seed: u64,
) -> Result<(Model, PhaseOutcome), ExperimentError> {
    let mcfg = cfg
        .model
        .to_model_config()
        .with_schema(data.schema.vocab_sizes(), data.schema.n_continuous());
    let mut model = Model::init(mcfg, key(&[seed, INIT_SALT]))?;
    let resolved = resolve_phase(&cfg.pretrain, data.pretrain.n_rows(), key(&[seed, PRETRAIN_SALT]))?;
    let rows: Vec<usize> = (0..data.pretrain.n_rows()).collect();
    let log = dp::train(&mut model, &data.pretrain, &rows, &resolved.dp)?;
    let mut ledger = resolved.ledger;
    if let Some(l) = ledger.as_mut() {
        l.record_steps(log.steps);
    }
    Ok((model, PhaseOutcome { losses: log.losses, ledger, target_epsilon: resolved.target_epsilon }))
}

/// Applies the PEFT variant to a pretrained model and DP fine-tunes it on
/// the downstream training split. `scratch` ignores the input model and
/// trains fresh; `zero_shot` skips training entirely.
pub fn finetune_model(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    base: Model,
    peft_cfg: &PeftConfig,
    seed: u64,
) -> Result<(Model, PhaseOutcome), ExperimentError> {
    let mut model = if peft_cfg.variant == PeftVariant::Scratch {
        let mcfg = cfg
            .model
            .to_model_config()
            .with_schema(data.schema.vocab_sizes(), data.schema.n_continuous());
        Model::init(mcfg, key(&[seed, INIT_SALT, 0x5C]))?
    } else {
        base
    };
    peft::apply_variant(&mut model, peft_cfg, key(&[seed, 0xFE47]))?;

    if peft_cfg.variant == PeftVariant::ZeroShot {
        return Ok((model, PhaseOutcome::empty()));
    }

    let resolved = resolve_phase(&cfg.finetune, data.fine_train.n_rows(), key(&[seed, FINETUNE_SALT]))?;
    let rows: Vec<usize> = (0..data.fine_train.n_rows()).collect();
    let log = dp::train(&mut model, &data.fine_train, &rows, &resolved.dp)?;
    let mut ledger = resolved.ledger;
    if let Some(l) = ledger.as_mut() {
        l.record_steps(log.steps);
    }
    Ok((model, PhaseOutcome { losses: log.losses, ledger, target_epsilon: resolved.target_epsilon }))
}

/// Accuracy of the sign-of-logit classifier over a dataset.
pub fn evaluate_model(model: &Model, data: &TabularDataset) -> f64 {
    let rows: Vec<usize> = (0..data.n_rows()).collect();
    let logits = model.forward_logits(data, &rows);
    let correct = logits
        .iter()
        .zip(rows.iter())
        .filter(|(&z, &r)| u8::from(z > 0.0) == data.label(r))
        .count();
    correct as f64 / data.n_rows() as f64
}

/// Accuracy of always predicting the majority class.
pub fn majority_accuracy(data: &TabularDataset) -> f64 {
    let rate = data.base_rate();
    rate.max(1.0 - rate)
}

/// One grid cell's outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub method: String,
    pub eps_pretrain: Option<f64>,
    pub eps_finetune: Option<f64>,
    pub seed: u64,
    pub accuracy: f64,
    pub trainable_params: usize,
    pub total_params: usize,
    pub achieved_eps_pretrain: Option<f64>,
    pub achieved_eps_finetune: Option<f64>,
    pub delta: f64,
    pub wall_seconds: f64,
}

fn with_phase_eps(phase: &PhaseConfig, eps: Option<f64>) -> PhaseConfig {
    PhaseConfig { target_epsilon: eps, noise_multiplier: if eps.is_some() { None } else { phase.noise_multiplier }, ..phase.clone() }
}

/// Runs one cell: pretrain (or reuse a cached pretrained model),
/// fine-tune under the method, evaluate on the fixed test split.
#[allow(clippy::too_many_arguments)]
pub fn run_cell(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    method: PeftVariant,
    eps_pretrain: Option<f64>,
    eps_finetune: Option<f64>,
    seed: u64,
    pretrained: Option<Model>,
) -> Result<(ResultRecord, Model, Option<Model>), ExperimentError> {
    let started = Instant::now();
    let mut cell_cfg = cfg.clone();
    cell_cfg.pretrain = with_phase_eps(&cfg.pretrain, eps_pretrain);
    cell_cfg.finetune = with_phase_eps(&cfg.finetune, eps_finetune);

    let needs_pretrain = method != PeftVariant::Scratch;
    let (base, pre_outcome, base_copy) = if needs_pretrain {
        let (model, outcome) = match pretrained {
            Some(m) => (m, None),
            None => {
                let (m, o) = pretrain_model(&cell_cfg, data, seed)?;
                (m, Some(o))
            }
        };
        let copy = model.clone();
        (model, outcome, Some(copy))
    } else {
        let mcfg = cell_cfg
            .model
            .to_model_config()
            .with_schema(data.schema.vocab_sizes(), data.schema.n_continuous());
        (Model::init(mcfg, key(&[seed, INIT_SALT, 0x5C]))?, None, None)
    };

    // Achieved upstream epsilon must be recomputed even when the model came
    // from the cache, so price the phase directly.
    let achieved_pre = if needs_pretrain {
        match pre_outcome {
            Some(o) => o.achieved_epsilon(cell_cfg.pretrain.delta),
            None => {
                let r = resolve_phase(&cell_cfg.pretrain, data.pretrain.n_rows(), 0)?;
                r.ledger.map(|mut l| {
                    l.record_steps(r.dp.steps);
                    l.epsilon(cell_cfg.pretrain.delta).0
                })
            }
        }
    } else {
        None
    };

    let peft_cfg = PeftConfig {
        variant: method,
        ..cell_cfg.peft.to_peft_config_for(method.label())?
    };
    let (model, fine_outcome) = finetune_model(&cell_cfg, data, base, &peft_cfg, seed)?;
    let accuracy = evaluate_model(&model, &data.fine_test);
    let (total_params, trainable_params) = model.count_parameters();

    let record = ResultRecord {
        method: method.label().to_string(),
        eps_pretrain: if needs_pretrain { eps_pretrain } else { None },
        eps_finetune: if method == PeftVariant::ZeroShot { None } else { eps_finetune },
        seed,
        accuracy,
        trainable_params,
        total_params,
        achieved_eps_pretrain: achieved_pre,
        achieved_eps_finetune: fine_outcome.achieved_epsilon(cell_cfg.finetune.delta),
        delta: cell_cfg.finetune.delta,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((record, model, base_copy))
}

fn fmt_eps(eps: Option<f64>) -> String {
    match eps {
        None => "na".to_string(),
        Some(v) => format!("{v}"),
    }
}

fn record_filename(method: &str, ep: Option<f64>, ef: Option<f64>, seed: u64) -> String {
    format!("{method}_ep{}_ef{}_s{seed}.json", fmt_eps(ep), fmt_eps(ef))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

/// Grid run summary.
pub struct GridOutcome {
    pub records: Vec<ResultRecord>,
    pub computed: usize,
    pub skipped: usize,
}

/// All cells of the configured grid. Completed cells (record files already
/// on disk) are skipped; record writes are atomic, so an interrupted run
/// resumes cleanly. Pretrained models are cached per (upstream budget,
/// seed) in memory and as checkpoints under `out_dir/pretrained/`.
pub fn run_grid(cfg: &ExperimentConfig, out_dir: &Path) -> Result<GridOutcome, ExperimentError> {
    let records_dir = out_dir.join("records");
    let pretrained_dir = out_dir.join("pretrained");
    std::fs::create_dir_all(&records_dir)?;
    std::fs::create_dir_all(&pretrained_dir)?;

    let data = load_data(&cfg.data)?;
    let methods: Vec<PeftVariant> = cfg
        .grid
        .methods
        .iter()
        .map(|m| m.parse::<PeftVariant>().map_err(ExperimentError::from))
        .collect::<Result<_, _>>()?;

    // (method, eps_pretrain, eps_finetune, seed)
    let mut cells: Vec<(PeftVariant, Option<f64>, Option<f64>, u64)> = Vec::new();
    for &method in &methods {
        match method {
            PeftVariant::ZeroShot => {
                for &ep in &cfg.grid.eps_pretrain {
                    for &seed in &cfg.grid.seeds {
                        cells.push((method, Some(ep), None, seed));
                    }
                }
            }
            PeftVariant::Scratch => {
                for &ef in &cfg.grid.eps_finetune {
                    for &seed in &cfg.grid.seeds {
                        cells.push((method, None, Some(ef), seed));
                    }
                }
            }
            _ => {
                for &ep in &cfg.grid.eps_pretrain {
                    for &ef in &cfg.grid.eps_finetune {
                        for &seed in &cfg.grid.seeds {
                            cells.push((method, Some(ep), Some(ef), seed));
                        }
                    }
                }
            }
        }
    }

    let mut cache: HashMap<(u64, u64), Model> = HashMap::new();
    let mut records = Vec::with_capacity(cells.len());
    let mut computed = 0;
    let mut skipped = 0;

    for (method, ep, ef, seed) in cells {
        let record_path = records_dir.join(record_filename(method.label(), ep, ef, seed));
        if record_path.exists() {
            let text = std::fs::read_to_string(&record_path)?;
            let record: ResultRecord = serde_json::from_str(&text)
                .map_err(|e| ExperimentError::Config(format!("corrupt record {record_path:?}: {e}")))?;
            records.push(record);
            skipped += 1;
            continue;
        }

        // Reuse a pretrained model when the cell needs one.
        let cache_key = (ep.map(f64::to_bits).unwrap_or(u64::MAX), seed);
        let pretrained = if method == PeftVariant::Scratch {
            None
        } else if let Some(m) = cache.get(&cache_key) {
            Some(m.clone())
        } else {
            let ckpt = pretrained_dir.join(format!("pre_ep{}_s{seed}.dptt", fmt_eps(ep)));
            if ckpt.exists() {
                let m = checkpoint::load(&ckpt)?;
                cache.insert(cache_key, m.clone());
                Some(m)
            } else {
                None
            }
        };
        let had_pretrained = pretrained.is_some();

        let (record, _, base) = run_cell(cfg, &data, method, ep, ef, seed, pretrained)?;

        if let (false, Some(base_model)) = (had_pretrained, base) {
            let ckpt = pretrained_dir.join(format!("pre_ep{}_s{seed}.dptt", fmt_eps(ep)));
            checkpoint::save(&base_model, &ckpt)?;
            cache.insert(cache_key, base_model);
        }

        let json = serde_json::to_vec_pretty(&record)
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        write_atomic(&record_path, &json)?;
        records.push(record);
        computed += 1;
    }

    write_reports(cfg, &records, out_dir)?;
    Ok(GridOutcome { records, computed, skipped })
}

/// Trainable/total counts per method, from a probe model on the schema.
pub fn count_table(
    cfg: &ExperimentConfig,
    vocab_sizes: Vec<usize>,
    n_continuous: usize,
) -> Result<Vec<(String, usize, usize)>, ExperimentError> {
    let mcfg = cfg.model.to_model_config().with_schema(vocab_sizes, n_continuous);
    let mut rows = Vec::new();
    for method in &cfg.grid.methods {
        let peft_cfg = cfg.peft.to_peft_config_for(method)?;
        let mut model = Model::init(mcfg.clone(), 0)?;
        peft::apply_variant(&mut model, &peft_cfg, 0)?;
        let (total, trainable) = model.count_parameters();
        rows.push((method.clone(), trainable, total));
    }
    Ok(rows)
}

fn fmt_acc_cell(values: &[f64]) -> String {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    format!("{mean:.4}±{:.4}", var.sqrt())
}

/// Writes `records.csv`, `counts.csv`, and one pivoted accuracy table per
/// method (rows: upstream budget, columns: downstream budget, cell:
/// mean±std over seeds). Regeneration from the same records is bit-stable.
pub fn write_reports(
    cfg: &ExperimentConfig,
    records: &[ResultRecord],
    out_dir: &Path,
) -> Result<(), ExperimentError> {
    std::fs::create_dir_all(out_dir)?;

    let mut sorted: Vec<&ResultRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        (&a.method, a.eps_pretrain.map(f64::to_bits), a.eps_finetune.map(f64::to_bits), a.seed).cmp(&(
            &b.method,
            b.eps_pretrain.map(f64::to_bits),
            b.eps_finetune.map(f64::to_bits),
            b.seed,
        ))
    });

    let mut w = csv::Writer::from_path(out_dir.join("records.csv")).map_err(DataError::from)?;
    w.write_record([
        "method",
        "eps_pretrain",
        "eps_finetune",
        "seed",
        "accuracy",
        "trainable_params",
        "total_params",
        "achieved_eps_pretrain",
        "achieved_eps_finetune",
        "delta",
        "wall_seconds",
    ])
    .map_err(DataError::from)?;
    for r in &sorted {
        w.write_record([
            r.method.clone(),
            fmt_eps(r.eps_pretrain),
            fmt_eps(r.eps_finetune),
            r.seed.to_string(),
            format!("{:.6}", r.accuracy),
            r.trainable_params.to_string(),
            r.total_params.to_string(),
            r.achieved_eps_pretrain.map(|v| format!("{v:.6}")).unwrap_or_default(),
            r.achieved_eps_finetune.map(|v| format!("{v:.6}")).unwrap_or_default(),
            format!("{:e}", r.delta),
            format!("{:.3}", r.wall_seconds),
        ])
        .map_err(DataError::from)?;
    }
    w.flush()?;

    // counts table from the records themselves
    let mut counts: Vec<(String, usize, usize)> = Vec::new();
    for r in &sorted {
        if !counts.iter().any(|(m, _, _)| m == &r.method) {
            counts.push((r.method.clone(), r.trainable_params, r.total_params));
        }
    }
    let mut w = csv::Writer::from_path(out_dir.join("counts.csv")).map_err(DataError::from)?;
    w.write_record(["method", "trainable_params", "total_params"]).map_err(DataError::from)?;
    for (m, t, total) in &counts {
        w.write_record([m.clone(), t.to_string(), total.to_string()]).map_err(DataError::from)?;
    }
    w.flush()?;

    // pivot per method
    for method in &cfg.grid.methods {
        let of_method: Vec<&&ResultRecord> = sorted.iter().filter(|r| &r.method == method).collect();
        if of_method.is_empty() {
            continue;
        }
        let mut eps_p: Vec<Option<f64>> = of_method.iter().map(|r| r.eps_pretrain).collect();
        eps_p.sort_by_key(|e| e.map(f64::to_bits));
        eps_p.dedup();
        let mut eps_f: Vec<Option<f64>> = of_method.iter().map(|r| r.eps_finetune).collect();
        eps_f.sort_by_key(|e| e.map(f64::to_bits));
        eps_f.dedup();

        let path = out_dir.join(format!("pivot_{method}.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(DataError::from)?;
        let mut header = vec!["eps_pretrain".to_string()];
        header.extend(eps_f.iter().map(|e| format!("ef={}", fmt_eps(*e))));
        w.write_record(&header).map_err(DataError::from)?;
        for &ep in &eps_p {
            let mut row = vec![fmt_eps(ep)];
            for &ef in &eps_f {
                let vals: Vec<f64> = of_method
                    .iter()
                    .filter(|r| {
                        r.eps_pretrain.map(f64::to_bits) == ep.map(f64::to_bits)
                            && r.eps_finetune.map(f64::to_bits) == ef.map(f64::to_bits)
                    })
                    .map(|r| r.accuracy)
                    .collect();
                row.push(if vals.is_empty() { String::new() } else { fmt_acc_cell(&vals) });
            }
            w.write_record(&row).map_err(DataError::from)?;
        }
        w.flush()?;
    }
    Ok(())
}

/// Reads a pivot report back: (eps_pretrain label, eps_finetune label) -> (mean, std).
pub fn read_pivot(path: &Path) -> Result<HashMap<(String, String), (f64, f64)>, ExperimentError> {
    let mut r = csv::Reader::from_path(path).map_err(DataError::from)?;
    let headers = r.headers().map_err(DataError::from)?.clone();
    let mut out = HashMap::new();
    for record in r.records() {
        let record = record.map_err(DataError::from)?;
        let ep = record.get(0).unwrap_or_default().to_string();
        for (i, cell) in record.iter().enumerate().skip(1) {
            if cell.is_empty() {
                continue;
            }
            let ef = headers.get(i).unwrap_or_default().trim_start_matches("ef=").to_string();
            let (mean, std) = cell
                .split_once('±')
                .ok_or_else(|| ExperimentError::Config(format!("bad pivot cell {cell:?}")))?;
            let mean: f64 = mean.parse().map_err(|_| ExperimentError::Config("bad pivot mean".into()))?;
            let std: f64 = std.parse().map_err(|_| ExperimentError::Config("bad pivot std".into()))?;
            out.insert((ep.clone(), ef), (mean, std));
        }
    }
    Ok(out)
}

/// Calibration table row for the CLI.
#[derive(Clone, Debug, Serialize)]
pub struct CalibrationRow {
    pub target_epsilon: f64,
    pub q: f64,
    pub steps: usize,
    pub sigma: f64,
    pub achieved_epsilon: f64,
    pub best_order: f64,
}

/// Calibrates sigma for each target and prices it back.
pub fn calibration_table(
    targets: &[f64],
    delta: f64,
    q: f64,
    steps: usize,
) -> Result<Vec<CalibrationRow>, ExperimentError> {
    let mut rows = Vec::with_capacity(targets.len());
    for &target in targets {
        let sigma = calibrate_sigma(target, delta, q, steps)?;
        let (achieved, order) = crate::accountant::epsilon_for(q, sigma, steps, delta)?;
        rows.push(CalibrationRow {
            target_epsilon: target,
            q,
            steps,
            sigma,
            achieved_epsilon: achieved,
            best_order: order,
        });
    }
    Ok(rows)
}

/// Artifacts produced by a standalone pretraining run.
pub struct PretrainArtifacts {
    pub checkpoint: PathBuf,
    pub schema: PathBuf,
    pub summary: PathBuf,
}

/// Pretrains per the config and writes checkpoint, schema, and a JSON
/// summary (losses, privacy spend) under `out_dir`.
pub fn cmd_pretrain(cfg: &ExperimentConfig, out_dir: &Path) -> Result<PretrainArtifacts, ExperimentError> {
    std::fs::create_dir_all(out_dir)?;
    let data = load_data(&cfg.data)?;
    let (model, outcome) = pretrain_model(cfg, &data, cfg.seed)?;
    let ckpt = out_dir.join("pretrained.dptt");
    checkpoint::save(&model, &ckpt)?;
    let schema_path = out_dir.join("schema.json");
    data.schema.save_json(&schema_path)?;
    let summary_path = out_dir.join("pretrain.json");
    let summary = serde_json::json!({
        "steps": outcome.losses.len(),
        "final_loss": outcome.losses.last(),
        "target_epsilon": outcome.target_epsilon,
        "achieved_epsilon": outcome.achieved_epsilon(cfg.pretrain.delta),
        "delta": cfg.pretrain.delta,
        "ledger": outcome.ledger,
    });
    std::fs::write(&summary_path, serde_json::to_vec_pretty(&summary).map_err(|e| ExperimentError::Config(e.to_string()))?)?;
    Ok(PretrainArtifacts { checkpoint: ckpt, schema: schema_path, summary: summary_path })
}

/// Fine-tunes a checkpoint per the config; writes the adapted checkpoint
/// and the result record under `out_dir`.
pub fn cmd_finetune(
    cfg: &ExperimentConfig,
    checkpoint_path: &Path,
    out_dir: &Path,
) -> Result<(PathBuf, ResultRecord), ExperimentError> {
    std::fs::create_dir_all(out_dir)?;
    let data = load_data(&cfg.data)?;
    let base = checkpoint::load(checkpoint_path)?;
    data.fine_train.validate_indices(&base.config().vocab_sizes).map_err(ExperimentError::Data)?;
    let method: PeftVariant = cfg.peft.variant.parse()?;
    let started = Instant::now();
    let peft_cfg = cfg.peft.to_peft_config()?;
    let (model, outcome) = finetune_model(cfg, &data, base, &peft_cfg, cfg.seed)?;
    let accuracy = evaluate_model(&model, &data.fine_test);
    let (total, trainable) = model.count_parameters();
    let record = ResultRecord {
        method: method.label().to_string(),
        eps_pretrain: cfg.pretrain.target_epsilon,
        eps_finetune: if method == PeftVariant::ZeroShot { None } else { cfg.finetune.target_epsilon },
        seed: cfg.seed,
        accuracy,
        trainable_params: trainable,
        total_params: total,
        achieved_eps_pretrain: None,
        achieved_eps_finetune: outcome.achieved_epsilon(cfg.finetune.delta),
        delta: cfg.finetune.delta,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    let ckpt = out_dir.join("finetuned.dptt");
    checkpoint::save(&model, &ckpt)?;
    let record_path = out_dir.join("result.json");
    write_atomic(
        &record_path,
        &serde_json::to_vec_pretty(&record).map_err(|e| ExperimentError::Config(e.to_string()))?,
    )?;
    Ok((ckpt, record))
}

/// Evaluates a checkpoint on the config's downstream test split.
pub fn cmd_evaluate(cfg: &ExperimentConfig, checkpoint_path: &Path) -> Result<f64, ExperimentError> {
    let data = load_data(&cfg.data)?;
    let model = checkpoint::load(checkpoint_path)?;
    data.fine_test.validate_indices(&model.config().vocab_sizes).map_err(ExperimentError::Data)?;
    Ok(evaluate_model(&model, &data.fine_test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.model = ArchConfig {
            embed_dim: 8,
            n_blocks: 1,
            n_heads: 2,
            ffn_hidden: 16,
            mlp_layers: 2,
            mlp_units: 8,
        };
        cfg.data.pretrain_rows = 256;
        cfg.data.finetune_rows = 160;
        cfg.data.shift = 0.5;
        cfg.pretrain.batch_size = 32;
        cfg.pretrain.epochs = 1;
        cfg.pretrain.noise_multiplier = Some(0.6);
        cfg.finetune.batch_size = 32;
        cfg.finetune.epochs = 1;
        cfg.finetune.noise_multiplier = Some(0.6);
        cfg
    }

    #[test]
    fn toml_round_trip_maps_onto_fields() {
        let text = r#"
            seed = 9
            [model]
            embed_dim = 16
            n_blocks = 2
            n_heads = 4
            ffn_hidden = 64
            mlp_layers = 3
            mlp_units = 24
            [peft]
            variant = "adapter"
            adapter_bottleneck = 2
            [pretrain]
            target_epsilon = 8.0
            epochs = 2
            [finetune]
            noise_multiplier = 0.0
            clip_norm = inf
            [data]
            source = "synth"
            pretrain_rows = 512
            finetune_rows = 256
            [grid]
            methods = ["lora", "adapter"]
            eps_pretrain = [8.0]
            eps_finetune = [0.5, 32.0]
            seeds = [1, 2]
        "#;
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.model.embed_dim, 16);
        assert_eq!(cfg.peft.variant, "adapter");
        assert_eq!(cfg.pretrain.target_epsilon, Some(8.0));
        assert_eq!(cfg.finetune.noise_multiplier, Some(0.0));
        assert!(cfg.finetune.clip_norm.is_infinite());
        assert_eq!(cfg.grid.methods.len(), 2);
    }

    #[test]
    fn unknown_toml_keys_are_config_errors() {
        let err = ExperimentConfig::from_toml_str("definitely_not_a_key = 1").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn zero_shot_record_equals_direct_evaluation() {
        let cfg = tiny_config();
        let data = load_data(&cfg.data).unwrap();
        let (base, _) = pretrain_model(&cfg, &data, 1).unwrap();
        let (record, model, _) =
            run_cell(&cfg, &data, PeftVariant::ZeroShot, Some(8.0), None, 1, Some(base.clone()))
                .unwrap();
        let direct = evaluate_model(&base, &data.fine_test);
        assert_eq!(record.accuracy, direct);
        assert_eq!(model.count_parameters().1, 0);
        assert_eq!(record.eps_finetune, None);
    }

    #[test]
    fn full_record_trains_everything_and_lora_matches_formula() {
        let cfg = tiny_config();
        let data = load_data(&cfg.data).unwrap();
        let (base, _) = pretrain_model(&cfg, &data, 2).unwrap();
        let (full, _, _) =
            run_cell(&cfg, &data, PeftVariant::Full, Some(8.0), Some(8.0), 2, Some(base.clone()))
                .unwrap();
        assert_eq!(full.trainable_params, full.total_params);

        let (lora, _, _) =
            run_cell(&cfg, &data, PeftVariant::Lora, Some(8.0), Some(8.0), 2, Some(base)).unwrap();
        let mcfg = cfg
            .model
            .to_model_config()
            .with_schema(data.schema.vocab_sizes(), data.schema.n_continuous());
        assert_eq!(lora.trainable_params, peft::lora_trainable_count(&mcfg, 1));
    }

    #[test]
    fn grid_runs_resume_and_reports_round_trip() {
        let mut cfg = tiny_config();
        cfg.grid.methods = vec!["lora".into(), "zero_shot".into(), "scratch".into()];
        cfg.grid.eps_pretrain = vec![8.0];
        cfg.grid.eps_finetune = vec![1.0, 8.0];
        cfg.grid.seeds = vec![1, 2];
        let dir = tempfile::tempdir().unwrap();

        let first = run_grid(&cfg, dir.path()).unwrap();
        // lora: 1*2*2 cells, zero_shot: 1*2, scratch: 2*2
        assert_eq!(first.records.len(), 4 + 2 + 4);
        assert_eq!(first.computed, 10);
        assert_eq!(first.skipped, 0);

        let second = run_grid(&cfg, dir.path()).unwrap();
        assert_eq!(second.computed, 0);
        assert_eq!(second.skipped, 10);
        assert_eq!(
            serde_json::to_string(&first.records).unwrap(),
            serde_json::to_string(&second.records).unwrap()
        );

        // pivot round trip: cells reproduce per-cell means exactly
        let pivot = read_pivot(&dir.path().join("pivot_lora.csv")).unwrap();
        for &ef in &[1.0, 8.0] {
            let vals: Vec<f64> = first
                .records
                .iter()
                .filter(|r| r.method == "lora" && r.eps_finetune == Some(ef))
                .map(|r| r.accuracy)
                .collect();
            let expected: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let (mean, _) = pivot[&("8".to_string(), format!("{ef}"))];
            assert!((mean - expected).abs() < 5e-5, "pivot cell drifted");
        }

        // achieved epsilon never exceeds target
        for r in &first.records {
            if let (Some(t), Some(a)) = (r.eps_pretrain, r.achieved_eps_pretrain) {
                assert!(a <= t + 1e-9, "{}: achieved {a} > target {t}", r.method);
            }
            if let (Some(t), Some(a)) = (r.eps_finetune, r.achieved_eps_finetune) {
                assert!(a <= t + 1e-9, "{}: achieved {a} > target {t}", r.method);
            }
        }
    }

    #[test]
    fn grid_is_deterministic_across_output_dirs() {
        let mut cfg = tiny_config();
        cfg.grid.methods = vec!["adapter".into()];
        cfg.grid.eps_pretrain = vec![4.0];
        cfg.grid.eps_finetune = vec![4.0];
        cfg.grid.seeds = vec![5];
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let r1 = run_grid(&cfg, d1.path()).unwrap();
        let r2 = run_grid(&cfg, d2.path()).unwrap();
        assert_eq!(r1.records[0].accuracy, r2.records[0].accuracy);
        // checkpoints bit-identical
        let c1 = std::fs::read(d1.path().join("pretrained/pre_ep4_s5.dptt")).unwrap();
        let c2 = std::fs::read(d2.path().join("pretrained/pre_ep4_s5.dptt")).unwrap();
        assert_eq!(c1, c2);
        // pivot reports bit-identical
        let p1 = std::fs::read(d1.path().join("pivot_adapter.csv")).unwrap();
        let p2 = std::fs::read(d2.path().join("pivot_adapter.csv")).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn calibration_table_prices_back_within_one_percent() {
        let rows = calibration_table(&[0.5, 2.0, 8.0], 1e-5, 0.001, 1_000).unwrap();
        for row in rows {
            assert!(row.achieved_epsilon <= row.target_epsilon);
            assert!(row.achieved_epsilon >= 0.99 * row.target_epsilon);
        }
    }

    #[test]
    fn pretrain_loss_decreases_at_loose_budget() {
        let mut cfg = tiny_config();
        cfg.pretrain.noise_multiplier = None;
        cfg.pretrain.target_epsilon = Some(32.0);
        cfg.pretrain.epochs = 4;
        cfg.pretrain.learning_rate = 0.15;
        let data = load_data(&cfg.data).unwrap();
        let (_, outcome) = pretrain_model(&cfg, &data, 3).unwrap();
        let n = outcome.losses.len();
        let first: f64 = outcome.losses[..4].iter().sum::<f64>() / 4.0;
        let last: f64 = outcome.losses[n - 4..].iter().sum::<f64>() / 4.0;
        assert!(last < first, "loss did not decrease: {first:.4} -> {last:.4}");
        let achieved = outcome.achieved_epsilon(cfg.pretrain.delta).unwrap();
        assert!(achieved <= 32.0);
    }
}
