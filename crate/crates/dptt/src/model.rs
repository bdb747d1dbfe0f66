//! Tabular transformer: column embeddings, a stack of post-norm
//! transformer blocks over the categorical tokens, and an MLP head over
//! the flattened contextual embeddings concatenated with layer-normed
//! continuous features. Binary classification through a single logit.
//!
//! Parameters are named hierarchically (`block2.ffn.w1`, `mlp0.b`, ...)
//! and carry a trainable flag; PEFT and freezing operate purely on those
//! flags plus optional per-parameter unit masks. Initialization is
//! deterministic: every tensor is filled from a stream keyed by
//! `(seed, parameter name)`, so construction order does not matter.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{GradMap, Tape, ValueId};
use crate::data::TabularDataset;
use crate::peft::PeftState;
use crate::rng::{fnv1a64, StreamRng};
use crate::tensor::Tensor;

/// Architecture plus schema-derived dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub mlp_layers: usize,
    pub mlp_units: usize,
    #[serde(default)]
    pub n_categorical: usize,
    #[serde(default)]
    pub vocab_sizes: Vec<usize>,
    #[serde(default)]
    pub n_continuous: usize,
}

impl ModelConfig {
    /// The configuration used throughout the examples and reports:
    /// embedding dim 32, 4 blocks, 8 heads, feed-forward 128 (4x),
    /// MLP of 5 hidden layers with 72 units.
    pub fn standard() -> Self {
        Self {
            embed_dim: 32,
            n_blocks: 4,
            n_heads: 8,
            ffn_hidden: 128,
            mlp_layers: 5,
            mlp_units: 72,
            n_categorical: 0,
            vocab_sizes: Vec::new(),
            n_continuous: 0,
        }
    }

    /// Fills in the schema-derived fields.
    pub fn with_schema(mut self, vocab_sizes: Vec<usize>, n_continuous: usize) -> Self {
        self.n_categorical = vocab_sizes.len();
        self.vocab_sizes = vocab_sizes;
        self.n_continuous = n_continuous;
        self
    }

    /// Width of the MLP input: flattened contextual embeddings plus the
    /// continuous features.
    pub fn mlp_input_dim(&self) -> usize {
        self.n_categorical * self.embed_dim + self.n_continuous
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (field, v) in [
            ("embed_dim", self.embed_dim),
            ("n_blocks", self.n_blocks),
            ("n_heads", self.n_heads),
            ("ffn_hidden", self.ffn_hidden),
            ("mlp_layers", self.mlp_layers),
            ("mlp_units", self.mlp_units),
            ("n_categorical", self.n_categorical),
        ] {
            if v == 0 {
                return Err(ConfigError::NonPositive { field });
            }
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(ConfigError::HeadsDivisibility {
                dim: self.embed_dim,
                heads: self.n_heads,
            });
        }
        if self.vocab_sizes.len() != self.n_categorical {
            return Err(ConfigError::VocabArity {
                got: self.vocab_sizes.len(),
                expected: self.n_categorical,
            });
        }
        if let Some(&v) = self.vocab_sizes.iter().find(|&&v| v < 2) {
            return Err(ConfigError::VocabTooSmall { size: v });
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("embed_dim {dim} is not divisible by n_heads {heads}")]
    HeadsDivisibility { dim: usize, heads: usize },
    #[error("vocab_sizes has {got} entries but n_categorical is {expected}")]
    VocabArity { got: usize, expected: usize },
    #[error("{field} must be positive")]
    NonPositive { field: &'static str },
    #[error("vocab sizes must be at least 2 (reserved index 0 plus one category), got {size}")]
    VocabTooSmall { size: usize },
}

/// Named tensor with a trainable flag.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

impl Parameter {
    fn new(name: String, tensor: Tensor) -> Self {
        Self { name, tensor, trainable: true }
    }
}

/// The model: configuration, parameters, and any applied PEFT state.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: BTreeMap<String, Parameter>,
    peft: PeftState,
}

const INIT_SALT_LINEAR: u64 = 0x11ea4;
const INIT_SALT_EMBED: u64 = 0xe3bed;

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), keyed by (seed, name).
pub(crate) fn linear_init(seed: u64, name: &str, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut rng = StreamRng::new(&[seed, fnv1a64(name.as_bytes()), INIT_SALT_LINEAR]);
    Tensor::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.next_uniform(-bound, bound) as f32)
            .collect(),
    )
}

/// Zero-mean Gaussian with the given standard deviation, keyed by (seed, name).
pub(crate) fn gaussian_init(seed: u64, name: &str, rows: usize, cols: usize, std: f64) -> Tensor {
    let mut rng = StreamRng::new(&[seed, fnv1a64(name.as_bytes()), INIT_SALT_EMBED]);
    Tensor::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| (rng.next_gaussian() * std) as f32)
            .collect(),
    )
}

impl Model {
    /// Builds a fresh model with all parameters trainable. Deterministic
    /// in `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ConfigError> {
        config.validate()?;
        let d = config.embed_dim;
        let h = config.ffn_hidden;
        let mut model = Model { config: config.clone(), params: BTreeMap::new(), peft: PeftState::default() };

        for (j, &vocab) in config.vocab_sizes.iter().enumerate() {
            let name = format!("embed.col{j}.table");
            model.insert(gaussian_init(seed, &name, vocab, d, 0.1), name);
        }
        model.insert(
            gaussian_init(seed, "embed.col_id", config.n_categorical, d, 0.1),
            "embed.col_id".to_string(),
        );

        for i in 0..config.n_blocks {
            for proj in ["wq", "wk", "wv", "wo"] {
                let w = format!("block{i}.attn.{proj}");
                model.insert(linear_init(seed, &w, d, d, d), w.clone());
                let b = format!("block{i}.attn.{}", proj.replace('w', "b"));
                model.insert(linear_init(seed, &b, 1, d, d), b.clone());
            }
            for ln in ["ln1", "ln2"] {
                let g = format!("block{i}.{ln}.gamma");
                model.insert(Tensor::filled(1, d, 1.0), g);
                let b = format!("block{i}.{ln}.beta");
                model.insert(Tensor::zeros(1, d), b);
            }
            let w1 = format!("block{i}.ffn.w1");
            model.insert(linear_init(seed, &w1, d, h, d), w1.clone());
            let b1 = format!("block{i}.ffn.b1");
            model.insert(linear_init(seed, &b1, 1, h, d), b1.clone());
            let w2 = format!("block{i}.ffn.w2");
            model.insert(linear_init(seed, &w2, h, d, h), w2.clone());
            let b2 = format!("block{i}.ffn.b2");
            model.insert(linear_init(seed, &b2, 1, d, h), b2.clone());
        }

        if config.n_continuous > 0 {
            model.insert(Tensor::filled(1, config.n_continuous, 1.0), "cont_norm.gamma".into());
            model.insert(Tensor::zeros(1, config.n_continuous), "cont_norm.beta".into());
        }

        let mut in_dim = config.mlp_input_dim();
        for l in 0..config.mlp_layers {
            let w = format!("mlp{l}.w");
            model.insert(linear_init(seed, &w, in_dim, config.mlp_units, in_dim), w.clone());
            let b = format!("mlp{l}.b");
            model.insert(linear_init(seed, &b, 1, config.mlp_units, in_dim), b.clone());
            in_dim = config.mlp_units;
        }
        model.insert(linear_init(seed, "head.w", in_dim, 1, in_dim), "head.w".into());
        model.insert(linear_init(seed, "head.b", 1, 1, in_dim), "head.b".into());

        Ok(model)
    }

    fn insert(&mut self, tensor: Tensor, name: String) {
        let prev = self.params.insert(name.clone(), Parameter::new(name, tensor));
        debug_assert!(prev.is_none(), "duplicate parameter");
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn peft(&self) -> &PeftState {
        &self.peft
    }

    pub(crate) fn peft_mut(&mut self) -> &mut PeftState {
        &mut self.peft
    }

    pub fn parameters(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub(crate) fn parameter_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.get_mut(name)
    }

    pub(crate) fn add_parameter(&mut self, name: String, tensor: Tensor, trainable: bool) {
        let mut p = Parameter::new(name.clone(), tensor);
        p.trainable = trainable;
        self.params.insert(name, p);
    }

    pub(crate) fn remove_parameter(&mut self, name: &str) -> Option<Parameter> {
        self.params.remove(name)
    }

    pub(crate) fn set_all_trainable(&mut self, flag: bool) {
        for p in self.params.values_mut() {
            p.trainable = flag;
        }
    }

    /// Restores a model from raw parts (checkpoint loading).
    pub(crate) fn from_parts(
        config: ModelConfig,
        params: BTreeMap<String, Parameter>,
        peft: PeftState,
    ) -> Self {
        Self { config, params, peft }
    }

    /// (total, trainable) element counts. A unit mask restricts the
    /// trainable tally of its parameter to the masked columns.
    pub fn count_parameters(&self) -> (usize, usize) {
        let mut total = 0;
        let mut trainable = 0;
        for p in self.params.values() {
            total += p.tensor.len();
            if p.trainable {
                trainable += match self.peft.unit_masks.get(&p.name) {
                    Some(&units) => p.tensor.rows() * units.min(p.tensor.cols()),
                    None => p.tensor.len(),
                };
            }
        }
        (total, trainable)
    }

    /// Names of parameters with any trainable coordinates.
    pub fn trainable_names(&self) -> BTreeSet<String> {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.name.clone())
            .collect()
    }

    fn p<'m>(&'m self, tape: &mut Tape<'m>, name: &str) -> ValueId {
        let param = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"));
        // Leak-free: the tape borrows name and tensor from the map entry.
        tape.param(&param.name, &param.tensor)
    }

    /// Records the forward pass for one example and returns the logit id.
    pub fn build_logit<'m>(&'m self, tape: &mut Tape<'m>, cats: &[u32], conts: &[f32]) -> ValueId {
        let cfg = &self.config;
        assert_eq!(cats.len(), cfg.n_categorical, "example has wrong categorical arity");
        assert_eq!(conts.len(), cfg.n_continuous, "example has wrong continuous arity");

        let mut token_rows = Vec::with_capacity(cfg.n_categorical);
        for (j, &idx) in cats.iter().enumerate() {
            let idx = idx as usize;
            assert!(
                idx < cfg.vocab_sizes[j],
                "out-of-vocabulary index {idx} for categorical column {j} (vocab size {})",
                cfg.vocab_sizes[j]
            );
            let table = self.p(tape, &format!("embed.col{j}.table"));
            token_rows.push(tape.gather_row(table, idx));
        }
        let gathered = tape.concat_rows(&token_rows);
        let col_id = self.p(tape, "embed.col_id");
        let mut x = tape.add(gathered, col_id);

        for i in 0..cfg.n_blocks {
            x = self.build_block(tape, i, x);
        }

        let flat = tape.reshape(x, 1, cfg.n_categorical * cfg.embed_dim);
        let features = if cfg.n_continuous > 0 {
            let cont = tape.input(Tensor::row(conts.to_vec()));
            let gamma = self.p(tape, "cont_norm.gamma");
            let beta = self.p(tape, "cont_norm.beta");
            let normed = tape.layer_norm_rows(cont, gamma, beta);
            tape.concat_cols(&[flat, normed])
        } else {
            flat
        };

        let mut h = features;
        for l in 0..cfg.mlp_layers {
            let w = self.p(tape, &format!("mlp{l}.w"));
            let b = self.p(tape, &format!("mlp{l}.b"));
            let z = tape.matmul(h, w);
            let zb = tape.add_bias(z, b);
            h = tape.relu(zb);
        }
        let hw = self.p(tape, "head.w");
        let hb = self.p(tape, "head.b");
        let z = tape.matmul(h, hw);
        tape.add_bias(z, hb)
    }

    fn build_block<'m>(&'m self, tape: &mut Tape<'m>, i: usize, x: ValueId) -> ValueId {
        let cfg = &self.config;
        let dh = cfg.head_dim();
        let inv_sqrt_dh = (1.0 / (dh as f64).sqrt()) as f32;

        let wq = self.p(tape, &format!("block{i}.attn.wq"));
        let bq = self.p(tape, &format!("block{i}.attn.bq"));
        let wk = self.p(tape, &format!("block{i}.attn.wk"));
        let bk = self.p(tape, &format!("block{i}.attn.bk"));
        let wv = self.p(tape, &format!("block{i}.attn.wv"));
        let bv = self.p(tape, &format!("block{i}.attn.bv"));
        let q0 = tape.matmul(x, wq);
        let q = tape.add_bias(q0, bq);
        let k0 = tape.matmul(x, wk);
        let k = tape.add_bias(k0, bk);
        let v0 = tape.matmul(x, wv);
        let v = tape.add_bias(v0, bv);

        let mut heads = Vec::with_capacity(cfg.n_heads);
        for hd in 0..cfg.n_heads {
            let qh = tape.slice_cols(q, hd * dh, dh);
            let kh = tape.slice_cols(k, hd * dh, dh);
            let vh = tape.slice_cols(v, hd * dh, dh);
            let kt = tape.transpose(kh);
            let raw = tape.matmul(qh, kt);
            let scaled = tape.scale(raw, inv_sqrt_dh);
            let attn = tape.softmax_rows(scaled);
            heads.push(tape.matmul(attn, vh));
        }
        let merged = tape.concat_cols(&heads);
        let wo = self.p(tape, &format!("block{i}.attn.wo"));
        let bo = self.p(tape, &format!("block{i}.attn.bo"));
        let proj = tape.matmul(merged, wo);
        let attn_out = tape.add_bias(proj, bo);

        let res1 = tape.add(x, attn_out);
        let g1 = self.p(tape, &format!("block{i}.ln1.gamma"));
        let b1n = self.p(tape, &format!("block{i}.ln1.beta"));
        let x1 = tape.layer_norm_rows(res1, g1, b1n);

        // Feed-forward, with the low-rank contribution added to each
        // matrix when LoRA is attached.
        let w1 = self.p(tape, &format!("block{i}.ffn.w1"));
        let fb1 = self.p(tape, &format!("block{i}.ffn.b1"));
        let mut pre = tape.matmul(x1, w1);
        if let Some(lora) = &self.peft.lora {
            pre = self.lora_contribution(tape, i, 1, x1, pre, lora.scaling());
        }
        let pre_b = tape.add_bias(pre, fb1);
        let act = tape.relu(pre_b);
        let w2 = self.p(tape, &format!("block{i}.ffn.w2"));
        let fb2 = self.p(tape, &format!("block{i}.ffn.b2"));
        let mut out = tape.matmul(act, w2);
        if let Some(lora) = &self.peft.lora {
            out = self.lora_contribution(tape, i, 2, act, out, lora.scaling());
        }
        let mut ffn_out = tape.add_bias(out, fb2);

        // Bottleneck adapter between the feed-forward output and the
        // residual add & norm.
        if self.peft.adapter.is_some() {
            let ag = self.p(tape, &format!("block{i}.adapter.ln.gamma"));
            let ab = self.p(tape, &format!("block{i}.adapter.ln.beta"));
            let normed = tape.layer_norm_rows(ffn_out, ag, ab);
            let dw = self.p(tape, &format!("block{i}.adapter.down.w"));
            let db = self.p(tape, &format!("block{i}.adapter.down.b"));
            let down0 = tape.matmul(normed, dw);
            let down = tape.add_bias(down0, db);
            let hidden = tape.relu(down);
            let uw = self.p(tape, &format!("block{i}.adapter.up.w"));
            let ub = self.p(tape, &format!("block{i}.adapter.up.b"));
            let up0 = tape.matmul(hidden, uw);
            let up = tape.add_bias(up0, ub);
            ffn_out = tape.add(ffn_out, up);
        }

        let res2 = tape.add(x1, ffn_out);
        let g2 = self.p(tape, &format!("block{i}.ln2.gamma"));
        let b2n = self.p(tape, &format!("block{i}.ln2.beta"));
        tape.layer_norm_rows(res2, g2, b2n)
    }

    fn lora_contribution<'m>(
        &'m self,
        tape: &mut Tape<'m>,
        block: usize,
        which: usize,
        input: ValueId,
        base: ValueId,
        scaling: f64,
    ) -> ValueId {
        let a = self.p(tape, &format!("block{block}.lora.a{which}"));
        let b = self.p(tape, &format!("block{block}.lora.b{which}"));
        let at = tape.transpose(a); // (r, in) -> (in, r)
        let bt = tape.transpose(b); // (out, r) -> (r, out)
        let low = tape.matmul(input, at);
        let delta = tape.matmul(low, bt);
        let scaled = tape.scale(delta, scaling as f32);
        tape.add(base, scaled)
    }

    /// Forward pass for one example without keeping gradients around.
    pub fn logit_one(&self, cats: &[u32], conts: &[f32]) -> f32 {
        let mut tape = Tape::new();
        let id = self.build_logit(&mut tape, cats, conts);
        tape.value(id).item()
    }

    /// Logits for a set of rows. Rows are independent, so this is the
    /// single-example forward applied per row (in parallel, collected in
    /// row order).
    pub fn forward_logits(&self, data: &TabularDataset, rows: &[usize]) -> Vec<f32> {
        rows.par_iter()
            .map(|&r| {
                let ex = data.example(r);
                self.logit_one(ex.cats, ex.conts)
            })
            .collect()
    }

    /// Tape for one example's loss.
    pub fn example_loss_tape(&self, cats: &[u32], conts: &[f32], label: f32) -> (Tape<'_>, ValueId) {
        let mut tape = Tape::new();
        let logit = self.build_logit(&mut tape, cats, conts);
        let loss = tape.sigmoid_cross_entropy(logit, label);
        (tape, loss)
    }

    /// Tape for the summed loss over several rows.
    pub fn batch_loss_tape(&self, data: &TabularDataset, rows: &[usize]) -> (Tape<'_>, ValueId) {
        let mut tape = Tape::new();
        let losses: Vec<ValueId> = rows
            .iter()
            .map(|&r| {
                let ex = data.example(r);
                let logit = self.build_logit(&mut tape, ex.cats, ex.conts);
                tape.sigmoid_cross_entropy(logit, ex.label)
            })
            .collect();
        let total = tape.sum_scalars(&losses);
        (tape, total)
    }

    /// Zeroes gradient coordinates outside unit masks, so clipping norms
    /// and updates see only the trainable sub-vector.
    pub fn mask_unit_grads(&self, grads: &mut GradMap) {
        for (name, &units) in &self.peft.unit_masks {
            if let Some(g) = grads.get_mut(name) {
                let cols = g.cols();
                if units >= cols {
                    continue;
                }
                let rows = g.rows();
                let data = g.data_mut();
                for r in 0..rows {
                    for c in units..cols {
                        data[r * cols + c] = 0.0;
                    }
                }
            }
        }
    }

    /// `theta <- theta - lr * delta` on trainable coordinates only.
    /// Masked parameters update only their masked columns.
    pub fn apply_update(&mut self, delta: &GradMap, lr: f64) {
        for (name, g) in delta {
            let mask = self.peft.unit_masks.get(name).copied();
            let Some(p) = self.params.get_mut(name) else {
                panic!("update for unknown parameter `{name}`");
            };
            if !p.trainable {
                continue;
            }
            assert_eq!(p.tensor.shape(), g.shape(), "update shape mismatch for `{name}`");
            match mask {
                None => p.tensor.sub_scaled(g, lr),
                Some(units) => {
                    let cols = p.tensor.cols();
                    let rows = p.tensor.rows();
                    let limit = units.min(cols);
                    let data = p.tensor.data_mut();
                    for r in 0..rows {
                        for c in 0..limit {
                            let i = r * cols + c;
                            data[i] = (f64::from(data[i]) - lr * f64::from(g.data()[i])) as f32;
                        }
                    }
                }
            }
        }
    }
}


/// Test-oracle forward pass in pure f64, written independently of the
/// tape. Used by gradient checks and the acceptance suite.
#[doc(hidden)]
pub mod reference {
    use super::*;

    fn get(model: &Model, name: &str, perturb: Option<(&str, usize, f64)>) -> Vec<f64> {
        let p = model.parameter(name).unwrap_or_else(|| panic!("missing {name}"));
        let mut v: Vec<f64> = p.tensor.data().iter().map(|&x| f64::from(x)).collect();
        if let Some((pname, idx, delta)) = perturb {
            if pname == name {
                v[idx] += delta;
            }
        }
        v
    }

    /// Summed loss over rows with parameter `pname[idx]` shifted by
    /// `delta`, evaluated entirely in f64.
    pub fn loss_with_perturbed(
        model: &Model,
        data: &TabularDataset,
        rows: &[usize],
        pname: &str,
        idx: usize,
        delta: f64,
    ) -> f64 {
        loss_and_relu_signs(model, data, rows, pname, idx, delta).0
    }

    /// Like [`loss_with_perturbed`], also returning the concatenated ReLU
    /// input signs across all rows.
    pub fn loss_and_relu_signs(
        model: &Model,
        data: &TabularDataset,
        rows: &[usize],
        pname: &str,
        idx: usize,
        delta: f64,
    ) -> (f64, Vec<bool>) {
        let mut signs = Vec::new();
        let loss = rows
            .iter()
            .map(|&r| {
                let ex = data.example(r);
                let logit =
                    forward_f64(model, ex.cats, ex.conts, Some((pname, idx, delta)), Some(&mut signs));
                let y = f64::from(ex.label);
                logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p()
            })
            .sum();
        (loss, signs)
    }

    /// Worst-case relative disagreement between the tape gradients and
    /// central differences of the f64 reference forward. Per parameter,
    /// coordinate errors are normalized by the larger of the analytic and
    /// numeric gradient scales, so cancellation in near-zero coordinates
    /// does not dominate the metric.
    pub fn max_relative_gradient_error(
        model: &Model,
        data: &TabularDataset,
        rows: &[usize],
        h: f64,
    ) -> f64 {
        use rayon::prelude::*;
        let wrt = model.trainable_names();
        let (tape, loss) = model.batch_loss_tape(data, rows);
        let grads = tape.grad(loss, &wrt);
        drop(tape);
        let mut worst = 0.0f64;
        for name in &wrt {
            let g = &grads[name];
            // Coordinates whose +/-h evaluations land on different sides
            // of a ReLU kink get a central difference that measures the
            // averaged slope, not the derivative; exclude them.
            let fds: Vec<Option<f64>> = (0..g.len())
                .into_par_iter()
                .map(|i| {
                    let (fp, sp) = loss_and_relu_signs(model, data, rows, name, i, h);
                    let (fm, sm) = loss_and_relu_signs(model, data, rows, name, i, -h);
                    (sp == sm).then(|| (fp - fm) / (2.0 * h))
                })
                .collect();
            let scale = g
                .data()
                .iter()
                .map(|&v| f64::from(v).abs())
                .chain(fds.iter().flatten().map(|v| v.abs()))
                .fold(0.0f64, f64::max)
                .max(1e-6);
            for (i, fd) in fds.iter().enumerate() {
                let Some(fd) = fd else { continue };
                let a = f64::from(g.data()[i]);
                worst = worst.max((a - fd).abs() / scale);
            }
        }
        worst
    }

    fn layer_norm_f64(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + crate::tensor::LAYER_NORM_EPS).sqrt();
        x.iter()
            .enumerate()
            .map(|(j, &v)| (v - mean) * inv * gamma[j] + beta[j])
            .collect()
    }

    fn matvec_rows(x: &[f64], w: &[f64], in_dim: usize, out_dim: usize) -> Vec<f64> {
        // x: [in_dim], w: row-major [in_dim, out_dim]
        debug_assert_eq!(x.len(), in_dim);
        let mut out = vec![0.0; out_dim];
        for (i, &xi) in x.iter().enumerate() {
            for j in 0..out_dim {
                out[j] += xi * w[i * out_dim + j];
            }
        }
        out
    }

    /// Independent f64 forward pass mirroring the model's architecture.
    /// When `relu_signs` is given, the sign of every ReLU input is pushed
    /// onto it (used to detect kink-straddling finite differences).
    pub fn forward_f64(
        model: &Model,
        cats: &[u32],
        conts: &[f32],
        perturb: Option<(&str, usize, f64)>,
        mut relu_signs: Option<&mut Vec<bool>>,
    ) -> f64 {
        let cfg = model.config().clone();
        let d = cfg.embed_dim;
        let dh = cfg.head_dim();

        let get = |name: &str| get(model, name, perturb);

        // tokens
        let col_id = get("embed.col_id");
        let mut tokens: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_categorical);
        for (j, &idx) in cats.iter().enumerate() {
            let table = get(&format!("embed.col{j}.table"));
            let start = idx as usize * d;
            let mut row: Vec<f64> = table[start..start + d].to_vec();
            for (t, v) in row.iter_mut().enumerate() {
                *v += col_id[j * d + t];
            }
            tokens.push(row);
        }

        for i in 0..cfg.n_blocks {
            let wq = get(&format!("block{i}.attn.wq"));
            let bq = get(&format!("block{i}.attn.bq"));
            let wk = get(&format!("block{i}.attn.wk"));
            let bk = get(&format!("block{i}.attn.bk"));
            let wv = get(&format!("block{i}.attn.wv"));
            let bv = get(&format!("block{i}.attn.bv"));
            let wo = get(&format!("block{i}.attn.wo"));
            let bo = get(&format!("block{i}.attn.bo"));

            let proj = |w: &[f64], b: &[f64], toks: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
                toks.iter()
                    .map(|t| {
                        let mut o = matvec_rows(t, w, d, d);
                        for (j, v) in o.iter_mut().enumerate() {
                            *v += b[j];
                        }
                        o
                    })
                    .collect()
            };
            let q = proj(&wq, &bq, &tokens);
            let k = proj(&wk, &bk, &tokens);
            let v = proj(&wv, &bv, &tokens);

            let n_tok = tokens.len();
            let mut merged = vec![vec![0.0f64; d]; n_tok];
            for head in 0..cfg.n_heads {
                let lo = head * dh;
                for ti in 0..n_tok {
                    // scores against all tokens
                    let mut scores: Vec<f64> = (0..n_tok)
                        .map(|tj| {
                            let dot: f64 = (0..dh).map(|c| q[ti][lo + c] * k[tj][lo + c]).sum();
                            dot / (dh as f64).sqrt()
                        })
                        .collect();
                    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                    for c in 0..dh {
                        let mut acc = 0.0;
                        for tj in 0..n_tok {
                            acc += scores[tj] / sum * v[tj][lo + c];
                        }
                        merged[ti][lo + c] = acc;
                    }
                }
            }

            let g1 = get(&format!("block{i}.ln1.gamma"));
            let b1n = get(&format!("block{i}.ln1.beta"));
            let x1: Vec<Vec<f64>> = (0..n_tok)
                .map(|ti| {
                    let mut o = matvec_rows(&merged[ti], &wo, d, d);
                    for (j, vv) in o.iter_mut().enumerate() {
                        *vv += bo[j] + tokens[ti][j];
                    }
                    layer_norm_f64(&o, &g1, &b1n)
                })
                .collect();

            let w1 = get(&format!("block{i}.ffn.w1"));
            let fb1 = get(&format!("block{i}.ffn.b1"));
            let w2 = get(&format!("block{i}.ffn.w2"));
            let fb2 = get(&format!("block{i}.ffn.b2"));
            let lora = model.peft().lora.clone();
            let adapter = model.peft().adapter.is_some();

            let g2 = get(&format!("block{i}.ln2.gamma"));
            let b2n = get(&format!("block{i}.ln2.beta"));
            let mut next_tokens = Vec::with_capacity(x1.len());
            for xr in x1.iter() {
                {
                    let mut pre = matvec_rows(xr, &w1, d, cfg.ffn_hidden);
                    if let Some(spec) = &lora {
                        let a1 = get(&format!("block{i}.lora.a1"));
                        let bb1 = get(&format!("block{i}.lora.b1"));
                        add_lora_f64(&mut pre, xr, &a1, &bb1, spec.rank, spec.scaling());
                    }
                    for (j, v) in pre.iter_mut().enumerate() {
                        *v += fb1[j];
                    }
                    if let Some(signs) = relu_signs.as_deref_mut() {
                        signs.extend(pre.iter().map(|&v| v > 0.0));
                    }
                    for v in pre.iter_mut() {
                        *v = v.max(0.0);
                    }
                    let mut out = matvec_rows(&pre, &w2, cfg.ffn_hidden, d);
                    if let Some(spec) = &lora {
                        let a2 = get(&format!("block{i}.lora.a2"));
                        let bb2 = get(&format!("block{i}.lora.b2"));
                        add_lora_f64(&mut out, &pre, &a2, &bb2, spec.rank, spec.scaling());
                    }
                    for (j, v) in out.iter_mut().enumerate() {
                        *v += fb2[j];
                    }
                    if adapter {
                        let ag = get(&format!("block{i}.adapter.ln.gamma"));
                        let ab = get(&format!("block{i}.adapter.ln.beta"));
                        let dw = get(&format!("block{i}.adapter.down.w"));
                        let db = get(&format!("block{i}.adapter.down.b"));
                        let uw = get(&format!("block{i}.adapter.up.w"));
                        let ub = get(&format!("block{i}.adapter.up.b"));
                        let m = db.len();
                        let normed = layer_norm_f64(&out, &ag, &ab);
                        let mut hid = matvec_rows(&normed, &dw, d, m);
                        for (j, v) in hid.iter_mut().enumerate() {
                            *v += db[j];
                        }
                        if let Some(signs) = relu_signs.as_deref_mut() {
                            signs.extend(hid.iter().map(|&v| v > 0.0));
                        }
                        for v in hid.iter_mut() {
                            *v = v.max(0.0);
                        }
                        let mut up = matvec_rows(&hid, &uw, m, d);
                        for (j, v) in up.iter_mut().enumerate() {
                            *v += ub[j];
                        }
                        for (j, v) in out.iter_mut().enumerate() {
                            *v += up[j];
                        }
                    }
                    let summed: Vec<f64> = out.iter().zip(xr).map(|(&o, &xv)| o + xv).collect();
                    next_tokens.push(layer_norm_f64(&summed, &g2, &b2n));
                }
            }
            tokens = next_tokens;
        }

        // flatten + continuous
        let mut features: Vec<f64> = tokens.into_iter().flatten().collect();
        if cfg.n_continuous > 0 {
            let gamma = get("cont_norm.gamma");
            let beta = get("cont_norm.beta");
            let cont: Vec<f64> = conts.iter().map(|&v| f64::from(v)).collect();
            features.extend(layer_norm_f64(&cont, &gamma, &beta));
        }

        let mut h = features;
        let mut in_dim = cfg.mlp_input_dim();
        for l in 0..cfg.mlp_layers {
            let w = get(&format!("mlp{l}.w"));
            let b = get(&format!("mlp{l}.b"));
            let mut z = matvec_rows(&h, &w, in_dim, cfg.mlp_units);
            for (j, v) in z.iter_mut().enumerate() {
                *v += b[j];
            }
            if let Some(signs) = relu_signs.as_deref_mut() {
                signs.extend(z.iter().map(|&v| v > 0.0));
            }
            for v in z.iter_mut() {
                *v = v.max(0.0);
            }
            h = z;
            in_dim = cfg.mlp_units;
        }
        let hw = get("head.w");
        let hb = get("head.b");
        let z = matvec_rows(&h, &hw, in_dim, 1);
        z[0] + hb[0]
    }

    fn add_lora_f64(out: &mut [f64], input: &[f64], a: &[f64], b: &[f64], rank: usize, scaling: f64) {
        // a: [rank, in], b: [out, rank]; out += scaling * input·aᵀ·bᵀ
        let in_dim = input.len();
        let mut low = vec![0.0f64; rank];
        for (r, l) in low.iter_mut().enumerate() {
            *l = (0..in_dim).map(|i| input[i] * a[r * in_dim + i]).sum();
        }
        for (j, o) in out.iter_mut().enumerate() {
            let contrib: f64 = (0..rank).map(|r| low[r] * b[j * rank + r]).sum();
            *o += scaling * contrib;
        }
    }
}
