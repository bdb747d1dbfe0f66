//! Parameter-efficient fine-tuning on a frozen backbone.
//!
//! Four families are supported, all operating purely on parameter flags
//! and injected tensors:
//!
//! * **LoRA** — trainable low-rank factor pairs added to both feed-forward
//!   matrices of every block; zero-initialized so training starts at the
//!   pretrained function, mergeable back into the base weights.
//! * **Adapter** — a bottleneck module (layer-norm, down-projection, ReLU,
//!   up-projection, residual skip) inserted between the feed-forward
//!   output and the residual add & norm; near-identity at init.
//! * **Deep / Shallow unit tuning** — unfreezes the incoming weights and
//!   bias of the first `tuned_units` units of every MLP hidden layer
//!   (deep) or only the first layer (shallow).
//! * **Baselines** — full tuning, training from scratch, zero-shot
//!   evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{gaussian_init, linear_init, Model, ModelConfig};
use crate::tensor::{self, Tensor};

/// Fine-tuning variant selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeftVariant {
    Full,
    Scratch,
    Lora,
    Adapter,
    Deep,
    Shallow,
    ZeroShot,
}

impl PeftVariant {
    pub fn all() -> [PeftVariant; 7] {
        [
            PeftVariant::Full,
            PeftVariant::Scratch,
            PeftVariant::Lora,
            PeftVariant::Adapter,
            PeftVariant::Deep,
            PeftVariant::Shallow,
            PeftVariant::ZeroShot,
        ]
    }

    pub fn label(&self) -> &'static str {
        match self {
            PeftVariant::Full => "full",
            PeftVariant::Scratch => "scratch",
            PeftVariant::Lora => "lora",
            PeftVariant::Adapter => "adapter",
            PeftVariant::Deep => "deep",
            PeftVariant::Shallow => "shallow",
            PeftVariant::ZeroShot => "zero_shot",
        }
    }
}

impl fmt::Display for PeftVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for PeftVariant {
    type Err = PeftError;

    fn from_str(s: &str) -> Result<Self, PeftError> {
        match s {
            "full" => Ok(PeftVariant::Full),
            "scratch" => Ok(PeftVariant::Scratch),
            "lora" => Ok(PeftVariant::Lora),
            "adapter" => Ok(PeftVariant::Adapter),
            "deep" => Ok(PeftVariant::Deep),
            "shallow" => Ok(PeftVariant::Shallow),
            "zero_shot" | "zero-shot" => Ok(PeftVariant::ZeroShot),
            other => Err(PeftError::UnknownVariant { name: other.to_string() }),
        }
    }
}

/// Hyperparameters for the fine-tuning variants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeftConfig {
    pub variant: PeftVariant,
    /// LoRA rank r.
    pub lora_rank: usize,
    /// LoRA scale alpha; defaults to r, so the scaling alpha/r is 1.
    pub lora_alpha: Option<f64>,
    /// Adapter bottleneck width m.
    pub adapter_bottleneck: usize,
    /// Units unfrozen per tuned MLP layer.
    pub tuned_units: usize,
}

impl PeftConfig {
    pub fn new(variant: PeftVariant) -> Self {
        Self {
            variant,
            lora_rank: 1,
            lora_alpha: None,
            adapter_bottleneck: 4,
            tuned_units: 8,
        }
    }

    pub fn lora_alpha_value(&self) -> f64 {
        self.lora_alpha.unwrap_or(self.lora_rank as f64)
    }
}

/// LoRA hyperparameters attached to a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
}

impl LoraSpec {
    /// Multiplier applied to the low-rank product: alpha / r.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Adapter hyperparameters attached to a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub bottleneck: usize,
}

/// PEFT state carried by a model and persisted in checkpoints: which
/// variant was applied, injected-module hyperparameters, and unit masks
/// (parameter name -> number of leading trainable output units).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PeftState {
    pub variant: Option<PeftVariant>,
    pub lora: Option<LoraSpec>,
    pub adapter: Option<AdapterSpec>,
    pub unit_masks: BTreeMap<String, usize>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PeftError {
    #[error("unknown fine-tuning variant `{name}`")]
    UnknownVariant { name: String },
    #[error("lora rank {rank} is outside [1, min(embed_dim, ffn_hidden) = {max}]")]
    RankOutOfRange { rank: usize, max: usize },
    #[error("adapter bottleneck {m} is outside [1, embed_dim = {d}]")]
    BottleneckOutOfRange { m: usize, d: usize },
    #[error("tuned_units {units} is outside [1, layer width {width}]")]
    UnitsOutOfRange { units: usize, width: usize },
    #[error("backbone must be frozen before applying {what}")]
    BackboneNotFrozen { what: &'static str },
    #[error("{what} already applied to this model")]
    AlreadyApplied { what: &'static str },
    #[error("no lora adapters present to merge")]
    NothingToMerge,
}

/// Marks every existing parameter non-trainable and clears unit masks.
/// Idempotent; does not change any value the forward pass sees.
pub fn freeze_backbone(model: &mut Model) {
    model.set_all_trainable(false);
    model.peft_mut().unit_masks.clear();
}

fn ensure_frozen(model: &Model, what: &'static str) -> Result<(), PeftError> {
    if model.parameters().any(|p| p.trainable) {
        return Err(PeftError::BackboneNotFrozen { what });
    }
    Ok(())
}

/// Injects rank-`r` factor pairs on both feed-forward matrices of every
/// block. `A` (r x in) is randomly initialized, `B` (out x r) is zero, so
/// the model function is unchanged until training moves `B`.
pub fn apply_lora(model: &mut Model, cfg: &PeftConfig, seed: u64) -> Result<(), PeftError> {
    ensure_frozen(model, "lora")?;
    if model.peft().lora.is_some() {
        return Err(PeftError::AlreadyApplied { what: "lora" });
    }
    let d = model.config().embed_dim;
    let h = model.config().ffn_hidden;
    let rank = cfg.lora_rank;
    let max = d.min(h);
    if rank == 0 || rank > max {
        return Err(PeftError::RankOutOfRange { rank, max });
    }

    for i in 0..model.config().n_blocks {
        let a1 = format!("block{i}.lora.a1");
        model.add_parameter(a1.clone(), linear_init(seed, &a1, rank, d, d), true);
        let b1 = format!("block{i}.lora.b1");
        model.add_parameter(b1, Tensor::zeros(h, rank), true);
        let a2 = format!("block{i}.lora.a2");
        model.add_parameter(a2.clone(), linear_init(seed, &a2, rank, h, h), true);
        let b2 = format!("block{i}.lora.b2");
        model.add_parameter(b2, Tensor::zeros(d, rank), true);
    }
    let state = model.peft_mut();
    state.lora = Some(LoraSpec { rank, alpha: cfg.lora_alpha_value() });
    state.variant = Some(PeftVariant::Lora);
    Ok(())
}

/// Folds `scaling * AᵀBᵀ` into each base feed-forward matrix and removes
/// the factor tensors. The merged model computes the same function.
pub fn merge_lora(model: &mut Model) -> Result<(), PeftError> {
    let spec = model.peft().lora.clone().ok_or(PeftError::NothingToMerge)?;
    let scaling = spec.scaling();
    for i in 0..model.config().n_blocks {
        for which in 1..=2 {
            let a = model
                .remove_parameter(&format!("block{i}.lora.a{which}"))
                .expect("lora tensor missing");
            let b = model
                .remove_parameter(&format!("block{i}.lora.b{which}"))
                .expect("lora tensor missing");
            // delta (in x out) = aᵀ (in x r) · bᵀ (r x out)
            let delta = tensor::matmul(&tensor::transpose(&a.tensor), &tensor::transpose(&b.tensor));
            let w = model
                .parameter_mut(&format!("block{i}.ffn.w{which}"))
                .expect("ffn weight missing");
            w.tensor.sub_scaled(&delta, -scaling);
        }
    }
    model.peft_mut().lora = None;
    Ok(())
}

/// Inserts a trainable bottleneck (layer-norm, d->m, ReLU, m->d, residual
/// skip) after the feed-forward output of every block. Projection weights
/// start at N(0, 1e-3), biases at zero, so the insertion is near-identity.
pub fn apply_adapter(model: &mut Model, cfg: &PeftConfig, seed: u64) -> Result<(), PeftError> {
    ensure_frozen(model, "adapter")?;
    if model.peft().adapter.is_some() {
        return Err(PeftError::AlreadyApplied { what: "adapter" });
    }
    let d = model.config().embed_dim;
    let m = cfg.adapter_bottleneck;
    if m == 0 || m > d {
        return Err(PeftError::BottleneckOutOfRange { m, d });
    }

    for i in 0..model.config().n_blocks {
        model.add_parameter(format!("block{i}.adapter.ln.gamma"), Tensor::filled(1, d, 1.0), true);
        model.add_parameter(format!("block{i}.adapter.ln.beta"), Tensor::zeros(1, d), true);
        let dw = format!("block{i}.adapter.down.w");
        model.add_parameter(dw.clone(), gaussian_init(seed, &dw, d, m, 1e-3), true);
        model.add_parameter(format!("block{i}.adapter.down.b"), Tensor::zeros(1, m), true);
        let uw = format!("block{i}.adapter.up.w");
        model.add_parameter(uw.clone(), gaussian_init(seed, &uw, m, d, 1e-3), true);
        model.add_parameter(format!("block{i}.adapter.up.b"), Tensor::zeros(1, d), true);
    }
    let state = model.peft_mut();
    state.adapter = Some(AdapterSpec { bottleneck: m });
    state.variant = Some(PeftVariant::Adapter);
    Ok(())
}

/// Depth of unit-level tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TuneDepth {
    /// First MLP hidden layer only.
    Shallow,
    /// Every MLP hidden layer.
    Deep,
}

/// Unfreezes the incoming weights and bias of the first `tuned_units`
/// units of the selected MLP layers. Unit selection is the lowest
/// indices, which keeps runs reproducible. The output head stays frozen.
pub fn apply_unit_tuning(
    model: &mut Model,
    cfg: &PeftConfig,
    depth: TuneDepth,
) -> Result<(), PeftError> {
    ensure_frozen(model, "unit tuning")?;
    let units = cfg.tuned_units;
    let width = model.config().mlp_units;
    if units == 0 || units > width {
        return Err(PeftError::UnitsOutOfRange { units, width });
    }
    let layers = match depth {
        TuneDepth::Shallow => 1,
        TuneDepth::Deep => model.config().mlp_layers,
    };
    for l in 0..layers {
        for suffix in ["w", "b"] {
            let name = format!("mlp{l}.{suffix}");
            model
                .parameter_mut(&name)
                .unwrap_or_else(|| panic!("missing parameter `{name}`"))
                .trainable = true;
            model.peft_mut().unit_masks.insert(name, units);
        }
    }
    model.peft_mut().variant = Some(match depth {
        TuneDepth::Shallow => PeftVariant::Shallow,
        TuneDepth::Deep => PeftVariant::Deep,
    });
    Ok(())
}

/// Prepares a model for fine-tuning under the configured variant:
/// freezes the backbone and attaches or unfreezes the trainable surface.
/// `full` unfreezes everything; `scratch` leaves the (fresh) model fully
/// trainable; `zero_shot` freezes everything.
pub fn apply_variant(model: &mut Model, cfg: &PeftConfig, seed: u64) -> Result<(), PeftError> {
    match cfg.variant {
        PeftVariant::Full => {
            model.set_all_trainable(true);
            model.peft_mut().variant = Some(PeftVariant::Full);
            Ok(())
        }
        PeftVariant::Scratch => {
            model.set_all_trainable(true);
            model.peft_mut().variant = Some(PeftVariant::Scratch);
            Ok(())
        }
        PeftVariant::ZeroShot => {
            freeze_backbone(model);
            model.peft_mut().variant = Some(PeftVariant::ZeroShot);
            Ok(())
        }
        PeftVariant::Lora => {
            freeze_backbone(model);
            apply_lora(model, cfg, seed)
        }
        PeftVariant::Adapter => {
            freeze_backbone(model);
            apply_adapter(model, cfg, seed)
        }
        PeftVariant::Deep => {
            freeze_backbone(model);
            apply_unit_tuning(model, cfg, TuneDepth::Deep)
        }
        PeftVariant::Shallow => {
            freeze_backbone(model);
            apply_unit_tuning(model, cfg, TuneDepth::Shallow)
        }
    }
}

/// Closed-form trainable count for LoRA: per block, both feed-forward
/// matrices contribute r*(in + out).
pub fn lora_trainable_count(cfg: &ModelConfig, rank: usize) -> usize {
    cfg.n_blocks * 2 * rank * (cfg.embed_dim + cfg.ffn_hidden)
}

/// Closed-form trainable count for the adapter: per block, 2d for the
/// layer-norm, d*m + m down, m*d + d up.
pub fn adapter_trainable_count(cfg: &ModelConfig, m: usize) -> usize {
    let d = cfg.embed_dim;
    cfg.n_blocks * (2 * d + (d * m + m) + (m * d + d))
}

/// Closed-form trainable count for unit tuning.
pub fn unit_tuning_trainable_count(cfg: &ModelConfig, units: usize, depth: TuneDepth) -> usize {
    let first = units * (cfg.mlp_input_dim() + 1);
    match depth {
        TuneDepth::Shallow => first,
        TuneDepth::Deep => first + (cfg.mlp_layers - 1) * units * (cfg.mlp_units + 1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth;
    use crate::model::Model;

    fn acs_like_config() -> ModelConfig {
        ModelConfig::standard().with_schema(vec![10, 25, 6, 50, 50, 19, 4, 11], 2)
    }

    fn small_model() -> (Model, crate::data::TabularDataset) {
        let cfg = ModelConfig {
            embed_dim: 8,
            n_blocks: 2,
            n_heads: 2,
            ffn_hidden: 16,
            mlp_layers: 3,
            mlp_units: 12,
            ..ModelConfig::standard()
        }
        .with_schema(vec![5, 4], 2);
        let model = Model::init(cfg, 33).unwrap();
        let (data, _) = synth::generate_with_config(16, 0.0, 3, &[5, 4], 2);
        (model, data)
    }

    #[test]
    fn freeze_zeroes_trainable_count_and_is_idempotent() {
        let (mut model, data) = small_model();
        let before = model.forward_logits(&data, &[0, 1, 2]);
        freeze_backbone(&mut model);
        let (_, trainable) = model.count_parameters();
        assert_eq!(trainable, 0);
        let after = model.forward_logits(&data, &[0, 1, 2]);
        assert_eq!(before, after);
        freeze_backbone(&mut model);
        assert_eq!(model.count_parameters().1, 0);
    }

    #[test]
    fn lora_requires_frozen_backbone() {
        let (mut model, _) = small_model();
        let err = apply_lora(&mut model, &PeftConfig::new(PeftVariant::Lora), 1).unwrap_err();
        assert_eq!(err, PeftError::BackboneNotFrozen { what: "lora" });
    }

    #[test]
    fn lora_zero_init_leaves_logits_exactly_unchanged() {
        let (mut model, data) = small_model();
        freeze_backbone(&mut model);
        let before = model.forward_logits(&data, &(0..8).collect::<Vec<_>>());
        apply_lora(&mut model, &PeftConfig::new(PeftVariant::Lora), 5).unwrap();
        let after = model.forward_logits(&data, &(0..8).collect::<Vec<_>>());
        assert_eq!(before, after);
    }

    #[test]
    fn lora_trainable_count_matches_closed_form() {
        let mut model = Model::init(acs_like_config(), 2).unwrap();
        freeze_backbone(&mut model);
        let cfg = PeftConfig::new(PeftVariant::Lora);
        apply_lora(&mut model, &cfg, 3).unwrap();
        let (_, trainable) = model.count_parameters();
        assert_eq!(trainable, lora_trainable_count(model.config(), 1));
        assert_eq!(trainable, 1_280); // 4 blocks * 2 matrices * 1 * (32 + 128)
    }

    #[test]
    fn lora_rank_violation_is_rejected() {
        let (mut model, _) = small_model();
        freeze_backbone(&mut model);
        let mut cfg = PeftConfig::new(PeftVariant::Lora);
        cfg.lora_rank = 99;
        let err = apply_lora(&mut model, &cfg, 1).unwrap_err();
        assert_eq!(err, PeftError::RankOutOfRange { rank: 99, max: 8 });
    }

    #[test]
    fn merge_reproduces_unmerged_forward() {
        let (mut model, data) = small_model();
        freeze_backbone(&mut model);
        let mut cfg = PeftConfig::new(PeftVariant::Lora);
        cfg.lora_rank = 2;
        cfg.lora_alpha = Some(4.0);
        apply_lora(&mut model, &cfg, 7).unwrap();

        // simulate training by giving the B factors random values
        let mut rng = crate::rng::StreamRng::new(&[0xB0B]);
        for i in 0..model.config().n_blocks {
            for which in 1..=2 {
                let p = model.parameter_mut(&format!("block{i}.lora.b{which}")).unwrap();
                for v in p.tensor.data_mut() {
                    *v = rng.next_uniform(-0.3, 0.3) as f32;
                }
            }
        }

        let rows: Vec<usize> = (0..16).collect();
        let before = model.forward_logits(&data, &rows);
        merge_lora(&mut model).unwrap();
        assert!(model.parameter("block0.lora.a1").is_none());
        let after = model.forward_logits(&data, &rows);
        for (b, a) in before.iter().zip(&after) {
            assert!((b - a).abs() < 1e-5, "merged forward drifted: {b} vs {a}");
        }
        let (_, trainable) = model.count_parameters();
        assert_eq!(trainable, 0);
    }

    #[test]
    fn double_merge_is_an_error() {
        let (mut model, _) = small_model();
        freeze_backbone(&mut model);
        apply_lora(&mut model, &PeftConfig::new(PeftVariant::Lora), 7).unwrap();
        merge_lora(&mut model).unwrap();
        assert_eq!(merge_lora(&mut model).unwrap_err(), PeftError::NothingToMerge);
    }

    #[test]
    fn adapter_trainable_count_matches_published_shape() {
        let mut model = Model::init(acs_like_config(), 2).unwrap();
        freeze_backbone(&mut model);
        apply_adapter(&mut model, &PeftConfig::new(PeftVariant::Adapter), 3).unwrap();
        let (_, trainable) = model.count_parameters();
        assert_eq!(trainable, adapter_trainable_count(model.config(), 4));
        assert_eq!(trainable, 1_424); // 4 blocks * (64 + 132 + 160)
    }

    #[test]
    fn adapter_is_near_identity_at_init() {
        let (mut model, data) = small_model();
        let rows: Vec<usize> = (0..16).collect();
        let before = model.forward_logits(&data, &rows);
        freeze_backbone(&mut model);
        apply_adapter(&mut model, &PeftConfig::new(PeftVariant::Adapter), 11).unwrap();
        let after = model.forward_logits(&data, &rows);
        let max_diff = before
            .iter()
            .zip(&after)
            .map(|(b, a)| (b - a).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff < 1e-2, "adapter init drift {max_diff}");
    }

    #[test]
    fn zero_bottleneck_is_rejected() {
        let (mut model, _) = small_model();
        freeze_backbone(&mut model);
        let mut cfg = PeftConfig::new(PeftVariant::Adapter);
        cfg.adapter_bottleneck = 0;
        let err = apply_adapter(&mut model, &cfg, 1).unwrap_err();
        assert_eq!(err, PeftError::BottleneckOutOfRange { m: 0, d: 8 });
    }

    #[test]
    fn unit_tuning_counts_match_closed_forms() {
        let mut shallow = Model::init(acs_like_config(), 2).unwrap();
        freeze_backbone(&mut shallow);
        apply_unit_tuning(&mut shallow, &PeftConfig::new(PeftVariant::Shallow), TuneDepth::Shallow)
            .unwrap();
        assert_eq!(shallow.count_parameters().1, 2_072); // 8 * (258 + 1)

        let mut deep = Model::init(acs_like_config(), 2).unwrap();
        freeze_backbone(&mut deep);
        apply_unit_tuning(&mut deep, &PeftConfig::new(PeftVariant::Deep), TuneDepth::Deep).unwrap();
        assert_eq!(deep.count_parameters().1, 4_408); // 2072 + 4 * (72*8 + 8)

        let cfg = acs_like_config();
        assert_eq!(unit_tuning_trainable_count(&cfg, 8, TuneDepth::Shallow), 2_072);
        assert_eq!(unit_tuning_trainable_count(&cfg, 8, TuneDepth::Deep), 4_408);
    }

    #[test]
    fn oversized_tuned_units_are_rejected() {
        let (mut model, _) = small_model();
        freeze_backbone(&mut model);
        let mut cfg = PeftConfig::new(PeftVariant::Shallow);
        cfg.tuned_units = 13;
        let err = apply_unit_tuning(&mut model, &cfg, TuneDepth::Shallow).unwrap_err();
        assert_eq!(err, PeftError::UnitsOutOfRange { units: 13, width: 12 });
    }

    #[test]
    fn variant_labels_round_trip() {
        for v in PeftVariant::all() {
            assert_eq!(v.label().parse::<PeftVariant>().unwrap(), v);
        }
    }
}
