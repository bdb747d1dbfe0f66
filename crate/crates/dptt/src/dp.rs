//! DP-SGD: per-example gradient clipping, Gaussian noise on the clipped
//! sum, and the averaged update applied to trainable parameters only.
//!
//! Order of operations per step: compute each example's gradient, clip it
//! to L2 norm `C`, sum the clipped gradients, add `N(0, C^2 sigma^2 I)`
//! once to the sum, divide by the batch size, and take the SGD step. With
//! clipping bounding each example's contribution by `C`, the released
//! update is a subsampled Gaussian mechanism with sensitivity `C`, which
//! is what the accountant in [`crate::accountant`] prices.
//!
//! Noise is drawn from a counter-based stream keyed by
//! `(seed, step, parameter name, coordinate)`, so a training run is
//! bit-reproducible regardless of parallelism.
//!
//! Determinism is the point of the seeded stream: it makes runs testable
//! and auditable. A production deployment would swap in a cryptographically
//! secure randomness source for the noise.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{per_example_grads_with_loss, GradMap};
use crate::data::TabularDataset;
use crate::model::Model;
use crate::rng::{fnv1a64, key, NoiseStream, StreamRng};

const NOISE_SALT: u64 = 0xD9;
const SHUFFLE_SALT: u64 = 0x5F;

/// Resolved DP-SGD settings for one training phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    /// Clip norm C. `f64::INFINITY` disables clipping (non-private).
    pub clip_norm: f64,
    /// Noise multiplier sigma. 0 disables noise (non-private).
    pub noise_multiplier: f64,
    /// Sampling rate q = batch_size / dataset size, used for accounting.
    pub sampling_rate: f64,
    pub batch_size: usize,
    pub delta: f64,
    pub learning_rate: f64,
    /// Total optimizer steps to run.
    pub steps: usize,
    pub seed: u64,
}

#[derive(Debug, Error, PartialEq)]
pub enum DpError {
    #[error("model has no trainable parameters")]
    NoTrainableParameters,
    #[error("batch size {batch} exceeds dataset rows {rows}")]
    BatchLargerThanDataset { batch: usize, rows: usize },
    #[error("{field} must be positive")]
    NonPositive { field: &'static str },
    #[error("noise requires a finite clip norm to bound sensitivity")]
    NoiseWithoutClipping,
}

impl DpConfig {
    pub fn validate(&self) -> Result<(), DpError> {
        if self.batch_size == 0 {
            return Err(DpError::NonPositive { field: "batch_size" });
        }
        if self.steps == 0 {
            return Err(DpError::NonPositive { field: "steps" });
        }
        if !(self.clip_norm > 0.0) {
            return Err(DpError::NonPositive { field: "clip_norm" });
        }
        if self.learning_rate <= 0.0 {
            return Err(DpError::NonPositive { field: "learning_rate" });
        }
        if self.noise_multiplier > 0.0 && !self.clip_norm.is_finite() {
            return Err(DpError::NoiseWithoutClipping);
        }
        Ok(())
    }
}

/// A per-example gradient map with its global L2 norm (over every
/// coordinate of every tensor, accumulated in f64).
#[derive(Clone, Debug)]
pub struct GradientSample {
    grads: GradMap,
    norm: f64,
}

impl GradientSample {
    pub fn new(grads: GradMap) -> Self {
        let sumsq: f64 = grads.values().map(|t| t.sum_sq()).sum();
        let norm = sumsq.sqrt();
        assert!(norm.is_finite(), "numeric fault: non-finite gradient norm");
        Self { grads, norm }
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn grads(&self) -> &GradMap {
        &self.grads
    }

    pub fn into_grads(self) -> GradMap {
        self.grads
    }

    /// `Clip(x) = x / max(1, |x| / c)`: rescales so the norm is
    /// `min(|x|, c)`, preserving direction. Infinite `c` is a no-op.
    pub fn clip(mut self, c: f64) -> GradientSample {
        assert!(c > 0.0, "clip: bound must be positive");
        if !c.is_finite() || self.norm <= c {
            return self;
        }
        let factor = c / self.norm;
        for t in self.grads.values_mut() {
            t.scale_in_place(factor);
        }
        self.norm = c;
        self
    }
}

/// `(1/B) * (sum of clipped gradients + N(0, C^2 sigma^2 I))`, summed and
/// noised per coordinate in f64 with a fixed order. Every sample must
/// already be clipped to `cfg.clip_norm`.
pub fn noisy_aggregate(samples: &[GradientSample], cfg: &DpConfig, step_index: u64) -> GradMap {
    assert!(!samples.is_empty(), "noisy_aggregate: empty batch");
    if cfg.clip_norm.is_finite() {
        for (i, s) in samples.iter().enumerate() {
            assert!(
                s.norm <= cfg.clip_norm + 1e-6,
                "noisy_aggregate: sample {i} has norm {} above clip bound {}",
                s.norm,
                cfg.clip_norm
            );
        }
    }
    let b = samples.len() as f64;
    let noise_scale = cfg.clip_norm * cfg.noise_multiplier;
    let mut out = GradMap::new();
    for (name, first) in samples[0].grads() {
        let mut acc: Vec<f64> = first.data().iter().map(|&v| f64::from(v)).collect();
        for s in &samples[1..] {
            let t = &s.grads()[name];
            for (a, &v) in acc.iter_mut().zip(t.data()) {
                *a += f64::from(v);
            }
        }
        if cfg.noise_multiplier > 0.0 {
            let stream = NoiseStream::new(&[cfg.seed, NOISE_SALT, step_index, fnv1a64(name.as_bytes())]);
            for (i, a) in acc.iter_mut().enumerate() {
                *a += stream.gaussian(i as u64) * noise_scale;
            }
        }
        let t = crate::tensor::Tensor::new(
            first.rows(),
            first.cols(),
            acc.into_iter().map(|v| (v / b) as f32).collect(),
        );
        out.insert(name.clone(), t);
    }
    out
}

/// One DP-SGD step over the given rows. Returns the mean per-example
/// training loss.
pub fn dp_sgd_step(
    model: &mut Model,
    data: &TabularDataset,
    rows: &[usize],
    cfg: &DpConfig,
    step_index: u64,
) -> Result<f64, DpError> {
    let wrt = model.trainable_names();
    if wrt.is_empty() {
        return Err(DpError::NoTrainableParameters);
    }
    let results = per_example_grads_with_loss(
        |i| {
            let ex = data.example(rows[i]);
            model.example_loss_tape(ex.cats, ex.conts, ex.label)
        },
        rows.len(),
        &wrt,
    );
    let mut loss_sum = 0.0f64;
    let mut samples = Vec::with_capacity(results.len());
    for (mut gm, loss) in results {
        loss_sum += f64::from(loss);
        model.mask_unit_grads(&mut gm);
        samples.push(GradientSample::new(gm).clip(cfg.clip_norm));
    }
    let update = noisy_aggregate(&samples, cfg, step_index);
    model.apply_update(&update, cfg.learning_rate);
    Ok(loss_sum / rows.len() as f64)
}

/// Fixed-size batches from a seeded shuffle. The trailing short batch is
/// dropped, keeping every step's sampling rate at `batch_size / n_rows`.
pub fn sample_batches(n_rows: usize, batch_size: usize, epoch_seed: u64) -> Vec<Vec<usize>> {
    assert!(n_rows > 0, "sample_batches: empty dataset");
    assert!(batch_size > 0, "sample_batches: batch_size must be positive");
    let mut order: Vec<usize> = (0..n_rows).collect();
    let mut rng = StreamRng::new(&[epoch_seed]);
    rng.shuffle(&mut order);
    order
        .chunks_exact(batch_size)
        .map(|c| c.to_vec())
        .collect()
}

/// Per-step mean training losses from a run.
#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    pub steps: usize,
}

/// Runs `cfg.steps` DP-SGD steps over `rows` of `data`, reshuffling each
/// epoch with a seed derived from `(cfg.seed, epoch)`.
pub fn train(
    model: &mut Model,
    data: &TabularDataset,
    rows: &[usize],
    cfg: &DpConfig,
) -> Result<TrainLog, DpError> {
    cfg.validate()?;
    if cfg.batch_size > rows.len() {
        return Err(DpError::BatchLargerThanDataset { batch: cfg.batch_size, rows: rows.len() });
    }
    let mut log = TrainLog::default();
    let mut step = 0u64;
    let mut epoch = 0u64;
    'run: loop {
        let batches = sample_batches(rows.len(), cfg.batch_size, key(&[cfg.seed, SHUFFLE_SALT, epoch]));
        for batch in batches {
            let batch_rows: Vec<usize> = batch.into_iter().map(|i| rows[i]).collect();
            let loss = dp_sgd_step(model, data, &batch_rows, cfg, step)?;
            log.losses.push(loss);
            step += 1;
            if step as usize >= cfg.steps {
                break 'run;
            }
        }
        epoch += 1;
    }
    log.steps = step as usize;
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth;
    use crate::model::ModelConfig;
    use crate::peft::{self, PeftConfig, PeftVariant};
    use crate::tensor::Tensor;
    use std::collections::BTreeMap;

    fn cfg_with(clip: f64, sigma: f64) -> DpConfig {
        DpConfig {
            clip_norm: clip,
            noise_multiplier: sigma,
            sampling_rate: 0.01,
            batch_size: 8,
            delta: 1e-5,
            learning_rate: 0.1,
            steps: 1,
            seed: 7,
        }
    }

    fn sample_from(v: Vec<f32>) -> GradientSample {
        let mut gm = GradMap::new();
        gm.insert("g".to_string(), Tensor::row(v));
        GradientSample::new(gm)
    }

    #[test]
    fn clip_rescales_a_long_vector_exactly() {
        let clipped = sample_from(vec![3.0, 4.0]).clip(2.0);
        assert_eq!(clipped.grads()["g"].data(), &[1.2, 1.6]);
        assert_eq!(clipped.norm(), 2.0);
    }

    #[test]
    fn clip_leaves_short_vectors_unchanged() {
        let s = sample_from(vec![0.6, 0.8]);
        let norm = s.norm();
        let clipped = s.clip(2.0);
        assert_eq!(clipped.grads()["g"].data(), &[0.6, 0.8]);
        assert_eq!(clipped.norm(), norm);
    }

    #[test]
    fn clip_of_zero_is_zero() {
        let clipped = sample_from(vec![0.0, 0.0, 0.0]).clip(2.0);
        assert_eq!(clipped.grads()["g"].data(), &[0.0, 0.0, 0.0]);
        assert_eq!(clipped.norm(), 0.0);
    }

    #[test]
    fn clip_never_exceeds_bound_on_random_vectors() {
        let mut rng = StreamRng::new(&[0xC11F]);
        for _ in 0..1_000 {
            let dim = 1 + rng.next_below(64);
            let scale = 10.0f64.powf(rng.next_uniform(-2.0, 2.0));
            let v: Vec<f32> = (0..dim)
                .map(|_| (rng.next_gaussian() * scale) as f32)
                .collect();
            let clipped = sample_from(v).clip(2.0);
            let norm = clipped.grads()["g"].sum_sq().sqrt();
            assert!(norm <= 2.0 + 1e-6, "post-clip norm {norm}");
        }
    }

    #[test]
    fn clip_preserves_direction() {
        let mut rng = StreamRng::new(&[0xD12]);
        for _ in 0..100 {
            let v: Vec<f32> = (0..8).map(|_| rng.next_gaussian() as f32).collect();
            let lambda = rng.next_uniform(0.1, 50.0) as f32;
            let scaled: Vec<f32> = v.iter().map(|&x| x * lambda).collect();
            let c = sample_from(scaled).clip(1.0);
            let base = sample_from(v.clone()).clip(1.0);
            // cosine similarity of the two clipped vectors is 1
            let dot: f64 = c.grads()["g"]
                .data()
                .iter()
                .zip(base.grads()["g"].data())
                .map(|(&a, &b)| f64::from(a) * f64::from(b))
                .sum();
            let na = c.grads()["g"].sum_sq().sqrt();
            let nb = base.grads()["g"].sum_sq().sqrt();
            if na > 1e-9 && nb > 1e-9 {
                assert!((dot / (na * nb) - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn zero_sigma_aggregate_is_exact_mean() {
        let s1 = sample_from(vec![1.0, 2.0]).clip(10.0);
        let s2 = sample_from(vec![3.0, 6.0]).clip(10.0);
        let agg = noisy_aggregate(&[s1, s2], &cfg_with(10.0, 0.0), 0);
        assert_eq!(agg["g"].data(), &[2.0, 4.0]);
    }

    #[test]
    fn noise_std_matches_c_sigma_over_many_coordinates() {
        let n = 100_000usize;
        let zero = sample_from(vec![0.0; n]);
        let cfg = cfg_with(2.0, 1.0);
        let agg = noisy_aggregate(&[zero], &cfg, 3);
        let values = agg["g"].data();
        let mean: f64 = values.iter().map(|&v| f64::from(v)).sum::<f64>() / n as f64;
        let var: f64 = values
            .iter()
            .map(|&v| {
                let d = f64::from(v) - mean;
                d * d
            })
            .sum::<f64>()
            / n as f64;
        let std = var.sqrt();
        let expected = cfg.clip_norm * cfg.noise_multiplier; // B = 1
        assert!(
            (std - expected).abs() / expected < 0.02,
            "std {std} vs expected {expected}"
        );
        // mean within 3 standard errors of zero
        let se = expected / (n as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "noise mean {mean}, se {se}");
    }

    #[test]
    fn same_seed_and_step_give_bit_identical_noise() {
        let cfg = cfg_with(2.0, 1.5);
        let a = noisy_aggregate(&[sample_from(vec![0.0; 64])], &cfg, 5);
        let b = noisy_aggregate(&[sample_from(vec![0.0; 64])], &cfg, 5);
        for (x, y) in a["g"].data().iter().zip(b["g"].data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        let c = noisy_aggregate(&[sample_from(vec![0.0; 64])], &cfg, 6);
        assert_ne!(a["g"].data(), c["g"].data());
    }

    #[test]
    #[should_panic(expected = "above clip bound")]
    fn unclipped_input_is_a_contract_violation() {
        let cfg = cfg_with(1.0, 0.0);
        let oversized = sample_from(vec![3.0, 4.0]); // norm 5 > 1
        noisy_aggregate(&[oversized], &cfg, 0);
    }

    fn tiny_setup() -> (Model, crate::data::TabularDataset) {
        let cfg = ModelConfig {
            embed_dim: 8,
            n_blocks: 1,
            n_heads: 2,
            ffn_hidden: 16,
            mlp_layers: 2,
            mlp_units: 8,
            ..ModelConfig::standard()
        }
        .with_schema(vec![5, 4, 6], 2);
        let model = Model::init(cfg, 17).unwrap();
        let (data, _) = synth::generate_with_config(256, 0.0, 23, &[5, 4, 6], 2);
        (model, data)
    }

    #[test]
    fn frozen_backbone_step_changes_only_peft_tensors() {
        let (mut model, data) = tiny_setup();
        peft::freeze_backbone(&mut model);
        peft::apply_lora(&mut model, &PeftConfig::new(PeftVariant::Lora), 3).unwrap();
        let backbone_before: BTreeMap<String, Vec<u32>> = model
            .parameters()
            .filter(|p| !p.name.contains("lora"))
            .map(|p| (p.name.clone(), p.tensor.data().iter().map(|v| v.to_bits()).collect()))
            .collect();
        let lora_b_before: Vec<u32> = model
            .parameter("block0.lora.b1")
            .unwrap()
            .tensor
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect();

        let rows: Vec<usize> = (0..8).collect();
        dp_sgd_step(&mut model, &data, &rows, &cfg_with(2.0, 0.0), 0).unwrap();

        for p in model.parameters().filter(|p| !p.name.contains("lora")) {
            let bits: Vec<u32> = p.tensor.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits, backbone_before[&p.name], "backbone `{}` moved", p.name);
        }
        let lora_b_after: Vec<u32> = model
            .parameter("block0.lora.b1")
            .unwrap()
            .tensor
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        assert_ne!(lora_b_after, lora_b_before, "lora B did not train");
    }

    #[test]
    fn masked_units_outside_mask_stay_bit_identical() {
        let (mut model, data) = tiny_setup();
        peft::freeze_backbone(&mut model);
        peft::apply_unit_tuning(
            &mut model,
            &PeftConfig { tuned_units: 3, ..PeftConfig::new(PeftVariant::Shallow) },
            peft::TuneDepth::Shallow,
        )
        .unwrap();
        let w_before = model.parameter("mlp0.w").unwrap().tensor.clone();
        let rows: Vec<usize> = (0..8).collect();
        dp_sgd_step(&mut model, &data, &rows, &cfg_with(2.0, 0.5), 0).unwrap();
        let w_after = &model.parameter("mlp0.w").unwrap().tensor;
        let cols = w_after.cols();
        let mut changed_inside = false;
        for r in 0..w_after.rows() {
            for c in 0..cols {
                let before = w_before.at(r, c).to_bits();
                let after = w_after.at(r, c).to_bits();
                if c < 3 {
                    changed_inside |= before != after;
                } else {
                    assert_eq!(before, after, "outside-mask coordinate ({r},{c}) moved");
                }
            }
        }
        assert!(changed_inside, "masked columns did not train");
    }

    #[test]
    fn sigma_zero_infinite_clip_equals_plain_sgd() {
        let (model, data) = tiny_setup();
        let rows: Vec<usize> = (0..8).collect();

        // plain SGD oracle: gradient of the mean loss via one batch tape
        let mut plain = model.clone();
        let wrt = plain.trainable_names();
        let (tape, loss) = plain.batch_loss_tape(&data, &rows);
        let mut gm = tape.grad(loss, &wrt);
        drop(tape);
        let lr = 0.1;
        for t in gm.values_mut() {
            t.scale_in_place(1.0 / rows.len() as f64);
        }
        plain.apply_update(&gm, lr);

        let mut dp = model.clone();
        let mut cfg = cfg_with(f64::INFINITY, 0.0);
        cfg.learning_rate = lr;
        dp_sgd_step(&mut dp, &data, &rows, &cfg, 0).unwrap();

        for (a, b) in plain.parameters().zip(dp.parameters()) {
            assert_eq!(a.name, b.name);
            for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
                assert!(
                    (x - y).abs() < 1e-6,
                    "{}: plain {x} vs dp {y}",
                    a.name
                );
            }
        }
    }

    #[test]
    fn loss_decreases_without_noise_on_separable_data() {
        let (mut model, data) = tiny_setup();
        let rows: Vec<usize> = (0..data.n_rows()).collect();
        let cfg = DpConfig {
            clip_norm: f64::INFINITY,
            noise_multiplier: 0.0,
            sampling_rate: 0.0625,
            batch_size: 16,
            delta: 1e-5,
            learning_rate: 0.25,
            steps: 100,
            seed: 3,
        };
        let log = train(&mut model, &data, &rows, &cfg).unwrap();
        assert_eq!(log.steps, 100);
        let first: f64 = log.losses[..10].iter().sum::<f64>() / 10.0;
        let last: f64 = log.losses[90..].iter().sum::<f64>() / 10.0;
        assert!(
            last < first - 0.05,
            "loss did not decrease: first {first:.4}, last {last:.4}"
        );
    }

    #[test]
    fn no_trainable_parameters_is_an_error() {
        let (mut model, data) = tiny_setup();
        peft::freeze_backbone(&mut model);
        let rows: Vec<usize> = (0..8).collect();
        let err = dp_sgd_step(&mut model, &data, &rows, &cfg_with(2.0, 0.0), 0).unwrap_err();
        assert_eq!(err, DpError::NoTrainableParameters);
    }

    #[test]
    fn batches_cover_every_row_once_and_drop_the_tail() {
        let batches = sample_batches(100, 32, 5);
        assert_eq!(batches.len(), 3); // 96 rows used, tail of 4 dropped
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 96);

        let exact = sample_batches(64, 16, 5);
        let mut all: Vec<usize> = exact.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..64).collect::<Vec<_>>());
    }

    #[test]
    fn batch_order_is_seeded() {
        assert_eq!(sample_batches(50, 10, 7), sample_batches(50, 10, 7));
        assert_ne!(sample_batches(50, 10, 7), sample_batches(50, 10, 8));
    }

    #[test]
    fn training_run_is_bit_reproducible() {
        let (model, data) = tiny_setup();
        let rows: Vec<usize> = (0..data.n_rows()).collect();
        let cfg = DpConfig {
            clip_norm: 2.0,
            noise_multiplier: 0.8,
            sampling_rate: 0.0625,
            batch_size: 16,
            delta: 1e-5,
            learning_rate: 0.1,
            steps: 12,
            seed: 77,
        };
        let mut m1 = model.clone();
        let log1 = train(&mut m1, &data, &rows, &cfg).unwrap();
        let mut m2 = model.clone();
        let log2 = train(&mut m2, &data, &rows, &cfg).unwrap();
        assert_eq!(log1.losses, log2.losses);
        for (a, b) in m1.parameters().zip(m2.parameters()) {
            for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{} diverged", a.name);
            }
        }
    }
}
