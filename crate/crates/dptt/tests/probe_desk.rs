//! Temporary calibration probe (not part of the deliverable test set).

use dptt::experiment::{self, ExperimentConfig};
use dptt::peft::PeftVariant;
use std::time::Instant;

fn desk_cfg() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.pretrain_rows = 20_000;
    cfg.data.finetune_rows = 5_000;
    cfg.data.shift = 0.75;
    cfg.data.data_seed = 7;
    cfg
}

#[test]
#[ignore]
fn probe_scratch_nonprivate() {
    let base = desk_cfg();
    let data = experiment::load_data(&base.data).unwrap();
    println!("majority: {:.4}", experiment::majority_accuracy(&data.fine_test));
    for (epochs, lr, batch) in [(4usize, 0.1f64, 64usize), (4, 0.3, 64), (6, 0.3, 64), (6, 0.1, 32), (6, 0.5, 64)] {
        let mut c = base.clone();
        c.finetune.noise_multiplier = Some(0.0);
        c.finetune.clip_norm = f64::INFINITY;
        c.finetune.epochs = epochs;
        c.finetune.learning_rate = lr;
        c.finetune.batch_size = batch;
        let t = Instant::now();
        let (record, _, _) =
            experiment::run_cell(&c, &data, PeftVariant::Scratch, None, None, 1, None).unwrap();
        println!(
            "scratch nonprivate epochs={epochs} lr={lr} B={batch}: acc {:.4} ({:.0}s)",
            record.accuracy,
            t.elapsed().as_secs_f64()
        );
    }
}

#[test]
#[ignore]
fn probe_pretrain_stability() {
    let base = desk_cfg();
    let data = experiment::load_data(&base.data).unwrap();
    for (epochs, lr, batch) in [(2usize, 0.05f64, 32usize), (2, 0.1, 32), (2, 0.15, 32), (3, 0.1, 32)] {
        let mut c = base.clone();
        c.pretrain.target_epsilon = Some(8.0);
        c.pretrain.epochs = epochs;
        c.pretrain.learning_rate = lr;
        c.pretrain.batch_size = batch;
        let t = Instant::now();
        let (model, outcome) = experiment::pretrain_model(&c, &data, 1).unwrap();
        let zs = experiment::evaluate_model(&model, &data.fine_test);
        let n = outcome.losses.len();
        println!(
            "pretrain ep8 epochs={epochs} lr={lr} B={batch}: zs {zs:.4} losses {:.3}->{:.3}->{:.3} ({:.0}s)",
            outcome.losses[..10].iter().sum::<f64>() / 10.0,
            outcome.losses[n / 2 - 5..n / 2 + 5].iter().sum::<f64>() / 10.0,
            outcome.losses[n - 10..].iter().sum::<f64>() / 10.0,
            t.elapsed().as_secs_f64()
        );
    }
}

#[test]
#[ignore]
fn probe_finetune_gap() {
    let base = desk_cfg();
    let data = experiment::load_data(&base.data).unwrap();
    let mut c = base.clone();
    c.pretrain.target_epsilon = Some(8.0);
    c.pretrain.epochs = 2;
    c.pretrain.learning_rate = 0.1;
    c.pretrain.batch_size = 32;
    for seed in [1u64, 2] {
        let (model, _) = experiment::pretrain_model(&c, &data, seed).unwrap();
        let zs = experiment::evaluate_model(&model, &data.fine_test);
        println!("seed {seed} zero-shot@8: {zs:.4}");
        for (epochs, lr, batch) in [(6usize, 0.1f64, 32usize), (6, 0.2, 32), (8, 0.15, 32)] {
            let mut cc = c.clone();
            cc.finetune.epochs = epochs;
            cc.finetune.learning_rate = lr;
            cc.finetune.batch_size = batch;
            for method in [PeftVariant::Adapter, PeftVariant::Deep, PeftVariant::Lora, PeftVariant::Shallow] {
                let t = Instant::now();
                let (record, _, _) = experiment::run_cell(&cc, &data, method, Some(8.0), Some(8.0), seed, Some(model.clone())).unwrap();
                println!(
                    "  s{seed} (8,8) {:<8} epochs={epochs} lr={lr} B={batch}: acc {:.4} (+{:.1}pts) ({:.0}s)",
                    method.label(),
                    record.accuracy,
                    100.0 * (record.accuracy - zs),
                    t.elapsed().as_secs_f64()
                );
            }
        }
    }
}
