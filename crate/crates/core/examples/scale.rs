//! Fits the log-scale estimator on a synthetic corpus whose magnitude
//! depends on the input, and compares it with the global-mean ablation.
//!
//! cargo run --example scale

use ocd::numkit::{RngStream, Tensor};
use ocd::overfit::{ConditioningTuple, FinetuneConfig, OverfitRecord, RecordStore, StoreManifest};
use ocd::scale::{mean_loss, scale_loss, train_scale, ScaleConfig};

fn record(i: usize, x: Vec<f64>) -> OverfitRecord {
    let rho = 0.05 * (1.5 * x[0]).exp();
    OverfitRecord {
        sample_index: i,
        cond: ConditioningTuple {
            input: x.clone(),
            activation: x.iter().map(|v| v.tanh()).collect(),
            output: vec![x[0] - x[1]],
        },
        x,
        delta: Tensor::zeros(&[1, 1]),
        rho,
        loss_before: 1.0,
        loss_after: 0.5,
    }
}

fn main() -> ocd::Result<()> {
    println!(
        "unit values: 10% error {:.6} dB, 2x error {:.6} dB",
        scale_loss(1.1, 1.0)?,
        scale_loss(2.0, 1.0)?
    );
    let mut rng = RngStream::new(1, 0);
    let mut make = |n: usize| -> Vec<OverfitRecord> { (0..n).map(|i| record(i, rng.gaussian(&[2]).into_data())).collect() };
    let train = make(500);
    let test = make(200);
    let store = RecordStore {
        manifest: StoreManifest {
            layer: 0,
            matrix_shape: [1, 1],
            input_dim: 2,
            cond_dims: [2, 2, 1],
            records: train.len(),
            excluded: vec![],
            base_checksum: String::new(),
            finetune: FinetuneConfig::default(),
        },
        records: train,
    };
    let cfg = ScaleConfig {
        hidden: vec![32, 32],
        lr: 3e-3,
        epochs: 60,
        ..ScaleConfig::default()
    };
    let model = train_scale(&store, &cfg, &mut RngStream::new(2, 0))?;
    let global: f64 = test.iter().map(|r| scale_loss(model.rho_bar, r.rho).unwrap()).sum::<f64>() / test.len() as f64;
    println!(
        "held-out loss: learned {:.2} dB, global mean rho {:.2} dB",
        mean_loss(&model, &test)?,
        global
    );
    Ok(())
}
