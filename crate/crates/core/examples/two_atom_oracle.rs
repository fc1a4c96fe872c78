//! Trains the diffusion hypernetwork on a corpus whose target delta is one
//! of two fixed orthogonal unit matrices chosen by the sign of `x[0]`, then
//! checks how often sampling recovers the right one.
//!
//! cargo run --release --example two_atom_oracle -- [channels] [epochs]

use std::time::Instant;

use ocd::hyperdiff::{DenoiserConfig, DiffusionBundle, DiffusionConfig};
use ocd::numkit::{RngStream, Tensor};
use ocd::overfit::{ConditioningTuple, FinetuneConfig, OverfitRecord, RecordStore, StoreManifest};

const ROWS: usize = 17;
const COLS: usize = 4;

fn atoms(rng: &mut RngStream) -> [Tensor; 2] {
    let a = rng.gaussian(&[ROWS, COLS]);
    let a = a.scaled(1.0 / a.norm());
    let mut b = rng.gaussian(&[ROWS, COLS]);
    let proj = b.dot(&a);
    b.axpy(-proj, &a);
    let b = b.scaled(1.0 / b.norm());
    [a, b]
}

fn cond_for(x: &[f64]) -> ConditioningTuple {
    ConditioningTuple {
        input: x.to_vec(),
        activation: x.iter().map(|v| v.tanh()).collect(),
        output: vec![x[0] + x[1], x[0] - x[1]],
    }
}

fn record(i: usize, x: Vec<f64>, atoms: &[Tensor; 2]) -> OverfitRecord {
    let which = usize::from(x[0] <= 0.0);
    OverfitRecord {
        sample_index: i,
        cond: cond_for(&x),
        x,
        delta: atoms[which].clone(),
        rho: 1.0,
        loss_before: 1.0,
        loss_after: 0.0,
    }
}

fn main() -> ocd::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let channels = args.first().copied().unwrap_or(8);
    let epochs = args.get(1).copied().unwrap_or(40);
    let mut rng = RngStream::new(7, 0);
    let atoms = atoms(&mut rng);
    let records: Vec<_> = (0..256).map(|i| record(i, rng.gaussian(&[2]).into_data(), &atoms)).collect();
    let store = RecordStore {
        manifest: StoreManifest {
            layer: 2,
            matrix_shape: [ROWS, COLS],
            input_dim: 2,
            cond_dims: [2, 2, 2],
            records: records.len(),
            excluded: vec![],
            base_checksum: "oracle".into(),
            finetune: FinetuneConfig::default(),
        },
        records,
    };
    let config = DiffusionConfig {
        d_cond: 16,
        denoiser: DenoiserConfig {
            channels,
            ..DenoiserConfig::default()
        },
        lr: 1e-3,
        epochs,
        patience: epochs,
        ..DiffusionConfig::default()
    };
    let mut bundle = DiffusionBundle::new(config, &store.manifest, 1)?;
    println!("denoiser parameters: {}", bundle.denoiser.parameter_count());
    let start = Instant::now();
    let summary = bundle.train(&store, &mut RngStream::new(7, 1))?;
    println!(
        "trained {} epochs in {:.1}s; objective {:.4} -> {:.4}",
        summary.epoch_losses.len(),
        start.elapsed().as_secs_f64(),
        summary.epoch_losses[0],
        summary.epoch_losses.last().unwrap()
    );
    let mut hits = 0;
    let draws = 200;
    let mut test_rng = RngStream::new(99, 0);
    for i in 0..draws {
        let x = test_rng.gaussian(&[2]).into_data();
        let rec = record(i, x, &atoms);
        let omega = bundle.sample_delta(&rec.cond, &mut test_rng.fork(i as u64), false)?;
        if omega.cosine(&rec.delta) > 0.9 {
            hits += 1;
        }
    }
    println!("correct atom (cosine > 0.9): {hits}/{draws}");
    Ok(())
}
