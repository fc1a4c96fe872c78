//! Acceptance run: one PASS/FAIL line per criterion. Runs the desk-scale
//! pipelines for both synthetic tasks, so it takes several minutes.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use ocd::harness::{EvalReport, Pipeline, PipelineConfig, SeedEval, Stage, Variant};
use ocd::hyperdiff::{
    ancestral_sample, DenoiserConfig, DiffusionBundle, DiffusionConfig, NoiseModel, NoiseSchedule, OutputParam,
};
use ocd::layer_select::kde_entropy;
use ocd::numkit::checkpoint::Checkpoint;
use ocd::numkit::{loss_eval, Activation, Head, LossKind, MlpModel, MlpSpec, RngStream, Target, Tensor};
use ocd::overfit::{ConditioningTuple, FinetuneConfig, OverfitRecord, RecordStore, StoreManifest};
use ocd::scale::{record_loss, record_loss_and_gradients, scale_loss, train_scale, ScaleConfig};

const DESK_BLOBS: &str = include_str!("../configs/desk_blobs.toml");
const DESK_TABULAR: &str = include_str!("../configs/desk_tabular.toml");
const SMOKE: &str = include_str!("../configs/smoke.toml");

type Verdict = Result<String, String>;

fn ensure(ok: bool, msg: String) -> Verdict {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

struct Run {
    report: EvalReport,
    root: std::path::PathBuf,
    seconds: f64,
}

fn run(cfg: &PipelineConfig, out: &Path) -> Result<Run, String> {
    let start = Instant::now();
    let p = Pipeline::new(cfg.clone(), out).map_err(|e| e.to_string())?;
    let (report, _) = p
        .run_until(Stage::Report)
        .map_err(|e| e.to_string())?
        .ok_or("no report")?;
    Ok(Run {
        report,
        root: p.root.clone(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn loss(e: &SeedEval, v: Variant) -> f64 {
    e.get(v).map_or(f64::NAN, |m| m.loss)
}

fn c1_schedule() -> Verdict {
    let start = Instant::now();
    let s = NoiseSchedule::new(10).map_err(|e| e.to_string())?;
    let ends = (s.beta(1) - 1e-4).abs() <= 1e-15 && (s.beta(10) - 1e-2).abs() <= 1e-15;
    let decreasing = (1..=10).all(|t| s.alpha_bar(t) < s.alpha_bar(t - 1));
    let tilde = s.beta_tilde(1) == 0.0;
    let secs = start.elapsed().as_secs_f64();
    ensure(
        ends && decreasing && tilde && secs < 1.0,
        format!(
            "beta_1={:e} beta_10={:e}, alpha_bar decreasing={decreasing}, beta_tilde_1={}, {secs:.3}s",
            s.beta(1),
            s.beta(10),
            s.beta_tilde(1)
        ),
    )
}

/// Relative error with an absolute floor for vanishing coordinates.
fn rel_err(fd: f64, an: f64) -> f64 {
    let d = fd.abs().max(an.abs());
    if d < 1e-8 {
        (fd - an).abs()
    } else {
        (fd - an).abs() / d
    }
}

fn stencil(h: f64, f: impl Fn(f64) -> f64) -> f64 {
    (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h)
}

fn c2_gradients() -> Verdict {
    let start = Instant::now();
    let mut rng = RngStream::new(2, 0);
    let mut worst = [0.0f64; 4];
    let mut counts = [0usize; 4];

    // base MLP
    let spec = MlpSpec::new(vec![2, 16, 16, 4], Activation::Tanh, Head::SoftmaxClassifier).unwrap();
    let m = MlpModel::init(spec, &mut rng).unwrap();
    let x = rng.gaussian(&[2]).into_data();
    let tr = m.forward(&x).unwrap();
    let (_, g) = loss_eval(LossKind::SoftmaxCe, tr.logits(), Target::Class(1)).unwrap();
    let grads = m.backward(&tr, &g, None).unwrap().flatten(&m);
    for _ in 0..24 {
        let p = rng.below(grads.len());
        let i = rng.below(grads[p].len());
        let fd = stencil(1e-4, |off| {
            let mut mm = m.clone();
            mm.params_mut()[p].data_mut()[i] += off;
            let t = mm.forward(&x).unwrap();
            loss_eval(LossKind::SoftmaxCe, t.logits(), Target::Class(1)).unwrap().0
        });
        worst[0] = worst[0].max(rel_err(fd, grads[p].data()[i]));
        counts[0] += 1;
    }

    // encoders and denoiser
    let dims = [3, 5, 2];
    let manifest = StoreManifest {
        layer: 1,
        matrix_shape: [6, 5],
        input_dim: 3,
        cond_dims: dims,
        records: 0,
        excluded: vec![],
        base_checksum: "fd".into(),
        finetune: FinetuneConfig::default(),
    };
    let cfg = DiffusionConfig {
        d_cond: 8,
        denoiser: DenoiserConfig {
            channels: 4,
            levels: 2,
            attention: true,
            output: OutputParam::CleanEstimate,
        },
        ..DiffusionConfig::default()
    };
    let mut b = DiffusionBundle::new(cfg, &manifest, 5).unwrap();
    for p in b.params_mut() {
        let n = rng.gaussian(p.shape()).scaled(0.05);
        p.axpy(1.0, &n);
    }
    let cond = ConditioningTuple {
        input: rng.gaussian(&[3]).into_data(),
        activation: rng.gaussian(&[5]).into_data(),
        output: rng.gaussian(&[2]).into_data(),
    };
    let delta = rng.gaussian(&[6, 5]).scaled(0.2);
    let side = b.geometry.side;
    let t = 4;
    let eps = rng.gaussian(&[side, side]);
    let (_, grads) = b.objective_and_gradients(&cond, &delta, t, &eps).unwrap();
    let names = b.param_names().to_vec();
    for k in 0..grads.len() {
        let fam = if names[k].starts_with("enc_") { 1 } else { 2 };
        let i = rng.below(grads[k].len());
        let fd = stencil(1e-3, |off| {
            let mut bb = b.clone();
            bb.params_mut()[k].data_mut()[i] += off;
            bb.objective(&cond, &delta, t, &eps).unwrap()
        });
        worst[fam] = worst[fam].max(rel_err(fd, grads[k].data()[i]));
        counts[fam] += 1;
    }
    // encoders have few tensors: top up with extra coordinates
    let enc: Vec<usize> = (0..grads.len()).filter(|&k| names[k].starts_with("enc_")).collect();
    while counts[1] < 20 {
        let k = enc[rng.below(enc.len())];
        let i = rng.below(grads[k].len());
        let fd = stencil(1e-3, |off| {
            let mut bb = b.clone();
            bb.params_mut()[k].data_mut()[i] += off;
            bb.objective(&cond, &delta, t, &eps).unwrap()
        });
        worst[1] = worst[1].max(rel_err(fd, grads[k].data()[i]));
        counts[1] += 1;
    }

    // scale model
    let records: Vec<OverfitRecord> = (0..16)
        .map(|i| {
            let x = rng.gaussian(&[2]).into_data();
            OverfitRecord {
                sample_index: i,
                cond: ConditioningTuple {
                    input: x.clone(),
                    activation: x.iter().map(|v| v.tanh()).collect(),
                    output: vec![x[0] * x[1]],
                },
                x,
                delta: Tensor::zeros(&[1, 1]),
                rho: 0.1 + 0.02 * i as f64,
                loss_before: 1.0,
                loss_after: 0.5,
            }
        })
        .collect();
    let store = RecordStore {
        manifest: StoreManifest {
            layer: 0,
            matrix_shape: [1, 1],
            input_dim: 2,
            cond_dims: [2, 2, 1],
            records: records.len(),
            excluded: vec![],
            base_checksum: String::new(),
            finetune: FinetuneConfig::default(),
        },
        records,
    };
    let sm = train_scale(
        &store,
        &ScaleConfig {
            hidden: vec![8, 8],
            epochs: 1,
            ..ScaleConfig::default()
        },
        &mut RngStream::new(3, 0),
    )
    .unwrap();
    let r = &store.records[5];
    let (_, grads) = record_loss_and_gradients(&sm, r).unwrap();
    for _ in 0..24 {
        let p = rng.below(grads.len());
        let i = rng.below(grads[p].len());
        let fd = stencil(1e-3, |off| {
            let mut m = sm.clone();
            m.mlp.params_mut()[p].data_mut()[i] += off;
            record_loss(&m, r).unwrap()
        });
        worst[3] = worst[3].max(rel_err(fd, grads[p].data()[i]));
        counts[3] += 1;
    }

    let secs = start.elapsed().as_secs_f64();
    let ok = worst[0] < 1e-6 && worst[1] < 1e-6 && worst[2] < 1e-4 && worst[3] < 1e-6 && counts.iter().all(|&c| c >= 20) && secs < 120.0;
    ensure(
        ok,
        format!(
            "max rel err: mlp {:.1e} ({}), encoders {:.1e} ({}), denoiser {:.1e} ({}), scale {:.1e} ({}); {secs:.1}s",
            worst[0], counts[0], worst[1], counts[1], worst[2], counts[2], worst[3], counts[3]
        ),
    )
}

fn c3_kde() -> Verdict {
    let start = Instant::now();
    let normal = RngStream::new(3, 0).gaussian(&[10_000]).into_data();
    let mut r = RngStream::new(3, 1);
    let uniform: Vec<f64> = (0..10_000).map(|_| r.uniform()).collect();
    let hn = kde_entropy(&normal).map_err(|e| e.to_string())?;
    let hu = kde_entropy(&uniform).map_err(|e| e.to_string())?;
    let shifted: Vec<f64> = normal.iter().map(|v| v + 3.25).collect();
    let hs = kde_entropy(&shifted).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    ensure(
        (hn - 1.4189).abs() <= 0.05 && hu.abs() <= 0.05 && (hs - hn).abs() <= 1e-9 && secs < 30.0,
        format!("N(0,1) {hn:.4}, U(0,1) {hu:.4}, shift diff {:.1e}; {secs:.2}s", (hs - hn).abs()),
    )
}

fn c4_normalization(runs: &[&Run]) -> Verdict {
    let mut total = 0;
    let mut worst = 0.0f64;
    let mut min_rho = f64::INFINITY;
    for r in runs {
        for entry in std::fs::read_dir(&r.root).map_err(|e| e.to_string())? {
            let dir = entry.map_err(|e| e.to_string())?.path();
            for sub in ["records", "records_alt"] {
                let p = dir.join(sub);
                if !Checkpoint::exists(&p) {
                    continue;
                }
                let store = RecordStore::load(&p).map_err(|e| e.to_string())?;
                for rec in &store.records {
                    worst = worst.max((rec.delta.norm() - 1.0).abs());
                    min_rho = min_rho.min(rec.rho);
                    total += 1;
                }
            }
        }
    }
    ensure(
        total > 0 && worst <= 1e-9 && min_rho > 0.0,
        format!("{total} records, max | ||delta|| - 1 | = {worst:.1e}, min rho {min_rho:.3e}"),
    )
}

fn c5_overfit_bound(blobs: &Run) -> Verdict {
    let mut lines = Vec::new();
    let mut ok = true;
    for e in &blobs.report.per_seed {
        let base = loss(e, Variant::Base);
        let bound = e.get(Variant::OverfitOnTest).ok_or("overfit_on_test missing")?;
        let acc = bound.accuracy.unwrap_or(0.0);
        ok &= acc == 1.0 && bound.loss <= 0.1 * base;
        lines.push(format!("seed {}: acc {:.2}% CE {:.4} vs base {:.4}", e.seed, 100.0 * acc, bound.loss, base));
    }
    let mut improved = 0;
    let mut n = 0;
    for entry in std::fs::read_dir(&blobs.root).map_err(|e| e.to_string())? {
        let p = entry.map_err(|e| e.to_string())?.path().join("records");
        if Checkpoint::exists(&p) {
            let s = RecordStore::load(&p).map_err(|e| e.to_string())?;
            improved += s.records.iter().filter(|r| r.loss_after < r.loss_before).count();
            n += s.records.len() + s.manifest.excluded.len();
        }
    }
    let frac = improved as f64 / n.max(1) as f64;
    ok &= n > 0 && frac >= 0.95;
    lines.push(format!("3-step finetune reduced loss on {:.1}% of {n} training samples", 100.0 * frac));
    ensure(ok, lines.join("; "))
}

struct Rigged;

impl NoiseModel for Rigged {
    fn predict(&self, omega_t: &Tensor, _t: usize) -> ocd::Result<Tensor> {
        Ok(Tensor::zeros(omega_t.shape()))
    }
}

fn c6_two_atom() -> Verdict {
    const ROWS: usize = 17;
    const COLS: usize = 4;
    let start = Instant::now();
    let mut rng = RngStream::new(7, 0);
    let a = rng.gaussian(&[ROWS, COLS]);
    let a = a.scaled(1.0 / a.norm());
    let mut b = rng.gaussian(&[ROWS, COLS]);
    let proj = b.dot(&a);
    b.axpy(-proj, &a);
    let b = b.scaled(1.0 / b.norm());
    let atoms = [a, b];
    let record = |i: usize, x: Vec<f64>| OverfitRecord {
        sample_index: i,
        cond: ConditioningTuple {
            input: x.clone(),
            activation: x.iter().map(|v| v.tanh()).collect(),
            output: vec![x[0] + x[1], x[0] - x[1]],
        },
        delta: atoms[usize::from(x[0] <= 0.0)].clone(),
        x,
        rho: 1.0,
        loss_before: 1.0,
        loss_after: 0.0,
    };
    let records: Vec<_> = (0..256).map(|i| record(i, rng.gaussian(&[2]).into_data())).collect();
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
            channels: 8,
            ..DenoiserConfig::default()
        },
        lr: 1e-3,
        epochs: 40,
        patience: 40,
        ..DiffusionConfig::default()
    };
    let mut bundle = DiffusionBundle::new(config, &store.manifest, 1).map_err(|e| e.to_string())?;
    bundle.train(&store, &mut RngStream::new(7, 1)).map_err(|e| e.to_string())?;
    let mut test_rng = RngStream::new(99, 0);
    let mut hits = 0;
    for i in 0..200 {
        let rec = record(i, test_rng.gaussian(&[2]).into_data());
        let omega = bundle
            .sample_delta(&rec.cond, &mut test_rng.fork(i as u64), false)
            .map_err(|e| e.to_string())?;
        hits += usize::from(omega.cosine(&rec.delta) > 0.9);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(hits >= 180 && secs < 300.0, format!("{hits}/200 correct atoms; {secs:.1}s"))
}

fn c7_closed_form() -> Verdict {
    let s = NoiseSchedule::new(10).map_err(|e| e.to_string())?;
    let start = RngStream::new(5, 0).gaussian(&[20, 20]);
    let out = ancestral_sample(&Rigged, &s, start.clone(), None).map_err(|e| e.to_string())?;
    let err = out.max_abs_diff(&start.scaled(1.0 / s.alpha_bar(10).sqrt()));
    ensure(err <= 1e-9, format!("max |Omega_0 - Omega_T/sqrt(alpha_bar_T)| = {err:.1e}"))
}

fn c8_direction(task: &str, r: &Run) -> Verdict {
    let mut better_base = 0;
    let mut beats_global = 0;
    let mut per = Vec::new();
    for e in &r.report.per_seed {
        let (o, b, g) = (loss(e, Variant::Ocd), loss(e, Variant::Base), loss(e, Variant::OcdNoScale));
        better_base += usize::from(o < b);
        beats_global += usize::from(o <= g);
        per.push(format!("{}: ocd {o:.5} base {b:.5} no_scale {g:.5}", e.seed));
    }
    let n = r.report.per_seed.len();
    ensure(
        n == 3 && better_base >= 2 && beats_global >= 2 && r.seconds < 600.0,
        format!(
            "{task} [{}] ocd<base {better_base}/{n}, ocd<=no_scale {beats_global}/{n}; pipeline {:.0}s",
            per.join("; "),
            r.seconds
        ),
    )
}

fn c9_ensemble(blobs: &Run) -> Verdict {
    let mut ok = true;
    let mut per = Vec::new();
    let mut ens_sum = 0.0;
    let mut single_sum = 0.0;
    for e in &blobs.report.per_seed {
        let stats = e.ensemble.as_ref().ok_or("no ensemble statistics")?;
        let ens = loss(e, Variant::EnsembleLogitAvg);
        ok &= stats.k == 5 && stats.distinct_min >= 2 && ens <= stats.single_draw_mean_loss;
        ens_sum += ens;
        single_sum += stats.single_draw_mean_loss;
        per.push(format!(
            "{}: ensemble {ens:.5} vs single {:.5}, distinct >= {}",
            e.seed, stats.single_draw_mean_loss, stats.distinct_min
        ));
    }
    ok &= ens_sum <= single_sum;
    ensure(ok, per.join("; "))
}

fn c10_scale_units() -> Verdict {
    let tenth = scale_loss(1.1 * 0.37, 0.37).map_err(|e| e.to_string())?;
    let double = scale_loss(2.0 * 0.37, 0.37).map_err(|e| e.to_string())?;
    let mut invariant = true;
    for (rh, rs) in [(1.1, 1.0), (0.3, 0.7), (5.0, 2.0)] {
        let base = scale_loss(rh, rs).unwrap();
        for c in [0.25, 2.0, 1024.0, 2f64.powi(-30)] {
            invariant &= scale_loss(c * rh, c * rs).unwrap() == base;
        }
    }
    ensure(
        (tenth + 20.0).abs() <= 1e-12 && double == 0.0 && invariant,
        format!("1.1x -> {tenth:.15} dB, 2x -> {double} dB, power-of-two rescaling bit-identical: {invariant}"),
    )
}

fn c11_audit(runs: &[&Run]) -> Verdict {
    let mut ok = true;
    let mut seen = std::collections::BTreeSet::new();
    for r in runs {
        for e in &r.report.per_seed {
            for (&v, &n) in &e.label_reads {
                seen.insert(v);
                if v.reads_test_labels() {
                    ok &= n > 0;
                } else {
                    ok &= n == 0;
                }
            }
        }
    }
    let names: Vec<_> = seen.iter().map(|v| v.name()).collect();
    ensure(
        ok && seen.len() == Variant::ALL.len(),
        format!("audited variants [{}]; reads only by the two test-label bounds", names.join(", ")),
    )
}

fn c12_reproducible(smoke: &PipelineConfig, a: &Run, dir: &Path) -> Verdict {
    let b = run(smoke, &dir.join("second"))?;
    let same_report = a.report.without_timings() == b.report.without_timings();
    let csv_a = std::fs::read(a.root.join("report.csv")).map_err(|e| e.to_string())?;
    let csv_b = std::fs::read(b.root.join("report.csv")).map_err(|e| e.to_string())?;
    let json = |r: &EvalReport| serde_json::to_string(&r.without_timings()).unwrap();
    let same_json = json(&a.report) == json(&b.report);
    // delete only the report and regenerate it from checkpoints
    std::fs::remove_file(a.root.join("report.json")).map_err(|e| e.to_string())?;
    std::fs::remove_file(a.root.join("report.csv")).map_err(|e| e.to_string())?;
    let c = run(smoke, a.root.parent().unwrap())?;
    let csv_c = std::fs::read(c.root.join("report.csv")).map_err(|e| e.to_string())?;
    let regenerated = json(&c.report) == json(&a.report) && csv_c == csv_a && c.report.timings.is_empty();
    ensure(
        same_report && same_json && csv_a == csv_b && regenerated,
        format!(
            "two fresh runs identical: {}; regenerated from checkpoints: {regenerated} ({:.1}s)",
            same_report && same_json && csv_a == csv_b,
            c.seconds
        ),
    )
}

fn main() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let tmp = tempfile::tempdir().expect("temp dir");
    let smoke = PipelineConfig::from_toml(SMOKE).expect("smoke config");
    let blobs_cfg = PipelineConfig::from_toml(DESK_BLOBS).expect("blobs config");
    let tab_cfg = PipelineConfig::from_toml(DESK_TABULAR).expect("tabular config");

    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    let mut check = |id: u32, name: &'static str, f: &mut dyn FnMut() -> Verdict| {
        let v = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(v) => v,
            Err(_) => Err("panicked".to_string()),
        };
        let tag = if v.is_ok() { "PASS" } else { "FAIL" };
        let msg = match &v {
            Ok(m) | Err(m) => m.clone(),
        };
        println!("{tag} [{id:>2}] {name}: {msg}");
        results.push((id, name, v));
    };

    check(1, "schedule exactness", &mut c1_schedule);
    check(2, "gradient integrity", &mut c2_gradients);
    check(3, "KDE entropy oracle", &mut c3_kde);

    let blobs = run(&blobs_cfg, &tmp.path().join("blobs"));
    let tabular = run(&tab_cfg, &tmp.path().join("tabular"));
    let smoke_run = run(&smoke, &tmp.path().join("smoke"));
    let all_runs = || -> Result<Vec<&Run>, String> {
        Ok(vec![blobs.as_ref()?, tabular.as_ref()?, smoke_run.as_ref()?])
    };

    check(4, "normalization invariant", &mut || c4_normalization(&all_runs().map_err(|e| e.clone())?));
    check(5, "overfit bound direction", &mut || c5_overfit_bound(blobs.as_ref().map_err(|e| e.clone())?));
    check(6, "two-atom diffusion oracle", &mut c6_two_atom);
    check(7, "closed-form sampler", &mut c7_closed_form);
    check(8, "end-to-end direction", &mut || {
        let b = c8_direction("blobs", blobs.as_ref().map_err(|e| e.clone())?);
        let t = c8_direction("tabular", tabular.as_ref().map_err(|e| e.clone())?);
        match (b, t) {
            (Ok(x), Ok(y)) => Ok(format!("{x} | {y}")),
            (x, y) => Err(format!(
                "{} | {}",
                x.unwrap_or_else(|e| format!("FAILED {e}")),
                y.unwrap_or_else(|e| format!("FAILED {e}"))
            )),
        }
    });
    check(9, "ensemble stochasticity and gain", &mut || c9_ensemble(blobs.as_ref().map_err(|e| e.clone())?));
    check(10, "scale-loss unit values", &mut c10_scale_units);
    check(11, "label-hygiene audit", &mut || c11_audit(&all_runs().map_err(|e| e.clone())?));
    check(12, "reproducibility", &mut || {
        c12_reproducible(&smoke, smoke_run.as_ref().map_err(|e| e.clone())?, tmp.path())
    });

    let failed: Vec<_> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!("acceptance: {}/{} passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
