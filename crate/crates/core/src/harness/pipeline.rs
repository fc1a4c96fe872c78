//! Staged, resumable pipeline. Each stage persists its artifact under
//! `<out>/<config hash>/seed-<s>/<stage>` and is skipped when that artifact
//! already exists.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hyperdiff::DiffusionBundle;
use crate::layer_select::{select_layer, LayerScoreReport};
use crate::numkit::checkpoint::{load_model, save_model, Checkpoint};
use crate::numkit::{MlpModel, RngStream};
use crate::overfit::{collect, RecordStore};
use crate::scale::{load_scale, save_scale, train_scale, ScaleModel};

use super::config::{PipelineConfig, Variant};
use super::data::{model_spec, prepare_data, train_base, Splits};
use super::eval::{evaluate, EvalContext, OcdArtifacts, SeedEval, TestSet};
use super::report::{EvalReport, ReportFiles};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    TrainBase,
    SelectLayer,
    Collect,
    TrainDiffusion,
    TrainScale,
    Eval,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::TrainBase,
        Stage::SelectLayer,
        Stage::Collect,
        Stage::TrainDiffusion,
        Stage::TrainScale,
        Stage::Eval,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::TrainBase => "train-base",
            Stage::SelectLayer => "select-layer",
            Stage::Collect => "collect",
            Stage::TrainDiffusion => "train-diffusion",
            Stage::TrainScale => "train-scale",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }
}

/// Which layer an OCD branch adapts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Selected,
    RunnerUp,
}

impl Branch {
    fn suffix(self) -> &'static str {
        match self {
            Branch::Selected => "",
            Branch::RunnerUp => "_alt",
        }
    }

    fn stream_offset(self) -> u64 {
        match self {
            Branch::Selected => 0,
            Branch::RunnerUp => 0x100,
        }
    }
}

const STREAM_INIT: u64 = 1;
const STREAM_ORDER: u64 = 2;
const STREAM_SUBSET: u64 = 3;
const STREAM_SELECT: u64 = 4;
const STREAM_DIFFUSION: u64 = 5;
const STREAM_SCALE: u64 = 6;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(value)?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// A configured run rooted at `<out>/<config hash>`.
#[derive(Debug)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub hash: String,
    pub root: PathBuf,
    timings: RefCell<BTreeMap<String, f64>>,
}

impl Pipeline {
    /// Validates the config and writes it into the run directory.
    pub fn new(config: PipelineConfig, out: &Path) -> Result<Self> {
        config.validate()?;
        let hash = config.hash();
        let root = out.join(&hash[..16]);
        fs::create_dir_all(&root)?;
        fs::write(root.join("config.toml"), config.to_toml()?)?;
        Ok(Self {
            config,
            hash,
            root,
            timings: RefCell::new(BTreeMap::new()),
        })
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed-{seed}"))
    }

    /// Wall-clock seconds per stage spent in this process (summed over
    /// seeds); cached stages do not appear.
    pub fn timings(&self) -> BTreeMap<String, f64> {
        self.timings.borrow().clone()
    }

    fn timed<T>(&self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f().map_err(|e| e.in_stage(stage))?;
        *self.timings.borrow_mut().entry(stage.to_string()).or_insert(0.0) += start.elapsed().as_secs_f64();
        Ok(out)
    }

    fn alt_requested(&self) -> bool {
        self.config.variants().contains(&Variant::AltLayer)
    }

    pub fn data(&self, seed: u64) -> Result<Splits> {
        prepare_data(&self.config, seed).map_err(|e| e.in_stage("data"))
    }

    pub fn base(&self, seed: u64, data: &Splits) -> Result<MlpModel> {
        let dir = self.seed_dir(seed).join("base");
        if Checkpoint::exists(&dir) {
            return load_model(&dir).map_err(|e| e.in_stage(Stage::TrainBase.name()));
        }
        self.timed(Stage::TrainBase.name(), || {
            let spec = model_spec(&self.config.model, &data.train)?;
            let (model, history) = train_base(
                spec,
                &data.train,
                &self.config.base,
                &mut RngStream::new(seed, STREAM_INIT),
                &mut RngStream::new(seed, STREAM_ORDER),
            )?;
            log::info!(
                "seed {seed}: base trained, loss {:.4} -> {:.4}",
                history[0],
                history.last().expect("epochs >= 1")
            );
            save_model(&dir, &model, Stage::TrainBase.name(), seed)?;
            Ok(model)
        })
    }

    pub fn selection(&self, seed: u64, base: &MlpModel, data: &Splits) -> Result<LayerScoreReport> {
        let path = self.seed_dir(seed).join("select").join("report.json");
        if path.exists() {
            return read_json(&path).map_err(|e| e.in_stage(Stage::SelectLayer.name()));
        }
        self.timed(Stage::SelectLayer.name(), || {
            let mut idx: Vec<usize> = (0..data.train.len()).collect();
            RngStream::new(seed, STREAM_SUBSET).shuffle(&mut idx);
            idx.truncate(self.config.select.subset.min(idx.len()));
            let subset = data.train.subset(&idx);
            let report = select_layer(
                base,
                &subset,
                &self.config.select.selection(),
                &RngStream::new(seed, STREAM_SELECT),
            )?;
            log::info!("seed {seed}: selected layer {} (runner-up {:?})", report.selected, report.runner_up);
            write_json(&path, &report)?;
            fs::write(path.with_file_name("scores.csv"), report.to_csv()?)?;
            Ok(report)
        })
    }

    fn branch_layer(&self, sel: &LayerScoreReport, branch: Branch) -> Result<usize> {
        match branch {
            Branch::Selected => Ok(sel.selected),
            Branch::RunnerUp => sel.runner_up.ok_or_else(|| Error::MissingArtifact {
                variant: Variant::AltLayer.name().into(),
                artifact: "runner-up layer (model has a single layer)".into(),
            }),
        }
    }

    pub fn records(&self, seed: u64, base: &MlpModel, data: &Splits, layer: usize, branch: Branch) -> Result<RecordStore> {
        let dir = self.seed_dir(seed).join(format!("records{}", branch.suffix()));
        if Checkpoint::exists(&dir) {
            return RecordStore::load(&dir).map_err(|e| e.in_stage(Stage::Collect.name()));
        }
        self.timed(Stage::Collect.name(), || {
            let store = collect(base, layer, &data.train, &self.config.finetune)?;
            if store.is_empty() {
                return Err(Error::InvalidArgument("every training sample was excluded".into()));
            }
            log::info!(
                "seed {seed}: collected {} records on layer {layer} ({} excluded)",
                store.len(),
                store.manifest.excluded.len()
            );
            store.save(&dir, seed)?;
            Ok(store)
        })
    }

    pub fn diffusion(&self, seed: u64, base: &MlpModel, store: &RecordStore, branch: Branch) -> Result<DiffusionBundle> {
        let dir = self.seed_dir(seed).join(format!("diffusion{}", branch.suffix()));
        let checksum = base.checksum();
        if Checkpoint::exists(&dir) {
            return DiffusionBundle::load(&dir, Some(&checksum)).map_err(|e| e.in_stage(Stage::TrainDiffusion.name()));
        }
        self.timed(Stage::TrainDiffusion.name(), || {
            let init_seed = seed.wrapping_add(branch.stream_offset());
            let mut bundle = DiffusionBundle::new(self.config.diffusion.clone(), &store.manifest, init_seed)?;
            let mut rng = RngStream::new(seed, STREAM_DIFFUSION + branch.stream_offset());
            let summary = bundle.train(store, &mut rng)?;
            log::info!(
                "seed {seed}: diffusion trained {} epochs, objective {:.4}",
                summary.epoch_losses.len(),
                summary.epoch_losses.last().copied().unwrap_or(f64::NAN)
            );
            bundle.save(&dir, seed)?;
            Ok(bundle)
        })
    }

    pub fn scale(&self, seed: u64, store: &RecordStore, branch: Branch) -> Result<ScaleModel> {
        let dir = self.seed_dir(seed).join(format!("scale{}", branch.suffix()));
        if Checkpoint::exists(&dir) {
            return load_scale(&dir).map_err(|e| e.in_stage(Stage::TrainScale.name()));
        }
        self.timed(Stage::TrainScale.name(), || {
            let mut rng = RngStream::new(seed, STREAM_SCALE + branch.stream_offset());
            let model = train_scale(store, &self.config.scale, &mut rng)?;
            save_scale(&dir, &model, seed)?;
            Ok(model)
        })
    }

    /// Runs the OCD stages for one branch up to `until`; returns the full
    /// artifact set only when every stage ran.
    fn branch(
        &self,
        seed: u64,
        base: &MlpModel,
        data: &Splits,
        sel: &LayerScoreReport,
        branch: Branch,
        until: Stage,
    ) -> Result<Option<OcdArtifacts>> {
        let layer = self.branch_layer(sel, branch)?;
        let store = self.records(seed, base, data, layer, branch)?;
        if until < Stage::TrainDiffusion {
            return Ok(None);
        }
        let bundle = self.diffusion(seed, base, &store, branch)?;
        if until < Stage::TrainScale {
            return Ok(None);
        }
        let scale = self.scale(seed, &store, branch)?;
        Ok(Some(OcdArtifacts {
            layer,
            store,
            bundle,
            scale,
        }))
    }

    /// All stages for one seed up to and including `until`.
    pub fn run_seed(&self, seed: u64, until: Stage) -> Result<Option<SeedEval>> {
        let data = self.data(seed)?;
        let base = self.base(seed, &data)?;
        if until < Stage::SelectLayer {
            return Ok(None);
        }
        let sel = self.selection(seed, &base, &data)?;
        if until < Stage::Collect {
            return Ok(None);
        }
        let primary = self.branch(seed, &base, &data, &sel, Branch::Selected, until)?;
        let alt = if self.alt_requested() {
            self.branch(seed, &base, &data, &sel, Branch::RunnerUp, until)?
        } else {
            None
        };
        if until < Stage::Eval {
            return Ok(None);
        }
        let path = self.seed_dir(seed).join("eval").join("metrics.json");
        if path.exists() {
            return read_json(&path).map(Some).map_err(|e| e.in_stage(Stage::Eval.name()));
        }
        self.timed(Stage::Eval.name(), || {
            let ctx = EvalContext {
                seed,
                base: &base,
                primary: primary.as_ref(),
                alt: alt.as_ref(),
                bound_finetune: self.config.bound_finetune(),
                ensemble_k: self.config.eval.ensemble_k,
            };
            let test = TestSet::new(data.test.clone());
            let eval = evaluate(&ctx, &test, &self.config.variants())?;
            write_json(&path, &eval)?;
            Ok(eval)
        })
        .map(Some)
    }

    /// Runs every seed through `until`; at `Report` (or `Eval`) also writes
    /// the aggregated report.
    pub fn run_until(&self, until: Stage) -> Result<Option<(EvalReport, ReportFiles)>> {
        let mut evals = Vec::with_capacity(self.config.seeds.len());
        for &seed in &self.config.seeds {
            if let Some(e) = self.run_seed(seed, until)? {
                evals.push(e);
            }
        }
        if until < Stage::Eval {
            return Ok(None);
        }
        let report = EvalReport::aggregate(&self.config, &evals, self.timings()).map_err(|e| e.in_stage("report"))?;
        let files = report.emit(&self.root).map_err(|e| e.in_stage("report"))?;
        Ok(Some((report, files)))
    }
}

/// Convenience: validate, run every stage and return the report.
pub fn run_pipeline(config: PipelineConfig, out: &Path) -> Result<EvalReport> {
    let p = Pipeline::new(config, out)?;
    let (report, _) = p.run_until(Stage::Report)?.expect("report stage produces a report");
    Ok(report)
}
