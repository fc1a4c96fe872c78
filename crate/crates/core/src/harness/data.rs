//! Dataset preparation and conventional base-model training.

use crate::datasets::{
    gen_blobs, gen_tabular_reg, load_csv_table, load_idx, split, standardize_splits, Dataset, SplitSpec, Standardizer,
    Task,
};
use crate::error::{Error, Result};
use crate::numkit::{loss_eval, AdamState, Head, LossKind, MlpModel, MlpSpec, RngStream};

use super::config::{BaseTrainConfig, DatasetConfig, ModelConfig, PipelineConfig};

/// Standardised splits; statistics come from the training rows only.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub standardizer: Standardizer,
}

pub fn load_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    match cfg {
        DatasetConfig::Blobs(b) => gen_blobs(b.seed, b.n, b.classes, b.spread, b.dim),
        DatasetConfig::Tabular(t) => gen_tabular_reg(t.seed, t.n, t.d, t.noise_std),
        DatasetConfig::Csv(c) => load_csv_table(&c.path, &c.target),
        DatasetConfig::Idx(i) => load_idx(&i.images, &i.labels, i.limit),
    }
}

/// The dataset itself is fixed by its own seed; the split shuffle also
/// depends on the run seed so repetitions see different partitions.
pub fn prepare_data(cfg: &PipelineConfig, run_seed: u64) -> Result<Splits> {
    let data = load_dataset(&cfg.dataset)?;
    let spec = SplitSpec {
        seed: cfg.split.seed.wrapping_add(run_seed),
        ..cfg.split.clone()
    };
    let (train, val, test) = split(&data, &spec)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidArgument("train and test splits must be non-empty".into()));
    }
    let (train, val, test, standardizer) = standardize_splits(&train, &val, &test);
    Ok(Splits {
        train,
        val,
        test,
        standardizer,
    })
}

pub fn model_spec(cfg: &ModelConfig, data: &Dataset) -> Result<MlpSpec> {
    let mut sizes = vec![data.dim()];
    sizes.extend_from_slice(&cfg.hidden);
    sizes.push(data.output_dim());
    let head = match data.task {
        Task::Classification { .. } => Head::SoftmaxClassifier,
        Task::Regression { .. } => Head::LinearRegressor,
    };
    MlpSpec::new(sizes, cfg.activation, head)
}

/// Mean loss of `model` over `data`.
pub fn mean_loss(model: &MlpModel, data: &Dataset) -> Result<f64> {
    let kind = LossKind::for_head(model.spec.output_head);
    let mut total = 0.0;
    for i in 0..data.len() {
        let trace = model.forward(data.x(i))?;
        total += loss_eval(kind, trace.logits(), data.target(i))?.0;
    }
    Ok(total / data.len() as f64)
}

/// Minibatch Adam from a seeded initialisation. Returns the model and the
/// per-epoch mean training loss.
pub fn train_base(
    spec: MlpSpec,
    train: &Dataset,
    cfg: &BaseTrainConfig,
    init: &mut RngStream,
    order_rng: &mut RngStream,
) -> Result<(MlpModel, Vec<f64>)> {
    let mut model = MlpModel::init(spec, init)?;
    let kind = LossKind::for_head(model.spec.output_head);
    let mut adam = AdamState::new(model.param_names(), model.params().iter().map(|t| t.shape()));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order_rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let mut acc = None;
            for &i in chunk {
                let trace = model.forward(train.x(i))?;
                let (loss, g) = loss_eval(kind, trace.logits(), train.target(i))?;
                total += loss;
                let grads = model.backward(&trace, &g, None)?;
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(a) => a.accumulate(&grads),
                }
            }
            let mut flat = acc.expect("non-empty chunk").flatten(&model);
            flat.iter_mut().for_each(|g| g.scale(1.0 / chunk.len() as f64));
            adam.step(&mut model.params_mut(), &flat, cfg.lr)?;
        }
        let mean = total / train.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite(format!("base training loss at epoch {epoch}")));
        }
        log::debug!("base epoch {epoch}: loss {mean:.5}");
        history.push(mean);
    }
    Ok((model, history))
}
