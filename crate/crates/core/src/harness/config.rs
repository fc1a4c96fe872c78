//! Pipeline configuration: a TOML file over built-in defaults, with dotted
//! `key=value` overrides on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::SplitSpec;
use crate::error::{Error, Result};
use crate::hyperdiff::DiffusionConfig;
use crate::layer_select::SelectionConfig;
use crate::numkit::Activation;
use crate::overfit::FinetuneConfig;
use crate::scale::ScaleConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlobsConfig {
    pub n: usize,
    pub classes: usize,
    pub spread: f64,
    pub dim: usize,
    pub seed: u64,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        Self {
            n: 4000,
            classes: 4,
            spread: 0.8,
            dim: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TabularConfig {
    pub n: usize,
    pub d: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for TabularConfig {
    fn default() -> Self {
        Self {
            n: 5000,
            d: 8,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvConfig {
    pub path: PathBuf,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxConfig {
    pub images: PathBuf,
    pub labels: PathBuf,
    #[serde(default = "default_idx_limit")]
    pub limit: usize,
}

fn default_idx_limit() -> usize {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Blobs(BlobsConfig),
    Tabular(TabularConfig),
    Csv(CsvConfig),
    Idx(IdxConfig),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Blobs(BlobsConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![16, 16],
            activation: Activation::Tanh,
        }
    }
}

/// Minibatch Adam on the mean training loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-2,
            batch: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectConfig {
    pub draws: usize,
    pub sigma_rel: f64,
    /// Training samples scored per layer.
    pub subset: usize,
}

impl Default for SelectConfig {
    fn default() -> Self {
        let s = SelectionConfig::default();
        Self {
            draws: s.draws,
            sigma_rel: s.sigma_rel,
            subset: 64,
        }
    }
}

impl SelectConfig {
    pub fn selection(&self) -> SelectionConfig {
        SelectionConfig {
            draws: self.draws,
            sigma_rel: self.sigma_rel,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Base,
    Ocd,
    OcdNoScale,
    NearestNeighbor,
    AltLayer,
    OverfitOnTest,
    OverfitOnTestAll,
    EnsembleLogitAvg,
    EnsembleWeightAvg,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Base,
        Variant::Ocd,
        Variant::OcdNoScale,
        Variant::NearestNeighbor,
        Variant::AltLayer,
        Variant::OverfitOnTest,
        Variant::OverfitOnTestAll,
        Variant::EnsembleLogitAvg,
        Variant::EnsembleWeightAvg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Ocd => "ocd",
            Variant::OcdNoScale => "ocd_no_scale",
            Variant::NearestNeighbor => "nearest_neighbor",
            Variant::AltLayer => "alt_layer",
            Variant::OverfitOnTest => "overfit_on_test",
            Variant::OverfitOnTestAll => "overfit_on_test_all",
            Variant::EnsembleLogitAvg => "ensemble_logit_avg",
            Variant::EnsembleWeightAvg => "ensemble_weight_avg",
        }
    }

    /// Upper bounds that finetune on the test label.
    pub fn reads_test_labels(self) -> bool {
        matches!(self, Variant::OverfitOnTest | Variant::OverfitOnTestAll)
    }

    pub fn needs_diffusion(self) -> bool {
        matches!(
            self,
            Variant::Ocd | Variant::OcdNoScale | Variant::EnsembleLogitAvg | Variant::EnsembleWeightAvg
        )
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub variants: Vec<Variant>,
    /// Draws per test sample for the ensemble variants.
    pub ensemble_k: usize,
    /// Finetune settings for the two test-label bounds; `None` reuses the
    /// corpus finetune.
    pub bound_finetune: Option<FinetuneConfig>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            ensemble_k: 5,
            bound_finetune: Some(FinetuneConfig {
                steps: 3,
                lr: 1.0,
                until_converged: None,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub dataset: DatasetConfig,
    pub split: SplitSpec,
    pub model: ModelConfig,
    pub base: BaseTrainConfig,
    pub select: SelectConfig,
    pub finetune: FinetuneConfig,
    pub diffusion: DiffusionConfig,
    pub scale: ScaleConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            name: "ocd".into(),
            seeds: vec![42, 43, 44],
            dataset: DatasetConfig::default(),
            split: SplitSpec::default(),
            model: ModelConfig::default(),
            base: BaseTrainConfig::default(),
            select: SelectConfig::default(),
            finetune: FinetuneConfig::default(),
            diffusion: DiffusionConfig::default(),
            scale: ScaleConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| invalid(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| invalid(format!("config: {e}")))
    }

    /// Apply `section.key=value` overrides. Values parse as TOML (numbers,
    /// booleans, arrays, quoted strings); anything else is taken as a bare
    /// string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Value::try_from(self).map_err(|e| invalid(format!("config: {e}")))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| invalid(format!("override `{o}` is not key=value")))?;
            let value = parse_value(raw.trim());
            let path: Vec<&str> = key.trim().split('.').collect();
            set_path(&mut root, &path, value).map_err(|m| invalid(format!("override `{o}`: {m}")))?;
        }
        root.try_into().map_err(|e: toml::de::Error| invalid(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(invalid("at least one seed is required"));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(invalid("seeds must be distinct"));
        }
        match &self.dataset {
            DatasetConfig::Blobs(b) => {
                if b.classes < 2 || b.n < b.classes || b.dim < 2 || !(b.spread >= 0.0) {
                    return Err(invalid("blobs need n >= classes >= 2, dim >= 2, spread >= 0"));
                }
            }
            DatasetConfig::Tabular(t) => {
                if t.n == 0 || t.d == 0 || !(t.noise_std >= 0.0) {
                    return Err(invalid("tabular data needs n, d >= 1 and noise_std >= 0"));
                }
            }
            DatasetConfig::Csv(c) => {
                if c.target.is_empty() {
                    return Err(invalid("csv dataset needs a target column"));
                }
            }
            DatasetConfig::Idx(i) => {
                if i.limit == 0 {
                    return Err(invalid("idx limit must be positive"));
                }
            }
        }
        self.split.validate()?;
        if self.model.hidden.contains(&0) {
            return Err(invalid("hidden layer widths must be positive"));
        }
        if self.base.epochs == 0 || self.base.batch == 0 || !(self.base.lr > 0.0) {
            return Err(invalid("base training needs positive epochs, batch and lr"));
        }
        let s = &self.select;
        if s.subset == 0 || s.draws < 2 || !(s.sigma_rel > 0.0) {
            return Err(invalid("layer selection needs subset >= 1, draws >= 2, sigma_rel > 0"));
        }
        for (what, f) in [("finetune", Some(&self.finetune)), ("eval.bound_finetune", self.eval.bound_finetune.as_ref())] {
            if let Some(f) = f {
                if f.steps == 0 || !(f.lr > 0.0) {
                    return Err(invalid(format!("{what} needs steps >= 1 and lr > 0")));
                }
            }
        }
        self.diffusion.validate()?;
        let sc = &self.scale;
        if sc.epochs == 0 || sc.batch == 0 || !(sc.lr > 0.0) || sc.hidden.contains(&0) {
            return Err(invalid("scale training needs positive epochs, batch, lr and widths"));
        }
        if self.eval.variants.is_empty() {
            return Err(invalid("no evaluation variants requested"));
        }
        if self.eval.ensemble_k == 0 {
            return Err(invalid("ensemble_k must be at least 1"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&bytes))
    }

    /// The variants in canonical order, deduplicated.
    pub fn variants(&self) -> Vec<Variant> {
        let mut v = self.eval.variants.clone();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn bound_finetune(&self) -> FinetuneConfig {
        self.eval.bound_finetune.unwrap_or(self.finetune)
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(node: &mut toml::Value, path: &[&str], value: toml::Value) -> std::result::Result<(), String> {
    let (head, rest) = path.split_first().ok_or("empty key")?;
    let table = node.as_table_mut().ok_or_else(|| format!("`{head}` is not inside a table"))?;
    if rest.is_empty() {
        table.insert(head.to_string(), value);
        return Ok(());
    }
    let child = table
        .entry(head.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    set_path(child, rest, value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        let back = PipelineConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = PipelineConfig::from_toml(
            "seeds = [1]\n[dataset]\nkind = \"tabular\"\nn = 300\n[diffusion]\nepochs = 2\n[diffusion.denoiser]\nchannels = 8\n",
        )
        .unwrap();
        assert_eq!(c.seeds, vec![1]);
        assert_eq!(
            c.dataset,
            DatasetConfig::Tabular(TabularConfig {
                n: 300,
                ..TabularConfig::default()
            })
        );
        assert_eq!(c.diffusion.epochs, 2);
        assert_eq!(c.diffusion.denoiser.channels, 8);
        assert_eq!(c.diffusion.steps, 10);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(PipelineConfig::from_toml("bogus = 1").is_err());
        assert!(PipelineConfig::from_toml("[base]\nepoch = 3").is_err());
    }

    #[test]
    fn overrides_apply_and_change_hash() {
        let c = PipelineConfig::default();
        let o = c
            .with_overrides(&["diffusion.epochs=3", "seeds=[7, 8]", "eval.variants=[\"base\", \"ocd\"]", "dataset.spread=1.5"])
            .unwrap();
        assert_eq!(o.diffusion.epochs, 3);
        assert_eq!(o.seeds, vec![7, 8]);
        assert_eq!(o.variants(), vec![Variant::Base, Variant::Ocd]);
        match &o.dataset {
            DatasetConfig::Blobs(b) => assert_eq!(b.spread, 1.5),
            _ => panic!("dataset kind changed"),
        }
        assert_ne!(o.hash(), c.hash());
        assert!(c.with_overrides(&["nokey"]).is_err());
        assert!(c.with_overrides(&["base.nonsense=1"]).is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        let bad = [
            PipelineConfig::default().with_overrides(&["seeds=[]"]).unwrap(),
            PipelineConfig::default().with_overrides(&["seeds=[1, 1]"]).unwrap(),
            PipelineConfig::default().with_overrides(&["eval.ensemble_k=0"]).unwrap(),
            PipelineConfig::default().with_overrides(&["finetune.steps=0"]).unwrap(),
            PipelineConfig::default().with_overrides(&["diffusion.steps=1"]).unwrap(),
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }
}
