//! Experiment configuration: every hyperparameter plus one master seed.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Which pipeline variant a run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Train / pseudo-label / query / reveal cycles.
    Active,
    /// Self-training only: pseudo-labels, never any oracle reveals.
    Ssl,
    /// Train once on the initially labeled images.
    Supervised,
}

/// Parameters that fully determine one generated scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneParams {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Shapes drawn per non-background class; 0 leaves pure background.
    pub shapes_per_class: u32,
    /// Per-pixel Gaussian color noise sigma.
    pub color_noise_sigma: f64,
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        if self.height < 32 || self.width < 32 {
            return Err(CoreError::config(format!(
                "scene dimensions must be at least 32x32, got {}x{}",
                self.height, self.width
            )));
        }
        if self.num_classes < 2 || self.num_classes > 32 {
            return Err(CoreError::config(format!(
                "num_classes must be in [2, 32], got {}",
                self.num_classes
            )));
        }
        if !self.color_noise_sigma.is_finite() || self.color_noise_sigma < 0.0 {
            return Err(CoreError::config("color_noise_sigma must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Dataset geometry and generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Directory the generated dataset lives in (used by the CLI).
    #[serde(default = "default_dataset_dir")]
    pub dir: String,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_val")]
    pub n_val: usize,
    #[serde(default = "default_side")]
    pub height: usize,
    #[serde(default = "default_side")]
    pub width: usize,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    #[serde(default = "default_shapes_per_class")]
    pub shapes_per_class: u32,
    #[serde(default = "default_noise_sigma")]
    pub color_noise_sigma: f64,
}

impl DatasetConfig {
    pub fn scene_params(&self) -> SceneParams {
        SceneParams {
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            shapes_per_class: self.shapes_per_class,
            color_noise_sigma: self.color_noise_sigma,
        }
    }
}

fn default_dataset_dir() -> String {
    String::from("data/synth")
}
fn default_n_train() -> usize {
    120
}
fn default_n_val() -> usize {
    30
}
fn default_side() -> usize {
    64
}
fn default_num_classes() -> usize {
    6
}
fn default_shapes_per_class() -> u32 {
    2
}
fn default_noise_sigma() -> f64 {
    0.05
}

/// Encoder/decoder architecture knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Output channels of each conv block; each block halves resolution.
    #[serde(default = "default_channels")]
    pub channels: Vec<usize>,
    #[serde(default = "default_convs_per_block")]
    pub convs_per_block: usize,
    /// Dimension D of the contrastive embedding head.
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    /// Dropout rate used when forward runs with noise enabled.
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_channels() -> Vec<usize> {
    vec![8, 16, 32]
}
fn default_convs_per_block() -> usize {
    1
}
fn default_embed_dim() -> usize {
    16
}
fn default_dropout() -> f64 {
    0.1
}

/// SGD with momentum plus the poly learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_poly_power")]
    pub poly_power: f64,
}

fn default_lr() -> f64 {
    5e-2
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_poly_power() -> f64 {
    0.9
}

/// Per-cycle training schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default = "default_epochs_per_cycle")]
    pub epochs_per_cycle: usize,
    #[serde(default = "default_iterations_per_epoch")]
    pub iterations_per_epoch: usize,
    /// Epoch multiplier applied to the last active-learning cycle.
    #[serde(default = "default_final_multiplier")]
    pub final_cycle_multiplier: f64,
    #[serde(default = "default_batch_labeled")]
    pub batch_labeled: usize,
    #[serde(default = "default_batch_unlabeled")]
    pub batch_unlabeled: usize,
}

fn default_epochs_per_cycle() -> usize {
    12
}
fn default_iterations_per_epoch() -> usize {
    25
}
fn default_final_multiplier() -> f64 {
    1.5
}
fn default_batch_labeled() -> usize {
    2
}
fn default_batch_unlabeled() -> usize {
    4
}

/// Contrastive loss hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecoConfig {
    /// Temperature tau scaling all similarities.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Confidence cut-off selecting query pixels (keep confidence <= delta_s).
    #[serde(default = "default_delta_s")]
    pub delta_s: f64,
    /// Maximum queries sampled per class.
    #[serde(default = "default_queries_per_class")]
    pub queries_per_class: usize,
    /// Negative keys sampled per class query set.
    #[serde(default = "default_negatives_per_query")]
    pub negatives_per_query: usize,
    /// Loss weight lambda combining with cross-entropy.
    #[serde(default = "default_reco_weight")]
    pub weight: f64,
}

impl RecoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(CoreError::config("reco.temperature must be > 0"));
        }
        if !(self.delta_s > 0.0 && self.delta_s < 1.0) {
            return Err(CoreError::config("reco.delta_s must be in (0, 1)"));
        }
        if self.queries_per_class == 0 || self.negatives_per_query == 0 {
            return Err(CoreError::config(
                "reco.queries_per_class and reco.negatives_per_query must be >= 1",
            ));
        }
        if !(self.weight >= 0.0) {
            return Err(CoreError::config("reco.weight must be >= 0"));
        }
        Ok(())
    }
}

impl Default for RecoConfig {
    fn default() -> Self {
        RecoConfig {
            temperature: default_temperature(),
            delta_s: default_delta_s(),
            queries_per_class: default_queries_per_class(),
            negatives_per_query: default_negatives_per_query(),
            weight: default_reco_weight(),
        }
    }
}

fn default_temperature() -> f64 {
    0.5
}
fn default_delta_s() -> f64 {
    0.97
}
fn default_queries_per_class() -> usize {
    32
}
fn default_negatives_per_query() -> usize {
    64
}
fn default_reco_weight() -> f64 {
    1.0
}

/// Labeling budget and pseudo-label admission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelConfig {
    /// Fraction of train images fully labeled at the start.
    #[serde(default = "default_initial_fraction")]
    pub initial_fraction: f64,
    /// Confidence a prediction must exceed to become a pseudo-label.
    #[serde(default = "default_pseudo_threshold")]
    pub pseudo_threshold: f64,
    /// Side length R of the square query regions.
    #[serde(default = "default_region_size")]
    pub region_size: usize,
    /// Regions revealed per unlabeled image per cycle.
    #[serde(default = "default_regions_per_image")]
    pub regions_per_image: usize,
}

fn default_initial_fraction() -> f64 {
    0.10
}
fn default_pseudo_threshold() -> f64 {
    0.7
}
fn default_region_size() -> usize {
    8
}
fn default_regions_per_image() -> usize {
    4
}

/// The complete, self-contained description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_master_seed")]
    pub master_seed: u64,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default = "default_dataset_config")]
    pub dataset: DatasetConfig,
    #[serde(default = "default_model_config")]
    pub model: ModelConfig,
    #[serde(default = "default_optimizer_config")]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_schedule_config")]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub reco: RecoConfig,
    #[serde(default = "default_label_config")]
    pub labels: LabelConfig,
    /// Number of active-learning cycles after the initial training phase.
    #[serde(default = "default_al_cycles")]
    pub al_cycles: usize,
    /// Number of pseudo-label/retrain rounds in ssl mode.
    #[serde(default = "default_ssl_retrains")]
    pub ssl_retrains: usize,
    /// Carry model weights across cycles instead of re-initializing.
    #[serde(default = "default_carry_weights")]
    pub carry_weights: bool,
}

fn default_name() -> String {
    String::from("run")
}
fn default_master_seed() -> u64 {
    1
}
fn default_mode() -> Mode {
    Mode::Active
}
fn default_dataset_config() -> DatasetConfig {
    DatasetConfig {
        dir: default_dataset_dir(),
        n_train: default_n_train(),
        n_val: default_n_val(),
        height: default_side(),
        width: default_side(),
        num_classes: default_num_classes(),
        shapes_per_class: default_shapes_per_class(),
        color_noise_sigma: default_noise_sigma(),
    }
}
fn default_model_config() -> ModelConfig {
    ModelConfig {
        channels: default_channels(),
        convs_per_block: default_convs_per_block(),
        embed_dim: default_embed_dim(),
        dropout: default_dropout(),
    }
}
fn default_optimizer_config() -> OptimizerConfig {
    OptimizerConfig {
        lr: default_lr(),
        momentum: default_momentum(),
        weight_decay: default_weight_decay(),
        poly_power: default_poly_power(),
    }
}
fn default_schedule_config() -> ScheduleConfig {
    ScheduleConfig {
        epochs_per_cycle: default_epochs_per_cycle(),
        iterations_per_epoch: default_iterations_per_epoch(),
        final_cycle_multiplier: default_final_multiplier(),
        batch_labeled: default_batch_labeled(),
        batch_unlabeled: default_batch_unlabeled(),
    }
}
fn default_label_config() -> LabelConfig {
    LabelConfig {
        initial_fraction: default_initial_fraction(),
        pseudo_threshold: default_pseudo_threshold(),
        region_size: default_region_size(),
        regions_per_image: default_regions_per_image(),
    }
}
fn default_al_cycles() -> usize {
    2
}
fn default_ssl_retrains() -> usize {
    2
}
fn default_carry_weights() -> bool {
    true
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: default_name(),
            master_seed: default_master_seed(),
            mode: default_mode(),
            dataset: default_dataset_config(),
            model: default_model_config(),
            optimizer: default_optimizer_config(),
            schedule: default_schedule_config(),
            reco: RecoConfig::default(),
            labels: default_label_config(),
            al_cycles: default_al_cycles(),
            ssl_retrains: default_ssl_retrains(),
            carry_weights: default_carry_weights(),
        }
    }
}

impl ExperimentConfig {
    /// Check every cross-field invariant; returns the first violation.
    pub fn validate(&self) -> Result<()> {
        self.dataset.scene_params().validate()?;
        self.reco.validate()?;
        if self.dataset.n_train == 0 || self.dataset.n_val == 0 {
            return Err(CoreError::config("n_train and n_val must be >= 1"));
        }
        let r = self.labels.region_size;
        if r == 0 || self.dataset.height % r != 0 || self.dataset.width % r != 0 {
            return Err(CoreError::config(format!(
                "image dimensions {}x{} must be divisible by region_size {}",
                self.dataset.height, self.dataset.width, r
            )));
        }
        let reduction = 1usize << self.model.channels.len();
        if self.dataset.height % reduction != 0 || self.dataset.width % reduction != 0 {
            return Err(CoreError::config(format!(
                "image dimensions must be divisible by the {}x encoder reduction",
                reduction
            )));
        }
        if self.model.channels.is_empty() || self.model.convs_per_block == 0 {
            return Err(CoreError::config("model must have at least one conv block"));
        }
        if self.model.embed_dim < 2 {
            return Err(CoreError::config("model.embed_dim must be >= 2"));
        }
        if !(self.model.dropout >= 0.0 && self.model.dropout < 1.0) {
            return Err(CoreError::config("model.dropout must be in [0, 1)"));
        }
        if !(self.optimizer.lr > 0.0) || !(self.optimizer.poly_power > 0.0) {
            return Err(CoreError::config("optimizer.lr and poly_power must be > 0"));
        }
        if !(self.optimizer.momentum >= 0.0 && self.optimizer.momentum < 1.0) {
            return Err(CoreError::config("optimizer.momentum must be in [0, 1)"));
        }
        if !(self.optimizer.weight_decay >= 0.0) {
            return Err(CoreError::config("optimizer.weight_decay must be >= 0"));
        }
        if self.schedule.epochs_per_cycle == 0 || self.schedule.iterations_per_epoch == 0 {
            return Err(CoreError::config("schedule epochs and iterations must be >= 1"));
        }
        if !(self.schedule.final_cycle_multiplier > 0.0) {
            return Err(CoreError::config("schedule.final_cycle_multiplier must be > 0"));
        }
        if self.schedule.batch_labeled == 0 {
            return Err(CoreError::config("schedule.batch_labeled must be >= 1"));
        }
        if !(self.labels.initial_fraction > 0.0 && self.labels.initial_fraction < 1.0) {
            return Err(CoreError::config("labels.initial_fraction must be in (0, 1)"));
        }
        if !(self.labels.pseudo_threshold > 0.0 && self.labels.pseudo_threshold < 1.0) {
            return Err(CoreError::config("labels.pseudo_threshold must be in (0, 1)"));
        }
        if self.labels.regions_per_image == 0 {
            return Err(CoreError::config("labels.regions_per_image must be >= 1"));
        }
        Ok(())
    }
}
