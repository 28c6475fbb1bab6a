//! The training loop: per-cycle joint training on labeled and
//! pseudo-labeled data, teacher inference that refreshes pseudo-labels
//! and queries new regions, and the cycle driver for the active, ssl and
//! supervised modes.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::alquery::{self, RegionQuery};
use crate::config::{ExperimentConfig, Mode};
use crate::error::{CoreError, Result};
use crate::labelpool::LabelPool;
use crate::losses::{self, BatchItem, PixelLabelMask};
use crate::metrics::{self, ConfusionMatrix};
use crate::seeding;
use crate::segmodel::{self, augment::AugMode, ModelParams};
use crate::synthdata::Dataset;

/// One selected query enriched with the cycle it was issued in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryRecord {
    pub cycle: usize,
    pub image: usize,
    pub tile_row: usize,
    pub tile_col: usize,
    pub score: f64,
}

/// Everything measured at the end of one cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleReport {
    pub cycle: usize,
    pub human_fraction: f64,
    pub pseudo_fraction: f64,
    pub pseudo_precision: Option<f64>,
    pub val_miou: f64,
    pub per_class_iou: Vec<f64>,
    pub wall_seconds: f64,
}

/// Sink for per-cycle artifacts. Implementations persist reports, queries
/// and checkpoints; the default methods make observation optional.
pub trait RunObserver {
    /// Monotonic time source used for wall-clock reporting.
    fn now_seconds(&mut self) -> f64 {
        0.0
    }
    fn on_queries(&mut self, _cycle: usize, _queries: &[QueryRecord]) -> Result<()> {
        Ok(())
    }
    fn on_cycle_complete(
        &mut self,
        _report: &CycleReport,
        _pool: &LabelPool,
        _model: &ModelParams,
    ) -> Result<()> {
        Ok(())
    }
    /// Called with the model state when training aborts on a non-finite loss.
    fn on_divergence(&mut self, _cycle: usize, _iteration: usize, _model: &ModelParams) {}
}

/// Observer that drops everything.
pub struct NullObserver;

impl RunObserver for NullObserver {}

/// SGD with momentum and decoupled-from-schedule weight decay folded into
/// the gradient, stepped under an externally supplied learning rate.
pub struct SgdMomentum {
    velocity: Vec<f64>,
    momentum: f64,
    weight_decay: f64,
}

impl SgdMomentum {
    pub fn new(dim: usize, momentum: f64, weight_decay: f64) -> Self {
        SgdMomentum {
            velocity: vec![0.0; dim],
            momentum,
            weight_decay,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grads: &[f64], lr: f64) {
        for ((v, t), g) in self.velocity.iter_mut().zip(theta.iter_mut()).zip(grads.iter()) {
            *v = self.momentum * *v + (g + self.weight_decay * *t);
            *t -= lr * *v;
        }
    }
}

/// Poly learning-rate decay over one cycle's iterations.
pub fn poly_lr(base: f64, iteration: usize, total: usize, power: f64) -> f64 {
    let frac = iteration as f64 / total as f64;
    base * libm::pow(1.0 - frac, power)
}

/// Diagnostics from one training phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainStats {
    pub iterations: usize,
    pub first_ce: f64,
    pub first_total: f64,
    pub last_total: f64,
    pub mean_ce: f64,
    pub mean_reco: f64,
}

fn draw_batch(ids: &[usize], count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..count).map(|_| ids[rng.random_range(0..ids.len())]).collect()
}

/// One cycle of joint student training.
///
/// Every iteration draws a labeled mini-batch (weak augmentation, human
/// labels) and, once the unlabeled pool carries supervision, an unlabeled
/// mini-batch (strong augmentation, pseudo plus queried labels); the
/// combined objective is cross-entropy over the union plus the weighted
/// contrastive term. The student runs with noise; the learning rate
/// follows the poly schedule across `total_iters`.
pub fn train_phase(
    model: &mut ModelParams,
    pool: &LabelPool,
    dataset: &Dataset,
    cfg: &ExperimentConfig,
    total_iters: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrainStats> {
    let labeled_ids = pool.labeled_image_ids();
    if labeled_ids.is_empty() || pool.ledger().human_pixels == 0 {
        return Err(CoreError::logic("training requires at least one labeled pixel"));
    }
    let unlabeled_ids = pool.unlabeled_images();
    let use_unlabeled = cfg.schedule.batch_unlabeled > 0
        && !unlabeled_ids.is_empty()
        && pool.has_unlabeled_supervision();

    let mut optimizer = SgdMomentum::new(
        model.theta.len(),
        cfg.optimizer.momentum,
        cfg.optimizer.weight_decay,
    );

    let mut stats = TrainStats {
        iterations: total_iters,
        first_ce: 0.0,
        first_total: 0.0,
        last_total: 0.0,
        mean_ce: 0.0,
        mean_reco: 0.0,
    };

    for iteration in 0..total_iters {
        let lr = poly_lr(cfg.optimizer.lr, iteration, total_iters, cfg.optimizer.poly_power);

        let mut selection: Vec<(usize, AugMode)> = draw_batch(
            &labeled_ids,
            cfg.schedule.batch_labeled,
            rng,
        )
        .into_iter()
        .map(|i| (i, AugMode::Weak))
        .collect();
        if use_unlabeled {
            selection.extend(
                draw_batch(&unlabeled_ids, cfg.schedule.batch_unlabeled, rng)
                    .into_iter()
                    .map(|i| (i, AugMode::Strong)),
            );
        }

        let mut passes = Vec::with_capacity(selection.len());
        let mut probs = Vec::with_capacity(selection.len());
        let mut masks = Vec::with_capacity(selection.len());
        for &(image_idx, mode) in &selection {
            let record = &dataset.train[image_idx];
            let supervision = match mode {
                AugMode::Weak => pool.human_mask(image_idx),
                AugMode::Strong => pool.pseudo_mask(image_idx),
            };
            let (aug_image, aug_labels) =
                segmodel::augment::augment(&record.image, &supervision.labels, mode, rng);
            let pass = segmodel::forward(model, &aug_image, true, Some(rng)).map_err(|e| {
                diverge_context(e, "forward", iteration)
            })?;
            probs.push(segmodel::softmax_probs(&pass.logits));
            masks.push(PixelLabelMask::new(pool.height, pool.width, aug_labels));
            passes.push(pass);
        }

        let items: Vec<BatchItem<'_>> = passes
            .iter()
            .zip(probs.iter())
            .zip(masks.iter())
            .map(|((pass, probs), mask)| BatchItem {
                logits: &pass.logits,
                probs,
                emb: &pass.embeddings,
                mask,
            })
            .collect();
        let loss = losses::total_loss_with_grads(&items, &cfg.reco, rng);
        if !loss.total.is_finite() {
            return Err(CoreError::numerical(format!(
                "loss diverged at iteration {iteration}"
            )));
        }

        let mut grads = vec![0.0; model.theta.len()];
        for (i, pass) in passes.iter().enumerate() {
            let g = segmodel::backward(model, pass, &loss.grad_logits[i], &loss.grad_emb[i]);
            for (acc, v) in grads.iter_mut().zip(g.iter()) {
                *acc += v;
            }
        }
        optimizer.step(&mut model.theta, &grads, lr);

        if iteration == 0 {
            stats.first_ce = loss.ce;
            stats.first_total = loss.total;
        }
        stats.last_total = loss.total;
        stats.mean_ce += loss.ce / total_iters as f64;
        stats.mean_reco += loss.reco / total_iters as f64;
    }
    Ok(stats)
}

fn diverge_context(err: CoreError, stage: &str, iteration: usize) -> CoreError {
    match err {
        CoreError::Numerical(msg) => {
            CoreError::Numerical(format!("{stage} at iteration {iteration}: {msg}"))
        }
        other => other,
    }
}

/// Teacher pass over the whole unlabeled pool: refresh pseudo-labels and,
/// in active mode, score regions and reveal the selected ones — all from
/// the same noise-free predictions.
pub fn pseudo_and_query_phase(
    model: &ModelParams,
    pool: &mut LabelPool,
    dataset: &Dataset,
    cfg: &ExperimentConfig,
    query: bool,
) -> Result<Vec<RegionQuery>> {
    let mut grids = Vec::new();
    for image_idx in pool.unlabeled_images() {
        let record = &dataset.train[image_idx];
        let pass = segmodel::forward(model, &record.image, false, None)?;
        let probs = segmodel::softmax_probs(&pass.logits);
        pool.assign_pseudo_image(image_idx, &probs, cfg.labels.pseudo_threshold)?;
        if query {
            let entropy = alquery::pixel_entropy(&probs);
            let mut grid = alquery::build_grid(pool, image_idx, cfg.labels.region_size)?;
            alquery::score_regions(&entropy, pool.width, &mut grid);
            grids.push((image_idx, grid));
        }
    }
    if !query {
        return Ok(Vec::new());
    }
    let selected = alquery::select_regions(&grids, cfg.labels.regions_per_image)?;
    let tiles: Vec<(usize, usize, usize)> = selected
        .iter()
        .map(|q| (q.image, q.tile_row, q.tile_col))
        .collect();
    pool.reveal_regions(dataset, &tiles, cfg.labels.region_size)?;
    Ok(selected)
}

/// Noise-free evaluation over the validation split.
pub fn evaluate(model: &ModelParams, dataset: &Dataset) -> Result<(Vec<f64>, f64)> {
    let mut cm = ConfusionMatrix::new(dataset.num_classes);
    for record in &dataset.val {
        let pass = segmodel::forward(model, &record.image, false, None)?;
        let probs = segmodel::softmax_probs(&pass.logits);
        let mut pred = vec![0u8; probs.height * probs.width];
        for y in 0..probs.height {
            for x in 0..probs.width {
                pred[y * probs.width + x] = probs.argmax_pixel(y, x).0;
            }
        }
        cm.accumulate(&pred, &record.gt.labels)?;
    }
    Ok(metrics::iou(&cm))
}

/// Result of a full experiment.
#[derive(Debug)]
pub struct RunOutput {
    pub reports: Vec<CycleReport>,
    pub model: ModelParams,
}

fn cycle_iterations(cfg: &ExperimentConfig, is_final_active_cycle: bool) -> usize {
    let mut epochs = cfg.schedule.epochs_per_cycle as f64;
    if is_final_active_cycle {
        epochs = libm::round(epochs * cfg.schedule.final_cycle_multiplier);
    }
    (epochs as usize).max(1) * cfg.schedule.iterations_per_epoch
}

/// Execute the configured experiment over an in-memory dataset.
///
/// Active mode: an initial labeled-only phase, then `al_cycles` rounds of
/// pseudo-label refresh + region reveal + joint retraining, the last one
/// with the longer schedule. Ssl mode: the same without any reveals,
/// repeated `ssl_retrains` times. Supervised mode: the initial phase only.
/// The student carries into the next cycle as the teacher unless
/// `carry_weights` is off.
pub fn run(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    observer: &mut dyn RunObserver,
) -> Result<RunOutput> {
    cfg.validate()?;
    if dataset.train.len() != cfg.dataset.n_train || dataset.val.len() != cfg.dataset.n_val {
        return Err(CoreError::logic(format!(
            "dataset has {} train / {} val images but the config expects {} / {}",
            dataset.train.len(),
            dataset.val.len(),
            cfg.dataset.n_train,
            cfg.dataset.n_val
        )));
    }

    let mut model = init_for_cycle(cfg, 0)?;
    let mut pool = LabelPool::init(
        dataset,
        cfg.labels.initial_fraction,
        seeding::sub_seed(cfg.master_seed, "pool", 0),
    )?;
    let mut reports = Vec::new();

    let extra_cycles = match cfg.mode {
        Mode::Active => cfg.al_cycles,
        Mode::Ssl => cfg.ssl_retrains,
        Mode::Supervised => 0,
    };

    for cycle in 0..=extra_cycles {
        let started = observer.now_seconds();
        if cycle > 0 {
            // Pseudo-labels and queries come from the teacher: the model
            // state frozen at the end of the previous cycle.
            let do_query = cfg.mode == Mode::Active;
            let queries = pseudo_and_query_phase(&model, &mut pool, dataset, cfg, do_query)?;
            if do_query {
                let records: Vec<QueryRecord> = queries
                    .iter()
                    .map(|q| QueryRecord {
                        cycle,
                        image: q.image,
                        tile_row: q.tile_row,
                        tile_col: q.tile_col,
                        score: q.score,
                    })
                    .collect();
                observer.on_queries(cycle, &records)?;
            }
            if !cfg.carry_weights {
                model = init_for_cycle(cfg, cycle)?;
            }
        }

        let is_final_active = cfg.mode == Mode::Active && extra_cycles > 0 && cycle == extra_cycles;
        let iters = cycle_iterations(cfg, is_final_active);
        let mut rng = seeding::stream(cfg.master_seed, "train", cycle as u64);
        match train_phase(&mut model, &pool, dataset, cfg, iters, &mut rng) {
            Ok(_) => {}
            Err(CoreError::Numerical(msg)) => {
                observer.on_divergence(cycle, 0, &model);
                return Err(CoreError::Numerical(format!("cycle {cycle}: {msg}")));
            }
            Err(other) => return Err(other),
        }

        let (per_class_iou, val_miou) = evaluate(&model, dataset)?;
        let ledger = pool.ledger();
        let report = CycleReport {
            cycle,
            human_fraction: ledger.human_fraction,
            pseudo_fraction: ledger.pseudo_fraction,
            pseudo_precision: pool.pseudo_precision(dataset),
            val_miou,
            per_class_iou,
            wall_seconds: observer.now_seconds() - started,
        };
        observer.on_cycle_complete(&report, &pool, &model)?;
        reports.push(report);
    }

    Ok(RunOutput { reports, model })
}

fn init_for_cycle(cfg: &ExperimentConfig, cycle: usize) -> Result<ModelParams> {
    segmodel::init_model(
        seeding::sub_seed(cfg.master_seed, "model", cycle as u64),
        &cfg.model,
        cfg.dataset.num_classes,
    )
}

/// Observer that records everything in memory; used by tests and the
/// determinism checks.
#[derive(Default)]
pub struct RecordingObserver {
    pub queries: Vec<QueryRecord>,
    pub reports: Vec<CycleReport>,
    pub divergences: Vec<(usize, usize)>,
    clock: f64,
}

impl RunObserver for RecordingObserver {
    fn now_seconds(&mut self) -> f64 {
        // Deterministic fake clock: one tick per call.
        self.clock += 1.0;
        self.clock
    }

    fn on_queries(&mut self, _cycle: usize, queries: &[QueryRecord]) -> Result<()> {
        self.queries.extend_from_slice(queries);
        Ok(())
    }

    fn on_cycle_complete(
        &mut self,
        report: &CycleReport,
        _pool: &LabelPool,
        _model: &ModelParams,
    ) -> Result<()> {
        self.reports.push(report.clone());
        Ok(())
    }

    fn on_divergence(&mut self, cycle: usize, iteration: usize, _model: &ModelParams) {
        self.divergences.push((cycle, iteration));
    }
}

/// Tiny experiment configuration used across the test suite.
pub fn tiny_config(mode: Mode) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.mode = mode;
    cfg.dataset.n_train = 10;
    cfg.dataset.n_val = 3;
    cfg.dataset.height = 32;
    cfg.dataset.width = 32;
    cfg.dataset.num_classes = 4;
    cfg.model.channels = vec![4, 8];
    cfg.model.embed_dim = 4;
    cfg.labels.initial_fraction = 0.2;
    cfg.schedule.epochs_per_cycle = 1;
    cfg.schedule.iterations_per_epoch = 4;
    cfg.schedule.batch_labeled = 1;
    cfg.schedule.batch_unlabeled = 2;
    cfg.reco.queries_per_class = 8;
    cfg.reco.negatives_per_query = 16;
    cfg.al_cycles = 2;
    cfg.ssl_retrains = 2;
    cfg
}
