//! Masked cross-entropy and the regional contrastive loss with its
//! query/negative-key sampler.
//!
//! The contrastive term works on a mini-batch of items; a sample records
//! *which* pixels act as queries, anchor contributors and negative keys,
//! so the loss stays a smooth function of the embeddings once the sample
//! is fixed. Anchors are renormalized class means of live embeddings and
//! receive gradients.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use crate::config::RecoConfig;
use crate::segmodel::{EmbeddingMap, LogitMap, ProbMap};
use crate::synthdata::IGNORE_LABEL;

/// Effective supervision for one image: labels with ignore; a pixel is
/// valid exactly when its label is not the ignore value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelLabelMask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl PixelLabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Self {
        debug_assert_eq!(labels.len(), height * width);
        PixelLabelMask {
            height,
            width,
            labels,
        }
    }

    #[inline]
    pub fn is_valid(&self, p: usize) -> bool {
        self.labels[p] != IGNORE_LABEL
    }

    pub fn valid_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE_LABEL).count()
    }
}

/// One mini-batch entry seen by the loss functions.
#[derive(Clone, Copy)]
pub struct BatchItem<'a> {
    pub logits: &'a LogitMap,
    pub probs: &'a ProbMap,
    pub emb: &'a EmbeddingMap,
    pub mask: &'a PixelLabelMask,
}

/// Mean negative log likelihood over valid pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CeOutput {
    pub loss: f64,
    pub valid_pixels: usize,
    /// Set when no pixel was valid; the loss is defined as zero then.
    pub empty: bool,
}

/// Sum of per-pixel `-log softmax(label)` and the valid-pixel count.
fn ce_sum(logits: &LogitMap, mask: &PixelLabelMask) -> (f64, usize) {
    let c = logits.num_classes;
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in 0..logits.height * logits.width {
        let label = mask.labels[p];
        if label == IGNORE_LABEL {
            continue;
        }
        let row = &logits.data[p * c..(p + 1) * c];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut z = 0.0;
        for &v in row {
            z += libm::exp(v - max);
        }
        sum += libm::log(z) + max - row[label as usize];
        count += 1;
    }
    (sum, count)
}

/// Cross-entropy averaged over valid pixels; zero (flagged) when none.
pub fn masked_cross_entropy(logits: &LogitMap, mask: &PixelLabelMask) -> CeOutput {
    let (sum, count) = ce_sum(logits, mask);
    if count == 0 {
        CeOutput {
            loss: 0.0,
            valid_pixels: 0,
            empty: true,
        }
    } else {
        CeOutput {
            loss: sum / count as f64,
            valid_pixels: count,
            empty: false,
        }
    }
}

/// A pixel address inside a batch: `(item index, pixel index)`.
pub type PixelRef = (usize, usize);

/// Queries, anchor contributors and negative keys for one class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecoClassSample {
    pub class_id: u8,
    /// Pixels averaged into the positive anchor (all valid class pixels).
    pub anchor_px: Vec<PixelRef>,
    pub query_px: Vec<PixelRef>,
    pub negative_px: Vec<PixelRef>,
}

/// The materialized contrastive sample for one mini-batch.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RecoSample {
    pub classes: Vec<RecoClassSample>,
}

impl RecoSample {
    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

fn valid_pixels_by_class(items: &[BatchItem<'_>]) -> BTreeMap<u8, Vec<PixelRef>> {
    let mut by_class: BTreeMap<u8, Vec<PixelRef>> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        for (p, &label) in item.mask.labels.iter().enumerate() {
            if label != IGNORE_LABEL {
                by_class.entry(label).or_default().push((i, p));
            }
        }
    }
    by_class
}

fn mean_unit_vector(items: &[BatchItem<'_>], pixels: &[PixelRef], dim: usize) -> Vec<f64> {
    let mut mean = vec![0.0; dim];
    for &(i, p) in pixels {
        let v = items[i].emb.pixel(p);
        for (m, x) in mean.iter_mut().zip(v.iter()) {
            *m += x;
        }
    }
    let inv = 1.0 / pixels.len() as f64;
    for m in mean.iter_mut() {
        *m *= inv;
    }
    renormalize(&mut mean);
    mean
}

fn renormalize(v: &mut [f64]) -> f64 {
    let sq: f64 = v.iter().map(|x| x * x).sum();
    let norm = libm::sqrt(sq + crate::segmodel::layers::NORM_EPS);
    for x in v.iter_mut() {
        *x /= norm;
    }
    norm
}

/// Softmax over anchor-to-anchor similarities: how often each other class
/// is drawn as a negative for class `c`. Exposed for direct testing.
pub fn negative_class_distribution(anchors: &BTreeMap<u8, Vec<f64>>, class_id: u8) -> Vec<(u8, f64)> {
    let anchor = &anchors[&class_id];
    let mut sims: Vec<(u8, f64)> = anchors
        .iter()
        .filter(|(&c, _)| c != class_id)
        .map(|(&c, other)| {
            let dot: f64 = anchor.iter().zip(other.iter()).map(|(a, b)| a * b).sum();
            (c, dot)
        })
        .collect();
    let max = sims
        .iter()
        .map(|&(_, s)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (_, s) in sims.iter_mut() {
        *s = libm::exp(*s - max);
        z += *s;
    }
    for (_, s) in sims.iter_mut() {
        *s /= z;
    }
    sims
}

/// Assemble the contrastive sample for a mini-batch.
///
/// Queries are valid class pixels whose predicted confidence for their
/// own class is at most `delta_s` (all class pixels when none qualify),
/// sampled without replacement up to the per-class budget. Negative keys
/// are drawn class-first from the anchor-similarity softmax, then
/// uniformly among that class's valid pixels. Fewer than two classes
/// yield an empty sample.
pub fn build_reco_sample(
    items: &[BatchItem<'_>],
    cfg: &RecoConfig,
    rng: &mut ChaCha8Rng,
) -> RecoSample {
    let by_class = valid_pixels_by_class(items);
    if by_class.len() < 2 {
        return RecoSample::default();
    }
    let dim = items[0].emb.dim;

    let anchors: BTreeMap<u8, Vec<f64>> = by_class
        .iter()
        .map(|(&c, pixels)| (c, mean_unit_vector(items, pixels, dim)))
        .collect();

    let mut classes = Vec::with_capacity(by_class.len());
    for (&class_id, pixels) in &by_class {
        // Hard-pixel filter: keep pixels the model is not yet sure about.
        let mut candidates: Vec<PixelRef> = pixels
            .iter()
            .copied()
            .filter(|&(i, p)| items[i].probs.pixel_class(p, class_id as usize) <= cfg.delta_s)
            .collect();
        if candidates.is_empty() {
            candidates = pixels.clone();
        }
        let query_px = if candidates.len() <= cfg.queries_per_class {
            candidates
        } else {
            rand::seq::index::sample(rng, candidates.len(), cfg.queries_per_class)
                .iter()
                .map(|k| candidates[k])
                .collect()
        };

        let dist = negative_class_distribution(&anchors, class_id);
        let weights: Vec<f64> = dist.iter().map(|&(_, p)| p).collect();
        let chooser = WeightedIndex::new(&weights).expect("non-empty positive weights");
        let mut negative_px = Vec::with_capacity(cfg.negatives_per_query);
        for _ in 0..cfg.negatives_per_query {
            let neg_class = dist[chooser.sample(rng)].0;
            let pool = &by_class[&neg_class];
            negative_px.push(pool[rng.random_range(0..pool.len())]);
        }

        classes.push(RecoClassSample {
            class_id,
            anchor_px: pixels.clone(),
            query_px,
            negative_px,
        });
    }
    RecoSample { classes }
}

/// Exhaustive sample: every valid class pixel is a query and every valid
/// pixel of any other class is a negative key. Bypasses the RNG, the
/// confidence filter and the budgets.
pub fn exhaustive_reco_sample(items: &[BatchItem<'_>]) -> RecoSample {
    let by_class = valid_pixels_by_class(items);
    if by_class.len() < 2 {
        return RecoSample::default();
    }
    let mut classes = Vec::with_capacity(by_class.len());
    for (&class_id, pixels) in &by_class {
        let negative_px: Vec<PixelRef> = by_class
            .iter()
            .filter(|(&c, _)| c != class_id)
            .flat_map(|(_, pool)| pool.iter().copied())
            .collect();
        classes.push(RecoClassSample {
            class_id,
            anchor_px: pixels.clone(),
            query_px: pixels.clone(),
            negative_px,
        });
    }
    RecoSample { classes }
}

/// Contrastive loss of a sample, averaged over every query of every class.
pub fn reco_loss(items: &[BatchItem<'_>], sample: &RecoSample, cfg: &RecoConfig) -> f64 {
    reco_loss_impl(items, sample, cfg, None)
}

/// Loss plus gradients w.r.t. every pixel embedding (per batch item,
/// pixel-major like the embedding maps).
pub fn reco_loss_with_grads(
    items: &[BatchItem<'_>],
    sample: &RecoSample,
    cfg: &RecoConfig,
) -> (f64, Vec<Vec<f64>>) {
    let mut grads: Vec<Vec<f64>> = items
        .iter()
        .map(|item| vec![0.0; item.emb.data.len()])
        .collect();
    let loss = reco_loss_impl(items, sample, cfg, Some(&mut grads));
    (loss, grads)
}

fn reco_loss_impl(
    items: &[BatchItem<'_>],
    sample: &RecoSample,
    cfg: &RecoConfig,
    mut grads: Option<&mut Vec<Vec<f64>>>,
) -> f64 {
    if sample.is_empty() {
        return 0.0;
    }
    let dim = items[0].emb.dim;
    let inv_tau = 1.0 / cfg.temperature;
    let total_queries: usize = sample.classes.iter().map(|c| c.query_px.len()).sum();
    if total_queries == 0 {
        return 0.0;
    }
    let inv_q = 1.0 / total_queries as f64;

    let mut loss = 0.0;
    for class in &sample.classes {
        // Anchor: renormalized mean of the contributing embeddings.
        let mut mean = vec![0.0; dim];
        for &(i, p) in &class.anchor_px {
            let v = items[i].emb.pixel(p);
            for (m, x) in mean.iter_mut().zip(v.iter()) {
                *m += x;
            }
        }
        let inv_n = 1.0 / class.anchor_px.len() as f64;
        for m in mean.iter_mut() {
            *m *= inv_n;
        }
        let mut anchor = mean.clone();
        let norm = renormalize(&mut anchor);

        let mut grad_anchor = vec![0.0; dim];
        for &(qi, qp) in &class.query_px {
            let q = items[qi].emb.pixel(qp);
            let s_pos: f64 = q.iter().zip(anchor.iter()).map(|(a, b)| a * b).sum();

            // log(1 + sum_k exp((s_k - s_pos)/tau)), numerically benign
            // because similarities live in [-1, 1].
            let mut weights = Vec::with_capacity(class.negative_px.len());
            let mut wsum = 0.0;
            for &(ni, np) in &class.negative_px {
                let n = items[ni].emb.pixel(np);
                let s_neg: f64 = q.iter().zip(n.iter()).map(|(a, b)| a * b).sum();
                let w = libm::exp((s_neg - s_pos) * inv_tau);
                weights.push(w);
                wsum += w;
            }
            loss += libm::log1p(wsum) * inv_q;

            if let Some(grads) = grads.as_deref_mut() {
                let denom = 1.0 + wsum;
                let d_pos = -wsum / denom * inv_tau * inv_q;
                // d loss / d q accumulates anchor and negative directions.
                for k in 0..dim {
                    grads[qi][qp * dim + k] += d_pos * anchor[k];
                }
                for (g, a) in grad_anchor.iter_mut().zip(q.iter()) {
                    *g += d_pos * a;
                }
                for (widx, &(ni, np)) in class.negative_px.iter().enumerate() {
                    let d_neg = weights[widx] / denom * inv_tau * inv_q;
                    let n = items[ni].emb.pixel(np);
                    for k in 0..dim {
                        grads[qi][qp * dim + k] += d_neg * n[k];
                        grads[ni][np * dim + k] += d_neg * q[k];
                    }
                }
            }
        }

        if let Some(grads) = grads.as_deref_mut() {
            // Through the anchor normalization and mean.
            let dot: f64 = anchor.iter().zip(grad_anchor.iter()).map(|(a, b)| a * b).sum();
            let inv_norm = 1.0 / norm;
            let scale = inv_n * inv_norm;
            for &(i, p) in &class.anchor_px {
                let g = &mut grads[i][p * dim..(p + 1) * dim];
                for k in 0..dim {
                    g[k] += (grad_anchor[k] - anchor[k] * dot) * scale;
                }
            }
        }
    }
    loss
}

/// Combined objective and its gradients for one mini-batch.
pub struct TotalLossOutput {
    pub total: f64,
    pub ce: f64,
    pub reco: f64,
    pub valid_pixels: usize,
    /// Per item, pixel-major; cross-entropy contribution.
    pub grad_logits: Vec<Vec<f64>>,
    /// Per item, pixel-major; contrastive contribution scaled by lambda.
    pub grad_emb: Vec<Vec<f64>>,
}

/// Cross-entropy over the union of valid pixels plus `lambda` times the
/// contrastive loss on a freshly built sample.
pub fn total_loss_with_grads(
    items: &[BatchItem<'_>],
    cfg: &RecoConfig,
    rng: &mut ChaCha8Rng,
) -> TotalLossOutput {
    let sample = if cfg.weight > 0.0 {
        build_reco_sample(items, cfg, rng)
    } else {
        RecoSample::default()
    };
    total_loss_for_sample(items, &sample, cfg)
}

/// Same objective evaluated against an already-chosen sample; used by the
/// training loop and by gradient checks, where the sample must stay fixed
/// while parameters move.
pub fn total_loss_for_sample(
    items: &[BatchItem<'_>],
    sample: &RecoSample,
    cfg: &RecoConfig,
) -> TotalLossOutput {
    let mut sum = 0.0;
    let mut count = 0usize;
    for item in items {
        let (s, n) = ce_sum(item.logits, item.mask);
        sum += s;
        count += n;
    }
    let ce = if count == 0 { 0.0 } else { sum / count as f64 };

    let mut grad_logits: Vec<Vec<f64>> = items
        .iter()
        .map(|item| vec![0.0; item.logits.data.len()])
        .collect();
    if count > 0 {
        let inv_n = 1.0 / count as f64;
        for (item, grad) in items.iter().zip(grad_logits.iter_mut()) {
            let c = item.logits.num_classes;
            for p in 0..item.logits.height * item.logits.width {
                let label = item.mask.labels[p];
                if label == IGNORE_LABEL {
                    continue;
                }
                let probs = item.probs.pixel_row(p);
                let g = &mut grad[p * c..(p + 1) * c];
                for j in 0..c {
                    g[j] = (probs[j] - if j == label as usize { 1.0 } else { 0.0 }) * inv_n;
                }
            }
        }
    }

    let (reco, mut grad_emb) = if cfg.weight > 0.0 && !sample.is_empty() {
        reco_loss_with_grads(items, sample, cfg)
    } else {
        (
            0.0,
            items.iter().map(|item| vec![0.0; item.emb.data.len()]).collect(),
        )
    };
    if cfg.weight != 1.0 {
        for grad in grad_emb.iter_mut() {
            for g in grad.iter_mut() {
                *g *= cfg.weight;
            }
        }
    }

    TotalLossOutput {
        total: ce + cfg.weight * reco,
        ce,
        reco,
        valid_pixels: count,
        grad_logits,
        grad_emb,
    }
}

/// Spec-level convenience for a single image.
pub fn total_loss(
    logits: &LogitMap,
    emb: &EmbeddingMap,
    mask: &PixelLabelMask,
    probs: &ProbMap,
    cfg: &RecoConfig,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let item = BatchItem {
        logits,
        probs,
        emb,
        mask,
    };
    total_loss_with_grads(&[item], cfg, rng).total
}

impl ProbMap {
    #[inline]
    pub(crate) fn pixel_class(&self, p: usize, class: usize) -> f64 {
        self.data[p * self.num_classes + class]
    }

    #[inline]
    pub(crate) fn pixel_row(&self, p: usize) -> &[f64] {
        &self.data[p * self.num_classes..(p + 1) * self.num_classes]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmodel::{EmbeddingMap, LogitMap, ProbMap};

    fn logit_map(h: usize, w: usize, c: usize, data: Vec<f64>) -> LogitMap {
        LogitMap {
            height: h,
            width: w,
            num_classes: c,
            data,
        }
    }

    #[test]
    fn ce_of_perfect_prediction_is_zero() {
        // Very confident correct logits: -log p -> 0.
        let logits = logit_map(1, 1, 3, vec![50.0, 0.0, 0.0]);
        let mask = PixelLabelMask::new(1, 1, vec![0]);
        let out = masked_cross_entropy(&logits, &mask);
        assert!(out.loss.abs() < 1e-12);
        assert_eq!(out.valid_pixels, 1);
    }

    #[test]
    fn ce_of_uniform_prediction_is_ln_c() {
        let logits = logit_map(1, 1, 4, vec![0.0; 4]);
        let mask = PixelLabelMask::new(1, 1, vec![2]);
        let out = masked_cross_entropy(&logits, &mask);
        assert!((out.loss - (4.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_averages_only_valid_pixels() {
        // Three pixels, one ignored; loss = (a + b) / 2.
        let logits = logit_map(1, 3, 2, vec![1.0, 0.0, 0.0, 2.0, 5.0, -5.0]);
        let full = PixelLabelMask::new(1, 3, vec![0, 1, IGNORE_LABEL]);
        let out = masked_cross_entropy(&logits, &full);
        let a = masked_cross_entropy(
            &logit_map(1, 1, 2, vec![1.0, 0.0]),
            &PixelLabelMask::new(1, 1, vec![0]),
        )
        .loss;
        let b = masked_cross_entropy(
            &logit_map(1, 1, 2, vec![0.0, 2.0]),
            &PixelLabelMask::new(1, 1, vec![1]),
        )
        .loss;
        assert!((out.loss - (a + b) / 2.0).abs() < 1e-12);
        assert_eq!(out.valid_pixels, 2);
    }

    #[test]
    fn ce_with_no_valid_pixels_is_zero_and_flagged() {
        let logits = logit_map(1, 2, 2, vec![0.0; 4]);
        let mask = PixelLabelMask::new(1, 2, vec![IGNORE_LABEL, IGNORE_LABEL]);
        let out = masked_cross_entropy(&logits, &mask);
        assert_eq!(out.loss, 0.0);
        assert!(out.empty);
    }

    /// Build a tiny single-item batch with fully controlled embeddings.
    fn controlled_batch(
        emb_rows: Vec<Vec<f64>>,
        labels: Vec<u8>,
    ) -> (LogitMap, ProbMap, EmbeddingMap, PixelLabelMask) {
        let n = emb_rows.len();
        let dim = emb_rows[0].len();
        let emb = EmbeddingMap {
            height: 1,
            width: n,
            dim,
            data: emb_rows.into_iter().flatten().collect(),
        };
        let c = 4;
        let logits = logit_map(1, n, c, vec![0.0; n * c]);
        let probs = ProbMap {
            height: 1,
            width: n,
            num_classes: c,
            data: vec![1.0 / c as f64; n * c],
        };
        let mask = PixelLabelMask::new(1, n, labels);
        (logits, probs, emb, mask)
    }

    #[test]
    fn reco_closed_form_single_query() {
        // Query equals the anchor, one orthogonal negative, tau = 0.5:
        // loss = ln(1 + e^{-2}).
        let (logits, probs, emb, mask) = controlled_batch(
            vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]],
            vec![0, 1],
        );
        let items = [BatchItem {
            logits: &logits,
            probs: &probs,
            emb: &emb,
            mask: &mask,
        }];
        let sample = RecoSample {
            classes: vec![RecoClassSample {
                class_id: 0,
                anchor_px: vec![(0, 0)],
                query_px: vec![(0, 0)],
                negative_px: vec![(0, 1)],
            }],
        };
        let cfg = RecoConfig {
            temperature: 0.5,
            ..RecoConfig::default()
        };
        let loss = reco_loss(&items, &sample, &cfg);
        let expected = (1.0 + (-2.0f64).exp()).ln();
        assert!(
            (loss - expected).abs() < 1e-9,
            "loss {loss} expected {expected}"
        );
    }

    #[test]
    fn reco_equal_similarities_give_ln_one_plus_k() {
        // Anchor and all K negatives coincide: every similarity equal, so
        // each query contributes ln(1 + K) regardless of tau.
        for k in [1usize, 5, 16] {
            let (logits, probs, emb, mask) = controlled_batch(
                vec![vec![0.6, 0.8, 0.0], vec![0.6, 0.8, 0.0], vec![0.6, 0.8, 0.0]],
                vec![0, 1, 1],
            );
            let items = [BatchItem {
                logits: &logits,
                probs: &probs,
                emb: &emb,
                mask: &mask,
            }];
            let sample = RecoSample {
                classes: vec![RecoClassSample {
                    class_id: 0,
                    anchor_px: vec![(0, 0)],
                    query_px: vec![(0, 0)],
                    negative_px: vec![(0, 1); k],
                }],
            };
            let cfg = RecoConfig {
                temperature: 0.37,
                ..RecoConfig::default()
            };
            let loss = reco_loss(&items, &sample, &cfg);
            let expected = (1.0 + k as f64).ln();
            assert!(
                (loss - expected).abs() < 1e-9,
                "K={k}: loss {loss} expected {expected}"
            );
        }
    }

    #[test]
    fn empty_sample_has_zero_loss() {
        let (logits, probs, emb, mask) =
            controlled_batch(vec![vec![1.0, 0.0, 0.0]], vec![0]);
        let items = [BatchItem {
            logits: &logits,
            probs: &probs,
            emb: &emb,
            mask: &mask,
        }];
        let sample = build_reco_sample(
            &items,
            &RecoConfig::default(),
            &mut crate::seeding::stream_from(1),
        );
        assert!(sample.is_empty());
        assert_eq!(reco_loss(&items, &sample, &RecoConfig::default()), 0.0);
    }

    #[test]
    fn two_orthogonal_classes_negatives_all_from_other_class() {
        let (logits, probs, emb, mask) = controlled_batch(
            vec![
                vec![1.0, 0.0, 0.0],
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 1.0, 0.0],
            ],
            vec![0, 0, 1, 1],
        );
        let items = [BatchItem {
            logits: &logits,
            probs: &probs,
            emb: &emb,
            mask: &mask,
        }];
        let mut rng = crate::seeding::stream_from(3);
        let sample = build_reco_sample(&items, &RecoConfig::default(), &mut rng);
        let class0 = &sample.classes[0];
        assert_eq!(class0.class_id, 0);
        for &(i, p) in &class0.negative_px {
            assert_eq!(items[i].mask.labels[p], 1, "negative keys must be class 1");
        }
    }

    #[test]
    fn negative_distribution_matches_softmax_of_similarities() {
        // Anchors with c1.c2 = 0.9, c1.c3 = 0.0: P(c2) = e^0.9/(e^0.9+1).
        let mut anchors = BTreeMap::new();
        anchors.insert(1u8, vec![1.0, 0.0, 0.0]);
        anchors.insert(2u8, vec![0.9, (1.0f64 - 0.81).sqrt(), 0.0]);
        anchors.insert(3u8, vec![0.0, 0.0, 1.0]);
        let dist = negative_class_distribution(&anchors, 1);
        let p2 = dist.iter().find(|&&(c, _)| c == 2).unwrap().1;
        let expected = (0.9f64).exp() / ((0.9f64).exp() + 1.0);
        assert!((p2 - expected).abs() < 1e-9, "p2 {p2} expected {expected}");
        assert!((expected - 0.711).abs() < 1e-3);
    }

    #[test]
    fn query_filter_keeps_only_low_confidence_pixels() {
        let (logits, mut probs_map, emb, mask) = controlled_batch(
            vec![
                vec![1.0, 0.0, 0.0],
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
            ],
            vec![0, 0, 1],
        );
        // Pixel 0 very confident for class 0, pixel 1 not.
        probs_map.data[0] = 0.99;
        probs_map.data[4] = 0.10;
        let items = [BatchItem {
            logits: &logits,
            probs: &probs_map,
            emb: &emb,
            mask: &mask,
        }];
        let cfg = RecoConfig {
            delta_s: 0.5,
            ..RecoConfig::default()
        };
        let mut rng = crate::seeding::stream_from(9);
        let sample = build_reco_sample(&items, &cfg, &mut rng);
        let class0 = sample.classes.iter().find(|c| c.class_id == 0).unwrap();
        assert_eq!(class0.query_px, vec![(0, 1)]);
    }

    #[test]
    fn lambda_zero_total_equals_ce() {
        let (logits, probs, emb, mask) = controlled_batch(
            vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]],
            vec![0, 1],
        );
        let items = [BatchItem {
            logits: &logits,
            probs: &probs,
            emb: &emb,
            mask: &mask,
        }];
        let cfg = RecoConfig {
            weight: 0.0,
            ..RecoConfig::default()
        };
        let mut rng = crate::seeding::stream_from(4);
        let out = total_loss_with_grads(&items, &cfg, &mut rng);
        let ce = masked_cross_entropy(&logits, &mask);
        assert_eq!(out.total, ce.loss);
        assert_eq!(out.reco, 0.0);
    }

    #[test]
    fn total_loss_is_sum_of_components() {
        let (logits, probs, emb, mask) = controlled_batch(
            vec![
                vec![1.0, 0.0, 0.0],
                vec![0.8, 0.6, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.8, 0.6],
            ],
            vec![0, 0, 1, 1],
        );
        let items = [BatchItem {
            logits: &logits,
            probs: &probs,
            emb: &emb,
            mask: &mask,
        }];
        let cfg = RecoConfig {
            weight: 0.7,
            ..RecoConfig::default()
        };
        let sample = exhaustive_reco_sample(&items);
        let out = total_loss_for_sample(&items, &sample, &cfg);
        let ce = masked_cross_entropy(&logits, &mask).loss;
        let rl = reco_loss(&items, &sample, &cfg);
        assert!((out.total - (ce + 0.7 * rl)).abs() < 1e-9);
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let (logits, probs, emb, mask) = controlled_batch(
            vec![
                vec![1.0, 0.0, 0.0],
                vec![0.8, 0.6, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.6, 0.0, 0.8],
            ],
            vec![0, 0, 1, 1],
        );
        let items = [BatchItem {
            logits: &logits,
            probs: &probs,
            emb: &emb,
            mask: &mask,
        }];
        let cfg = RecoConfig::default();
        let sample = exhaustive_reco_sample(&items);
        let base = reco_loss(&items, &sample, &cfg);

        let mut shuffled = sample.clone();
        shuffled.classes.reverse();
        for class in &mut shuffled.classes {
            class.query_px.reverse();
            class.negative_px.reverse();
        }
        let permuted = reco_loss(&items, &shuffled, &cfg);
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn raising_negative_similarity_never_lowers_loss() {
        // Move the negative key along a path of increasing similarity to
        // the query; the loss must be non-decreasing.
        let cfg = RecoConfig {
            temperature: 0.5,
            ..RecoConfig::default()
        };
        let mut prev = f64::NEG_INFINITY;
        for step in 0..=10 {
            let t = step as f64 / 10.0;
            // Rotate from orthogonal (0,1,0) toward the query (1,0,0).
            let angle = core::f64::consts::FRAC_PI_2 * (1.0 - t);
            let neg = vec![angle.cos(), angle.sin(), 0.0];
            let (logits, probs, emb, mask) =
                controlled_batch(vec![vec![1.0, 0.0, 0.0], neg], vec![0, 1]);
            let items = [BatchItem {
                logits: &logits,
                probs: &probs,
                emb: &emb,
                mask: &mask,
            }];
            let sample = RecoSample {
                classes: vec![RecoClassSample {
                    class_id: 0,
                    anchor_px: vec![(0, 0)],
                    query_px: vec![(0, 0)],
                    negative_px: vec![(0, 1)],
                }],
            };
            let loss = reco_loss(&items, &sample, &cfg);
            assert!(
                loss >= prev - 1e-12,
                "loss decreased: {prev} -> {loss} at step {step}"
            );
            prev = loss;
        }
    }
}
