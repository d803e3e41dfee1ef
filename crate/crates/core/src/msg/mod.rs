//! Semantic grouping: train a segmentation network on mined proposals.
//!
//! Two terms shape the embedding. The variation term pulls interior
//! embeddings towards the mean border embedding so that differently
//! textured sub-regions of a gland group together. The omission term lets
//! background pixels that closely resemble border or interior tissue join
//! those classes in a refreshed proposal, which then supervises the
//! per-pixel cross-entropy.

mod grouping;
mod model;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use grouping::{
    loss_msgo, loss_msgo_with_grad, loss_msgv, loss_msgv_anchored, loss_msgv_with_grad,
    partition_embeddings, refine_proposal, similarity_to_set, total_loss, EmbeddingSet,
    EmbeddingSets, Refinement,
};
pub use model::{ModelTrace, SegmentationModel, CLASSES};

use crate::error::{Error, Result};
use crate::imaging::{
    check_patch_geometry, padded_extent, patch_origins, Image, Mask, Patch, ProposalMap,
};
use crate::nn::{poly_decay_lr, sgd_step, Parameterized, SgdConfig, Tensor};
use crate::spm::image_tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsgConfig {
    /// Similarity threshold for relabelling background pixels.
    pub beta: f64,
    /// Weight of the variation term.
    pub lambda_v: f64,
    pub epochs: usize,
    pub lr0: f64,
    pub power: f64,
    pub batch: usize,
    pub patch: usize,
    pub stride: usize,
    /// Epochs between proposal refreshes.
    pub refine_every: usize,
    /// First epoch at which proposals are refreshed.
    pub refine_start: usize,
    pub embed_dim: usize,
    /// Stem width of the network.
    pub width: usize,
    pub use_variation: bool,
    pub use_omission: bool,
    /// Let the variation gradient reach border embeddings through the anchor.
    pub symmetric: bool,
    pub seed: u64,
}

impl Default for MsgConfig {
    fn default() -> Self {
        Self {
            beta: 0.7,
            lambda_v: 1.0,
            epochs: 20,
            lr0: 5e-3,
            power: 0.9,
            batch: 16,
            patch: 128,
            stride: 128,
            refine_every: 1,
            refine_start: 0,
            embed_dim: 64,
            width: 16,
            use_variation: true,
            use_omission: true,
            symmetric: false,
            seed: 0,
        }
    }
}

impl MsgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > -1.0 - 1e-12 && self.beta.is_finite()) {
            return Err(Error::Config(
                "msg.beta must be a finite value >= -1".into(),
            ));
        }
        if !(self.lambda_v >= 0.0 && self.lambda_v.is_finite()) {
            return Err(Error::Config("msg.lambda_v must be >= 0".into()));
        }
        if self.batch == 0 || self.refine_every == 0 || self.embed_dim == 0 || self.width == 0 {
            return Err(Error::Config(
                "msg.batch, msg.refine_every, msg.embed_dim and msg.width must be positive".into(),
            ));
        }
        check_patch_geometry(self.patch, self.stride).map_err(|e| Error::Config(e.to_string()))?;
        if self.patch % SegmentationModel::ALIGN != 0 {
            return Err(Error::Config(format!(
                "msg.patch must be a multiple of {}",
                SegmentationModel::ALIGN
            )));
        }
        SgdConfig {
            lr0: self.lr0,
            max_steps: 1,
            power: self.power,
            batch: self.batch,
        }
        .validate()
    }

    pub fn new_model(&self) -> SegmentationModel {
        SegmentationModel::new(self.width, self.embed_dim, self.seed)
    }

    fn refreshes_at(&self, epoch: usize) -> bool {
        self.use_omission && epoch >= self.refine_start && epoch % self.refine_every == 0
    }
}

/// Loss terms of one sample and the parameter gradients of their weighted
/// sum `msgo/(H·W) + λ_v·msgv`.
#[derive(Debug, Clone)]
pub struct SampleLoss {
    pub msgo: f64,
    pub msgv: f64,
    pub total: f64,
    pub grads: Vec<Tensor>,
}

/// Training objective for one patch. The variation term groups embeddings
/// by the mined proposal `original`; the cross-entropy targets `target`.
pub fn sample_loss(
    model: &SegmentationModel,
    image: &Tensor,
    original: &ProposalMap,
    target: &ProposalMap,
    cfg: &MsgConfig,
) -> Result<SampleLoss> {
    sample_loss_with_anchor(model, image, original, target, cfg, None)
}

/// [`sample_loss`] with the variation anchor pinned to `anchor` instead of
/// the current border mean (ignored when `symmetric` is set). Pinning makes
/// the detached objective an ordinary function of the parameters, which is
/// what a finite-difference check needs.
pub fn sample_loss_with_anchor(
    model: &SegmentationModel,
    image: &Tensor,
    original: &ProposalMap,
    target: &ProposalMap,
    cfg: &MsgConfig,
    anchor: Option<&[f64]>,
) -> Result<SampleLoss> {
    let trace = model.forward(image)?;
    let terms = sample_terms(&trace, original, target, cfg, anchor)?;
    let grads = model.backward(&trace, &terms.dlogits, terms.demb.as_ref())?;
    Ok(SampleLoss {
        msgo: terms.msgo,
        msgv: terms.msgv,
        total: terms.total,
        grads,
    })
}

/// Total of [`sample_loss_with_anchor`] without backpropagation, plus the
/// ReLU sign pattern of the forward pass.
pub fn sample_value_with_anchor(
    model: &SegmentationModel,
    image: &Tensor,
    original: &ProposalMap,
    target: &ProposalMap,
    cfg: &MsgConfig,
    anchor: Option<&[f64]>,
) -> Result<(f64, Vec<bool>)> {
    let trace = model.forward(image)?;
    let terms = sample_terms(&trace, original, target, cfg, anchor)?;
    Ok((terms.total, trace.relu_pattern()))
}

struct Terms {
    msgo: f64,
    msgv: f64,
    total: f64,
    dlogits: Tensor,
    demb: Option<Tensor>,
}

fn sample_terms(
    trace: &ModelTrace,
    original: &ProposalMap,
    target: &ProposalMap,
    cfg: &MsgConfig,
    anchor: Option<&[f64]>,
) -> Result<Terms> {
    let (msgo_sum, mut dlogits) = loss_msgo_with_grad(&trace.probs, target)?;
    let (_, h, w) = trace.probs.dims3()?;
    let norm = 1.0 / (h * w) as f64;
    dlogits.scale(norm);
    let msgo = msgo_sum * norm;
    let (msgv, demb) = if cfg.use_variation && cfg.lambda_v > 0.0 {
        let sets = partition_embeddings(&trace.embedding, original)?;
        let (v, mut g) = match anchor {
            Some(a) if !cfg.symmetric && !sets.border.is_empty() => {
                loss_msgv_anchored(&sets, Some(a))
            }
            _ => loss_msgv_with_grad(&sets, cfg.symmetric),
        };
        g.scale(cfg.lambda_v);
        (v, Some(g))
    } else {
        (0.0, None)
    };
    let lambda = if cfg.use_variation { cfg.lambda_v } else { 0.0 };
    Ok(Terms {
        msgo,
        msgv,
        total: total_loss(msgo, msgv, lambda),
        dlogits,
        demb,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-pixel cross-entropy over the epoch's samples.
    pub loss_msgo: f64,
    pub loss_msgv: f64,
    pub loss_total: f64,
    /// Learning rate of the epoch's first step.
    pub lr: f64,
    /// Pixels relabelled by the refresh at the start of this epoch.
    pub relabeled: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SegmentationModel,
    pub log: Vec<EpochLog>,
    /// Refined proposals in effect during the last epoch.
    pub refined: Vec<ProposalMap>,
}

/// Current refined proposals for every patch, plus the relabelled count.
pub fn refresh_proposals(
    model: &SegmentationModel,
    patches: &[Patch],
    beta: f64,
) -> Result<(Vec<ProposalMap>, usize)> {
    let refined: Vec<Refinement> = patches
        .par_iter()
        .map(|p| {
            let trace = model.forward(&image_tensor(&p.image))?;
            refine_proposal(&trace.embedding, &p.proposal, beta)
        })
        .collect::<Result<_>>()?;
    let relabeled = refined.iter().map(|r| r.relabeled).sum();
    Ok((refined.into_iter().map(|r| r.proposal).collect(), relabeled))
}

pub fn train_segmentation(patches: &[Patch], cfg: &MsgConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if patches.is_empty() {
        return Err(Error::InvalidArgument("no training patches".into()));
    }
    for p in patches {
        if p.image.dims() != (cfg.patch, cfg.patch) || p.proposal.dims() != p.image.dims() {
            return Err(Error::DimensionMismatch {
                expected: (cfg.patch, cfg.patch),
                actual: p.image.dims(),
            });
        }
    }
    let mut model = cfg.new_model();
    let inputs: Vec<Tensor> = patches.iter().map(|p| image_tensor(&p.image)).collect();
    let mut targets: Vec<ProposalMap> = patches.iter().map(|p| p.proposal.clone()).collect();
    let batches_per_epoch = patches.len().div_ceil(cfg.batch);
    let sgd = SgdConfig {
        lr0: cfg.lr0,
        max_steps: (cfg.epochs * batches_per_epoch).max(1),
        power: cfg.power,
        batch: cfg.batch,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_5a3b1e5);
    let mut order: Vec<usize> = (0..patches.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut relabeled = 0;
        if cfg.refreshes_at(epoch) {
            let (fresh, n) = refresh_proposals(&model, patches, cfg.beta)?;
            targets = fresh;
            relabeled = n;
        }
        order.shuffle(&mut rng);
        let (mut sum_o, mut sum_v, mut sum_t) = (0.0, 0.0, 0.0);
        let mut first_lr = None;
        for (b, batch) in order.chunks(cfg.batch).enumerate() {
            let losses: Vec<SampleLoss> = batch
                .par_iter()
                .map(|&i| sample_loss(&model, &inputs[i], &patches[i].proposal, &targets[i], cfg))
                .collect::<Result<_>>()?;
            let mut grads = losses[0].grads.clone();
            for l in &losses[1..] {
                for (g, x) in grads.iter_mut().zip(&l.grads) {
                    g.add_assign(x)?;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for g in &mut grads {
                g.scale(inv);
            }
            for l in &losses {
                if !l.total.is_finite() {
                    return Err(Error::NonFiniteLoss(format!("epoch {epoch}, batch {b}")));
                }
                sum_o += l.msgo;
                sum_v += l.msgv;
                sum_t += l.total;
            }
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss(format!(
                    "epoch {epoch}, batch {b} (gradient)"
                )));
            }
            let lr = poly_decay_lr(step, &sgd)?;
            first_lr.get_or_insert(lr);
            sgd_step(&mut model.params_mut(), &grads, lr)?;
            step += 1;
        }
        let n = patches.len() as f64;
        let entry = EpochLog {
            epoch,
            loss_msgo: sum_o / n,
            loss_msgv: sum_v / n,
            loss_total: sum_t / n,
            lr: first_lr.unwrap_or(0.0),
            relabeled,
        };
        log::info!(
            "epoch {epoch}: msgo {:.4} msgv {:.4} lr {:.2e} relabeled {relabeled}",
            entry.loss_msgo,
            entry.loss_msgv,
            entry.lr
        );
        log.push(entry);
    }
    Ok(TrainOutcome {
        model,
        log,
        refined: targets,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub labels: ProposalMap,
    pub mask: Mask,
}

/// Tile the image like training patches, average the logits where tiles
/// overlap and take the per-pixel argmax (lowest class on ties).
pub fn predict(
    img: &Image,
    model: &SegmentationModel,
    patch: usize,
    stride: usize,
) -> Result<Prediction> {
    check_patch_geometry(patch, stride)?;
    if patch % SegmentationModel::ALIGN != 0 {
        return Err(Error::InvalidArgument(format!(
            "patch {patch} is not a multiple of {}",
            SegmentationModel::ALIGN
        )));
    }
    let (h, w) = img.dims();
    let (ph, pw) = (
        padded_extent(h, patch, stride),
        padded_extent(w, patch, stride),
    );
    let mut origins = Vec::new();
    for r in patch_origins(h, stride) {
        for c in patch_origins(w, stride) {
            origins.push((r, c));
        }
    }
    let tiles: Vec<Tensor> = origins
        .par_iter()
        .map(|&(r, c)| {
            let window = img.reflect_window(r, c, patch, patch);
            Ok(model.forward(&image_tensor(&window))?.logits)
        })
        .collect::<Result<_>>()?;
    let plane = ph * pw;
    let mut acc = vec![0.0; CLASSES * plane];
    let mut hits = vec![0u32; plane];
    let pp = patch * patch;
    for (&(r, c), t) in origins.iter().zip(&tiles) {
        for y in 0..patch {
            for x in 0..patch {
                let q = (r + y) * pw + c + x;
                hits[q] += 1;
                for k in 0..CLASSES {
                    acc[k * plane + q] += t.data()[k * pp + y * patch + x];
                }
            }
        }
    }
    let mut labels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let q = y * pw + x;
            let n = f64::from(hits[q]);
            let mut best = 0;
            for k in 1..CLASSES {
                if acc[k * plane + q] / n > acc[best * plane + q] / n {
                    best = k;
                }
            }
            labels.push(best as u16);
        }
    }
    let labels = ProposalMap::new(h, w, labels)?;
    Ok(Prediction {
        mask: labels.gland_mask(),
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::slice_patches;
    use crate::nn::Conv2d;

    fn tiny_cfg() -> MsgConfig {
        MsgConfig {
            epochs: 2,
            batch: 2,
            patch: 8,
            stride: 8,
            embed_dim: 4,
            width: 2,
            ..MsgConfig::default()
        }
    }

    fn toy_patches() -> Vec<Patch> {
        let data: Vec<f64> = (0..3 * 16 * 16)
            .map(|i| ((i * 31) % 23) as f64 / 23.0)
            .collect();
        let img = Image::new(16, 16, data).unwrap();
        let prop: Vec<u16> = (0..256).map(|i| ((i / 16 + i % 16) % 3) as u16).collect();
        let prop = ProposalMap::new(16, 16, prop).unwrap();
        slice_patches(&img, &prop, 8, 8).unwrap()
    }

    /// Border mean of the model's embedding, frozen for gradient checks.
    pub(crate) fn frozen_anchor(
        m: &SegmentationModel,
        x: &Tensor,
        prop: &ProposalMap,
    ) -> Option<Vec<f64>> {
        partition_embeddings(&m.forward(x).unwrap().embedding, prop)
            .unwrap()
            .border
            .mean()
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        use crate::nn::{finite_difference_check_piecewise, Stencil, OBJECTIVE_STEP};
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let variants = [
            (false, 0.7, false),
            (false, 0.7, true),
            (false, 100.0, true),
            (true, 0.7, true),
        ];
        for (symmetric, lambda_v, use_variation) in variants {
            let cfg = MsgConfig {
                symmetric,
                lambda_v,
                use_variation,
                ..tiny_cfg()
            };
            let mut model = SegmentationModel::new(2, 4, 5);
            let x =
                Tensor::from_vec(vec![3, 8, 8], (0..192).map(|_| rng.random()).collect()).unwrap();
            let prop: Vec<u16> = (0..64).map(|_| rng.random_range(0..3)).collect();
            let prop = ProposalMap::new(8, 8, prop).unwrap();
            let target = refine_proposal(&model.forward(&x).unwrap().embedding, &prop, 0.2)
                .unwrap()
                .proposal;
            let anchor = frozen_anchor(&model, &x, &prop);
            let analytic =
                sample_loss_with_anchor(&model, &x, &prop, &target, &cfg, anchor.as_deref())
                    .unwrap()
                    .grads;
            let report = finite_difference_check_piecewise(
                &mut model,
                &analytic,
                |m: &SegmentationModel| {
                    sample_value_with_anchor(m, &x, &prop, &target, &cfg, anchor.as_deref())
                },
                OBJECTIVE_STEP,
                Stencil::Ridders,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-5, "{report:?}");
        }
    }

    #[test]
    fn detached_anchor_blocks_border_gradient() {
        // with only border pixels carrying a variation gradient path, the
        // detached loss must not move anything
        let e = Tensor::from_vec(vec![2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let p = ProposalMap::new(1, 2, vec![1, 2]).unwrap();
        let sets = partition_embeddings(&e, &p).unwrap();
        let (_, g) = loss_msgv_with_grad(&sets, false);
        assert_eq!((g.data()[0], g.data()[2]), (0.0, 0.0));
        let (_, g) = loss_msgv_with_grad(&sets, true);
        assert_eq!((g.data()[0], g.data()[2]), (2.0, -2.0));
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let cfg = MsgConfig {
            epochs: 0,
            ..tiny_cfg()
        };
        let out = train_segmentation(&toy_patches(), &cfg).unwrap();
        assert_eq!(out.model, cfg.new_model());
        assert!(out.log.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let a = train_segmentation(&toy_patches(), &tiny_cfg()).unwrap();
        let b = train_segmentation(&toy_patches(), &tiny_cfg()).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.log, b.log);
        assert!(train_segmentation(&[], &tiny_cfg()).is_err());
    }

    #[test]
    fn constant_classifier_predicts_background() {
        let mut m = SegmentationModel::new(2, 4, 0);
        m.cls = Conv2d::zeros(4, 3, 1);
        m.cls.bias.as_mut().unwrap().data_mut()[0] = 5.0;
        let img = Image::filled(10, 13, [0.2, 0.5, 0.7]).unwrap();
        let p = predict(&img, &m, 8, 4).unwrap();
        assert_eq!(p.labels.dims(), (10, 13));
        assert_eq!(p.mask.count(), 0);
    }

    #[test]
    fn logit_scaling_keeps_labels() {
        let m = SegmentationModel::new(2, 4, 3);
        let data: Vec<f64> = (0..3 * 12 * 9)
            .map(|i| ((i * 17) % 13) as f64 / 13.0)
            .collect();
        let img = Image::new(12, 9, data).unwrap();
        let base = predict(&img, &m, 8, 4).unwrap();
        let mut scaled = m.clone();
        scaled.cls.weight.scale(3.5);
        scaled.cls.bias.as_mut().unwrap().scale(3.5);
        assert_eq!(predict(&img, &scaled, 8, 4).unwrap(), base);
        let [n, g, i] = base.labels.histogram();
        assert_eq!(base.mask.count(), g + i);
        assert_eq!(n + g + i, 108);
    }
}
