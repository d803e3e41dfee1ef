//! Selective proposal mining.
//!
//! Per image: train a three-layer encoder with a self-labelling
//! cross-entropy plus a spatial-continuity penalty, cluster the normalized
//! features with k-means, keep the darkest cluster as gland border and fill
//! the areas it encloses as gland interior.

mod kmeans;
mod morph;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use kmeans::{kmeans_points, wcss_of, KMeansFit, KMeansParams};
pub use morph::{assemble_proposal, fill_interior, select_border_region, BorderSelection};

use crate::error::{Error, Result};
use crate::imaging::{to_gray_level, Image, LabelMap, ProposalMap};
use crate::nn::{
    l2_normalize_channels, poly_decay_lr, sgd_step, softmax_channels, softmax_channels_backward,
    CompensatedSum, Conv2d, Layer, Parameterized, Sequential, SgdConfig, Tensor, Trace,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpmConfig {
    pub iterations: usize,
    pub lr0: f64,
    pub power: f64,
    /// Encoder width `D`.
    pub feature_channels: usize,
    /// Largest pixel offset `S` in the continuity loss.
    pub sc_shift_range: usize,
    pub sc_weight: f64,
    pub kmeans_k: usize,
    pub kmeans_seed: u64,
    pub kmeans_max_iters: usize,
    pub kmeans_restarts: usize,
    /// Encoder initialization seed.
    pub seed: u64,
}

impl Default for SpmConfig {
    fn default() -> Self {
        Self {
            iterations: 50,
            lr0: 1e-2,
            power: 0.9,
            feature_channels: 32,
            sc_shift_range: 2,
            sc_weight: 1.0,
            kmeans_k: 5,
            kmeans_seed: 0,
            kmeans_max_iters: 100,
            kmeans_restarts: 5,
            seed: 0,
        }
    }
}

impl SpmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("spm.iterations must be at least 1".into()));
        }
        if self.sc_shift_range == 0 {
            return Err(Error::Config(
                "spm.sc_shift_range must be at least 1".into(),
            ));
        }
        if self.kmeans_k < 2 {
            return Err(Error::Config("spm.kmeans_k must be at least 2".into()));
        }
        if self.feature_channels == 0 || self.kmeans_restarts == 0 {
            return Err(Error::Config(
                "spm.feature_channels and spm.kmeans_restarts must be positive".into(),
            ));
        }
        if !(self.sc_weight >= 0.0) {
            return Err(Error::Config("spm.sc_weight must be >= 0".into()));
        }
        self.sgd().validate()
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr0: self.lr0,
            max_steps: self.iterations,
            power: self.power,
            batch: 1,
        }
    }

    fn kmeans_params(&self) -> KMeansParams {
        KMeansParams {
            k: self.kmeans_k,
            seed: self.kmeans_seed,
            max_iters: self.kmeans_max_iters,
            restarts: self.kmeans_restarts,
        }
    }
}

/// Three 3×3 convolutions (`3→D→D→D`), standardization and ReLU between.
#[derive(Debug, Clone, PartialEq)]
pub struct ShallowEncoder {
    pub net: Sequential,
}

impl ShallowEncoder {
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // the first two feed a standardization, which would cancel a bias
        Self::from_convs([
            Conv2d::new(3, channels, 3, &mut rng).without_bias(),
            Conv2d::new(channels, channels, 3, &mut rng).without_bias(),
            Conv2d::new(channels, channels, 3, &mut rng),
        ])
    }

    pub fn zeros(channels: usize) -> Self {
        Self::from_convs([
            Conv2d::zeros(3, channels, 3).without_bias(),
            Conv2d::zeros(channels, channels, 3).without_bias(),
            Conv2d::zeros(channels, channels, 3),
        ])
    }

    fn from_convs([a, b, c]: [Conv2d; 3]) -> Self {
        Self {
            net: Sequential::new(vec![
                Layer::Conv(a),
                Layer::Standardize,
                Layer::Relu,
                Layer::Conv(b),
                Layer::Standardize,
                Layer::Relu,
                Layer::Conv(c),
            ]),
        }
    }

    pub fn channels(&self) -> usize {
        self.net.convs().last().map_or(0, Conv2d::out_channels)
    }
}

impl Parameterized for ShallowEncoder {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.net.named_params()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.net.params_mut()
    }
}

pub(crate) fn image_tensor(img: &Image) -> Tensor {
    Tensor::from_parts(vec![3, img.height(), img.width()], img.data().to_vec())
}

/// Both feature views of one forward pass.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// Channel softmax of the raw output (the self-labelling target space).
    pub probs: Tensor,
    /// Per-pixel L2-normalized raw output (clustering space).
    pub normalized: Tensor,
}

pub fn encoder_forward(img: &Image, enc: &ShallowEncoder) -> Result<EncoderOutput> {
    let raw = enc.net.infer(&image_tensor(img))?;
    Ok(EncoderOutput {
        probs: softmax_channels(&raw)?,
        normalized: l2_normalize_channels(&raw)?,
    })
}

/// Per-pixel argmax over channels, lowest channel on ties.
pub fn cluster_label(features: &Tensor) -> Result<LabelMap> {
    let (d, h, w) = features.dims3()?;
    if d == 0 {
        return Err(Error::ShapeMismatch("feature map has no channels".into()));
    }
    let hw = h * w;
    let f = features.data();
    let ids = (0..hw)
        .map(|p| {
            let mut best = 0;
            for c in 1..d {
                if f[c * hw + p] > f[best * hw + p] {
                    best = c;
                }
            }
            best as u16
        })
        .collect();
    LabelMap::new(h, w, d, ids)
}

fn check_labels(features: &Tensor, labels: &LabelMap) -> Result<(usize, usize, usize)> {
    let (d, h, w) = features.dims3()?;
    if labels.dims() != (h, w) || labels.classes() > d {
        return Err(Error::ShapeMismatch(format!(
            "labels {:?} ({} classes) vs features {d}x{h}x{w}",
            labels.dims(),
            labels.classes()
        )));
    }
    Ok((d, h, w))
}

/// Self-labelling cross-entropy `Σ_p −ln F[C(p), p]`.
pub fn loss_ss(features: &Tensor, labels: &LabelMap) -> Result<f64> {
    Ok(loss_ss_with_grad(features, labels)?.0)
}

/// [`loss_ss`] and its gradient w.r.t. `features`, labels held fixed.
pub fn loss_ss_with_grad(features: &Tensor, labels: &LabelMap) -> Result<(f64, Tensor)> {
    let (_, h, w) = check_labels(features, labels)?;
    let hw = h * w;
    let f = features.data();
    let mut grad = Tensor::zeros(features.shape());
    let mut loss = CompensatedSum::default();
    for (p, &c) in labels.data().iter().enumerate() {
        let i = c as usize * hw + p;
        loss.add(-f[i].ln());
        grad.data_mut()[i] = -1.0 / f[i];
    }
    Ok((loss.value(), grad))
}

/// Spatial continuity: squared differences between every pixel and its
/// neighbours `s` rows below and `s` columns right, for `s = 1..=S`.
pub fn loss_sc(features: &Tensor, shifts: usize) -> Result<f64> {
    Ok(loss_sc_with_grad(features, shifts)?.0)
}

pub fn loss_sc_with_grad(features: &Tensor, shifts: usize) -> Result<(f64, Tensor)> {
    let (d, h, w) = features.dims3()?;
    let hw = h * w;
    let mut grad = vec![0.0; features.len()];
    let mut loss = CompensatedSum::default();
    // channel planes one at a time; each (row, shift) pair is a pair of
    // contiguous slices, summed plainly and then folded in compensated
    for (f, g) in features
        .data()
        .chunks_exact(hw.max(1))
        .zip(grad.chunks_exact_mut(hw.max(1)))
    {
        for s in 1..=shifts {
            for r in 0..h.saturating_sub(s) {
                let mut part = 0.0;
                for c in 0..w {
                    let (a, b) = (r * w + c, (r + s) * w + c);
                    let diff = f[b] - f[a];
                    part += diff * diff;
                    g[b] += 2.0 * diff;
                    g[a] -= 2.0 * diff;
                }
                loss.add(part);
            }
            if s < w {
                for r in 0..h {
                    let row = &f[r * w..][..w];
                    let grow = &mut g[r * w..][..w];
                    let mut part = 0.0;
                    for c in 0..w - s {
                        let diff = row[c + s] - row[c];
                        part += diff * diff;
                        grow[c + s] += 2.0 * diff;
                        grow[c] -= 2.0 * diff;
                    }
                    loss.add(part);
                }
            }
        }
    }
    Ok((loss.value(), Tensor::from_parts(vec![d, h, w], grad)))
}

/// Loss and parameter gradients of the per-pixel mean SPM objective
/// `(L_SS + sc_weight·L_SC) / (H·W)` with the pseudo-labels given.
pub fn spm_objective(
    enc: &ShallowEncoder,
    input: &Tensor,
    labels: Option<&LabelMap>,
    cfg: &SpmConfig,
) -> Result<(f64, Vec<Tensor>, LabelMap)> {
    let (raw, trace): (Tensor, Trace) = enc.net.forward(input)?;
    let probs = softmax_channels(&raw)?;
    let labels = match labels {
        Some(l) => l.clone(),
        None => cluster_label(&probs)?,
    };
    let (_, h, w) = probs.dims3()?;
    let norm = 1.0 / (h * w) as f64;
    let (ss, mut grad) = loss_ss_with_grad(&probs, &labels)?;
    let (sc, sc_grad) = loss_sc_with_grad(&probs, cfg.sc_shift_range)?;
    for (g, s) in grad.data_mut().iter_mut().zip(sc_grad.data()) {
        *g = (*g + cfg.sc_weight * s) * norm;
    }
    let dlogits = softmax_channels_backward(&probs, &grad)?;
    let grads = enc.net.backward_params(&trace, &dlogits)?;
    Ok(((ss + cfg.sc_weight * sc) * norm, grads, labels))
}

/// Forward-only value of [`spm_objective`] with self-assigned labels.
pub fn spm_loss(enc: &ShallowEncoder, input: &Tensor, cfg: &SpmConfig) -> Result<f64> {
    let probs = softmax_channels(&enc.net.infer(input)?)?;
    let labels = cluster_label(&probs)?;
    objective_value(&probs, &labels, cfg)
}

/// Forward-only value of [`spm_objective`] with the pseudo-labels held at
/// `labels`, plus the ReLU sign pattern of the pass.
pub fn spm_value(
    enc: &ShallowEncoder,
    input: &Tensor,
    labels: &LabelMap,
    cfg: &SpmConfig,
) -> Result<(f64, Vec<bool>)> {
    let (raw, trace) = enc.net.forward(input)?;
    let value = objective_value(&softmax_channels(&raw)?, labels, cfg)?;
    Ok((value, trace.relu_pattern()))
}

fn objective_value(probs: &Tensor, labels: &LabelMap, cfg: &SpmConfig) -> Result<f64> {
    let (_, h, w) = probs.dims3()?;
    let total = loss_ss(probs, labels)? + cfg.sc_weight * loss_sc(probs, cfg.sc_shift_range)?;
    Ok(total / (h * w) as f64)
}

#[derive(Debug, Clone)]
pub struct EncoderRun {
    pub encoder: ShallowEncoder,
    /// Mean per-pixel objective before each update, plus one final entry
    /// after the last update.
    pub loss_curve: Vec<f64>,
}

/// Self-supervised training; `iterations = 0` returns the initial encoder.
pub fn train_encoder(img: &Image, cfg: &SpmConfig) -> Result<EncoderRun> {
    let mut encoder = ShallowEncoder::new(cfg.feature_channels, cfg.seed);
    let input = image_tensor(img);
    let sgd = SgdConfig {
        max_steps: cfg.iterations.max(1),
        ..cfg.sgd()
    };
    let mut loss_curve = Vec::with_capacity(cfg.iterations + 1);
    for it in 0..cfg.iterations {
        let (loss, grads, _) = spm_objective(&encoder, &input, None, cfg)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(format!("spm iteration {it}")));
        }
        loss_curve.push(loss);
        let lr = poly_decay_lr(it, &sgd)?;
        sgd_step(&mut encoder.params_mut(), &grads, lr)?;
    }
    if cfg.iterations > 0 {
        let loss = spm_loss(&encoder, &input, cfg)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss("spm final evaluation".into()));
        }
        loss_curve.push(loss);
    }
    Ok(EncoderRun {
        encoder,
        loss_curve,
    })
}

/// K-means partition of the pixels into candidate regions.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMap {
    pub labels: LabelMap,
    /// Pixel count per region.
    pub counts: Vec<usize>,
    /// Set when there were fewer distinct feature vectors than regions.
    pub degenerate: bool,
}

impl RegionMap {
    pub fn from_labels(labels: LabelMap) -> Self {
        let counts = labels.histogram();
        Self {
            labels,
            counts,
            degenerate: false,
        }
    }

    pub fn empty_regions(&self) -> Vec<usize> {
        (0..self.counts.len())
            .filter(|&r| self.counts[r] == 0)
            .collect()
    }
}

/// Cluster the per-pixel feature vectors of a `D×H×W` map.
pub fn kmeans(features: &Tensor, cfg: &SpmConfig) -> Result<RegionMap> {
    let (d, h, w) = features.dims3()?;
    let hw = h * w;
    let f = features.data();
    let mut points = vec![0.0; hw * d];
    for c in 0..d {
        for p in 0..hw {
            points[p * d + c] = f[c * hw + p];
        }
    }
    let fit = kmeans_points(&points, d, &cfg.kmeans_params())?;
    if fit.degenerate {
        log::warn!(
            "fewer distinct feature vectors than {} regions",
            cfg.kmeans_k
        );
    }
    let labels = LabelMap::new(
        h,
        w,
        cfg.kmeans_k,
        fit.assignments.iter().map(|&a| a as u16).collect(),
    )?;
    let mut regions = RegionMap::from_labels(labels);
    regions.degenerate = fit.degenerate;
    Ok(regions)
}

/// Everything produced while mining one image.
#[derive(Debug, Clone)]
pub struct MinedProposal {
    pub proposal: ProposalMap,
    pub regions: RegionMap,
    pub border_region: usize,
    pub mean_gray: Vec<Option<f64>>,
    pub loss_curve: Vec<f64>,
}

/// Full mining chain for one image.
pub fn mine_proposal(img: &Image, cfg: &SpmConfig, gray_invert: bool) -> Result<MinedProposal> {
    cfg.validate()?;
    let run = train_encoder(img, cfg)?;
    let features = encoder_forward(img, &run.encoder)?;
    let regions = kmeans(&features.normalized, cfg)?;
    let gray = to_gray_level(img, gray_invert);
    let selection = select_border_region(&regions, &gray)?;
    let interior = fill_interior(&selection.mask);
    let proposal = assemble_proposal(&selection.mask, &interior)?;
    Ok(MinedProposal {
        proposal,
        regions,
        border_region: selection.region,
        mean_gray: selection.mean_gray,
        loss_curve: run.loss_curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features(d: usize, h: usize, w: usize, v: &[f64]) -> Tensor {
        Tensor::from_vec(vec![d, h, w], v.to_vec()).unwrap()
    }

    #[test]
    fn argmax_labels() {
        let f = features(3, 1, 1, &[0.1, 0.7, 0.2]);
        assert_eq!(cluster_label(&f).unwrap().data(), &[1]);
        let f = features(3, 1, 1, &[0.2, 0.2, 0.2]);
        assert_eq!(cluster_label(&f).unwrap().data(), &[0]);
        let f = features(4, 1, 1, &[0.0, 0.0, 0.0, 1.0]);
        assert_eq!(cluster_label(&f).unwrap().data(), &[3]);
    }

    #[test]
    fn ss_loss_values() {
        let f = features(3, 1, 1, &[0.7, 0.2, 0.1]);
        let c = LabelMap::new(1, 1, 3, vec![0]).unwrap();
        assert!((loss_ss(&f, &c).unwrap() - 0.356_674_943_938_732_4).abs() < 1e-12);

        let onehot = features(2, 1, 2, &[1.0, 0.0, 0.0, 1.0]);
        let c = cluster_label(&onehot).unwrap();
        assert_eq!(loss_ss(&onehot, &c).unwrap(), 0.0);

        let (h, w) = (3, 4);
        let uniform = Tensor::from_vec(vec![5, h, w], vec![0.2; 5 * h * w]).unwrap();
        let c = cluster_label(&uniform).unwrap();
        assert!((loss_ss(&uniform, &c).unwrap() - (h * w) as f64 * 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sc_loss_values() {
        let constant = Tensor::from_vec(vec![2, 3, 3], vec![0.4; 18]).unwrap();
        assert_eq!(loss_sc(&constant, 2).unwrap(), 0.0);
        let f = features(1, 2, 2, &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(loss_sc(&f, 1).unwrap(), 2.0);
        let f = features(1, 2, 3, &[0.3, 1.0, 0.0, 0.9, 0.2, 0.5]);
        assert_eq!(loss_sc(&f, 5).unwrap() - loss_sc(&f, 2).unwrap(), 0.0);
    }

    #[test]
    fn sc_loss_oracle() {
        // direct translation of the double sum, one term at a time
        let (d, h, w) = (2, 4, 5);
        let v: Vec<f64> = (0..d * h * w)
            .map(|i| ((i * 7919) % 31) as f64 / 31.0)
            .collect();
        let f = features(d, h, w, &v);
        for s_max in 1..=3 {
            let mut want = 0.0;
            for s in 1..=s_max {
                for r in 0..h {
                    for c in 0..w {
                        for ch in 0..d {
                            let at = |rr: usize, cc: usize| v[(ch * h + rr) * w + cc];
                            if r + s < h {
                                want += (at(r + s, c) - at(r, c)).powi(2);
                            }
                            if c + s < w {
                                want += (at(r, c + s) - at(r, c)).powi(2);
                            }
                        }
                    }
                }
            }
            assert!((loss_sc(&f, s_max).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        use crate::nn::{finite_difference_check_piecewise, Stencil, OBJECTIVE_STEP};
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (seed, sc_weight) in [(0, 1.0), (1, 5.0), (2, 0.0)] {
            let cfg = SpmConfig {
                sc_weight,
                ..SpmConfig::default()
            };
            let mut enc = ShallowEncoder::new(4, seed);
            let x =
                Tensor::from_vec(vec![3, 8, 8], (0..192).map(|_| rng.random()).collect()).unwrap();
            let (_, analytic, labels) = spm_objective(&enc, &x, None, &cfg).unwrap();
            let report = finite_difference_check_piecewise(
                &mut enc,
                &analytic,
                |e: &ShallowEncoder| spm_value(e, &x, &labels, &cfg),
                OBJECTIVE_STEP,
                Stencil::Ridders,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-5, "{report:?}");
        }
    }

    #[test]
    fn zero_encoder_is_uniform() {
        let img = Image::filled(4, 5, [0.3, 0.6, 0.9]).unwrap();
        let out = encoder_forward(&img, &ShallowEncoder::zeros(8)).unwrap();
        assert!(out.probs.data().iter().all(|&p| (p - 0.125).abs() < 1e-15));
    }

    #[test]
    fn encoder_views_are_normalized() {
        let data: Vec<f64> = (0..3 * 36).map(|i| ((i * 13) % 17) as f64 / 17.0).collect();
        let img = Image::new(6, 6, data).unwrap();
        let out = encoder_forward(&img, &ShallowEncoder::new(6, 1)).unwrap();
        for p in 0..36 {
            let s: f64 = (0..6).map(|c| out.probs.data()[c * 36 + p]).sum();
            let n: f64 = (0..6)
                .map(|c| out.normalized.data()[c * 36 + p].powi(2))
                .sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!((n.sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_iterations_returns_initial_encoder() {
        let img = Image::filled(4, 4, [0.5; 3]).unwrap();
        let cfg = SpmConfig {
            iterations: 0,
            feature_channels: 4,
            ..SpmConfig::default()
        };
        let run = train_encoder(&img, &cfg).unwrap();
        assert_eq!(run.encoder, ShallowEncoder::new(4, cfg.seed));
        assert!(run.loss_curve.is_empty());
    }

    #[test]
    fn mining_on_flat_image_is_consistent() {
        let img = Image::filled(6, 6, [0.4, 0.5, 0.6]).unwrap();
        let cfg = SpmConfig {
            iterations: 3,
            feature_channels: 4,
            ..SpmConfig::default()
        };
        let mined = mine_proposal(&img, &cfg, true).unwrap();
        assert!(mined.regions.counts[mined.border_region] > 0);
        assert_eq!(mined.loss_curve.len(), 4);
        assert_eq!(mined.proposal.histogram().iter().sum::<usize>(), 36);
    }
}
