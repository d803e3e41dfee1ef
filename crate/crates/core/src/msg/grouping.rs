//! Embedding sets, the variation loss, similarity-based relabelling and the
//! proposal cross-entropy.

use crate::error::{Error, Result};
use crate::imaging::{check_dims, ProposalMap};
use crate::nn::{CompensatedSum, Tensor};

/// Guard for vector norms and log arguments.
const TINY: f64 = 1e-12;

/// Embeddings of one proposal class, with their pixel indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingSet {
    pub pixels: Vec<usize>,
    /// Row-major, one embedding per entry of `pixels`.
    pub vectors: Vec<f64>,
    pub dim: usize,
}

impl EmbeddingSet {
    fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn mean(&self) -> Option<Vec<f64>> {
        if self.is_empty() {
            return None;
        }
        let mut m = vec![0.0; self.dim];
        for v in self.vectors.chunks_exact(self.dim) {
            for (a, x) in m.iter_mut().zip(v) {
                *a += x;
            }
        }
        let n = self.len() as f64;
        Some(m.into_iter().map(|x| x / n).collect())
    }

    fn push(&mut self, pixel: usize, v: impl Iterator<Item = f64>) {
        self.pixels.push(pixel);
        self.vectors.extend(v);
    }
}

/// Pixel embeddings split by proposal class: border `G`, interior `I`,
/// background `N`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSets {
    pub height: usize,
    pub width: usize,
    pub border: EmbeddingSet,
    pub interior: EmbeddingSet,
    pub background: EmbeddingSet,
}

impl EmbeddingSets {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (
            self.border.len(),
            self.interior.len(),
            self.background.len(),
        )
    }

    pub fn dim(&self) -> usize {
        self.border.dim
    }
}

pub fn partition_embeddings(embedding: &Tensor, proposal: &ProposalMap) -> Result<EmbeddingSets> {
    let (d, h, w) = embedding.dims3()?;
    check_dims((h, w), proposal.dims())?;
    let hw = h * w;
    let e = embedding.data();
    let mut sets = EmbeddingSets {
        height: h,
        width: w,
        border: EmbeddingSet::new(d),
        interior: EmbeddingSet::new(d),
        background: EmbeddingSet::new(d),
    };
    for (p, &class) in proposal.data().iter().enumerate() {
        let set = match class {
            ProposalMap::BORDER => &mut sets.border,
            ProposalMap::INTERIOR => &mut sets.interior,
            _ => &mut sets.background,
        };
        set.push(p, (0..d).map(|c| e[c * hw + p]));
    }
    Ok(sets)
}

pub fn loss_msgv(sets: &EmbeddingSets) -> f64 {
    loss_msgv_with_grad(sets, false).0
}

/// Mean squared distance of interior embeddings to the border mean, and its
/// gradient as a `D×H×W` map. The anchor is a constant unless `symmetric`
/// is set, in which case border embeddings receive the gradient through the
/// mean as well.
pub fn loss_msgv_with_grad(sets: &EmbeddingSets, symmetric: bool) -> (f64, Tensor) {
    let Some(anchor) = sets.border.mean() else {
        return loss_msgv_anchored(sets, None);
    };
    let (loss, mut grad) = loss_msgv_anchored(sets, Some(&anchor));
    if let (true, Some(interior_mean)) = (symmetric, sets.interior.mean()) {
        let hw = sets.height * sets.width;
        let kg = sets.border.len() as f64;
        let g = grad.data_mut();
        for &p in &sets.border.pixels {
            for (c, (a, m)) in anchor.iter().zip(&interior_mean).enumerate() {
                g[c * hw + p] = 2.0 * (a - m) / kg;
            }
        }
    }
    (loss, grad)
}

/// Variation loss against a given anchor (zero without one or without
/// interior pixels); the gradient reaches interior embeddings only.
pub fn loss_msgv_anchored(sets: &EmbeddingSets, anchor: Option<&[f64]>) -> (f64, Tensor) {
    let d = sets.dim();
    let hw = sets.height * sets.width;
    let mut grad = vec![0.0; d * hw];
    let shape = vec![d, sets.height, sets.width];
    let Some(anchor) = anchor.filter(|_| !sets.interior.is_empty()) else {
        return (0.0, Tensor::from_parts(shape, grad));
    };
    let ki = sets.interior.len() as f64;
    let mut loss = CompensatedSum::default();
    for (j, &p) in sets.interior.pixels.iter().enumerate() {
        for (c, (x, a)) in sets.interior.vector(j).iter().zip(anchor).enumerate() {
            let diff = x - a;
            loss.add(diff * diff);
            grad[c * hw + p] = 2.0 * diff / ki;
        }
    }
    (loss.value() / ki, Tensor::from_parts(shape, grad))
}

fn normalized(v: &[f64]) -> impl Iterator<Item = f64> + '_ {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(TINY);
    v.iter().map(move |x| x / n)
}

/// Mean cosine similarity between `n` and every member of `set`, or
/// negative infinity for an empty set.
pub fn similarity_to_set(n: &[f64], set: &EmbeddingSet) -> f64 {
    if set.is_empty() {
        return f64::NEG_INFINITY;
    }
    let nn: Vec<f64> = normalized(n).collect();
    let total: f64 = (0..set.len())
        .map(|i| {
            normalized(set.vector(i))
                .zip(&nn)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        })
        .sum();
    total / set.len() as f64
}

/// Sum of normalized members: mean cosine becomes one dot product.
struct SetProbe {
    sum: Vec<f64>,
    count: usize,
}

impl SetProbe {
    fn new(set: &EmbeddingSet) -> Self {
        let mut sum = vec![0.0; set.dim];
        for i in 0..set.len() {
            for (s, x) in sum.iter_mut().zip(normalized(set.vector(i))) {
                *s += x;
            }
        }
        Self {
            sum,
            count: set.len(),
        }
    }

    fn similarity(&self, unit: &[f64]) -> f64 {
        if self.count == 0 {
            return f64::NEG_INFINITY;
        }
        unit.iter().zip(&self.sum).map(|(a, b)| a * b).sum::<f64>() / self.count as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub proposal: ProposalMap,
    /// Background pixels moved to border or interior.
    pub relabeled: usize,
}

/// Relabel background pixels whose mean cosine similarity to the border or
/// interior set exceeds `beta`; the larger similarity picks the class, an
/// exact tie goes to border. Only the original background is examined.
pub fn refine_proposal(
    embedding: &Tensor,
    proposal: &ProposalMap,
    beta: f64,
) -> Result<Refinement> {
    let sets = partition_embeddings(embedding, proposal)?;
    let (g, i) = (SetProbe::new(&sets.border), SetProbe::new(&sets.interior));
    let mut data = proposal.data().to_vec();
    let mut relabeled = 0;
    let mut unit = vec![0.0; sets.dim()];
    for (j, &p) in sets.background.pixels.iter().enumerate() {
        for (u, x) in unit.iter_mut().zip(normalized(sets.background.vector(j))) {
            *u = x;
        }
        let (sg, si) = (g.similarity(&unit), i.similarity(&unit));
        if sg.max(si) > beta {
            data[p] = if sg >= si {
                ProposalMap::BORDER
            } else {
                ProposalMap::INTERIOR
            };
            relabeled += 1;
        }
    }
    Ok(Refinement {
        proposal: ProposalMap::new(proposal.height(), proposal.width(), data)?,
        relabeled,
    })
}

fn check_probs(probs: &Tensor, target: &ProposalMap) -> Result<usize> {
    let (c, h, w) = probs.dims3()?;
    if c != ProposalMap::CLASSES {
        return Err(Error::ShapeMismatch(format!(
            "expected 3 class channels, got {c}"
        )));
    }
    check_dims((h, w), target.dims())?;
    Ok(h * w)
}

/// Pixel-summed cross-entropy `−Σ ln max(X̃[RP(p), p], 1e-12)`.
pub fn loss_msgo(probs: &Tensor, target: &ProposalMap) -> Result<f64> {
    let hw = check_probs(probs, target)?;
    let x = probs.data();
    Ok(target
        .data()
        .iter()
        .enumerate()
        .map(|(p, &c)| -x[c as usize * hw + p].max(TINY).ln())
        .collect::<CompensatedSum>()
        .value())
}

/// [`loss_msgo`] with its gradient w.r.t. the logits behind `probs`.
pub fn loss_msgo_with_grad(probs: &Tensor, target: &ProposalMap) -> Result<(f64, Tensor)> {
    let hw = check_probs(probs, target)?;
    let x = probs.data();
    let mut grad = vec![0.0; x.len()];
    let mut loss = CompensatedSum::default();
    for (p, &c) in target.data().iter().enumerate() {
        let pc = x[c as usize * hw + p];
        loss.add(-pc.max(TINY).ln());
        if pc > TINY {
            for k in 0..ProposalMap::CLASSES {
                grad[k * hw + p] = x[k * hw + p];
            }
            grad[c as usize * hw + p] -= 1.0;
        }
    }
    Ok((
        loss.value(),
        Tensor::from_parts(probs.shape().to_vec(), grad),
    ))
}

pub fn total_loss(msgo: f64, msgv: f64, lambda_v: f64) -> f64 {
    msgo + lambda_v * msgv
}
