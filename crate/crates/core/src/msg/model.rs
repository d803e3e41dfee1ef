//! Desk-scale segmentation network.
//!
//! `stem` runs at full resolution, `down` pools twice, convolves and
//! upsamples back; their outputs are concatenated and projected by a 1×1
//! `head` into the pixel embedding, which is standardized per channel so it
//! cannot shrink towards a constant vector. `cls` is a 1×1 classifier on
//! top.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{
    concat_channels, load_checkpoint, save_checkpoint, softmax_channels, split_channels, Conv2d,
    Layer, Parameterized, Sequential, Tensor, Trace,
};

pub const CLASSES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationModel {
    pub stem: Sequential,
    pub down: Sequential,
    pub head: Sequential,
    pub cls: Conv2d,
}

/// Activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ModelTrace {
    stem: Trace,
    down: Trace,
    head: Trace,
    stem_channels: usize,
    /// Pixel embeddings `D_emb×H×W`.
    pub embedding: Tensor,
    pub logits: Tensor,
    /// Channel softmax of `logits`.
    pub probs: Tensor,
}

impl ModelTrace {
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = self.stem.relu_pattern();
        out.extend(self.down.relu_pattern());
        out.extend(self.head.relu_pattern());
        out
    }
}

impl SegmentationModel {
    /// Stem width `width`, deeper stages `2·width` and `3·width`.
    pub fn new(width: usize, embed_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c1, c2, c3) = (width, 2 * width, 3 * width);
        // convolutions feeding a standardization carry no bias
        let stem = Conv2d::new(3, c1, 3, &mut rng).without_bias();
        let d1 = Conv2d::new(c1, c2, 3, &mut rng).without_bias();
        let d2 = Conv2d::new(c2, c3, 3, &mut rng).without_bias();
        let d3 = Conv2d::new(c3, c3, 3, &mut rng).without_bias();
        let head = Conv2d::new(c1 + c3, embed_dim, 1, &mut rng).without_bias();
        let cls = Conv2d::new(embed_dim, CLASSES, 1, &mut rng);
        Self::assemble(stem, [d1, d2, d3], head, cls)
    }

    fn assemble(stem: Conv2d, [d1, d2, d3]: [Conv2d; 3], head: Conv2d, cls: Conv2d) -> Self {
        Self {
            stem: Sequential::new(vec![Layer::Conv(stem), Layer::Standardize, Layer::Relu]),
            down: Sequential::new(vec![
                Layer::AvgPool2,
                Layer::Conv(d1),
                Layer::Standardize,
                Layer::Relu,
                Layer::AvgPool2,
                Layer::Conv(d2),
                Layer::Standardize,
                Layer::Relu,
                Layer::Conv(d3),
                Layer::Standardize,
                Layer::Relu,
                Layer::Upsample(4),
            ]),
            head: Sequential::new(vec![Layer::Conv(head), Layer::Standardize]),
            cls,
        }
    }

    /// Inputs must have both spatial extents divisible by this.
    pub const ALIGN: usize = 4;

    pub fn embed_dim(&self) -> usize {
        self.cls.in_channels()
    }

    pub fn forward(&self, x: &Tensor) -> Result<ModelTrace> {
        let (_, h, w) = x.dims3()?;
        if h % Self::ALIGN != 0 || w % Self::ALIGN != 0 {
            return Err(Error::ShapeMismatch(format!(
                "input {h}x{w} is not a multiple of {}",
                Self::ALIGN
            )));
        }
        let (s, stem) = self.stem.forward(x)?;
        let (d, down) = self.down.forward(&s)?;
        let stem_channels = s.dims3()?.0;
        let (embedding, head) = self.head.forward(&concat_channels(&s, &d)?)?;
        let logits = self.cls.forward(&embedding)?;
        let probs = softmax_channels(&logits)?;
        Ok(ModelTrace {
            stem,
            down,
            head,
            stem_channels,
            embedding,
            logits,
            probs,
        })
    }

    /// Parameter gradients from a logit gradient plus an optional direct
    /// gradient on the embedding.
    pub fn backward(
        &self,
        trace: &ModelTrace,
        grad_logits: &Tensor,
        grad_embedding: Option<&Tensor>,
    ) -> Result<Vec<Tensor>> {
        let dims = trace.embedding.dims3()?;
        let (de, dwc, dbc) =
            self.cls
                .backward_cols(trace.embedding.data(), dims, grad_logits, true)?;
        let mut de = de.expect("requested");
        if let Some(g) = grad_embedding {
            de.add_assign(g)?;
        }
        let (dcat, head_grads) = self.head.backward(&trace.head, &de)?;
        let (mut ds, dd) = split_channels(&dcat, trace.stem_channels)?;
        let (ds_down, down_grads) = self.down.backward(&trace.down, &dd)?;
        ds.add_assign(&ds_down)?;
        let stem_grads = self.stem.backward_params(&trace.stem, &ds)?;
        let mut grads = stem_grads;
        grads.extend(down_grads);
        grads.extend(head_grads);
        grads.push(dwc);
        grads.extend(dbc);
        Ok(grads)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let named = self.named_params();
        save_checkpoint(named.iter().map(|(n, t)| (n.as_str(), *t)), path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_named(load_checkpoint(path)?)
    }

    /// Rebuild from checkpoint tensors; widths are read off the shapes.
    pub fn from_named(tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut tensors: std::collections::BTreeMap<String, Tensor> = tensors.into_iter().collect();
        let mut take = |name: &str| -> Result<Conv2d> {
            let w = tensors
                .remove(&format!("{name}.weight"))
                .ok_or_else(|| Error::Checkpoint(format!("missing {name}.weight")))?;
            let b = tensors.remove(&format!("{name}.bias"));
            Conv2d::from_parts(w, b).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))
        };
        let stem = take("stem.0")?;
        let downs = [take("down.1")?, take("down.5")?, take("down.8")?];
        let head = take("head.0")?;
        let cls = take("cls")?;
        drop(take);
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        let model = Self::assemble(stem, downs, head, cls);
        model.check_wiring()?;
        Ok(model)
    }

    fn check_wiring(&self) -> Result<()> {
        let convs: Vec<&Conv2d> = self
            .stem
            .convs()
            .chain(self.down.convs())
            .chain(self.head.convs())
            .chain([&self.cls])
            .collect();
        let [stem, d1, d2, d3, head, cls] = convs[..] else {
            return Err(Error::Checkpoint("unexpected layer count".into()));
        };
        let biased =
            [stem, d1, d2, d3, head].iter().all(|c| c.bias.is_none()) && cls.bias.is_some();
        let ok = biased
            && stem.in_channels() == 3
            && stem.kernel() == 3
            && d1.in_channels() == stem.out_channels()
            && d2.in_channels() == d1.out_channels()
            && d3.in_channels() == d2.out_channels()
            && head.in_channels() == stem.out_channels() + d3.out_channels()
            && head.kernel() == 1
            && cls.in_channels() == head.out_channels()
            && cls.out_channels() == CLASSES
            && cls.kernel() == 1;
        if !ok {
            return Err(Error::Checkpoint("layer shapes do not chain".into()));
        }
        Ok(())
    }
}

impl Parameterized for SegmentationModel {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, net) in [
            ("stem", &self.stem),
            ("down", &self.down),
            ("head", &self.head),
        ] {
            out.extend(
                net.named_params()
                    .into_iter()
                    .map(|(n, t)| (format!("{prefix}.{n}"), t)),
            );
        }
        out.push(("cls.weight".into(), &self.cls.weight));
        if let Some(b) = &self.cls.bias {
            out.push(("cls.bias".into(), b));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.stem.params_mut();
        out.extend(self.down.params_mut());
        out.extend(self.head.params_mut());
        out.push(&mut self.cls.weight);
        out.extend(self.cls.bias.as_mut());
        out
    }
}
