use super::layers::{
    avg_pool2, avg_pool2_backward, relu, relu_backward, standardize, standardize_backward,
    upsample_bilinear, upsample_bilinear_backward, Conv2d,
};
use super::{scratch, Parameterized, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    Relu,
    /// Per-channel spatial standardization (no learned affine).
    Standardize,
    AvgPool2,
    Upsample(usize),
}

/// What each layer needs kept from the forward pass.
#[derive(Debug, Clone)]
enum Cache {
    Conv {
        cols: Vec<f64>,
        dims: (usize, usize, usize),
    },
    Input(Tensor),
    Standardized {
        output: Tensor,
        inv_std: Vec<f64>,
    },
    None,
}

/// Cached activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    caches: Vec<Cache>,
}

impl Drop for Trace {
    fn drop(&mut self) {
        for cache in self.caches.drain(..) {
            if let Cache::Conv { cols, .. } = cache {
                scratch::give(cols);
            }
        }
    }
}

impl Trace {
    /// Which ReLU inputs were positive, layer by layer. Two parameter
    /// settings with the same pattern lie on the same smooth piece of the
    /// network function.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for c in &self.caches {
            if let Cache::Input(x) = c {
                out.extend(x.data().iter().map(|&v| v > 0.0));
            }
        }
        out
    }
}

/// A chain of layers applied in order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            _ => None,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Trace)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let (next, cache) = match layer {
                Layer::Conv(conv) => {
                    let dims = cur.dims3()?;
                    let (y, cols) = conv.forward_cols(&cur)?;
                    (y, Cache::Conv { cols, dims })
                }
                Layer::Relu => (relu(&cur), Cache::Input(cur)),
                Layer::Standardize => {
                    let (y, inv_std) = standardize(&cur)?;
                    (y.clone(), Cache::Standardized { output: y, inv_std })
                }
                Layer::AvgPool2 => (avg_pool2(&cur)?, Cache::None),
                Layer::Upsample(f) => (upsample_bilinear(&cur, *f)?, Cache::None),
            };
            caches.push(cache);
            cur = next;
        }
        Ok((cur, Trace { caches }))
    }

    /// Forward pass without keeping activations.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = match layer {
                Layer::Conv(conv) => conv.forward(&cur)?,
                Layer::Relu => relu(&cur),
                Layer::Standardize => standardize(&cur)?.0,
                Layer::AvgPool2 => avg_pool2(&cur)?,
                Layer::Upsample(f) => upsample_bilinear(&cur, *f)?,
            };
        }
        Ok(cur)
    }

    /// Back-propagate `grad_out` through the cached pass. Returns the input
    /// gradient and the parameter gradients in [`Parameterized`] order.
    pub fn backward(&self, trace: &Trace, grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let (dx, grads) = self.backward_impl(trace, grad_out, true)?;
        Ok((dx.expect("input gradient requested"), grads))
    }

    /// Parameter gradients only; skips the input-gradient work below the
    /// first convolution.
    pub fn backward_params(&self, trace: &Trace, grad_out: &Tensor) -> Result<Vec<Tensor>> {
        Ok(self.backward_impl(trace, grad_out, false)?.1)
    }

    fn backward_impl(
        &self,
        trace: &Trace,
        grad_out: &Tensor,
        want_dx: bool,
    ) -> Result<(Option<Tensor>, Vec<Tensor>)> {
        if trace.caches.len() != self.layers.len() {
            return Err(Error::ShapeMismatch(format!(
                "trace has {} entries for {} layers",
                trace.caches.len(),
                self.layers.len()
            )));
        }
        let first_conv = self.layers.iter().position(|l| matches!(l, Layer::Conv(_)));
        let mut grad = grad_out.clone();
        let mut param_grads: Vec<Tensor> = Vec::new();
        for (i, (layer, cache)) in self.layers.iter().zip(&trace.caches).enumerate().rev() {
            grad = match (layer, cache) {
                (Layer::Conv(conv), Cache::Conv { cols, dims }) => {
                    let need = want_dx || Some(i) != first_conv;
                    let (dx, dw, db) = conv.backward_cols(cols, *dims, &grad, need)?;
                    // reversed here, flipped back below
                    param_grads.extend(db);
                    param_grads.push(dw);
                    match dx {
                        Some(dx) => dx,
                        None => break,
                    }
                }
                (Layer::Relu, Cache::Input(x)) => relu_backward(x, &grad)?,
                (Layer::Standardize, Cache::Standardized { output, inv_std }) => {
                    standardize_backward(output, inv_std, &grad)?
                }
                (Layer::AvgPool2, Cache::None) => avg_pool2_backward(&grad)?,
                (Layer::Upsample(f), Cache::None) => upsample_bilinear_backward(&grad, *f)?,
                _ => return Err(Error::ShapeMismatch("trace does not match layers".into())),
            };
        }
        param_grads.reverse();
        Ok((want_dx.then_some(grad), param_grads))
    }
}

impl Parameterized for Sequential {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Layer::Conv(c) = layer {
                out.push((format!("{i}.weight"), &c.weight));
                if let Some(b) = &c.bias {
                    out.push((format!("{i}.bias"), b));
                }
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            if let Layer::Conv(c) = layer {
                out.push(&mut c.weight);
                out.extend(c.bias.as_mut());
            }
        }
        out
    }
}
