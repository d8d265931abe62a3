//! Parameterized layers. Layers hold [`ParamId`]s only; values live in a
//! [`ParamSet`] and gradients are written into a [`Grads`] buffer, so a
//! forward pass never mutates the model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops::{self, ConvCache, Padding, PoolCache};
use super::{Grads, ParamId, ParamSet, Scalar, Tensor};
use crate::error::{Error, Result};

/// Serializable description of one layer, mirroring a row of a layer table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv {
        name: String,
        kernels: usize,
        size: usize,
        stride: usize,
        relu: bool,
    },
    Pool {
        name: String,
        size: usize,
        stride: usize,
    },
    Residual {
        name: String,
        kernels: usize,
        size: usize,
    },
    Fc {
        name: String,
        nodes: usize,
        relu: bool,
    },
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
    pub relu: bool,
}

#[derive(Clone, Debug)]
pub struct ConvLayerCache<T> {
    conv: ConvCache<T>,
    out: Option<Vec<T>>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        relu: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = params.add_fan_in_uniform(
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            fan_in,
            rng,
        );
        let bias = params.add_zeros(format!("{name}.bias"), &[out_channels]);
        Conv2d {
            name: name.to_string(),
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: Padding::Same,
            relu,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, ConvLayerCache<T>)> {
        let (mut y, conv) = ops::conv2d_forward(
            x,
            params.get(self.weight),
            params.get(self.bias),
            self.stride,
            self.padding,
        )?;
        let out = if self.relu {
            ops::relu_inplace(y.data_mut());
            Some(y.data().to_vec())
        } else {
            None
        };
        Ok((y, ConvLayerCache { conv, out }))
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        cache: &ConvLayerCache<T>,
        mut dy: Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Tensor<T> {
        if let Some(out) = &cache.out {
            ops::relu_backward_inplace(out, dy.data_mut());
        }
        let mut dw = std::mem::take(&mut grads.0[self.weight.0]);
        let dx = ops::conv2d_backward(
            &cache.conv,
            params.get(self.weight),
            &dy,
            &mut dw,
            grads.get_mut(self.bias),
        );
        grads.0[self.weight.0] = dw;
        dx
    }
}

#[derive(Clone, Debug)]
pub struct MaxPool2d {
    pub name: String,
    pub kernel: usize,
    pub stride: usize,
}

impl MaxPool2d {
    pub fn new(name: &str, kernel: usize, stride: usize) -> Self {
        MaxPool2d {
            name: name.to_string(),
            kernel,
            stride,
        }
    }
}

/// `relu(x + conv2(relu(conv1(x))))` with stride-1 same-padded convolutions.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub name: String,
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

#[derive(Clone, Debug)]
pub struct ResidualCache<T> {
    c1: ConvLayerCache<T>,
    c2: ConvLayerCache<T>,
    out: Vec<T>,
}

impl ResidualBlock {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        channels: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        ResidualBlock {
            name: name.to_string(),
            conv1: Conv2d::new(params, &format!("{name}.a"), channels, channels, kernel, 1, true, rng),
            conv2: Conv2d::new(params, &format!("{name}.b"), channels, channels, kernel, 1, false, rng),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, ResidualCache<T>)> {
        let (c, _, _) = ops::chw("residual_block", x)?;
        if c != self.conv1.in_channels {
            return Err(Error::shape(
                "residual_block",
                format!("input channels {c} != block channels {}", self.conv1.in_channels),
            ));
        }
        let (h, c1) = self.conv1.forward(params, x)?;
        let (mut y, c2) = self.conv2.forward(params, &h)?;
        y.add_assign(x);
        ops::relu_inplace(y.data_mut());
        let out = y.data().to_vec();
        Ok((y, ResidualCache { c1, c2, out }))
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        cache: &ResidualCache<T>,
        mut dy: Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Tensor<T> {
        ops::relu_backward_inplace(&cache.out, dy.data_mut());
        let dh = self.conv2.backward(params, &cache.c2, dy.clone(), grads);
        let mut dx = self.conv1.backward(params, &cache.c1, dh, grads);
        dx.add_assign(&dy);
        dx
    }
}

/// Fully-connected layer over the flattened input.
#[derive(Clone, Debug)]
pub struct Dense {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub nodes: usize,
    pub relu: bool,
}

#[derive(Clone, Debug)]
pub struct DenseCache<T> {
    input: Vec<T>,
    in_shape: Vec<usize>,
    out: Option<Vec<T>>,
}

impl Dense {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        fan_in: usize,
        nodes: usize,
        relu: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight =
            params.add_fan_in_uniform(format!("{name}.weight"), &[nodes, fan_in], fan_in, rng);
        let bias = params.add_zeros(format!("{name}.bias"), &[nodes]);
        Dense {
            name: name.to_string(),
            weight,
            bias,
            fan_in,
            nodes,
            relu,
        }
    }

    pub fn forward_vec<T: Scalar>(&self, params: &ParamSet<T>, x: &[T]) -> Result<Vec<T>> {
        let mut y = ops::dense_forward(x, params.get(self.weight), params.get(self.bias))?;
        if self.relu {
            ops::relu_inplace(&mut y);
        }
        Ok(y)
    }

    pub fn forward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, DenseCache<T>)> {
        let y = self.forward_vec(params, x.data())?;
        let out = self.relu.then(|| y.clone());
        Ok((
            Tensor::from_vec(&[self.nodes], y)?,
            DenseCache {
                input: x.data().to_vec(),
                in_shape: x.shape().to_vec(),
                out,
            },
        ))
    }

    /// Backward for a single input vector; returns `dx` flat.
    pub fn backward_vec<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        x: &[T],
        out: Option<&[T]>,
        dy: &[T],
        grads: &mut Grads<T>,
    ) -> Vec<T> {
        let mut dy = dy.to_vec();
        if let Some(out) = out {
            ops::relu_backward_inplace(out, &mut dy);
        }
        let mut dw = std::mem::take(&mut grads.0[self.weight.0]);
        let dx = ops::dense_backward(x, params.get(self.weight), &dy, &mut dw, grads.get_mut(self.bias));
        grads.0[self.weight.0] = dw;
        dx
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        cache: &DenseCache<T>,
        dy: Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Tensor<T> {
        let dx = self.backward_vec(params, &cache.input, cache.out.as_deref(), dy.data(), grads);
        Tensor::from_vec(&cache.in_shape, dx).expect("input shape preserved")
    }
}

#[derive(Clone, Debug)]
pub enum Layer {
    Conv(Conv2d),
    Pool(MaxPool2d),
    Residual(ResidualBlock),
    Dense(Dense),
}

#[derive(Clone, Debug)]
pub enum LayerCache<T> {
    Conv(ConvLayerCache<T>),
    Pool(PoolCache),
    Residual(ResidualCache<T>),
    Dense(DenseCache<T>),
}

impl Layer {
    pub fn name(&self) -> &str {
        match self {
            Layer::Conv(l) => &l.name,
            Layer::Pool(l) => &l.name,
            Layer::Residual(l) => &l.name,
            Layer::Dense(l) => &l.name,
        }
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv(c) => LayerSpec::Conv {
                name: c.name.clone(),
                kernels: c.out_channels,
                size: c.kernel,
                stride: c.stride,
                relu: c.relu,
            },
            Layer::Pool(p) => LayerSpec::Pool {
                name: p.name.clone(),
                size: p.kernel,
                stride: p.stride,
            },
            Layer::Residual(r) => LayerSpec::Residual {
                name: r.name.clone(),
                kernels: r.conv1.out_channels,
                size: r.conv1.kernel,
            },
            Layer::Dense(d) => LayerSpec::Fc {
                name: d.name.clone(),
                nodes: d.nodes,
                relu: d.relu,
            },
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, LayerCache<T>)> {
        Ok(match self {
            Layer::Conv(l) => {
                let (y, c) = l.forward(params, x)?;
                (y, LayerCache::Conv(c))
            }
            Layer::Pool(l) => {
                let (y, c) = ops::maxpool2d_forward(x, l.kernel, l.stride, Padding::Same)?;
                (y, LayerCache::Pool(c))
            }
            Layer::Residual(l) => {
                let (y, c) = l.forward(params, x)?;
                (y, LayerCache::Residual(c))
            }
            Layer::Dense(l) => {
                let (y, c) = l.forward(params, x)?;
                (y, LayerCache::Dense(c))
            }
        })
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        cache: &LayerCache<T>,
        dy: Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Tensor<T> {
        match (self, cache) {
            (Layer::Conv(l), LayerCache::Conv(c)) => l.backward(params, c, dy, grads),
            (Layer::Pool(_), LayerCache::Pool(c)) => ops::maxpool2d_backward(c, &dy),
            (Layer::Residual(l), LayerCache::Residual(c)) => l.backward(params, c, dy, grads),
            (Layer::Dense(l), LayerCache::Dense(c)) => l.backward(params, c, dy, grads),
            _ => panic!("cache kind does not match layer {}", self.name()),
        }
    }
}

/// Runs layers in order, keeping every cache.
pub fn forward_stack<T: Scalar>(
    layers: &[Layer],
    params: &ParamSet<T>,
    x: Tensor<T>,
) -> Result<(Tensor<T>, Vec<LayerCache<T>>)> {
    let mut caches = Vec::with_capacity(layers.len());
    let mut h = x;
    for layer in layers {
        let (y, c) = layer.forward(params, &h)?;
        caches.push(c);
        h = y;
    }
    Ok((h, caches))
}

/// Forward without keeping caches.
pub fn infer_stack<T: Scalar>(layers: &[Layer], params: &ParamSet<T>, x: Tensor<T>) -> Result<Tensor<T>> {
    let mut h = x;
    for layer in layers {
        h = layer.forward(params, &h)?.0;
    }
    Ok(h)
}

pub fn backward_stack<T: Scalar>(
    layers: &[Layer],
    params: &ParamSet<T>,
    caches: &[LayerCache<T>],
    dy: Tensor<T>,
    grads: &mut Grads<T>,
) -> Tensor<T> {
    let mut g = dy;
    for (layer, cache) in layers.iter().zip(caches).rev() {
        g = layer.backward(params, cache, g, grads);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_residual_is_identity_on_nonnegative_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ParamSet::<f64>::new();
        let block = ResidualBlock::new(&mut params, "res", 4, 3, &mut rng);
        params.iter_mut().for_each(|p| p.value.fill(0.0));
        let x = Tensor::from_vec(&[4, 5, 5], (0..100).map(|v| v as f64 * 0.01).collect()).unwrap();
        let (y, _) = block.forward(&params, &x).unwrap();
        assert_eq!(y, x);

        let neg = x.map(|v| v - 0.5);
        let (y, _) = block.forward(&params, &neg).unwrap();
        assert_eq!(y, neg.map(|v| v.max(0.0)));
    }

    #[test]
    fn residual_preserves_shape_and_rejects_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = ParamSet::<f32>::new();
        let block = ResidualBlock::new(&mut params, "res", 20, 3, &mut rng);
        let x = Tensor::zeros(&[20, 32, 32]);
        let (y, _) = block.forward(&params, &x).unwrap();
        assert_eq!(y.shape(), &[20, 32, 32]);
        assert!(block.forward(&params, &Tensor::zeros(&[10, 32, 32])).is_err());
    }
}
