use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Arch, ModelSpec, ACTIONS};
use crate::error::{Error, Result};
use crate::nav::Cell;
use crate::tensor::layers::{backward_stack, forward_stack, ConvLayerCache};
use crate::tensor::{
    Conv2d, Dense, Grads, Layer, LayerCache, LayerSpec, MaxPool2d, ParamSet, ResidualBlock, Scalar,
    Tensor,
};
use crate::terrain::InputEncoding;

const TRUNK_CHANNELS: usize = 20;
const FC1_NODES: usize = 192;
const BRANCH_TWO_BLOCKS: usize = 5;
/// Weight standard deviation of the value-iteration convolutions.
const VIN_WEIGHT_STD: f64 = 0.01;

#[derive(Clone, Debug)]
enum Body {
    Branches {
        one: Option<Vec<Layer>>,
        two: Vec<Layer>,
    },
    Vin {
        reward: Conv2d,
        q: Conv2d,
    },
}

/// A policy network: `(input, positions) -> logits`, one row of
/// [`ACTIONS`] logits per queried grid cell.
///
/// The map-level trunk runs once per input; only the final position-indexed
/// head runs per cell, so any number of positions on the same map share it.
#[derive(Clone, Debug)]
pub struct Network<T> {
    spec: ModelSpec,
    params: ParamSet<T>,
    reprocess: Vec<Layer>,
    body: Body,
    head: Dense,
}

#[derive(Clone, Debug)]
enum BodyTrace<T> {
    Branches {
        one: Option<Vec<LayerCache<T>>>,
        two: Vec<LayerCache<T>>,
    },
    Vin {
        reward: ConvLayerCache<T>,
        steps: Vec<ConvLayerCache<T>>,
        /// Winning Q channel per cell for every iteration but the last.
        argmax: Vec<Vec<u16>>,
    },
}

/// Everything [`Network::backward`] needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    positions: Vec<Cell>,
    reprocess: Vec<LayerCache<T>>,
    body: BodyTrace<T>,
    /// Head inputs, `positions x fan_in`.
    head_input: Vec<T>,
}

/// Converts the three-channel encoding to a `3 x M x M` tensor.
pub fn input_tensor<T: Scalar>(input: &InputEncoding) -> Tensor<T> {
    let [c, h, w] = input.shape();
    Tensor::from_f32(&[c, h, w], input.data()).expect("encoding shape is consistent")
}

fn conv<T: Scalar>(
    params: &mut ParamSet<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
) -> Layer {
    Layer::Conv(Conv2d::new(params, name, cin, cout, k, 1, true, rng))
}

fn pool(name: &str, stride: usize) -> Layer {
    Layer::Pool(MaxPool2d::new(name, 3, stride))
}

/// Output shape of a layer stack under same padding; rejects a dense layer
/// whose fan-in does not match the flattened input.
fn infer_shape(layers: &[Layer], mut shape: Vec<usize>) -> Result<Vec<usize>> {
    for layer in layers {
        shape = match (layer, shape.as_slice()) {
            (Layer::Conv(c), &[ch, h, w]) => {
                if ch != c.in_channels {
                    return Err(Error::shape(
                        "build",
                        format!("{} expects {} channels, gets {ch}", c.name, c.in_channels),
                    ));
                }
                vec![c.out_channels, h.div_ceil(c.stride), w.div_ceil(c.stride)]
            }
            (Layer::Pool(p), &[ch, h, w]) => vec![ch, h.div_ceil(p.stride), w.div_ceil(p.stride)],
            (Layer::Residual(r), &[ch, h, w]) if ch == r.conv1.in_channels => vec![ch, h, w],
            (Layer::Dense(d), s) => {
                let n: usize = s.iter().product();
                if n != d.fan_in {
                    return Err(Error::shape(
                        "build",
                        format!("{} fan-in {} does not match flattened input {s:?}", d.name, d.fan_in),
                    ));
                }
                vec![d.nodes]
            }
            (l, s) => {
                return Err(Error::shape(
                    "build",
                    format!("{} cannot take input of shape {s:?}", l.name()),
                ))
            }
        };
    }
    Ok(shape)
}

impl<T: Scalar> Network<T> {
    /// Builds the architecture with seeded fan-in-uniform weights and zero
    /// biases.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let a = spec.feature_channels;
        let n = spec.grid_size();

        let reprocess = vec![
            conv(&mut params, &mut rng, "Conv-00", 3, 6, 5),
            pool("Pool-00", 2),
            conv(&mut params, &mut rng, "Conv-01", 6, a, 4),
            pool("Pool-01", 2),
        ];
        let feat_shape = infer_shape(&reprocess, vec![3, spec.input_size, spec.input_size])?;
        debug_assert_eq!(feat_shape, vec![a, n, n]);

        let (body, head) = match spec.arch {
            Arch::DbNet | Arch::B1Net | Arch::B2Net => {
                let one = if spec.arch == Arch::DbNet {
                    let mut layers = vec![conv(&mut params, &mut rng, "Conv-10", a, TRUNK_CHANNELS, 5), pool("Pool-10", 1)];
                    for (i, stride) in [(1, 2), (2, 2), (3, 1)] {
                        layers.push(Layer::Residual(ResidualBlock::new(
                            &mut params,
                            &format!("Res-1{i}"),
                            TRUNK_CHANNELS,
                            3,
                            &mut rng,
                        )));
                        layers.push(pool(&format!("Pool-1{i}"), stride));
                    }
                    let s = infer_shape(&layers, feat_shape.clone())?;
                    let fan_in = s.iter().product();
                    layers.push(Layer::Dense(Dense::new(&mut params, "Fc-1", fan_in, FC1_NODES, true, &mut rng)));
                    layers.push(Layer::Dense(Dense::new(
                        &mut params,
                        "Fc-2",
                        FC1_NODES,
                        spec.global_features,
                        true,
                        &mut rng,
                    )));
                    infer_shape(&layers, feat_shape.clone())?;
                    Some(layers)
                } else {
                    None
                };
                let mut two = vec![conv(&mut params, &mut rng, "Conv-20", a, TRUNK_CHANNELS, 5)];
                for i in 1..=BRANCH_TWO_BLOCKS {
                    two.push(if spec.arch == Arch::B2Net {
                        conv(&mut params, &mut rng, &format!("Plain-2{i}"), TRUNK_CHANNELS, TRUNK_CHANNELS, 3)
                    } else {
                        Layer::Residual(ResidualBlock::new(
                            &mut params,
                            &format!("Res-2{i}"),
                            TRUNK_CHANNELS,
                            3,
                            &mut rng,
                        ))
                    });
                }
                two.push(conv(&mut params, &mut rng, "Conv-21", TRUNK_CHANNELS, spec.local_features, 3));
                infer_shape(&two, feat_shape)?;
                let fan_in = spec.local_features + one.as_ref().map_or(0, |_| spec.global_features);
                let head = Dense::new(&mut params, "Fc-3", fan_in, ACTIONS, false, &mut rng);
                (Body::Branches { one, two }, head)
            }
            Arch::Vin => {
                let reward = Conv2d::new(&mut params, "Conv-r", a, 1, 1, 1, false, &mut rng);
                let q = Conv2d::new(&mut params, "Conv-q", 2, spec.vin_q_channels, 3, 1, false, &mut rng);
                for (name, fan_in) in [("Conv-r.weight", a), ("Conv-q.weight", 18)] {
                    let id = params.find(name).expect("vin conv weight");
                    let k = T::from_f64_lossy(VIN_WEIGHT_STD * (fan_in as f64).sqrt());
                    params.get_mut(id).data_mut().iter_mut().for_each(|w| *w = *w * k);
                }
                let head = Dense::new(&mut params, "Fc-q", spec.vin_q_channels, ACTIONS, false, &mut rng);
                (Body::Vin { reward, q }, head)
            }
        };
        Ok(Network {
            spec,
            params,
            reprocess,
            body,
            head,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Same architecture with parameters converted to another element type.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            params: self.params.cast(),
            reprocess: self.reprocess.clone(),
            body: self.body.clone(),
            head: self.head.clone(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Fan-in of the final logit layer.
    pub fn head_fan_in(&self) -> usize {
        self.head.fan_in
    }

    /// Number of identity shortcuts in the network.
    pub fn residual_blocks(&self) -> usize {
        self.layers()
            .iter()
            .filter(|l| matches!(l, LayerSpec::Residual { .. }))
            .count()
    }

    /// Every layer in build order.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut out: Vec<LayerSpec> = self.reprocess.iter().map(Layer::spec).collect();
        match &self.body {
            Body::Branches { one, two } => {
                if let Some(one) = one {
                    out.extend(one.iter().map(Layer::spec));
                }
                out.extend(two.iter().map(Layer::spec));
            }
            Body::Vin { reward, q } => {
                out.push(Layer::Conv(reward.clone()).spec());
                out.push(Layer::Conv(q.clone()).spec());
            }
        }
        out.push(Layer::Dense(self.head.clone()).spec());
        out
    }

    /// Fan-in of `Fc-1` (branch one's first dense layer), if present.
    pub fn fc1_fan_in(&self) -> Option<usize> {
        match &self.body {
            Body::Branches { one: Some(one), .. } => one.iter().find_map(|l| match l {
                Layer::Dense(d) if d.name == "Fc-1" => Some(d.fan_in),
                _ => None,
            }),
            _ => None,
        }
    }

    /// Zeroes every parameter of branch two (the only position-dependent
    /// path of the branch architectures).
    pub fn zero_branch_two(&mut self) {
        if let Body::Branches { two, .. } = &self.body {
            let names: Vec<String> = two.iter().map(|l| l.name().to_string()).collect();
            for p in self.params.iter_mut() {
                if names.iter().any(|n| p.name.starts_with(&format!("{n}."))) {
                    p.value.fill(T::zero());
                }
            }
        }
    }

    fn check_inputs(&self, input: &Tensor<T>, positions: &[Cell]) -> Result<()> {
        let m = self.spec.input_size;
        if input.shape() != [3, m, m] {
            return Err(Error::shape(
                "network_input",
                format!("expected [3, {m}, {m}], got {:?}", input.shape()),
            ));
        }
        let n = self.spec.grid_size();
        for &p in positions {
            if p.x < 0 || p.y < 0 || p.x as usize >= n || p.y as usize >= n {
                return Err(Error::OutOfGrid { cell: p, size: n });
            }
        }
        Ok(())
    }

    /// Logits (`positions x 8`) and the trace needed for [`Self::backward`].
    pub fn forward(&self, input: &Tensor<T>, positions: &[Cell]) -> Result<(Tensor<T>, ForwardTrace<T>)> {
        self.check_inputs(input, positions)?;
        let n = self.spec.grid_size();
        let plane = n * n;
        let (feat, reprocess) = forward_stack(&self.reprocess, &self.params, input.clone())?;
        let fan_in = self.head.fan_in;
        let mut head_input = Vec::with_capacity(positions.len() * fan_in);
        let body = match &self.body {
            Body::Branches { one, two } => {
                let (f1, c1) = match one {
                    Some(layers) => {
                        let (f1, c) = forward_stack(layers, &self.params, feat.clone())?;
                        (Some(f1), Some(c))
                    }
                    None => (None, None),
                };
                let (f2, c2) = forward_stack(two, &self.params, feat)?;
                let ch = f2.shape()[0];
                for p in positions {
                    if let Some(f1) = &f1 {
                        head_input.extend_from_slice(f1.data());
                    }
                    let at = p.y as usize * n + p.x as usize;
                    head_input.extend((0..ch).map(|c| f2.data()[c * plane + at]));
                }
                BodyTrace::Branches { one: c1, two: c2 }
            }
            Body::Vin { reward, q } => {
                let (r, rc) = reward.forward(&self.params, &feat)?;
                let qc = self.spec.vin_q_channels;
                let mut stacked = Tensor::zeros(&[2, n, n]);
                stacked.data_mut()[..plane].copy_from_slice(r.data());
                let mut steps = Vec::with_capacity(self.spec.vin_iterations);
                let mut argmax = Vec::with_capacity(self.spec.vin_iterations);
                let mut qmap = Tensor::zeros(&[qc, n, n]);
                for k in 0..self.spec.vin_iterations {
                    let (qk, cache) = q.forward(&self.params, &stacked)?;
                    steps.push(cache);
                    if k + 1 < self.spec.vin_iterations {
                        let (v, idx) = channel_max(&qk, qc, plane);
                        stacked.data_mut()[plane..].copy_from_slice(&v);
                        argmax.push(idx);
                    }
                    qmap = qk;
                }
                for p in positions {
                    let at = p.y as usize * n + p.x as usize;
                    head_input.extend((0..qc).map(|c| qmap.data()[c * plane + at]));
                }
                BodyTrace::Vin {
                    reward: rc,
                    steps,
                    argmax,
                }
            }
        };
        let logits = self.head_forward(&head_input, positions.len());
        Ok((
            logits,
            ForwardTrace {
                positions: positions.to_vec(),
                reprocess,
                body,
                head_input,
            },
        ))
    }

    /// Logits only.
    pub fn infer(&self, input: &Tensor<T>, positions: &[Cell]) -> Result<Tensor<T>> {
        Ok(self.forward(input, positions)?.0)
    }

    /// Logits for every grid cell in row-major order.
    pub fn infer_all_cells(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.spec.grid_size() as i32;
        let cells: Vec<Cell> = (0..n).flat_map(|y| (0..n).map(move |x| Cell::new(x, y))).collect();
        self.infer(input, &cells)
    }

    fn head_forward(&self, x: &[T], rows: usize) -> Tensor<T> {
        let fan_in = self.head.fan_in;
        let w = self.params.get(self.head.weight);
        let b = self.params.get(self.head.bias);
        let mut out = vec![T::zero(); rows * ACTIONS];
        T::gemm(rows, fan_in, ACTIONS, x, false, w.data(), true, &mut out, false);
        for row in out.chunks_mut(ACTIONS) {
            for (v, bias) in row.iter_mut().zip(b.data()) {
                *v += *bias;
            }
        }
        Tensor::from_vec(&[rows, ACTIONS], out).expect("head output shape")
    }

    /// Accumulates parameter gradients of `sum(dlogits * logits)` into
    /// `grads` and returns the gradient with respect to the input.
    pub fn backward(&self, trace: &ForwardTrace<T>, dlogits: &Tensor<T>, grads: &mut Grads<T>) -> Result<Tensor<T>> {
        let rows = trace.positions.len();
        if dlogits.shape() != [rows, ACTIONS] {
            return Err(Error::shape(
                "network_backward",
                format!("dlogits {:?} for {rows} positions", dlogits.shape()),
            ));
        }
        let fan_in = self.head.fan_in;
        let g = dlogits.data();
        T::gemm(ACTIONS, rows, fan_in, g, true, &trace.head_input, false, grads.get_mut(self.head.weight), true);
        let db = grads.get_mut(self.head.bias);
        for row in g.chunks(ACTIONS) {
            for (d, v) in db.iter_mut().zip(row) {
                *d += *v;
            }
        }
        let mut dx = vec![T::zero(); rows * fan_in];
        T::gemm(rows, ACTIONS, fan_in, g, false, self.params.get(self.head.weight).data(), false, &mut dx, false);

        let n = self.spec.grid_size();
        let plane = n * n;
        let dfeat = match (&self.body, &trace.body) {
            (Body::Branches { one, two }, BodyTrace::Branches { one: c1, two: c2 }) => {
                let global = if one.is_some() { self.spec.global_features } else { 0 };
                let local = fan_in - global;
                let mut df1 = vec![T::zero(); global];
                let mut df2 = Tensor::zeros(&[local, n, n]);
                for (p, row) in trace.positions.iter().zip(dx.chunks(fan_in)) {
                    for (a, b) in df1.iter_mut().zip(&row[..global]) {
                        *a += *b;
                    }
                    let at = p.y as usize * n + p.x as usize;
                    for (c, v) in row[global..].iter().enumerate() {
                        df2.data_mut()[c * plane + at] += *v;
                    }
                }
                let mut dfeat = backward_stack(two, &self.params, c2, df2, grads);
                if let (Some(one), Some(c1)) = (one, c1) {
                    let df1 = Tensor::from_vec(&[global], df1)?;
                    dfeat.add_assign(&backward_stack(one, &self.params, c1, df1, grads));
                }
                dfeat
            }
            (Body::Vin { reward, q }, BodyTrace::Vin { reward: rc, steps, argmax }) => {
                let qc = self.spec.vin_q_channels;
                let mut dq = Tensor::zeros(&[qc, n, n]);
                for (p, row) in trace.positions.iter().zip(dx.chunks(fan_in)) {
                    let at = p.y as usize * n + p.x as usize;
                    for (c, v) in row.iter().enumerate() {
                        dq.data_mut()[c * plane + at] += *v;
                    }
                }
                let mut dr = Tensor::zeros(&[1, n, n]);
                for k in (0..steps.len()).rev() {
                    let din = q.backward(&self.params, &steps[k], dq, grads);
                    for (a, b) in dr.data_mut().iter_mut().zip(&din.data()[..plane]) {
                        *a += *b;
                    }
                    dq = Tensor::zeros(&[qc, n, n]);
                    if k > 0 {
                        let winners = &argmax[k - 1];
                        for (at, (&c, &v)) in winners.iter().zip(&din.data()[plane..]).enumerate() {
                            dq.data_mut()[c as usize * plane + at] = v;
                        }
                    }
                }
                reward.backward(&self.params, rc, dr, grads)
            }
            _ => unreachable!("trace produced by a different architecture"),
        };
        Ok(backward_stack(&self.reprocess, &self.params, &trace.reprocess, dfeat, grads))
    }

    /// Value-iteration block alone: returns the final `Q` and `V` maps for
    /// a given reward map (vin only).
    pub fn vin_block(&self, reward_map: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let Body::Vin { q, .. } = &self.body else {
            return Err(Error::InvalidParams(format!("{} has no value-iteration block", self.spec.arch)));
        };
        let n = self.spec.grid_size();
        let plane = n * n;
        if reward_map.shape() != [1, n, n] {
            return Err(Error::shape("vin_block", format!("reward map {:?}", reward_map.shape())));
        }
        let qc = self.spec.vin_q_channels;
        let mut stacked = Tensor::zeros(&[2, n, n]);
        stacked.data_mut()[..plane].copy_from_slice(reward_map.data());
        let mut qk = Tensor::zeros(&[qc, n, n]);
        let mut v = vec![T::zero(); plane];
        for _ in 0..self.spec.vin_iterations {
            qk = q.forward(&self.params, &stacked)?.0;
            v = channel_max(&qk, qc, plane).0;
            stacked.data_mut()[plane..].copy_from_slice(&v);
        }
        Ok((qk, Tensor::from_vec(&[1, n, n], v)?))
    }
}

/// Per-pixel maximum over channels; ties go to the lowest channel.
fn channel_max<T: Scalar>(q: &Tensor<T>, channels: usize, plane: usize) -> (Vec<T>, Vec<u16>) {
    let d = q.data();
    let mut v = d[..plane].to_vec();
    let mut idx = vec![0u16; plane];
    for c in 1..channels {
        for (at, (best, win)) in v.iter_mut().zip(idx.iter_mut()).enumerate() {
            let x = d[c * plane + at];
            if x > *best {
                *best = x;
                *win = c as u16;
            }
        }
    }
    (v, idx)
}
