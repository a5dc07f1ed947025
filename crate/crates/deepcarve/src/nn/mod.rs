//! Layers with explicit forward/backward passes, network assembly, and
//! feature-map taps on the convolutional blocks.
//!
//! A `Network` is an ordered stack of `LayerSpec`s with parameter tensors.
//! Every conv layer gets a tap: the post-activation output of the conv block
//! (after the ReLU that follows it, before any pooling), which is what the
//! carving pass reads. Backward passes are hand-written per layer; there is
//! no graph autodiff.

mod kernels;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hash::Fnv1a;
use crate::rng::Rng;
use crate::tensor::Tensor;
use kernels::{conv_out_dim, ConvGeom, ConvScratch};

const NET_MAGIC: &[u8; 6] = b"CVNET1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
    FullyConnected {
        in_dim: usize,
        out_dim: usize,
    },
    Dropout {
        keep_prob: f64,
    },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::FullyConnected { .. } => "fc",
            LayerSpec::Dropout { .. } => "dropout",
        }
    }

    fn validate(&self, index: usize) -> Result<()> {
        let bad = |message: String| Error::InvalidLayer {
            index,
            kind: self.kind().to_string(),
            message,
        };
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => {
                if in_channels == 0 || out_channels == 0 || kernel == 0 {
                    return Err(bad("channel and kernel dims must be positive".into()));
                }
                if stride == 0 {
                    return Err(bad("stride must be >= 1".into()));
                }
            }
            LayerSpec::MaxPool { window, stride } => {
                if window == 0 || stride == 0 {
                    return Err(bad("window and stride must be >= 1".into()));
                }
            }
            LayerSpec::FullyConnected { in_dim, out_dim } => {
                if in_dim == 0 || out_dim == 0 {
                    return Err(bad("dims must be positive".into()));
                }
            }
            LayerSpec::Dropout { keep_prob } => {
                if !(keep_prob > 0.0 && keep_prob <= 1.0) {
                    return Err(bad(format!("keep probability {keep_prob} not in (0, 1]")));
                }
            }
            LayerSpec::Relu => {}
        }
        Ok(())
    }
}

/// Shape of the value flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dims {
    Spatial { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl Dims {
    fn describe(self) -> String {
        match self {
            Dims::Spatial { c, h, w } => format!("{c}x{h}x{w}"),
            Dims::Flat(d) => format!("flat {d}"),
        }
    }

    fn flatten(self) -> usize {
        match self {
            Dims::Spatial { c, h, w } => c * h * w,
            Dims::Flat(d) => d,
        }
    }
}

/// Parameter tensors of one layer (empty for relu/pool/dropout).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct Network {
    specs: Vec<LayerSpec>,
    params: Vec<Option<LayerParams>>,
    input_shape: [usize; 3],
    conv_taps: Vec<usize>,
    num_classes: usize,
    mode: Mode,
    /// Bumped on every parameter update so stale traces are detectable.
    version: u64,
}

/// Per-layer cached state from a forward pass, consumed by `backward` and by
/// the feature-response extraction.
pub struct ForwardTrace {
    /// inputs[i] is the input tensor of layer i.
    inputs: Vec<Tensor>,
    aux: Vec<Aux>,
    /// Post-activation conv feature maps, one per conv tap, each [B,C,H,W].
    taps: Vec<Tensor>,
    batch: usize,
    version: u64,
}

enum Aux {
    None,
    PoolArgmax(Vec<usize>),
    /// Per-element multipliers: 0 or 1/keep_prob.
    DropoutMask(Vec<f64>),
}

/// Per-parameter gradients aligned with the network's layer list.
pub struct Gradients {
    pub layers: Vec<Option<LayerParams>>,
}

impl Gradients {
    pub fn is_finite(&self) -> bool {
        self.layers.iter().flatten().all(|g| {
            g.weight.is_finite() && g.bias.is_finite()
        })
    }
}

/// Spatial mean responses per tap: `means[image][channel]`.
pub struct TapResponses {
    pub layer: usize,
    pub means: Vec<Vec<f64>>,
}

impl Network {
    /// Assembles and initializes a network. `input_shape` is (C, H, W);
    /// purely fully-connected stacks use (D, 1, 1).
    pub fn build(specs: Vec<LayerSpec>, input_shape: [usize; 3], rng: &mut Rng) -> Result<Network> {
        if specs.is_empty() {
            return Err(Error::InvalidInput("a network needs at least one layer".into()));
        }
        if input_shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidInput(format!(
                "input shape {input_shape:?} has a zero dimension"
            )));
        }
        let mut dims = Dims::Spatial {
            c: input_shape[0],
            h: input_shape[1],
            w: input_shape[2],
        };
        let mut params: Vec<Option<LayerParams>> = Vec::with_capacity(specs.len());
        let mut conv_taps = Vec::new();

        for (i, spec) in specs.iter().enumerate() {
            spec.validate(i)?;
            let chain_err = |message: String| {
                let (first, first_kind) = if i == 0 {
                    (0, "input".to_string())
                } else {
                    (i - 1, specs[i - 1].kind().to_string())
                };
                Error::ShapeChain {
                    first,
                    first_kind,
                    second: i,
                    second_kind: spec.kind().to_string(),
                    message,
                }
            };
            dims = match *spec {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let (c, h, w) = match dims {
                        Dims::Spatial { c, h, w } => (c, h, w),
                        Dims::Flat(_) => {
                            return Err(chain_err(format!(
                                "conv needs a spatial input, got {}",
                                dims.describe()
                            )))
                        }
                    };
                    if c != in_channels {
                        return Err(chain_err(format!(
                            "conv expects {in_channels} input channels, got {c}"
                        )));
                    }
                    let oh = conv_out_dim(h, kernel, stride, padding);
                    let ow = conv_out_dim(w, kernel, stride, padding);
                    let (oh, ow) = match (oh, ow) {
                        (Some(a), Some(b)) => (a, b),
                        _ => {
                            return Err(chain_err(format!(
                                "kernel {kernel} does not fit a {h}x{w} input with padding {padding}"
                            )))
                        }
                    };
                    let std = (2.0 / (in_channels * kernel * kernel) as f64).sqrt();
                    params.push(Some(LayerParams {
                        weight: Tensor::randn(
                            &[out_channels, in_channels, kernel, kernel],
                            std,
                            rng,
                        )?,
                        bias: Tensor::zeros(&[out_channels])?,
                    }));
                    conv_taps.push(i);
                    Dims::Spatial {
                        c: out_channels,
                        h: oh,
                        w: ow,
                    }
                }
                LayerSpec::MaxPool { window, stride } => {
                    let (c, h, w) = match dims {
                        Dims::Spatial { c, h, w } => (c, h, w),
                        Dims::Flat(_) => {
                            return Err(chain_err(format!(
                                "maxpool needs a spatial input, got {}",
                                dims.describe()
                            )))
                        }
                    };
                    if h < window || w < window {
                        return Err(chain_err(format!(
                            "pool window {window} does not fit a {h}x{w} input"
                        )));
                    }
                    params.push(None);
                    Dims::Spatial {
                        c,
                        h: (h - window) / stride + 1,
                        w: (w - window) / stride + 1,
                    }
                }
                LayerSpec::FullyConnected { in_dim, out_dim } => {
                    let flat = dims.flatten();
                    if flat != in_dim {
                        return Err(chain_err(format!(
                            "fc expects {in_dim} inputs, got {} ({})",
                            flat,
                            dims.describe()
                        )));
                    }
                    let std = (2.0 / in_dim as f64).sqrt();
                    params.push(Some(LayerParams {
                        weight: Tensor::randn(&[out_dim, in_dim], std, rng)?,
                        bias: Tensor::zeros(&[out_dim])?,
                    }));
                    Dims::Flat(out_dim)
                }
                LayerSpec::Relu | LayerSpec::Dropout { .. } => {
                    params.push(None);
                    dims
                }
            };
        }

        let num_classes = match dims {
            Dims::Flat(d) => d,
            Dims::Spatial { .. } => {
                return Err(Error::InvalidInput(format!(
                    "network must end in a fully-connected output, final shape is {}",
                    dims.describe()
                )))
            }
        };

        Ok(Network {
            specs,
            params,
            input_shape,
            conv_taps,
            num_classes,
            mode: Mode::Inference,
            version: 0,
        })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    /// Ordered layer indices of the conv taps.
    pub fn conv_taps(&self) -> &[usize] {
        &self.conv_taps
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn params(&self) -> &[Option<LayerParams>] {
        &self.params
    }

    /// Mutable parameter access for the optimizer; invalidates live traces.
    pub(crate) fn params_mut(&mut self) -> &mut [Option<LayerParams>] {
        self.version += 1;
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params
            .iter()
            .flatten()
            .map(|p| p.weight.len() + p.bias.len())
            .sum()
    }

    fn conv_geom(&self, layer: usize, input_shape: &[usize]) -> ConvGeom {
        let LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } = self.specs[layer]
        else {
            unreachable!("conv_geom on non-conv layer");
        };
        let (h, w) = (input_shape[2], input_shape[3]);
        ConvGeom {
            in_ch: in_channels,
            out_ch: out_channels,
            kernel,
            stride,
            pad: padding,
            h,
            w,
            oh: conv_out_dim(h, kernel, stride, padding).expect("validated at build"),
            ow: conv_out_dim(w, kernel, stride, padding).expect("validated at build"),
        }
    }

    /// Runs the stack on a [B, C, H, W] batch. In train mode, dropout masks
    /// are drawn from `rng` in row-major order (so the stream is independent
    /// of thread count); inference mode consumes no randomness.
    pub fn forward(&self, batch: &Tensor, rng: &mut Rng) -> Result<(Tensor, ForwardTrace)> {
        if batch.rank() != 4
            || batch.shape()[1] != self.input_shape[0]
            || batch.shape()[2] != self.input_shape[1]
            || batch.shape()[3] != self.input_shape[2]
        {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: batch.shape().to_vec(),
                rhs: vec![
                    0,
                    self.input_shape[0],
                    self.input_shape[1],
                    self.input_shape[2],
                ],
            });
        }
        let b = batch.shape()[0];
        let mut inputs: Vec<Tensor> = Vec::with_capacity(self.specs.len());
        let mut aux: Vec<Aux> = Vec::with_capacity(self.specs.len());
        let mut taps: Vec<Tensor> = Vec::with_capacity(self.conv_taps.len());
        let mut current = batch.clone();

        for (i, spec) in self.specs.iter().enumerate() {
            inputs.push(current.clone());
            let (out, a) = match *spec {
                LayerSpec::Conv { .. } => (self.conv_forward(i, &current)?, Aux::None),
                LayerSpec::Relu => (current.map(|x| x.max(0.0)), Aux::None),
                LayerSpec::MaxPool { window, stride } => {
                    let (out, argmax) = pool_forward(&current, window, stride)?;
                    (out, Aux::PoolArgmax(argmax))
                }
                LayerSpec::FullyConnected { .. } => (self.fc_forward(i, &current)?, Aux::None),
                LayerSpec::Dropout { keep_prob } => {
                    if self.mode == Mode::Train {
                        let mask: Vec<f64> = (0..current.len())
                            .map(|_| {
                                if rng.bernoulli(keep_prob) {
                                    1.0 / keep_prob
                                } else {
                                    0.0
                                }
                            })
                            .collect();
                        let mut out = current.clone();
                        for (v, &m) in out.data_mut().iter_mut().zip(mask.iter()) {
                            *v *= m;
                        }
                        (out, Aux::DropoutMask(mask))
                    } else {
                        (current.clone(), Aux::None)
                    }
                }
            };
            aux.push(a);
            // the tap is the conv block's post-activation output
            let is_tapped_relu =
                matches!(spec, LayerSpec::Relu) && i > 0 && matches!(self.specs[i - 1], LayerSpec::Conv { .. });
            let is_bare_conv = matches!(spec, LayerSpec::Conv { .. })
                && !matches!(self.specs.get(i + 1), Some(LayerSpec::Relu));
            if is_tapped_relu || is_bare_conv {
                taps.push(out.clone());
            }
            current = out;
        }

        let logits = current.reshape(&[b, self.num_classes])?;
        logits.debug_check_finite("forward");
        Ok((
            logits,
            ForwardTrace {
                inputs,
                aux,
                taps,
                batch: b,
                version: self.version,
            },
        ))
    }

    fn conv_forward(&self, layer: usize, input: &Tensor) -> Result<Tensor> {
        let g = self.conv_geom(layer, input.shape());
        let p = self.params[layer].as_ref().expect("conv has params");
        let b = input.shape()[0];
        let in_len = g.in_ch * g.h * g.w;
        let out_len = g.out_ch * g.oh * g.ow;
        let mut out = Tensor::zeros(&[b, g.out_ch, g.oh, g.ow])?;
        out.data_mut()
            .par_chunks_mut(out_len)
            .zip(input.data().par_chunks(in_len))
            .for_each(|(out_img, img)| {
                let mut col = vec![0.0; g.in_ch * g.kernel * g.kernel * g.oh * g.ow];
                kernels::conv_forward_image(img, p.weight.data(), p.bias.data(), &g, &mut col, out_img);
            });
        out.debug_check_finite("conv_forward");
        Ok(out)
    }

    fn fc_forward(&self, layer: usize, input: &Tensor) -> Result<Tensor> {
        let LayerSpec::FullyConnected { in_dim, out_dim } = self.specs[layer] else {
            unreachable!();
        };
        let b = input.shape()[0];
        let flat: usize = input.shape()[1..].iter().product();
        if flat != in_dim {
            return Err(Error::ShapeMismatch {
                op: "fc_forward",
                lhs: input.shape().to_vec(),
                rhs: vec![b, in_dim],
            });
        }
        let p = self.params[layer].as_ref().expect("fc has params");
        let x = input.reshape(&[b, in_dim])?;
        let wt = p.weight.transpose()?;
        let mut y = x.matmul(&wt)?;
        for row in y.data_mut().chunks_mut(out_dim) {
            for (v, &bias) in row.iter_mut().zip(p.bias.data()) {
                *v += bias;
            }
        }
        Ok(y)
    }

    /// Backpropagates `d_logits` through the trace, returning per-parameter
    /// gradients and the gradient with respect to the input batch.
    pub fn backward(&self, trace: &ForwardTrace, d_logits: &Tensor) -> Result<(Gradients, Tensor)> {
        if trace.version != self.version {
            return Err(Error::InvalidInput(
                "stale trace: network parameters changed since this forward pass".into(),
            ));
        }
        if d_logits.shape() != [trace.batch, self.num_classes] {
            return Err(Error::ShapeMismatch {
                op: "backward",
                lhs: d_logits.shape().to_vec(),
                rhs: vec![trace.batch, self.num_classes],
            });
        }
        let mut grads: Vec<Option<LayerParams>> = vec![None; self.specs.len()];
        let mut upstream = d_logits.clone();

        for i in (0..self.specs.len()).rev() {
            let input = &trace.inputs[i];
            upstream = match self.specs[i] {
                LayerSpec::Conv { .. } => {
                    let (dw, db, dx) = self.conv_backward(i, input, &upstream)?;
                    grads[i] = Some(LayerParams { weight: dw, bias: db });
                    dx
                }
                LayerSpec::Relu => {
                    let mut dx = upstream.reshape(input.shape())?;
                    for (d, &x) in dx.data_mut().iter_mut().zip(input.data()) {
                        if x <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    dx
                }
                LayerSpec::MaxPool { .. } => {
                    let Aux::PoolArgmax(argmax) = &trace.aux[i] else {
                        unreachable!("pool layer without argmax trace");
                    };
                    pool_backward(input.shape(), &upstream, argmax)?
                }
                LayerSpec::FullyConnected { .. } => {
                    let (dw, db, dx) = self.fc_backward(i, input, &upstream)?;
                    grads[i] = Some(LayerParams { weight: dw, bias: db });
                    dx
                }
                LayerSpec::Dropout { .. } => match &trace.aux[i] {
                    Aux::DropoutMask(mask) => {
                        let mut dx = upstream.clone();
                        for (d, &m) in dx.data_mut().iter_mut().zip(mask.iter()) {
                            *d *= m;
                        }
                        dx
                    }
                    _ => upstream, // inference-mode dropout is the identity
                },
            };
        }

        Ok((Gradients { layers: grads }, upstream))
    }

    fn conv_backward(
        &self,
        layer: usize,
        input: &Tensor,
        d_out: &Tensor,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let g = self.conv_geom(layer, input.shape());
        let p = self.params[layer].as_ref().expect("conv has params");
        let b = input.shape()[0];
        let in_len = g.in_ch * g.h * g.w;
        let out_len = g.out_ch * g.oh * g.ow;
        let kk = g.in_ch * g.kernel * g.kernel;
        let weight_t = p.weight.reshape(&[g.out_ch, kk])?.transpose()?;

        let mut dx = Tensor::zeros(input.shape())?;
        // per-image partials, then an ordered fold, so the reduction is
        // identical for every thread count
        let partials: Vec<(Vec<f64>, Vec<f64>)> = dx
            .data_mut()
            .par_chunks_mut(in_len)
            .zip(input.data().par_chunks(in_len))
            .zip(d_out.data().par_chunks(out_len))
            .map(|((dimg, img), dout)| {
                let mut scratch = ConvScratch::new(&g);
                kernels::conv_backward_image(img, weight_t.data(), dout, &g, &mut scratch, dimg)
            })
            .collect();

        let mut dw = vec![0.0; g.out_ch * kk];
        let mut db = vec![0.0; g.out_ch];
        for (pw, pb) in &partials {
            for (a, &v) in dw.iter_mut().zip(pw) {
                *a += v;
            }
            for (a, &v) in db.iter_mut().zip(pb) {
                *a += v;
            }
        }
        let _ = b;
        Ok((
            Tensor::from_vec(p.weight.shape(), dw)?,
            Tensor::from_vec(&[g.out_ch], db)?,
            dx,
        ))
    }

    fn fc_backward(
        &self,
        layer: usize,
        input: &Tensor,
        d_out: &Tensor,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let LayerSpec::FullyConnected { in_dim, out_dim } = self.specs[layer] else {
            unreachable!();
        };
        let p = self.params[layer].as_ref().expect("fc has params");
        let b = input.shape()[0];
        let x = input.reshape(&[b, in_dim])?;
        let dy = d_out.reshape(&[b, out_dim])?;

        let dw = dy.transpose()?.matmul(&x)?;
        let db = dy.reduce_sum(0)?;
        let dx = dy.matmul(&p.weight)?.reshape(input.shape())?;
        Ok((dw, db, dx))
    }

    /// Architecture fingerprint: layer specs plus input shape.
    pub fn arch_hash(&self) -> u64 {
        let mut h = Fnv1a::new();
        for &d in &self.input_shape {
            h.write_u64(d as u64);
        }
        for spec in &self.specs {
            hash_spec(&mut h, spec);
        }
        h.finish()
    }

    /// Writes the "CVNET1" checkpoint block: header, spec hash, layer specs,
    /// input shape, then one weight/bias tensor blob pair per parameterized
    /// layer.
    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        let io = |e| Error::io("writing network checkpoint", e);
        w.write_all(NET_MAGIC).map_err(io)?;
        w.write_all(&self.arch_hash().to_le_bytes()).map_err(io)?;
        w.write_all(&(self.specs.len() as u32).to_le_bytes()).map_err(io)?;
        for spec in &self.specs {
            write_spec(w, spec).map_err(io)?;
        }
        for &d in &self.input_shape {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
        }
        for p in self.params.iter().flatten() {
            p.weight.write_blob(w).map_err(io)?;
            p.bias.write_blob(w).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Network> {
        let io = |e| Error::io("reading network checkpoint", e);
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != NET_MAGIC {
            return Err(Error::Checkpoint("bad magic, not a network checkpoint".into()));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(io)?;
        let stored_hash = u64::from_le_bytes(b8);
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(io)?;
        let n_layers = u32::from_le_bytes(b4) as usize;
        if n_layers == 0 || n_layers > 4096 {
            return Err(Error::Checkpoint("implausible layer count".into()));
        }
        let mut specs = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            specs.push(read_spec(r)?);
        }
        let mut input_shape = [0usize; 3];
        for d in &mut input_shape {
            r.read_exact(&mut b8).map_err(io)?;
            *d = u64::from_le_bytes(b8) as usize;
        }

        // rebuild through the validator, then overwrite the parameters
        let mut throwaway = Rng::from_seed(0);
        let mut net = Network::build(specs, input_shape, &mut throwaway)?;
        if net.arch_hash() != stored_hash {
            return Err(Error::Checkpoint(
                "spec hash mismatch: file does not match its own architecture".into(),
            ));
        }
        for slot in net.params.iter_mut() {
            if let Some(p) = slot {
                let weight = Tensor::read_blob(r)?;
                let bias = Tensor::read_blob(r)?;
                if weight.shape() != p.weight.shape() || bias.shape() != p.bias.shape() {
                    return Err(Error::Checkpoint(
                        "parameter tensor shape does not match layer spec".into(),
                    ));
                }
                p.weight = weight;
                p.bias = bias;
            }
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut w = BufWriter::new(f);
        self.write_checkpoint(&mut w)?;
        w.flush().map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Network> {
        let f = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Network::read_checkpoint(&mut BufReader::new(f))
    }
}

fn hash_spec(h: &mut Fnv1a, spec: &LayerSpec) {
    match *spec {
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            h.write_u64(1)
                .write_u64(in_channels as u64)
                .write_u64(out_channels as u64)
                .write_u64(kernel as u64)
                .write_u64(stride as u64)
                .write_u64(padding as u64);
        }
        LayerSpec::Relu => {
            h.write_u64(2);
        }
        LayerSpec::MaxPool { window, stride } => {
            h.write_u64(3).write_u64(window as u64).write_u64(stride as u64);
        }
        LayerSpec::FullyConnected { in_dim, out_dim } => {
            h.write_u64(4).write_u64(in_dim as u64).write_u64(out_dim as u64);
        }
        LayerSpec::Dropout { keep_prob } => {
            h.write_u64(5).write_f64(keep_prob);
        }
    }
}

fn write_spec<W: Write>(w: &mut W, spec: &LayerSpec) -> std::io::Result<()> {
    match *spec {
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            w.write_all(&[1])?;
            for v in [in_channels, out_channels, kernel, stride, padding] {
                w.write_all(&(v as u64).to_le_bytes())?;
            }
        }
        LayerSpec::Relu => w.write_all(&[2])?,
        LayerSpec::MaxPool { window, stride } => {
            w.write_all(&[3])?;
            w.write_all(&(window as u64).to_le_bytes())?;
            w.write_all(&(stride as u64).to_le_bytes())?;
        }
        LayerSpec::FullyConnected { in_dim, out_dim } => {
            w.write_all(&[4])?;
            w.write_all(&(in_dim as u64).to_le_bytes())?;
            w.write_all(&(out_dim as u64).to_le_bytes())?;
        }
        LayerSpec::Dropout { keep_prob } => {
            w.write_all(&[5])?;
            w.write_all(&keep_prob.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_spec<R: Read>(r: &mut R) -> Result<LayerSpec> {
    let io = |e| Error::io("reading layer spec", e);
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag).map_err(io)?;
    let mut b8 = [0u8; 8];
    let mut read_u64 = |r: &mut R| -> Result<u64> {
        r.read_exact(&mut b8).map_err(io)?;
        Ok(u64::from_le_bytes(b8))
    };
    Ok(match tag[0] {
        1 => LayerSpec::Conv {
            in_channels: read_u64(r)? as usize,
            out_channels: read_u64(r)? as usize,
            kernel: read_u64(r)? as usize,
            stride: read_u64(r)? as usize,
            padding: read_u64(r)? as usize,
        },
        2 => LayerSpec::Relu,
        3 => LayerSpec::MaxPool {
            window: read_u64(r)? as usize,
            stride: read_u64(r)? as usize,
        },
        4 => LayerSpec::FullyConnected {
            in_dim: read_u64(r)? as usize,
            out_dim: read_u64(r)? as usize,
        },
        5 => {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(io)?;
            LayerSpec::Dropout {
                keep_prob: f64::from_le_bytes(b),
            }
        }
        t => return Err(Error::Checkpoint(format!("unknown layer tag {t}"))),
    })
}

fn pool_forward(input: &Tensor, window: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let s = input.shape();
    if input.rank() != 4 {
        return Err(Error::BadShape {
            op: "maxpool",
            expected: "a [B, C, H, W] tensor",
            shape: s.to_vec(),
        });
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let in_len = c * h * w;
    let out_len = c * oh * ow;
    let mut out = Tensor::zeros(&[b, c, oh, ow])?;
    let mut argmax = vec![0usize; b * out_len];
    out.data_mut()
        .par_chunks_mut(out_len)
        .zip(argmax.par_chunks_mut(out_len))
        .zip(input.data().par_chunks(in_len))
        .enumerate()
        .for_each(|(bi, ((out_img, arg_img), img))| {
            kernels::pool_forward_image(img, c, h, w, window, stride, oh, ow, out_img, arg_img);
            // promote per-image indices to batch-global flat indices
            for a in arg_img.iter_mut() {
                *a += bi * in_len;
            }
        });
    Ok((out, argmax))
}

fn pool_backward(input_shape: &[usize], d_out: &Tensor, argmax: &[usize]) -> Result<Tensor> {
    let mut dx = Tensor::zeros(input_shape)?;
    let data = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(d_out.data()) {
        data[idx] += g;
    }
    Ok(dx)
}

/// Three conv+pool blocks and two fully-connected layers with dropout — the
/// desk-scale preset. `image_size` must be divisible by 8.
pub fn mini_alexnet(in_channels: usize, image_size: usize, classes: usize) -> Vec<LayerSpec> {
    let s8 = image_size / 8;
    vec![
        LayerSpec::Conv {
            in_channels,
            out_channels: 8,
            kernel: 5,
            stride: 1,
            padding: 2,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool { window: 2, stride: 2 },
        LayerSpec::Conv {
            in_channels: 8,
            out_channels: 16,
            kernel: 5,
            stride: 1,
            padding: 2,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool { window: 2, stride: 2 },
        LayerSpec::Conv {
            in_channels: 16,
            out_channels: 32,
            kernel: 3,
            stride: 1,
            padding: 1,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool { window: 2, stride: 2 },
        LayerSpec::FullyConnected {
            in_dim: 32 * s8 * s8,
            out_dim: 64,
        },
        LayerSpec::Relu,
        LayerSpec::Dropout { keep_prob: 0.5 },
        LayerSpec::FullyConnected {
            in_dim: 64,
            out_dim: classes,
        },
    ]
}

/// The full eight-layer shape (five conv blocks, three fully-connected, with
/// dropout on the two hidden fc layers), for fidelity runs. Expects inputs of
/// at least 67x67.
pub fn alexnet(in_channels: usize, image_size: usize, classes: usize) -> Vec<LayerSpec> {
    let c1 = conv_out_dim(image_size, 11, 4, 2).unwrap_or(1);
    let p1 = (c1 - 3) / 2 + 1;
    let p2 = (p1 - 3) / 2 + 1;
    let p5 = (p2 - 3) / 2 + 1;
    vec![
        LayerSpec::Conv {
            in_channels,
            out_channels: 96,
            kernel: 11,
            stride: 4,
            padding: 2,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool { window: 3, stride: 2 },
        LayerSpec::Conv {
            in_channels: 96,
            out_channels: 256,
            kernel: 5,
            stride: 1,
            padding: 2,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool { window: 3, stride: 2 },
        LayerSpec::Conv {
            in_channels: 256,
            out_channels: 384,
            kernel: 3,
            stride: 1,
            padding: 1,
        },
        LayerSpec::Relu,
        LayerSpec::Conv {
            in_channels: 384,
            out_channels: 384,
            kernel: 3,
            stride: 1,
            padding: 1,
        },
        LayerSpec::Relu,
        LayerSpec::Conv {
            in_channels: 384,
            out_channels: 256,
            kernel: 3,
            stride: 1,
            padding: 1,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool { window: 3, stride: 2 },
        LayerSpec::FullyConnected {
            in_dim: 256 * p5 * p5,
            out_dim: 4096,
        },
        LayerSpec::Relu,
        LayerSpec::Dropout { keep_prob: 0.5 },
        LayerSpec::FullyConnected {
            in_dim: 4096,
            out_dim: 4096,
        },
        LayerSpec::Relu,
        LayerSpec::Dropout { keep_prob: 0.5 },
        LayerSpec::FullyConnected {
            in_dim: 4096,
            out_dim: classes,
        },
    ]
}

/// Per-image spatial mean of every feature map, per tap, in network order:
/// the v_f^r values the carving pass consumes.
pub fn extract_feature_responses(net: &Network, trace: &ForwardTrace) -> Vec<TapResponses> {
    net.conv_taps
        .iter()
        .zip(trace.taps.iter())
        .map(|(&layer, tap)| {
            let s = tap.shape();
            let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
            let means = (0..b)
                .map(|bi| {
                    (0..c)
                        .map(|ci| {
                            let base = (bi * c + ci) * hw;
                            tap.data()[base..base + hw].iter().sum::<f64>() / hw as f64
                        })
                        .collect()
                })
                .collect();
            TapResponses { layer, means }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> Rng {
        Rng::from_seed(99)
    }

    fn fc_only() -> Network {
        Network::build(
            vec![LayerSpec::FullyConnected { in_dim: 4, out_dim: 3 }],
            [4, 1, 1],
            &mut rng(),
        )
        .unwrap()
    }

    #[test]
    fn degenerate_stack_has_three_outputs() {
        let net = fc_only();
        assert_eq!(net.num_classes(), 3);
        assert!(net.conv_taps().is_empty());
    }

    #[test]
    fn mini_alexnet_has_three_taps_and_zero_biases() {
        let specs = mini_alexnet(1, 32, 4);
        let net = Network::build(specs, [1, 32, 32], &mut rng()).unwrap();
        assert_eq!(net.conv_taps().len(), 3);
        assert_eq!(net.num_classes(), 4);
        for p in net.params().iter().flatten() {
            assert!(p.bias.data().iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn chain_violation_names_the_pair() {
        let specs = vec![
            LayerSpec::Conv {
                in_channels: 1,
                out_channels: 2,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::Conv {
                in_channels: 5,
                out_channels: 2,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
        ];
        let err = Network::build(specs, [1, 8, 8], &mut rng()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("layers 0") && msg.contains("1 (conv)"), "{msg}");
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let mut net = fc_only();
        for p in net.params_mut().iter_mut().flatten() {
            p.weight = Tensor::zeros(p.weight.shape()).unwrap();
        }
        let batch = Tensor::randn(&[2, 4, 1, 1], 1.0, &mut rng()).unwrap();
        let (logits, _) = net.forward(&batch, &mut rng()).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inference_forward_is_deterministic() {
        let specs = mini_alexnet(1, 16, 3);
        let mut net = Network::build(specs, [1, 16, 16], &mut rng()).unwrap();
        net.set_mode(Mode::Inference);
        let batch = Tensor::randn(&[2, 1, 16, 16], 1.0, &mut rng()).unwrap();
        let (a, _) = net.forward(&batch, &mut rng()).unwrap();
        let (b, _) = net.forward(&batch, &mut Rng::from_seed(12345)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let specs = mini_alexnet(1, 16, 3);
        let net = Network::build(specs, [1, 16, 16], &mut rng()).unwrap();
        let batch = Tensor::randn(&[2, 1, 16, 16], 1.0, &mut rng()).unwrap();
        let (_, trace) = net.forward(&batch, &mut rng()).unwrap();
        let (grads, dx) = net
            .backward(&trace, &Tensor::zeros(&[2, 3]).unwrap())
            .unwrap();
        for g in grads.layers.iter().flatten() {
            assert!(g.weight.data().iter().all(|&v| v == 0.0));
            assert!(g.bias.data().iter().all(|&v| v == 0.0));
        }
        assert!(dx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fc_weight_grad_is_dlogits_t_times_input() {
        let net = fc_only();
        let x = Tensor::from_vec(&[2, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 2.0, 0.0])
            .unwrap();
        let (_, trace) = net.forward(&x, &mut rng()).unwrap();
        let dl = Tensor::from_vec(&[2, 3], vec![0.1, 0.2, 0.3, -0.4, 0.5, -0.6]).unwrap();
        let (grads, _) = net.backward(&trace, &dl).unwrap();
        let expected = dl
            .transpose()
            .unwrap()
            .matmul(&x.reshape(&[2, 4]).unwrap())
            .unwrap();
        assert_eq!(grads.layers[0].as_ref().unwrap().weight, expected);
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let specs = vec![LayerSpec::MaxPool { window: 2, stride: 2 },
                         LayerSpec::FullyConnected { in_dim: 1, out_dim: 1 }];
        let net = Network::build(specs, [1, 2, 2], &mut rng()).unwrap();
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 9.0, 3.0, 4.0]).unwrap();
        let (_, trace) = net.forward(&x, &mut rng()).unwrap();
        let (_, dx) = net
            .backward(&trace, &Tensor::ones(&[1, 1]).unwrap())
            .unwrap();
        let w = net.params()[1].as_ref().unwrap().weight.data()[0];
        assert_eq!(dx.data(), &[0.0, w, 0.0, 0.0]);
    }

    #[test]
    fn stale_trace_rejected() {
        let mut net = fc_only();
        let x = Tensor::randn(&[1, 4, 1, 1], 1.0, &mut rng()).unwrap();
        let (_, trace) = net.forward(&x, &mut rng()).unwrap();
        net.params_mut(); // bump version
        assert!(net.backward(&trace, &Tensor::zeros(&[1, 3]).unwrap()).is_err());
    }

    #[test]
    fn dropout_scales_by_inverse_keep_prob() {
        let specs = vec![
            LayerSpec::FullyConnected { in_dim: 2, out_dim: 2 },
            LayerSpec::Dropout { keep_prob: 0.5 },
        ];
        let mut net = Network::build(specs, [2, 1, 1], &mut rng()).unwrap();
        net.set_mode(Mode::Train);
        let x = Tensor::ones(&[1, 2, 1, 1]).unwrap();
        let mut r = rng();
        let (inference, _) = {
            let mut n2 = net.clone();
            n2.set_mode(Mode::Inference);
            n2.forward(&x, &mut r).unwrap()
        };
        let (train_out, _) = net.forward(&x, &mut r).unwrap();
        for (&t, &i) in train_out.data().iter().zip(inference.data()) {
            assert!(t == 0.0 || (t - 2.0 * i).abs() < 1e-12, "t={t} i={i}");
        }
    }

    #[test]
    fn tap_is_post_relu() {
        let specs = vec![
            LayerSpec::Conv {
                in_channels: 1,
                out_channels: 1,
                kernel: 1,
                stride: 1,
                padding: 0,
            },
            LayerSpec::Relu,
            LayerSpec::FullyConnected { in_dim: 4, out_dim: 2 },
        ];
        let mut net = Network::build(specs, [1, 2, 2], &mut rng()).unwrap();
        // force conv output = -x so the relu clamps everything to zero
        net.params_mut()[0] = Some(LayerParams {
            weight: Tensor::from_vec(&[1, 1, 1, 1], vec![-1.0]).unwrap(),
            bias: Tensor::zeros(&[1]).unwrap(),
        });
        let x = Tensor::ones(&[1, 1, 2, 2]).unwrap();
        let (_, trace) = net.forward(&x, &mut rng()).unwrap();
        let responses = extract_feature_responses(&net, &trace);
        assert_eq!(responses.len(), 1);
        assert_eq!(responses[0].means, vec![vec![0.0]]);
    }

    #[test]
    fn response_bookkeeping_two_images_two_taps() {
        let specs = vec![
            LayerSpec::Conv {
                in_channels: 1,
                out_channels: 2,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::Conv {
                in_channels: 2,
                out_channels: 3,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::FullyConnected { in_dim: 3 * 16, out_dim: 2 },
        ];
        let net = Network::build(specs, [1, 4, 4], &mut rng()).unwrap();
        let x = Tensor::randn(&[2, 1, 4, 4], 1.0, &mut rng()).unwrap();
        let (_, trace) = net.forward(&x, &mut rng()).unwrap();
        let responses = extract_feature_responses(&net, &trace);
        assert_eq!(responses.len(), 2);
        assert_eq!(responses[0].means.len(), 2); // images
        assert_eq!(responses[0].means[0].len(), 2); // channels of tap 0
        assert_eq!(responses[1].means[0].len(), 3);
        // post-relu responses are nonnegative
        for tap in &responses {
            for img in &tap.means {
                assert!(img.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let specs = mini_alexnet(1, 16, 3);
        let net = Network::build(specs, [1, 16, 16], &mut rng()).unwrap();
        let mut buf = Vec::new();
        net.write_checkpoint(&mut buf).unwrap();
        let back = Network::read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back.specs(), net.specs());
        assert_eq!(back.params(), net.params());
        assert_eq!(back.arch_hash(), net.arch_hash());

        // corruption is rejected, not half-loaded
        let mut bad = buf.clone();
        bad[7] ^= 0xff;
        assert!(Network::read_checkpoint(&mut bad.as_slice()).is_err());
    }
}
