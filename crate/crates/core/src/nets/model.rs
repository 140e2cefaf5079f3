use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelSpec, StemKind};
use crate::bench::Profiler;
use crate::binarize::{niblack_margins, sauvola_margins, BinarizerChoice, BinarizerKind, LabParams};
use crate::bitconv::{binconv, BinConvLayer};
use crate::error::{shape_mismatch, Error, Result};
use crate::tensor::checkpoint::{Checkpoint, StoredTensor};
use crate::tensor::{pack, BatchNormMode, BitTensor, Graph, Padding, Real, RealTensor, Shape4, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamRole {
    /// Real shadow weights of a binary conv; binarized by sign on use.
    LatentBinary,
    Real,
    /// LAB temperature.
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: RealTensor,
    pub role: ParamRole,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, hard binarizers with surrogate gradients.
    Train,
    /// Running statistics; binary convs run as XNOR-popcount kernels.
    Infer,
    /// Batch statistics with every binarizer replaced by its smooth
    /// surrogate, so the network is differentiable end to end.
    Relaxed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv { k: usize, stride: usize, depthwise: bool },
    BinaryConv { k: usize, stride: usize },
    Lab { k: usize },
    Prelu,
    Dense,
}

/// Shape-level description of one counted layer of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerDesc {
    pub name: String,
    pub kind: LayerKind,
    pub input: Shape4,
    pub output: Shape4,
}

/// Activations around one binarizer during a forward pass.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub layer: String,
    pub binarizer: BinarizerChoice,
    /// Real input of the binarizer.
    pub pre: RealTensor,
    /// Binarized activation fed to the binary conv.
    pub post: BitTensor,
}

#[derive(Clone, Copy, Debug)]
struct BnIdx {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Clone, Debug)]
enum LayerBinarizer {
    Sign,
    Lab { w: usize, b: usize, beta: usize },
    Niblack { k: Real, window: usize },
    Sauvola { k: Real, window: usize, r: Option<Real> },
}

#[derive(Clone, Debug)]
struct Shortcut {
    w: usize,
    bn: BnIdx,
}

#[derive(Clone, Debug)]
struct BinaryLayer {
    name: String,
    stride: usize,
    choice: BinarizerChoice,
    binarizer: LayerBinarizer,
    weight: usize,
    bn: BnIdx,
    shortcut: Option<Shortcut>,
    prelu: Option<usize>,
}

#[derive(Clone, Debug)]
enum Stem {
    Plain {
        w: usize,
        bn: BnIdx,
        stride: usize,
        pad: Padding,
        maxpool: bool,
    },
    QuickNet {
        w: usize,
        bn1: BnIdx,
        prelu: usize,
        dw: usize,
        bn2: BnIdx,
    },
}

/// Result of one forward pass kept on its graph.
pub struct Pass {
    pub graph: Graph,
    pub logits: Var,
    /// One node per model parameter (a leaf when trainable in this mode).
    pub param_vars: Vec<Var>,
    bn_nodes: Vec<(usize, usize, Var)>,
}

#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<Param>,
    stem: Stem,
    layers: Vec<BinaryLayer>,
    head: (usize, usize),
    descs: Vec<LayerDesc>,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Rounds through `f32` so the stored checkpoint holds the value exactly.
pub(crate) fn snap(t: &mut RealTensor) {
    for v in t.data_mut() {
        *v = *v as f32 as Real;
    }
}

struct Builder {
    seed: u64,
    params: Vec<Param>,
}

impl Builder {
    fn rng(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name))
    }

    fn push(&mut self, name: String, mut value: RealTensor, role: ParamRole) -> usize {
        snap(&mut value);
        self.params.push(Param { name, value, role });
        self.params.len() - 1
    }

    fn he(&mut self, name: String, shape: Shape4) -> usize {
        let fan_in = shape.item() as Real;
        let t = RealTensor::normal(shape, (2.0 / fan_in).sqrt(), &mut self.rng(&name));
        self.push(name, t, ParamRole::Real)
    }

    fn latent(&mut self, name: String, shape: Shape4) -> usize {
        let k2 = (shape.h * shape.w) as Real;
        let limit = (6.0 / (shape.c as Real * k2 + shape.n as Real * k2)).sqrt();
        let t = RealTensor::uniform(shape, -limit, limit, &mut self.rng(&name));
        self.push(name, t, ParamRole::LatentBinary)
    }

    fn channel_vec(c: usize) -> Shape4 {
        Shape4 { n: 1, c, h: 1, w: 1 }
    }

    fn bn(&mut self, prefix: &str, c: usize) -> BnIdx {
        let s = Self::channel_vec(c);
        BnIdx {
            gamma: self.push(format!("{prefix}.gamma"), RealTensor::full(s, 1.0), ParamRole::Real),
            beta: self.push(format!("{prefix}.beta"), RealTensor::zeros(s), ParamRole::Real),
            mean: self.push(format!("{prefix}.mean"), RealTensor::zeros(s), ParamRole::RunningMean),
            var: self.push(format!("{prefix}.var"), RealTensor::full(s, 1.0), ParamRole::RunningVar),
        }
    }

    fn prelu(&mut self, name: String, c: usize) -> usize {
        self.push(name, RealTensor::full(Self::channel_vec(c), 0.25), ParamRole::Real)
    }
}

fn conv_out(input: Shape4, c_out: usize, k: usize, stride: usize, pad: Padding) -> Result<Shape4> {
    let g = pad.geometry(input.h, input.w, k, stride)?;
    Ok(Shape4 {
        n: input.n,
        c: c_out,
        h: g.out_h,
        w: g.out_w,
    })
}

impl Model {
    /// Builds a model with deterministic initialization: every parameter is
    /// drawn from its own stream keyed by `seed` and the parameter name, so
    /// changing one layer's binarizer leaves all other parameters unchanged.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut b = Builder {
            seed,
            params: Vec::new(),
        };
        let mut descs = Vec::new();
        let mut shape = spec.input;
        let c0 = spec.blocks[0].channels;

        let stem = match spec.stem {
            StemKind::Plain {
                kernel,
                stride,
                maxpool,
            } => {
                let pad = Padding::SAME_ZERO;
                let w = b.he("stem.conv.w".into(), Shape4::new(c0, shape.c, kernel, kernel)?);
                let out = conv_out(shape, c0, kernel, stride, pad)?;
                descs.push(LayerDesc {
                    name: "stem.conv".into(),
                    kind: LayerKind::Conv {
                        k: kernel,
                        stride,
                        depthwise: false,
                    },
                    input: shape,
                    output: out,
                });
                shape = out;
                let bn = b.bn("stem.bn", c0);
                if maxpool {
                    shape.h = (shape.h + 2 - 3) / 2 + 1;
                    shape.w = (shape.w + 2 - 3) / 2 + 1;
                }
                Stem::Plain {
                    w,
                    bn,
                    stride,
                    pad,
                    maxpool,
                }
            }
            StemKind::QuickNet => {
                let half = c0 / 2;
                let w = b.he("stem.conv.w".into(), Shape4::new(half, shape.c, 3, 3)?);
                let mid = conv_out(shape, half, 3, 2, Padding::SAME_ZERO)?;
                descs.push(LayerDesc {
                    name: "stem.conv".into(),
                    kind: LayerKind::Conv {
                        k: 3,
                        stride: 2,
                        depthwise: false,
                    },
                    input: shape,
                    output: mid,
                });
                let bn1 = b.bn("stem.bn1", half);
                let prelu = b.prelu("stem.prelu".into(), half);
                descs.push(LayerDesc {
                    name: "stem.prelu".into(),
                    kind: LayerKind::Prelu,
                    input: mid,
                    output: mid,
                });
                let dw = b.he("stem.dw.w".into(), Shape4::new(c0, 1, 3, 3)?);
                let out = conv_out(mid, c0, 3, 2, Padding::SAME_ZERO)?;
                descs.push(LayerDesc {
                    name: "stem.dw".into(),
                    kind: LayerKind::Conv {
                        k: 3,
                        stride: 2,
                        depthwise: true,
                    },
                    input: mid,
                    output: out,
                });
                let bn2 = b.bn("stem.bn2", c0);
                shape = out;
                Stem::QuickNet {
                    w,
                    bn1,
                    prelu,
                    dw,
                    bn2,
                }
            }
        };

        let mut layers = Vec::new();
        for block in &spec.blocks {
            for l in 0..block.layers {
                let name = format!("s{}.l{}", block.stage, l);
                let stride = if l == 0 { block.stride } else { 1 };
                let (c_in, c_out) = (shape.c, block.channels);
                let choice = if spec.full_precision {
                    BinarizerChoice::Sign
                } else {
                    block.binarizer
                };
                let binarizer = match choice {
                    _ if spec.full_precision => LayerBinarizer::Sign,
                    BinarizerChoice::Sign => LayerBinarizer::Sign,
                    BinarizerChoice::Lab => {
                        let lab_name = format!("lab.{name}");
                        let p = LabParams::init(c_in, spec.lab_kernel, &mut b.rng(&lab_name))?;
                        let bias = RealTensor::from_vec(Builder::channel_vec(2 * c_in), p.dw_bias)?;
                        descs.push(LayerDesc {
                            name: lab_name.clone(),
                            kind: LayerKind::Lab { k: spec.lab_kernel },
                            input: shape,
                            output: shape,
                        });
                        LayerBinarizer::Lab {
                            w: b.push(format!("{lab_name}.dw_weights"), p.dw_weights, ParamRole::Real),
                            b: b.push(format!("{lab_name}.dw_bias"), bias, ParamRole::Real),
                            beta: b.push(format!("{lab_name}.beta"), RealTensor::scalar(p.beta), ParamRole::Beta),
                        }
                    }
                    BinarizerChoice::Niblack => LayerBinarizer::Niblack {
                        k: spec.niblack_k,
                        window: spec.threshold_window,
                    },
                    BinarizerChoice::Sauvola => LayerBinarizer::Sauvola {
                        k: spec.sauvola_k,
                        window: spec.threshold_window,
                        r: spec.sauvola_r,
                    },
                };
                let wshape = Shape4::new(c_out, c_in, 3, 3)?;
                let weight = if spec.full_precision {
                    b.he(format!("{name}.conv.w"), wshape)
                } else {
                    b.latent(format!("{name}.conv.w"), wshape)
                };
                let pad = if spec.full_precision {
                    Padding::SAME_ZERO
                } else {
                    spec.binary_padding
                };
                let out = conv_out(shape, c_out, 3, stride, pad)?;
                descs.push(LayerDesc {
                    name: format!("{name}.conv"),
                    kind: if spec.full_precision {
                        LayerKind::Conv {
                            k: 3,
                            stride,
                            depthwise: false,
                        }
                    } else {
                        LayerKind::BinaryConv { k: 3, stride }
                    },
                    input: shape,
                    output: out,
                });
                let bn = b.bn(&format!("{name}.bn"), c_out);
                let shortcut = if stride != 1 || c_in != c_out {
                    let w = b.he(format!("{name}.down.w"), Shape4::new(c_out, c_in, 1, 1)?);
                    let pooled = if stride == 2 {
                        Shape4 {
                            h: shape.h.div_ceil(2),
                            w: shape.w.div_ceil(2),
                            ..shape
                        }
                    } else {
                        shape
                    };
                    if (pooled.h, pooled.w) != (out.h, out.w) {
                        return Err(shape_mismatch("build", format!("shortcut {pooled} vs main path {out}")));
                    }
                    descs.push(LayerDesc {
                        name: format!("{name}.down"),
                        kind: LayerKind::Conv {
                            k: 1,
                            stride: 1,
                            depthwise: false,
                        },
                        input: pooled,
                        output: out,
                    });
                    Some(Shortcut {
                        w,
                        bn: b.bn(&format!("{name}.down.bn"), c_out),
                    })
                } else {
                    None
                };
                let prelu = if block.use_prelu {
                    descs.push(LayerDesc {
                        name: format!("{name}.prelu"),
                        kind: LayerKind::Prelu,
                        input: out,
                        output: out,
                    });
                    Some(b.prelu(format!("{name}.prelu"), c_out))
                } else {
                    None
                };
                layers.push(BinaryLayer {
                    name,
                    stride,
                    choice,
                    binarizer,
                    weight,
                    bn,
                    shortcut,
                    prelu,
                });
                shape = out;
            }
        }

        let features = shape.c;
        let limit = (6.0 / (features + spec.classes) as Real).sqrt();
        let hw = RealTensor::uniform(Shape4::new(spec.classes, features, 1, 1)?, -limit, limit, &mut b.rng("head.w"));
        let head_w = b.push("head.w".into(), hw, ParamRole::Real);
        let head_b = b.push("head.b".into(), RealTensor::zeros(Builder::channel_vec(spec.classes)), ParamRole::Real);
        descs.push(LayerDesc {
            name: "head".into(),
            kind: LayerKind::Dense,
            input: Shape4 { h: 1, w: 1, ..shape },
            output: Shape4::new(1, spec.classes, 1, 1)?,
        });

        Ok(Model {
            spec,
            params: b.params,
            stem,
            layers,
            head: (head_w, head_b),
            descs,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.iter().filter(|p| p.role.is_trainable()).map(|p| p.value.len()).sum()
    }

    /// Deployed size: one bit per binary weight, four bytes per real
    /// trainable scalar. Running statistics are excluded.
    pub fn param_bytes(&self) -> usize {
        let (mut bits, mut reals) = (0, 0);
        for p in &self.params {
            match p.role {
                ParamRole::LatentBinary => bits += p.value.len(),
                ParamRole::Real | ParamRole::Beta => reals += p.value.len(),
                _ => {}
            }
        }
        bits.div_ceil(8) + 4 * reals
    }

    /// Layer shapes for a single image.
    pub fn describe(&self) -> &[LayerDesc] {
        &self.descs
    }

    pub fn binary_layer_names(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.name.clone()).collect()
    }

    /// Binarizer of each binary layer, with LAB parameters materialized.
    pub fn binarizers(&self) -> Vec<(String, BinarizerKind)> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let kind = match &l.binarizer {
                    LayerBinarizer::Sign => BinarizerKind::SignSte,
                    LayerBinarizer::Lab { .. } => BinarizerKind::Lab(self.lab_params(i).expect("LAB layer")),
                    LayerBinarizer::Niblack { k, window } => BinarizerKind::Niblack { k: *k, window: *window },
                    LayerBinarizer::Sauvola { k, window, r } => BinarizerKind::Sauvola {
                        k: *k,
                        window: *window,
                        r: *r,
                    },
                };
                (l.name.clone(), kind)
            })
            .collect()
    }

    /// LAB parameters of binary layer `layer`, if it uses LAB.
    pub fn lab_params(&self, layer: usize) -> Option<LabParams> {
        match self.layers.get(layer)?.binarizer {
            LayerBinarizer::Lab { w, b, beta } => Some(LabParams {
                dw_weights: self.params[w].value.clone(),
                dw_bias: self.params[b].value.data().to_vec(),
                beta: self.params[beta].value.data()[0],
            }),
            _ => None,
        }
    }

    pub fn set_lab_params(&mut self, layer: usize, p: &LabParams) -> Result<()> {
        p.validate()?;
        let Some(LayerBinarizer::Lab { w, b, beta }) = self.layers.get(layer).map(|l| l.binarizer.clone()) else {
            return Err(Error::InvalidArgument(format!("binary layer {layer} does not use LAB")));
        };
        if p.dw_weights.shape() != self.params[w].value.shape() {
            return Err(shape_mismatch("set_lab_params", "kernel shape"));
        }
        self.params[w].value = p.dw_weights.clone();
        self.params[b].value = RealTensor::from_vec(self.params[b].value.shape(), p.dw_bias.clone())?;
        self.params[beta].value = RealTensor::scalar(p.beta);
        Ok(())
    }

    /// Indices of binary layers that use LAB.
    pub fn lab_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| matches!(self.layers[i].binarizer, LayerBinarizer::Lab { .. }))
            .collect()
    }

    /// `(site name, β)` for every LAB site.
    pub fn betas(&self) -> Vec<(String, Real)> {
        self.params
            .iter()
            .filter(|p| p.role == ParamRole::Beta)
            .map(|p| (p.name.trim_end_matches(".beta").to_string(), p.value.data()[0]))
            .collect()
    }

    /// Sets the classifier to zero so logits depend on nothing but the bias.
    pub fn zero_head(&mut self) {
        let (w, b) = self.head;
        self.params[w].value = RealTensor::zeros(self.params[w].value.shape());
        self.params[b].value = RealTensor::zeros(self.params[b].value.shape());
    }

    fn check_input(&self, batch: &RealTensor) -> Result<()> {
        let s = batch.shape();
        let i = self.spec.input;
        if (s.c, s.h, s.w) != (i.c, i.h, i.w) {
            return Err(shape_mismatch("forward", format!("batch {s} for model input {}x{}x{}", i.c, i.h, i.w)));
        }
        Ok(())
    }

    pub fn forward(&self, batch: &RealTensor, mode: Mode) -> Result<RealTensor> {
        let mut pass = self.pass(batch, mode, None, None)?;
        Ok(pass.graph.take_value(pass.logits))
    }

    /// Forward pass that keeps the graph for backward. `trace` collects the
    /// activations around every binarizer; `profiler` records per-operator
    /// wall time.
    pub fn pass(
        &self,
        batch: &RealTensor,
        mode: Mode,
        trace: Option<&mut Vec<LayerTrace>>,
        profiler: Option<&mut Profiler>,
    ) -> Result<Pass> {
        self.check_input(batch)?;
        let mut profiler = profiler;
        let start = Instant::now();
        let mut graph = Graph::new();
        let trainable = mode != Mode::Infer;
        let param_vars = self
            .params
            .iter()
            .map(|p| {
                if trainable && p.role.is_trainable() {
                    graph.leaf(p.value.clone())
                } else {
                    graph.constant(p.value.clone())
                }
            })
            .collect();
        if let Some(p) = profiler.as_deref_mut() {
            p.record("load_params", "model", start.elapsed());
        }
        let start = Instant::now();
        let packed = if mode == Mode::Infer && !self.spec.full_precision {
            self.layers
                .iter()
                .map(|l| BinConvLayer::from_latent(&self.params[l.weight].value, l.stride, self.spec.binary_padding, false))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        if let (Some(p), false) = (profiler.as_deref_mut(), packed.is_empty()) {
            p.record("pack_weights", "model", start.elapsed());
        }
        let mut ctx = Ctx {
            model: self,
            g: graph,
            vars: param_vars,
            mode,
            bn_nodes: Vec::new(),
            prof: profiler,
        };
        let input = ctx.g.constant(batch.clone());
        let logits = ctx.run(input, &packed, trace)?;
        Ok(Pass {
            graph: ctx.g,
            logits,
            param_vars: ctx.vars,
            bn_nodes: ctx.bn_nodes,
        })
    }

    /// Folds the batch statistics of a training pass into the running
    /// statistics: `running ← momentum·running + (1 − momentum)·batch`.
    pub fn update_running_stats(&mut self, pass: &Pass, momentum: Real) {
        for &(mi, vi, node) in &pass.bn_nodes {
            let Some((bm, bv)) = pass.graph.batch_stats(node) else { continue };
            for (r, b) in self.params[mi].value.data_mut().iter_mut().zip(bm) {
                *r = momentum * *r + (1.0 - momentum) * b;
            }
            for (r, b) in self.params[vi].value.data_mut().iter_mut().zip(bv) {
                *r = momentum * *r + (1.0 - momentum) * b;
            }
            snap(&mut self.params[mi].value);
            snap(&mut self.params[vi].value);
        }
    }

    /// Every parameter as `f32`, plus bit-packed copies of the binary weights
    /// under `<name>.packed`.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for p in &self.params {
            ck.push_real(p.name.clone(), p.value.clone());
        }
        for p in self.params.iter().filter(|p| p.role == ParamRole::LatentBinary) {
            ck.push_bits(format!("{}.packed", p.name), pack(&p.value));
        }
        ck
    }

    /// Rebuilds a model of `spec` and fills it from `ck`; every parameter of
    /// the spec must be present with a matching shape.
    pub fn from_checkpoint(spec: ModelSpec, ck: &Checkpoint) -> Result<Self> {
        let mut m = Model::new(spec, 0)?;
        for p in &mut m.params {
            match ck.get(&p.name) {
                Some(StoredTensor::Real(t)) if t.shape() == p.value.shape() => p.value = t.clone(),
                Some(t) => {
                    return Err(Error::DatasetMismatch(format!(
                        "checkpoint tensor `{}` has shape {} but the model expects {}",
                        p.name,
                        t.shape(),
                        p.value.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing tensor `{}`", p.name))),
            }
        }
        Ok(m)
    }
}

struct Ctx<'a, 'p> {
    model: &'a Model,
    g: Graph,
    vars: Vec<Var>,
    mode: Mode,
    bn_nodes: Vec<(usize, usize, Var)>,
    prof: Option<&'p mut Profiler>,
}

impl Ctx<'_, '_> {
    fn timed<T>(&mut self, op: &'static str, layer: &str, f: impl FnOnce(&mut Graph) -> Result<T>) -> Result<T> {
        match self.prof.as_deref_mut() {
            Some(p) => {
                let start = Instant::now();
                let out = f(&mut self.g)?;
                p.record(op, layer, start.elapsed());
                Ok(out)
            }
            None => f(&mut self.g),
        }
    }

    fn relaxed(&self) -> bool {
        self.mode == Mode::Relaxed
    }

    fn bn(&mut self, x: Var, idx: BnIdx, layer: &str) -> Result<Var> {
        let (gamma, beta) = (self.vars[idx.gamma], self.vars[idx.beta]);
        if self.mode == Mode::Infer {
            let model = self.model;
            let mean = model.params[idx.mean].value.data();
            let var = model.params[idx.var].value.data();
            self.timed("batchnorm", layer, |g| g.batchnorm(x, gamma, beta, BatchNormMode::Infer { mean, var }))
        } else {
            let node = self.timed("batchnorm", layer, |g| g.batchnorm(x, gamma, beta, BatchNormMode::Train))?;
            self.bn_nodes.push((idx.mean, idx.var, node));
            Ok(node)
        }
    }

    fn prelu(&mut self, x: Var, slope: usize, layer: &str) -> Result<Var> {
        let s = self.vars[slope];
        self.timed("prelu", layer, |g| g.prelu(x, s))
    }

    fn stem(&mut self, x: Var) -> Result<Var> {
        let stem = self.model.stem.clone();
        match stem {
            Stem::Plain {
                w,
                bn,
                stride,
                pad,
                maxpool,
            } => {
                let wv = self.vars[w];
                let y = self.timed("conv2d", "stem", |g| g.conv2d(x, wv, stride, pad))?;
                let y = self.bn(y, bn, "stem")?;
                if maxpool {
                    self.timed("maxpool", "stem", |g| g.maxpool(y, 3, 2, 1))
                } else {
                    Ok(y)
                }
            }
            Stem::QuickNet {
                w,
                bn1,
                prelu,
                dw,
                bn2,
            } => {
                let (wv, dv) = (self.vars[w], self.vars[dw]);
                let y = self.timed("conv2d", "stem", |g| g.conv2d(x, wv, 2, Padding::SAME_ZERO))?;
                let y = self.bn(y, bn1, "stem")?;
                let y = self.prelu(y, prelu, "stem")?;
                let y = self.timed("depthwise", "stem", |g| g.depthwise_conv2d(y, dv, 2, 2, Padding::SAME_ZERO))?;
                self.bn(y, bn2, "stem")
            }
        }
    }

    fn binarize(&mut self, x: Var, b: &LayerBinarizer, layer: &str) -> Result<Var> {
        let relaxed = self.relaxed();
        let spec = &self.model.spec;
        match *b {
            LayerBinarizer::Sign => self.timed("sign", layer, |g| g.sign_ste(x, relaxed)),
            LayerBinarizer::Lab { w, b, beta } => {
                let (wv, bv, betav) = (self.vars[w], self.vars[b], self.vars[beta]);
                let pad = spec.lab_padding;
                let z = self.timed("lab.depthwise", layer, |g| g.depthwise_conv2d(x, wv, 2, 1, pad))?;
                let z = self.timed("lab.bias", layer, |g| g.add_channel_bias(z, bv))?;
                self.timed("lab.argmax", layer, |g| g.pair_select(z, betav, relaxed))
            }
            LayerBinarizer::Niblack { k, window } => self.timed("niblack", layer, |g| {
                let m = niblack_margins(g.value(x), k, window)?;
                g.margin_ste(x, m, relaxed)
            }),
            LayerBinarizer::Sauvola { k, window, r } => self.timed("sauvola", layer, |g| {
                let m = sauvola_margins(g.value(x), k, window, r)?;
                g.margin_ste(x, m, relaxed)
            }),
        }
    }

    fn run(&mut self, input: Var, packed: &[BinConvLayer], mut trace: Option<&mut Vec<LayerTrace>>) -> Result<Var> {
        let model = self.model;
        let spec = &model.spec;
        let mut x = self.stem(input)?;
        for (li, layer) in model.layers.iter().enumerate() {
            let name = layer.name.as_str();
            let main = if spec.full_precision {
                let wv = self.vars[layer.weight];
                let stride = layer.stride;
                self.timed("conv2d", name, |g| g.conv2d(x, wv, stride, Padding::SAME_ZERO))?
            } else {
                let a = self.binarize(x, &layer.binarizer, name)?;
                if let Some(t) = trace.as_deref_mut() {
                    t.push(LayerTrace {
                        layer: layer.name.clone(),
                        binarizer: layer.choice,
                        pre: self.g.value(x).clone(),
                        post: pack(self.g.value(a)),
                    });
                }
                if self.mode == Mode::Infer {
                    let kernel = &packed[li];
                    self.timed("binconv", name, |g| {
                        let bits = pack(g.value(a));
                        let out = binconv(&bits, kernel)?;
                        Ok(g.constant(out))
                    })?
                } else {
                    let relaxed = self.relaxed();
                    let wv = self.vars[layer.weight];
                    let (stride, pad) = (layer.stride, spec.binary_padding);
                    self.timed("binconv", name, |g| {
                        let wb = g.sign_ste(wv, relaxed)?;
                        g.conv2d(a, wb, stride, pad)
                    })?
                }
            };
            let mut y = self.bn(main, layer.bn, name)?;
            let shortcut = match &layer.shortcut {
                None => x,
                Some(sc) => {
                    let mut t = x;
                    if layer.stride == 2 {
                        t = self.timed("avgpool", name, |g| g.avgpool2(t))?;
                    }
                    let wv = self.vars[sc.w];
                    let t = self.timed("conv2d", name, |g| g.conv2d(t, wv, 1, Padding::Valid))?;
                    self.bn(t, sc.bn, name)?
                }
            };
            if let (Some(p), false) = (layer.prelu, spec.prelu_after_add) {
                y = self.prelu(y, p, name)?;
            }
            y = self.timed("add", name, |g| g.add(y, shortcut))?;
            if let (Some(p), true) = (layer.prelu, spec.prelu_after_add) {
                y = self.prelu(y, p, name)?;
            }
            x = y;
        }
        let pooled = self.timed("avgpool", "head", |g| g.global_avg_pool(x))?;
        let (w, b) = (self.vars[model.head.0], self.vars[model.head.1]);
        self.timed("dense", "head", |g| g.dense(pooled, w, b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::BlockSpec;
    use rand::SeedableRng;

    fn tiny(choice: BinarizerChoice) -> ModelSpec {
        ModelSpec {
            blocks: vec![BlockSpec {
                stage: 1,
                layers: 1,
                channels: 4,
                stride: 1,
                binarizer: choice,
                use_prelu: true,
            }],
            ..ModelSpec::staged(Shape4::new(1, 2, 6, 6).unwrap(), 3, 4, 1)
        }
    }

    fn batch(n: usize, spec: &ModelSpec, seed: u64) -> RealTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RealTensor::uniform(spec.input.with_n(n), -1.0, 1.0, &mut rng)
    }

    #[test]
    fn output_shape_matches_classifier() {
        for choice in [BinarizerChoice::Sign, BinarizerChoice::Lab, BinarizerChoice::Niblack, BinarizerChoice::Sauvola] {
            let spec = tiny(choice);
            let m = Model::new(spec.clone(), 1).unwrap();
            for mode in [Mode::Train, Mode::Infer, Mode::Relaxed] {
                let y = m.forward(&batch(3, &spec, 2), mode).unwrap();
                assert_eq!(y.shape(), Shape4::new(3, 3, 1, 1).unwrap());
            }
        }
    }

    #[test]
    fn lab_site_adds_exact_parameter_count() {
        let sign = Model::new(tiny(BinarizerChoice::Sign), 1).unwrap();
        let lab = Model::new(tiny(BinarizerChoice::Lab), 1).unwrap();
        // The LAB site binarizes the 4-channel stem output.
        assert_eq!(lab.param_count() - sign.param_count(), 2 * 4 * 9 + 2 * 4 + 1);
        assert_eq!(lab.param_bytes() - sign.param_bytes(), 4 * (2 * 4 * 9 + 2 * 4 + 1));
    }

    #[test]
    fn zero_head_gives_uniform_logits() {
        let spec = tiny(BinarizerChoice::Sign);
        let mut m = Model::new(spec.clone(), 3).unwrap();
        m.zero_head();
        let y = m.forward(&RealTensor::zeros(spec.input.with_n(2)), Mode::Infer).unwrap();
        assert!(y.data().iter().all(|&v| v == y.data()[0]));
    }

    #[test]
    fn infer_is_deterministic_and_differs_from_train_mode() {
        let spec = tiny(BinarizerChoice::Lab);
        let m = Model::new(spec.clone(), 4).unwrap();
        let x = batch(4, &spec, 5);
        let a = m.forward(&x, Mode::Infer).unwrap();
        let b = m.forward(&x, Mode::Infer).unwrap();
        assert_eq!(a, b);
        let t = m.forward(&x, Mode::Train).unwrap();
        assert!(a.max_abs_diff(&t) > 1e-6);
    }

    #[test]
    fn train_and_infer_agree_when_running_stats_equal_batch_stats() {
        let spec = tiny(BinarizerChoice::Sign);
        let mut m = Model::new(spec.clone(), 6).unwrap();
        let x = batch(4, &spec, 7);
        // Running statistics converge to the (fixed) batch statistics layer
        // by layer; a few passes with momentum 0 settle every layer.
        for _ in 0..4 {
            let pass = m.pass(&x, Mode::Train, None, None).unwrap();
            m.update_running_stats(&pass, 0.0);
        }
        let t = m.forward(&x, Mode::Train).unwrap();
        let i = m.forward(&x, Mode::Infer).unwrap();
        assert!(t.max_abs_diff(&i) < 1e-3, "{}", t.max_abs_diff(&i));
    }

    #[test]
    fn identity_lab_swap_preserves_outputs() {
        let sign = Model::new(tiny(BinarizerChoice::Sign), 8).unwrap();
        let mut lab = Model::new(tiny(BinarizerChoice::Lab), 8).unwrap();
        lab.set_lab_params(0, &LabParams::identity(4, 3).unwrap()).unwrap();
        let x = batch(3, sign.spec(), 9);
        for mode in [Mode::Train, Mode::Infer] {
            assert_eq!(sign.forward(&x, mode).unwrap(), lab.forward(&x, mode).unwrap());
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let spec = tiny(BinarizerChoice::Lab);
        let m = Model::new(spec.clone(), 10).unwrap();
        let ck = Checkpoint::read_from(m.to_checkpoint().to_bytes().as_slice()).unwrap();
        let back = Model::from_checkpoint(spec.clone(), &ck).unwrap();
        assert_eq!(back.params(), m.params());
        assert!(ck.get("lab.s1.l0.dw_weights").is_some());
        assert!(ck.get("lab.s1.l0.beta").is_some());
        assert!(matches!(ck.get("s1.l0.conv.w.packed"), Some(StoredTensor::Bits(_))));
        assert!(Model::from_checkpoint(tiny(BinarizerChoice::Sign).with_binarizer(BinarizerChoice::Sign), &Checkpoint::new()).is_err());
    }

    #[test]
    fn descriptions_track_shapes() {
        let m = Model::new(ModelSpec::cifar10().with_lab_mask(0b0001), 0).unwrap();
        let d = m.describe();
        assert_eq!(d[0].name, "stem.conv");
        let convs: Vec<_> = d.iter().filter(|l| matches!(l.kind, LayerKind::BinaryConv { .. })).collect();
        assert_eq!(convs.len(), 8);
        assert_eq!(convs.last().unwrap().output, Shape4::new(1, 256, 4, 4).unwrap());
        assert_eq!(d.iter().filter(|l| matches!(l.kind, LayerKind::Lab { .. })).count(), 2);
    }

    #[test]
    fn quicknet_stem_quarters_resolution() {
        let mut spec = ModelSpec::cifar10();
        spec.stem = StemKind::QuickNet;
        let m = Model::new(spec.clone(), 0).unwrap();
        let first = m.describe().iter().find(|l| matches!(l.kind, LayerKind::BinaryConv { .. })).unwrap();
        assert_eq!(first.input, Shape4::new(1, 32, 8, 8).unwrap());
        let y = m.forward(&batch(2, &spec, 1), Mode::Train).unwrap();
        assert_eq!(y.shape(), Shape4::new(2, 10, 1, 1).unwrap());
    }
}
