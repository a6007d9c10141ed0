//! Downstream classifiers over one or two embedding views.
//!
//! * `fcn`: dense → ReLU → dropout → dense → softmax.
//! * `cnn`: two conv/ReLU/max-pool stages, flatten, then the `fcn` head.
//! * `concat`: one conv stack per view, flattened features concatenated into
//!   the `fcn` head.
//! * `coffe`: `concat` plus a Chernoff distance between the softmax-normalized
//!   flattened features of the two views, used as an alignment loss.

mod cfm;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use cfm::{read_model, read_model_bytes, write_model, write_model_bytes, CFM_MAGIC, CFM_VERSION};

use crate::error::{dim_err, usage_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Fcn,
    Cnn,
    Concat,
    Coffe,
}

impl Arch {
    pub fn is_fusion(self) -> bool {
        matches!(self, Arch::Concat | Arch::Coffe)
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Fcn => "fcn",
            Arch::Cnn => "cnn",
            Arch::Concat => "concat",
            Arch::Coffe => "coffe",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fcn" => Ok(Arch::Fcn),
            "cnn" => Ok(Arch::Cnn),
            "concat" => Ok(Arch::Concat),
            "coffe" => Ok(Arch::Coffe),
            other => Err(usage_err!("unknown architecture {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub arch: Arch,
    pub input_dim_a: usize,
    pub input_dim_b: Option<usize>,
    pub n_classes: usize,
    pub conv_filters: [usize; 2],
    pub kernel: usize,
    pub pool: usize,
    pub dense_width: usize,
    pub dropout_rate: f64,
    /// Chernoff exponent `s`; only read by `coffe`.
    pub chernoff_s: f64,
}

impl ArchConfig {
    pub fn new(arch: Arch, input_dim_a: usize, input_dim_b: Option<usize>) -> Self {
        Self {
            arch,
            input_dim_a,
            input_dim_b,
            n_classes: 8,
            conv_filters: [64, 128],
            kernel: 3,
            pool: 2,
            dense_width: 128,
            dropout_rate: 0.3,
            chernoff_s: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.arch.is_fusion(), self.input_dim_b) {
            (true, None) => return Err(usage_err!("{} needs a second input dimension", self.arch)),
            (false, Some(_)) => return Err(usage_err!("{} takes a single input", self.arch)),
            _ => {}
        }
        if self.pool != 2 {
            return Err(usage_err!("only pool size 2 is supported, got {}", self.pool));
        }
        if self.kernel == 0 || self.conv_filters.contains(&0) || self.dense_width == 0 {
            return Err(usage_err!("layer sizes must be positive"));
        }
        if self.n_classes < 2 {
            return Err(usage_err!("need at least 2 classes, got {}", self.n_classes));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(usage_err!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        if !(self.chernoff_s > 0.0 && self.chernoff_s < 1.0) {
            return Err(usage_err!("chernoff exponent {} outside (0, 1)", self.chernoff_s));
        }
        for dim in std::iter::once(self.input_dim_a).chain(self.input_dim_b) {
            if dim == 0 {
                return Err(usage_err!("input dimension must be positive"));
            }
            if self.arch != Arch::Fcn {
                self.conv_out_len(dim)?;
            }
        }
        Ok(())
    }

    /// Length of each channel after both conv/pool stages.
    pub fn conv_out_len(&self, dim: usize) -> Result<usize> {
        let too_small = || dim_err!("input dimension {dim} too small for two conv/pool stages");
        let l1 = dim.checked_sub(self.kernel - 1).filter(|&l| l >= 2).ok_or_else(too_small)?;
        let l2 = (l1 / 2).checked_sub(self.kernel - 1).filter(|&l| l >= 2).ok_or_else(too_small)?;
        Ok(l2 / 2)
    }

    /// Width of the flattened conv features for one view.
    pub fn flat_len(&self, dim: usize) -> Result<usize> {
        Ok(self.conv_out_len(dim)? * self.conv_filters[1])
    }

    /// Input width of the dense head.
    pub fn head_input(&self) -> Result<usize> {
        match self.arch {
            Arch::Fcn => Ok(self.input_dim_a),
            Arch::Cnn => self.flat_len(self.input_dim_a),
            Arch::Concat | Arch::Coffe => {
                let b = self.input_dim_b.ok_or_else(|| usage_err!("missing second input"))?;
                Ok(self.flat_len(self.input_dim_a)? + self.flat_len(b)?)
            }
        }
    }

    /// Ordered `(name, shape)` manifest of every learnable tensor.
    pub fn manifest(&self) -> Result<Vec<(String, Vec<usize>)>> {
        self.validate()?;
        let mut out = Vec::new();
        let [f1, f2] = self.conv_filters;
        let k = self.kernel;
        let conv_stack = |prefix: &str, out: &mut Vec<(String, Vec<usize>)>| {
            out.push((format!("{prefix}conv1.weight"), vec![f1, 1, k]));
            out.push((format!("{prefix}conv1.bias"), vec![f1]));
            out.push((format!("{prefix}conv2.weight"), vec![f2, f1, k]));
            out.push((format!("{prefix}conv2.bias"), vec![f2]));
        };
        match self.arch {
            Arch::Fcn => {}
            Arch::Cnn => conv_stack("", &mut out),
            Arch::Concat | Arch::Coffe => {
                conv_stack("a.", &mut out);
                conv_stack("b.", &mut out);
            }
        }
        let w = self.dense_width;
        out.push(("fc1.weight".into(), vec![self.head_input()?, w]));
        out.push(("fc1.bias".into(), vec![w]));
        out.push(("out.weight".into(), vec![w, self.n_classes]));
        out.push(("out.bias".into(), vec![self.n_classes]));
        Ok(out)
    }
}

/// Learnable state of one architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ArchConfig,
    layers: Vec<(String, Tensor<T>)>,
}

/// He-normal weights (`std = sqrt(2 / fan_in)`) and zero biases, drawn in
/// manifest order from a single seeded stream.
pub fn init_params<T: Scalar>(config: &ArchConfig, seed: u64) -> Result<ModelParams<T>> {
    let manifest = config.manifest()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(manifest.len());
    for (name, shape) in manifest {
        let n: usize = shape.iter().product();
        let data = if name.ends_with(".bias") {
            vec![T::zero(); n]
        } else {
            // dense weights are [in, out]; conv weights are [out, in, k]
            let fan_in = if shape.len() == 3 { shape[1] * shape[2] } else { shape[0] };
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            (0..n).map(|_| T::of(normal.sample(&mut rng))).collect()
        };
        layers.push((name, Tensor::new(shape, data)?));
    }
    Ok(ModelParams {
        config: config.clone(),
        layers,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active; the mask is a pure function of `(seed, step)`.
    Train { seed: u64, step: u64 },
}

/// Graph handles for the outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `[B, n_classes]` posteriors.
    pub probs: Var,
    /// `[B]` per-sample Chernoff distance (`coffe` only).
    pub cd: Option<Var>,
}

/// Parameters recorded as graph leaves, in manifest order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn from_layers(config: ArchConfig, layers: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let manifest = config.manifest()?;
        if manifest.len() != layers.len() {
            return Err(dim_err!(
                "expected {} layers for {}, got {}",
                manifest.len(),
                config.arch,
                layers.len()
            ));
        }
        for ((name, shape), (lname, t)) in manifest.iter().zip(&layers) {
            if name != lname || shape.as_slice() != t.shape() {
                return Err(dim_err!(
                    "layer {lname} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                ));
            }
        }
        Ok(Self { config, layers })
    }

    pub fn layers(&self) -> &[(String, Tensor<T>)] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.layers.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.layers.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundParams {
        let vars = self
            .layers
            .iter()
            .map(|(_, t)| {
                let t = t.clone();
                if trainable {
                    g.param(t)
                } else {
                    g.constant(t)
                }
            })
            .collect();
        BoundParams { vars }
    }

    fn var(&self, bound: &BoundParams, name: &str) -> Var {
        let i = self
            .layers
            .iter()
            .position(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("layer {name} present by construction"));
        bound.vars[i]
    }

    fn conv_stack(&self, g: &mut Graph<T>, bound: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
        let (rows, dim) = match *g.value(x).shape() {
            [r, d] => (r, d),
            ref s => return Err(dim_err!("expected [B, dim] input, got {s:?}")),
        };
        let x = g.reshape(x, vec![rows, 1, dim])?;
        let w1 = self.var(bound, &format!("{prefix}conv1.weight"));
        let b1 = self.var(bound, &format!("{prefix}conv1.bias"));
        let h = g.conv1d(x, w1, b1)?;
        let h = g.relu(h)?;
        let h = g.maxpool1d(h)?;
        let w2 = self.var(bound, &format!("{prefix}conv2.weight"));
        let b2 = self.var(bound, &format!("{prefix}conv2.bias"));
        let h = g.conv1d(h, w2, b2)?;
        let h = g.relu(h)?;
        let h = g.maxpool1d(h)?;
        let width = g.value(h).len() / rows;
        g.reshape(h, vec![rows, width])
    }

    fn head(&self, g: &mut Graph<T>, bound: &BoundParams, x: Var, mode: Mode) -> Result<Var> {
        let h = g.matmul(x, self.var(bound, "fc1.weight"))?;
        let h = g.add_bias(h, self.var(bound, "fc1.bias"))?;
        let mut h = g.relu(h)?;
        if let Mode::Train { seed, step } = mode {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(step);
            h = g.dropout(h, self.config.dropout_rate, &mut rng)?;
        }
        let o = g.matmul(h, self.var(bound, "out.weight"))?;
        let o = g.add_bias(o, self.var(bound, "out.bias"))?;
        g.softmax(o)
    }

    fn check_input(&self, g: &Graph<T>, x: Var, dim: usize, which: &str) -> Result<()> {
        let s = g.value(x).shape();
        if s.len() != 2 || s[1] != dim {
            return Err(dim_err!("input {which} has shape {s:?}, model expects [B, {dim}]"));
        }
        Ok(())
    }

    /// Records a batched forward pass of `xa: [B, dim_a]` (and `xb: [B, dim_b]`
    /// for fusion architectures).
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        bound: &BoundParams,
        xa: Var,
        xb: Option<Var>,
        mode: Mode,
    ) -> Result<Forward> {
        let cfg = &self.config;
        self.check_input(g, xa, cfg.input_dim_a, "a")?;
        match (cfg.arch.is_fusion(), xb) {
            (true, None) => return Err(usage_err!("{} needs a second input", cfg.arch)),
            (false, Some(_)) => return Err(usage_err!("{} takes a single input", cfg.arch)),
            (true, Some(xb)) => {
                self.check_input(g, xb, cfg.input_dim_b.unwrap_or(0), "b")?;
                if g.value(xb).shape()[0] != g.value(xa).shape()[0] {
                    return Err(dim_err!("the two inputs have different batch sizes"));
                }
            }
            _ => {}
        }
        match cfg.arch {
            Arch::Fcn => Ok(Forward {
                probs: self.head(g, bound, xa, mode)?,
                cd: None,
            }),
            Arch::Cnn => {
                let f = self.conv_stack(g, bound, "", xa)?;
                Ok(Forward {
                    probs: self.head(g, bound, f, mode)?,
                    cd: None,
                })
            }
            Arch::Concat | Arch::Coffe => {
                let xb = xb.expect("checked above");
                let fa = self.conv_stack(g, bound, "a.", xa)?;
                let fb = self.conv_stack(g, bound, "b.", xb)?;
                let cd = if cfg.arch == Arch::Coffe {
                    Some(self.alignment(g, fa, fb)?)
                } else {
                    None
                };
                let joined = g.concat_cols(fa, fb)?;
                Ok(Forward {
                    probs: self.head(g, bound, joined, mode)?,
                    cd,
                })
            }
        }
    }

    /// Chernoff distance between softmax-normalized branch features; the
    /// shorter distribution is zero-padded when the views differ in width.
    fn alignment(&self, g: &mut Graph<T>, fa: Var, fb: Var) -> Result<Var> {
        let mut pa = g.softmax(fa)?;
        let mut pb = g.softmax(fb)?;
        let (wa, wb) = (g.value(pa).shape()[1], g.value(pb).shape()[1]);
        if wa < wb {
            pa = g.pad_cols(pa, wb)?;
        } else if wb < wa {
            pb = g.pad_cols(pb, wa)?;
        }
        g.chernoff(pa, pb, T::of(self.config.chernoff_s))
    }

    /// Eval-mode posteriors `[B, n_classes]` and, for `coffe`, per-sample CD.
    pub fn predict(&self, xa: &Tensor<T>, xb: Option<&Tensor<T>>) -> Result<(Tensor<T>, Option<Vec<T>>)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let va = g.constant(xa.clone());
        let vb = xb.map(|t| g.constant(t.clone()));
        let fwd = self.forward_graph(&mut g, &bound, va, vb, Mode::Eval)?;
        let cd = fwd.cd.map(|v| g.value(v).data().to_vec());
        Ok((g.value(fwd.probs).clone(), cd))
    }

    fn single(&self, x: &Tensor<T>, dim: usize) -> Result<Tensor<T>> {
        if x.len() != dim {
            return Err(dim_err!("input has {} values, model expects {dim}", x.len()));
        }
        x.reshape(vec![1, dim])
    }

    fn expect_arch(&self, allowed: &[Arch]) -> Result<()> {
        if allowed.contains(&self.config.arch) {
            Ok(())
        } else {
            Err(usage_err!("operation not defined for a {} model", self.config.arch))
        }
    }

    pub fn fcn_forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.expect_arch(&[Arch::Fcn])?;
        let (p, _) = self.predict(&self.single(x, self.config.input_dim_a)?, None)?;
        p.reshape(vec![self.config.n_classes])
    }

    pub fn cnn_forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.expect_arch(&[Arch::Cnn])?;
        let (p, _) = self.predict(&self.single(x, self.config.input_dim_a)?, None)?;
        p.reshape(vec![self.config.n_classes])
    }

    pub fn concat_forward(&self, xa: &Tensor<T>, xb: &Tensor<T>) -> Result<Tensor<T>> {
        self.expect_arch(&[Arch::Concat, Arch::Coffe])?;
        let a = self.single(xa, self.config.input_dim_a)?;
        let b = self.single(xb, self.config.input_dim_b.unwrap_or(0))?;
        let (p, _) = self.predict(&a, Some(&b))?;
        p.reshape(vec![self.config.n_classes])
    }

    pub fn coffe_forward(&self, xa: &Tensor<T>, xb: &Tensor<T>) -> Result<(Tensor<T>, T)> {
        self.expect_arch(&[Arch::Coffe])?;
        let a = self.single(xa, self.config.input_dim_a)?;
        let b = self.single(xb, self.config.input_dim_b.unwrap_or(0))?;
        let (p, cd) = self.predict(&a, Some(&b))?;
        let cd = cd.expect("coffe always yields a distance")[0];
        Ok((p.reshape(vec![self.config.n_classes])?, cd))
    }
}
