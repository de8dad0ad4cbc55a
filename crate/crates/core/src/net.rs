//! Small encoder with two structurally identical, unshared decoder heads.
//!
//! ```text
//! image ─ stem(3x3) ─ down1(3x3/2) ─ … ─ downD(3x3/2)
//!            │            │                  │
//!            └── skip ────┴── skip ──┐       │
//!                                    up(x2) + conv 3x3, ReLU, + skip  (per stage)
//!                                    out(1x1) → K channels
//! ```
//!
//! The semantic head's output is pre-softmax logits; the contrastive
//! head's output is an unconstrained K-dimensional feature.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Known class count; also the width of both decoder outputs.
    pub classes: usize,
    pub input_channels: usize,
    pub base_width: usize,
    /// Number of stride-2 encoder stages.
    pub depth: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            input_channels: 3,
            base_width: 8,
            depth: 2,
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.depth < 1 || self.base_width < 1 || self.input_channels < 1 {
            return Err(Error::Config(format!("degenerate model config {self:?}")));
        }
        Ok(())
    }

    /// Spatial extents must be divisible by this.
    pub fn stride(&self) -> usize {
        1 << self.depth
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// `(name, [kh, kw, cin, cout])` for every conv layer, in parameter order.
    fn layers(&self) -> Vec<(String, [usize; 4])> {
        let mut out = vec![(
            "enc.stem".to_string(),
            [3, 3, self.input_channels, self.width(0)],
        )];
        for i in 1..=self.depth {
            out.push((
                format!("enc.down{i}"),
                [3, 3, self.width(i - 1), self.width(i)],
            ));
        }
        for head in Head::ALL {
            for i in (1..=self.depth).rev() {
                out.push((
                    format!("dec.{}.up{i}", head.tag()),
                    [3, 3, self.width(i), self.width(i - 1)],
                ));
            }
            out.push((
                format!("dec.{}.out", head.tag()),
                [1, 1, self.width(0), self.classes],
            ));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>() + s[3])
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Head {
    Semantic,
    Contrastive,
}

impl Head {
    pub const ALL: [Head; 2] = [Head::Semantic, Head::Contrastive];

    fn tag(self) -> &'static str {
        match self {
            Head::Semantic => "sem",
            Head::Contrastive => "cont",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

impl<T> Param<T> {
    /// Whether this parameter is used when only `heads` are evaluated.
    pub fn used_by(&self, contrastive: bool) -> bool {
        contrastive || !self.name.starts_with("dec.cont.")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: Vec<Param<T>>,
}

impl<T: Element> Model<T> {
    /// Uniform fan-in initialisation from `config.seed`; biases start at zero.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::new();
        for (name, shape) in config.layers() {
            let fan_in = (shape[0] * shape[1] * shape[2]) as f64;
            let gain = if name.ends_with(".out") { 3.0 } else { 6.0 };
            let bound = (gain / fan_in).sqrt();
            let n: usize = shape.iter().product();
            let w: Vec<T> = (0..n)
                .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
                .collect();
            params.push(Param {
                name: format!("{name}.w"),
                value: Tensor::new(&shape, w)?,
            });
            params.push(Param {
                name: format!("{name}.b"),
                value: Tensor::zeros(&[shape[3]]),
            });
        }
        Ok(Self { config, params })
    }

    /// Rebuilds a model from a named tensor table, checking every shape.
    pub fn from_params(config: ModelConfig, params: Vec<Param<T>>) -> Result<Self> {
        let reference = Self::new(config)?;
        if reference.params.len() != params.len() {
            return Err(Error::Data(format!(
                "expected {} parameter tensors, got {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (want, got) in reference.params.iter().zip(&params) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                return Err(Error::Data(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    got.name,
                    got.value.shape(),
                    want.name,
                    want.value.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
    }

    /// Registers parameters on `tape`. Contrastive-head parameters are only
    /// registered when `contrastive` is set.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, contrastive: bool) -> Bound<'t, T> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                p.used_by(contrastive)
                    .then(|| tape.param(p.name.clone(), p.value.clone()))
            })
            .collect();
        Bound {
            config: self.config,
            names: self.params.iter().map(|p| p.name.clone()).collect(),
            vars,
            contrastive,
        }
    }

    /// Like [`bind`](Self::bind), with `var` standing in for parameter
    /// `name`. Used to differentiate with respect to a single parameter.
    pub fn bind_replacing<'t>(
        &self,
        tape: &'t Tape<T>,
        contrastive: bool,
        name: &str,
        var: Var<'t, T>,
    ) -> Result<Bound<'t, T>> {
        let i = self
            .params
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))?;
        if var.shape() != self.params[i].value.shape() {
            return Err(Error::Shape(format!(
                "{name}: replacement of shape {:?} for {:?}",
                var.shape(),
                self.params[i].value.shape()
            )));
        }
        if !self.params[i].used_by(contrastive) {
            return Err(Error::Contract(format!(
                "parameter {name} is not used with contrastive={contrastive}"
            )));
        }
        let vars = self
            .params
            .iter()
            .enumerate()
            .map(|(j, p)| match j == i {
                true => Some(var),
                false => p
                    .used_by(contrastive)
                    .then(|| tape.param(p.name.clone(), p.value.clone())),
            })
            .collect();
        Ok(Bound {
            config: self.config,
            names: self.params.iter().map(|p| p.name.clone()).collect(),
            vars,
            contrastive,
        })
    }

    /// Registers every parameter as a constant, for inference without
    /// gradient bookkeeping.
    fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound {
            config: self.config,
            names: self.params.iter().map(|p| p.name.clone()).collect(),
            vars: self
                .params
                .iter()
                .map(|p| Some(tape.constant(p.value.clone())))
                .collect(),
            contrastive: true,
        }
    }

    /// Inference on `[B, H, W, C]` images; returns `(semantic, contrastive)`
    /// feature maps of shape `[B, H, W, K]`.
    pub fn infer(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let tape = Tape::new();
        let bound = self.bind_frozen(&tape);
        let x = tape.constant(images.clone());
        let out = bound.forward(x)?;
        let sem = out.semantic.value().clone();
        let cont = out
            .contrastive
            .expect("frozen bind has both heads")
            .value()
            .clone();
        Ok((sem, cont))
    }
}

/// Model parameters registered on a tape.
pub struct Bound<'t, T: Element> {
    config: ModelConfig,
    names: Vec<String>,
    vars: Vec<Option<Var<'t, T>>>,
    contrastive: bool,
}

pub struct Forward<'t, T: Element> {
    /// Pre-softmax logits `[B, H, W, K]`.
    pub semantic: Var<'t, T>,
    /// Contrastive features `[B, H, W, K]`, when that head was bound.
    pub contrastive: Option<Var<'t, T>>,
}

impl<'t, T: Element> Bound<'t, T> {
    fn get(&self, name: &str) -> Var<'t, T> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .expect("known layer name");
        self.vars[i].expect("layer bound")
    }

    fn conv(&self, x: Var<'t, T>, layer: &str, stride: usize) -> Result<Var<'t, T>> {
        let w = self.get(&format!("{layer}.w"));
        let b = self.get(&format!("{layer}.b"));
        let pad = w.value().shape()[0] / 2;
        x.conv2d(w, stride, pad)?.add_bias(b)
    }

    fn decode(&self, head: Head, skips: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let depth = self.config.depth;
        let mut x = skips[depth];
        for i in (1..=depth).rev() {
            let up = x.upsample2x()?;
            x = self
                .conv(up, &format!("dec.{}.up{i}", head.tag()), 1)?
                .relu()
                .add(skips[i - 1])?;
        }
        self.conv(x, &format!("dec.{}.out", head.tag()), 1)
    }

    pub fn forward(&self, images: Var<'t, T>) -> Result<Forward<'t, T>> {
        let s = images.shape();
        let cfg = &self.config;
        if s.len() != 4 || s[3] != cfg.input_channels {
            return Err(Error::Shape(format!(
                "expected [B, H, W, {}] images, got {s:?}",
                cfg.input_channels
            )));
        }
        if s[1] % cfg.stride() != 0 || s[2] % cfg.stride() != 0 {
            return Err(Error::Config(format!(
                "image size {}x{} not divisible by 2^{}",
                s[1], s[2], cfg.depth
            )));
        }
        let mut skips = vec![self.conv(images, "enc.stem", 1)?.relu()];
        for i in 1..=cfg.depth {
            let prev = *skips.last().expect("stem");
            skips.push(self.conv(prev, &format!("enc.down{i}"), 2)?.relu());
        }
        let semantic = self.decode(Head::Semantic, &skips)?;
        let contrastive = if self.contrastive {
            Some(self.decode(Head::Contrastive, &skips)?)
        } else {
            None
        };
        Ok(Forward {
            semantic,
            contrastive,
        })
    }

    /// Gradients in parameter order; `None` for unbound parameters.
    pub fn grads(&self) -> Vec<Option<Tensor<T>>> {
        self.vars.iter().map(|v| v.and_then(|v| v.grad())).collect()
    }
}
