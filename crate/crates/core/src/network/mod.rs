//! U-shaped encoder-decoder with skip connections and projection heads.
//!
//! With `depth = D` the encoder has `D + 1` convolution blocks separated by
//! `D` max-pooling stages; the last encoder block is the bottleneck. Decoder
//! block `b` (`1..=D`) upsamples by two (nearest neighbour followed by a 3x3
//! convolution), concatenates the encoder map of the same resolution and
//! applies one more convolution, giving an output of extent `H / 2^(D-b)`.
//! A 1x1 convolution and a channel softmax produce the class probabilities.

mod checkpoint;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, invalid, Result};
use crate::infomax::ClusterAssignment;
use crate::ndcore::{Conv2dOpts, Tape, Tensor, Var};
use crate::rng::Rng;

pub use checkpoint::{read_arrays, write_arrays, ArrayManifest, ManifestEntry, CHECKPOINT_VERSION};

/// Location of an intermediate embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Site {
    /// Output of the last encoder block.
    Bottleneck,
    /// Output of decoder block `b`, counted from the bottleneck (1-based).
    Decoder(usize),
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Site::Bottleneck => f.write_str("bottleneck"),
            Site::Decoder(b) => write!(f, "decoder{b}"),
        }
    }
}

impl FromStr for Site {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "bottleneck" {
            return Ok(Site::Bottleneck);
        }
        s.strip_prefix("decoder")
            .and_then(|b| b.parse().ok())
            .filter(|&b| b > 0)
            .map(Site::Decoder)
            .ok_or_else(|| invalid(format!("unknown site `{s}` (expected `bottleneck` or `decoderN`)")))
    }
}

impl TryFrom<String> for Site {
    type Error = crate::Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Site> for String {
    fn from(s: Site) -> String {
        s.to_string()
    }
}

/// Nonlinearity after every convolution but the output layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    LeakyRelu,
    /// Smooth everywhere; used where finite differences must be exact.
    Tanh,
}

/// Downsampling between encoder levels and the pooling of global heads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Max,
    Average,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegNetConfig {
    /// Number of downsampling stages.
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    /// Segmentation classes, background included.
    pub classes: usize,
    /// Clusters per projection head.
    pub clusters: usize,
    /// Projection heads per regularized site.
    pub heads: usize,
    /// Sites with global (pool + linear) heads.
    pub global_sites: Vec<Site>,
    /// Sites with local (1x1 convolution) heads. `None` selects the two
    /// highest-resolution decoder blocks.
    pub local_sites: Option<Vec<Site>>,
    pub activation: Activation,
    pub pooling: Pooling,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 8,
            in_channels: 1,
            classes: 3,
            clusters: 10,
            heads: 5,
            global_sites: vec![Site::Bottleneck],
            local_sites: None,
            activation: Activation::LeakyRelu,
            pooling: Pooling::Max,
        }
    }
}

impl SegNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(config_err("network.depth", "must be at least 2"));
        }
        if self.classes < 2 {
            return Err(config_err("network.classes", "must be at least 2"));
        }
        if self.clusters < 2 {
            return Err(config_err("network.clusters", "must be at least 2"));
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return Err(config_err("network.base_channels", "channel counts must be positive"));
        }
        if self.heads == 0 {
            return Err(config_err("network.heads", "must be positive"));
        }
        for site in self.global_sites.iter().chain(&self.local_sites()) {
            if let Site::Decoder(b) = site {
                if *b > self.depth {
                    return Err(config_err("network.sites", format!("{site} exceeds depth {}", self.depth)));
                }
            }
        }
        Ok(())
    }

    pub fn local_sites(&self) -> Vec<Site> {
        match &self.local_sites {
            Some(s) => s.clone(),
            None => vec![Site::Decoder(self.depth - 1), Site::Decoder(self.depth)],
        }
    }

    /// Required divisor of the input extent.
    pub fn extent_divisor(&self) -> usize {
        1 << self.depth
    }

    fn enc_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn site_channels(&self, site: Site) -> usize {
        match site {
            Site::Bottleneck => self.enc_channels(self.depth),
            Site::Decoder(b) => self.enc_channels(self.depth - b),
        }
    }

    /// Ratio between the input extent and the site's spatial extent.
    pub fn site_scale(&self, site: Site) -> usize {
        match site {
            Site::Bottleneck => 1 << self.depth,
            Site::Decoder(b) => 1 << (self.depth - b),
        }
    }

    pub fn heads_for(&self) -> Vec<ProjectorHead> {
        let mut out = Vec::new();
        for &site in &self.global_sites {
            out.extend((0..self.heads).map(|index| ProjectorHead { site, kind: HeadKind::Global, index, pooling: self.pooling }));
        }
        for site in self.local_sites() {
            out.extend((0..self.heads).map(|index| ProjectorHead { site, kind: HeadKind::Local, index, pooling: self.pooling }));
        }
        out
    }

    /// Every parameter name with its shape, in a fixed order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut specs = Vec::new();
        let mut conv = |name: String, cout: usize, cin: usize, k: usize| {
            specs.push((format!("{name}.w"), vec![cout, cin, k, k]));
            specs.push((format!("{name}.b"), vec![cout]));
        };
        for level in 0..=self.depth {
            let cin = if level == 0 { self.in_channels } else { self.enc_channels(level - 1) };
            let c = self.enc_channels(level);
            conv(format!("enc{level}.conv1"), c, cin, 3);
            conv(format!("enc{level}.conv2"), c, c, 3);
        }
        for b in 1..=self.depth {
            let cin = self.enc_channels(self.depth - b + 1);
            let c = self.enc_channels(self.depth - b);
            conv(format!("dec{b}.up"), c, cin, 3);
            conv(format!("dec{b}.conv"), c, 2 * c, 3);
        }
        conv("out".to_string(), self.classes, self.base_channels, 1);
        for head in self.heads_for() {
            let cin = self.site_channels(head.site);
            match head.kind {
                HeadKind::Global => {
                    specs.push((format!("{}.w", head.prefix()), vec![cin, self.clusters]));
                    specs.push((format!("{}.b", head.prefix()), vec![self.clusters]));
                }
                HeadKind::Local => {
                    specs.push((format!("{}.w", head.prefix()), vec![self.clusters, cin, 1, 1]));
                    specs.push((format!("{}.b", head.prefix()), vec![self.clusters]));
                }
            }
        }
        specs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    /// Global max (or average) pooling, linear layer, softmax: `[N,C,h,w] -> [N,K]`.
    Global,
    /// 1x1 convolution and channel softmax: `[N,C,h,w] -> [N,K,h,w]`.
    Local,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProjectorHead {
    pub site: Site,
    pub kind: HeadKind,
    pub index: usize,
    /// Pooling of global heads; ignored by local ones.
    pub pooling: Pooling,
}

impl ProjectorHead {
    fn prefix(&self) -> String {
        let kind = match self.kind {
            HeadKind::Global => "global",
            HeadKind::Local => "local",
        };
        format!("head.{kind}.{}.{}", self.site, self.index)
    }
}

/// Named weights of the network and its projection heads.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    tensors: BTreeMap<String, Tensor>,
}

/// Parameters recorded on a tape.
pub struct BoundParams<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> BoundParams<'t> {
    fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| invalid(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'t>)> {
        self.vars.iter()
    }
}

impl NetworkParams {
    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }

    /// Records every tensor as a parameter (`trainable`) or a constant.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Result<BoundParams<'t>> {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) }?;
                Ok((k.clone(), v))
            })
            .collect::<Result<_>>()?;
        Ok(BoundParams { vars })
    }

    /// Pairs already recorded vars with the parameter names, in [`Self::iter`] order.
    pub fn bind_vars<'t>(&self, vars: &[Var<'t>]) -> Result<BoundParams<'t>> {
        if vars.len() != self.tensors.len() {
            return Err(invalid(format!("{} vars for {} parameters", vars.len(), self.tensors.len())));
        }
        let vars = self.tensors.keys().cloned().zip(vars.iter().copied()).collect();
        Ok(BoundParams { vars })
    }

    /// Checks that names and shapes match `cfg`.
    pub fn check_against(&self, cfg: &SegNetConfig) -> Result<()> {
        let specs = cfg.param_specs();
        if specs.len() != self.tensors.len() {
            return Err(invalid(format!(
                "parameter count {} does not match configuration ({})",
                self.tensors.len(),
                specs.len()
            )));
        }
        for (name, shape) in specs {
            match self.tensors.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(invalid(format!("parameter `{name}` has shape {:?}, expected {shape:?}", t.shape())))
                }
                None => return Err(invalid(format!("missing parameter `{name}`"))),
            }
        }
        Ok(())
    }
}

/// Zero-mean normal weights with variance `1/fan_in`, zero biases.
pub fn init_params(rng: &mut Rng, cfg: &SegNetConfig) -> Result<NetworkParams> {
    cfg.validate()?;
    let mut tensors = BTreeMap::new();
    for (name, shape) in cfg.param_specs() {
        let tensor = if name.ends_with(".b") {
            Tensor::zeros(&shape)
        } else {
            // conv weights are [cout, cin, k, k]; linear weights are [cin, K]
            let fan_in = if shape.len() == 4 { shape[1] * shape[2] * shape[3] } else { shape[0] };
            let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
            let n: usize = shape.iter().product();
            Tensor::new(&shape, (0..n).map(|_| normal.sample(rng)).collect())?
        };
        tensors.insert(name, tensor);
    }
    Ok(NetworkParams { tensors })
}

/// Output of a forward pass.
pub struct ForwardOutput<'t> {
    /// Softmax over classes, `[N,C,H,W]`.
    pub probs: Var<'t>,
    /// Bottleneck and every decoder block output.
    pub embeddings: BTreeMap<Site, Var<'t>>,
}

fn conv_block<'t>(p: &BoundParams<'t>, cfg: &SegNetConfig, name: &str, x: &Var<'t>, k: usize) -> Result<Var<'t>> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    let z = x.conv2d(&w, Some(&b), Conv2dOpts::same(k))?;
    match cfg.activation {
        Activation::LeakyRelu => z.leaky_relu(),
        Activation::Tanh => z.tanh(),
    }
}

fn downsample<'t>(x: &Var<'t>, pooling: Pooling) -> Result<Var<'t>> {
    match pooling {
        Pooling::Max => x.max_pool2d(2),
        Pooling::Average => {
            let s = x.shape();
            x.reshape(&[s[0], s[1], s[2] / 2, 2, s[3] / 2, 2])?.mean_axes(&[3, 5])
        }
    }
}

pub fn forward<'t>(params: &BoundParams<'t>, cfg: &SegNetConfig, x: &Var<'t>) -> Result<ForwardOutput<'t>> {
    let s = x.shape();
    let div = cfg.extent_divisor();
    if s.len() != 4 || s[1] != cfg.in_channels {
        return Err(invalid(format!("network input must be [N,{},H,W], got {s:?}", cfg.in_channels)));
    }
    if s[2] % div != 0 || s[3] % div != 0 || s[2] == 0 || s[3] == 0 {
        return Err(invalid(format!("input extent {}x{} not divisible by {div}", s[2], s[3])));
    }

    let mut skips = Vec::with_capacity(cfg.depth + 1);
    let mut h = *x;
    for level in 0..=cfg.depth {
        if level > 0 {
            h = downsample(&h, cfg.pooling)?;
        }
        h = conv_block(params, cfg, &format!("enc{level}.conv1"), &h, 3)?;
        h = conv_block(params, cfg, &format!("enc{level}.conv2"), &h, 3)?;
        skips.push(h);
    }
    let mut embeddings = BTreeMap::new();
    embeddings.insert(Site::Bottleneck, h);
    for b in 1..=cfg.depth {
        let up = conv_block(params, cfg, &format!("dec{b}.up"), &h.upsample_nearest(2)?, 3)?;
        let merged = Var::concat(&[skips[cfg.depth - b], up], 1)?;
        h = conv_block(params, cfg, &format!("dec{b}.conv"), &merged, 3)?;
        embeddings.insert(Site::Decoder(b), h);
    }
    let logits = h.conv2d(&params.get("out.w")?, Some(&params.get("out.b")?), Conv2dOpts::same(1))?;
    Ok(ForwardOutput {
        probs: logits.softmax(1)?,
        embeddings,
    })
}

/// Maps an embedding taken at `site` to cluster probabilities.
pub fn project<'t>(
    head: &ProjectorHead,
    params: &BoundParams<'t>,
    site: Site,
    emb: &Var<'t>,
) -> Result<ClusterAssignment<'t>> {
    if head.site != site {
        return Err(invalid(format!("head for {} applied to embedding from {site}", head.site)));
    }
    let w = params.get(&format!("{}.w", head.prefix()))?;
    let b = params.get(&format!("{}.b", head.prefix()))?;
    let probs = match head.kind {
        HeadKind::Global => {
            let pooled = match head.pooling {
                Pooling::Max => emb.global_max_pool()?,
                Pooling::Average => emb.mean_axes(&[2, 3])?,
            };
            pooled.matmul(&w)?.add(&b)?.softmax(1)?
        }
        HeadKind::Local => emb.conv2d(&w, Some(&b), Conv2dOpts::same(1))?.softmax(1)?,
    };
    Ok(ClusterAssignment::trusted(probs))
}

/// `teacher <- decay * teacher + (1 - decay) * student`, elementwise.
pub fn ema_update(teacher: &mut NetworkParams, student: &NetworkParams, decay: f64) -> Result<()> {
    if !(0.0..1.0).contains(&decay) {
        return Err(invalid(format!("EMA decay {decay} outside [0, 1)")));
    }
    if teacher.tensors.len() != student.tensors.len() {
        return Err(invalid("teacher and student have different parameter sets"));
    }
    for (name, t) in teacher.tensors.iter_mut() {
        let s = student
            .tensors
            .get(name)
            .ok_or_else(|| invalid(format!("student lacks `{name}`")))?;
        if s.shape() != t.shape() {
            return Err(crate::Error::Shape {
                op: "ema_update",
                lhs: t.shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = decay * *tv + (1.0 - decay) * sv;
        }
    }
    Ok(())
}
