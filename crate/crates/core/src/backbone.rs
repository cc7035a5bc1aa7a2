//! A miniature hybrid convolution-transformer embedding network.
//!
//! The adaptation surface mirrors the unit layout LN / ST / S0 / S1 / S2:
//! a strided convolutional stem, two convolutional stages, one transformer
//! stage, and a pooled linear embedding head. Every normalization is
//! LayerNorm, and every LayerNorm affine parameter carries a ".ln" segment
//! in its name so the LN partition is recoverable from names alone.

use std::collections::BTreeMap;
use std::error::Error as StdError;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::container::{self, ContainerError, Record, TAG_ADAPTED, TAG_FROZEN, TAG_LN};
use crate::tensor::{Graph, Tensor, TensorError, TensorId};

pub const LN_EPS: f32 = 1e-5;

/// Adaptable units of the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Unit {
    Ln,
    St,
    S0,
    S1,
    S2,
}

impl Unit {
    const ALL: [Unit; 5] = [Unit::Ln, Unit::St, Unit::S0, Unit::S1, Unit::S2];

    fn token(self) -> &'static str {
        match self {
            Unit::Ln => "LN",
            Unit::St => "ST",
            Unit::S0 => "S0",
            Unit::S1 => "S1",
            Unit::S2 => "S2",
        }
    }

    fn bit(self) -> u8 {
        match self {
            Unit::Ln => 1,
            Unit::St => 2,
            Unit::S0 => 4,
            Unit::S1 => 8,
            Unit::S2 => 16,
        }
    }
}

/// A subset of {LN, ST, S0, S1, S2} selecting which units are unfrozen.
/// Serializes to the comma-joined canonical form, e.g. `LN,ST,S0`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct LayerSet(u8);

impl LayerSet {
    pub const EMPTY: LayerSet = LayerSet(0);

    pub fn of(units: &[Unit]) -> LayerSet {
        let mut mask = 0;
        for u in units {
            mask |= u.bit();
        }
        LayerSet(mask)
    }

    pub fn contains(self, unit: Unit) -> bool {
        self.0 & unit.bit() != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_subset_of(self, other: LayerSet) -> bool {
        self.0 & other.0 == self.0
    }

    /// The sixteen adapted-layer configurations of the ablation grid.
    pub fn ablation_rows() -> [LayerSet; 16] {
        use Unit::*;
        [
            LayerSet::of(&[Ln]),
            LayerSet::of(&[St]),
            LayerSet::of(&[Ln, St]),
            LayerSet::of(&[Ln, St, S0]),
            LayerSet::of(&[Ln, St, S0, S1]),
            LayerSet::of(&[Ln, St, S0, S1, S2]),
            LayerSet::of(&[S0]),
            LayerSet::of(&[S1]),
            LayerSet::of(&[S2]),
            LayerSet::of(&[Ln, S0]),
            LayerSet::of(&[Ln, S1]),
            LayerSet::of(&[Ln, S2]),
            LayerSet::of(&[S1, S2]),
            LayerSet::of(&[S0, S1, S2]),
            LayerSet::of(&[St, S0, S1, S2]),
            LayerSet::of(&[Ln, S0, S1, S2]),
        ]
    }
}

impl fmt::Display for LayerSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for u in Unit::ALL {
            if self.contains(u) {
                if !first {
                    write!(f, ",")?;
                }
                write!(f, "{}", u.token())?;
                first = false;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSetParseError {
    pub token: String,
}

impl fmt::Display for LayerSetParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "unknown layer-set token {:?} (expected a comma-joined subset of LN,ST,S0,S1,S2)",
            self.token
        )
    }
}

impl StdError for LayerSetParseError {}

impl FromStr for LayerSet {
    type Err = LayerSetParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut set = LayerSet::EMPTY;
        if s.trim().is_empty() {
            return Ok(set);
        }
        for raw in s.split(',') {
            let tok = raw.trim();
            let unit = Unit::ALL
                .iter()
                .find(|u| u.token() == tok)
                .ok_or_else(|| LayerSetParseError { token: tok.to_string() })?;
            set.0 |= unit.bit();
        }
        Ok(set)
    }
}

/// Partition tag of a parameter; the three tags are disjoint and exhaustive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Partition {
    Ln,
    Adapted,
    Frozen,
}

impl Partition {
    pub fn tag_byte(self) -> u8 {
        match self {
            Partition::Ln => TAG_LN,
            Partition::Adapted => TAG_ADAPTED,
            Partition::Frozen => TAG_FROZEN,
        }
    }

    pub fn from_tag_byte(tag: u8) -> Option<Partition> {
        match tag {
            TAG_LN => Some(Partition::Ln),
            TAG_ADAPTED => Some(Partition::Adapted),
            TAG_FROZEN => Some(Partition::Frozen),
            _ => None,
        }
    }
}

/// A named tensor with its partition tag.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub partition: Partition,
}

/// Structural description of the backbone. Parameter inventory and
/// initialization are pure functions of this struct.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub input_channels: usize,
    pub input_size: usize,
    pub stem_channels: usize,
    pub stage_channels: [usize; 3],
    pub stage_depths: [usize; 3],
    pub s2_heads: usize,
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_channels: 3,
            input_size: 32,
            stem_channels: 8,
            stage_channels: [8, 16, 32],
            stage_depths: [1, 1, 2],
            s2_heads: 4,
            embed_dim: 64,
            seed: 42,
        }
    }
}

#[derive(Debug)]
pub enum BackboneError {
    InvalidConfig(String),
    Tensor(TensorError),
}

impl fmt::Display for BackboneError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackboneError::InvalidConfig(msg) => write!(f, "invalid backbone config: {msg}"),
            BackboneError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl StdError for BackboneError {}

impl From<TensorError> for BackboneError {
    fn from(e: TensorError) -> Self {
        BackboneError::Tensor(e)
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), BackboneError> {
        let err = |m: String| Err(BackboneError::InvalidConfig(m));
        if self.input_channels == 0 {
            return err("input_channels must be positive".into());
        }
        if self.input_size < 8 || self.input_size % 8 != 0 {
            return err(format!(
                "input_size must be a positive multiple of 8 (three stride-2 reductions), got {}",
                self.input_size
            ));
        }
        if self.stem_channels == 0 || self.stage_channels.iter().any(|&c| c == 0) {
            return err("stem and stage channel counts must be positive".into());
        }
        if self.embed_dim == 0 {
            return err("embed_dim must be positive".into());
        }
        if self.s2_heads == 0 || self.stage_channels[2] % self.s2_heads != 0 {
            return err(format!(
                "s2 channels {} must be divisible by s2_heads {}",
                self.stage_channels[2], self.s2_heads
            ));
        }
        Ok(())
    }
}

/// Hierarchically named parameter shapes, in forward order. Shared between
/// the builder and checkpoint validation.
fn param_specs(cfg: &BackboneConfig) -> Vec<(String, Vec<usize>)> {
    fn conv_block_specs(specs: &mut Vec<(String, Vec<usize>)>, prefix: &str, c: usize) {
        specs.push((format!("{prefix}.dw.weight"), vec![c, 1, 3, 3]));
        specs.push((format!("{prefix}.dw.bias"), vec![c]));
        specs.push((format!("{prefix}.ln.gamma"), vec![c]));
        specs.push((format!("{prefix}.ln.beta"), vec![c]));
        specs.push((format!("{prefix}.pw1.weight"), vec![2 * c, c]));
        specs.push((format!("{prefix}.pw1.bias"), vec![2 * c]));
        specs.push((format!("{prefix}.pw2.weight"), vec![c, 2 * c]));
        specs.push((format!("{prefix}.pw2.bias"), vec![c]));
    }

    let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
    let stem = cfg.stem_channels;
    specs.push(("stem.conv.weight".into(), vec![stem, cfg.input_channels, 3, 3]));
    specs.push(("stem.conv.bias".into(), vec![stem]));
    specs.push(("stem.ln.gamma".into(), vec![stem]));
    specs.push(("stem.ln.beta".into(), vec![stem]));

    // S0 runs at stem resolution; a 1x1 projection enters it only when the
    // channel count changes.
    let s0 = cfg.stage_channels[0];
    if s0 != stem {
        specs.push(("s0.down.ln.gamma".into(), vec![stem]));
        specs.push(("s0.down.ln.beta".into(), vec![stem]));
        specs.push(("s0.down.conv.weight".into(), vec![s0, stem, 1, 1]));
        specs.push(("s0.down.conv.bias".into(), vec![s0]));
    }
    for j in 0..cfg.stage_depths[0] {
        conv_block_specs(&mut specs, &format!("s0.block{j}"), s0);
    }

    let s1 = cfg.stage_channels[1];
    specs.push(("s1.down.ln.gamma".into(), vec![s0]));
    specs.push(("s1.down.ln.beta".into(), vec![s0]));
    specs.push(("s1.down.conv.weight".into(), vec![s1, s0, 2, 2]));
    specs.push(("s1.down.conv.bias".into(), vec![s1]));
    for j in 0..cfg.stage_depths[1] {
        conv_block_specs(&mut specs, &format!("s1.block{j}"), s1);
    }

    let d = cfg.stage_channels[2];
    specs.push(("s2.down.ln.gamma".into(), vec![s1]));
    specs.push(("s2.down.ln.beta".into(), vec![s1]));
    specs.push(("s2.down.conv.weight".into(), vec![d, s1, 2, 2]));
    specs.push(("s2.down.conv.bias".into(), vec![d]));
    for j in 0..cfg.stage_depths[2] {
        let p = format!("s2.block{j}");
        specs.push((format!("{p}.ln1.gamma"), vec![d]));
        specs.push((format!("{p}.ln1.beta"), vec![d]));
        specs.push((format!("{p}.attn.wq.weight"), vec![d, d]));
        specs.push((format!("{p}.attn.wk.weight"), vec![d, d]));
        specs.push((format!("{p}.attn.wv.weight"), vec![d, d]));
        specs.push((format!("{p}.attn.wo.weight"), vec![d, d]));
        specs.push((format!("{p}.ln2.gamma"), vec![d]));
        specs.push((format!("{p}.ln2.beta"), vec![d]));
        specs.push((format!("{p}.mlp1.weight"), vec![2 * d, d]));
        specs.push((format!("{p}.mlp1.bias"), vec![2 * d]));
        specs.push((format!("{p}.mlp2.weight"), vec![d, 2 * d]));
        specs.push((format!("{p}.mlp2.bias"), vec![d]));
    }

    specs.push(("head.ln.gamma".into(), vec![d]));
    specs.push(("head.ln.beta".into(), vec![d]));
    specs.push(("head.linear.weight".into(), vec![cfg.embed_dim, d]));
    specs.push(("head.linear.bias".into(), vec![cfg.embed_dim]));
    specs
}

/// Stable per-parameter stream seed derived from the model seed and the
/// parameter name (FNV-1a over the name, mixed with the seed).
fn param_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn init_parameter(name: &str, dims: &[usize], seed: u64) -> Tensor {
    let numel: usize = dims.iter().product();
    if name.ends_with(".gamma") {
        return Tensor::ones(dims);
    }
    if name.ends_with(".beta") || name.ends_with(".bias") {
        return Tensor::zeros(dims);
    }
    // Kaiming-uniform fan-in for weights: U(-b, b) with b = sqrt(6 / fan_in).
    let fan_in: usize = dims[1..].iter().product();
    let bound = (6.0 / fan_in as f32).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(param_seed(seed, name));
    let data: Vec<f32> = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(dims.to_vec(), data).expect("spec dims are valid")
}

/// How parameters are leased into a graph for a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainability {
    /// requires_grad follows each parameter's partition tag.
    FromPartition,
    /// Every parameter is trainable (pretraining).
    AllTrainable,
    /// No parameter is trainable (teacher or evaluation forwards).
    Frozen,
}

/// The embedding network: config, named parameters, fixed topology.
#[derive(Clone, Debug)]
pub struct Model {
    config: BackboneConfig,
    parameters: Vec<Parameter>,
    index: BTreeMap<String, usize>,
    partition: Option<LayerSet>,
}

/// Construct the backbone with deterministic initialization from
/// `config.seed`. All parameters start FROZEN and unpartitioned.
pub fn build_backbone(config: &BackboneConfig) -> Result<Model, BackboneError> {
    config.validate()?;
    let mut parameters = Vec::new();
    let mut index = BTreeMap::new();
    for (name, dims) in param_specs(config) {
        let value = init_parameter(&name, &dims, config.seed);
        index.insert(name.clone(), parameters.len());
        parameters.push(Parameter { name, value, partition: Partition::Frozen });
    }
    Ok(Model { config: config.clone(), parameters, index, partition: None })
}

/// Tag every parameter by the selective-unfreezing rule: LayerNorm affines
/// (".ln" names) belong to the LN partition when LN is selected, otherwise
/// they freeze; non-LN parameters under an selected unit prefix become
/// ADAPTED; everything else (embedding head included) stays FROZEN.
/// `requires_grad` is true exactly for non-FROZEN parameters.
pub fn partition_parameters(model: &mut Model, layer_set: LayerSet) {
    for p in &mut model.parameters {
        let tag = if p.name.contains(".ln") {
            if layer_set.contains(Unit::Ln) {
                Partition::Ln
            } else {
                Partition::Frozen
            }
        } else {
            let unit = if p.name.starts_with("stem.") {
                Some(Unit::St)
            } else if p.name.starts_with("s0.") {
                Some(Unit::S0)
            } else if p.name.starts_with("s1.") {
                Some(Unit::S1)
            } else if p.name.starts_with("s2.") {
                Some(Unit::S2)
            } else {
                None
            };
            match unit {
                Some(u) if layer_set.contains(u) => Partition::Adapted,
                _ => Partition::Frozen,
            }
        };
        p.partition = tag;
        p.value.set_requires_grad(tag != Partition::Frozen);
    }
    model.partition = Some(layer_set);
}

/// Deep-copy `model` with every parameter frozen; later student updates
/// never touch the copy.
pub fn clone_teacher(model: &Model) -> Model {
    let mut teacher = model.clone();
    for p in &mut teacher.parameters {
        p.partition = Partition::Frozen;
        p.value.set_requires_grad(false);
    }
    teacher.partition = Some(LayerSet::EMPTY);
    teacher
}

impl Model {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.parameters
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter] {
        &mut self.parameters
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.parameters[i])
    }

    pub fn parameter_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        let i = *self.index.get(name)?;
        Some(&mut self.parameters[i])
    }

    /// The layer set applied by `partition_parameters`, if any.
    pub fn partition(&self) -> Option<LayerSet> {
        self.partition
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters.iter().map(|p| p.value.numel()).sum()
    }

    pub fn trainable_names(&self) -> Vec<&str> {
        self.parameters
            .iter()
            .filter(|p| p.partition != Partition::Frozen)
            .map(|p| p.name.as_str())
            .collect()
    }

    /// Lease all parameters into `g` as leaves, in declaration order.
    pub fn register_params(&self, g: &mut Graph, mode: Trainability) -> Vec<TensorId> {
        self.parameters
            .iter()
            .map(|p| {
                let trainable = match mode {
                    Trainability::FromPartition => p.partition != Partition::Frozen,
                    Trainability::AllTrainable => true,
                    Trainability::Frozen => false,
                };
                g.leaf(p.value.clone().with_requires_grad(trainable))
            })
            .collect()
    }

    fn h(&self, handles: &[TensorId], name: &str) -> TensorId {
        handles[*self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }

    fn ln_channels_last(
        &self,
        g: &mut Graph,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
    ) -> Result<TensorId, TensorError> {
        let t = g.permute(x, &[0, 2, 3, 1])?;
        let n = g.layer_norm(t, gamma, beta, LN_EPS)?;
        g.permute(n, &[0, 3, 1, 2])
    }

    fn conv_block(
        &self,
        g: &mut Graph,
        handles: &[TensorId],
        prefix: &str,
        x: TensorId,
    ) -> Result<TensorId, TensorError> {
        let dims = g.dims(x).to_vec();
        let (n, c, hh, ww) = (dims[0], dims[1], dims[2], dims[3]);
        let dw = g.conv2d(
            x,
            self.h(handles, &format!("{prefix}.dw.weight")),
            Some(self.h(handles, &format!("{prefix}.dw.bias"))),
            1,
            1,
            c,
        )?;
        let t = g.permute(dw, &[0, 2, 3, 1])?;
        let t = g.layer_norm(
            t,
            self.h(handles, &format!("{prefix}.ln.gamma")),
            self.h(handles, &format!("{prefix}.ln.beta")),
            LN_EPS,
        )?;
        let flat = g.reshape(t, &[n * hh * ww, c])?;
        let hid = g.linear(
            flat,
            self.h(handles, &format!("{prefix}.pw1.weight")),
            Some(self.h(handles, &format!("{prefix}.pw1.bias"))),
        )?;
        let hid = g.gelu(hid);
        let out = g.linear(
            hid,
            self.h(handles, &format!("{prefix}.pw2.weight")),
            Some(self.h(handles, &format!("{prefix}.pw2.bias"))),
        )?;
        let back = g.reshape(out, &[n, hh, ww, c])?;
        let back = g.permute(back, &[0, 3, 1, 2])?;
        g.add(x, back)
    }

    fn downsample(
        &self,
        g: &mut Graph,
        handles: &[TensorId],
        prefix: &str,
        x: TensorId,
        kernel: usize,
        stride: usize,
    ) -> Result<TensorId, TensorError> {
        let _ = kernel;
        let t = self.ln_channels_last(
            g,
            x,
            self.h(handles, &format!("{prefix}.ln.gamma")),
            self.h(handles, &format!("{prefix}.ln.beta")),
        )?;
        g.conv2d(
            t,
            self.h(handles, &format!("{prefix}.conv.weight")),
            Some(self.h(handles, &format!("{prefix}.conv.bias"))),
            stride,
            0,
            1,
        )
    }

    fn transformer_block(
        &self,
        g: &mut Graph,
        handles: &[TensorId],
        prefix: &str,
        x: TensorId,
    ) -> Result<TensorId, TensorError> {
        let dims = g.dims(x).to_vec();
        let (n, t, d) = (dims[0], dims[1], dims[2]);
        let ln1 = g.layer_norm(
            x,
            self.h(handles, &format!("{prefix}.ln1.gamma")),
            self.h(handles, &format!("{prefix}.ln1.beta")),
            LN_EPS,
        )?;
        let att = g.multihead_attention(
            ln1,
            self.h(handles, &format!("{prefix}.attn.wq.weight")),
            self.h(handles, &format!("{prefix}.attn.wk.weight")),
            self.h(handles, &format!("{prefix}.attn.wv.weight")),
            self.h(handles, &format!("{prefix}.attn.wo.weight")),
            self.config.s2_heads,
        )?;
        let x = g.add(x, att)?;
        let ln2 = g.layer_norm(
            x,
            self.h(handles, &format!("{prefix}.ln2.gamma")),
            self.h(handles, &format!("{prefix}.ln2.beta")),
            LN_EPS,
        )?;
        let flat = g.reshape(ln2, &[n * t, d])?;
        let hid = g.linear(
            flat,
            self.h(handles, &format!("{prefix}.mlp1.weight")),
            Some(self.h(handles, &format!("{prefix}.mlp1.bias"))),
        )?;
        let hid = g.gelu(hid);
        let out = g.linear(
            hid,
            self.h(handles, &format!("{prefix}.mlp2.weight")),
            Some(self.h(handles, &format!("{prefix}.mlp2.bias"))),
        )?;
        let back = g.reshape(out, &[n, t, d])?;
        g.add(x, back)
    }

    /// Raw (non-normalized) embeddings for a batch already leased via
    /// `register_params`. The operator sequence is identical for every
    /// partition; tags only change trainability flags.
    pub fn forward_embed_on(
        &self,
        g: &mut Graph,
        handles: &[TensorId],
        batch: TensorId,
    ) -> Result<TensorId, TensorError> {
        let dims = g.dims(batch).to_vec();
        let cfg = &self.config;
        if dims.len() != 4 || dims[1] != cfg.input_channels || dims[2] != cfg.input_size || dims[3] != cfg.input_size
        {
            return Err(TensorError::Shape {
                op: "forward_embed",
                detail: format!(
                    "batch dims {dims:?}, expected [N, {}, {}, {}]",
                    cfg.input_channels, cfg.input_size, cfg.input_size
                ),
            });
        }
        let n = dims[0];

        let mut x = g.conv2d(
            batch,
            self.h(handles, "stem.conv.weight"),
            Some(self.h(handles, "stem.conv.bias")),
            2,
            1,
            1,
        )?;
        x = self.ln_channels_last(
            g,
            x,
            self.h(handles, "stem.ln.gamma"),
            self.h(handles, "stem.ln.beta"),
        )?;

        if cfg.stage_channels[0] != cfg.stem_channels {
            x = self.downsample(g, handles, "s0.down", x, 1, 1)?;
        }
        for j in 0..cfg.stage_depths[0] {
            x = self.conv_block(g, handles, &format!("s0.block{j}"), x)?;
        }

        x = self.downsample(g, handles, "s1.down", x, 2, 2)?;
        for j in 0..cfg.stage_depths[1] {
            x = self.conv_block(g, handles, &format!("s1.block{j}"), x)?;
        }

        x = self.downsample(g, handles, "s2.down", x, 2, 2)?;
        let d = cfg.stage_channels[2];
        let side = cfg.input_size / 8;
        let tokens = side * side;
        let seq = g.reshape(x, &[n, d, tokens])?;
        let mut tok = g.permute(seq, &[0, 2, 1])?; // [N, T, D]
        for j in 0..cfg.stage_depths[2] {
            tok = self.transformer_block(g, handles, &format!("s2.block{j}"), tok)?;
        }

        let normed = g.layer_norm(
            tok,
            self.h(handles, "head.ln.gamma"),
            self.h(handles, "head.ln.beta"),
            LN_EPS,
        )?;
        // Mean over tokens, then the linear embedding head.
        let swapped = g.permute(normed, &[0, 2, 1])?;
        let spatial = g.reshape(swapped, &[n, d, tokens, 1])?;
        let pooled = g.global_avg_pool(spatial)?;
        g.linear(
            pooled,
            self.h(handles, "head.linear.weight"),
            Some(self.h(handles, "head.linear.bias")),
        )
    }

    /// Convenience forward for inference: fresh graph, no gradients.
    pub fn forward_embed(&self, batch: &Tensor) -> Result<Tensor, TensorError> {
        let mut g = Graph::new();
        let handles = self.register_params(&mut g, Trainability::Frozen);
        let input = g.constant(batch.clone());
        let out = self.forward_embed_on(&mut g, &handles, input)?;
        Ok(g.detach(out))
    }
}

// ---- checkpoint persistence ----------------------------------------------

fn config_text(model: &Model) -> String {
    let c = &model.config;
    let partition = match model.partition {
        None => "-".to_string(),
        Some(set) => set.to_string(),
    };
    format!(
        "input_channels={}\ninput_size={}\nstem_channels={}\nstage_channels={},{},{}\nstage_depths={},{},{}\ns2_heads={}\nembed_dim={}\nseed={}\npartition={}\n",
        c.input_channels,
        c.input_size,
        c.stem_channels,
        c.stage_channels[0],
        c.stage_channels[1],
        c.stage_channels[2],
        c.stage_depths[0],
        c.stage_depths[1],
        c.stage_depths[2],
        c.s2_heads,
        c.embed_dim,
        c.seed,
        partition,
    )
}

fn parse_config_text(text: &str) -> Result<(BackboneConfig, Option<LayerSet>), ContainerError> {
    let bad = |detail: String| ContainerError::Malformed { offset: 8, detail };
    let mut map = BTreeMap::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("config line {line:?} is not key=value")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |key: &str| {
        map.get(key)
            .cloned()
            .ok_or_else(|| bad(format!("config key {key} missing")))
    };
    let int = |key: &str| -> Result<usize, ContainerError> {
        get(key)?
            .parse::<usize>()
            .map_err(|e| bad(format!("config key {key}: {e}")))
    };
    let triple = |key: &str| -> Result<[usize; 3], ContainerError> {
        let v = get(key)?;
        let parts: Vec<usize> = v
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| bad(format!("config key {key}: {e}")))?;
        parts
            .try_into()
            .map_err(|_| bad(format!("config key {key} must have three entries")))
    };
    let config = BackboneConfig {
        input_channels: int("input_channels")?,
        input_size: int("input_size")?,
        stem_channels: int("stem_channels")?,
        stage_channels: triple("stage_channels")?,
        stage_depths: triple("stage_depths")?,
        s2_heads: int("s2_heads")?,
        embed_dim: int("embed_dim")?,
        seed: get("seed")?
            .parse::<u64>()
            .map_err(|e| bad(format!("config key seed: {e}")))?,
    };
    let partition = match get("partition")?.as_str() {
        "-" => None,
        s => Some(
            s.parse::<LayerSet>()
                .map_err(|e| bad(format!("config key partition: {e}")))?,
        ),
    };
    let known = [
        "input_channels", "input_size", "stem_channels", "stage_channels", "stage_depths",
        "s2_heads", "embed_dim", "seed", "partition",
    ];
    for key in map.keys() {
        if !known.contains(&key.as_str()) {
            return Err(bad(format!("unknown config key {key}")));
        }
    }
    Ok((config, partition))
}

/// Persist config, names, tags, and raw f32 values. Round-trips bit-exactly.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), ContainerError> {
    let records: Vec<Record> = model
        .parameters
        .iter()
        .map(|p| Record {
            name: p.name.clone(),
            tag: p.partition.tag_byte(),
            tensor: p.value.clone().with_requires_grad(false),
        })
        .collect();
    container::write_file(path, &config_text(model), &records)
}

/// Load a checkpoint and validate the record inventory against the stored
/// config (names in order, dims, tags).
pub fn load_checkpoint(path: &Path) -> Result<Model, ContainerError> {
    let (cfg_text, records) = container::read_file(path)?;
    let (config, partition) = parse_config_text(&cfg_text)?;
    config.validate().map_err(|e| ContainerError::Malformed {
        offset: 8,
        detail: e.to_string(),
    })?;
    let specs = param_specs(&config);
    if specs.len() != records.len() {
        return Err(ContainerError::Malformed {
            offset: 0,
            detail: format!(
                "checkpoint holds {} parameters, config implies {}",
                records.len(),
                specs.len()
            ),
        });
    }
    let mut parameters = Vec::with_capacity(records.len());
    let mut index = BTreeMap::new();
    for (rec, (name, dims)) in records.into_iter().zip(specs) {
        if rec.name != name || rec.tensor.dims() != dims.as_slice() {
            return Err(ContainerError::Malformed {
                offset: 0,
                detail: format!(
                    "parameter {:?} dims {:?} does not match expected {:?} dims {:?}",
                    rec.name,
                    rec.tensor.dims(),
                    name,
                    dims
                ),
            });
        }
        let tag = Partition::from_tag_byte(rec.tag).ok_or(ContainerError::Malformed {
            offset: 0,
            detail: format!("parameter {name} has invalid tag"),
        })?;
        index.insert(name.clone(), parameters.len());
        parameters.push(Parameter {
            name,
            value: rec.tensor.with_requires_grad(tag != Partition::Frozen),
            partition: tag,
        });
    }
    Ok(Model { config, parameters, index, partition })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_embeds_to_batch_by_embed_dim() {
        let model = build_backbone(&BackboneConfig::default()).unwrap();
        let batch = Tensor::full(&[2, 3, 32, 32], 0.25);
        let out = model.forward_embed(&batch).unwrap();
        assert_eq!(out.dims(), &[2, 64]);
        assert!(out.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn same_seed_builds_bit_identical_parameters() {
        let cfg = BackboneConfig::default();
        let a = build_backbone(&cfg).unwrap();
        let b = build_backbone(&cfg).unwrap();
        for (pa, pb) in a.parameters().iter().zip(b.parameters()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.value.data(), pb.value.data());
        }
        let c = build_backbone(&BackboneConfig { seed: 43, ..cfg }).unwrap();
        assert!(a
            .parameters()
            .iter()
            .zip(c.parameters())
            .any(|(pa, pc)| pa.value.data() != pc.value.data()));
    }

    #[test]
    fn duplicate_images_embed_identically() {
        let model = build_backbone(&BackboneConfig::default()).unwrap();
        let mut data = Vec::new();
        for i in 0..(3 * 32 * 32) {
            data.push((i % 17) as f32 / 17.0);
        }
        let mut batch = data.clone();
        batch.extend_from_slice(&data);
        let batch = Tensor::new(vec![2, 3, 32, 32], batch).unwrap();
        let out = model.forward_embed(&batch).unwrap();
        let (a, b) = out.data().split_at(64);
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad_size = BackboneConfig { input_size: 30, ..Default::default() };
        assert!(matches!(build_backbone(&bad_size), Err(BackboneError::InvalidConfig(_))));
        let bad_heads = BackboneConfig { s2_heads: 5, ..Default::default() };
        assert!(matches!(build_backbone(&bad_heads), Err(BackboneError::InvalidConfig(_))));
    }

    #[test]
    fn layer_set_round_trips_canonical_strings() {
        for row in LayerSet::ablation_rows() {
            let s = row.to_string();
            let back: LayerSet = s.parse().unwrap();
            assert_eq!(back, row, "{s}");
        }
        assert_eq!("LN,ST,S0".parse::<LayerSet>().unwrap().to_string(), "LN,ST,S0");
        assert_eq!("".parse::<LayerSet>().unwrap(), LayerSet::EMPTY);
        assert!("LN,XX".parse::<LayerSet>().is_err());
    }

    #[test]
    fn empty_layer_set_freezes_everything() {
        let mut model = build_backbone(&BackboneConfig::default()).unwrap();
        partition_parameters(&mut model, LayerSet::EMPTY);
        assert!(model.parameters().iter().all(|p| p.partition == Partition::Frozen));
        assert!(model.trainable_names().is_empty());
    }

    #[test]
    fn ln_only_selects_exactly_dot_ln_names() {
        let mut model = build_backbone(&BackboneConfig::default()).unwrap();
        partition_parameters(&mut model, LayerSet::of(&[Unit::Ln]));
        for p in model.parameters() {
            let expect_ln = p.name.contains(".ln");
            assert_eq!(p.partition == Partition::Ln, expect_ln, "{}", p.name);
            assert_eq!(p.value.requires_grad(), expect_ln, "{}", p.name);
        }
    }

    #[test]
    fn teacher_clone_is_frozen_and_stable() {
        let mut model = build_backbone(&BackboneConfig::default()).unwrap();
        partition_parameters(&mut model, LayerSet::of(&[Unit::Ln, Unit::St, Unit::S0]));
        let teacher = clone_teacher(&model);
        assert!(teacher.parameters().iter().all(|p| p.partition == Partition::Frozen));

        let batch = Tensor::full(&[1, 3, 32, 32], 0.5);
        let e_student = model.forward_embed(&batch).unwrap();
        let e_teacher = teacher.forward_embed(&batch).unwrap();
        assert_eq!(e_student.data(), e_teacher.data());

        // Mutating the student must not alter the teacher.
        model.parameter_mut("stem.conv.weight").unwrap().value.data_mut()[0] += 1.0;
        let e_teacher2 = teacher.forward_embed(&batch).unwrap();
        assert_eq!(e_teacher.data(), e_teacher2.data());
        let e_student2 = model.forward_embed(&batch).unwrap();
        assert_ne!(e_student.data(), e_student2.data());
    }

    #[test]
    fn perturbing_a_frozen_weight_still_changes_the_embedding() {
        // Frozen means untrainable, not disconnected.
        let mut model = build_backbone(&BackboneConfig::default()).unwrap();
        partition_parameters(&mut model, LayerSet::of(&[Unit::Ln]));
        let batch = Tensor::full(&[1, 3, 32, 32], 0.3);
        let before = model.forward_embed(&batch).unwrap();
        let p = model.parameter_mut("head.linear.weight").unwrap();
        assert_eq!(p.partition, Partition::Frozen);
        p.value.data_mut()[0] += 0.5;
        let after = model.forward_embed(&batch).unwrap();
        assert_ne!(before.data(), after.data());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.xsfc");
        let path2 = dir.path().join("model2.xsfc");
        let mut model = build_backbone(&BackboneConfig::default()).unwrap();
        partition_parameters(&mut model, LayerSet::of(&[Unit::Ln, Unit::St]));
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        save_checkpoint(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());

        assert_eq!(loaded.partition(), Some(LayerSet::of(&[Unit::Ln, Unit::St])));
        let batch = Tensor::full(&[1, 3, 32, 32], 0.7);
        let a = model.forward_embed(&batch).unwrap();
        let b = loaded.forward_embed(&batch).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn corrupt_checkpoint_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.xsfc");
        let model = build_backbone(&BackboneConfig::default()).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'Y';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(ContainerError::BadMagic { offset: 0 })));
    }
}
