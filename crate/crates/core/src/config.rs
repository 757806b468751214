//! Model configuration, shape validation and parameter accounting.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{GumbelConfig, NodeInit};

/// The five logic-layer groups of the encoder–decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    /// Encoder, per-token feedforward.
    N,
    /// Encoder, recurrent over time.
    K,
    /// Decoder, per-token feedforward.
    L,
    /// Decoder, recurrent over time.
    P,
    /// Decoder output head.
    M,
}

impl Group {
    pub const ALL: [Group; 5] = [Group::N, Group::K, Group::L, Group::P, Group::M];

    pub fn name(self) -> &'static str {
        match self {
            Group::N => "N",
            Group::K => "K",
            Group::L => "L",
            Group::P => "P",
            Group::M => "M",
        }
    }

    pub(crate) fn tag(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Initial value of the recurrent K and P states.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HiddenInit {
    /// `N(mean, std²)` clamped to `[0,1]`, drawn fresh for every sequence.
    Gaussian { mean: f64, std: f64 },
    Zero,
    One,
    /// `Uniform(0,1)`, drawn fresh for every sequence.
    Uniform,
}

impl Default for HiddenInit {
    fn default() -> Self {
        HiddenInit::Gaussian { mean: 0.5, std: 0.25 }
    }
}

/// Drop probabilities after the embedding and after each group's output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DropoutConfig {
    pub embedding: f64,
    pub n: f64,
    pub k: f64,
    pub l: f64,
    pub p: f64,
    pub m: f64,
}

impl DropoutConfig {
    pub fn for_group(&self, g: Group) -> f64 {
        match g {
            Group::N => self.n,
            Group::K => self.k,
            Group::L => self.l,
            Group::P => self.p,
            Group::M => self.m,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub connectivity: u64,
    pub init: u64,
    pub hidden_noise: u64,
    pub gumbel: u64,
    pub dropout: u64,
    pub data: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            connectivity: 1,
            init: 2,
            hidden_noise: 3,
            gumbel: 4,
            dropout: 5,
            data: 6,
        }
    }
}

impl Seeds {
    /// Offsets every stream by the same amount.
    pub fn offset(&self, by: u64) -> Seeds {
        Seeds {
            connectivity: self.connectivity.wrapping_add(by),
            init: self.init.wrapping_add(by),
            hidden_noise: self.hidden_noise.wrapping_add(by),
            gumbel: self.gumbel.wrapping_add(by),
            dropout: self.dropout.wrapping_add(by),
            data: self.data.wrapping_add(by),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub emb_dim: usize,
    pub seq_len: usize,
    pub sizes_n: Vec<usize>,
    pub sizes_k: Vec<usize>,
    pub sizes_l: Vec<usize>,
    pub sizes_p: Vec<usize>,
    pub sizes_m: Vec<usize>,
    pub group_factor: usize,
    pub groupsum_tau: f64,
    #[serde(default)]
    pub node_init: NodeInit,
    #[serde(default)]
    pub hidden_init: HiddenInit,
    #[serde(default)]
    pub dropout: DropoutConfig,
    #[serde(default)]
    pub gumbel: GumbelConfig,
    #[serde(default)]
    pub seeds: Seeds,
}

/// Parameter and gate counts derived from a configuration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Accounting {
    /// `(group, Σ widths, 16 · Σ widths)`.
    pub groups: Vec<(Group, usize, usize)>,
    pub embedding_params: usize,
    pub logit_params: usize,
    pub trainable_params: usize,
    /// One gate per neuron after collapse.
    pub gate_count: usize,
    /// One bit per embedding entry after collapse.
    pub embedding_bits: usize,
    /// Gates plus embedding bits.
    pub collapsed_size: usize,
}

impl fmt::Display for Accounting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "embedding params: {}", self.embedding_params)?;
        for (g, w, p) in &self.groups {
            writeln!(f, "group {g}: widths {w}, logit params {p}")?;
        }
        writeln!(f, "trainable params: {}", self.trainable_params)?;
        writeln!(f, "gates: {}", self.gate_count)?;
        writeln!(f, "embedding bits: {}", self.embedding_bits)?;
        write!(f, "collapsed size: {}", self.collapsed_size)
    }
}

fn last(v: &[usize]) -> usize {
    v.last().copied().unwrap_or(0)
}

impl ModelConfig {
    /// The full-size configuration: d=1024, V=16000, k=30, S=16.
    pub fn base() -> Self {
        ModelConfig {
            vocab_size: 16_000,
            emb_dim: 1024,
            seq_len: 16,
            sizes_n: vec![12_000, 12_000],
            sizes_k: vec![54_000, 32_000],
            sizes_l: vec![12_000, 12_000],
            sizes_p: vec![64_000, 48_000],
            sizes_m: vec![400_000, 400_000, 480_000],
            group_factor: 30,
            groupsum_tau: 2.0,
            node_init: NodeInit::default(),
            hidden_init: HiddenInit::default(),
            dropout: DropoutConfig::default(),
            gumbel: GumbelConfig::default(),
            seeds: Seeds::default(),
        }
    }

    pub fn sizes(&self, g: Group) -> &[usize] {
        match g {
            Group::N => &self.sizes_n,
            Group::K => &self.sizes_k,
            Group::L => &self.sizes_l,
            Group::P => &self.sizes_p,
            Group::M => &self.sizes_m,
        }
    }

    pub fn out_dim(&self, g: Group) -> usize {
        last(self.sizes(g))
    }

    /// Input width of the first layer of a group.
    pub fn in_dim(&self, g: Group) -> usize {
        match g {
            Group::N | Group::L => self.emb_dim,
            Group::K => self.out_dim(Group::N) + self.out_dim(Group::K),
            Group::P | Group::M => self.out_dim(Group::P) + self.out_dim(Group::K) + self.out_dim(Group::L),
        }
    }

    /// `(in_dim, width)` of every layer in a group.
    pub fn layer_shapes(&self, g: Group) -> Vec<(usize, usize)> {
        let mut in_dim = self.in_dim(g);
        self.sizes(g)
            .iter()
            .map(|&w| {
                let s = (in_dim, w);
                in_dim = w;
                s
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 5 {
            return Err(Error::config("model.vocab_size", "must be >= 5 (4 special tokens plus one word)"));
        }
        if self.emb_dim < 2 {
            return Err(Error::config("model.emb_dim", "must be >= 2"));
        }
        if self.seq_len == 0 {
            return Err(Error::config("model.seq_len", "must be >= 1"));
        }
        for g in Group::ALL {
            let sizes = self.sizes(g);
            let field = format!("model.sizes_{}", g.name().to_lowercase());
            if sizes.is_empty() {
                return Err(Error::config(field, "needs at least one layer"));
            }
            if let Some(i) = sizes.iter().position(|&w| w == 0) {
                return Err(Error::config(format!("{field}[{i}]"), "layer width must be >= 1"));
            }
            for (i, (in_dim, _)) in self.layer_shapes(g).into_iter().enumerate() {
                if in_dim < 2 {
                    return Err(Error::config(format!("{field}[{i}]"), "layer input width must be >= 2"));
                }
                if in_dim > u32::MAX as usize {
                    return Err(Error::config(format!("{field}[{i}]"), "layer input width exceeds u32"));
                }
            }
        }
        if self.group_factor == 0 {
            return Err(Error::config("model.group_factor", "must be >= 1"));
        }
        let head = self.out_dim(Group::M);
        if head != self.vocab_size * self.group_factor {
            return Err(Error::config(
                "model.sizes_m",
                format!(
                    "last width {head} must equal vocab_size × group_factor = {} × {} = {}",
                    self.vocab_size,
                    self.group_factor,
                    self.vocab_size * self.group_factor
                ),
            ));
        }
        if !(self.groupsum_tau.is_finite() && self.groupsum_tau > 0.0) {
            return Err(Error::config("model.groupsum_tau", "must be finite and > 0"));
        }
        self.node_init.validate()?;
        if let HiddenInit::Gaussian { mean, std } = self.hidden_init {
            if !(mean.is_finite() && std.is_finite() && std >= 0.0) {
                return Err(Error::config("model.hidden_init", "gaussian mean/std must be finite, std >= 0"));
            }
        }
        let d = &self.dropout;
        for (name, p) in [
            ("embedding", d.embedding),
            ("n", d.n),
            ("k", d.k),
            ("l", d.l),
            ("p", d.p),
            ("m", d.m),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(format!("model.dropout.{name}"), "must lie in [0, 1)"));
            }
        }
        if self.gumbel.enabled && !(self.gumbel.tau.is_finite() && self.gumbel.tau > 0.0) {
            return Err(Error::config("model.gumbel.tau", "must be finite and > 0"));
        }
        Ok(())
    }

    pub fn accounting(&self) -> Accounting {
        let groups: Vec<_> = Group::ALL
            .iter()
            .map(|&g| {
                let w: usize = self.sizes(g).iter().sum();
                (g, w, 16 * w)
            })
            .collect();
        let gate_count: usize = groups.iter().map(|g| g.1).sum();
        let logit_params = 16 * gate_count;
        let embedding_params = self.vocab_size * self.emb_dim;
        Accounting {
            groups,
            embedding_params,
            logit_params,
            trainable_params: embedding_params + logit_params,
            gate_count,
            embedding_bits: embedding_params,
            collapsed_size: embedding_params + gate_count,
        }
    }
}
