//! The causal patch transformer: parameters, configuration and initialization.
//! Forward passes live in [`forward`], read-outs and classifier heads in [`head`].

mod forward;
mod head;

pub use forward::{two_stream_content_mask, BoundModel, Encoded};
pub use head::{classifier_logits, readout, readout_var, LinearHead, Readout};

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::patch::{OrderingKind, OrderingStrategy};
use crate::positional::PosEncoding;
use crate::tensor::{Rng, Tensor};

pub const SOS_INIT_STD: f64 = 0.02;
pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Objective {
    Mse,
    Diffusion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DecoderKind {
    Linear,
    Mlp,
    Transformer,
}

macro_rules! str_enum {
    ($ty:ident { $($var:ident => $s:literal),* $(,)? }) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$($ty::$var),*];

            pub fn as_str(self) -> &'static str {
                match self { $($ty::$var => $s),* }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($ty::$var),)*
                    _ => Err(Error::invalid(format!(concat!("unknown ", stringify!($ty), " `{}`"), s))),
                }
            }
        }
    };
}

str_enum!(Objective { Mse => "mse", Diffusion => "diffusion" });
str_enum!(DecoderKind { Linear => "linear", Mlp => "mlp", Transformer => "transformer" });

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DecoderConfig {
    pub kind: DecoderKind,
    /// Residual MLP blocks or transformer blocks; zero for the linear decoder.
    pub layers: usize,
    /// Append gamma as an extra input channel of the corrupted patch.
    pub gamma_cond: bool,
}

impl DecoderConfig {
    pub fn default_for(objective: Objective) -> Self {
        match objective {
            Objective::Mse => DecoderConfig {
                kind: DecoderKind::Linear,
                layers: 0,
                gamma_cond: false,
            },
            Objective::Diffusion => DecoderConfig {
                kind: DecoderKind::Transformer,
                layers: 1,
                gamma_cond: false,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: (usize, usize),
    pub channels: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub pos_encoding: PosEncoding,
    pub causal: bool,
    pub drop_path: f64,
    pub objective: Objective,
    pub decoder: DecoderConfig,
    pub ordering: OrderingStrategy,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: (16, 16),
            channels: 1,
            patch_size: 4,
            depth: 4,
            width: 32,
            heads: 4,
            mlp_ratio: 2,
            pos_encoding: PosEncoding::Rope2d,
            causal: true,
            drop_path: 0.0,
            objective: Objective::Mse,
            decoder: DecoderConfig::default_for(Objective::Mse),
            ordering: OrderingStrategy::raster(),
            rope_base: crate::positional::DEFAULT_BASE,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> (usize, usize) {
        (
            self.image_size.0 / self.patch_size,
            self.image_size.1 / self.patch_size,
        )
    }

    pub fn seq_len(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.width * self.mlp_ratio
    }

    pub fn two_stream(&self) -> bool {
        self.ordering.kind == OrderingKind::Random
    }

    /// Width of the corrupted-patch input of a diffusion decoder.
    pub fn corrupted_dim(&self) -> usize {
        self.patch_dim() + self.decoder.gamma_cond as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| Err(Error::config(key, reason));
        let (h, w) = self.image_size;
        let p = self.patch_size;
        if p == 0 || h == 0 || w == 0 || h % p != 0 || w % p != 0 {
            return bad("model.patch_size", format!("image {h}x{w} not divisible into {p}x{p} patches"));
        }
        if self.channels == 0 {
            return bad("model.channels", "must be positive".into());
        }
        if self.depth == 0 {
            return bad("model.depth", "must be positive".into());
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return bad("model.heads", format!("width {} not divisible by {} heads", self.width, self.heads));
        }
        if self.mlp_ratio == 0 {
            return bad("model.mlp_ratio", "must be positive".into());
        }
        let hd = self.head_dim();
        match self.pos_encoding {
            PosEncoding::Rope1d if hd % 2 != 0 => {
                return bad("model.pos_encoding", format!("rope1d needs an even head width, got {hd}"))
            }
            PosEncoding::Rope2d if hd % 4 != 0 => {
                return bad("model.pos_encoding", format!("rope2d needs head width divisible by 4, got {hd}"))
            }
            PosEncoding::Absolute if self.width % 4 != 0 => {
                return bad("model.pos_encoding", format!("absolute needs width divisible by 4, got {}", self.width))
            }
            _ => {}
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return bad("model.drop_path", format!("{} not in [0, 1)", self.drop_path));
        }
        if !(self.rope_base > 1.0) {
            return bad("model.rope_base", format!("{} must exceed 1", self.rope_base));
        }
        let d = self.decoder;
        match d.kind {
            DecoderKind::Linear if d.layers != 0 => {
                return bad("model.decoder_layers", "the linear decoder has no layers".into())
            }
            DecoderKind::Mlp | DecoderKind::Transformer if d.layers == 0 => {
                return bad("model.decoder_layers", format!("{} decoder needs at least one layer", d.kind))
            }
            DecoderKind::Transformer if self.objective == Objective::Mse => {
                return bad(
                    "model.decoder",
                    "the transformer decoder denoises a corrupted patch and needs objective=diffusion".into(),
                )
            }
            _ => {}
        }
        if d.gamma_cond && self.objective == Objective::Mse {
            return bad("model.gamma_cond", "gamma conditioning needs objective=diffusion".into());
        }
        match self.ordering.kind {
            OrderingKind::NestedRaster | OrderingKind::RoundRobin => {
                let (gh, gw) = self.grid();
                let (bh, bw) = self.ordering.block;
                if gh % bh != 0 || gw % bw != 0 {
                    return bad("model.ordering", format!("grid {gh}x{gw} not divisible into {bh}x{bw} blocks"));
                }
            }
            OrderingKind::Random if self.pos_encoding == PosEncoding::Nope => {
                return bad(
                    "model.ordering",
                    "random ordering needs a positional encoding to tell query tokens which patch to predict"
                        .into(),
                )
            }
            _ => {}
        }
        Ok(())
    }
}

/// Index of a parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Arc<Tensor>,
    /// Whether weight decay applies.
    pub decay: bool,
}

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value: Arc::new(value),
            decay,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Mutable access; copies the tensor if a graph still shares it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter {}: {:?} vs {:?}",
                e.name,
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = Arc::new(value);
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Norm {
    pub g: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Block {
    pub norm1: Norm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
    /// Separate query projection of the two-stream query stream.
    pub query_q: Option<Linear>,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct MlpBlock {
    pub norm: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum DecoderLayout {
    Linear {
        out: Linear,
    },
    Mlp {
        input: Linear,
        blocks: Vec<MlpBlock>,
        norm: Norm,
        out: Linear,
    },
    Transformer {
        embed: Linear,
        blocks: Vec<Block>,
        norm: Norm,
        out: Linear,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Layout {
    pub embed: Linear,
    pub sos: ParamId,
    pub pos_table: Option<ParamId>,
    pub blocks: Vec<Block>,
    pub final_norm: Norm,
    pub query_token: Option<ParamId>,
    pub decoder: DecoderLayout,
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut Rng,
}

impl Builder<'_> {
    /// Xavier-uniform weight `[fan_in, fan_out]` and zero bias.
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut w = self.rng.uniform_tensor(&[fan_in, fan_out]);
        for v in w.data_mut() {
            *v = (2.0 * *v - 1.0) * bound;
        }
        Linear {
            w: self.store.add(format!("{name}.w"), w, true),
            b: self.store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]), false),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            g: self.store.add(format!("{name}.g"), Tensor::ones(&[d]), false),
            b: self.store.add(format!("{name}.b"), Tensor::zeros(&[d]), false),
        }
    }

    fn block(&mut self, name: &str, d: usize, hidden: usize, query: bool) -> Block {
        Block {
            norm1: self.norm(&format!("{name}.norm1"), d),
            qkv: self.linear(&format!("{name}.qkv"), d, 3 * d),
            proj: self.linear(&format!("{name}.proj"), d, d),
            norm2: self.norm(&format!("{name}.norm2"), d),
            fc1: self.linear(&format!("{name}.fc1"), d, hidden),
            fc2: self.linear(&format!("{name}.fc2"), hidden, d),
            query_q: query.then(|| self.linear(&format!("{name}.query_q"), d, d)),
        }
    }

    fn gaussian(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let t = self.rng.gaussian_tensor(shape).scale(std);
        self.store.add(name, t, false)
    }
}

/// Model parameters plus the configuration that shapes them.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub(crate) layout: Layout,
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let (d, hidden, pd) = (c.width, c.hidden(), c.patch_dim());
        let mut b = Builder {
            store: ParamStore::default(),
            rng,
        };
        let embed = b.linear("embed", pd, d);
        let sos = b.gaussian("sos", &[1, d], SOS_INIT_STD);
        let pos_table = (c.pos_encoding == PosEncoding::Learnable).then(|| {
            b.gaussian(
                "pos_table",
                &[c.seq_len(), d],
                crate::positional::LEARNABLE_INIT_STD,
            )
        });
        let two_stream = c.two_stream();
        let blocks = (0..c.depth)
            .map(|i| b.block(&format!("blocks.{i}"), d, hidden, two_stream))
            .collect();
        let final_norm = b.norm("final_norm", d);
        let query_token = two_stream.then(|| b.gaussian("query_token", &[1, d], SOS_INIT_STD));
        let diffusion = c.objective == Objective::Diffusion;
        let dec_in = if diffusion { d + c.corrupted_dim() } else { d };
        let decoder = match c.decoder.kind {
            DecoderKind::Linear => DecoderLayout::Linear {
                out: b.linear("decoder.out", dec_in, pd),
            },
            DecoderKind::Mlp => {
                let input = b.linear("decoder.input", dec_in, d);
                let blocks = (0..c.decoder.layers)
                    .map(|i| MlpBlock {
                        norm: b.norm(&format!("decoder.blocks.{i}.norm"), d),
                        fc1: b.linear(&format!("decoder.blocks.{i}.fc1"), d, hidden),
                        fc2: b.linear(&format!("decoder.blocks.{i}.fc2"), hidden, d),
                    })
                    .collect();
                DecoderLayout::Mlp {
                    input,
                    blocks,
                    norm: b.norm("decoder.norm", d),
                    out: b.linear("decoder.out", d, pd),
                }
            }
            DecoderKind::Transformer => DecoderLayout::Transformer {
                embed: b.linear("decoder.embed", c.corrupted_dim(), d),
                blocks: (0..c.decoder.layers)
                    .map(|i| b.block(&format!("decoder.blocks.{i}"), d, hidden, false))
                    .collect(),
                norm: b.norm("decoder.norm", d),
                out: b.linear("decoder.out", d, pd),
            },
        };
        let layout = Layout {
            embed,
            sos,
            pos_table,
            blocks,
            final_norm,
            query_token,
            decoder,
        };
        Ok(Model {
            config,
            params: b.store,
            layout,
        })
    }

    /// Rebuilds a model from `config` and takes parameter values from `store`
    /// by name; names and shapes must match exactly.
    pub fn from_params(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let mut model = Model::new(config, &mut Rng::seed_from_u64(0))?;
        if store.len() != model.params.len() {
            return Err(Error::ConfigMismatch(format!(
                "{} stored parameters, model expects {}",
                store.len(),
                model.params.len()
            )));
        }
        for (mine, theirs) in model.params.entries.iter_mut().zip(store.entries) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(Error::ConfigMismatch(format!(
                    "parameter {} {:?} does not match stored {} {:?}",
                    mine.name,
                    mine.value.shape(),
                    theirs.name,
                    theirs.value.shape()
                )));
            }
            mine.value = theirs.value;
        }
        Ok(model)
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn depth(&self) -> usize {
        self.config.depth
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent count from the architecture description.
    fn expected_count(c: &ModelConfig) -> usize {
        let (d, h, pd) = (c.width, c.hidden(), c.patch_dim());
        let linear = |i: usize, o: usize| i * o + o;
        let block = linear(d, 3 * d) + linear(d, d) + linear(d, h) + linear(h, d) + 4 * d;
        let mut n = linear(pd, d) + d + c.depth * block + 2 * d;
        if c.pos_encoding == PosEncoding::Learnable {
            n += c.seq_len() * d;
        }
        if c.two_stream() {
            n += c.depth * linear(d, d) + d;
        }
        let cin = pd + c.decoder.gamma_cond as usize;
        n += match (c.objective, c.decoder.kind) {
            (Objective::Mse, DecoderKind::Linear) => linear(d, pd),
            (Objective::Diffusion, DecoderKind::Linear) => linear(d + cin, pd),
            (obj, DecoderKind::Mlp) => {
                let din = if obj == Objective::Mse { d } else { d + cin };
                linear(din, d) + c.decoder.layers * (2 * d + linear(d, h) + linear(h, d)) + 2 * d + linear(d, pd)
            }
            (_, DecoderKind::Transformer) => linear(cin, d) + c.decoder.layers * block + 2 * d + linear(d, pd),
        };
        n
    }

    #[test]
    fn parameter_counts() {
        let mut cfgs = vec![ModelConfig::default()];
        let mut c = ModelConfig {
            objective: Objective::Diffusion,
            decoder: DecoderConfig {
                kind: DecoderKind::Transformer,
                layers: 2,
                gamma_cond: true,
            },
            pos_encoding: PosEncoding::Learnable,
            ordering: OrderingStrategy::random(),
            ..ModelConfig::default()
        };
        cfgs.push(c.clone());
        c.decoder = DecoderConfig {
            kind: DecoderKind::Mlp,
            layers: 3,
            gamma_cond: false,
        };
        cfgs.push(c.clone());
        c.decoder.kind = DecoderKind::Linear;
        c.decoder.layers = 0;
        cfgs.push(c);
        for cfg in cfgs {
            let m = Model::new(cfg.clone(), &mut Rng::seed_from_u64(1)).unwrap();
            assert_eq!(m.param_count(), expected_count(&cfg), "{cfg:?}");
            let again = Model::new(cfg, &mut Rng::seed_from_u64(2)).unwrap();
            assert_eq!(again.param_count(), m.param_count());
        }
    }

    #[test]
    fn default_config_golden_count() {
        // embed 16*32+32, sos 32, 4 blocks of 3168+1056+2112+2080+128, final norm 64,
        // decoder 32*16+16.
        let m = Model::new(ModelConfig::default(), &mut Rng::seed_from_u64(0)).unwrap();
        assert_eq!(m.param_count(), 544 + 32 + 4 * 8544 + 64 + 528);
    }

    #[test]
    fn validation() {
        let ok = ModelConfig::default();
        assert!(ok.validate().is_ok());
        let cases: Vec<(ModelConfig, &str)> = vec![
            (ModelConfig { heads: 3, ..ok.clone() }, "model.heads"),
            (ModelConfig { patch_size: 5, ..ok.clone() }, "model.patch_size"),
            (ModelConfig { width: 24, heads: 4, ..ok.clone() }, "model.pos_encoding"),
            (
                ModelConfig {
                    decoder: DecoderConfig::default_for(Objective::Diffusion),
                    ..ok.clone()
                },
                "model.decoder",
            ),
            (
                ModelConfig {
                    ordering: OrderingStrategy::nested(3, 3),
                    ..ok.clone()
                },
                "model.ordering",
            ),
            (
                ModelConfig {
                    ordering: OrderingStrategy::random(),
                    pos_encoding: PosEncoding::Nope,
                    ..ok.clone()
                },
                "model.ordering",
            ),
        ];
        for (cfg, key) in cases {
            let err = cfg.validate().unwrap_err().to_string();
            assert!(err.contains(key), "{err} should name {key}");
        }
    }

    #[test]
    fn xavier_bounds_and_decay_flags() {
        let m = Model::new(ModelConfig::default(), &mut Rng::seed_from_u64(3)).unwrap();
        let id = m.params.find("blocks.0.fc1.w").unwrap();
        let bound = (6.0f64 / (32 + 64) as f64).sqrt();
        assert!(m.params.get(id).data().iter().all(|v| v.abs() <= bound));
        for e in m.params.entries() {
            let no_decay = e.name.ends_with(".b")
                || e.name.ends_with(".g")
                || e.name == "sos"
                || e.name == "pos_table"
                || e.name == "query_token";
            assert_eq!(e.decay, !no_decay, "{}", e.name);
        }
    }

    #[test]
    fn from_params_checks_names() {
        let m = Model::new(ModelConfig::default(), &mut Rng::seed_from_u64(3)).unwrap();
        let back = Model::from_params(m.config.clone(), m.params.clone()).unwrap();
        assert_eq!(back, m);
        let other = ModelConfig {
            depth: 3,
            ..ModelConfig::default()
        };
        assert!(matches!(
            Model::from_params(other, m.params.clone()),
            Err(Error::ConfigMismatch(_))
        ));
    }
}
