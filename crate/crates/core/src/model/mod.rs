//! Tiny decoder-only transformer conditioned on a prefix of projected visual tokens.
//!
//! Input layout for one scored response `y` given instruction `x` and visual
//! rows `v_1..v_m`:
//!
//! ```text
//! [ W_v·v_1 + b_v, …, W_v·v_m + b_v, x_1, …, x_k, BOS, y_1, …, y_{n-1} ]
//! ```
//!
//! The hidden state at `BOS` predicts `y_1`, the state at `y_{t-1}` predicts
//! `y_t`. Text-only scoring drops the visual block and re-indexes positions
//! from zero, so `π(y | x)` never sees a placeholder image.

mod linalg;
mod snapshot;
mod transformer;

use std::ops::Range;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::sha256_hex;
use crate::rng::rng_stream;
use crate::scalar::Scalar;
use crate::types::{ModelTag, TokenId};

pub use linalg::log_softmax;
pub use snapshot::ParamSnapshot;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_v: usize,
    pub max_seq_len: usize,
    pub param_init_scale: f64,
    /// Token placed between the conditioning prefix and the response.
    #[serde(default = "default_bos")]
    pub bos_token: TokenId,
}

fn default_bos() -> TokenId {
    1
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 64,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            d_v: 16,
            max_seq_len: 64,
            param_init_scale: 0.02,
            bos_token: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_v", self.d_v),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!(
                "model config: {name} must be positive"
            )));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(
                "model config: d_model must be divisible by n_heads",
            ));
        }
        if !(self.param_init_scale > 0.0 && self.param_init_scale.is_finite()) {
            return Err(Error::invalid(
                "model config: param_init_scale must be positive",
            ));
        }
        if self.bos_token as usize >= self.vocab_size {
            return Err(Error::invalid("model config: bos_token outside vocabulary"));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn hash(&self) -> String {
        sha256_hex(
            serde_json::to_string(self)
                .expect("config serializes")
                .as_bytes(),
        )
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ff_dim(&self) -> usize {
        4 * self.d_model
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerSlots {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub w_qkv: Range<usize>,
    pub b_qkv: Range<usize>,
    pub w_o: Range<usize>,
    pub b_o: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub w_fc: Range<usize>,
    pub b_fc: Range<usize>,
    pub w_proj: Range<usize>,
    pub b_proj: Range<usize>,
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Clone, Debug)]
pub struct ParamLayout {
    pub(crate) tok_emb: Range<usize>,
    pub(crate) pos_emb: Range<usize>,
    pub(crate) vis_w: Range<usize>,
    pub(crate) vis_b: Range<usize>,
    pub(crate) layers: Vec<LayerSlots>,
    pub(crate) lnf_g: Range<usize>,
    pub(crate) lnf_b: Range<usize>,
    pub(crate) w_out: Range<usize>,
    pub(crate) b_out: Range<usize>,
    len: usize,
}

struct Cursor(usize);

impl Cursor {
    fn take(&mut self, n: usize) -> Range<usize> {
        let r = self.0..self.0 + n;
        self.0 += n;
        r
    }
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (v, d, f) = (cfg.vocab_size, cfg.d_model, cfg.ff_dim());
        let mut c = Cursor(0);
        let tok_emb = c.take(v * d);
        let pos_emb = c.take(cfg.max_seq_len * d);
        let vis_w = c.take(cfg.d_v * d);
        let vis_b = c.take(d);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerSlots {
                ln1_g: c.take(d),
                ln1_b: c.take(d),
                w_qkv: c.take(d * 3 * d),
                b_qkv: c.take(3 * d),
                w_o: c.take(d * d),
                b_o: c.take(d),
                ln2_g: c.take(d),
                ln2_b: c.take(d),
                w_fc: c.take(d * f),
                b_fc: c.take(f),
                w_proj: c.take(f * d),
                b_proj: c.take(d),
            })
            .collect();
        let lnf_g = c.take(d);
        let lnf_b = c.take(d);
        let w_out = c.take(d * v);
        let b_out = c.take(v);
        ParamLayout {
            tok_emb,
            pos_emb,
            vis_w,
            vis_b,
            layers,
            lnf_g,
            lnf_b,
            w_out,
            b_out,
            len: c.0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Range of the token-embedding row for `token`.
    pub fn token_embedding_row(&self, token: TokenId, d_model: usize) -> Range<usize> {
        let start = self.tok_emb.start + token as usize * d_model;
        start..start + d_model
    }

    /// Output projection weights and bias (zeroing these yields a uniform model).
    pub fn output_head(&self) -> [Range<usize>; 2] {
        [self.w_out.clone(), self.b_out.clone()]
    }

    /// Ranges of layer-norm gains; these are initialised to one.
    fn gains(&self) -> Vec<Range<usize>> {
        let mut g: Vec<_> = self
            .layers
            .iter()
            .flat_map(|l| [l.ln1_g.clone(), l.ln2_g.clone()])
            .collect();
        g.push(self.lnf_g.clone());
        g
    }

    fn biases(&self) -> Vec<Range<usize>> {
        let mut b = vec![self.vis_b.clone(), self.lnf_b.clone(), self.b_out.clone()];
        for l in &self.layers {
            b.extend([
                l.ln1_b.clone(),
                l.b_qkv.clone(),
                l.b_o.clone(),
                l.ln2_b.clone(),
                l.b_fc.clone(),
                l.b_proj.clone(),
            ]);
        }
        b
    }
}

/// Model parameters plus the configuration that gives them shape.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    config: ModelConfig,
    layout: ParamLayout,
    params: Vec<T>,
    tag: ModelTag,
}

impl<T: Scalar> Model<T> {
    /// Gaussian initialisation from the `"init"` stream of `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut rng = rng_stream(seed, "model-init");
        let normal = Normal::new(0.0, config.param_init_scale).expect("positive scale");
        let mut params: Vec<T> = (0..layout.len())
            .map(|_| T::lit(normal.sample(&mut rng)))
            .collect();
        for r in layout.biases() {
            params[r].iter_mut().for_each(|p| *p = T::zero());
        }
        for r in layout.gains() {
            params[r].iter_mut().for_each(|p| *p = T::one());
        }
        Ok(Model {
            config,
            layout,
            params,
            tag: ModelTag::Policy,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<T>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if params.len() != layout.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters for this config, got {}",
                layout.len(),
                params.len()
            )));
        }
        Ok(Model {
            config,
            layout,
            params,
            tag: ModelTag::Policy,
        })
    }

    pub fn with_tag(mut self, tag: ModelTag) -> Self {
        self.tag = tag;
        self
    }

    pub fn tag(&self) -> ModelTag {
        self.tag
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Converts to another working precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|p| U::lit(p.as_f64())).collect(),
            tag: self.tag,
        }
    }
}
