//! The channel-independent patch-transformer encoder.
//!
//! Each univariate channel is patched, embedded, and passed through a stack
//! of pre-norm encoder layers. All channels share one parameter set.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{multi_head_attention, AttentionParams};
use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{shape_err, Error, Result};
use crate::layers::{
    dropout, embed_tokens, patch_batch, LinearLayer, PositionalEncoding, RmsNormLayer, REVIN_EPS,
    RMSNORM_EPS,
};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub context_len: usize,
    pub patch_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Defaults to `4 · d_model`.
    pub d_ff: Option<usize>,
    pub qk_norm: bool,
    pub freeze_qk_gain: bool,
    pub final_norm: bool,
    pub attn_dropout: f64,
    pub ffn_dropout: f64,
    pub rms_eps: f64,
    pub revin_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            context_len: 168,
            patch_len: 12,
            d_model: 64,
            n_heads: 4,
            n_layers: 3,
            d_ff: None,
            qk_norm: true,
            freeze_qk_gain: false,
            final_norm: false,
            attn_dropout: 0.0,
            ffn_dropout: 0.0,
            rms_eps: RMSNORM_EPS,
            revin_eps: REVIN_EPS,
        }
    }
}

impl ModelConfig {
    pub fn n_patches(&self) -> usize {
        self.context_len / self.patch_len.max(1)
    }

    pub fn ff_dim(&self) -> usize {
        self.d_ff.unwrap_or(4 * self.d_model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_len == 0 || self.d_model == 0 {
            return Err(Error::Config(
                "patch_len and d_model must be positive".into(),
            ));
        }
        if self.context_len < self.patch_len {
            return Err(Error::Config(format!(
                "context_len {} shorter than patch_len {}",
                self.context_len, self.patch_len
            )));
        }
        if self.n_heads == 0 || self.n_heads > self.d_model {
            return Err(Error::Config(format!(
                "n_heads {} incompatible with d_model {}",
                self.n_heads, self.d_model
            )));
        }
        for p in [self.attn_dropout, self.ffn_dropout] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("dropout {p} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderLayerParams {
    pub attention: AttentionParams,
    /// `d_ff × D`, no bias.
    pub ff_in: LinearLayer,
    /// `D × d_ff`, no bias.
    pub ff_out: LinearLayer,
    pub norm1: RmsNormLayer,
    pub norm2: RmsNormLayer,
}

/// Backbone parameters: patch embedding, positional table and encoder stack.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embed: LinearLayer,
    pub pos: PositionalEncoding,
    pub layers: Vec<EncoderLayerParams>,
    pub final_norm: Option<RmsNormLayer>,
}

/// Dropout settings and randomness for a training-mode forward pass.
pub struct Dropout<'a> {
    pub attn: f64,
    pub ffn: f64,
    pub rng: &'a mut dyn RngCore,
}

/// One pre-norm encoder layer on `[.., K, D]` tokens:
/// `x₂ = x + MHA(norm1(x))`, `out = x₂ + W₂·GELU(W₁·norm2(x₂))`.
pub fn encoder_layer(
    tape: &mut Tape,
    bound: &Bound,
    x: Var,
    layer: &EncoderLayerParams,
    mut drop: Option<&mut Dropout<'_>>,
) -> Result<Var> {
    let h = layer.norm1.forward(tape, bound, x)?;
    let mut a = multi_head_attention(tape, bound, h, &layer.attention)?;
    if let Some(d) = drop.as_deref_mut() {
        a = dropout(tape, a, d.attn, d.rng)?;
    }
    let x2 = tape.add(x, a)?;
    let f = layer.norm2.forward(tape, bound, x2)?;
    let f = layer.ff_in.forward(tape, bound, f)?;
    let f = tape.gelu(f);
    let mut f = layer.ff_out.forward(tape, bound, f)?;
    if let Some(d) = drop {
        f = dropout(tape, f, d.ffn, d.rng)?;
    }
    tape.add(x2, f)
}

impl Backbone {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let embed = LinearLayer::new(&mut store, "embed", config.patch_len, d, true, &mut rng);
        let pos = PositionalEncoding::new(&mut store, "pos", d, config.n_patches(), &mut rng);
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let name = format!("layer{l}");
            layers.push(EncoderLayerParams {
                attention: AttentionParams::new(
                    &mut store,
                    &format!("{name}.attn"),
                    d,
                    config.n_heads,
                    config.qk_norm,
                    config.freeze_qk_gain,
                    config.rms_eps,
                    &mut rng,
                )?,
                ff_in: LinearLayer::new(
                    &mut store,
                    &format!("{name}.ff_in"),
                    d,
                    config.ff_dim(),
                    false,
                    &mut rng,
                ),
                ff_out: LinearLayer::new(
                    &mut store,
                    &format!("{name}.ff_out"),
                    config.ff_dim(),
                    d,
                    false,
                    &mut rng,
                ),
                norm1: RmsNormLayer::new(&mut store, &format!("{name}.norm1"), d, config.rms_eps),
                norm2: RmsNormLayer::new(&mut store, &format!("{name}.norm2"), d, config.rms_eps),
            });
        }
        let final_norm = config
            .final_norm
            .then(|| RmsNormLayer::new(&mut store, "final_norm", d, config.rms_eps));
        Ok(Self {
            config,
            store,
            embed,
            pos,
            layers,
            final_norm,
        })
    }

    pub fn n_patches(&self) -> usize {
        self.config.n_patches()
    }

    /// `[S, K, P]` patches to `[S, K, D]` representations on the tape.
    pub fn encode_tokens(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        patches: Var,
        mut drop: Option<&mut Dropout<'_>>,
    ) -> Result<Var> {
        let mut x = embed_tokens(tape, bound, patches, &self.embed, &self.pos)?;
        for layer in &self.layers {
            x = encoder_layer(tape, bound, x, layer, drop.as_deref_mut())?;
        }
        if let Some(n) = &self.final_norm {
            x = n.forward(tape, bound, x)?;
        }
        Ok(x)
    }

    /// Token-major representations for a batch of univariate series:
    /// `[S, L] -> [S, K, D]`, computed in chunks without gradient tracking.
    pub fn encode_batch(&self, series: &Tensor) -> Result<Tensor> {
        let (s, l) = match series.shape() {
            [s, l] => (*s, *l),
            sh => return Err(shape_err("encode_batch", sh, &[])),
        };
        self.check_len(l)?;
        let (k, d) = (self.n_patches(), self.config.d_model);
        const CHUNK: usize = 256;
        let mut out = Vec::with_capacity(s * k * d);
        for rows in series.data().chunks(CHUNK * l) {
            let n = rows.len() / l;
            let x = Tensor::new(vec![n, l], rows.to_vec())?;
            let mut tape = Tape::new();
            let bound = self.store.bind(&mut tape, false);
            let p = tape.constant(patch_batch(&x, self.config.patch_len)?);
            let z = self.encode_tokens(&mut tape, &bound, p, None)?;
            out.extend_from_slice(tape.value(z).data());
        }
        Tensor::new(vec![s, k, d], out)
    }

    fn check_len(&self, l: usize) -> Result<()> {
        if l < self.config.patch_len {
            return Err(Error::InputTooShort {
                len: l,
                need: self.config.patch_len,
            });
        }
        if l / self.config.patch_len != self.n_patches() {
            return Err(Error::Contract(format!(
                "series of length {l} gives {} patches; model expects {}",
                l / self.config.patch_len,
                self.n_patches()
            )));
        }
        Ok(())
    }

    /// `[1, L] -> [D, K]`.
    pub fn encode_channel(&self, x: &Tensor) -> Result<Tensor> {
        let l = match x.shape() {
            [1, l] | [l] => *l,
            s => return Err(shape_err("encode_channel", s, &[1])),
        };
        let z = self.encode_batch(&x.reshape(&[1, l])?)?;
        z.reshape(&[self.n_patches(), self.config.d_model])?
            .transpose()
    }

    /// `[N, L] -> [N, D, K]`, every channel through the same parameters.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let n = match x.shape() {
            [n, _] => *n,
            s => return Err(shape_err("encode", s, &[])),
        };
        let z = self.encode_batch(x)?;
        let (k, d) = (self.n_patches(), self.config.d_model);
        let mut tape = Tape::new();
        let zv = tape.constant(z);
        let zt = tape.permute(zv, &[0, 2, 1])?;
        debug_assert_eq!(tape.shape(zt), &[n, d, k]);
        Ok(tape.value(zt).clone())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new("backbone", &self.config, &self.store)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind("backbone")?;
        let mut b = Self::new(ckpt.config()?, 0)?;
        ckpt.restore_into(&mut b.store)?;
        Ok(b)
    }
}
