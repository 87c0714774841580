//! Small pre-norm transformer encoder-decoder with tied output embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::nn::{Linear, Mlp, INIT_STD};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Var};
use crate::vocab::{TokenId, BOS, EOS};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub ffn_width: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
}

impl SeqConfig {
    pub fn small(vocab_size: usize) -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            ffn_width: 128,
            max_positions: 512,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Invalid(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size <= EOS as usize {
            return Err(Error::Invalid("vocabulary smaller than reserved ids".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gain: store.filled(&format!("{name}.gain"), &[1, width], 1.0)?,
            bias: store.zeros(&format!("{name}.bias"), &[1, width])?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Clone, Copy, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, true, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, true, rng)?,
            o: Linear::new(store, &format!("{name}.o"), d, d, true, rng)?,
            heads,
        })
    }

    /// `mask[i * keys + j]` says whether query `i` may look at key `j`.
    fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        queries: Var,
        keys: Var,
        mask: &[bool],
    ) -> Result<Var> {
        let q = self.q.forward(g, queries)?;
        let k = self.k.forward(g, keys)?;
        let v = self.v.forward(g, keys)?;
        let d = self.q.output;
        let dh = d / self.heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let s = g.matmul_bt(qh, kh)?;
            let s = g.scale(s, scale);
            let a = g.softmax_rows(s, Some(mask))?;
            outs.push(g.matmul(a, vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        self.o.forward(g, cat)
    }
}

#[derive(Clone, Copy, Debug)]
struct EncoderLayer {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ffn: Mlp,
}

#[derive(Clone, Copy, Debug)]
struct DecoderLayer {
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    cross: Attention,
    ln3: LayerNorm,
    ffn: Mlp,
}

/// Encoder output rows plus the key mask they were computed with.
#[derive(Clone, Debug)]
pub struct EncoderStates {
    pub states: Var,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct SeqModel {
    pub config: SeqConfig,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    enc: Vec<EncoderLayer>,
    enc_norm: LayerNorm,
    dec: Vec<DecoderLayer>,
    dec_norm: LayerNorm,
}

fn full_mask(rows: usize, key_mask: &[bool]) -> Vec<bool> {
    let mut m = Vec::with_capacity(rows * key_mask.len());
    for _ in 0..rows {
        m.extend_from_slice(key_mask);
    }
    m
}

fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|i| i % n <= i / n).collect()
}

impl SeqModel {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        config: SeqConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let token_embedding = store.normal("seq.tok", &[config.vocab_size, d], INIT_STD, rng)?;
        let position_embedding =
            store.normal("seq.pos", &[config.max_positions, d], INIT_STD, rng)?;
        let mut enc = Vec::new();
        for l in 0..config.n_enc_layers {
            let p = format!("seq.enc{l}");
            enc.push(EncoderLayer {
                ln1: LayerNorm::new(store, &format!("{p}.ln1"), d)?,
                attn: Attention::new(store, &format!("{p}.attn"), d, config.n_heads, rng)?,
                ln2: LayerNorm::new(store, &format!("{p}.ln2"), d)?,
                ffn: Mlp::new(store, &format!("{p}.ffn"), d, config.ffn_width, d, rng)?,
            });
        }
        let enc_norm = LayerNorm::new(store, "seq.enc_norm", d)?;
        let mut dec = Vec::new();
        for l in 0..config.n_dec_layers {
            let p = format!("seq.dec{l}");
            dec.push(DecoderLayer {
                ln1: LayerNorm::new(store, &format!("{p}.ln1"), d)?,
                self_attn: Attention::new(store, &format!("{p}.self"), d, config.n_heads, rng)?,
                ln2: LayerNorm::new(store, &format!("{p}.ln2"), d)?,
                cross: Attention::new(store, &format!("{p}.cross"), d, config.n_heads, rng)?,
                ln3: LayerNorm::new(store, &format!("{p}.ln3"), d)?,
                ffn: Mlp::new(store, &format!("{p}.ffn"), d, config.ffn_width, d, rng)?,
            });
        }
        let dec_norm = LayerNorm::new(store, "seq.dec_norm", d)?;
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            enc,
            enc_norm,
            dec,
            dec_norm,
        })
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if let Some(t) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::Invalid(format!(
                "token id {t} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Token embedding rows only, `n × d`.
    pub fn embed_tokens<T: Real>(&self, g: &mut Graph<'_, T>, tokens: &[TokenId]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Empty("empty token sequence".into()));
        }
        self.check_tokens(tokens)?;
        let table = g.param(self.token_embedding);
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        g.gather_rows(table, &idx)
    }

    /// Adds positional rows `0..n` to `x`.
    pub fn add_positions<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (n, _) = g.shape(x);
        if n > self.config.max_positions {
            return Err(Error::Invalid(format!(
                "sequence of {n} exceeds {} positions",
                self.config.max_positions
            )));
        }
        let table = g.param(self.position_embedding);
        let pos = g.slice_rows(table, 0, n)?;
        g.add(x, pos)
    }

    pub fn embed<T: Real>(&self, g: &mut Graph<'_, T>, tokens: &[TokenId]) -> Result<Var> {
        let x = self.embed_tokens(g, tokens)?;
        self.add_positions(g, x)
    }

    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        embedded: Var,
        mask: &[bool],
    ) -> Result<EncoderStates> {
        let (n, _) = g.shape(embedded);
        if mask.len() != n {
            return Err(Error::shape(
                "encode",
                format!("{n} rows, mask of {}", mask.len()),
            ));
        }
        let attn_mask = full_mask(n, mask);
        let mut x = embedded;
        for layer in &self.enc {
            let h = layer.ln1.forward(g, x)?;
            let a = layer.attn.forward(g, h, h, &attn_mask)?;
            x = g.add(x, a)?;
            let h = layer.ln2.forward(g, x)?;
            let f = layer.ffn.forward(g, h)?;
            x = g.add(x, f)?;
        }
        let states = self.enc_norm.forward(g, x)?;
        Ok(EncoderStates {
            states,
            mask: mask.to_vec(),
        })
    }

    /// Decoder pass over `inputs` (starting with BOS). Row `t` of the
    /// returned logits predicts the token after `inputs[t]`; the second value
    /// holds the final decoder states.
    pub fn teacher_forced<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        enc: &EncoderStates,
        inputs: &[TokenId],
    ) -> Result<(Var, Var)> {
        if inputs.first() != Some(&BOS) {
            return Err(Error::Invalid("decoder input must start with BOS".into()));
        }
        let n = inputs.len();
        let self_mask = causal_mask(n);
        let cross_mask = full_mask(n, &enc.mask);
        let mut x = self.embed(g, inputs)?;
        for layer in &self.dec {
            let h = layer.ln1.forward(g, x)?;
            let a = layer.self_attn.forward(g, h, h, &self_mask)?;
            x = g.add(x, a)?;
            let h = layer.ln2.forward(g, x)?;
            let c = layer.cross.forward(g, h, enc.states, &cross_mask)?;
            x = g.add(x, c)?;
            let h = layer.ln3.forward(g, x)?;
            let f = layer.ffn.forward(g, h)?;
            x = g.add(x, f)?;
        }
        let hidden = self.dec_norm.forward(g, x)?;
        let table = g.param(self.token_embedding);
        let logits = g.matmul_bt(hidden, table)?;
        Ok((logits, hidden))
    }

    /// Greedy decoding, ties to the lowest id. The returned tokens exclude
    /// BOS and EOS.
    pub fn greedy_decode<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        enc: &EncoderStates,
        max_len: usize,
    ) -> Result<Vec<TokenId>> {
        let max_len = max_len.min(self.config.max_positions.saturating_sub(1));
        let mut inputs = vec![BOS];
        let mut out = Vec::new();
        while out.len() < max_len {
            let (logits, _) = self.teacher_forced(g, enc, &inputs)?;
            let t = g.value(logits);
            let last = t.row(t.rows() - 1);
            let mut best = 0;
            for (i, &v) in last.iter().enumerate() {
                if v > last[best] {
                    best = i;
                }
            }
            let tok = best as TokenId;
            if tok == EOS {
                break;
            }
            out.push(tok);
            inputs.push(tok);
        }
        Ok(out)
    }
}

/// `[BOS] + y` and `y + [EOS]`.
pub fn decoder_io(response: &[TokenId]) -> (Vec<TokenId>, Vec<TokenId>) {
    let mut input = Vec::with_capacity(response.len() + 1);
    input.push(BOS);
    input.extend_from_slice(response);
    let mut target = response.to_vec();
    target.push(EOS);
    (input, target)
}

/// Sum of log-softmax at the target ids over rows where `mask` is set.
pub fn sequence_log_likelihood<T: Real>(
    g: &mut Graph<'_, T>,
    logits: Var,
    targets: &[TokenId],
    mask: &[bool],
) -> Result<Var> {
    let t: Vec<usize> = targets.iter().map(|&x| x as usize).collect();
    let w: Vec<T> = mask
        .iter()
        .map(|&m| if m { T::one() } else { T::zero() })
        .collect();
    g.log_softmax_pick(logits, &t, &w)
}
