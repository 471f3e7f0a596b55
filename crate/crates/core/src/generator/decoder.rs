use serde::{Deserialize, Serialize};

use super::GeneratorError;
use crate::numerics::{
    causal_mask, head_width, multi_head_attention, Bound, Graph, LayerNorm, Linear, ParamId, ParamStore, SeedStream,
    Tensor, Var,
};

/// Number of virtual soft-prompt tokens; text positions start after them.
pub const VIRTUAL_TOKENS: usize = 8;

pub const BASE_GROUP: &str = "base";
pub const ADAPTER_GROUP: &str = "adapter";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    /// Maximum sequence length including the virtual tokens.
    pub context: usize,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            width: 128,
            layers: 4,
            heads: 4,
            context: 512,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            alpha: 32.0,
            dropout: 0.1,
        }
    }
}

impl AdapterConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// A frozen linear map plus an optional low-rank update `x·A·B·(α/r)`.
#[derive(Clone, Debug)]
struct AdaptedLinear {
    name: String,
    base: Linear,
    adapter: Option<(ParamId, ParamId)>,
}

impl AdaptedLinear {
    fn new(store: &mut ParamStore<f64>, name: &str, input: usize, output: usize, seeds: &SeedStream) -> Result<Self, GeneratorError> {
        Ok(Self {
            name: name.to_string(),
            base: Linear::new(store, name, input, output, true, BASE_GROUP, seeds)?,
            adapter: None,
        })
    }

    fn forward(&self, g: &Graph<f64>, p: &Bound, x: Var, adapters: &AdapterConfig) -> Result<Var, GeneratorError> {
        let y = self.base.forward(g, p, x)?;
        match self.adapter {
            None => Ok(y),
            Some((a, b)) => {
                let xd = g.dropout(x, adapters.dropout)?;
                let delta = g.matmul(g.matmul(xd, p.var(a))?, p.var(b))?;
                Ok(g.add(y, g.scale(delta, adapters.scale()))?)
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    query: AdaptedLinear,
    key: AdaptedLinear,
    value: AdaptedLinear,
    output: AdaptedLinear,
    ln2: LayerNorm,
    fc1: AdaptedLinear,
    fc2: AdaptedLinear,
}

impl Block {
    fn linears_mut(&mut self) -> [&mut AdaptedLinear; 6] {
        [&mut self.query, &mut self.key, &mut self.value, &mut self.output, &mut self.fc1, &mut self.fc2]
    }
}

/// Pre-norm transformer decoder with a GELU MLP and an output head tied to
/// the token embedding. Parameters live in a caller-owned store.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub adapters: Option<AdapterConfig>,
    tokens: ParamId,
    positions: ParamId,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
}

impl Decoder {
    pub fn new(store: &mut ParamStore<f64>, config: DecoderConfig) -> Result<Self, GeneratorError> {
        head_width(config.width, config.heads)?;
        if config.layers == 0 || config.vocab_size == 0 || config.context <= VIRTUAL_TOKENS {
            return Err(GeneratorError::Config("decoder needs layers, a vocabulary and room past the virtual tokens".into()));
        }
        let seeds = SeedStream::new(config.seed).child("decoder-init");
        let d = config.width;
        let tokens = store.insert_uniform("decoder.tokens", &[config.vocab_size, d], d, BASE_GROUP, &seeds)?;
        let positions = store.insert_uniform("decoder.positions", &[config.context, d], d, BASE_GROUP, &seeds)?;
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let n = format!("decoder.block{l}");
            blocks.push(Block {
                ln1: LayerNorm::new(store, &format!("{n}.ln1"), d, BASE_GROUP)?,
                query: AdaptedLinear::new(store, &format!("{n}.query"), d, d, &seeds)?,
                key: AdaptedLinear::new(store, &format!("{n}.key"), d, d, &seeds)?,
                value: AdaptedLinear::new(store, &format!("{n}.value"), d, d, &seeds)?,
                output: AdaptedLinear::new(store, &format!("{n}.output"), d, d, &seeds)?,
                ln2: LayerNorm::new(store, &format!("{n}.ln2"), d, BASE_GROUP)?,
                fc1: AdaptedLinear::new(store, &format!("{n}.fc1"), d, 4 * d, &seeds)?,
                fc2: AdaptedLinear::new(store, &format!("{n}.fc2"), 4 * d, d, &seeds)?,
            });
        }
        let final_norm = LayerNorm::new(store, "decoder.final_norm", d, BASE_GROUP)?;
        Ok(Self {
            config,
            adapters: None,
            tokens,
            positions,
            blocks,
            final_norm,
        })
    }

    /// Adds a rank-`r` adapter to every attention and MLP linear map.
    /// `A` is random, `B` is zero, so outputs are unchanged until trained.
    pub fn apply_adapters(&mut self, store: &mut ParamStore<f64>, config: AdapterConfig) -> Result<(), GeneratorError> {
        if config.rank == 0 || !(0.0..1.0).contains(&config.dropout) {
            return Err(GeneratorError::Config("adapter rank must be ≥ 1 and dropout in [0, 1)".into()));
        }
        if self.adapters.is_some() {
            return Err(GeneratorError::Config("adapters already applied".into()));
        }
        let seeds = SeedStream::new(self.config.seed).child("adapter-init");
        for block in &mut self.blocks {
            for lin in block.linears_mut() {
                let (i, o) = (lin.base.input, lin.base.output);
                let a = store.insert_uniform(format!("{}.lora_a", lin.name), &[i, config.rank], i, ADAPTER_GROUP, &seeds)?;
                let b = store.insert(format!("{}.lora_b", lin.name), Tensor::zeros(&[config.rank, o]), ADAPTER_GROUP)?;
                lin.adapter = Some((a, b));
            }
        }
        self.adapters = Some(config);
        Ok(())
    }

    /// Token embedding table, `[vocab, width]`.
    pub fn token_table(&self) -> ParamId {
        self.tokens
    }

    /// Final layer-norm gain and bias.
    pub fn final_norm(&self) -> (ParamId, ParamId) {
        (self.final_norm.gain, self.final_norm.bias)
    }

    /// Ids of every base (non-adapter) parameter.
    pub fn base_params(&self, store: &ParamStore<f64>) -> Vec<ParamId> {
        store
            .entries()
            .iter()
            .enumerate()
            .filter(|(_, e)| e.group == BASE_GROUP)
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    /// Next-token logits `[ids.len(), vocab]` for the text tokens.
    ///
    /// Text occupies positions `VIRTUAL_TOKENS..`. When `virtual_tokens`
    /// (`[VIRTUAL_TOKENS, width]`) is given, it fills positions
    /// `0..VIRTUAL_TOKENS`; if its value is all zeros those positions are
    /// masked as keys, which makes the text logits equal to the run without
    /// virtual tokens.
    pub fn logits(&self, g: &Graph<f64>, p: &Bound, virtual_tokens: Option<Var>, ids: &[usize]) -> Result<Var, GeneratorError> {
        let n = ids.len();
        if n == 0 {
            return Err(GeneratorError::Invalid("empty token sequence".into()));
        }
        if VIRTUAL_TOKENS + n > self.config.context {
            return Err(GeneratorError::ContextOverflow {
                tokens: n,
                context: self.config.context - VIRTUAL_TOKENS,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(GeneratorError::Invalid(format!("token id {bad} outside the vocabulary")));
        }
        let table = p.var(self.tokens);
        let pos = p.var(self.positions);
        let text_pos: Vec<usize> = (VIRTUAL_TOKENS..VIRTUAL_TOKENS + n).collect();
        let text = g.add(g.gather_rows(table, ids)?, g.gather_rows(pos, &text_pos)?)?;
        let (mut x, offset, blocked) = match virtual_tokens {
            None => (text, 0, Vec::new()),
            Some(v) => {
                if g.shape(v) != [VIRTUAL_TOKENS, self.config.width] {
                    return Err(GeneratorError::Invalid(format!("virtual tokens have shape {:?}", g.shape(v))));
                }
                let vp = g.add(v, g.gather_rows(pos, &(0..VIRTUAL_TOKENS).collect::<Vec<_>>())?)?;
                let blocked: Vec<usize> = if g.value(v).data().iter().all(|&z| z == 0.0) {
                    (0..VIRTUAL_TOKENS).collect()
                } else {
                    Vec::new()
                };
                (g.concat_rows(&[vp, text])?, VIRTUAL_TOKENS, blocked)
            }
        };
        let mask = causal_mask::<f64>(offset + n, &blocked);
        let none = AdapterConfig {
            rank: 1,
            alpha: 0.0,
            dropout: 0.0,
        };
        let ad = self.adapters.as_ref().unwrap_or(&none);
        for b in &self.blocks {
            let h = b.ln1.forward(g, p, x)?;
            let q = b.query.forward(g, p, h, ad)?;
            let k = b.key.forward(g, p, h, ad)?;
            let v = b.value.forward(g, p, h, ad)?;
            let (ctx, _) = multi_head_attention(g, q, k, v, self.config.heads, Some(&mask))?;
            x = g.add(x, b.output.forward(g, p, ctx, ad)?)?;
            let h = b.ln2.forward(g, p, x)?;
            let m = b.fc2.forward(g, p, g.gelu(b.fc1.forward(g, p, h, ad)?), ad)?;
            x = g.add(x, m)?;
        }
        if offset > 0 {
            x = g.slice_rows(x, offset, offset + n)?;
        }
        let h = self.final_norm.forward(g, p, x)?;
        Ok(g.matmul(h, g.transpose(table))?)
    }
}
