use serde::{Deserialize, Serialize};

use super::decoder::VIRTUAL_TOKENS;
use super::GeneratorError;
use crate::hgt::HgtModel;
use crate::numerics::{head_width, multi_head_attention, Bound, Graph, Linear, ParamId, ParamStore, SeedStream, Tensor, Var};
use crate::session_graph::{NodeType, PointGraph};

pub const PROJECTOR_GROUP: &str = "projector";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftPromptConfig {
    pub heads: usize,
    pub projector_hidden: usize,
    pub gate_init: f64,
}

impl Default for SoftPromptConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            projector_hidden: 256,
            gate_init: 0.5,
        }
    }
}

/// Node states around one intervention point: the seeker node and every
/// utterance and lexicon node of its truncated subgraph.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphContext {
    pub query: Tensor<f64>,
    pub nodes: Tensor<f64>,
}

/// Query row and key/value rows from graph-transformer states.
pub fn context_vars(g: &Graph<f64>, states: &crate::hgt::NodeStates, point: &PointGraph) -> Result<(Var, Var), GeneratorError> {
    let u = states
        .of(NodeType::Utterance)
        .ok_or_else(|| GeneratorError::Invalid("point graph has no utterance nodes".into()))?;
    let query = g.gather_rows(u, &[point.target])?;
    let nodes = match states.of(NodeType::Lexicon) {
        Some(l) => g.concat_rows(&[u, l])?,
        None => u,
    };
    Ok((query, nodes))
}

/// Runs the frozen graph transformer on a point and keeps the states.
pub fn graph_context(hgt: &HgtModel, point: &PointGraph) -> Result<GraphContext, GeneratorError> {
    let g = Graph::inference();
    let p = hgt.store.bind(&g);
    let states = hgt.forward(&g, &p, &point.graph)?;
    let (q, n) = context_vars(&g, &states, point)?;
    Ok(GraphContext {
        query: (*g.value(q)).clone(),
        nodes: (*g.value(n)).clone(),
    })
}

/// Cross-attention from the seeker node over its context, a two-layer
/// projector to the virtual tokens, and the gate.
#[derive(Clone, Debug)]
pub struct SoftPromptHead {
    pub config: SoftPromptConfig,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub projector_in: Linear,
    pub projector_out: Linear,
    pub gate: ParamId,
    width: usize,
}

impl SoftPromptHead {
    pub fn new(
        store: &mut ParamStore<f64>,
        config: SoftPromptConfig,
        graph_width: usize,
        decoder_width: usize,
        seed: u64,
    ) -> Result<Self, GeneratorError> {
        head_width(graph_width, config.heads)?;
        let seeds = SeedStream::new(seed).child("soft-prompt-init");
        let h = graph_width;
        let g = PROJECTOR_GROUP;
        Ok(Self {
            query: Linear::new(store, "graph_attention.query", h, h, true, g, &seeds)?,
            key: Linear::new(store, "graph_attention.key", h, h, true, g, &seeds)?,
            value: Linear::new(store, "graph_attention.value", h, h, true, g, &seeds)?,
            projector_in: Linear::new(store, "projector.in", h, config.projector_hidden, true, g, &seeds)?,
            projector_out: Linear::new(store, "projector.out", config.projector_hidden, VIRTUAL_TOKENS * decoder_width, true, g, &seeds)?,
            gate: store.insert("gate", Tensor::scalar(config.gate_init), g)?,
            width: decoder_width,
            config,
        })
    }

    /// Context vector `[1, graph_width]` and per-head weights `[1, nodes]`.
    pub fn attend(&self, g: &Graph<f64>, p: &Bound, query: Var, nodes: Var) -> Result<(Var, Vec<Var>), GeneratorError> {
        if g.shape(nodes)[0] == 0 {
            return Err(GeneratorError::Invalid("empty graph context".into()));
        }
        let q = self.query.forward(g, p, query)?;
        let k = self.key.forward(g, p, nodes)?;
        let v = self.value.forward(g, p, nodes)?;
        Ok(multi_head_attention(g, q, k, v, self.config.heads, None)?)
    }

    /// Projector output before the gate, `[VIRTUAL_TOKENS, width]`.
    pub fn project(&self, g: &Graph<f64>, p: &Bound, context: Var) -> Result<Var, GeneratorError> {
        let h = g.gelu(self.projector_in.forward(g, p, context)?);
        let out = self.projector_out.forward(g, p, h)?;
        Ok(g.reshape(out, &[VIRTUAL_TOKENS, self.width])?)
    }

    /// Gated virtual tokens for a query and its context nodes.
    pub fn soft_prompt(&self, g: &Graph<f64>, p: &Bound, query: Var, nodes: Var) -> Result<Var, GeneratorError> {
        let (ctx, _) = self.attend(g, p, query, nodes)?;
        let raw = self.project(g, p, ctx)?;
        Ok(g.scale_by(raw, p.var(self.gate))?)
    }
}
