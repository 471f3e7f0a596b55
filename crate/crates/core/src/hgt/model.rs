use serde::{Deserialize, Serialize};

use super::HgtError;
use crate::numerics::{
    head_width, Bound, Checkpoint, Graph, Linear, NumericsError, ParamId, ParamStore, SeedStream, Tensor, Var,
};
use crate::session_graph::{BatchedGraph, GraphAblation, HeteroGraph, NodeType, PointGraph, META_RELATIONS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HgtConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Width of the trainable lexicon and distress category embeddings.
    pub category_width: usize,
    pub utterance_input: usize,
    pub conversation_input: usize,
    pub lexicon_categories: usize,
    pub distress_categories: usize,
    pub ablation: GraphAblation,
    pub seed: u64,
}

impl Default for HgtConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            layers: 2,
            heads: 4,
            dropout: 0.2,
            category_width: 32,
            utterance_input: crate::session_graph::DEFAULT_ENCODER_WIDTH + 1,
            conversation_input: 6,
            lexicon_categories: 20,
            distress_categories: 29,
            ablation: GraphAblation::Full,
            seed: 42,
        }
    }
}

impl HgtConfig {
    /// Meta-relation slots that carry parameters for this ablation.
    pub fn registered_relations(&self) -> Vec<usize> {
        match self.ablation {
            GraphAblation::Full => (0..META_RELATIONS.len()).collect(),
            GraphAblation::TemporalOnly | GraphAblation::NoGraph => vec![0, 1],
        }
    }

    fn validate(&self) -> Result<(), HgtError> {
        head_width(self.hidden, self.heads)?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(HgtError::Invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.layers == 0 || self.category_width == 0 || self.utterance_input == 0 {
            return Err(HgtError::Invalid("zero-sized layer".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct TypeBlock {
    key: Linear,
    query: Linear,
    value: Linear,
    out: Linear,
}

#[derive(Clone, Debug)]
struct RelationBlock {
    att: ParamId,
    msg: ParamId,
    mu: ParamId,
}

#[derive(Clone, Debug)]
struct Layer {
    types: Vec<TypeBlock>,
    relations: Vec<Option<RelationBlock>>,
}

#[derive(Clone, Debug)]
struct Layout {
    input: Vec<Linear>,
    lexicon_embedding: ParamId,
    distress_embedding: ParamId,
    layers: Vec<Layer>,
    head: Linear,
}

/// Attention weights of one layer for one target node type: rows follow
/// `edges` (relation slot, source, target); columns are heads.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub layer: usize,
    pub target_type: NodeType,
    pub edges: Vec<(usize, usize, usize)>,
    pub weights: Var,
}

pub struct NodeStates {
    pub states: [Option<Var>; 4],
    pub attention: Vec<AttentionRecord>,
}

impl NodeStates {
    pub fn of(&self, t: NodeType) -> Option<Var> {
        self.states[t.index()]
    }
}

#[derive(Clone, Debug)]
pub struct HgtModel {
    pub config: HgtConfig,
    pub store: ParamStore<f64>,
    layout: Layout,
}

pub const CHECKPOINT_KIND: &str = "hgt-classifier";

impl HgtModel {
    pub fn new(config: HgtConfig) -> Result<Self, HgtError> {
        config.validate()?;
        let seeds = SeedStream::new(config.seed).child("hgt-init");
        let mut store = ParamStore::new();
        let h = config.hidden;
        let dk = h / config.heads;
        let group = "hgt";
        let cw = config.category_width;
        let input = vec![
            Linear::new(&mut store, "input.utterance", config.utterance_input, h, true, group, &seeds)?,
            Linear::new(&mut store, "input.conversation", config.conversation_input, h, true, group, &seeds)?,
            Linear::new(&mut store, "input.lexicon", cw, h, true, group, &seeds)?,
            Linear::new(&mut store, "input.distress", cw, h, true, group, &seeds)?,
        ];
        let lexicon_embedding =
            store.insert_uniform("embedding.lexicon", &[config.lexicon_categories.max(1), cw], cw, group, &seeds)?;
        let distress_embedding =
            store.insert_uniform("embedding.distress", &[config.distress_categories.max(1), cw], cw, group, &seeds)?;
        let registered = config.registered_relations();
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let mut types = Vec::new();
            for t in NodeType::ALL {
                let n = format!("layer{l}.{}", t.name());
                types.push(TypeBlock {
                    key: Linear::new(&mut store, &format!("{n}.key"), h, h, true, group, &seeds)?,
                    query: Linear::new(&mut store, &format!("{n}.query"), h, h, true, group, &seeds)?,
                    value: Linear::new(&mut store, &format!("{n}.value"), h, h, true, group, &seeds)?,
                    out: Linear::new(&mut store, &format!("{n}.out"), h, h, true, group, &seeds)?,
                });
            }
            let mut relations = vec![None; META_RELATIONS.len()];
            for &r in &registered {
                let n = format!("layer{l}.{}", META_RELATIONS[r].name());
                relations[r] = Some(RelationBlock {
                    att: store.insert_uniform(format!("{n}.att"), &[h, dk], dk, group, &seeds)?,
                    msg: store.insert_uniform(format!("{n}.msg"), &[h, dk], dk, group, &seeds)?,
                    mu: store.insert(format!("{n}.mu"), Tensor::scalar(1.0), group)?,
                });
            }
            layers.push(Layer { types, relations });
        }
        let head = Linear::new(&mut store, "head", h, 3, true, group, &seeds)?;
        Ok(Self {
            config,
            store,
            layout: Layout {
                input,
                lexicon_embedding,
                distress_embedding,
                layers,
                head,
            },
        })
    }

    /// Sets the classification head to zero (probabilities become 0.5).
    pub fn zero_head(&mut self) {
        let w = self.layout.head.weight;
        self.store.update(w, |t| t.data_mut().fill(0.0));
        if let Some(b) = self.layout.head.bias {
            self.store.update(b, |t| t.data_mut().fill(0.0));
        }
    }

    fn input_states(&self, g: &Graph<f64>, p: &Bound, graph: &HeteroGraph) -> Result<[Option<Var>; 4], HgtError> {
        let mut out = [None; 4];
        for t in NodeType::ALL {
            if graph.node_count(t) == 0 {
                continue;
            }
            let x = match t {
                NodeType::Utterance => g.constant(graph.utterance_features.clone()),
                NodeType::Conversation => g.constant(graph.conversation_features.clone()),
                NodeType::Lexicon => g.gather_rows(p.var(self.layout.lexicon_embedding), &graph.lexicon_ids)?,
                NodeType::Distress => g.gather_rows(p.var(self.layout.distress_embedding), &graph.distress_ids)?,
            };
            out[t.index()] = Some(g.gelu(self.layout.input[t.index()].forward(g, p, x)?));
        }
        Ok(out)
    }

    /// Final hidden state of every node.
    pub fn forward(&self, g: &Graph<f64>, p: &Bound, graph: &HeteroGraph) -> Result<NodeStates, HgtError> {
        for (r, e) in graph.edges.iter().enumerate() {
            if !e.is_empty() && self.layout.layers.iter().any(|l| l.relations[r].is_none()) {
                return Err(HgtError::UnregisteredRelation(META_RELATIONS[r].name()));
            }
        }
        let heads = self.config.heads;
        let dk = self.config.hidden / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        // canonical edge order so aggregation does not depend on insertion order
        let edges: Vec<Vec<(usize, usize)>> = graph
            .edges
            .iter()
            .map(|e| {
                let mut e = e.clone();
                e.sort_unstable_by_key(|&(s, t)| (t, s));
                e
            })
            .collect();

        let mut h = self.input_states(g, p, graph)?;
        let mut attention = Vec::new();
        for (li, layer) in self.layout.layers.iter().enumerate() {
            let mut kqv: [Option<(Var, Var, Var)>; 4] = [None; 4];
            for t in NodeType::ALL {
                if let Some(x) = h[t.index()] {
                    let b = &layer.types[t.index()];
                    kqv[t.index()] = Some((b.key.forward(g, p, x)?, b.query.forward(g, p, x)?, b.value.forward(g, p, x)?));
                }
            }
            let mut next = h;
            for target in NodeType::ALL {
                let n_t = graph.node_count(target);
                if n_t == 0 {
                    continue;
                }
                let mut logits_parts = Vec::new();
                let mut msg_parts = Vec::new();
                let mut dst_all = Vec::new();
                let mut record = Vec::new();
                for (r, m) in META_RELATIONS.iter().enumerate() {
                    if m.target != target || edges[r].is_empty() {
                        continue;
                    }
                    let rb = layer.relations[r].as_ref().expect("registered relation");
                    let src: Vec<usize> = edges[r].iter().map(|e| e.0).collect();
                    let dst: Vec<usize> = edges[r].iter().map(|e| e.1).collect();
                    let (ks, _, vs) = kqv[m.source.index()].expect("source states");
                    let (_, qt, _) = kqv[target.index()].expect("target states");
                    let kg = g.gather_rows(ks, &src)?;
                    let vg = g.gather_rows(vs, &src)?;
                    let qg = g.gather_rows(qt, &dst)?;
                    let att = p.var(rb.att);
                    let msg = p.var(rb.msg);
                    let mut head_logits = Vec::with_capacity(heads);
                    let mut head_msgs = Vec::with_capacity(heads);
                    for hh in 0..heads {
                        let (a, b) = (hh * dk, (hh + 1) * dk);
                        let k = g.matmul(g.slice_cols(kg, a, b)?, g.slice_rows(att, a, b)?)?;
                        let q = g.slice_cols(qg, a, b)?;
                        head_logits.push(g.row_sum(g.mul(k, q)?));
                        head_msgs.push(g.matmul(g.slice_cols(vg, a, b)?, g.slice_rows(msg, a, b)?)?);
                    }
                    let logits = g.scale(g.scale_by(g.concat_cols(&head_logits)?, p.var(rb.mu))?, scale);
                    logits_parts.push(logits);
                    msg_parts.push(g.concat_cols(&head_msgs)?);
                    dst_all.extend_from_slice(&dst);
                    record.extend(edges[r].iter().map(|&(s, t)| (r, s, t)));
                }
                if dst_all.is_empty() {
                    continue;
                }
                let logits = g.concat_rows(&logits_parts)?;
                let msgs = g.concat_rows(&msg_parts)?;
                let weights = g.segment_softmax(logits, &dst_all, n_t)?;
                let mut weighted = Vec::with_capacity(heads);
                for hh in 0..heads {
                    let w = g.slice_cols(weights, hh, hh + 1)?;
                    weighted.push(g.mul_col(g.slice_cols(msgs, hh * dk, (hh + 1) * dk)?, w)?);
                }
                let agg = g.scatter_add_rows(g.concat_cols(&weighted)?, &dst_all, n_t)?;
                let upd = layer.types[target.index()].out.forward(g, p, g.gelu(agg))?;
                let upd = g.dropout(upd, self.config.dropout)?;
                let mut has_in = vec![0.0; n_t];
                for &d in &dst_all {
                    has_in[d] = 1.0;
                }
                let upd = g.mul_col(upd, g.constant(Tensor::new(vec![n_t, 1], has_in)?))?;
                next[target.index()] = Some(g.add(h[target.index()].expect("target states"), upd)?);
                attention.push(AttentionRecord {
                    layer: li,
                    target_type: target,
                    edges: record,
                    weights,
                });
            }
            h = next;
        }
        Ok(NodeStates { states: h, attention })
    }

    /// Head logits `[targets, 3]` for the target utterance nodes.
    pub fn logits(&self, g: &Graph<f64>, p: &Bound, batched: &BatchedGraph) -> Result<Var, HgtError> {
        let states = self.forward(g, p, &batched.graph)?;
        let u = states
            .of(NodeType::Utterance)
            .ok_or_else(|| HgtError::Invalid("graph has no utterance nodes".into()))?;
        let rows = g.gather_rows(u, &batched.targets)?;
        Ok(self.layout.head.forward(g, p, rows)?)
    }

    pub fn predict_batch(&self, points: &[&PointGraph]) -> Result<Vec<[f64; 3]>, HgtError> {
        if points.is_empty() {
            return Ok(Vec::new());
        }
        for pg in points {
            let node = pg
                .graph
                .utterances
                .get(pg.target)
                .ok_or_else(|| HgtError::Invalid(format!("target node {} missing", pg.target)))?;
            if node.speaker != crate::corpus::Speaker::HelpSeeker {
                return Err(HgtError::NotSeeker(pg.target));
            }
        }
        let batched = crate::session_graph::batch(points);
        let g = Graph::inference();
        let p = self.store.bind(&g);
        let probs = g.value(g.sigmoid(self.logits(&g, &p, &batched)?));
        Ok(probs.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn predict(&self, point: &PointGraph) -> Result<[f64; 3], HgtError> {
        Ok(self.predict_batch(&[point])?[0])
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Result<Checkpoint, HgtError> {
        let config = serde_json::to_value(&self.config).map_err(|e| HgtError::Invalid(e.to_string()))?;
        let mut ck = Checkpoint::new(CHECKPOINT_KIND, config);
        ck.add_store("", &self.store);
        ck.extra = extra;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, HgtError> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(NumericsError::Checkpoint(format!("expected {CHECKPOINT_KIND}, found {}", ck.kind)).into());
        }
        let config: HgtConfig =
            serde_json::from_value(ck.config.clone()).map_err(|e| HgtError::Invalid(e.to_string()))?;
        let mut m = Self::new(config)?;
        ck.load_store("", &mut m.store)?;
        Ok(m)
    }
}
