use std::collections::BTreeMap;

use super::types::{DISTRESS, HIERARCHICAL, LEXICON, TEMPORAL};
use super::{GraphAblation, GraphError, GraphMode, HeteroGraph, UtteranceEncoder, UtteranceNode};
use crate::corpus::{normalized_position, Session, Speaker, Taxonomy};
use crate::lexicon::Lexicon;
use crate::numerics::Tensor;

/// Lower and upper age bounds for min-max scaling of the age feature.
pub const AGE_BOUNDS: (f64, f64) = (10.0, 90.0);

/// Everything needed to turn sessions into graphs.
#[derive(Clone, Copy, Debug)]
pub struct GraphInputs<'a> {
    pub lexicon: &'a Lexicon,
    pub taxonomy: &'a Taxonomy,
    pub encoder: &'a UtteranceEncoder,
}

/// Gender one-hot, scaled age, then missing-age and missing-gender bits.
pub fn conversation_width(taxonomy: &Taxonomy) -> usize {
    taxonomy.genders.len() + 3
}

pub fn conversation_features(
    age: Option<i64>,
    gender: Option<&str>,
    taxonomy: &Taxonomy,
) -> Result<Vec<f64>, GraphError> {
    let g = taxonomy.genders.len();
    let mut v = vec![0.0; g + 3];
    match gender {
        Some(x) => {
            let i = taxonomy
                .gender_index(x)
                .ok_or_else(|| GraphError::UnknownGender(x.to_string()))?;
            v[i] = 1.0;
        }
        None => v[g + 2] = 1.0,
    }
    match age {
        Some(a) => v[g] = ((a as f64 - AGE_BOUNDS.0) / (AGE_BOUNDS.1 - AGE_BOUNDS.0)).clamp(0.0, 1.0),
        None => v[g + 1] = 1.0,
    }
    Ok(v)
}

struct Builder<'a> {
    inputs: GraphInputs<'a>,
    mode: GraphMode,
    features: Vec<f64>,
    utterances: Vec<UtteranceNode>,
    conv_features: Vec<f64>,
    conversations: Vec<String>,
    edges: [Vec<(usize, usize)>; 8],
}

impl<'a> Builder<'a> {
    fn new(inputs: GraphInputs<'a>, mode: GraphMode) -> Self {
        Self {
            inputs,
            mode,
            features: Vec::new(),
            utterances: Vec::new(),
            conv_features: Vec::new(),
            conversations: Vec::new(),
            edges: Default::default(),
        }
    }

    /// Adds the first `len` utterances of `session`. Category node ids are
    /// catalogue indexes.
    fn add_session(&mut self, session: &Session, len: usize) -> Result<(), GraphError> {
        let tax = self.inputs.taxonomy;
        let conv = self.conversations.len();
        self.conversations.push(session.id.clone());
        self.conv_features
            .extend(conversation_features(session.age, session.gender.as_deref(), tax)?);
        let mut distress = Vec::with_capacity(session.distress.len());
        for d in &session.distress {
            let i = tax
                .distress_index(d)
                .ok_or_else(|| GraphError::UnknownDistress(d.clone()))?;
            if !distress.contains(&i) {
                distress.push(i);
            }
        }
        if self.mode == GraphMode::Train {
            for i in distress {
                self.edges[DISTRESS].push((conv, i));
            }
        }
        let base = self.utterances.len();
        for (k, u) in session.utterances[..len].iter().enumerate() {
            let node = base + k;
            let position = normalized_position(k, len);
            self.features.extend(self.inputs.encoder.encode(&u.text));
            self.features.push(position);
            self.utterances.push(UtteranceNode {
                session: conv,
                turn: k,
                speaker: u.speaker,
                position,
            });
            if k > 0 {
                self.edges[TEMPORAL].push((node - 1, node));
            }
            self.edges[HIERARCHICAL].push((node, conv));
            if u.speaker == Speaker::HelpSeeker {
                let mut cats: Vec<usize> = self
                    .inputs
                    .lexicon
                    .annotate(&u.text)
                    .iter()
                    .filter_map(|m| self.inputs.lexicon.index_of(&m.category_id))
                    .collect();
                cats.sort_unstable();
                cats.dedup();
                for c in cats {
                    self.edges[LEXICON].push((node, c));
                }
            }
        }
        Ok(())
    }

    fn finish(mut self, prune: bool) -> HeteroGraph {
        let width = self.inputs.encoder.width() + 1;
        let conv_width = conversation_width(self.inputs.taxonomy);
        let (lexicon_ids, distress_ids) = if prune {
            let lex = remap_targets(&mut self.edges[LEXICON]);
            let dis = remap_targets(&mut self.edges[DISTRESS]);
            (lex, dis)
        } else {
            (
                (0..self.inputs.lexicon.len()).collect(),
                (0..self.inputs.taxonomy.distress_catalogue.len()).collect(),
            )
        };
        for r in (0..8).step_by(2) {
            self.edges[r + 1] = self.edges[r].iter().map(|&(a, b)| (b, a)).collect();
        }
        HeteroGraph {
            utterance_features: Tensor::new(vec![self.utterances.len(), width], self.features)
                .expect("feature width"),
            utterances: self.utterances,
            conversation_features: Tensor::new(vec![self.conversations.len(), conv_width], self.conv_features)
                .expect("conversation width"),
            conversations: self.conversations,
            lexicon_ids,
            distress_ids,
            edges: self.edges,
        }
    }
}

/// Renumbers edge targets densely in first-seen order; returns the
/// original id of each new node.
fn remap_targets(edges: &mut [(usize, usize)]) -> Vec<usize> {
    let mut ids: Vec<usize> = edges.iter().map(|e| e.1).collect();
    ids.sort_unstable();
    ids.dedup();
    let map: BTreeMap<usize, usize> = ids.iter().enumerate().map(|(new, &old)| (old, new)).collect();
    for e in edges.iter_mut() {
        e.1 = map[&e.1];
    }
    ids
}

/// Corpus-wide graph with one shared node per lexicon and distress category.
pub fn build_graph(sessions: &[Session], inputs: GraphInputs<'_>, mode: GraphMode) -> Result<HeteroGraph, GraphError> {
    let mut b = Builder::new(inputs, mode);
    for s in sessions {
        b.add_session(s, s.utterances.len())?;
    }
    Ok(b.finish(false))
}

/// Session subgraph truncated at an intervention point.
#[derive(Clone, Debug, PartialEq)]
pub struct PointGraph {
    pub graph: HeteroGraph,
    /// Utterance node of the intervention point.
    pub target: usize,
}

/// Subgraph of `session` up to and including `seeker_index`, keeping only
/// category nodes that are linked, then reduced according to `ablation`.
pub fn point_subgraph(
    session: &Session,
    seeker_index: usize,
    inputs: GraphInputs<'_>,
    mode: GraphMode,
    ablation: GraphAblation,
) -> Result<PointGraph, GraphError> {
    match session.utterances.get(seeker_index) {
        Some(u) if u.speaker == Speaker::HelpSeeker => {}
        _ => {
            return Err(GraphError::NotSeeker {
                session: session.id.clone(),
                index: seeker_index,
            })
        }
    }
    let mut b = Builder::new(inputs, mode);
    b.add_session(session, seeker_index + 1)?;
    let mut graph = b.finish(true);
    if ablation != GraphAblation::Full {
        graph.conversation_features = Tensor::zeros(&[0, graph.conversation_features.cols()]);
        graph.conversations.clear();
        graph.lexicon_ids.clear();
        graph.distress_ids.clear();
        for (r, e) in graph.edges.iter_mut().enumerate() {
            if r >= 2 || ablation == GraphAblation::NoGraph {
                e.clear();
            }
        }
    }
    Ok(PointGraph {
        graph,
        target: seeker_index,
    })
}

/// Block-diagonal union of point subgraphs.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchedGraph {
    pub graph: HeteroGraph,
    pub targets: Vec<usize>,
}

pub fn batch(parts: &[&PointGraph]) -> BatchedGraph {
    assert!(!parts.is_empty(), "batch of zero graphs");
    let uw = parts[0].graph.utterance_features.cols();
    let cw = parts[0].graph.conversation_features.cols();
    let mut uf = Vec::new();
    let mut cf = Vec::new();
    let mut utterances = Vec::new();
    let mut conversations = Vec::new();
    let mut lexicon_ids = Vec::new();
    let mut distress_ids = Vec::new();
    let mut edges: [Vec<(usize, usize)>; 8] = Default::default();
    let mut targets = Vec::with_capacity(parts.len());
    for p in parts {
        let g = &p.graph;
        let off = [utterances.len(), conversations.len(), lexicon_ids.len(), distress_ids.len()];
        targets.push(off[0] + p.target);
        uf.extend_from_slice(g.utterance_features.data());
        cf.extend_from_slice(g.conversation_features.data());
        utterances.extend(g.utterances.iter().map(|u| UtteranceNode {
            session: u.session + off[1],
            ..u.clone()
        }));
        conversations.extend(g.conversations.iter().cloned());
        lexicon_ids.extend_from_slice(&g.lexicon_ids);
        distress_ids.extend_from_slice(&g.distress_ids);
        for (r, e) in g.edges.iter().enumerate() {
            let m = super::META_RELATIONS[r];
            let (so, to) = (off[m.source.index()], off[m.target.index()]);
            edges[r].extend(e.iter().map(|&(s, t)| (s + so, t + to)));
        }
    }
    BatchedGraph {
        graph: HeteroGraph {
            utterance_features: Tensor::new(vec![utterances.len(), uw], uf).expect("width"),
            utterances,
            conversation_features: Tensor::new(vec![conversations.len(), cw], cf).expect("width"),
            conversations,
            lexicon_ids,
            distress_ids,
            edges,
        },
        targets,
    }
}
