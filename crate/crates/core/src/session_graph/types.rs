use serde::{Deserialize, Serialize};

use super::GraphError;
use crate::corpus::Speaker;
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeType {
    Utterance,
    Conversation,
    Lexicon,
    Distress,
}

impl NodeType {
    pub const ALL: [NodeType; 4] = [NodeType::Utterance, NodeType::Conversation, NodeType::Lexicon, NodeType::Distress];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            NodeType::Utterance => "utterance",
            NodeType::Conversation => "conversation",
            NodeType::Lexicon => "lexicon",
            NodeType::Distress => "distress",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeType {
    Temporal,
    Hierarchical,
    Lexicon,
    Distress,
}

/// A typed triple ⟨source type, edge type, target type⟩.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MetaRelation {
    pub source: NodeType,
    pub edge: EdgeType,
    pub target: NodeType,
    pub reverse: bool,
}

impl MetaRelation {
    pub fn name(&self) -> String {
        format!(
            "{}-{:?}{}-{}",
            self.source.name(),
            self.edge,
            if self.reverse { "Rev" } else { "" },
            self.target.name()
        )
        .to_lowercase()
    }
}

const fn rel(source: NodeType, edge: EdgeType, target: NodeType, reverse: bool) -> MetaRelation {
    MetaRelation {
        source,
        edge,
        target,
        reverse,
    }
}

/// The closed set of registered meta-relations. Even slots are forward,
/// odd slots their reverse.
pub const META_RELATIONS: [MetaRelation; 8] = [
    rel(NodeType::Utterance, EdgeType::Temporal, NodeType::Utterance, false),
    rel(NodeType::Utterance, EdgeType::Temporal, NodeType::Utterance, true),
    rel(NodeType::Utterance, EdgeType::Hierarchical, NodeType::Conversation, false),
    rel(NodeType::Conversation, EdgeType::Hierarchical, NodeType::Utterance, true),
    rel(NodeType::Utterance, EdgeType::Lexicon, NodeType::Lexicon, false),
    rel(NodeType::Lexicon, EdgeType::Lexicon, NodeType::Utterance, true),
    rel(NodeType::Conversation, EdgeType::Distress, NodeType::Distress, false),
    rel(NodeType::Distress, EdgeType::Distress, NodeType::Conversation, true),
];

pub const TEMPORAL: usize = 0;
pub const HIERARCHICAL: usize = 2;
pub const LEXICON: usize = 4;
pub const DISTRESS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphMode {
    Train,
    Infer,
}

/// Which layers of the graph a model sees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphAblation {
    #[default]
    Full,
    /// Utterance layer only, temporal edges kept.
    TemporalOnly,
    /// Utterance nodes in isolation.
    NoGraph,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceNode {
    pub session: usize,
    pub turn: usize,
    pub speaker: Speaker,
    pub position: f64,
}

/// Typed node tables plus per-meta-relation edge lists `(source, target)`
/// indexed by node position within its type.
#[derive(Clone, Debug, PartialEq)]
pub struct HeteroGraph {
    /// Encoder features with the position feature appended.
    pub utterance_features: Tensor<f64>,
    pub utterances: Vec<UtteranceNode>,
    pub conversation_features: Tensor<f64>,
    pub conversations: Vec<String>,
    /// Category index of each lexicon node.
    pub lexicon_ids: Vec<usize>,
    /// Catalogue index of each distress node.
    pub distress_ids: Vec<usize>,
    pub edges: [Vec<(usize, usize)>; 8],
}

impl HeteroGraph {
    pub fn node_count(&self, t: NodeType) -> usize {
        match t {
            NodeType::Utterance => self.utterances.len(),
            NodeType::Conversation => self.conversations.len(),
            NodeType::Lexicon => self.lexicon_ids.len(),
            NodeType::Distress => self.distress_ids.len(),
        }
    }

    pub fn edge_count(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }

    /// Checks endpoint ranges, reverse symmetry and position monotonicity.
    pub fn validate(&self) -> Result<(), GraphError> {
        if self.utterance_features.rows() != self.utterances.len() {
            return Err(GraphError::Invalid("utterance feature rows".into()));
        }
        if self.conversation_features.rows() != self.conversations.len() {
            return Err(GraphError::Invalid("conversation feature rows".into()));
        }
        for (r, edges) in self.edges.iter().enumerate() {
            let m = META_RELATIONS[r];
            let (ns, nt) = (self.node_count(m.source), self.node_count(m.target));
            if let Some(&(s, t)) = edges.iter().find(|&&(s, t)| s >= ns || t >= nt) {
                return Err(GraphError::Invalid(format!("{} edge ({s},{t}) out of range", m.name())));
            }
        }
        for r in (0..8).step_by(2) {
            let mut fwd: Vec<(usize, usize)> = self.edges[r].clone();
            let mut rev: Vec<(usize, usize)> = self.edges[r + 1].iter().map(|&(a, b)| (b, a)).collect();
            fwd.sort_unstable();
            rev.sort_unstable();
            if fwd != rev {
                return Err(GraphError::Invalid(format!("{} lacks its reverse", META_RELATIONS[r].name())));
            }
        }
        for w in self.utterances.windows(2) {
            if w[0].session == w[1].session && w[1].position <= w[0].position {
                return Err(GraphError::Invalid("positions must increase within a session".into()));
            }
        }
        for &(u, _) in &self.edges[LEXICON] {
            if self.utterances[u].speaker != Speaker::HelpSeeker {
                return Err(GraphError::Invalid(format!("lexicon edge from caregiver node {u}")));
            }
        }
        Ok(())
    }

    pub fn stats(&self) -> GraphStats {
        GraphStats {
            utterance_nodes: self.utterances.len(),
            conversation_nodes: self.conversations.len(),
            lexicon_nodes: self.lexicon_ids.len(),
            distress_nodes: self.distress_ids.len(),
            temporal_edges: self.edges[TEMPORAL].len(),
            hierarchical_edges: self.edges[HIERARCHICAL].len(),
            lexicon_edges: self.edges[LEXICON].len(),
            distress_edges: self.edges[DISTRESS].len(),
            total_edges_with_reverse: self.edge_count(),
        }
    }

    pub fn export(&self, lexicon_names: &[String], distress_names: &[String]) -> GraphExport {
        GraphExport {
            utterances: self.utterances.clone(),
            conversations: self.conversations.clone(),
            lexicon: self.lexicon_ids.iter().map(|&i| lexicon_names[i].clone()).collect(),
            distress: self.distress_ids.iter().map(|&i| distress_names[i].clone()).collect(),
            edges: META_RELATIONS
                .iter()
                .zip(&self.edges)
                .map(|(m, e)| (m.name(), e.clone()))
                .collect(),
        }
    }
}

/// Forward edge counts per type; reverse edges are included only in the total.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphStats {
    pub utterance_nodes: usize,
    pub conversation_nodes: usize,
    pub lexicon_nodes: usize,
    pub distress_nodes: usize,
    pub temporal_edges: usize,
    pub hierarchical_edges: usize,
    pub lexicon_edges: usize,
    pub distress_edges: usize,
    pub total_edges_with_reverse: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphExport {
    pub utterances: Vec<UtteranceNode>,
    pub conversations: Vec<String>,
    pub lexicon: Vec<String>,
    pub distress: Vec<String>,
    pub edges: std::collections::BTreeMap<String, Vec<(usize, usize)>>,
}
