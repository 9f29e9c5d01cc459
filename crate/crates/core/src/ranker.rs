//! PageRank scoring of anomalous KPIs and mapping to suspect nodes.

use crate::causality::{prune_graph, CausalityGraph};
use crate::error::{Error, Result};
use crate::telemetry::KpiCatalog;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

/// Maximum number of nodes reported per timestamp.
pub const MAX_RANKED_NODES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PageRankConfig {
    pub damping: f64,
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for PageRankConfig {
    fn default() -> Self {
        Self { damping: 0.85, tolerance: 1e-10, max_iter: 1000 }
    }
}

impl PageRankConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.damping) {
            return Err(Error::Parameter(format!("damping must lie in [0, 1), got {}", self.damping)));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Parameter(format!("tolerance must be positive, got {}", self.tolerance)));
        }
        if self.max_iter == 0 {
            return Err(Error::Parameter("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

/// PageRank score per KPI index.
pub type CentralityScores = BTreeMap<usize, f64>;

/// Power iteration on the out-weight-normalized transition matrix. Nodes
/// without outgoing weight spread their mass uniformly.
pub fn pagerank(graph: &CausalityGraph, cfg: &PageRankConfig) -> Result<CentralityScores> {
    cfg.validate()?;
    let nodes: Vec<usize> = graph.nodes().collect();
    let k = nodes.len();
    if k == 0 {
        return Err(Error::EmptyGraph);
    }
    let index: BTreeMap<usize, usize> = nodes.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    let mut out_weight = vec![0.0; k];
    let mut links = Vec::with_capacity(graph.edge_count());
    for e in graph.edges() {
        let (f, t) = (index[&e.from], index[&e.to]);
        out_weight[f] += e.weight;
        links.push((f, t, e.weight));
    }
    let d = cfg.damping;
    let uniform = 1.0 / k as f64;
    let mut rank = vec![uniform; k];
    let mut next = vec![0.0; k];
    for _ in 0..cfg.max_iter {
        let dangling: f64 = (0..k).filter(|&i| out_weight[i] <= 0.0).map(|i| rank[i]).sum();
        let base = (1.0 - d) * uniform + d * dangling * uniform;
        next.iter_mut().for_each(|v| *v = base);
        for &(f, t, w) in &links {
            if out_weight[f] > 0.0 {
                next[t] += d * rank[f] * w / out_weight[f];
            }
        }
        let delta: f64 = rank.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut rank, &mut next);
        if delta < cfg.tolerance {
            break;
        }
    }
    let total: f64 = rank.iter().sum();
    Ok(nodes.into_iter().zip(rank.into_iter().map(|r| r / total)).collect())
}

/// Ranking cap: 20% of all monitored KPIs, at least one.
pub fn ranking_cap(total_kpis: usize) -> usize {
    (total_kpis / 5).max(1)
}

/// KPIs by descending score (ties by ascending index), cut at the cap.
pub fn top_anomalous_kpis(scores: &CentralityScores, total_kpis: usize) -> Vec<usize> {
    let mut ranked: Vec<(usize, f64)> = scores.iter().map(|(&k, &s)| (k, s)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(ranking_cap(total_kpis));
    ranked.into_iter().map(|(k, _)| k).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeScore {
    pub node: String,
    /// Number of top-anomalous KPIs on this node.
    pub count: usize,
    /// Summed centrality of those KPIs.
    pub centrality: f64,
}

fn node_order(a: &NodeScore, b: &NodeScore) -> Ordering {
    b.count
        .cmp(&a.count)
        .then(b.centrality.total_cmp(&a.centrality))
        .then(a.node.cmp(&b.node))
}

/// Up to three suspect nodes, most suspicious first.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NodeRanking {
    entries: Vec<NodeScore>,
}

impl NodeRanking {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Sorts by count, then centrality, then node id, and keeps the first
    /// three. Entries must name distinct nodes.
    pub fn from_scores(mut entries: Vec<NodeScore>) -> Result<Self> {
        let distinct: BTreeSet<&str> = entries.iter().map(|e| e.node.as_str()).collect();
        if distinct.len() != entries.len() {
            return Err(Error::Contract("node ranking lists a node twice".into()));
        }
        entries.sort_by(node_order);
        entries.truncate(MAX_RANKED_NODES);
        Ok(Self { entries })
    }

    /// Keeps the given order, as read back from a file where ties were
    /// already broken. Counts must not increase along the list.
    pub fn from_ordered(entries: Vec<NodeScore>) -> Result<Self> {
        let distinct: BTreeSet<&str> = entries.iter().map(|e| e.node.as_str()).collect();
        if distinct.len() != entries.len() {
            return Err(Error::Contract("node ranking lists a node twice".into()));
        }
        if entries.len() > MAX_RANKED_NODES {
            return Err(Error::Contract(format!("ranking lists {} nodes, at most {MAX_RANKED_NODES} allowed", entries.len())));
        }
        if entries.windows(2).any(|w| w[1].count > w[0].count) {
            return Err(Error::Contract("ranking is not in count order".into()));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[NodeScore] {
        &self.entries
    }

    pub fn nodes(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.node.as_str())
    }

    pub fn contains(&self, node: &str) -> bool {
        self.nodes().any(|n| n == node)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Combines two rankings by summing counts and centralities per node.
    pub fn merge(&self, other: &NodeRanking) -> NodeRanking {
        let mut acc: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
        for e in self.entries.iter().chain(&other.entries) {
            let slot = acc.entry(&e.node).or_default();
            slot.0 += e.count;
            slot.1 += e.centrality;
        }
        let entries = acc
            .into_iter()
            .map(|(node, (count, centrality))| NodeScore { node: node.to_string(), count, centrality })
            .collect();
        Self::from_scores(entries).expect("merged nodes are distinct")
    }
}

/// Counts top-anomalous KPIs per node and keeps the three leading nodes.
pub fn localize_nodes(top_kpis: &[usize], catalog: &KpiCatalog, scores: &CentralityScores) -> Result<NodeRanking> {
    let mut per_node: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for &k in top_kpis {
        let kpi = catalog
            .get(k)
            .ok_or_else(|| Error::Schema(format!("KPI index {k} is not in the catalog")))?;
        let slot = per_node.entry(kpi.node()).or_default();
        slot.0 += 1;
        slot.1 += scores.get(&k).copied().unwrap_or(0.0);
    }
    NodeRanking::from_scores(
        per_node
            .into_iter()
            .map(|(node, (count, centrality))| NodeScore { node: node.to_string(), count, centrality })
            .collect(),
    )
}

/// Prune, score, cap and localize in one step. An empty anomaly set gives
/// an empty ranking.
pub fn rank_anomalies(
    baseline: &CausalityGraph,
    anomalous: &BTreeSet<usize>,
    catalog: &KpiCatalog,
    cfg: &PageRankConfig,
) -> Result<NodeRanking> {
    if anomalous.is_empty() {
        return Ok(NodeRanking::empty());
    }
    let pruned = prune_graph(baseline, anomalous)?;
    let scores = pagerank(&pruned, cfg)?;
    let top = top_anomalous_kpis(&scores, catalog.len());
    localize_nodes(&top, catalog, &scores)
}
