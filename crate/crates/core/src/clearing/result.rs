use serde::ser::{SerializeMap, SerializeSeq, SerializeStruct};
use serde::{Serialize, Serializer};
use std::collections::BTreeMap;

use crate::model::Design;
use crate::qp::{KktResiduals, Status};

/// A trading node: an individual peer or a community manager.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Node {
    Peer(usize),
    Community(usize),
}

/// One unordered pair `(a, b)` with `a < b`; `mw` is `P_ab`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TradePair {
    pub a: usize,
    pub b: usize,
    pub mw: f64,
    pub price: f64,
}

/// Bilateral trades stored once per unordered pair, so `P_nm = -P_mn`
/// holds exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TradeMatrix {
    nodes: Vec<Node>,
    labels: Vec<String>,
    pairs: Vec<TradePair>,
    index: BTreeMap<(usize, usize), usize>,
}

impl TradeMatrix {
    pub fn new(nodes: Vec<Node>, labels: Vec<String>) -> Self {
        Self {
            nodes,
            labels,
            pairs: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    /// Records `P_ab = mw` (and so `P_ba = -mw`).
    pub fn insert(&mut self, a: usize, b: usize, mw: f64, price: f64) {
        let (a, b, mw) = if a < b { (a, b, mw) } else { (b, a, -mw) };
        let pair = TradePair {
            a,
            b,
            mw: mw + 0.0,
            price,
        };
        match self.index.get(&(a, b)) {
            Some(&i) => self.pairs[i] = pair,
            None => {
                self.index.insert((a, b), self.pairs.len());
                self.pairs.push(pair);
            }
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn node_of_peer(&self, peer: usize) -> Option<usize> {
        self.nodes.iter().position(|&n| n == Node::Peer(peer))
    }

    pub fn node_of_community(&self, k: usize) -> Option<usize> {
        self.nodes.iter().position(|&n| n == Node::Community(k))
    }

    pub fn pairs(&self) -> &[TradePair] {
        &self.pairs
    }

    /// `P_nm`, or `None` if the nodes do not trade.
    pub fn get(&self, n: usize, m: usize) -> Option<f64> {
        if n < m {
            self.index.get(&(n, m)).map(|&i| self.pairs[i].mw)
        } else {
            self.index.get(&(m, n)).map(|&i| -self.pairs[i].mw)
        }
    }

    pub fn price(&self, n: usize, m: usize) -> Option<f64> {
        let key = if n < m { (n, m) } else { (m, n) };
        self.index.get(&key).map(|&i| self.pairs[i].price)
    }

    /// `Σ_m P_nm`.
    pub fn net(&self, n: usize) -> f64 {
        self.pairs
            .iter()
            .map(|p| {
                if p.a == n {
                    p.mw
                } else if p.b == n {
                    -p.mw
                } else {
                    0.0
                }
            })
            .sum()
    }

    /// Partners of `n` with `P_nm`.
    pub fn trades_of(&self, n: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.pairs.iter().filter_map(move |p| {
            if p.a == n {
                Some((p.b, p.mw))
            } else if p.b == n {
                Some((p.a, -p.mw))
            } else {
                None
            }
        })
    }
}

impl Serialize for TradeMatrix {
    /// A list of `{from, to, mw, price}` with `from` the selling side.
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Entry<'a> {
            from: &'a str,
            to: &'a str,
            mw: f64,
            price: f64,
        }
        let mut seq = s.serialize_seq(Some(self.pairs.len()))?;
        for p in &self.pairs {
            let (from, to, mw) = if p.mw < 0.0 {
                (p.b, p.a, -p.mw)
            } else {
                (p.a, p.b, p.mw)
            };
            seq.serialize_element(&Entry {
                from: &self.labels[from],
                to: &self.labels[to],
                mw,
                price: p.price,
            })?;
        }
        seq.end()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemberDecision {
    #[serde(skip)]
    pub peer: usize,
    #[serde(rename = "peer")]
    pub id: String,
    /// Own production (positive) or consumption (negative).
    pub p: f64,
    /// Net sale to the pool is `-q`.
    pub q: f64,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommunityDecision {
    #[serde(skip)]
    pub community: usize,
    pub id: String,
    pub members: Vec<MemberDecision>,
    pub q_imp: f64,
    pub q_exp: f64,
    /// Multiplier of the pool balance row.
    pub pool_price: f64,
}

impl CommunityDecision {
    pub fn member(&self, peer: usize) -> Option<&MemberDecision> {
        self.members.iter().find(|m| m.peer == peer)
    }
}

/// Welfare split into its accounting components. `transaction_costs`
/// includes the import/export weights, also reported on their own.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct WelfareBreakdown {
    pub generation_cost: f64,
    pub consumer_utility: f64,
    pub transaction_costs: f64,
    pub import_export_weights: f64,
    pub grid_exchange_cost: f64,
    pub total: f64,
}

/// Per-interval energy and money rates (MW and $/h).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StepMetrics {
    pub production: f64,
    pub consumption: f64,
    pub load: f64,
    pub import: f64,
    pub export: f64,
    pub import_cost: f64,
    pub export_revenue: f64,
    pub community_exchange: f64,
    pub inter_community_fees: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClearingResult {
    pub design: Design,
    pub status: Status,
    /// Bilateral trades (full P2P) or upper-level trades (hybrid).
    pub trades: Option<TradeMatrix>,
    pub community_decisions: Vec<CommunityDecision>,
    pub objective_value: f64,
    pub social_welfare: f64,
    pub transaction_cost_total: f64,
    pub welfare: WelfareBreakdown,
    pub kkt: KktResiduals,
    pub peer_ids: Vec<String>,
    /// Net injection per peer, in instance order.
    pub net_injection: Vec<f64>,
    pub metrics: StepMetrics,
    pub iterations: usize,
}

impl ClearingResult {
    pub fn net_of(&self, id: &str) -> Option<f64> {
        self.peer_ids
            .iter()
            .position(|p| p == id)
            .map(|i| self.net_injection[i])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("clearing result serializes")
    }
}

struct NetInjections<'a>(&'a [String], &'a [f64]);

impl Serialize for NetInjections<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.0.len()))?;
        for (id, v) in self.0.iter().zip(self.1) {
            map.serialize_entry(id, v)?;
        }
        map.end()
    }
}

impl Serialize for ClearingResult {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("ClearingResult", 11)?;
        st.serialize_field("design", &self.design)?;
        st.serialize_field("status", &self.status)?;
        st.serialize_field("objective_value", &self.objective_value)?;
        st.serialize_field("social_welfare", &self.social_welfare)?;
        st.serialize_field("transaction_cost_total", &self.transaction_cost_total)?;
        st.serialize_field("welfare", &self.welfare)?;
        st.serialize_field("metrics", &self.metrics)?;
        st.serialize_field("net_injection", &NetInjections(&self.peer_ids, &self.net_injection))?;
        st.serialize_field("trades", &self.trades)?;
        st.serialize_field("community_decisions", &self.community_decisions)?;
        st.serialize_field("kkt_residuals", &self.kkt)?;
        st.end()
    }
}
