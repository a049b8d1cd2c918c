//! Domain types for peers, cost curves, communities and market instances.
//!
//! A [`MarketInstance`] is the validated, immutable description of one
//! clearing interval. It is produced from an [`InstanceConfig`] (the JSON
//! instance file) by [`build_instance`], which reports every violation it
//! finds rather than stopping at the first one.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use thiserror::Error;

/// Quadratic cost curve `C(p) = a·p² + b·p + c`.
///
/// Producers inject (`p ≥ 0`) and pay `C(p)`. Consumers withdraw (`p ≤ 0`);
/// a positive `b` makes `C` negative there, which is how willingness to pay
/// enters a cost-minimizing clearing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadraticCost {
    pub a: f64,
    pub b: f64,
    #[serde(default)]
    pub c: f64,
}

impl QuadraticCost {
    pub const ZERO: QuadraticCost = QuadraticCost { a: 0.0, b: 0.0, c: 0.0 };

    pub fn new(a: f64, b: f64, c: f64) -> Self {
        Self { a, b, c }
    }

    pub fn evaluate(&self, p: f64) -> f64 {
        evaluate_cost(self, p)
    }

    /// Derivative `2·a·p + b`.
    pub fn marginal(&self, p: f64) -> f64 {
        2.0 * self.a * p + self.b
    }
}

/// Evaluates `a·p² + b·p + c`.
pub fn evaluate_cost(cost: &QuadraticCost, p: f64) -> f64 {
    cost.a * p * p + cost.b * p + cost.c
}

/// Net-injection bounds in MW. Either side may be infinite; infinite values
/// serialize as `null`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerBounds {
    #[serde(with = "lower_bound")]
    pub lower: f64,
    #[serde(with = "upper_bound")]
    pub upper: f64,
}

impl PowerBounds {
    pub fn new(lower: f64, upper: f64) -> Self {
        Self { lower, upper }
    }

    pub fn fixed(value: f64) -> Self {
        Self {
            lower: value,
            upper: value,
        }
    }

    pub fn unbounded() -> Self {
        Self {
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
        }
    }

    pub fn contains(&self, p: f64, tol: f64) -> bool {
        p >= self.lower - tol && p <= self.upper + tol
    }
}

macro_rules! infinite_as_null {
    ($name:ident, $inf:expr) => {
        mod $name {
            use serde::{Deserialize, Deserializer, Serializer};

            pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
                if v.is_infinite() {
                    s.serialize_none()
                } else {
                    s.serialize_some(v)
                }
            }

            pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
                Ok(Option::<f64>::deserialize(d)?.unwrap_or($inf))
            }
        }
    };
}

infinite_as_null!(lower_bound, f64::NEG_INFINITY);
infinite_as_null!(upper_bound, f64::INFINITY);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Producer,
    Consumer,
    Grid,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Producer => "producer",
            Role::Consumer => "consumer",
            Role::Grid => "grid",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Peer {
    pub id: String,
    pub role: Role,
    #[serde(default)]
    pub bus: u32,
    #[serde(default)]
    pub community: Option<String>,
    pub cost: QuadraticCost,
    pub bounds: PowerBounds,
    #[serde(default)]
    pub must_take: bool,
}

impl Peer {
    /// Bounds on a single bilateral trade of this peer, from the role's sign
    /// convention (sales positive, purchases negative).
    pub fn trade_bounds(&self) -> (f64, f64) {
        match self.role {
            Role::Producer => (0.0, f64::INFINITY),
            Role::Consumer => (f64::NEG_INFINITY, 0.0),
            Role::Grid => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }
}

/// Symmetric trading-partner sets, stored by peer index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartnerGraph {
    adjacency: Vec<Vec<usize>>,
}

impl PartnerGraph {
    /// Producers trade with consumers, and the grid peer trades with everyone.
    pub fn default_for(peers: &[Peer]) -> Self {
        let n = peers.len();
        let mut adjacency = vec![Vec::new(); n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let linked = matches!(
                    (peers[i].role, peers[j].role),
                    (Role::Producer, Role::Consumer)
                        | (Role::Consumer, Role::Producer)
                        | (Role::Grid, _)
                        | (_, Role::Grid)
                );
                if linked {
                    adjacency[i].push(j);
                }
            }
        }
        Self { adjacency }
    }

    /// Builds a graph from explicit adjacency lists. Lists are sorted and
    /// deduplicated; symmetry and self-loops are checked by the caller.
    pub fn from_adjacency(mut adjacency: Vec<Vec<usize>>) -> Self {
        for list in &mut adjacency {
            list.sort_unstable();
            list.dedup();
        }
        Self { adjacency }
    }

    pub fn num_peers(&self) -> usize {
        self.adjacency.len()
    }

    pub fn partners(&self, n: usize) -> &[usize] {
        &self.adjacency[n]
    }

    pub fn are_partners(&self, n: usize, m: usize) -> bool {
        self.adjacency[n].binary_search(&m).is_ok()
    }

    /// Unordered partner pairs `(n, m)` with `n < m`, in lexicographic order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (n, list) in self.adjacency.iter().enumerate() {
            for &m in list {
                if n < m {
                    out.push((n, m));
                }
            }
        }
        out
    }

    pub fn is_symmetric(&self) -> bool {
        self.adjacency
            .iter()
            .enumerate()
            .all(|(n, list)| list.iter().all(|&m| self.are_partners(m, n)))
    }

    pub fn has_self_loop(&self) -> bool {
        self.adjacency.iter().enumerate().any(|(n, list)| list.contains(&n))
    }
}

/// Cost of exchanging energy with the outside world,
/// `G(qi, qe) = iq·qi² + il·qi + eq·qe² + el·qe`.
///
/// With day-ahead pricing, `il` is the import price and `el` is minus the
/// export price.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExternalCost {
    #[serde(default)]
    pub import_quadratic: f64,
    pub import_linear: f64,
    #[serde(default)]
    pub export_quadratic: f64,
    pub export_linear: f64,
}

impl ExternalCost {
    /// Linear pricing from a market price and a grid tariff: imports pay
    /// `price + tariff`, exports earn `price − tariff`.
    pub fn from_grid(price: f64, tariff: f64) -> Self {
        Self {
            import_quadratic: 0.0,
            import_linear: price + tariff,
            export_quadratic: 0.0,
            export_linear: -(price - tariff),
        }
    }

    pub fn import_cost(&self, q_imp: f64) -> f64 {
        self.import_quadratic * q_imp * q_imp + self.import_linear * q_imp
    }

    pub fn export_cost(&self, q_exp: f64) -> f64 {
        self.export_quadratic * q_exp * q_exp + self.export_linear * q_exp
    }

    pub fn evaluate(&self, q_imp: f64, q_exp: f64) -> f64 {
        self.import_cost(q_imp) + self.export_cost(q_exp)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommunitySpec {
    pub id: String,
    pub members: Vec<String>,
    /// Fee per MWh of internal pool trade magnitude.
    #[serde(default)]
    pub internal_fee: f64,
    #[serde(default)]
    pub import_weight: f64,
    #[serde(default)]
    pub export_weight: f64,
    /// When absent, derived from the instance's grid price and tariff.
    #[serde(default)]
    pub external_cost: Option<ExternalCost>,
}

/// Fee between two communities; the pair is unordered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterCommunityFee {
    pub communities: [String; 2],
    pub fee: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TransactionCostSpec {
    /// Fee per MWh of bilateral trade magnitude in full P2P clearing.
    #[serde(default)]
    pub per_trade_fee: f64,
    #[serde(default)]
    pub inter_community_fees: Vec<InterCommunityFee>,
}

impl TransactionCostSpec {
    pub fn inter_community_fee(&self, a: &str, b: &str) -> f64 {
        self.inter_community_fees
            .iter()
            .find(|f| {
                (f.communities[0] == a && f.communities[1] == b) || (f.communities[0] == b && f.communities[1] == a)
            })
            .map_or(0.0, |f| f.fee)
    }

    pub fn set_inter_community_fee(&mut self, a: &str, b: &str, fee: f64) {
        match self.inter_community_fees.iter_mut().find(|f| {
            (f.communities[0] == a && f.communities[1] == b) || (f.communities[0] == b && f.communities[1] == a)
        }) {
            Some(f) => f.fee = fee,
            None => self.inter_community_fees.push(InterCommunityFee {
                communities: [a.to_string(), b.to_string()],
                fee,
            }),
        }
    }
}

/// Market price and tariff for exchanges with the main grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridTerms {
    pub price: f64,
    pub tariff: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    FullP2p,
    Community,
    Hybrid,
}

impl Design {
    pub const ALL: [Design; 3] = [Design::FullP2p, Design::Community, Design::Hybrid];

    pub fn as_str(&self) -> &'static str {
        match self {
            Design::FullP2p => "full_p2p",
            Design::Community => "community",
            Design::Hybrid => "hybrid",
        }
    }
}

impl fmt::Display for Design {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Design {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full_p2p" | "full" | "p2p" => Ok(Design::FullP2p),
            "community" => Ok(Design::Community),
            "hybrid" => Ok(Design::Hybrid),
            other => Err(format!(
                "unknown design `{other}` (expected full_p2p, community or hybrid)"
            )),
        }
    }
}

/// The instance file as written on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceConfig {
    pub design: Design,
    #[serde(default)]
    pub grid: Option<GridTerms>,
    pub peers: Vec<Peer>,
    #[serde(default)]
    pub communities: Vec<CommunitySpec>,
    #[serde(default)]
    pub transaction_costs: TransactionCostSpec,
    /// Explicit partner lists by peer id; the default graph is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partners: Option<BTreeMap<String, Vec<String>>>,
}

impl InstanceConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("instance config serializes")
    }
}

/// One reason an instance description was rejected.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Violation {
    #[error("duplicate peer id `{0}`")]
    DuplicatePeerId(String),
    #[error("peer `{peer}` ({role}) has bounds [{lower}, {upper}] that violate its role's sign")]
    RoleBoundSignMismatch {
        peer: String,
        role: Role,
        lower: f64,
        upper: f64,
    },
    #[error("peer `{0}` belongs to no community but the design requires one")]
    UnassignedPeerInCommunityDesign(String),
    #[error("aggregate bounds [{lower_sum}, {upper_sum}] exclude a balanced dispatch")]
    InfeasibleAggregateBounds { lower_sum: f64, upper_sum: f64 },
    #[error("peer `{0}` has lower bound above upper bound")]
    InvertedBounds(String),
    #[error("peer `{peer}`: {field} is not finite")]
    NonFinite { peer: String, field: &'static str },
    #[error("peer `{0}` has a negative quadratic cost coefficient")]
    NonConvexCost(String),
    #[error("must-take peer `{0}` needs equal finite bounds and a = b = 0")]
    MustTakeMismatch(String),
    #[error("more than one grid peer")]
    MultipleGridPeers,
    #[error("grid peer `{0}` must be unbounded on both sides")]
    GridNotUnbounded(String),
    #[error("grid peer `{0}` cannot be a community member")]
    GridInCommunity(String),
    #[error("grid peer present but no `grid` price/tariff block")]
    MissingGridTerms,
    #[error("grid tariff must be non-negative")]
    NegativeTariff,
    #[error("peer `{peer}` names unknown community `{community}`")]
    UnknownCommunity { peer: String, community: String },
    #[error("community `{community}` lists unknown peer `{peer}`")]
    UnknownMember { community: String, peer: String },
    #[error("community `{0}` is defined twice")]
    DuplicateCommunityId(String),
    #[error("community `{0}` has no members")]
    EmptyCommunity(String),
    #[error("peer `{0}` is listed in more than one community")]
    MemberOfSeveralCommunities(String),
    #[error("peer `{peer}` is labelled `{label}` but listed as a member of `{listed}`")]
    CommunityLabelMismatch {
        peer: String,
        label: String,
        listed: String,
    },
    #[error("community `{0}` has an invalid fee or external cost")]
    InvalidCommunityCost(String),
    #[error("community `{0}` has no external cost and the instance has no grid terms")]
    MissingExternalCost(String),
    #[error("{0} must be a finite non-negative fee")]
    InvalidFee(String),
    #[error("{0} needs at least one community")]
    NoCommunities(Design),
    #[error("partner list references unknown peer `{0}`")]
    UnknownPartner(String),
    #[error("peer `{0}` lists itself as a partner")]
    SelfLoop(String),
    #[error("partner relation between `{0}` and `{1}` is not symmetric")]
    AsymmetricPartners(String, String),
}

/// All violations found while validating an instance.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid instance: {}", .violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
pub struct ValidationError {
    pub violations: Vec<Violation>,
}

impl ValidationError {
    pub fn contains(&self, pred: impl Fn(&Violation) -> bool) -> bool {
        self.violations.iter().any(pred)
    }
}

/// A validated market for one clearing interval.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketInstance {
    peers: Vec<Peer>,
    partner_graph: PartnerGraph,
    communities: Vec<CommunitySpec>,
    tx_costs: TransactionCostSpec,
    grid: Option<GridTerms>,
    design: Design,
    explicit_partners: bool,
    peer_index: BTreeMap<String, usize>,
    peer_community: Vec<Option<usize>>,
    community_members: Vec<Vec<usize>>,
}

/// Validates `config` and builds the instance.
pub fn build_instance(config: InstanceConfig) -> Result<MarketInstance, ValidationError> {
    let mut violations = Vec::new();
    let InstanceConfig {
        design,
        grid,
        mut peers,
        communities,
        transaction_costs,
        partners,
    } = config;

    let mut peer_index = BTreeMap::new();
    for (i, peer) in peers.iter().enumerate() {
        if peer_index.insert(peer.id.clone(), i).is_some() {
            violations.push(Violation::DuplicatePeerId(peer.id.clone()));
        }
    }

    let mut grid_count = 0;
    for peer in &peers {
        check_peer(peer, &mut violations);
        if peer.role == Role::Grid {
            grid_count += 1;
        }
    }
    if grid_count > 1 {
        violations.push(Violation::MultipleGridPeers);
    }
    if let Some(g) = &grid {
        if !g.price.is_finite() {
            violations.push(Violation::NonFinite {
                peer: "grid".into(),
                field: "price",
            });
        }
        if !(g.tariff.is_finite() && g.tariff >= 0.0) {
            violations.push(Violation::NegativeTariff);
        }
        for peer in peers.iter_mut().filter(|p| p.role == Role::Grid) {
            peer.cost.b = g.price;
        }
    } else if grid_count > 0 {
        violations.push(Violation::MissingGridTerms);
    }

    // Community membership: member lists are authoritative, labels must agree.
    let mut community_ids = BTreeMap::new();
    for (k, c) in communities.iter().enumerate() {
        if community_ids.insert(c.id.clone(), k).is_some() {
            violations.push(Violation::DuplicateCommunityId(c.id.clone()));
        }
    }
    let mut peer_community: Vec<Option<usize>> = vec![None; peers.len()];
    let mut community_members = vec![Vec::new(); communities.len()];
    for (k, c) in communities.iter().enumerate() {
        if c.members.is_empty() {
            violations.push(Violation::EmptyCommunity(c.id.clone()));
        }
        let fees_ok = [c.internal_fee, c.import_weight, c.export_weight]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0);
        let g_ok = c.external_cost.is_none_or(|g| {
            [g.import_quadratic, g.import_linear, g.export_quadratic, g.export_linear]
                .iter()
                .all(|v| v.is_finite())
                && g.import_quadratic >= 0.0
                && g.export_quadratic >= 0.0
        });
        if !fees_ok || !g_ok {
            violations.push(Violation::InvalidCommunityCost(c.id.clone()));
        }
        if c.external_cost.is_none() && grid.is_none() {
            violations.push(Violation::MissingExternalCost(c.id.clone()));
        }
        for member in &c.members {
            match peer_index.get(member) {
                None => violations.push(Violation::UnknownMember {
                    community: c.id.clone(),
                    peer: member.clone(),
                }),
                Some(&i) => {
                    if peers[i].role == Role::Grid {
                        violations.push(Violation::GridInCommunity(member.clone()));
                    }
                    if peer_community[i].is_some() {
                        violations.push(Violation::MemberOfSeveralCommunities(member.clone()));
                    } else {
                        peer_community[i] = Some(k);
                        community_members[k].push(i);
                    }
                }
            }
        }
    }
    for (i, peer) in peers.iter().enumerate() {
        if let Some(label) = &peer.community {
            match community_ids.get(label) {
                None => violations.push(Violation::UnknownCommunity {
                    peer: peer.id.clone(),
                    community: label.clone(),
                }),
                Some(&k) => {
                    if peer_community[i] != Some(k) {
                        let listed =
                            peer_community[i].map_or_else(|| "(none)".to_string(), |j| communities[j].id.clone());
                        violations.push(Violation::CommunityLabelMismatch {
                            peer: peer.id.clone(),
                            label: label.clone(),
                            listed,
                        });
                    }
                }
            }
        }
    }
    if matches!(design, Design::Community | Design::Hybrid) {
        if communities.is_empty() {
            violations.push(Violation::NoCommunities(design));
        }
        for (i, peer) in peers.iter().enumerate() {
            if peer.role != Role::Grid && peer_community[i].is_none() {
                violations.push(Violation::UnassignedPeerInCommunityDesign(peer.id.clone()));
            }
        }
    }

    if !(transaction_costs.per_trade_fee.is_finite() && transaction_costs.per_trade_fee >= 0.0) {
        violations.push(Violation::InvalidFee("per_trade_fee".into()));
    }
    for fee in &transaction_costs.inter_community_fees {
        if !(fee.fee.is_finite() && fee.fee >= 0.0) {
            violations.push(Violation::InvalidFee(format!(
                "inter-community fee {}-{}",
                fee.communities[0], fee.communities[1]
            )));
        }
        for id in &fee.communities {
            if !community_ids.contains_key(id) {
                violations.push(Violation::UnknownCommunity {
                    peer: "transaction_costs".into(),
                    community: id.clone(),
                });
            }
        }
    }

    let explicit_partners = partners.is_some();
    let partner_graph = match &partners {
        None => PartnerGraph::default_for(&peers),
        Some(lists) => {
            let mut adjacency = vec![Vec::new(); peers.len()];
            for (id, list) in lists {
                let Some(&n) = peer_index.get(id) else {
                    violations.push(Violation::UnknownPartner(id.clone()));
                    continue;
                };
                for other in list {
                    match peer_index.get(other) {
                        None => violations.push(Violation::UnknownPartner(other.clone())),
                        Some(&m) if m == n => violations.push(Violation::SelfLoop(id.clone())),
                        Some(&m) => adjacency[n].push(m),
                    }
                }
            }
            let graph = PartnerGraph::from_adjacency(adjacency);
            for n in 0..graph.num_peers() {
                for &m in graph.partners(n) {
                    if !graph.are_partners(m, n) && n < peers.len() && m < peers.len() {
                        violations.push(Violation::AsymmetricPartners(peers[n].id.clone(), peers[m].id.clone()));
                    }
                }
            }
            graph
        }
    };

    let lower_sum: f64 = peers.iter().map(|p| p.bounds.lower).sum();
    let upper_sum: f64 = peers.iter().map(|p| p.bounds.upper).sum();
    // Communities can always settle a surplus or deficit through their external cost.
    if (lower_sum > 0.0 || upper_sum < 0.0) && design != Design::Community {
        violations.push(Violation::InfeasibleAggregateBounds { lower_sum, upper_sum });
    }

    if !violations.is_empty() {
        return Err(ValidationError { violations });
    }
    Ok(MarketInstance {
        peers,
        partner_graph,
        communities,
        tx_costs: transaction_costs,
        grid,
        design,
        explicit_partners,
        peer_index,
        peer_community,
        community_members,
    })
}

fn check_peer(peer: &Peer, violations: &mut Vec<Violation>) {
    let id = || peer.id.clone();
    for (value, field) in [
        (peer.cost.a, "cost.a"),
        (peer.cost.b, "cost.b"),
        (peer.cost.c, "cost.c"),
    ] {
        if !value.is_finite() {
            violations.push(Violation::NonFinite { peer: id(), field });
        }
    }
    if peer.bounds.lower.is_nan() || peer.bounds.upper.is_nan() {
        violations.push(Violation::NonFinite {
            peer: id(),
            field: "bounds",
        });
    }
    if peer.cost.a < 0.0 {
        violations.push(Violation::NonConvexCost(id()));
    }
    if peer.bounds.lower > peer.bounds.upper {
        violations.push(Violation::InvertedBounds(id()));
    }
    let sign_ok = match peer.role {
        Role::Producer => peer.bounds.lower >= 0.0,
        Role::Consumer => peer.bounds.upper <= 0.0,
        Role::Grid => true,
    };
    if !sign_ok {
        violations.push(Violation::RoleBoundSignMismatch {
            peer: id(),
            role: peer.role,
            lower: peer.bounds.lower,
            upper: peer.bounds.upper,
        });
    }
    if peer.role == Role::Grid && (peer.bounds.lower != f64::NEG_INFINITY || peer.bounds.upper != f64::INFINITY) {
        violations.push(Violation::GridNotUnbounded(id()));
    }
    if peer.must_take
        && !(peer.bounds.lower == peer.bounds.upper
            && peer.bounds.lower.is_finite()
            && peer.cost.a == 0.0
            && peer.cost.b == 0.0)
    {
        violations.push(Violation::MustTakeMismatch(id()));
    }
}

impl MarketInstance {
    pub fn peers(&self) -> &[Peer] {
        &self.peers
    }

    pub fn peer(&self, n: usize) -> &Peer {
        &self.peers[n]
    }

    pub fn num_peers(&self) -> usize {
        self.peers.len()
    }

    pub fn peer_index(&self, id: &str) -> Option<usize> {
        self.peer_index.get(id).copied()
    }

    pub fn partner_graph(&self) -> &PartnerGraph {
        &self.partner_graph
    }

    pub fn communities(&self) -> &[CommunitySpec] {
        &self.communities
    }

    pub fn community_index(&self, id: &str) -> Option<usize> {
        self.communities.iter().position(|c| c.id == id)
    }

    pub fn community_members(&self, k: usize) -> &[usize] {
        &self.community_members[k]
    }

    pub fn community_of(&self, n: usize) -> Option<usize> {
        self.peer_community[n]
    }

    pub fn tx_costs(&self) -> &TransactionCostSpec {
        &self.tx_costs
    }

    pub fn grid_terms(&self) -> Option<GridTerms> {
        self.grid
    }

    pub fn design(&self) -> Design {
        self.design
    }

    pub fn grid_peer(&self) -> Option<usize> {
        self.peers.iter().position(|p| p.role == Role::Grid)
    }

    pub fn grid_tariff(&self) -> f64 {
        self.grid.map_or(0.0, |g| g.tariff)
    }

    pub fn inter_community_fee(&self, a: usize, b: usize) -> f64 {
        self.tx_costs
            .inter_community_fee(&self.communities[a].id, &self.communities[b].id)
    }

    /// External cost of community `k`: the explicit one, or linear grid pricing.
    pub fn external_cost(&self, k: usize) -> ExternalCost {
        if let Some(g) = self.communities[k].external_cost {
            return g;
        }
        let terms = self
            .grid
            .expect("validated: grid terms present when external cost is implicit");
        let a = self.grid_peer().map_or(0.0, |g| self.peers[g].cost.a);
        let mut g = ExternalCost::from_grid(terms.price, terms.tariff);
        g.import_quadratic = a;
        g.export_quadratic = a;
        g
    }

    pub fn to_config(&self) -> InstanceConfig {
        let partners = self.explicit_partners.then(|| {
            (0..self.peers.len())
                .map(|n| {
                    let list = self.partner_graph.partners(n).iter().map(|&m| self.peers[m].id.clone());
                    (self.peers[n].id.clone(), list.collect())
                })
                .collect()
        });
        InstanceConfig {
            design: self.design,
            grid: self.grid,
            peers: self.peers.clone(),
            communities: self.communities.clone(),
            transaction_costs: self.tx_costs.clone(),
            partners,
        }
    }

    pub fn to_json(&self) -> String {
        self.to_config().to_json()
    }

    /// Rebuilds the instance through validation after editing its config.
    pub fn modified(&self, edit: impl FnOnce(&mut InstanceConfig)) -> Result<Self, ValidationError> {
        let mut config = self.to_config();
        edit(&mut config);
        build_instance(config)
    }

    /// Same instance with different per-peer bounds and grid price; used for
    /// per-interval instances of a horizon without re-validating the template.
    pub(crate) fn with_interval_data(&self, bounds: &[PowerBounds], grid_price: Option<f64>) -> Self {
        let mut out = self.clone();
        for (peer, b) in out.peers.iter_mut().zip(bounds) {
            peer.bounds = *b;
        }
        if let (Some(price), Some(g)) = (grid_price, out.grid.as_mut()) {
            g.price = price;
            for peer in out.peers.iter_mut().filter(|p| p.role == Role::Grid) {
                peer.cost.b = price;
            }
        }
        out
    }

    /// Same instance with the given design tag.
    pub fn with_design(&self, design: Design) -> Result<Self, ValidationError> {
        self.modified(|c| c.design = design)
    }

    pub fn community_ids(&self) -> BTreeSet<&str> {
        self.communities.iter().map(|c| c.id.as_str()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn producer(id: &str, lo: f64, hi: f64, a: f64, b: f64) -> Peer {
        Peer {
            id: id.into(),
            role: Role::Producer,
            bus: 0,
            community: None,
            cost: QuadraticCost::new(a, b, 0.0),
            bounds: PowerBounds::new(lo, hi),
            must_take: false,
        }
    }

    fn consumer(id: &str, lo: f64, a: f64, b: f64) -> Peer {
        Peer {
            id: id.into(),
            role: Role::Consumer,
            bus: 0,
            community: None,
            cost: QuadraticCost::new(a, b, 0.0),
            bounds: PowerBounds::new(lo, 0.0),
            must_take: false,
        }
    }

    fn two_peer() -> InstanceConfig {
        InstanceConfig {
            design: Design::FullP2p,
            grid: None,
            peers: vec![producer("g1", 0.0, 10.0, 0.5, 0.0), consumer("c1", -10.0, 0.5, 10.0)],
            communities: vec![],
            transaction_costs: TransactionCostSpec::default(),
            partners: None,
        }
    }

    #[test]
    fn cost_evaluation() {
        assert_eq!(evaluate_cost(&QuadraticCost::ZERO, 7.0), 0.0);
        assert_eq!(evaluate_cost(&QuadraticCost::new(0.5, 10.0, 0.0), -5.0), -37.5);
        assert_eq!(evaluate_cost(&QuadraticCost::new(0.5, 0.0, 0.0), 5.0), 12.5);
    }

    #[test]
    fn two_peer_instance_is_bipartite() {
        let inst = build_instance(two_peer()).unwrap();
        assert_eq!(inst.partner_graph().partners(0), &[1]);
        assert_eq!(inst.partner_graph().partners(1), &[0]);
        assert_eq!(inst.partner_graph().pairs(), vec![(0, 1)]);
    }

    #[test]
    fn producer_with_negative_lower_bound_is_rejected() {
        let mut cfg = two_peer();
        cfg.peers[0].bounds.lower = -1.0;
        let err = build_instance(cfg).unwrap_err();
        assert!(err.contains(|v| matches!(v, Violation::RoleBoundSignMismatch { .. })));
    }

    #[test]
    fn duplicate_ids_and_multiple_violations_are_all_reported() {
        let mut cfg = two_peer();
        cfg.peers[1].id = "g1".into();
        cfg.peers[0].cost.a = -1.0;
        let err = build_instance(cfg).unwrap_err();
        assert!(err.contains(|v| matches!(v, Violation::DuplicatePeerId(_))));
        assert!(err.contains(|v| matches!(v, Violation::NonConvexCost(_))));
    }

    #[test]
    fn community_design_requires_membership() {
        let mut cfg = two_peer();
        cfg.design = Design::Hybrid;
        cfg.grid = Some(GridTerms {
            price: 30.0,
            tariff: 10.0,
        });
        cfg.communities = vec![CommunitySpec {
            id: "c".into(),
            members: vec!["g1".into()],
            internal_fee: 0.0,
            import_weight: 0.0,
            export_weight: 0.0,
            external_cost: None,
        }];
        let err = build_instance(cfg).unwrap_err();
        assert_eq!(
            err.violations,
            vec![Violation::UnassignedPeerInCommunityDesign("c1".into())]
        );
    }

    #[test]
    fn infeasible_aggregate_bounds() {
        let mut cfg = two_peer();
        cfg.peers[0].bounds = PowerBounds::fixed(12.0);
        cfg.peers[0].cost = QuadraticCost::ZERO;
        cfg.peers[0].must_take = true;
        let err = build_instance(cfg).unwrap_err();
        assert!(err.contains(|v| matches!(v, Violation::InfeasibleAggregateBounds { .. })));
    }

    #[test]
    fn must_take_requires_fixed_bounds_and_zero_cost() {
        let mut cfg = two_peer();
        cfg.peers[0].must_take = true;
        let err = build_instance(cfg).unwrap_err();
        assert_eq!(err.violations, vec![Violation::MustTakeMismatch("g1".into())]);
    }

    #[test]
    fn grid_fields_are_carried_verbatim() {
        let mut cfg = two_peer();
        cfg.grid = Some(GridTerms {
            price: 30.0,
            tariff: 10.0,
        });
        cfg.transaction_costs.per_trade_fee = 0.001;
        cfg.peers.push(Peer {
            id: "grid".into(),
            role: Role::Grid,
            bus: 1,
            community: None,
            cost: QuadraticCost::ZERO,
            bounds: PowerBounds::unbounded(),
            must_take: false,
        });
        let inst = build_instance(cfg).unwrap();
        assert_eq!(
            inst.grid_terms(),
            Some(GridTerms {
                price: 30.0,
                tariff: 10.0
            })
        );
        assert_eq!(inst.tx_costs().per_trade_fee, 0.001);
        assert_eq!(inst.peer(2).cost.b, 30.0);
        // grid trades with both other peers
        assert_eq!(inst.partner_graph().partners(2), &[0, 1]);
    }

    #[test]
    fn explicit_partner_lists_must_be_symmetric() {
        let mut cfg = two_peer();
        cfg.partners = Some(BTreeMap::from([
            ("g1".to_string(), vec!["c1".to_string()]),
            ("c1".to_string(), vec![]),
        ]));
        let err = build_instance(cfg).unwrap_err();
        assert!(err.contains(|v| matches!(v, Violation::AsymmetricPartners(..))));
    }

    #[test]
    fn infinite_bounds_serialize_as_null() {
        let b = PowerBounds::unbounded();
        let s = serde_json::to_string(&b).unwrap();
        assert_eq!(s, r#"{"lower":null,"upper":null}"#);
        let back: PowerBounds = serde_json::from_str(&s).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn external_cost_from_grid_applies_tariff() {
        let g = ExternalCost::from_grid(30.0, 10.0);
        assert_eq!(g.import_linear, 40.0);
        assert_eq!(g.export_linear, -20.0);
        assert_eq!(g.evaluate(1.0, 3.0), 40.0 - 60.0);
    }
}
