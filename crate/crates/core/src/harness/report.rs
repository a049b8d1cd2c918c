use chrono::NaiveDateTime;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;

use super::{HarnessError, TimeSeriesBundle, TIMESTAMP_FORMAT};
use crate::clearing::{clear_as, ClearingResult, Node};
use crate::model::{Design, MarketInstance};
use crate::qp::{SolveOptions, Status};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct SimulationOptions {
    pub solver: SolveOptions,
    /// Record infeasible or unsolved steps and go on instead of aborting.
    pub skip_infeasible: bool,
}

/// Energy (MWh) and money ($) of a step or of the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Totals {
    pub social_welfare: f64,
    pub import_cost: f64,
    pub export_revenue: f64,
    pub total_load: f64,
    pub total_import: f64,
    pub total_export: f64,
    pub community_exchange: f64,
    pub transaction_cost: f64,
    pub inter_community_fees: f64,
    pub production: f64,
    pub consumption: f64,
}

impl Totals {
    fn of(result: &ClearingResult, hours: f64) -> Self {
        let m = &result.metrics;
        Self {
            social_welfare: result.social_welfare * hours,
            import_cost: m.import_cost * hours,
            export_revenue: m.export_revenue * hours,
            total_load: m.load * hours,
            total_import: m.import * hours,
            total_export: m.export * hours,
            community_exchange: m.community_exchange * hours,
            transaction_cost: result.transaction_cost_total * hours,
            inter_community_fees: m.inter_community_fees * hours,
            production: m.production * hours,
            consumption: m.consumption * hours,
        }
    }

    fn add(&mut self, o: &Totals) {
        self.social_welfare += o.social_welfare;
        self.import_cost += o.import_cost;
        self.export_revenue += o.export_revenue;
        self.total_load += o.total_load;
        self.total_import += o.total_import;
        self.total_export += o.total_export;
        self.community_exchange += o.community_exchange;
        self.transaction_cost += o.transaction_cost;
        self.inter_community_fees += o.inter_community_fees;
        self.production += o.production;
        self.consumption += o.consumption;
    }

    pub const COLUMNS: [&'static str; 11] = [
        "social_welfare",
        "import_cost",
        "export_revenue",
        "total_load",
        "total_import",
        "total_export",
        "community_exchange",
        "transaction_cost",
        "inter_community_fees",
        "production",
        "consumption",
    ];

    pub fn values(&self) -> [f64; 11] {
        [
            self.social_welfare,
            self.import_cost,
            self.export_revenue,
            self.total_load,
            self.total_import,
            self.total_export,
            self.community_exchange,
            self.transaction_cost,
            self.inter_community_fees,
            self.production,
            self.consumption,
        ]
    }
}

/// Energy (MWh) sold by label `from` to label `to` during a step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Flow {
    pub from: usize,
    pub to: usize,
    pub mwh: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(serialize_with = "timestamp")]
    pub timestamp: NaiveDateTime,
    pub status: Status,
    pub totals: Totals,
    /// Net injection per peer (MW).
    pub net_injection: Vec<f64>,
    /// Largest trade reciprocity error (MW); trades are stored once per pair.
    pub reciprocity_error: f64,
    pub kkt_max: f64,
    pub iterations: usize,
    pub flows: Vec<Flow>,
}

fn timestamp<S: serde::Serializer>(t: &NaiveDateTime, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(&t.format(TIMESTAMP_FORMAT))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedStep {
    pub step: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HorizonReport {
    pub design: Design,
    pub step_minutes: f64,
    pub peer_ids: Vec<String>,
    /// Flow endpoints: the peer ids, then per community its pool, import
    /// and export.
    pub labels: Vec<String>,
    pub totals: Totals,
    pub steps: Vec<StepRecord>,
    pub skipped: Vec<SkippedStep>,
}

fn labels(template: &MarketInstance) -> Vec<String> {
    let mut labels: Vec<String> = template.peers().iter().map(|p| p.id.clone()).collect();
    for c in template.communities() {
        for part in ["pool", "import", "export"] {
            labels.push(format!("{} {part}", c.id));
        }
    }
    labels
}

fn flows(result: &ClearingResult, num_peers: usize, hours: f64) -> Vec<Flow> {
    let mut out = Vec::new();
    let mut push = |from, to, mw: f64| {
        if mw != 0.0 {
            out.push(Flow {
                from,
                to,
                mwh: mw * hours,
            });
        }
    };
    for d in &result.community_decisions {
        let base = num_peers + 3 * d.community;
        for m in &d.members {
            push(base, m.peer, m.q);
            push(base + 1, m.peer, m.alpha);
            push(m.peer, base + 2, m.beta);
        }
    }
    if let Some(t) = &result.trades {
        for p in t.pairs() {
            if let (Node::Peer(a), Node::Peer(b)) = (t.nodes()[p.a], t.nodes()[p.b]) {
                push(a, b, p.mw);
            }
        }
    }
    out
}

fn record(step: usize, ts: NaiveDateTime, r: &ClearingResult, hours: f64) -> StepRecord {
    let reciprocity_error = r.trades.as_ref().map_or(0.0, |t| {
        let sum: f64 = (0..t.nodes().len()).map(|n| t.net(n)).sum();
        sum.abs()
    });
    StepRecord {
        step,
        timestamp: ts,
        status: r.status,
        totals: Totals::of(r, hours),
        net_injection: r.net_injection.clone(),
        reciprocity_error,
        kkt_max: r.kkt.max(),
        iterations: r.iterations,
        flows: flows(r, r.net_injection.len(), hours),
    }
}

/// Clears every step of `bundle` under `design`, in parallel, and
/// aggregates. Steps are independent; the report is ordered by step.
pub fn simulate(
    bundle: &TimeSeriesBundle,
    template: &MarketInstance,
    design: Design,
    opts: &SimulationOptions,
) -> Result<HorizonReport, HarnessError> {
    let hours = bundle.hours();
    let outcomes: Vec<_> = (0..bundle.num_steps())
        .into_par_iter()
        .map(|step| {
            let instance = bundle.step_instance(template, step);
            clear_as(&instance, design, &opts.solver)
                .map(|r| record(step, bundle.timestamps[step], &r, hours))
                .map_err(|source| HarnessError::Step { step, source })
        })
        .collect();
    let mut steps = Vec::with_capacity(outcomes.len());
    let mut skipped = Vec::new();
    let mut totals = Totals::default();
    for outcome in outcomes {
        match outcome {
            Ok(rec) => {
                totals.add(&rec.totals);
                steps.push(rec);
            }
            Err(HarnessError::Step { step, source }) if opts.skip_infeasible => {
                skipped.push(SkippedStep {
                    step,
                    reason: source.to_string(),
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(HorizonReport {
        design,
        step_minutes: bundle.step_minutes,
        peer_ids: template.peers().iter().map(|p| p.id.clone()).collect(),
        labels: labels(template),
        totals,
        steps,
        skipped,
    })
}

/// Energy bought by `peer_id` from each counterpart (MWh, negative when
/// sold), for every step of `window`. Each map sums to the peer's
/// consumption over the step (minus its production).
pub fn trade_breakdown(
    report: &HorizonReport,
    peer_id: &str,
    window: Range<usize>,
) -> Result<Vec<BTreeMap<String, f64>>, HarnessError> {
    let n = report
        .peer_ids
        .iter()
        .position(|p| p == peer_id)
        .ok_or_else(|| HarnessError::UnknownPeer(peer_id.into()))?;
    let horizon = report.steps.len() + report.skipped.len();
    if window.start >= window.end || window.end > horizon {
        return Err(HarnessError::WindowOutOfRange {
            start: window.start,
            end: window.end,
            steps: horizon,
        });
    }
    let by_step: BTreeMap<usize, &StepRecord> = report.steps.iter().map(|s| (s.step, s)).collect();
    Ok(window
        .map(|step| {
            let mut out = BTreeMap::new();
            if let Some(rec) = by_step.get(&step) {
                for f in &rec.flows {
                    let (partner, mwh) = if f.to == n {
                        (f.from, f.mwh)
                    } else if f.from == n {
                        (f.to, -f.mwh)
                    } else {
                        continue;
                    };
                    *out.entry(report.labels[partner].clone()).or_insert(0.0) += mwh;
                }
            }
            out
        })
        .collect())
}

impl HorizonReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Per-step rows followed by a `total` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,timestamp,status");
        for c in Totals::COLUMNS {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for s in &self.steps {
            let status = serde_json::to_value(s.status).expect("status serializes");
            write!(
                out,
                "{},{},{}",
                s.step,
                s.timestamp.format(TIMESTAMP_FORMAT),
                status.as_str().unwrap_or_default()
            )
            .expect("writing to a string");
            for v in s.totals.values() {
                write!(out, ",{v}").expect("writing to a string");
            }
            out.push('\n');
        }
        out.push_str("total,,");
        for v in self.totals.values() {
            write!(out, ",{v}").expect("writing to a string");
        }
        out.push('\n');
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clearing::fixtures::bilateral;
    use crate::model::PowerBounds;
    use chrono::Duration;

    fn repeated(steps: usize) -> (TimeSeriesBundle, MarketInstance) {
        let start = NaiveDateTime::parse_from_str("2013-06-01T00:00:00", TIMESTAMP_FORMAT).unwrap();
        let bundle = TimeSeriesBundle {
            timestamps: (0..steps).map(|i| start + Duration::minutes(30 * i as i64)).collect(),
            step_minutes: 30.0,
            profiles: BTreeMap::new(),
            prices: vec![0.0; steps],
            capacities: BTreeMap::new(),
        };
        (bundle, bilateral(0.0))
    }

    #[test]
    fn repeated_oracle_doubles_half_hour_welfare() {
        let (bundle, t) = repeated(2);
        let r = simulate(&bundle, &t, Design::FullP2p, &SimulationOptions::default()).unwrap();
        assert!((r.totals.social_welfare - 25.0).abs() <= 1e-6);
        let b = trade_breakdown(&r, "c1", 0..1).unwrap();
        assert_eq!(b.len(), 1);
        assert!((b[0]["g1"] - 2.5).abs() <= 1e-6);
        let sum: f64 = r.steps.iter().map(|s| s.totals.social_welfare).sum();
        assert!((sum - r.totals.social_welfare).abs() <= 1e-12);
    }

    #[test]
    fn idle_peers_have_empty_breakdowns() {
        let (mut bundle, t) = repeated(2);
        bundle.profiles.insert("c1".into(), vec![0.0, 0.0]);
        bundle.capacities.insert("c1".into(), 10.0);
        let r = simulate(&bundle, &t, Design::FullP2p, &SimulationOptions::default()).unwrap();
        assert_eq!(r.totals, Totals::default());
        assert!(trade_breakdown(&r, "c1", 0..2).unwrap().iter().all(BTreeMap::is_empty));
        assert!(matches!(
            trade_breakdown(&r, "c1", 1..3),
            Err(HarnessError::WindowOutOfRange { .. })
        ));
        assert!(matches!(
            trade_breakdown(&r, "x", 0..1),
            Err(HarnessError::UnknownPeer(_))
        ));
        assert_eq!(bundle.step_instance(&t, 0).peer(1).bounds, PowerBounds::new(-0.0, 0.0));
    }

    #[test]
    fn csv_ends_with_totals() {
        let (bundle, t) = repeated(2);
        let r = simulate(&bundle, &t, Design::FullP2p, &SimulationOptions::default()).unwrap();
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().last().unwrap().starts_with("total,,,25"));
    }
}
