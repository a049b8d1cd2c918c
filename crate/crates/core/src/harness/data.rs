use chrono::{DateTime, NaiveDateTime};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::HarnessError;
use crate::model::{build_instance, InstanceConfig, MarketInstance, PowerBounds, Role};

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// Profiles and prices on a uniform time grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeSeriesBundle {
    pub timestamps: Vec<NaiveDateTime>,
    pub step_minutes: f64,
    /// Normalized values in [0, 1] per peer id.
    pub profiles: BTreeMap<String, Vec<f64>>,
    /// Market price per step ($/MWh).
    pub prices: Vec<f64>,
    /// Scale of each profiled peer (MW).
    pub capacities: BTreeMap<String, f64>,
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.naive_utc());
    }
    [
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%d %H:%M",
    ]
    .iter()
    .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

struct Table {
    columns: Vec<String>,
    timestamps: Vec<NaiveDateTime>,
    rows: Vec<Vec<f64>>,
}

fn read_table(source_name: &str, text: &str) -> Result<Table, HarnessError> {
    let parse_err = |line: usize, message: String| HarnessError::Parse {
        source_name: source_name.into(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.get(0) != Some("timestamp") {
        return Err(parse_err(1, "first column must be `timestamp`".into()));
    }
    let columns: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut timestamps = Vec::new();
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| parse_err(line, e.to_string()))?;
        let ts = record.get(0).unwrap_or_default();
        timestamps.push(parse_timestamp(ts).ok_or_else(|| parse_err(line, format!("bad timestamp `{ts}`")))?);
        let values = record
            .iter()
            .skip(1)
            .zip(&columns)
            .map(|(v, col)| {
                v.parse::<f64>()
                    .map_err(|_| parse_err(line, format!("bad value `{v}` in column `{col}`")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(values);
    }
    Ok(Table {
        columns,
        timestamps,
        rows,
    })
}

fn step_minutes(timestamps: &[NaiveDateTime]) -> Result<f64, HarnessError> {
    if timestamps.len() < 2 {
        return Ok(30.0);
    }
    let first = timestamps[1] - timestamps[0];
    for (i, w) in timestamps.windows(2).enumerate() {
        if w[1] - w[0] != first || first.num_seconds() <= 0 {
            return Err(HarnessError::NonUniformTimestep { step: i + 1 });
        }
    }
    Ok(first.num_seconds() as f64 / 60.0)
}

/// Scale of a peer's profile, read from its template bounds.
fn capacity(bounds: &PowerBounds, role: Role) -> f64 {
    match role {
        Role::Consumer => -bounds.lower,
        _ => bounds.upper,
    }
}

/// Parses profiles (`timestamp,<peer>,...`), prices (`timestamp,price`) and
/// an instance document. Capacities are the template's bounds: the upper
/// bound of producers and minus the lower bound of consumers.
pub fn ingest(
    profiles_csv: &str,
    prices_csv: &str,
    instance_json: &str,
) -> Result<(TimeSeriesBundle, MarketInstance), HarnessError> {
    let config = InstanceConfig::from_json(instance_json).map_err(|e| HarnessError::InstanceParse(e.to_string()))?;
    let template = build_instance(config)?;
    let profiles = read_table("profiles", profiles_csv)?;
    let prices = read_table("prices", prices_csv)?;
    if prices.columns.len() != 1 {
        return Err(HarnessError::Parse {
            source_name: "prices".into(),
            line: 1,
            message: "expected columns `timestamp,price`".into(),
        });
    }
    let steps = profiles.timestamps.len();
    if steps == 0 {
        return Err(HarnessError::EmptyHorizon);
    }
    if prices.timestamps.len() != steps {
        return Err(HarnessError::LengthMismatch {
            what: "prices".into(),
            expected: steps,
            found: prices.timestamps.len(),
        });
    }
    if let Some(step) = (0..steps).find(|&i| profiles.timestamps[i] != prices.timestamps[i]) {
        return Err(HarnessError::TimestampMismatch { step });
    }
    let step_minutes = step_minutes(&profiles.timestamps)?;

    let mut series = BTreeMap::new();
    let mut capacities = BTreeMap::new();
    for (c, id) in profiles.columns.iter().enumerate() {
        let n = template
            .peer_index(id)
            .ok_or_else(|| HarnessError::UnknownPeer(id.clone()))?;
        let peer = template.peer(n);
        if peer.role == Role::Grid {
            return Err(HarnessError::UnknownPeer(id.clone()));
        }
        let values: Vec<f64> = profiles.rows.iter().map(|r| r[c]).collect();
        if let Some((step, &value)) = values.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(HarnessError::ValueOutOfRange {
                series: id.clone(),
                step,
                value,
            });
        }
        capacities.insert(id.clone(), capacity(&peer.bounds, peer.role));
        series.insert(id.clone(), values);
    }
    let prices: Vec<f64> = prices.rows.iter().map(|r| r[0]).collect();
    if let Some((step, &value)) = prices.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(HarnessError::ValueOutOfRange {
            series: "price".into(),
            step,
            value,
        });
    }
    let bundle = TimeSeriesBundle {
        timestamps: profiles.timestamps,
        step_minutes,
        profiles: series,
        prices,
        capacities,
    };
    Ok((bundle, template))
}

/// [`ingest`] reading from files.
pub fn ingest_files(
    profiles: &Path,
    prices: &Path,
    instance: &Path,
) -> Result<(TimeSeriesBundle, MarketInstance), HarnessError> {
    let read = |p: &Path| {
        std::fs::read_to_string(p).map_err(|e| HarnessError::Io {
            path: p.display().to_string(),
            message: e.to_string(),
        })
    };
    ingest(&read(profiles)?, &read(prices)?, &read(instance)?)
}

impl TimeSeriesBundle {
    pub fn num_steps(&self) -> usize {
        self.timestamps.len()
    }

    /// Hours per step.
    pub fn hours(&self) -> f64 {
        self.step_minutes / 60.0
    }

    /// The template with step `step`'s bounds and grid price. Must-take
    /// producers are fixed at capacity × profile, other producers are
    /// capped by it, and consumers take up to it.
    pub fn step_instance(&self, template: &MarketInstance, step: usize) -> MarketInstance {
        let bounds: Vec<PowerBounds> = template
            .peers()
            .iter()
            .map(|p| match (self.profiles.get(&p.id), self.capacities.get(&p.id)) {
                (Some(series), Some(&cap)) => {
                    let level = cap * series[step];
                    match p.role {
                        Role::Producer if p.must_take => PowerBounds::fixed(level),
                        Role::Producer => PowerBounds::new(0.0, level),
                        _ => PowerBounds::new(-level, 0.0),
                    }
                }
                _ => p.bounds,
            })
            .collect();
        template.with_interval_data(&bounds, Some(self.prices[step]))
    }

    pub fn profiles_csv(&self) -> String {
        let mut out = String::from("timestamp");
        for id in self.profiles.keys() {
            out.push(',');
            out.push_str(id);
        }
        out.push('\n');
        for (i, ts) in self.timestamps.iter().enumerate() {
            write!(out, "{}", ts.format(TIMESTAMP_FORMAT)).expect("writing to a string");
            for series in self.profiles.values() {
                write!(out, ",{}", series[i]).expect("writing to a string");
            }
            out.push('\n');
        }
        out
    }

    pub fn prices_csv(&self) -> String {
        let mut out = String::from("timestamp,price\n");
        for (ts, p) in self.timestamps.iter().zip(&self.prices) {
            writeln!(out, "{},{}", ts.format(TIMESTAMP_FORMAT), p).expect("writing to a string");
        }
        out
    }
}
