//! Scenario construction: time-series ingest, k-medoids reduction, and
//! translation of capacity/load factors into per-bus power injections.
//!
//! The pipeline is: a [`TimeSeriesTable`] of hourly wind/solar capacity
//! factors and load factors (ingested from CSV or generated synthetically)
//! is reduced to a small set of representative rows by
//! [`reduce_kmedoids`]; each representative row plus its empirical
//! probability becomes a [`ScenarioFactors`]; [`build_scenarios`] scales the
//! factors by the per-bus equipment sizes and power factors into net
//! injections, yielding the [`ScenarioSet`] consumed by the solvers.
//!
//! Everything downstream treats injections as net values: loads consume
//! (negative injection), renewables produce (positive injection).

use std::collections::BTreeMap;
use std::io::Read;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::netgraph::{BusId, Network};

/// Net complex power injection at one bus, per-unit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScenarioInjection {
    pub p: f64,
    pub q: f64,
}

/// One probability-weighted operating condition: a net injection for every
/// non-substation bus.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub injections: BTreeMap<BusId, ScenarioInjection>,
    pub weight: f64,
}

impl Scenario {
    pub fn injection(&self, bus: BusId) -> Option<ScenarioInjection> {
        self.injections.get(&bus).copied()
    }
}

/// A non-empty set of scenarios whose weights are positive and sum to one.
#[derive(Clone, Debug)]
pub struct ScenarioSet {
    scenarios: Vec<Scenario>,
}

impl ScenarioSet {
    /// Validates positivity and normalization (sum within `1e-9` of one).
    pub fn new(scenarios: Vec<Scenario>) -> Result<Self, ScenarioError> {
        if scenarios.is_empty() {
            return Err(ScenarioError::EmptyScenarioSet);
        }
        for (i, s) in scenarios.iter().enumerate() {
            if !(s.weight > 0.0 && s.weight.is_finite()) {
                return Err(ScenarioError::NonPositiveWeight { index: i });
            }
        }
        let sum: f64 = scenarios.iter().map(|s| s.weight).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(ScenarioError::WeightsDoNotSumToOne { sum });
        }
        Ok(ScenarioSet { scenarios })
    }

    pub fn scenarios(&self) -> &[Scenario] {
        &self.scenarios
    }

    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }
}

/// One time step of normalized operating conditions: wind and solar
/// capacity factors in `[0, 1]` and a non-negative load factor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FactorRow {
    pub wind_cf: f64,
    pub solar_cf: f64,
    pub load_factor: f64,
}

impl FactorRow {
    fn validate(&self, row: usize) -> Result<(), ScenarioError> {
        let vals = [self.wind_cf, self.solar_cf, self.load_factor];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(ScenarioError::NonFiniteFactor { row });
        }
        let cf_ok = |v: f64| (0.0..=1.0).contains(&v);
        if !cf_ok(self.wind_cf) || !cf_ok(self.solar_cf) || self.load_factor < 0.0 {
            return Err(ScenarioError::FactorOutOfRange { row });
        }
        Ok(())
    }
}

/// An ordered table of factor rows, one per time step (hourly by
/// convention: row `t` is hour `t % 24` of day `t / 24`).
#[derive(Clone, Debug, Default)]
pub struct TimeSeriesTable {
    rows: Vec<FactorRow>,
}

impl TimeSeriesTable {
    pub fn new(rows: Vec<FactorRow>) -> Result<Self, ScenarioError> {
        for (i, r) in rows.iter().enumerate() {
            r.validate(i)?;
        }
        Ok(TimeSeriesTable { rows })
    }

    pub fn rows(&self) -> &[FactorRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows belonging to one hour of the day (`hour < 24`), preserving
    /// chronological order.
    pub fn hourly_subtable(&self, hour: usize) -> TimeSeriesTable {
        let rows = self
            .rows
            .iter()
            .enumerate()
            .filter(|(t, _)| t % 24 == hour % 24)
            .map(|(_, r)| *r)
            .collect();
        TimeSeriesTable { rows }
    }
}

/// Header names of the three factor columns in an input CSV.
#[derive(Clone, Debug)]
pub struct ColumnMapping {
    pub wind: String,
    pub solar: String,
    pub load: String,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        ColumnMapping {
            wind: "wind_cf".into(),
            solar: "solar_cf".into(),
            load: "load_factor".into(),
        }
    }
}

/// A data line that could not be used, with the 1-based file line number.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RejectedRow {
    pub line: usize,
    pub reason: String,
}

/// Result of a CSV ingest: the usable rows plus a record of every line
/// that was dropped and why.
#[derive(Clone, Debug)]
pub struct IngestOutcome {
    pub table: TimeSeriesTable,
    pub rejected: Vec<RejectedRow>,
}

/// Errors from scenario construction.
#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario set is empty")]
    EmptyScenarioSet,
    #[error("scenario {index} has a non-positive weight")]
    NonPositiveWeight { index: usize },
    #[error("scenario weights sum to {sum}, expected 1")]
    WeightsDoNotSumToOne { sum: f64 },
    #[error("factor row {row} contains a non-finite value")]
    NonFiniteFactor { row: usize },
    #[error("factor row {row} is out of range (capacity factors in [0,1], load factor >= 0)")]
    FactorOutOfRange { row: usize },
    #[error("time-series table is empty")]
    EmptyTable,
    #[error("cannot form {k} clusters from {rows} rows")]
    BadClusterCount { k: usize, rows: usize },
    #[error("input is missing column {0:?}")]
    MissingColumn(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("power factor {0} must lie in (0, 1]")]
    BadPowerFactor(f64),
    #[error("renewable scaling factor {0} must be non-negative and finite")]
    BadScaling(f64),
    #[error("bus {0} is assigned a profile more than once")]
    DuplicateAssignment(BusId),
    #[error("assigned bus {0} does not exist in the network")]
    UnknownAssignedBus(BusId),
    #[error("bus {0} is a substation and cannot carry a load or renewable profile")]
    SubstationAssignment(BusId),
    #[error("non-substation bus {0} has no profile assignment")]
    UnassignedBus(BusId),
    #[error("bus {0} has a negative or non-finite equipment size")]
    BadMagnitude(BusId),
}

/// Read an hourly factor table from headered CSV.
///
/// The parser is deliberately minimal: comma-separated, no quoting, blank
/// lines skipped. A missing mapped column is a hard error; malformed or
/// out-of-range data lines are dropped and reported in
/// [`IngestOutcome::rejected`] with their file line numbers.
pub fn ingest_csv<R: Read>(
    mut reader: R,
    mapping: &ColumnMapping,
) -> Result<IngestOutcome, ScenarioError> {
    let mut text = String::new();
    reader.read_to_string(&mut text)?;
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());

    let (_, header) = lines.next().ok_or(ScenarioError::EmptyTable)?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let find = |name: &str| -> Result<usize, ScenarioError> {
        columns
            .iter()
            .position(|c| *c == name)
            .ok_or_else(|| ScenarioError::MissingColumn(name.to_string()))
    };
    let wind_col = find(&mapping.wind)?;
    let solar_col = find(&mapping.solar)?;
    let load_col = find(&mapping.load)?;
    let needed = wind_col.max(solar_col).max(load_col);

    let mut rows = Vec::new();
    let mut rejected = Vec::new();
    for (line, raw) in lines {
        let fields: Vec<&str> = raw.split(',').map(str::trim).collect();
        if fields.len() <= needed {
            rejected.push(RejectedRow {
                line,
                reason: format!(
                    "expected at least {} fields, found {}",
                    needed + 1,
                    fields.len()
                ),
            });
            continue;
        }
        let parse = |col: usize, name: &str| -> Result<f64, String> {
            fields[col]
                .parse::<f64>()
                .map_err(|_| format!("column {:?} value {:?} is not a number", name, fields[col]))
        };
        let parsed = parse(wind_col, &mapping.wind)
            .and_then(|w| parse(solar_col, &mapping.solar).map(|s| (w, s)))
            .and_then(|(w, s)| parse(load_col, &mapping.load).map(|l| (w, s, l)));
        let (wind_cf, solar_cf, load_factor) = match parsed {
            Ok(v) => v,
            Err(reason) => {
                rejected.push(RejectedRow { line, reason });
                continue;
            }
        };
        let row = FactorRow {
            wind_cf,
            solar_cf,
            load_factor,
        };
        if let Err(e) = row.validate(rows.len()) {
            rejected.push(RejectedRow {
                line,
                reason: match e {
                    ScenarioError::NonFiniteFactor { .. } => "non-finite value".to_string(),
                    _ => "value out of range (capacity factors in [0,1], load factor >= 0)"
                        .to_string(),
                },
            });
            continue;
        }
        rows.push(row);
    }
    Ok(IngestOutcome {
        table: TimeSeriesTable { rows },
        rejected,
    })
}

/// A representative operating condition with its empirical probability.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScenarioFactors {
    pub factors: FactorRow,
    pub probability: f64,
}

/// Output of [`reduce_kmedoids`]: the chosen medoids and the induced
/// empirical distribution over them.
#[derive(Clone, Debug)]
pub struct Clustering {
    /// Row indices of the medoids in the input table, ascending.
    pub medoid_rows: Vec<usize>,
    /// The medoid rows themselves (actual input rows, not averages).
    pub factors: Vec<FactorRow>,
    /// Fraction of input rows in each cluster; sums to one.
    pub probabilities: Vec<f64>,
    /// Cluster index of every input row.
    pub assignment: Vec<usize>,
    /// Total clustering cost after seeding and after each applied swap;
    /// strictly decreasing.
    pub cost_history: Vec<f64>,
}

impl Clustering {
    pub fn scenario_factors(&self) -> Vec<ScenarioFactors> {
        self.factors
            .iter()
            .zip(&self.probabilities)
            .map(|(f, p)| ScenarioFactors {
                factors: *f,
                probability: *p,
            })
            .collect()
    }
}

/// Reduce a factor table to `k` representative rows by k-medoids.
///
/// Columns are z-score normalized (a zero-variance column contributes
/// nothing to distances); seeding picks medoids with probability
/// proportional to squared distance from the nearest already-chosen medoid;
/// the swap phase applies the single best cost-reducing exchange until none
/// exists. Fully deterministic for a given `seed`.
pub fn reduce_kmedoids(
    table: &TimeSeriesTable,
    k: usize,
    seed: u64,
) -> Result<Clustering, ScenarioError> {
    let n = table.len();
    if n == 0 {
        return Err(ScenarioError::EmptyTable);
    }
    if k == 0 || k > n {
        return Err(ScenarioError::BadClusterCount { k, rows: n });
    }

    // Z-score normalization with the population standard deviation.
    let raw: Vec<[f64; 3]> = table
        .rows()
        .iter()
        .map(|r| [r.wind_cf, r.solar_cf, r.load_factor])
        .collect();
    let mut mean = [0.0_f64; 3];
    for row in &raw {
        for c in 0..3 {
            mean[c] += row[c];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut sigma = [0.0_f64; 3];
    for row in &raw {
        for c in 0..3 {
            let d = row[c] - mean[c];
            sigma[c] += d * d;
        }
    }
    for s in &mut sigma {
        *s = (*s / n as f64).sqrt();
    }
    let points: Vec<[f64; 3]> = raw
        .iter()
        .map(|row| {
            let mut p = [0.0; 3];
            for c in 0..3 {
                p[c] = if sigma[c] > 0.0 {
                    (row[c] - mean[c]) / sigma[c]
                } else {
                    0.0
                };
            }
            p
        })
        .collect();
    let dist = |a: usize, b: usize| -> f64 {
        let (pa, pb) = (&points[a], &points[b]);
        let mut s = 0.0;
        for c in 0..3 {
            let d = pa[c] - pb[c];
            s += d * d;
        }
        s.sqrt()
    };

    // Distance-weighted seeding.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut medoids: Vec<usize> = vec![rng.gen_range(0..n)];
    let mut nearest: Vec<f64> = (0..n).map(|i| dist(i, medoids[0])).collect();
    while medoids.len() < k {
        let total: f64 = nearest.iter().map(|d| d * d).sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = None;
            for (i, d) in nearest.iter().enumerate() {
                let w = d * d;
                if w > 0.0 {
                    if target < w {
                        chosen = Some(i);
                        break;
                    }
                    target -= w;
                }
            }
            chosen.unwrap_or_else(|| {
                (0..n)
                    .rev()
                    .find(|i| nearest[*i] > 0.0)
                    .expect("positive total distance implies a positive entry")
            })
        } else {
            // All remaining points coincide with a medoid; take the first
            // index not yet chosen.
            (0..n)
                .find(|i| !medoids.contains(i))
                .expect("k <= n leaves an unchosen index")
        };
        medoids.push(pick);
        for (i, near) in nearest.iter_mut().enumerate() {
            *near = near.min(dist(i, pick));
        }
    }

    // Nearest / second-nearest bookkeeping for fast swap deltas.
    let assign = |medoids: &[usize]| -> (Vec<usize>, Vec<f64>, Vec<f64>) {
        let mut slot = vec![0usize; n];
        let mut d1 = vec![f64::INFINITY; n];
        let mut d2 = vec![f64::INFINITY; n];
        for i in 0..n {
            for (s, &m) in medoids.iter().enumerate() {
                let d = dist(i, m);
                if d < d1[i] {
                    d2[i] = d1[i];
                    d1[i] = d;
                    slot[i] = s;
                } else if d < d2[i] {
                    d2[i] = d;
                }
            }
        }
        (slot, d1, d2)
    };

    let (mut slot, mut d1, mut d2) = assign(&medoids);
    let mut cost: f64 = d1.iter().sum();
    let mut cost_history = vec![cost];
    let max_swaps = 10 * n.max(k * k);
    for _ in 0..max_swaps {
        let mut best: Option<(usize, usize, f64)> = None;
        for out_slot in 0..k {
            for cand in 0..n {
                if medoids.contains(&cand) {
                    continue;
                }
                let mut delta = 0.0;
                for i in 0..n {
                    let d_new = dist(i, cand);
                    delta += if slot[i] == out_slot {
                        d_new.min(d2[i]) - d1[i]
                    } else if d_new < d1[i] {
                        d_new - d1[i]
                    } else {
                        0.0
                    };
                }
                if delta < -1e-12 && best.is_none_or(|(_, _, bd)| delta < bd) {
                    best = Some((out_slot, cand, delta));
                }
            }
        }
        let Some((out_slot, cand, _)) = best else {
            break;
        };
        medoids[out_slot] = cand;
        let upd = assign(&medoids);
        slot = upd.0;
        d1 = upd.1;
        d2 = upd.2;
        cost = d1.iter().sum();
        cost_history.push(cost);
    }

    medoids.sort_unstable();
    let (slot, _, _) = assign(&medoids);
    let mut counts = vec![0usize; k];
    for &s in &slot {
        counts[s] += 1;
    }
    let probabilities: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
    let factors: Vec<FactorRow> = medoids.iter().map(|&m| table.rows()[m]).collect();
    Ok(Clustering {
        medoid_rows: medoids,
        factors,
        probabilities,
        assignment: slot,
        cost_history,
    })
}

/// Size and kind of the equipment at one bus.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BusProfile {
    /// A consumer with the given peak demand in MW.
    Load { mw: f64 },
    /// A producer with the given installed capacities in MW.
    Renewable { wind_mw: f64, solar_mw: f64 },
}

/// Pairs a bus with its profile.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BusAssignment {
    pub bus: BusId,
    pub profile: BusProfile,
}

/// Constant power factors applied to loads and renewables.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerFactors {
    pub load_pf: f64,
    pub renewable_pf: f64,
}

impl PowerFactors {
    fn validate(&self) -> Result<(f64, f64), ScenarioError> {
        let check = |pf: f64| -> Result<f64, ScenarioError> {
            if pf > 0.0 && pf <= 1.0 {
                Ok(pf.acos().tan())
            } else {
                Err(ScenarioError::BadPowerFactor(pf))
            }
        };
        Ok((check(self.load_pf)?, check(self.renewable_pf)?))
    }
}

/// Turn factor rows into per-bus net injections on the network's MVA base.
///
/// For a load bus, active demand is `load_factor * mw / base_mva`; for a
/// renewable bus, active production is
/// `k_r * (wind_cf * wind_mw + solar_cf * solar_mw) / base_mva`, where
/// `k_r` scales the installed renewable capacity. Reactive power follows
/// the respective power factor. Loads enter as negative injections,
/// renewables as positive ones. Every non-substation bus must be assigned
/// exactly one profile.
pub fn build_scenarios(
    net: &Network,
    assignments: &[BusAssignment],
    factors: &[ScenarioFactors],
    pf: &PowerFactors,
    k_r: f64,
) -> Result<ScenarioSet, ScenarioError> {
    let (load_tan, ren_tan) = pf.validate()?;
    if !(k_r >= 0.0 && k_r.is_finite()) {
        return Err(ScenarioError::BadScaling(k_r));
    }

    let mut profiles: BTreeMap<BusId, BusProfile> = BTreeMap::new();
    for a in assignments {
        let idx = net
            .bus_index(a.bus)
            .ok_or(ScenarioError::UnknownAssignedBus(a.bus))?;
        if net.buses()[idx].kind.is_substation() {
            return Err(ScenarioError::SubstationAssignment(a.bus));
        }
        let sizes_ok = match a.profile {
            BusProfile::Load { mw } => mw >= 0.0 && mw.is_finite(),
            BusProfile::Renewable { wind_mw, solar_mw } => {
                wind_mw >= 0.0 && wind_mw.is_finite() && solar_mw >= 0.0 && solar_mw.is_finite()
            }
        };
        if !sizes_ok {
            return Err(ScenarioError::BadMagnitude(a.bus));
        }
        if profiles.insert(a.bus, a.profile).is_some() {
            return Err(ScenarioError::DuplicateAssignment(a.bus));
        }
    }
    for bus in net.buses() {
        if !bus.kind.is_substation() && !profiles.contains_key(&bus.id) {
            return Err(ScenarioError::UnassignedBus(bus.id));
        }
    }

    let base = net.base_mva();
    let scenarios = factors
        .iter()
        .map(|sf| {
            let mut injections = BTreeMap::new();
            for (&bus, profile) in &profiles {
                let (p, q) = match *profile {
                    BusProfile::Load { mw } => {
                        let d = sf.factors.load_factor * mw / base;
                        (-d, -d * load_tan)
                    }
                    BusProfile::Renewable { wind_mw, solar_mw } => {
                        let g = k_r
                            * (sf.factors.wind_cf * wind_mw + sf.factors.solar_cf * solar_mw)
                            / base;
                        (g, g * ren_tan)
                    }
                };
                injections.insert(bus, ScenarioInjection { p, q });
            }
            Scenario {
                injections,
                weight: sf.probability,
            }
        })
        .collect();
    ScenarioSet::new(scenarios)
}

/// Generate a plausible hourly factor table covering `days` days.
///
/// Load follows a daily sinusoid peaking in the evening, solar a daylight
/// bell that is exactly zero at night, and wind a slow multi-day cycle;
/// all three carry bounded uniform noise and are clamped to valid ranges.
/// Deterministic for a given `seed`.
pub fn synthetic_table(days: usize, seed: u64) -> TimeSeriesTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(days * 24);
    for t in 0..days * 24 {
        let hour = (t % 24) as f64;
        let load_wave = 0.6 + 0.25 * (std::f64::consts::TAU * (hour - 9.0) / 24.0).sin();
        let load_factor = (load_wave + rng.gen_range(-0.05..=0.05)).clamp(0.2, 1.0);

        let solar_cf = if (6.0..18.0).contains(&hour) {
            let bell = (std::f64::consts::PI * (hour - 6.0) / 12.0).sin();
            (0.75 * bell + rng.gen_range(-0.08..=0.08)).clamp(0.0, 1.0)
        } else {
            0.0
        };

        let wind_wave = 0.35 + 0.2 * (std::f64::consts::TAU * t as f64 / 72.0).sin();
        let wind_cf = (wind_wave + rng.gen_range(-0.10..=0.10)).clamp(0.05, 0.95);

        rows.push(FactorRow {
            wind_cf,
            solar_cf,
            load_factor,
        });
    }
    TimeSeriesTable { rows }
}
