//! Case files: the native JSON schema and a MATPOWER-style importer.
//!
//! # Native schema (`"schema": "sdnr-case/1"`)
//!
//! A case is a single JSON object:
//!
//! ```json
//! {
//!   "schema": "sdnr-case/1",
//!   "name": "example",
//!   "source": "native",
//!   "base_mva": 1.0,
//!   "base_kv": 11.0,
//!   "power_factors": { "load": 0.95, "renewable": 1.0 },
//!   "buses": [
//!     { "id": 0, "substation": true, "v_min": 0.9, "v_max": 1.1 },
//!     { "id": 1, "v_min": 0.9, "v_max": 1.1 }
//!   ],
//!   "branches": [
//!     { "id": 1, "from": 0, "to": 1, "r": 0.01, "x": 0.02 }
//!   ],
//!   "profiles": [
//!     { "bus": 1, "load_mw": 0.1 }
//!   ]
//! }
//! ```
//!
//! Field notes:
//! - Impedances and limits are per-unit on `base_mva`/`base_kv`; omitted
//!   branch limits mean "unconstrained" (a large sentinel is substituted).
//! - `"open": true` marks a tie branch that starts open; `"switchable":
//!   false` pins a branch closed in every configuration.
//! - A substation bus may carry a `"supply"` object with `p_min`/`p_max`/
//!   `q_min`/`q_max` injection bounds; omitted bounds are unconstrained.
//! - Each profile gives either `load_mw` (peak demand, scaled by the
//!   scenario load factor) or `wind_mw`/`solar_mw` (installed capacity,
//!   scaled by capacity factors and the penetration multiplier). Buses
//!   without any equipment still need a profile; use `"load_mw": 0.0`.
//! - Unknown fields are rejected, and parsing a file then re-serializing
//!   it with [`CaseDocument::canonical_json`] is a fixed point.
//!
//! # MATPOWER import
//!
//! Files ending in `.m` are read through a deliberately small importer
//! covering `mpc.baseMVA`, `mpc.bus`, and `mpc.branch` only. Branch rows
//! with status 0 become tie branches (present, initially open). Loads
//! (PD/QD) become load profiles with one aggregate power factor; shunts,
//! line charging, transformer taps/shifts, and the generator table are
//! outside the model, and taps or shifts are rejected rather than
//! silently dropped.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use sdnr::{
    Branch, BranchId, Bus, BusAssignment, BusId, BusKind, BusProfile, Network, PowerFactors,
    SubstationLimits, SwitchConfiguration, SwitchState,
};

/// Schema tag accepted by the native parser.
pub const SCHEMA: &str = "sdnr-case/1";

/// Stand-in for an omitted operating limit, far beyond any sane per-unit
/// value.
const UNBOUNDED: f64 = 1.0e9;

fn default_true() -> bool {
    true
}

fn is_true(b: &bool) -> bool {
    *b
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// One bus of a case file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseBus {
    pub id: u32,
    #[serde(default, skip_serializing_if = "is_false")]
    pub substation: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supply: Option<CaseSupply>,
    pub v_min: f64,
    pub v_max: f64,
}

/// Substation injection bounds, per-unit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseSupply {
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
}

/// One branch of a case file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseBranch {
    pub id: u32,
    pub from: u32,
    pub to: u32,
    pub r: f64,
    pub x: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub i_max: Option<f64>,
    #[serde(default = "default_true", skip_serializing_if = "is_true")]
    pub switchable: bool,
    #[serde(default, skip_serializing_if = "is_false")]
    pub open: bool,
}

/// Equipment attached to one bus. Exactly one of the load or renewable
/// field groups must be present.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseProfile {
    pub bus: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub load_mw: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wind_mw: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solar_mw: Option<f64>,
}

/// Constant power factors applied to every load and renewable.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CasePowerFactors {
    pub load: f64,
    pub renewable: f64,
}

/// A parsed and schema-checked case file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseDocument {
    pub schema: String,
    pub name: String,
    /// Provenance tag: `"native"` or the import path.
    pub source: String,
    pub base_mva: f64,
    pub base_kv: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_factors: Option<CasePowerFactors>,
    pub buses: Vec<CaseBus>,
    pub branches: Vec<CaseBranch>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub profiles: Vec<CaseProfile>,
}

impl CaseDocument {
    /// Parse a case file, dispatching on the `.m` extension for MATPOWER
    /// imports and treating everything else as the native JSON schema.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading case file {}", path.display()))?;
        if path.extension().is_some_and(|e| e == "m") {
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "imported".into());
            import_matpower(&text, &name)
                .with_context(|| format!("importing MATPOWER file {}", path.display()))
        } else {
            Self::from_json(&text).with_context(|| format!("parsing case {}", path.display()))
        }
    }

    /// Parse the native JSON schema.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: CaseDocument = serde_json::from_str(text)?;
        if doc.schema != SCHEMA {
            bail!(
                "unsupported schema tag {:?} (expected {:?})",
                doc.schema,
                SCHEMA
            );
        }
        for bus in &doc.buses {
            if bus.supply.is_some() && !bus.substation {
                bail!("bus {}: supply bounds on a non-substation bus", bus.id);
            }
        }
        for p in &doc.profiles {
            let renewable = p.wind_mw.is_some() || p.solar_mw.is_some();
            if p.load_mw.is_some() == renewable {
                bail!(
                    "profile for bus {}: give either load_mw or wind_mw/solar_mw",
                    p.bus
                );
            }
        }
        Ok(doc)
    }

    /// Canonical serialization: pretty JSON plus a trailing newline.
    /// Parsing this output reproduces the document exactly.
    pub fn canonical_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("case serializes");
        text.push('\n');
        text
    }

    /// Write the canonical serialization to `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.canonical_json())
            .with_context(|| format!("writing case file {}", path.display()))
    }

    /// Build the solver network.
    pub fn to_network(&self) -> Result<Network> {
        let buses = self
            .buses
            .iter()
            .map(|b| Bus {
                id: BusId(b.id),
                kind: if b.substation {
                    let s = b.supply.unwrap_or(CaseSupply {
                        p_min: -UNBOUNDED,
                        p_max: UNBOUNDED,
                        q_min: -UNBOUNDED,
                        q_max: UNBOUNDED,
                    });
                    BusKind::Substation(SubstationLimits {
                        p_min: s.p_min,
                        p_max: s.p_max,
                        q_min: s.q_min,
                        q_max: s.q_max,
                    })
                } else {
                    BusKind::NonSubstation
                },
                v_min: b.v_min,
                v_max: b.v_max,
            })
            .collect();
        let branches = self
            .branches
            .iter()
            .map(|b| Branch {
                id: BranchId(b.id),
                from: BusId(b.from),
                to: BusId(b.to),
                r: b.r,
                x: b.x,
                s_max: b.s_max.unwrap_or(UNBOUNDED),
                p_max: b.p_max.unwrap_or(UNBOUNDED),
                q_max: b.q_max.unwrap_or(UNBOUNDED),
                i_max: b.i_max.unwrap_or(UNBOUNDED),
                switchable: b.switchable,
            })
            .collect();
        Network::new(buses, branches, self.base_mva, self.base_kv)
            .with_context(|| format!("building network for case {:?}", self.name))
    }

    /// Bus profile assignments for scenario construction.
    pub fn assignments(&self) -> Vec<BusAssignment> {
        self.profiles
            .iter()
            .map(|p| BusAssignment {
                bus: BusId(p.bus),
                profile: match p.load_mw {
                    Some(mw) => BusProfile::Load { mw },
                    None => BusProfile::Renewable {
                        wind_mw: p.wind_mw.unwrap_or(0.0),
                        solar_mw: p.solar_mw.unwrap_or(0.0),
                    },
                },
            })
            .collect()
    }

    /// Case power factors, defaulting to 0.95 for loads and unity for
    /// renewables when the file does not pin them.
    pub fn power_factors(&self) -> PowerFactors {
        match self.power_factors {
            Some(pf) => PowerFactors {
                load_pf: pf.load,
                renewable_pf: pf.renewable,
            },
            None => PowerFactors {
                load_pf: 0.95,
                renewable_pf: 1.0,
            },
        }
    }

    /// The switch configuration the file describes: every branch closed
    /// except those marked `"open": true`.
    pub fn initial_config(&self, net: &Network) -> Result<SwitchConfiguration> {
        let mut cfg = SwitchConfiguration::all_closed(net);
        for b in &self.branches {
            if b.open {
                cfg.set(BranchId(b.id), SwitchState::Open)
                    .with_context(|| format!("marking branch {} open", b.id))?;
            }
        }
        Ok(cfg)
    }
}

/// Import the supported MATPOWER subset: `mpc.baseMVA`, `mpc.bus`,
/// `mpc.branch`. Branch status 0 marks a tie branch (kept, initially
/// open).
pub fn import_matpower(text: &str, name: &str) -> Result<CaseDocument> {
    let text = strip_comments(text);
    let base_mva = scalar_field(&text, "baseMVA")?;
    if !base_mva.is_finite() || base_mva <= 0.0 {
        bail!("baseMVA must be positive, got {base_mva}");
    }
    let bus_rows = matrix_field(&text, "bus")?;
    let branch_rows = matrix_field(&text, "branch")?;

    let mut buses = Vec::new();
    let mut profiles = Vec::new();
    let mut base_kv = None;
    let (mut pd_sum, mut qd_sum) = (0.0, 0.0);
    for (i, row) in bus_rows.iter().enumerate() {
        if row.len() < 13 {
            bail!(
                "bus row {} has {} columns, expected at least 13",
                i + 1,
                row.len()
            );
        }
        let id = row[0] as u32;
        let substation = row[1] as i64 == 3;
        if substation {
            base_kv.get_or_insert(row[9]);
        }
        buses.push(CaseBus {
            id,
            substation,
            supply: None,
            v_min: row[12],
            v_max: row[11],
        });
        let (pd, qd) = (row[2], row[3]);
        if pd != 0.0 || qd != 0.0 {
            profiles.push(CaseProfile {
                bus: id,
                load_mw: Some(pd),
                wind_mw: None,
                solar_mw: None,
            });
            pd_sum += pd;
            qd_sum += qd;
        } else if !substation {
            profiles.push(CaseProfile {
                bus: id,
                load_mw: Some(0.0),
                wind_mw: None,
                solar_mw: None,
            });
        }
    }
    let base_kv = match base_kv {
        Some(kv) if kv > 0.0 => kv,
        Some(kv) => bail!("slack bus declares non-positive base kV {kv}"),
        None => bail!("no slack bus (type 3) in mpc.bus"),
    };

    let mut branches = Vec::new();
    for (i, row) in branch_rows.iter().enumerate() {
        if row.len() < 11 {
            bail!(
                "branch row {} has {} columns, expected at least 11",
                i + 1,
                row.len()
            );
        }
        let (tap, shift) = (row[8], row[9]);
        if (tap != 0.0 && tap != 1.0) || shift != 0.0 {
            bail!(
                "branch row {}: transformer taps/shifts are not supported",
                i + 1
            );
        }
        let rate_a = row[5];
        branches.push(CaseBranch {
            id: (i + 1) as u32,
            from: row[0] as u32,
            to: row[1] as u32,
            r: row[2],
            x: row[3],
            s_max: (rate_a > 0.0).then_some(rate_a / base_mva),
            p_max: None,
            q_max: None,
            i_max: None,
            switchable: true,
            open: row[10] == 0.0,
        });
    }

    let power_factors = (pd_sum > 0.0).then(|| CasePowerFactors {
        load: pd_sum / pd_sum.hypot(qd_sum),
        renewable: 1.0,
    });

    Ok(CaseDocument {
        schema: SCHEMA.to_string(),
        name: name.to_string(),
        source: "matpower".to_string(),
        base_mva,
        base_kv,
        power_factors,
        buses,
        branches,
        profiles,
    })
}

fn strip_comments(text: &str) -> String {
    text.lines()
        .map(|line| line.split('%').next().unwrap_or(""))
        .collect::<Vec<_>>()
        .join("\n")
}

fn after_assignment<'a>(text: &'a str, field: &str) -> Result<&'a str> {
    let key = format!("mpc.{field}");
    let start = text
        .find(&key)
        .with_context(|| format!("{key} not found"))?;
    let rest = &text[start + key.len()..];
    let eq = rest
        .find('=')
        .with_context(|| format!("{key}: no assignment"))?;
    Ok(&rest[eq + 1..])
}

fn scalar_field(text: &str, field: &str) -> Result<f64> {
    let rest = after_assignment(text, field)?;
    let value = rest
        .split(';')
        .next()
        .unwrap_or("")
        .trim()
        .parse::<f64>()
        .with_context(|| format!("mpc.{field}: expected a number"))?;
    Ok(value)
}

fn matrix_field(text: &str, field: &str) -> Result<Vec<Vec<f64>>> {
    let rest = after_assignment(text, field)?;
    let open = rest
        .find('[')
        .with_context(|| format!("mpc.{field}: expected a matrix"))?;
    let close = rest[open..]
        .find(']')
        .with_context(|| format!("mpc.{field}: unterminated matrix"))?;
    let body = &rest[open + 1..open + close];
    let mut rows = Vec::new();
    for line in body.split([';', '\n']) {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        let row = tokens
            .iter()
            .map(|t| {
                t.parse::<f64>()
                    .with_context(|| format!("mpc.{field}: bad number {t:?}"))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        bail!("mpc.{field}: empty matrix");
    }
    Ok(rows)
}
