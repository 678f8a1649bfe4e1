//! Text configuration for models. The format is INI-style with three
//! sections:
//!
//! ```ini
//! [orientation_law]
//! family = geometric        # geometric | constant_count | table
//! p = 0.5                   # geometric: excursion-count parameter
//! q = 0.5                   # optional UpDown kind probability, default 0.5
//! # m = 1                   # constant_count: excursion count
//! # family = table puts one row per key: +-++ = 0.25
//!
//! [weight_law]
//! mode = iid                # constant | iid | table
//! family = gamma            # iid: deterministic | gamma | lognormal
//! shape = 3.0
//! scale = 1.0
//! normalize = true          # optional, default true (iid and table modes)
//! # mode = table puts one whitespace-separated weight row per pattern key
//!
//! [first_crossing]          # optional
//! override_a = 0.5
//! ```
//!
//! Any scalar key in the two law sections accepts `_up` / `_down` suffixed
//! variants to split by parent orientation; the plain and suffixed spellings
//! of one key are mutually exclusive. Table rows are keyed by the pattern
//! string itself, and the final direct pair of the pattern determines which
//! parent the row belongs to. `#` and `;` start comments.

use std::cell::Cell;

use crate::model::{
    ModelError, ModelSpec, OffspringPattern, Orientation, OrientationLaw, PatternDist,
    WeightFamily, WeightLaw,
};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("section [{section}]: missing key {key}")]
    MissingKey { section: String, key: String },
    #[error("missing section [{0}]")]
    MissingSection(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn syntax(line: usize, msg: impl Into<String>) -> ConfigError {
    ConfigError::Syntax {
        line,
        msg: msg.into(),
    }
}

struct Entry {
    key: String,
    value: String,
    line: usize,
    used: Cell<bool>,
}

struct Section {
    name: String,
    line: usize,
    entries: Vec<Entry>,
}

impl Section {
    /// Looks a key up and marks it consumed.
    fn get(&self, key: &str) -> Option<&Entry> {
        self.entries
            .iter()
            .find(|e| e.key == key)
            .inspect(|e| e.used.set(true))
    }

    fn leftovers(&self) -> impl Iterator<Item = &Entry> {
        self.entries.iter().filter(|e| !e.used.get())
    }

    /// Resolves a scalar key for one side: `{base}_{side}` wins, plain `base`
    /// applies to both sides, mixing the two spellings is an error.
    fn resolve(&self, base: &str, side: Orientation) -> Result<Option<&Entry>, ConfigError> {
        let suffixed = self.get(&format!("{base}_{}", side_name(side)));
        let plain = self.get(base);
        match (plain, suffixed) {
            (Some(_), Some(s)) => Err(syntax(
                s.line,
                format!("key {base} and its suffixed variants are mutually exclusive"),
            )),
            (None, Some(s)) => Ok(Some(s)),
            (p, None) => Ok(p),
        }
    }

    fn require(&self, base: &str, side: Orientation) -> Result<&Entry, ConfigError> {
        self.resolve(base, side)?
            .ok_or_else(|| ConfigError::MissingKey {
                section: self.name.clone(),
                key: format!("{base} (or {base}_{})", side_name(side)),
            })
    }
}

fn side_name(o: Orientation) -> &'static str {
    match o {
        Orientation::Up => "up",
        Orientation::Down => "down",
    }
}

fn parse_f64(e: &Entry) -> Result<f64, ConfigError> {
    e.value.parse().map_err(|_| {
        syntax(
            e.line,
            format!("key {}: `{}` is not a number", e.key, e.value),
        )
    })
}

fn parse_usize(e: &Entry) -> Result<usize, ConfigError> {
    e.value.parse().map_err(|_| {
        syntax(
            e.line,
            format!("key {}: `{}` is not a nonnegative integer", e.key, e.value),
        )
    })
}

fn parse_bool(e: &Entry) -> Result<bool, ConfigError> {
    match e.value.as_str() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(syntax(
            e.line,
            format!("key {}: `{other}` is not true/false", e.key),
        )),
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find(['#', ';']) {
        Some(i) => &line[..i],
        None => line,
    }
}

fn parse_raw(text: &str) -> Result<Vec<Section>, ConfigError> {
    let mut sections: Vec<Section> = Vec::new();
    for (line, raw) in text.lines().enumerate().map(|(i, l)| (i + 1, l)) {
        let s = strip_comment(raw).trim();
        if s.is_empty() {
            continue;
        }
        if let Some(rest) = s.strip_prefix('[') {
            let Some(name) = rest.strip_suffix(']') else {
                return Err(syntax(line, "unterminated section header"));
            };
            let name = name.trim();
            if name.is_empty() {
                return Err(syntax(line, "empty section name"));
            }
            if sections.iter().any(|sec| sec.name == name) {
                return Err(syntax(line, format!("duplicate section [{name}]")));
            }
            sections.push(Section {
                name: name.to_string(),
                line,
                entries: Vec::new(),
            });
        } else {
            let Some((k, v)) = s.split_once('=') else {
                return Err(syntax(line, "expected `key = value` or `[section]`"));
            };
            let key = k.trim();
            let value = v.trim();
            if key.is_empty() {
                return Err(syntax(line, "empty key"));
            }
            if value.is_empty() {
                return Err(syntax(line, format!("empty value for key {key}")));
            }
            let Some(sec) = sections.last_mut() else {
                return Err(syntax(line, "key outside any section"));
            };
            if sec.entries.iter().any(|e| e.key == key) {
                return Err(syntax(line, format!("duplicate key {key}")));
            }
            sec.entries.push(Entry {
                key: key.to_string(),
                value: value.to_string(),
                line,
                used: Cell::new(false),
            });
        }
    }
    Ok(sections)
}

const SECTION_ORIENTATION: &str = "orientation_law";
const SECTION_WEIGHT: &str = "weight_law";
const SECTION_FIRST_CROSSING: &str = "first_crossing";

/// Parses a model configuration into a validated model.
pub fn parse_model_config(text: &str) -> Result<ModelSpec, ConfigError> {
    let sections = parse_raw(text)?;
    for sec in &sections {
        if ![SECTION_ORIENTATION, SECTION_WEIGHT, SECTION_FIRST_CROSSING]
            .contains(&sec.name.as_str())
        {
            return Err(syntax(sec.line, format!("unknown section [{}]", sec.name)));
        }
    }
    let find = |name: &str| sections.iter().find(|s| s.name == name);
    let orient_sec = find(SECTION_ORIENTATION)
        .ok_or_else(|| ConfigError::MissingSection(SECTION_ORIENTATION.into()))?;
    let weight_sec =
        find(SECTION_WEIGHT).ok_or_else(|| ConfigError::MissingSection(SECTION_WEIGHT.into()))?;

    let orientation_law = build_orientation_law(orient_sec)?;
    let (weight_law, normalize) = build_weight_law(weight_sec, &orientation_law)?;

    let mut override_a = None;
    if let Some(sec) = find(SECTION_FIRST_CROSSING) {
        let entry = sec
            .get("override_a")
            .ok_or_else(|| ConfigError::MissingKey {
                section: sec.name.clone(),
                key: "override_a".into(),
            })?;
        override_a = Some(parse_f64(entry)?);
        reject_leftovers(sec)?;
    }

    Ok(ModelSpec::new(
        orientation_law,
        weight_law,
        normalize,
        override_a,
    )?)
}

fn reject_leftovers(sec: &Section) -> Result<(), ConfigError> {
    if let Some(e) = sec.leftovers().next() {
        return Err(syntax(
            e.line,
            format!("unknown key {} in section [{}]", e.key, sec.name),
        ));
    }
    Ok(())
}

fn build_orientation_law(sec: &Section) -> Result<OrientationLaw, ConfigError> {
    let mut dists: [Option<PatternDist>; 2] = [None, None];
    let mut table_sides = [false; 2];
    for side in Orientation::BOTH {
        let fam = sec.require("family", side)?;
        match fam.value.as_str() {
            "geometric" => {
                let p = parse_f64(sec.require("p", side)?)?;
                let q = match sec.resolve("q", side)? {
                    Some(e) => parse_f64(e)?,
                    None => 0.5,
                };
                dists[side.index()] = Some(PatternDist::Geometric { p, q_updown: q });
            }
            "constant_count" => {
                let m = parse_usize(sec.require("m", side)?)?;
                let q = match sec.resolve("q", side)? {
                    Some(e) => parse_f64(e)?,
                    None => 0.5,
                };
                dists[side.index()] = Some(PatternDist::ConstantCount {
                    excursions: m,
                    q_updown: q,
                });
            }
            "table" => table_sides[side.index()] = true,
            other => {
                return Err(syntax(
                    fam.line,
                    format!("unknown orientation family `{other}`"),
                ))
            }
        }
    }
    // Any entry not consumed by the scalar keys must be a pattern row; the
    // row's final direct pair decides which parent it belongs to.
    let mut rows: [Vec<(OffspringPattern, f64)>; 2] = [Vec::new(), Vec::new()];
    for e in sec.leftovers() {
        let pattern = OffspringPattern::parse(&e.key)
            .map_err(|err| syntax(e.line, format!("unknown key {}: {err}", e.key)))?;
        let side = pattern.direct();
        if !table_sides[side.index()] {
            return Err(syntax(
                e.line,
                format!(
                    "pattern row {} given, but parent {side} is not a table family",
                    e.key
                ),
            ));
        }
        rows[side.index()].push((pattern, parse_f64(e)?));
    }
    for side in Orientation::BOTH {
        if table_sides[side.index()] {
            if rows[side.index()].is_empty() {
                return Err(syntax(
                    sec.line,
                    format!("table family for parent {side} has no pattern rows"),
                ));
            }
            dists[side.index()] = Some(PatternDist::Table {
                rows: std::mem::take(&mut rows[side.index()]),
            });
        }
    }
    let [up, down] = dists;
    Ok(OrientationLaw {
        up: up.expect("filled above"),
        down: down.expect("filled above"),
    })
}

fn build_weight_law(
    sec: &Section,
    orientation_law: &OrientationLaw,
) -> Result<(WeightLaw, bool), ConfigError> {
    let mode = sec.get("mode").ok_or_else(|| ConfigError::MissingKey {
        section: sec.name.clone(),
        key: "mode".into(),
    })?;
    match mode.value.as_str() {
        "constant" => {
            reject_leftovers(sec)?;
            // The value is replaced by the reciprocal mean offspring count at
            // model construction.
            Ok((WeightLaw::ConstantReciprocalMu { value: 0.0 }, true))
        }
        "iid" => {
            let normalize = match sec.get("normalize") {
                Some(e) => parse_bool(e)?,
                None => true,
            };
            let mut families: [Option<WeightFamily>; 2] = [None, None];
            for side in Orientation::BOTH {
                let fam = sec.require("family", side)?;
                families[side.index()] = Some(match fam.value.as_str() {
                    "deterministic" => WeightFamily::Deterministic {
                        value: parse_f64(sec.require("value", side)?)?,
                    },
                    "gamma" => WeightFamily::Gamma {
                        shape: parse_f64(sec.require("shape", side)?)?,
                        scale: parse_f64(sec.require("scale", side)?)?,
                    },
                    "lognormal" => WeightFamily::LogNormal {
                        location: parse_f64(sec.require("location", side)?)?,
                        sigma: parse_f64(sec.require("sigma", side)?)?,
                    },
                    other => {
                        return Err(syntax(fam.line, format!("unknown weight family `{other}`")))
                    }
                });
            }
            reject_leftovers(sec)?;
            let [up, down] = families;
            Ok((
                WeightLaw::Iid {
                    up: up.expect("filled"),
                    down: down.expect("filled"),
                },
                normalize,
            ))
        }
        "table" => {
            let normalize = match sec.get("normalize") {
                Some(e) => parse_bool(e)?,
                None => true,
            };
            let mut tables: [Vec<Vec<f64>>; 2] = [Vec::new(), Vec::new()];
            for side in Orientation::BOTH {
                let patterns = orientation_law.dist(side).table_rows().ok_or_else(|| {
                    ConfigError::Model(ModelError::InvalidLaw(
                        "weight tables require a table orientation family for both parents".into(),
                    ))
                })?;
                for (pattern, _) in patterns {
                    let key = pattern.to_string();
                    let e = sec.get(&key).ok_or_else(|| ConfigError::MissingKey {
                        section: sec.name.clone(),
                        key: format!("weight row {key}"),
                    })?;
                    let row: Result<Vec<f64>, _> = e
                        .value
                        .split_whitespace()
                        .map(|w| {
                            w.parse::<f64>().map_err(|_| {
                                syntax(e.line, format!("weight `{w}` is not a number"))
                            })
                        })
                        .collect();
                    tables[side.index()].push(row?);
                }
            }
            reject_leftovers(sec)?;
            let [up, down] = tables;
            Ok((WeightLaw::PerPatternTable { up, down }, normalize))
        }
        other => Err(syntax(mode.line, format!("unknown weight mode `{other}`"))),
    }
}
