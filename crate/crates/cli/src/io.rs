//! Landmark files: the versioned JSON schema and plain CSV point lists.

use std::fmt;
use std::path::Path;

use indexmap::IndexMap;
use landreg_core::LandmarkConfig;
use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{CliError, CliResult};

pub const FORMAT_VERSION: u32 = 1;

/// Named point sets sharing dimension and landmark count, in file order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandmarkFile {
    pub version: u32,
    pub d: usize,
    #[serde(default, rename = "N", skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    pub sets: UniqueSets,
}

/// A map of set names to points that rejects repeated names.
#[derive(Debug, Clone, PartialEq, Serialize, Default)]
#[serde(transparent)]
pub struct UniqueSets(pub IndexMap<String, Vec<Vec<f64>>>);

impl<'de> Deserialize<'de> for UniqueSets {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = UniqueSets;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map from set names to point lists")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<UniqueSets, A::Error> {
                let mut out = IndexMap::new();
                while let Some((k, v)) = access.next_entry::<String, Vec<Vec<f64>>>()? {
                    if out.contains_key(&k) {
                        return Err(serde::de::Error::custom(format!("duplicate set name `{k}`")));
                    }
                    out.insert(k, v);
                }
                Ok(UniqueSets(out))
            }
        }
        de.deserialize_map(V)
    }
}

/// Validated landmark sets.
#[derive(Debug, Clone)]
pub struct LandmarkSets {
    pub dim: usize,
    pub labels: Option<Vec<String>>,
    pub sets: IndexMap<String, LandmarkConfig>,
}

impl LandmarkSets {
    pub fn get(&self, name: &str) -> CliResult<&LandmarkConfig> {
        self.sets.get(name).ok_or_else(|| {
            let have: Vec<&str> = self.sets.keys().map(String::as_str).collect();
            CliError::input(format!("schema error: missing landmark set `{name}` (found: {})", have.join(", ")))
        })
    }

    pub fn count(&self) -> usize {
        self.sets.values().next().map_or(0, LandmarkConfig::count)
    }

    pub fn insert(&mut self, name: &str, set: LandmarkConfig) -> CliResult<()> {
        if self.sets.contains_key(name) {
            return Err(CliError::input(format!("duplicate set name `{name}`")));
        }
        if !self.sets.is_empty() && (set.dim() != self.dim || set.count() != self.count()) {
            return Err(CliError::input(format!(
                "set `{name}` has {} points in {} dimensions, expected {} in {}",
                set.count(),
                set.dim(),
                self.count(),
                self.dim
            )));
        }
        self.dim = set.dim();
        self.sets.insert(name.to_string(), set);
        Ok(())
    }

    pub fn to_file(&self) -> LandmarkFile {
        LandmarkFile {
            version: FORMAT_VERSION,
            d: self.dim,
            n: Some(self.count()),
            labels: self.labels.clone(),
            sets: UniqueSets(self.sets.iter().map(|(k, v)| (k.clone(), v.points())).collect()),
        }
    }
}

fn to_config(name: &str, dim: usize, points: &[Vec<f64>]) -> CliResult<LandmarkConfig> {
    if points.is_empty() {
        return Err(CliError::input(format!("set `{name}` is empty")));
    }
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(CliError::input(format!("set `{name}` has a point with {} coordinates, expected {dim}", p.len())));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(CliError::input(format!("set `{name}` has non-finite coordinates")));
    }
    LandmarkConfig::from_points(points).map_err(|e| CliError::input(format!("set `{name}`: {e}")))
}

impl TryFrom<LandmarkFile> for LandmarkSets {
    type Error = CliError;

    fn try_from(f: LandmarkFile) -> CliResult<Self> {
        if f.version != FORMAT_VERSION {
            return Err(CliError::input(format!("unsupported landmark file version {}", f.version)));
        }
        if f.d == 0 {
            return Err(CliError::input("`d` must be positive"));
        }
        let mut out = LandmarkSets { dim: f.d, labels: None, sets: IndexMap::new() };
        for (name, points) in &f.sets.0 {
            out.insert(name, to_config(name, f.d, points)?)?;
        }
        if let Some(n) = f.n {
            if !out.sets.is_empty() && n != out.count() {
                return Err(CliError::input(format!("`N` = {n} but the sets have {} points", out.count())));
            }
        }
        if let Some(labels) = &f.labels {
            if labels.len() != out.count() {
                return Err(CliError::input(format!("{} labels for {} landmarks", labels.len(), out.count())));
            }
        }
        out.labels = f.labels;
        Ok(out)
    }
}

pub fn parse_landmark_json(text: &str) -> CliResult<LandmarkSets> {
    let file: LandmarkFile = serde_json::from_str(text).map_err(|e| CliError::input(format!("schema error: {e}")))?;
    file.try_into()
}

pub fn read_landmark_json(path: &Path) -> CliResult<LandmarkSets> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
    parse_landmark_json(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

/// One point per row; a first row that does not parse as numbers is taken
/// as a header.
pub fn parse_landmark_csv(name: &str, text: &str) -> CliResult<LandmarkConfig> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut points = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let parsed: Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(p) => points.push(p),
            Err(_) if row == 0 => continue,
            Err(e) => return Err(CliError::input(format!("set `{name}`, row {}: {e}", row + 1))),
        }
    }
    let dim = points.first().map_or(0, Vec::len);
    to_config(name, dim, &points)
}

pub fn read_landmark_csv(name: &str, path: &Path) -> CliResult<LandmarkConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
    parse_landmark_csv(name, &text)
}
