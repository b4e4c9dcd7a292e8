//! Source and target label spaces and the many-to-one class unification
//! between them.
//!
//! The source space mirrors a coarse land-cover product with 15 named
//! classes; the target space has the four classes used for evaluation
//! (Built-up, Tree canopy, Low vegetation, Water). Class ids follow listing
//! order starting at 1; id 0 is reserved for no-data in both spaces and is
//! excluded from losses and metrics.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::grid::Raster;

/// An ordered set of classes plus an optional reserved no-data id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpace {
    name: String,
    class_ids: Vec<u16>,
    class_names: Vec<String>,
    ignore_id: Option<u16>,
}

impl LabelSpace {
    pub fn new(
        name: impl Into<String>,
        class_ids: Vec<u16>,
        class_names: Vec<String>,
        ignore_id: Option<u16>,
    ) -> Result<Self> {
        if class_ids.len() != class_names.len() {
            return Err(Error::invalid(format!(
                "label space has {} ids but {} names",
                class_ids.len(),
                class_names.len()
            )));
        }
        let unique: BTreeSet<u16> = class_ids.iter().copied().collect();
        if unique.len() != class_ids.len() {
            return Err(Error::invalid("label space class ids are not unique"));
        }
        if let Some(ig) = ignore_id {
            if unique.contains(&ig) {
                return Err(Error::invalid(format!(
                    "ignore id {ig} collides with a class id"
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            class_ids,
            class_names,
            ignore_id,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn class_ids(&self) -> &[u16] {
        &self.class_ids
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn ignore_id(&self) -> Option<u16> {
        self.ignore_id
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn contains(&self, id: u16) -> bool {
        self.class_ids.contains(&id)
    }

    pub fn id_of(&self, name: &str) -> Option<u16> {
        self.class_names
            .iter()
            .position(|n| n == name)
            .map(|i| self.class_ids[i])
    }

    pub fn name_of(&self, id: u16) -> Option<&str> {
        self.class_ids
            .iter()
            .position(|&i| i == id)
            .map(|i| self.class_names[i].as_str())
    }

    /// Largest id that can appear in a raster over this space (classes and
    /// the no-data id together).
    pub fn max_id(&self) -> u16 {
        self.class_ids
            .iter()
            .copied()
            .chain(self.ignore_id)
            .max()
            .unwrap_or(0)
    }

    /// Dense channel index of a class id: its position in `class_ids`.
    /// Prediction tensors order their class axis this way. The ignore id
    /// has no channel.
    pub fn channel_of(&self, id: u16) -> Option<usize> {
        self.class_ids.iter().position(|&i| i == id)
    }

    pub fn id_of_channel(&self, channel: usize) -> Option<u16> {
        self.class_ids.get(channel).copied()
    }
}

/// Many-to-one mapping from a source label space onto a target label space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnificationTable {
    source: LabelSpace,
    target: LabelSpace,
    mapping: BTreeMap<u16, u16>,
}

impl UnificationTable {
    /// Builds a table from explicit id pairs. Entries must reference ids that
    /// exist in their respective spaces; totality and surjectivity are *not*
    /// enforced here so that [`UnificationTable::validate`] has something to
    /// report on malformed tables.
    pub fn new(
        source: LabelSpace,
        target: LabelSpace,
        mapping: BTreeMap<u16, u16>,
    ) -> Result<Self> {
        for (&src, &dst) in &mapping {
            if !source.contains(src) {
                return Err(Error::invalid(format!(
                    "mapping key {src} is not a class of source space '{}'",
                    source.name()
                )));
            }
            if !target.contains(dst) {
                return Err(Error::invalid(format!(
                    "mapping value {dst} is not a class of target space '{}'",
                    target.name()
                )));
            }
        }
        Ok(Self {
            source,
            target,
            mapping,
        })
    }

    pub fn source(&self) -> &LabelSpace {
        &self.source
    }

    pub fn target(&self) -> &LabelSpace {
        &self.target
    }

    pub fn map_id(&self, source_id: u16) -> Option<u16> {
        self.mapping.get(&source_id).copied()
    }

    /// Name-level lookup, e.g. `map_name("Open water") == Some("Water")`.
    pub fn map_name(&self, source_name: &str) -> Option<&str> {
        let sid = self.source.id_of(source_name)?;
        let tid = self.map_id(sid)?;
        self.target.name_of(tid)
    }

    /// Source class ids that map onto `target_id`, in ascending id order.
    pub fn preimage(&self, target_id: u16) -> Vec<u16> {
        self.mapping
            .iter()
            .filter(|(_, &dst)| dst == target_id)
            .map(|(&src, _)| src)
            .collect()
    }

    /// Checks totality (every source class mapped) and surjectivity (every
    /// target class reached). Violations are returned as data.
    pub fn validate(&self) -> (bool, Vec<String>) {
        let mut violations = Vec::new();
        for (i, &sid) in self.source.class_ids().iter().enumerate() {
            if !self.mapping.contains_key(&sid) {
                violations.push(format!("unmapped: {}", self.source.class_names()[i]));
            }
        }
        let reached: BTreeSet<u16> = self.mapping.values().copied().collect();
        for (i, &tid) in self.target.class_ids().iter().enumerate() {
            if !reached.contains(&tid) {
                violations.push(format!("unreached: {}", self.target.class_names()[i]));
            }
        }
        (violations.is_empty(), violations)
    }

    /// Element-wise relabeling of a source-space raster into the target
    /// space. No-data passes through to the target no-data id; any other
    /// value outside the source space is rejected with its pixel location.
    pub fn unify(&self, labels: &Raster<u16>) -> Result<Raster<u16>> {
        let src_ignore = self.source.ignore_id();
        let dst_ignore = self.target.ignore_id().unwrap_or(0);
        let mut out = labels.data().clone();
        for ((row, col), v) in labels.data().indexed_iter() {
            let mapped = if Some(*v) == src_ignore {
                dst_ignore
            } else {
                match self.map_id(*v) {
                    Some(t) => t,
                    None => {
                        return Err(Error::LabelOutOfSpace {
                            value: *v,
                            row,
                            col,
                            space: self.source.name().to_string(),
                        })
                    }
                }
            };
            out[[row, col]] = mapped;
        }
        Ok(Raster::new(out, labels.meters_per_pixel))
    }

    /// Serializes the named classes as `source_name<TAB>target_name` lines,
    /// in source listing order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, &sid) in self.source.class_ids().iter().enumerate() {
            let src_name = &self.source.class_names()[i];
            let dst_name = self
                .map_id(sid)
                .and_then(|tid| self.target.name_of(tid))
                .unwrap_or("");
            out.push_str(src_name);
            out.push('\t');
            out.push_str(dst_name);
            out.push('\n');
        }
        out
    }

    /// Parses the flat `source_name<TAB>target_name` format. Source ids are
    /// assigned by line order starting at 1; target ids by first appearance,
    /// also starting at 1. Id 0 is reserved for no-data in both spaces.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut src_names = Vec::new();
        let mut dst_names: Vec<String> = Vec::new();
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let (src, dst) = line.split_once('\t').ok_or_else(|| {
                Error::invalid(format!(
                    "unification table line {} has no tab separator: {line:?}",
                    lineno + 1
                ))
            })?;
            let (src, dst) = (src.trim(), dst.trim());
            if src.is_empty() || dst.is_empty() {
                return Err(Error::invalid(format!(
                    "unification table line {} has an empty class name",
                    lineno + 1
                )));
            }
            if src_names.iter().any(|n| n == src) {
                return Err(Error::invalid(format!(
                    "duplicate source class name {src:?}"
                )));
            }
            src_names.push(src.to_string());
            if !dst_names.iter().any(|n| n == dst) {
                dst_names.push(dst.to_string());
            }
            pairs.push((src.to_string(), dst.to_string()));
        }
        if pairs.is_empty() {
            return Err(Error::invalid("unification table has no entries"));
        }
        let source = LabelSpace::new(
            "custom-source",
            (1..=src_names.len() as u16).collect(),
            src_names,
            Some(0),
        )?;
        let target = LabelSpace::new(
            "custom-target",
            (1..=dst_names.len() as u16).collect(),
            dst_names,
            Some(0),
        )?;
        let mut mapping = BTreeMap::new();
        for (src, dst) in &pairs {
            let sid = source.id_of(src).expect("source name just inserted");
            let tid = target.id_of(dst).expect("target name just inserted");
            mapping.insert(sid, tid);
        }
        UnificationTable::new(source, target, mapping)
    }
}

const SOURCE_CLASSES: [(&str, &str); 15] = [
    ("Developed open space", "Built-up"),
    ("Developed low", "Built-up"),
    ("Developed medium", "Built-up"),
    ("Developed high", "Built-up"),
    ("Deciduous forest", "Tree canopy"),
    ("Evergreen forest", "Tree canopy"),
    ("Mixed forest", "Tree canopy"),
    ("Woody wetland", "Tree canopy"),
    ("Barren land", "Tree canopy"),
    ("Shrub/Scrub", "Low vegetation"),
    ("Grassland", "Low vegetation"),
    ("Pasture/Har", "Low vegetation"),
    ("Cultivated crops", "Low vegetation"),
    ("Herbaceous wetlands", "Water"),
    ("Open water", "Water"),
];

const TARGET_CLASSES: [&str; 4] = ["Built-up", "Tree canopy", "Low vegetation", "Water"];

/// The source space of the built-in table: 15 named classes with ids 1..=15
/// plus the reserved no-data id 0.
pub fn source_space() -> LabelSpace {
    LabelSpace::new(
        "lcp-source",
        (1..=15).collect(),
        SOURCE_CLASSES.iter().map(|(s, _)| s.to_string()).collect(),
        Some(0),
    )
    .expect("built-in source space is valid")
}

/// The four-class target space with ids 1..=4 plus the reserved no-data id 0.
pub fn target_space() -> LabelSpace {
    LabelSpace::new(
        "four-class-target",
        (1..=4).collect(),
        TARGET_CLASSES.iter().map(|s| s.to_string()).collect(),
        Some(0),
    )
    .expect("built-in target space is valid")
}

/// The built-in unification table.
pub fn default_table() -> UnificationTable {
    let source = source_space();
    let target = target_space();
    let mut mapping = BTreeMap::new();
    for (src_name, dst_name) in SOURCE_CLASSES {
        let sid = source.id_of(src_name).expect("listed source class");
        let tid = target.id_of(dst_name).expect("listed target class");
        mapping.insert(sid, tid);
    }
    UnificationTable::new(source, target, mapping).expect("built-in table is valid")
}
