//! Shared domain types: class tables, panoptic label maps, samples,
//! datasets, and instance predictions.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

/// Sentinel semantic id for unlabeled ("void") pixels. Excluded from all
/// losses and metrics.
pub const VOID_CLASS: u8 = 255;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassKind {
    Stuff,
    Thing,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: u8,
    pub name: String,
    pub kind: ClassKind,
    pub color: [u8; 3],
}

/// Ordered class table. Ids are contiguous from 0 and contain at least one
/// stuff and one thing class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTable {
    entries: Vec<ClassEntry>,
}

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error("invalid class table: {0}")]
    InvalidClassTable(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid panoptic label: {0:?}")]
    InvalidLabel(Vec<String>),
    #[error("unlabeled sample: {0}")]
    Unlabeled(String),
}

impl ClassTable {
    pub fn new(entries: Vec<ClassEntry>) -> Result<Self, CoreError> {
        if entries.is_empty() {
            return Err(CoreError::InvalidClassTable("empty".into()));
        }
        for (i, e) in entries.iter().enumerate() {
            if e.id as usize != i {
                return Err(CoreError::InvalidClassTable(format!(
                    "ids must be contiguous from 0, got {} at position {}",
                    e.id, i
                )));
            }
        }
        let names: BTreeSet<_> = entries.iter().map(|e| e.name.as_str()).collect();
        if names.len() != entries.len() {
            return Err(CoreError::InvalidClassTable("duplicate names".into()));
        }
        if !entries.iter().any(|e| e.kind == ClassKind::Thing)
            || !entries.iter().any(|e| e.kind == ClassKind::Stuff)
        {
            return Err(CoreError::InvalidClassTable(
                "need at least one stuff and one thing class".into(),
            ));
        }
        Ok(ClassTable { entries })
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: u8) -> bool {
        (id as usize) < self.entries.len()
    }

    pub fn is_thing(&self, id: u8) -> bool {
        self.contains(id) && self.entries[id as usize].kind == ClassKind::Thing
    }

    pub fn is_stuff(&self, id: u8) -> bool {
        self.contains(id) && self.entries[id as usize].kind == ClassKind::Stuff
    }

    pub fn thing_ids(&self) -> Vec<u8> {
        self.entries
            .iter()
            .filter(|e| e.kind == ClassKind::Thing)
            .map(|e| e.id)
            .collect()
    }

    pub fn stuff_ids(&self) -> Vec<u8> {
        self.entries
            .iter()
            .filter(|e| e.kind == ClassKind::Stuff)
            .map(|e| e.id)
            .collect()
    }

    pub fn color(&self, id: u8) -> [u8; 3] {
        if self.contains(id) {
            self.entries[id as usize].color
        } else {
            [0, 0, 0]
        }
    }
}

/// Paired per-pixel semantic-class map and instance-id map. Instance id 0
/// means "no instance"; stuff segments are identified by `(class_id, 0)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanopticLabel {
    pub semantic: Array2<u8>,
    pub instance: Array2<u16>,
}

impl PanopticLabel {
    pub fn new(semantic: Array2<u8>, instance: Array2<u16>) -> Result<Self, CoreError> {
        if semantic.dim() != instance.dim() {
            return Err(CoreError::ShapeMismatch(format!(
                "semantic {:?} vs instance {:?}",
                semantic.dim(),
                instance.dim()
            )));
        }
        Ok(PanopticLabel { semantic, instance })
    }

    pub fn height(&self) -> usize {
        self.semantic.nrows()
    }

    pub fn width(&self) -> usize {
        self.semantic.ncols()
    }

    /// Semantic classes present (excluding void).
    pub fn present_classes(&self) -> Vec<u8> {
        let mut set = BTreeSet::new();
        for &c in self.semantic.iter() {
            if c != VOID_CLASS {
                set.insert(c);
            }
        }
        set.into_iter().collect()
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// One image with optional panoptic ground truth and a domain tag. Images
/// are `H×W×3` values in `[0,1]`.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: Array3<f32>,
    pub label: Option<PanopticLabel>,
    pub domain: Domain,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.dim().0
    }

    pub fn width(&self) -> usize {
        self.image.dim().1
    }
}

/// Indexed collection of samples sharing one class table.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_table: ClassTable,
    /// for each class id, the sample indices whose label contains >= 1 pixel
    /// of that class
    pub per_class_index: BTreeMap<u8, Vec<usize>>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, class_table: ClassTable) -> Self {
        let mut per_class_index: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
        for e in class_table.entries() {
            per_class_index.insert(e.id, Vec::new());
        }
        for (i, s) in samples.iter().enumerate() {
            if let Some(label) = &s.label {
                for c in label.present_classes() {
                    per_class_index.entry(c).or_default().push(i);
                }
            }
        }
        Dataset {
            samples,
            class_table,
            per_class_index,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// A binary mask with a thing class and a detection score; the interchange
/// type between instance decoders, fusion, and mAP.
#[derive(Clone, Debug)]
pub struct InstancePrediction {
    pub mask: Array2<bool>,
    pub class_id: u8,
    pub score: f64,
}

/// One segment of a panoptic label: a stuff region (`instance_id == 0`) or a
/// single instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub class_id: u8,
    pub instance_id: u16,
    pub pixels: Vec<(usize, usize)>,
}

/// Check every [`PanopticLabel`] invariant against a class table. Violations
/// are returned as descriptions; an empty list means the label is valid.
pub fn validate_panoptic(label: &PanopticLabel, table: &ClassTable) -> Vec<String> {
    let mut violations = Vec::new();
    if label.semantic.dim() != label.instance.dim() {
        violations.push(format!(
            "semantic shape {:?} != instance shape {:?}",
            label.semantic.dim(),
            label.instance.dim()
        ));
        return violations;
    }
    let mut instance_classes: BTreeMap<u16, BTreeSet<u8>> = BTreeMap::new();
    for ((y, x), &c) in label.semantic.indexed_iter() {
        let inst = label.instance[[y, x]];
        if c != VOID_CLASS && !table.contains(c) {
            violations.push(format!("pixel ({y},{x}): unknown class id {c}"));
            continue;
        }
        if inst > 0 {
            if c == VOID_CLASS || !table.is_thing(c) {
                violations.push(format!(
                    "pixel ({y},{x}): instance id {inst} on non-thing class {c}"
                ));
            }
            instance_classes.entry(inst).or_default().insert(c);
        }
    }
    for (inst, classes) in &instance_classes {
        if classes.len() > 1 {
            violations.push(format!(
                "instance id {inst} spans {} semantic classes: {:?}",
                classes.len(),
                classes
            ));
        }
    }
    violations
}

/// Decompose a valid label into segments: one segment per stuff class
/// present (the union of its pixels) and one per instance id.
pub fn extract_segments(label: &PanopticLabel) -> Vec<Segment> {
    let mut stuff: BTreeMap<u8, Vec<(usize, usize)>> = BTreeMap::new();
    let mut things: BTreeMap<(u8, u16), Vec<(usize, usize)>> = BTreeMap::new();
    for ((y, x), &c) in label.semantic.indexed_iter() {
        if c == VOID_CLASS {
            continue;
        }
        let inst = label.instance[[y, x]];
        if inst == 0 {
            stuff.entry(c).or_default().push((y, x));
        } else {
            things.entry((c, inst)).or_default().push((y, x));
        }
    }
    let mut segments = Vec::with_capacity(stuff.len() + things.len());
    for (class_id, pixels) in stuff {
        segments.push(Segment {
            class_id,
            instance_id: 0,
            pixels,
        });
    }
    for ((class_id, instance_id), pixels) in things {
        segments.push(Segment {
            class_id,
            instance_id,
            pixels,
        });
    }
    segments
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    pub fn toy_table() -> ClassTable {
        ClassTable::new(vec![
            ClassEntry {
                id: 0,
                name: "sky".into(),
                kind: ClassKind::Stuff,
                color: [70, 130, 180],
            },
            ClassEntry {
                id: 1,
                name: "ground".into(),
                kind: ClassKind::Stuff,
                color: [120, 90, 60],
            },
            ClassEntry {
                id: 2,
                name: "disk".into(),
                kind: ClassKind::Thing,
                color: [220, 20, 60],
            },
        ])
        .unwrap()
    }

    #[test]
    fn all_stuff_label_is_valid() {
        let table = toy_table();
        let label = PanopticLabel::new(
            arr2(&[[0u8, 0], [1, 1]]),
            arr2(&[[0u16, 0], [0, 0]]),
        )
        .unwrap();
        assert!(validate_panoptic(&label, &table).is_empty());
    }

    #[test]
    fn instance_on_stuff_pixel_is_one_violation() {
        let table = toy_table();
        let label = PanopticLabel::new(
            arr2(&[[0u8, 0], [1, 1]]),
            arr2(&[[1u16, 0], [0, 0]]),
        )
        .unwrap();
        let v = validate_panoptic(&label, &table);
        assert_eq!(v.len(), 1, "{v:?}");
    }

    #[test]
    fn instance_spanning_two_classes_is_violation() {
        // 2x2 map: instance 1 sits on class 2 (thing) at (0,0) and on a
        // hypothetical second thing class at (0,1)
        let table = ClassTable::new(vec![
            ClassEntry {
                id: 0,
                name: "sky".into(),
                kind: ClassKind::Stuff,
                color: [0, 0, 0],
            },
            ClassEntry {
                id: 1,
                name: "disk".into(),
                kind: ClassKind::Thing,
                color: [0, 0, 0],
            },
            ClassEntry {
                id: 2,
                name: "box".into(),
                kind: ClassKind::Thing,
                color: [0, 0, 0],
            },
        ])
        .unwrap();
        let label = PanopticLabel::new(
            arr2(&[[1u8, 2], [0, 0]]),
            arr2(&[[1u16, 1], [0, 0]]),
        )
        .unwrap();
        let v = validate_panoptic(&label, &table);
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(v[0].contains("spans"));
    }

    #[test]
    fn uniform_stuff_yields_single_full_segment() {
        let label = PanopticLabel::new(
            Array2::from_elem((4, 4), 1u8),
            Array2::zeros((4, 4)),
        )
        .unwrap();
        let segs = extract_segments(&label);
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].pixels.len(), 16);
    }

    #[test]
    fn two_instances_are_disjoint_segments() {
        let mut sem = Array2::from_elem((4, 4), 0u8);
        let mut inst = Array2::zeros((4, 4));
        sem[[0, 0]] = 2;
        inst[[0, 0]] = 1;
        sem[[3, 3]] = 2;
        inst[[3, 3]] = 2;
        let label = PanopticLabel::new(sem, inst).unwrap();
        let segs = extract_segments(&label);
        assert_eq!(segs.len(), 3); // stuff 0 + two instances
        let sizes: usize = segs.iter().map(|s| s.pixels.len()).sum();
        assert_eq!(sizes, 16);
    }

    #[test]
    fn mixed_4x4_three_segments_sum_to_16() {
        // 1 stuff region + 2 instances, enumerated by hand
        let sem = arr2(&[
            [0u8, 0, 0, 0],
            [0, 2, 2, 0],
            [0, 2, 2, 0],
            [0, 0, 2, 2],
        ]);
        let inst = arr2(&[
            [0u16, 0, 0, 0],
            [0, 1, 1, 0],
            [0, 1, 1, 0],
            [0, 0, 2, 2],
        ]);
        let label = PanopticLabel::new(sem, inst).unwrap();
        let segs = extract_segments(&label);
        assert_eq!(segs.len(), 3);
        let total: usize = segs.iter().map(|s| s.pixels.len()).sum();
        assert_eq!(total, 16);
        let inst1 = segs.iter().find(|s| s.instance_id == 1).unwrap();
        assert_eq!(inst1.pixels.len(), 4);
    }

    #[test]
    fn class_table_rejects_bad_tables() {
        assert!(ClassTable::new(vec![]).is_err());
        // all stuff
        assert!(ClassTable::new(vec![ClassEntry {
            id: 0,
            name: "sky".into(),
            kind: ClassKind::Stuff,
            color: [0, 0, 0],
        }])
        .is_err());
    }
}
