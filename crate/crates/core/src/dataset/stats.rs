use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{BenchmarkSplit, Granularity};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    /// References per part category (part-level samples only).
    pub expressions_per_category: BTreeMap<String, usize>,
    /// References per object category (object-level samples only).
    pub expressions_per_object_category: BTreeMap<String, usize>,
    /// Mean whitespace-separated word count of the raw expressions.
    pub avg_expression_length: f64,
    /// Distinct (image, mask) targets.
    pub num_masks: usize,
    pub num_references: usize,
    /// Distinct object categories over all samples.
    pub num_object_categories: usize,
    pub num_part_categories: usize,
}

pub fn compute_stats(split: &BenchmarkSplit) -> CorpusStats {
    let mut per_part = BTreeMap::new();
    let mut per_object = BTreeMap::new();
    let mut objects = HashSet::new();
    let mut masks = HashSet::new();
    let mut words = 0usize;
    for s in &split.samples {
        words += s.expression.split_whitespace().count();
        objects.insert(s.object_category.as_str());
        masks.insert((s.image_ref.as_str(), &s.mask));
        match (s.granularity, &s.part_category) {
            (Granularity::Part, Some(p)) => *per_part.entry(p.clone()).or_insert(0) += 1,
            _ => *per_object.entry(s.object_category.clone()).or_insert(0) += 1,
        }
    }
    let n = split.samples.len();
    CorpusStats {
        num_part_categories: per_part.len(),
        expressions_per_category: per_part,
        expressions_per_object_category: per_object,
        avg_expression_length: if n == 0 { 0.0 } else { words as f64 / n as f64 },
        num_masks: masks.len(),
        num_references: n,
        num_object_categories: objects.len(),
    }
}
