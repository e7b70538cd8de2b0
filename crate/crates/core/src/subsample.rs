//! Class-incremental dataset subsampling.
//!
//! Categories are visited from the scarcest to the most abundant. A category
//! with at most `threshold` images keeps all of them. A larger category is
//! topped up to `threshold` images, counting the ones earlier categories
//! already selected, with the extra images drawn uniformly from those not yet
//! selected.
//!
//! Draws are reproducible across implementations: a single [`SplitMix64`]
//! seeded with the user seed, and each top-up shuffles the ascending candidate
//! list with Fisher-Yates (last slot first) and keeps a prefix.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryIndex {
    categories: BTreeMap<u64, Vec<u64>>,
    threshold: usize,
}

impl CategoryIndex {
    pub fn new(categories: BTreeMap<u64, Vec<u64>>, threshold: usize) -> Result<Self> {
        if threshold == 0 {
            return Err(Error::Validation("per-category threshold must be positive".into()));
        }
        for (cat, images) in &categories {
            let mut seen = HashSet::with_capacity(images.len());
            if let Some(dup) = images.iter().find(|i| !seen.insert(**i)) {
                return Err(Error::Validation(format!("image {dup} listed twice in category {cat}")));
            }
        }
        Ok(Self { categories, threshold })
    }

    /// Parses `{"<category id>": [image ids...], ...}`.
    pub fn from_json(text: &str, threshold: usize) -> Result<Self> {
        let raw: BTreeMap<String, Vec<u64>> = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        let mut categories = BTreeMap::new();
        for (key, images) in raw {
            let id: u64 = key
                .trim()
                .parse()
                .map_err(|_| Error::Validation(format!("category id {key:?} is not a non-negative integer")))?;
            if categories.insert(id, images).is_some() {
                return Err(Error::Validation(format!("category {id} appears twice")));
            }
        }
        Self::new(categories, threshold)
    }

    pub fn categories(&self) -> &BTreeMap<u64, Vec<u64>> {
        &self.categories
    }

    pub fn threshold(&self) -> usize {
        self.threshold
    }

    /// Category ids ordered by ascending image count, ties by ascending id.
    pub fn visit_order(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.categories.keys().copied().collect();
        ids.sort_by_key(|id| (self.categories[id].len(), *id));
        ids
    }
}

pub fn load_index(path: &Path, threshold: usize) -> Result<CategoryIndex> {
    let text = std::fs::read_to_string(path)?;
    CategoryIndex::from_json(&text, threshold)
}

/// Runs the class-incremental selection and returns the selected image ids, ascending.
pub fn class_incremental_sample(index: &CategoryIndex, seed: u64) -> Vec<u64> {
    let mut rng = SplitMix64::new(seed);
    let mut selected: BTreeSet<u64> = BTreeSet::new();
    let threshold = index.threshold;
    for id in index.visit_order() {
        let images = &index.categories[&id];
        if images.len() <= threshold {
            selected.extend(images.iter().copied());
            continue;
        }
        let already = images.iter().filter(|i| selected.contains(i)).count();
        if already >= threshold {
            continue;
        }
        let mut candidates: Vec<u64> = images.iter().copied().filter(|i| !selected.contains(i)).collect();
        candidates.sort_unstable();
        rng.shuffle(&mut candidates);
        selected.extend(candidates.into_iter().take(threshold - already));
    }
    selected.into_iter().collect()
}

pub fn write_selection<W: Write>(selection: &[u64], mut out: W) -> Result<()> {
    let mut sorted = selection.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let text = serde_json::to_string(&sorted).expect("integer arrays always serialise");
    writeln!(out, "{text}")?;
    Ok(())
}

pub fn save_selection(path: &Path, selection: &[u64]) -> Result<()> {
    let mut buf = Vec::new();
    write_selection(selection, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index(entries: &[(u64, &[u64])], thr: usize) -> CategoryIndex {
        CategoryIndex::new(entries.iter().map(|(k, v)| (*k, v.to_vec())).collect(), thr).unwrap()
    }

    #[test]
    fn threshold_never_binding_keeps_everything() {
        let idx = index(&[(1, &[1, 2]), (2, &[2, 3, 4])], 5);
        assert_eq!(class_incremental_sample(&idx, 11), vec![1, 2, 3, 4]);
    }

    #[test]
    fn single_binding_category() {
        let images: Vec<u64> = (100..110).collect();
        let idx = index(&[(7, &images)], 3);
        for seed in 0..20 {
            let out = class_incremental_sample(&idx, seed);
            assert_eq!(out.len(), 3);
            assert!(out.iter().all(|i| images.contains(i)));
        }
    }

    #[test]
    fn shared_images_count_toward_threshold() {
        let idx = index(&[(1, &[1, 2]), (2, &[1, 2, 3, 4, 5, 6])], 3);
        for seed in 0..20 {
            let out = class_incremental_sample(&idx, seed);
            assert_eq!(out.len(), 3);
            assert!(out.contains(&1) && out.contains(&2));
        }
    }

    #[test]
    fn visit_order_breaks_ties_by_id() {
        let idx = index(&[(9, &[1, 2]), (3, &[5, 6]), (4, &[7])], 1);
        assert_eq!(idx.visit_order(), vec![4, 3, 9]);
    }

    #[test]
    fn parse_errors_carry_position() {
        let err = CategoryIndex::from_json("{\"1\": [10,\n 11", 3).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicates_rejected() {
        let err = CategoryIndex::from_json(r#"{"1":[10,10]}"#, 3).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        let err = CategoryIndex::from_json(r#"{"x":[10]}"#, 3).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn minimal_document_round_trips() {
        let idx = CategoryIndex::from_json(r#"{"1":[10,11]}"#, 5).unwrap();
        let mut buf = Vec::new();
        write_selection(&class_incremental_sample(&idx, 0), &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "[10,11]\n");
        let empty = CategoryIndex::from_json("{}", 5).unwrap();
        assert!(class_incremental_sample(&empty, 0).is_empty());
    }
}
