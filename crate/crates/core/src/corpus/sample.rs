use std::collections::BTreeMap;

use rand::seq::index;

use super::{CorpusError, DatasetSplit, ProductRecord};
use crate::util::substream_rng;

/// Per-class sample sizes for a stratified draw of `target` items.
///
/// Quotas are proportional; every class gets at least one slot. Remaining
/// slots go to the largest fractional remainders, and any excess created by
/// the one-per-class floor is taken back from the most over-allocated
/// classes. Ties break on class name.
pub fn allocate(counts: &BTreeMap<String, usize>, target: usize) -> Vec<(String, usize)> {
    let total: usize = counts.values().sum();
    if target >= total {
        return counts.iter().map(|(k, &v)| (k.clone(), v)).collect();
    }
    let quota = |n: usize| n as f64 * target as f64 / total as f64;
    let mut alloc: Vec<(String, usize, f64)> = counts
        .iter()
        .map(|(k, &n)| {
            let q = quota(n);
            (k.clone(), (q.floor() as usize).max(1).min(n), q)
        })
        .collect();
    let mut sum: usize = alloc.iter().map(|a| a.1).sum();

    while sum < target {
        // Largest remaining shortfall first.
        let best = alloc
            .iter_mut()
            .filter(|a| a.1 < counts[&a.0])
            .max_by(|a, b| {
                (a.2 - a.1 as f64)
                    .total_cmp(&(b.2 - b.1 as f64))
                    .then_with(|| b.0.cmp(&a.0))
            })
            .expect("target < total leaves room");
        best.1 += 1;
        sum += 1;
    }
    while sum > target {
        let worst = alloc
            .iter_mut()
            .filter(|a| a.1 > 1)
            .max_by(|a, b| {
                (a.1 as f64 - a.2)
                    .total_cmp(&(b.1 as f64 - b.2))
                    .then_with(|| b.0.cmp(&a.0))
            })
            .expect("target >= class count leaves a reducible class");
        worst.1 -= 1;
        sum -= 1;
    }
    alloc.into_iter().map(|(k, n, _)| (k, n)).collect()
}

/// Stratified random sample of `target_size` records with at least one
/// record per class present in `split`.
///
/// Within a class, records are drawn uniformly from the class's members
/// sorted by id, using a stream seeded by `(seed, class name)`. The result
/// is ordered by `(leaf_label, id)`.
pub fn stratified_sample(
    split: &DatasetSplit,
    target_size: usize,
    seed: u64,
) -> Result<DatasetSplit, CorpusError> {
    let mut by_class: BTreeMap<String, Vec<&ProductRecord>> = BTreeMap::new();
    for r in &split.records {
        by_class.entry(r.leaf_label.clone()).or_default().push(r);
    }
    if target_size == 0 || target_size < by_class.len() {
        return Err(CorpusError::SampleTooSmall {
            target: target_size,
            classes: by_class.len(),
        });
    }
    let counts: BTreeMap<String, usize> =
        by_class.iter().map(|(k, v)| (k.clone(), v.len())).collect();

    let mut records = Vec::with_capacity(target_size.min(split.len()));
    for (class, take) in allocate(&counts, target_size) {
        let members = by_class.get_mut(&class).expect("allocated class exists");
        members.sort_by(|a, b| a.id.cmp(&b.id));
        let mut rng = substream_rng(seed, "sampling", &class);
        let mut picked: Vec<&ProductRecord> = index::sample(&mut rng, members.len(), take)
            .into_iter()
            .map(|i| members[i])
            .collect();
        picked.sort_by(|a, b| a.id.cmp(&b.id));
        records.extend(picked.into_iter().cloned());
    }
    Ok(DatasetSplit {
        records,
        role: split.role,
        source_name: format!("{}#sample({target_size},{seed})", split.source_name),
    })
}
