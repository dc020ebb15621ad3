//! Deterministic test/fold planning with optional patient grouping and label
//! stratification, plus stratified training-pool subsampling.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, TaskKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub test_ids: Vec<String>,
    pub folds: Vec<Fold>,
    pub seed: u64,
    pub group_key: Option<String>,
    pub stratify_key: Option<String>,
    pub test_frac: f64,
    pub actual_test_frac: f64,
    /// Set when a group key was requested but no entry carries it.
    pub image_level_fallback: bool,
    #[serde(default)]
    pub warnings: Vec<String>,
    #[serde(default)]
    pub provenance: Vec<String>,
}

impl SplitPlan {
    /// Union of all fold validation sets (the train/val pool).
    pub fn pool_ids(&self) -> BTreeSet<String> {
        self.folds
            .iter()
            .flat_map(|f| f.val_ids.iter().cloned())
            .collect()
    }

    pub fn test_set(&self) -> BTreeSet<String> {
        self.test_ids.iter().cloned().collect()
    }

    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitParams {
    pub test_frac: f64,
    pub k: usize,
    pub seed: u64,
    pub stratify_key: Option<String>,
    pub group_key: Option<String>,
}

impl SplitParams {
    pub fn new(test_frac: f64, k: usize, seed: u64) -> Self {
        Self {
            test_frac,
            k,
            seed,
            stratify_key: None,
            group_key: None,
        }
    }

    pub fn stratify(mut self, task: impl Into<String>) -> Self {
        self.stratify_key = Some(task.into());
        self
    }

    pub fn group_by(mut self, field: impl Into<String>) -> Self {
        self.group_key = Some(field.into());
        self
    }
}

/// Stratum 0 holds entries without a usable label; class `c` maps to `c + 1`.
fn strata_for(
    manifest: &DatasetManifest,
    stratify_key: Option<&str>,
    provenance: &mut Vec<String>,
) -> Result<Vec<usize>> {
    let Some(key) = stratify_key else {
        return Ok(vec![0; manifest.entries.len()]);
    };
    let decl = manifest
        .task(key)
        .ok_or_else(|| Error::UnknownTask(key.to_string()))?;
    if decl.kind == TaskKind::Regression {
        provenance.push(format!("task {key} is regression; split unstratified"));
        return Ok(vec![0; manifest.entries.len()]);
    }
    Ok(manifest
        .entries
        .iter()
        .map(|e| {
            e.label(key)
                .and_then(|t| t.class_index())
                .map_or(0, |c| c + 1)
        })
        .collect())
}

struct Group {
    members: Vec<usize>,
    stratum: usize,
}

fn build_groups(
    manifest: &DatasetManifest,
    indices: &[usize],
    strata: &[usize],
    group_key: Option<&str>,
) -> Result<(Vec<Group>, bool)> {
    let keyed = match group_key {
        Some(key) => {
            let present = indices
                .iter()
                .filter(|&&i| manifest.entries[i].field(key).is_some())
                .count();
            if present == 0 {
                None
            } else if present < indices.len() {
                return Err(Error::Config(format!(
                    "group key \"{key}\" missing on {} of {} entries",
                    indices.len() - present,
                    indices.len()
                )));
            } else {
                Some(key)
            }
        }
        None => None,
    };
    let fallback = group_key.is_some() && keyed.is_none();
    let mut groups: Vec<Group> = Vec::new();
    match keyed {
        Some(key) => {
            let mut slot: BTreeMap<&str, usize> = BTreeMap::new();
            for &i in indices {
                let value = manifest.entries[i].field(key).expect("checked above");
                let g = *slot.entry(value).or_insert_with(|| {
                    groups.push(Group {
                        members: Vec::new(),
                        stratum: 0,
                    });
                    groups.len() - 1
                });
                groups[g].members.push(i);
            }
        }
        None => {
            groups = indices
                .iter()
                .map(|&i| Group {
                    members: vec![i],
                    stratum: 0,
                })
                .collect();
        }
    }
    for g in &mut groups {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &i in &g.members {
            *counts.entry(strata[i]).or_default() += 1;
        }
        // majority stratum, ties to the smallest stratum index
        g.stratum = counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(s, _)| *s)
            .unwrap_or(0);
    }
    Ok((groups, fallback))
}

/// Assigns groups to `k` folds, balancing each stratum first and total fold
/// size second. Returns one list of entry indices per fold.
fn assign_folds(groups: &[&Group], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut by_stratum: BTreeMap<usize, Vec<&Group>> = BTreeMap::new();
    for g in groups {
        by_stratum.entry(g.stratum).or_default().push(g);
    }
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut totals = vec![0usize; k];
    for (_, mut gs) in by_stratum {
        gs.shuffle(rng);
        gs.sort_by(|a, b| b.members.len().cmp(&a.members.len()));
        let mut in_stratum = vec![0usize; k];
        for g in gs {
            let f = (0..k)
                .min_by_key(|&f| (in_stratum[f], totals[f], f))
                .expect("k >= 1");
            in_stratum[f] += g.members.len();
            totals[f] += g.members.len();
            folds[f].extend_from_slice(&g.members);
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    folds
}

fn ids_of(manifest: &DatasetManifest, idx: &[usize]) -> Vec<String> {
    let mut idx = idx.to_vec();
    idx.sort_unstable();
    idx.iter().map(|&i| manifest.entries[i].id.clone()).collect()
}

fn folds_from(manifest: &DatasetManifest, pool: &[usize], parts: Vec<Vec<usize>>) -> Vec<Fold> {
    parts
        .iter()
        .map(|val| {
            let val_set: BTreeSet<usize> = val.iter().copied().collect();
            let train: Vec<usize> = pool
                .iter()
                .copied()
                .filter(|i| !val_set.contains(i))
                .collect();
            Fold {
                train_ids: ids_of(manifest, &train),
                val_ids: ids_of(manifest, val),
            }
        })
        .collect()
}

fn check_classes_survive(
    manifest: &DatasetManifest,
    strata: &[usize],
    test: &[usize],
    folds: &[Fold],
) -> Result<()> {
    let present: BTreeSet<usize> = strata.iter().copied().filter(|&s| s > 0).collect();
    if present.is_empty() {
        return Ok(());
    }
    let index = manifest
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| (e.id.as_str(), i))
        .collect::<BTreeMap<_, _>>();
    let classes_in = |ids: &mut dyn Iterator<Item = usize>| -> BTreeSet<usize> {
        ids.map(|i| strata[i]).filter(|&s| s > 0).collect()
    };
    let test_classes = classes_in(&mut test.iter().copied());
    if let Some(missing) = present.difference(&test_classes).next() {
        return Err(Error::EmptyClass(format!(
            "class {} absent from the test set",
            missing - 1
        )));
    }
    for (f, fold) in folds.iter().enumerate() {
        let got = classes_in(&mut fold.train_ids.iter().map(|id| index[id.as_str()]));
        if let Some(missing) = present.difference(&got).next() {
            return Err(Error::EmptyClass(format!(
                "class {} absent from fold {f} training set",
                missing - 1
            )));
        }
    }
    Ok(())
}

/// Builds a held-out test set plus `k` cross-validation folds over the rest.
///
/// Grouped splits never place one group on two sides of any boundary. When
/// the requested group key is absent from every entry the plan falls back to
/// image-level splitting and records that in `image_level_fallback`.
pub fn make_splits(manifest: &DatasetManifest, params: &SplitParams) -> Result<SplitPlan> {
    if !(params.test_frac > 0.0 && params.test_frac < 1.0) {
        return Err(Error::Config(format!(
            "test_frac must lie in (0, 1), got {}",
            params.test_frac
        )));
    }
    if params.k < 2 {
        return Err(Error::Config(format!("k must be >= 2, got {}", params.k)));
    }
    let n = manifest.entries.len();
    if n == 0 {
        return Err(Error::Insufficient("empty manifest".into()));
    }
    let mut provenance = Vec::new();
    let mut warnings = Vec::new();
    let strata = strata_for(manifest, params.stratify_key.as_deref(), &mut provenance)?;
    let all: Vec<usize> = (0..n).collect();
    let (groups, fallback) = build_groups(manifest, &all, &strata, params.group_key.as_deref())?;
    if fallback {
        provenance.push(format!(
            "group key \"{}\" absent; image-level splitting",
            params.group_key.as_deref().unwrap_or_default()
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut by_stratum: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (gi, g) in groups.iter().enumerate() {
        by_stratum.entry(g.stratum).or_default().push(gi);
    }
    let mut in_test = vec![false; groups.len()];
    for gis in by_stratum.values_mut() {
        gis.shuffle(&mut rng);
        let size: usize = gis.iter().map(|&g| groups[g].members.len()).sum();
        let target = params.test_frac * size as f64;
        let mut taken = 0usize;
        for &g in gis.iter() {
            let s = groups[g].members.len();
            if ((taken + s) as f64 - target).abs() < (taken as f64 - target).abs() {
                in_test[g] = true;
                taken += s;
            }
        }
    }
    if !in_test.iter().any(|&t| t) {
        let smallest = (0..groups.len())
            .min_by_key(|&g| (groups[g].members.len(), g))
            .expect("nonempty");
        in_test[smallest] = true;
    }

    let mut test_idx = Vec::new();
    let mut pool_groups = Vec::new();
    for (g, group) in groups.iter().enumerate() {
        if in_test[g] {
            test_idx.extend_from_slice(&group.members);
        } else {
            pool_groups.push(group);
        }
    }
    if pool_groups.len() < params.k {
        return Err(Error::Insufficient(format!(
            "{} groups left for {} folds",
            pool_groups.len(),
            params.k
        )));
    }
    let actual = test_idx.len() as f64 / n as f64;
    if actual > 2.0 * params.test_frac || actual < 0.5 * params.test_frac {
        let msg = format!(
            "test fraction {actual:.4} outside 2x tolerance of requested {}",
            params.test_frac
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }

    let mut pool: Vec<usize> = pool_groups
        .iter()
        .flat_map(|g| g.members.iter().copied())
        .collect();
    pool.sort_unstable();
    let parts = assign_folds(&pool_groups, params.k, &mut rng);
    let folds = folds_from(manifest, &pool, parts);
    check_classes_survive(manifest, &strata, &test_idx, &folds)?;

    Ok(SplitPlan {
        test_ids: ids_of(manifest, &test_idx),
        folds,
        seed: params.seed,
        group_key: params.group_key.clone(),
        stratify_key: params.stratify_key.clone(),
        test_frac: params.test_frac,
        actual_test_frac: actual,
        image_level_fallback: fallback,
        warnings,
        provenance,
    })
}

/// Number of training samples kept for a label fraction: `⌈fraction·n⌉`.
pub fn subsample_size(fraction: f64, n: usize) -> usize {
    let raw = fraction * n as f64;
    // absorb representation error such as 0.1 * 30 = 3.0000000000000004
    let rounded = raw.round();
    if (raw - rounded).abs() < 1e-9 {
        rounded as usize
    } else {
        raw.ceil() as usize
    }
}

/// Largest-remainder apportionment of `total` across strata sized `sizes`.
pub fn stratified_quotas(sizes: &[usize], total: usize) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    if n == 0 {
        return vec![0; sizes.len()];
    }
    let exact: Vec<f64> = sizes
        .iter()
        .map(|&s| s as f64 * total as f64 / n as f64)
        .collect();
    let mut quotas: Vec<usize> = exact.iter().map(|q| q.floor() as usize).collect();
    let mut rest = total - quotas.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(sizes[b].cmp(&sizes[a]))
            .then(a.cmp(&b))
    });
    for &s in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        if quotas[s] < sizes[s] {
            quotas[s] += 1;
            rest -= 1;
        }
    }
    quotas
}

/// Reduces the train/val pool to `⌈fraction·N⌉` stratified samples; the
/// unsampled remainder becomes the held-out test set for this sweep point.
/// Folds are rebuilt over the reduced pool with the original `k`.
pub fn subsample_training(
    manifest: &DatasetManifest,
    plan: &SplitPlan,
    fraction: f64,
    seed: u64,
) -> Result<SplitPlan> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let mut out = plan.clone();
    if fraction == 1.0 {
        out.provenance
            .push("subsample fraction=1: plan unchanged".to_string());
        return Ok(out);
    }
    let mut scratch = Vec::new();
    let strata = strata_for(manifest, plan.stratify_key.as_deref(), &mut scratch)?;
    let pool_ids = plan.pool_ids();
    let pool: Vec<usize> = manifest
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| pool_ids.contains(&e.id))
        .map(|(i, _)| i)
        .collect();
    let target = subsample_size(fraction, pool.len());

    let mut by_stratum: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in &pool {
        by_stratum.entry(strata[i]).or_default().push(i);
    }
    let keys: Vec<usize> = by_stratum.keys().copied().collect();
    let sizes: Vec<usize> = keys.iter().map(|k| by_stratum[k].len()).collect();
    let quotas = stratified_quotas(&sizes, target);
    for (k, q) in keys.iter().zip(&quotas) {
        if *k > 0 && *q == 0 {
            return Err(Error::EmptyClass(format!(
                "fraction {fraction} leaves class {} with zero training samples",
                k - 1
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sampled = Vec::with_capacity(target);
    for (k, q) in keys.iter().zip(&quotas) {
        let mut members = by_stratum[k].clone();
        members.shuffle(&mut rng);
        sampled.extend_from_slice(&members[..*q]);
    }
    sampled.sort_unstable();
    let sampled_set: BTreeSet<usize> = sampled.iter().copied().collect();
    let test: Vec<usize> = pool
        .iter()
        .copied()
        .filter(|i| !sampled_set.contains(i))
        .collect();

    let (groups, _) = build_groups(manifest, &sampled, &strata, plan.group_key.as_deref())?;
    let group_refs: Vec<&Group> = groups.iter().collect();
    let k = plan.k();
    if group_refs.len() < k {
        return Err(Error::Insufficient(format!(
            "{} sampled groups for {k} folds",
            group_refs.len()
        )));
    }
    let parts = assign_folds(&group_refs, k, &mut rng);
    out.folds = folds_from(manifest, &sampled, parts);
    out.test_ids = ids_of(manifest, &test);
    out.actual_test_frac = test.len() as f64 / manifest.entries.len() as f64;
    out.provenance.push(format!(
        "subsampled fraction={fraction} seed={seed}: {} of {} pool samples train, remainder is test",
        sampled.len(),
        pool.len()
    ));
    Ok(out)
}
