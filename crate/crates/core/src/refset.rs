//! Reference-set construction: seeded selection of N real and N fake
//! records, with optional laundered ("+") variants.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embed::{EmbeddingSource, EmbeddingVector};
use crate::error::{Error, Result};
use crate::launder::{social_pipeline, LaunderRecipe};
use crate::manifest::{DatasetManifest, ImageRecord, Label};

/// Cap on runs per N under [`default_runs`].
pub const MAX_RUNS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingPlan {
    pub n_per_class: usize,
    pub seed: u64,
    pub runs: usize,
    pub require_pairing: bool,
    /// Fraction of entries per class replaced by laundered versions.
    pub augmented_fraction: f64,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        SamplingPlan::new(10, 0)
    }
}

impl SamplingPlan {
    pub fn new(n_per_class: usize, seed: u64) -> Self {
        SamplingPlan { n_per_class, seed, runs: 1, require_pairing: true, augmented_fraction: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_per_class == 0 {
            return Err(Error::Config("n_per_class must be at least 1".into()));
        }
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.augmented_fraction) {
            return Err(Error::Config(format!(
                "augmented_fraction must lie in [0, 1], got {}",
                self.augmented_fraction
            )));
        }
        Ok(())
    }

    /// Entries per class that are laundered.
    pub fn augmented_count(&self) -> usize {
        (self.augmented_fraction * self.n_per_class as f64).round() as usize
    }
}

/// Runs per N: `ceil(10000 / N)` capped at [`MAX_RUNS`], and one run from 10k up.
pub fn default_runs(n: usize) -> usize {
    if n >= 10_000 {
        1
    } else {
        10_000usize.div_ceil(n.max(1)).min(MAX_RUNS)
    }
}

/// One plan per N, sharing the template's seed, pairing and augmentation.
pub fn size_sweep_plan(
    n_values: &[usize],
    runs_rule: impl Fn(usize) -> usize,
    template: &SamplingPlan,
) -> Result<Vec<SamplingPlan>> {
    if n_values.is_empty() {
        return Err(Error::Config("size sweep needs at least one N".into()));
    }
    if n_values.contains(&0) {
        return Err(Error::Config("size sweep values must be positive".into()));
    }
    if n_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("size sweep values must be strictly ascending".into()));
    }
    n_values
        .iter()
        .map(|&n| {
            let plan = SamplingPlan { n_per_class: n, runs: runs_rule(n), ..template.clone() };
            plan.validate()?;
            Ok(plan)
        })
        .collect()
}

/// Ranking key for `id` under `(seed, run)`; independent of manifest order.
fn rank_key(tag: &[u8], seed: u64, run: usize, id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(tag);
    h.update(seed.to_le_bytes());
    h.update((run as u64).to_le_bytes());
    h.update(id.as_bytes());
    h.finalize().into()
}

fn ranked<'a>(items: Vec<(&'a str, &'a ImageRecord)>, seed: u64, run: usize) -> Vec<&'a ImageRecord> {
    let mut keyed: Vec<_> = items.into_iter().map(|(k, r)| (rank_key(b"select", seed, run, k), k, r)).collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    keyed.into_iter().map(|(_, _, r)| r).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationEntry {
    pub id: String,
    pub recipe: LaunderRecipe,
}

/// Records chosen for one run, before embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection<'a> {
    pub real: Vec<&'a ImageRecord>,
    pub fake: Vec<&'a ImageRecord>,
    pub augmentation: Vec<AugmentationEntry>,
}

/// Deterministic selection for `(plan.seed, run)`; never returns an id in `exclude`.
pub fn select<'a>(
    manifest: &'a DatasetManifest,
    plan: &SamplingPlan,
    run: usize,
    exclude: &HashSet<String>,
) -> Result<Selection<'a>> {
    plan.validate()?;
    let n = plan.n_per_class;
    let kept = |r: &ImageRecord| !exclude.contains(&r.id);
    let (real, fake) = if plan.require_pairing {
        let pairs: Vec<_> = manifest.pairs().into_iter().filter(|(_, r, f)| kept(r) && kept(f)).collect();
        if pairs.len() < n {
            return Err(Error::InsufficientData(format!("{} pairs available, {n} requested", pairs.len())));
        }
        let reals = pairs.iter().map(|(p, r, _)| (*p, *r)).collect();
        let real = ranked(reals, plan.seed, run);
        let by_pair: std::collections::HashMap<&str, &ImageRecord> = pairs.iter().map(|(p, _, f)| (*p, *f)).collect();
        let real: Vec<_> = real.into_iter().take(n).collect();
        let fake = real.iter().map(|r| by_pair[r.pair_id.as_deref().expect("paired record has pair_id")]).collect();
        (real, fake)
    } else {
        let pick = |label: Label| -> Result<Vec<&'a ImageRecord>> {
            let pool: Vec<_> =
                manifest.records().iter().filter(|r| r.label == label && kept(r)).map(|r| (r.id.as_str(), r)).collect();
            if pool.len() < n {
                return Err(Error::InsufficientData(format!(
                    "{} {label} records available, {n} requested",
                    pool.len()
                )));
            }
            Ok(ranked(pool, plan.seed, run).into_iter().take(n).collect())
        };
        (pick(Label::Real)?, pick(Label::Fake)?)
    };

    let m = plan.augmented_count();
    let mut augmentation = Vec::with_capacity(2 * m);
    if m > 0 {
        for class in [&real, &fake] {
            let mut order: Vec<_> = class.iter().map(|r| (rank_key(b"augment", plan.seed, run, &r.id), r)).collect();
            order.sort_by(|a, b| a.0.cmp(&b.0));
            let mut chosen: Vec<_> = order.into_iter().take(m).collect();
            chosen.sort_by(|a, b| a.1.id.cmp(&b.1.id));
            for (key, r) in chosen {
                let recipe_seed = u64::from_le_bytes(key[..8].try_into().expect("8 bytes"));
                augmentation.push(AugmentationEntry { id: r.id.clone(), recipe: social_pipeline(recipe_seed) });
            }
        }
    }
    Ok(Selection { real, fake, augmentation })
}

/// Serializable description of a reference set; vectors live in the cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefsetProvenance {
    pub manifest: String,
    pub plan: SamplingPlan,
    pub run: usize,
    pub real_ids: Vec<String>,
    pub fake_ids: Vec<String>,
    pub real_keys: Vec<String>,
    pub fake_keys: Vec<String>,
    pub augmentation_log: Vec<AugmentationEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    pub manifest: String,
    pub plan: SamplingPlan,
    pub run: usize,
    pub real_ids: Vec<String>,
    pub fake_ids: Vec<String>,
    pub real_vectors: Vec<EmbeddingVector>,
    pub fake_vectors: Vec<EmbeddingVector>,
    pub augmentation_log: Vec<AugmentationEntry>,
}

impl ReferenceSet {
    pub fn n(&self) -> usize {
        self.real_vectors.len()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.real_ids.iter().chain(&self.fake_ids).map(String::as_str)
    }

    pub fn provenance(&self) -> RefsetProvenance {
        RefsetProvenance {
            manifest: self.manifest.clone(),
            plan: self.plan.clone(),
            run: self.run,
            real_ids: self.real_ids.clone(),
            fake_ids: self.fake_ids.clone(),
            real_keys: self.real_vectors.iter().map(|v| v.key.hex()).collect(),
            fake_keys: self.fake_vectors.iter().map(|v| v.key.hex()).collect(),
            augmentation_log: self.augmentation_log.clone(),
        }
    }

    pub fn save_provenance(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.provenance())?)?;
        Ok(())
    }
}

/// Selects and embeds a reference set. Laundered entries are embedded from
/// freshly laundered pixels.
pub fn build<S: EmbeddingSource + ?Sized>(
    manifest: &DatasetManifest,
    plan: &SamplingPlan,
    run: usize,
    source: &mut S,
    exclude: &HashSet<String>,
) -> Result<ReferenceSet> {
    let sel = select(manifest, plan, run, exclude)?;
    let mut embed_all = |records: &[&ImageRecord]| -> Result<Vec<EmbeddingVector>> {
        records
            .iter()
            .map(|r| match sel.augmentation.iter().find(|a| a.id == r.id) {
                Some(a) => source.embed_laundered(r, &a.recipe),
                None => source.embed(r),
            })
            .collect()
    };
    let real_vectors = embed_all(&sel.real)?;
    let fake_vectors = embed_all(&sel.fake)?;
    Ok(ReferenceSet {
        manifest: manifest.name.clone(),
        plan: plan.clone(),
        run,
        real_ids: sel.real.iter().map(|r| r.id.clone()).collect(),
        fake_ids: sel.fake.iter().map(|r| r.id.clone()).collect(),
        real_vectors,
        fake_vectors,
        augmentation_log: sel.augmentation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(pairs: usize) -> DatasetManifest {
        let mut recs = Vec::new();
        for i in 0..pairs {
            recs.push(
                ImageRecord::new(format!("r{i}"), format!("r{i}.png"), Label::Real, "real", "coco")
                    .with_pair(format!("p{i}")),
            );
            recs.push(
                ImageRecord::new(format!("f{i}"), format!("f{i}.png"), Label::Fake, "sd", "coco")
                    .with_pair(format!("p{i}")),
            );
        }
        DatasetManifest::new("toy", recs).unwrap()
    }

    #[test]
    fn paired_selection_aligns() {
        let m = manifest(12);
        let sel = select(&m, &SamplingPlan::new(10, 1), 0, &HashSet::new()).unwrap();
        assert_eq!(sel.real.len(), 10);
        for (r, f) in sel.real.iter().zip(&sel.fake) {
            assert_eq!(r.pair_id, f.pair_id);
        }
        assert_eq!(sel, select(&m, &SamplingPlan::new(10, 1), 0, &HashSet::new()).unwrap());
        assert_ne!(sel.real, select(&m, &SamplingPlan::new(10, 1), 1, &HashSet::new()).unwrap().real);
    }

    #[test]
    fn insufficient_pairs() {
        let err = select(&manifest(3), &SamplingPlan::new(4, 0), 0, &HashSet::new()).unwrap_err();
        assert!(matches!(err, Error::InsufficientData(_)));
    }

    #[test]
    fn exclusion_is_respected() {
        let m = manifest(12);
        let exclude: HashSet<String> = ["r0", "f1", "r2"].iter().map(|s| s.to_string()).collect();
        let plan = SamplingPlan::new(9, 5);
        let sel = select(&m, &plan, 0, &exclude).unwrap();
        assert!(sel.real.iter().chain(&sel.fake).all(|r| !exclude.contains(&r.id)));
        assert!(select(&m, &SamplingPlan::new(10, 5), 0, &exclude).is_err());
    }

    #[test]
    fn augmentation_counts() {
        let m = manifest(12);
        let plan = SamplingPlan { augmented_fraction: 0.5, ..SamplingPlan::new(10, 2) };
        let sel = select(&m, &plan, 0, &HashSet::new()).unwrap();
        let ids: HashSet<&str> = sel.augmentation.iter().map(|a| a.id.as_str()).collect();
        assert_eq!(sel.real.iter().filter(|r| ids.contains(r.id.as_str())).count(), 5);
        assert_eq!(sel.fake.iter().filter(|r| ids.contains(r.id.as_str())).count(), 5);
    }

    #[test]
    fn runs_rule() {
        let plans = size_sweep_plan(&[10, 100, 1000, 10000], default_runs, &SamplingPlan::new(1, 0)).unwrap();
        assert_eq!(plans.iter().map(|p| p.runs).collect::<Vec<_>>(), vec![50, 50, 10, 1]);
        assert!(size_sweep_plan(&[], default_runs, &SamplingPlan::new(1, 0)).is_err());
        assert!(size_sweep_plan(&[0, 10], default_runs, &SamplingPlan::new(1, 0)).is_err());
        assert!(size_sweep_plan(&[100, 10], default_runs, &SamplingPlan::new(1, 0)).is_err());
    }
}
