//! Ranking and threshold metrics, plus per-generator / per-family reporting.
//!
//! Fake is the positive class throughout. All values are fractions in
//! `[0, 1]`; percentages only appear when rendering tables.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{ImageRecord, Label};
use crate::num::Scalar;

/// One scored sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored<T> {
    pub score: T,
    pub label: Label,
}

impl<T> Scored<T> {
    pub fn new(score: T, label: Label) -> Self {
        Scored { score, label }
    }
}

fn counts<T>(samples: &[Scored<T>]) -> (usize, usize) {
    let pos = samples.iter().filter(|s| s.label == Label::Fake).count();
    (pos, samples.len() - pos)
}

fn check_finite<T: Scalar>(samples: &[Scored<T>]) -> Result<()> {
    if samples.iter().any(|s| !s.score.is_finite()) {
        return Err(Error::NonFinite("scores".into()));
    }
    Ok(())
}

/// Area under the ROC curve as the Mann-Whitney statistic; ties count one half.
///
/// Computed from mid-ranks after a single sort.
pub fn auc<T: Scalar>(samples: &[Scored<T>]) -> Result<T> {
    check_finite(samples)?;
    let (n_pos, n_neg) = counts(samples);
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass("auc needs both real and fake samples"));
    }
    let mut order: Vec<&Scored<T>> = samples.iter().collect();
    order.sort_by(|a, b| a.score.partial_cmp(&b.score).expect("finite"));

    // sum of (1-based) mid-ranks of positives, doubled to stay integral
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && order[j + 1].score == order[i].score {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u128;
        let pos_in_group = order[i..=j].iter().filter(|s| s.label == Label::Fake).count() as u128;
        rank_sum2 += mid2 * pos_in_group;
        i = j + 1;
    }
    let n_pos_u = n_pos as u128;
    let u2 = rank_sum2 - n_pos_u * (n_pos_u + 1);
    let value = u2 as f64 / (2.0 * n_pos as f64 * n_neg as f64);
    Ok(T::of(value))
}

/// Step-wise average precision: `sum_n (R_n - R_{n-1}) P_n` over descending
/// score thresholds, with tied scores forming a single threshold.
pub fn average_precision<T: Scalar>(samples: &[Scored<T>]) -> Result<T> {
    check_finite(samples)?;
    let (n_pos, _) = counts(samples);
    if n_pos == 0 {
        return Err(Error::SingleClass("average precision needs at least one fake sample"));
    }
    let mut order: Vec<&Scored<T>> = samples.iter().collect();
    order.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("finite"));

    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0f64;
    let mut ap = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && order[j].score == order[i].score {
            match order[j].label {
                Label::Fake => tp += 1,
                Label::Real => fp += 1,
            }
            j += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(T::of(ap))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdStats<T> {
    pub accuracy: T,
    /// Fraction of fakes flagged; `None` without fakes.
    pub tpr: Option<T>,
    /// Fraction of reals passed; `None` without reals.
    pub tnr: Option<T>,
}

/// Accuracy at a fixed threshold. A sample is called fake iff `score > threshold`,
/// so a score exactly at the threshold is called real.
pub fn accuracy_at<T: Scalar>(samples: &[Scored<T>], threshold: T) -> Result<ThresholdStats<T>> {
    if samples.is_empty() {
        return Err(Error::Empty("accuracy needs at least one sample"));
    }
    let (mut tp, mut tn) = (0usize, 0usize);
    for s in samples {
        let predicted_fake = s.score > threshold;
        match (s.label, predicted_fake) {
            (Label::Fake, true) => tp += 1,
            (Label::Real, false) => tn += 1,
            _ => {}
        }
    }
    let (n_pos, n_neg) = counts(samples);
    let rate = |hits: usize, n: usize| (n > 0).then(|| T::of(hits as f64 / n as f64));
    Ok(ThresholdStats {
        accuracy: T::of((tp + tn) as f64 / samples.len() as f64),
        tpr: rate(tp, n_pos),
        tnr: rate(tn, n_neg),
    })
}

/// Decision threshold on calibrated scores.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Generator families used for grouped averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gan,
    Diffusion,
    Commercial,
    Other,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Gan => "GAN",
            Family::Diffusion => "Diffusion",
            Family::Commercial => "Commercial",
            Family::Other => "Other",
        })
    }
}

fn normalize_name(name: &str) -> String {
    name.chars().filter(|c| c.is_ascii_alphanumeric()).flat_map(|c| c.to_lowercase()).collect()
}

/// Maps generator names to families. Lookups ignore case and punctuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyMap {
    /// Generators in display order.
    entries: Vec<(String, Family)>,
}

impl FamilyMap {
    pub fn new(entries: Vec<(String, Family)>) -> Self {
        FamilyMap { entries }
    }

    pub fn family(&self, generator: &str) -> Family {
        let key = normalize_name(generator);
        self.entries.iter().find(|(g, _)| normalize_name(g) == key).map(|&(_, f)| f).unwrap_or(Family::Other)
    }

    /// Position of a generator in display order; unknown generators sort last.
    pub fn rank(&self, generator: &str) -> usize {
        let key = normalize_name(generator);
        self.entries.iter().position(|(g, _)| normalize_name(g) == key).unwrap_or(usize::MAX)
    }

    /// Orders generators family-first, then by table order, then by name.
    pub fn sort_generators<'a>(&self, generators: impl IntoIterator<Item = &'a str>) -> Vec<&'a str> {
        let mut v: Vec<&str> = generators.into_iter().collect();
        v.sort_by_key(|g| (self.family(g), self.rank(g), g.to_string()));
        v
    }
}

impl Default for FamilyMap {
    fn default() -> Self {
        use Family::*;
        let table: &[(&str, Family)] = &[
            ("progan", Gan),
            ("stylegan2", Gan),
            ("stylegan3", Gan),
            ("stylegan-t", Gan),
            ("gigagan", Gan),
            ("score-sde", Diffusion),
            ("adm", Diffusion),
            ("glide", Diffusion),
            ("ediff-i", Diffusion),
            ("latent-diffusion", Diffusion),
            ("stable-diffusion", Diffusion),
            ("dit", Diffusion),
            ("deepfloyd-if", Diffusion),
            ("stable-diffusion-xl", Diffusion),
            ("dalle2", Commercial),
            ("dalle3", Commercial),
            ("midjourney-v5", Commercial),
            ("firefly", Commercial),
        ];
        FamilyMap::new(table.iter().map(|&(g, f)| (g.to_string(), f)).collect())
    }
}

/// Metrics of a single run for one generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorMetrics {
    pub auc: f64,
    pub ap: f64,
    pub accuracy: f64,
    pub tpr: Option<f64>,
    pub tnr: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl GeneratorMetrics {
    pub fn compute<T: Scalar>(samples: &[Scored<T>], threshold: T) -> Result<Self> {
        let (n_pos, n_neg) = counts(samples);
        let acc = accuracy_at(samples, threshold)?;
        Ok(GeneratorMetrics {
            auc: auc(samples)?.as_f64(),
            ap: average_precision(samples)?.as_f64(),
            accuracy: acc.accuracy.as_f64(),
            tpr: acc.tpr.map(Scalar::as_f64),
            tnr: acc.tnr.map(Scalar::as_f64),
            n_pos,
            n_neg,
        })
    }
}

/// One evaluation pass: metrics keyed by generator.
pub type RunReport = BTreeMap<String, GeneratorMetrics>;

/// Scores every fake generator against the real images that share its source sets
/// (all reals when none do).
pub fn evaluate_by_generator<T: Scalar>(scored: &[(T, &ImageRecord)], threshold: T) -> Result<RunReport> {
    let reals: Vec<&(T, &ImageRecord)> = scored.iter().filter(|(_, r)| r.label == Label::Real).collect();
    if reals.is_empty() {
        return Err(Error::SingleClass("evaluation set has no real images"));
    }
    let generators: BTreeSet<&str> =
        scored.iter().filter(|(_, r)| r.label == Label::Fake).map(|(_, r)| r.generator.as_str()).collect();
    if generators.is_empty() {
        return Err(Error::SingleClass("evaluation set has no fake images"));
    }
    let mut report = RunReport::new();
    for g in generators {
        let fakes: Vec<&(T, &ImageRecord)> =
            scored.iter().filter(|(_, r)| r.label == Label::Fake && r.generator == g).collect();
        let sources: HashSet<&str> = fakes.iter().map(|(_, r)| r.source_set.as_str()).collect();
        let mut negatives: Vec<&(T, &ImageRecord)> =
            reals.iter().copied().filter(|(_, r)| sources.contains(r.source_set.as_str())).collect();
        if negatives.is_empty() {
            negatives = reals.clone();
        }
        let samples: Vec<Scored<T>> =
            fakes.iter().chain(negatives.iter()).map(|(s, r)| Scored::new(*s, r.label)).collect();
        report.insert(g.to_string(), GeneratorMetrics::compute(&samples, threshold)?);
    }
    Ok(report)
}

/// Mean and sample standard deviation over runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Stat { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSummary {
    pub family: Family,
    pub auc: Stat,
    pub ap: Stat,
    pub accuracy: Stat,
    pub tpr: Option<Stat>,
    pub tnr: Option<Stat>,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Unweighted means of per-generator mean metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub auc: f64,
    pub ap: f64,
    pub accuracy: f64,
}

impl MeanMetrics {
    fn over<'a>(items: impl Iterator<Item = &'a GeneratorSummary>) -> Option<MeanMetrics> {
        let items: Vec<_> = items.collect();
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        Some(MeanMetrics {
            auc: items.iter().map(|g| g.auc.mean).sum::<f64>() / n,
            ap: items.iter().map(|g| g.ap.mean).sum::<f64>() / n,
            accuracy: items.iter().map(|g| g.accuracy.mean).sum::<f64>() / n,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub runs: usize,
    pub per_generator: BTreeMap<String, GeneratorSummary>,
    pub per_family: BTreeMap<Family, MeanMetrics>,
    pub grand_mean: MeanMetrics,
}

/// Combines per-run reports into means and standard deviations; family and
/// grand means weight every generator equally.
pub fn aggregate(runs: &[RunReport], families: &FamilyMap) -> Result<EvalReport> {
    let first = runs.first().ok_or(Error::Empty("aggregate needs at least one run"))?;
    let keys: Vec<&String> = first.keys().collect();
    if keys.is_empty() {
        return Err(Error::Empty("run report has no generators"));
    }
    for (i, r) in runs.iter().enumerate() {
        if r.keys().collect::<Vec<_>>() != keys {
            return Err(Error::Config(format!("run {i} reports a different generator set than run 0")));
        }
    }
    let mut per_generator = BTreeMap::new();
    for g in keys {
        let col = |f: fn(&GeneratorMetrics) -> f64| Stat::of(&runs.iter().map(|r| f(&r[g])).collect::<Vec<_>>());
        let opt_col = |f: fn(&GeneratorMetrics) -> Option<f64>| {
            runs.iter().map(|r| f(&r[g])).collect::<Option<Vec<f64>>>().map(|v| Stat::of(&v))
        };
        per_generator.insert(
            g.clone(),
            GeneratorSummary {
                family: families.family(g),
                auc: col(|m| m.auc),
                ap: col(|m| m.ap),
                accuracy: col(|m| m.accuracy),
                tpr: opt_col(|m| m.tpr),
                tnr: opt_col(|m| m.tnr),
                n_pos: first[g].n_pos,
                n_neg: first[g].n_neg,
            },
        );
    }
    let mut per_family = BTreeMap::new();
    let present: BTreeSet<Family> = per_generator.values().map(|g| g.family).collect();
    for fam in present {
        if let Some(m) = MeanMetrics::over(per_generator.values().filter(|g| g.family == fam)) {
            per_family.insert(fam, m);
        }
    }
    let grand_mean = MeanMetrics::over(per_generator.values()).expect("non-empty");
    Ok(EvalReport { runs: runs.len(), per_generator, per_family, grand_mean })
}

/// Renders a fraction as a percentage with one decimal, e.g. `0.8963 -> "89.6"`.
pub fn percent(value: f64) -> String {
    format!("{:.1}", value * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{Fake, Real};

    fn s(v: &[(f64, Label)]) -> Vec<Scored<f64>> {
        v.iter().map(|&(x, l)| Scored::new(x, l)).collect()
    }

    #[test]
    fn perfect_separation() {
        let v = s(&[(0.9, Fake), (0.9, Fake), (0.1, Real), (0.1, Real)]);
        assert_eq!(auc(&v).unwrap(), 1.0);
        assert_eq!(average_precision(&v).unwrap(), 1.0);
    }

    #[test]
    fn all_tied_gives_half() {
        let v = s(&[(0.3, Fake), (0.3, Real), (0.3, Real), (0.3, Fake), (0.3, Fake)]);
        assert_eq!(auc(&v).unwrap(), 0.5);
    }

    #[test]
    fn single_positive_ranked_last() {
        let v = s(&[(0.9, Real), (0.8, Real), (0.7, Real), (0.1, Fake)]);
        assert_eq!(average_precision(&v).unwrap(), 0.25);
        assert_eq!(auc(&v).unwrap(), 0.0);
    }

    #[test]
    fn single_class_errors() {
        assert!(auc(&s(&[(0.1, Real)])).is_err());
        assert!(average_precision(&s(&[(0.1, Real)])).is_err());
        assert!(average_precision(&s(&[(0.1, Fake)])).is_ok());
        assert!(auc(&s(&[(f64::NAN, Fake), (0.2, Real)])).is_err());
    }

    #[test]
    fn threshold_is_strict() {
        let r = accuracy_at(&s(&[(0.6, Fake), (0.4, Real)]), 0.5).unwrap();
        assert_eq!((r.accuracy, r.tpr, r.tnr), (1.0, Some(1.0), Some(1.0)));
        let r = accuracy_at(&s(&[(0.5, Fake)]), 0.5).unwrap();
        assert_eq!(r.accuracy, 0.0);
        assert_eq!(r.tnr, None);
        assert!(accuracy_at::<f64>(&[], 0.5).is_err());
    }

    #[test]
    fn f32_scores_supported() {
        let v: Vec<Scored<f32>> = vec![Scored::new(0.2, Real), Scored::new(0.7, Fake), Scored::new(0.5, Real)];
        assert_eq!(auc(&v).unwrap(), 1.0f32);
    }

    fn one(auc: f64) -> GeneratorMetrics {
        GeneratorMetrics { auc, ap: auc, accuracy: auc, tpr: None, tnr: Some(1.0), n_pos: 1, n_neg: 1 }
    }

    #[test]
    fn single_run_aggregate_has_zero_std() {
        let run: RunReport = [("progan".to_string(), one(0.8))].into();
        let rep = aggregate(&[run], &FamilyMap::default()).unwrap();
        let g = &rep.per_generator["progan"];
        assert_eq!(g.auc, Stat { mean: 0.8, std: 0.0 });
        assert_eq!(g.family, Family::Gan);
        assert_eq!(g.tpr, None);
    }

    #[test]
    fn two_run_std() {
        let a: RunReport = [("dit".to_string(), one(0.8))].into();
        let b: RunReport = [("dit".to_string(), one(0.9))].into();
        let rep = aggregate(&[a, b], &FamilyMap::default()).unwrap();
        let st = rep.per_generator["dit"].auc;
        assert!((st.mean - 0.85).abs() < 1e-12);
        assert!((st.std - 0.0707).abs() < 1e-4);
    }

    #[test]
    fn inconsistent_keys_error() {
        let a: RunReport = [("dit".to_string(), one(0.8))].into();
        let b: RunReport = [("adm".to_string(), one(0.9))].into();
        assert!(aggregate(&[a, b], &FamilyMap::default()).is_err());
    }

    #[test]
    fn family_average_matches_table_convention() {
        let run: RunReport = [("progan", 0.939), ("dit", 0.933), ("dalle3", 0.817)]
            .iter()
            .map(|&(g, v)| (g.to_string(), one(v)))
            .collect();
        let rep = aggregate(&[run], &FamilyMap::default()).unwrap();
        assert_eq!(percent(rep.grand_mean.auc), "89.6");
        assert_eq!(rep.per_family.len(), 3);
    }

    #[test]
    fn family_lookup_ignores_punctuation() {
        let fm = FamilyMap::default();
        assert_eq!(fm.family("StyleGAN-T"), Family::Gan);
        assert_eq!(fm.family("Stable_Diffusion_XL"), Family::Diffusion);
        assert_eq!(fm.family("DALL-E 3"), Family::Commercial);
        assert_eq!(fm.family("mystery"), Family::Other);
        assert_eq!(fm.sort_generators(["dalle3", "mystery", "adm", "progan"]), ["progan", "adm", "dalle3", "mystery"]);
    }

    #[test]
    fn per_generator_uses_matching_source_sets() {
        let r = |id: &str, l: Label, g: &str, src: &str| ImageRecord::new(id, id, l, g, src);
        let recs = [
            r("r1", Real, "real", "lsun"),
            r("r2", Real, "real", "coco"),
            r("f1", Fake, "progan", "lsun"),
            r("f2", Fake, "glide", "coco"),
        ];
        // r1 is scored high: it is only a negative for progan
        let scores = [0.95, 0.1, 0.9, 0.8];
        let scored: Vec<(f64, &ImageRecord)> = scores.iter().copied().zip(recs.iter()).collect();
        let rep = evaluate_by_generator(&scored, 0.5).unwrap();
        assert_eq!(rep["progan"].auc, 0.0);
        assert_eq!(rep["glide"].auc, 1.0);
        assert_eq!(rep["glide"].n_neg, 1);
    }
}
