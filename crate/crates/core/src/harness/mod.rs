//! Experiment protocols: size sweeps, robustness sweeps, few-shot
//! adaptation, and report emission.

mod report;

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use report::{build_table, emit_report, method_from_scores, MethodReport, ReportLayout, Table, TableMetric};

use crate::classify::{fit, ClassifierSpec, Detector, TrainingSet};
use crate::embed::{EmbeddingSource, Tap};
use crate::error::{Error, Result};
use crate::launder::SweepGrid;
use crate::manifest::{DatasetManifest, ImageRecord, Label};
use crate::metrics::{aggregate, evaluate_by_generator, EvalReport, Family, FamilyMap, RunReport, Stat};
use crate::refset::{self, default_runs, size_sweep_plan, SamplingPlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FewShotProtocol {
    pub n_examples: usize,
    pub runs: usize,
    /// Manifest of the target pool.
    pub pool: Option<PathBuf>,
}

impl Default for FewShotProtocol {
    fn default() -> Self {
        FewShotProtocol { n_examples: 10, runs: 100, pool: None }
    }
}

/// Everything a run needs; loaded from JSON with paths relative to the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub refset_manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
    /// Export manifest describing the encoder graph.
    pub backend: Option<PathBuf>,
    pub tap: Tap,
    pub cache: Option<PathBuf>,
    pub classifier: ClassifierSpec,
    pub sampling: SamplingPlan,
    /// N values for `sweep-size`.
    pub size_sweep: Vec<usize>,
    /// Fixed run count per N; the default rule applies when absent.
    pub runs_per_n: Option<usize>,
    pub robustness: Option<SweepGrid>,
    pub fewshot: FewShotProtocol,
    pub threshold: f64,
    /// Generator display order and families; the built-in table when absent.
    pub families: Option<Vec<(String, Family)>>,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            refset_manifest: None,
            eval_manifest: None,
            backend: None,
            tap: Tap::Penultimate,
            cache: None,
            classifier: ClassifierSpec::default(),
            sampling: SamplingPlan::default(),
            size_sweep: vec![10, 100, 1000],
            runs_per_n: None,
            robustness: None,
            fewshot: FewShotProtocol::default(),
            threshold: 0.5,
            families: None,
            out_dir: PathBuf::from("runs"),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in
            [&mut cfg.refset_manifest, &mut cfg.eval_manifest, &mut cfg.backend, &mut cfg.cache, &mut cfg.fewshot.pool]
                .into_iter()
                .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold must lie in (0, 1), got {}", self.threshold)));
        }
        self.sampling.validate()?;
        if let Some(g) = &self.robustness {
            g.validate()?;
        }
        if self.runs_per_n == Some(0) || self.fewshot.runs == 0 || self.fewshot.n_examples == 0 {
            return Err(Error::Config("run counts and few-shot size must be positive".into()));
        }
        Ok(())
    }

    pub fn family_map(&self) -> FamilyMap {
        self.families.clone().map(FamilyMap::new).unwrap_or_default()
    }

    pub fn runs_for(&self, n: usize) -> usize {
        self.runs_per_n.unwrap_or_else(|| default_runs(n))
    }

    /// Short content hash naming this configuration's output directory.
    pub fn hash(&self) -> String {
        self.hash_with(&[])
    }

    /// Content hash over the configuration and extra command arguments.
    pub fn hash_with(&self, args: &[&str]) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("config serializes"));
        for a in args {
            h.update([0u8]);
            h.update(a.as_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }

    /// `out_dir/<command>-<hash>`, created if needed.
    pub fn run_dir(&self, command: &str) -> Result<PathBuf> {
        self.run_dir_for(command, &[])
    }

    /// Like [`run_dir`](Self::run_dir), keyed additionally by `args`.
    pub fn run_dir_for(&self, command: &str, args: &[&str]) -> Result<PathBuf> {
        let dir = self.out_dir.join(format!("{command}-{}", self.hash_with(args)));
        std::fs::create_dir_all(&dir)?;
        Ok(dir)
    }
}

/// Derives an independent 64-bit seed for one unit of work.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Fails with [`Error::Overlap`] when the two id sets intersect.
pub fn check_disjoint<'a>(
    train: impl IntoIterator<Item = &'a str>,
    test: impl IntoIterator<Item = &'a str>,
) -> Result<()> {
    let train: HashSet<&str> = train.into_iter().collect();
    let overlap = test.into_iter().filter(|id| train.contains(id)).count();
    if overlap > 0 {
        return Err(Error::Overlap(overlap));
    }
    Ok(())
}

/// Scores records in order.
pub fn score_records<S: EmbeddingSource + ?Sized>(
    detector: &Detector<f64>,
    records: &[&ImageRecord],
    source: &mut S,
) -> Result<Vec<f64>> {
    records.iter().map(|r| detector.score_embedding(&source.embed(r)?.values)).collect()
}

pub fn evaluate<S: EmbeddingSource + ?Sized>(
    detector: &Detector<f64>,
    records: &[&ImageRecord],
    source: &mut S,
    threshold: f64,
) -> Result<RunReport> {
    let scores = score_records(detector, records, source)?;
    let scored: Vec<(f64, &ImageRecord)> = scores.into_iter().zip(records.iter().copied()).collect();
    evaluate_by_generator(&scored, threshold)
}

/// Trains the configured classifier on embedded records.
pub fn train_on<S: EmbeddingSource + ?Sized>(
    real: &[&ImageRecord],
    fake: &[&ImageRecord],
    source: &mut S,
    spec: &ClassifierSpec,
) -> Result<Detector<f64>> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    for r in real.iter().chain(fake) {
        rows.push(source.embed(r)?.values.iter().map(|&v| v as f64).collect());
        labels.push(r.label);
        ids.push(r.id.clone());
    }
    fit(&TrainingSet::with_ids(rows, labels, ids)?, spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeSweepPoint {
    pub n_per_class: usize,
    pub runs: usize,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeSweepReport {
    pub config_hash: String,
    pub points: Vec<SizeSweepPoint>,
}

impl SizeSweepReport {
    /// Rows `n,metric,mean,std`, where the per-run value is the generator average.
    pub fn to_csv(&self, per_run: &[Vec<RunReport>]) -> String {
        let mut out = String::from("n,metric,mean,std\n");
        for (point, runs) in self.points.iter().zip(per_run) {
            for (name, f) in [
                ("auc", (|m: &crate::metrics::GeneratorMetrics| m.auc) as fn(&_) -> f64),
                ("ap", |m| m.ap),
                ("accuracy", |m| m.accuracy),
            ] {
                let values: Vec<f64> = runs.iter().map(|r| r.values().map(f).sum::<f64>() / r.len() as f64).collect();
                let s = Stat::of(&values);
                out.push_str(&format!("{},{name},{:.6},{:.6}\n", point.n_per_class, s.mean, s.std));
            }
        }
        out
    }
}

/// Inputs shared by the protocols, independent of where embeddings come from.
#[derive(Debug, Clone)]
pub struct Protocol<'a> {
    pub refset: &'a DatasetManifest,
    pub eval: &'a DatasetManifest,
    pub config: &'a ExperimentConfig,
}

impl Protocol<'_> {
    fn eval_ids(&self) -> HashSet<String> {
        self.eval.records().iter().map(|r| r.id.clone()).collect()
    }

    /// Fails when reference and evaluation manifests share ids.
    pub fn check(&self) -> Result<()> {
        check_disjoint(
            self.refset.records().iter().map(|r| r.id.as_str()),
            self.eval.records().iter().map(|r| r.id.as_str()),
        )
    }

    fn spec_for(&self, index: u64) -> ClassifierSpec {
        ClassifierSpec { seed: derive_seed(self.config.seed, "train", index), ..self.config.classifier.clone() }
    }

    /// Trains once on run 0 of the configured sampling plan.
    pub fn train<S: EmbeddingSource + ?Sized>(&self, source: &mut S) -> Result<(Detector<f64>, refset::ReferenceSet)> {
        self.check()?;
        let plan = SamplingPlan { seed: self.config.seed, ..self.config.sampling.clone() };
        let rs = refset::build(self.refset, &plan, 0, source, &self.eval_ids())?;
        let data = TrainingSet::from_refset(&rs)?;
        Ok((fit(&data, &self.spec_for(0))?, rs))
    }

    /// One fixed evaluation set across all N; every N is checked for
    /// feasibility before training starts.
    pub fn run_size_sweep<S: EmbeddingSource + ?Sized>(
        &self,
        n_values: &[usize],
        source: &mut S,
    ) -> Result<(SizeSweepReport, Vec<Vec<RunReport>>)> {
        self.check()?;
        let template = SamplingPlan { seed: self.config.seed, ..self.config.sampling.clone() };
        let plans = size_sweep_plan(n_values, |n| self.config.runs_for(n), &template)?;
        let exclude = self.eval_ids();
        for plan in &plans {
            refset::select(self.refset, plan, 0, &exclude)?;
        }
        let eval: Vec<&ImageRecord> = self.eval.records().iter().collect();
        let families = self.config.family_map();
        let mut points = Vec::new();
        let mut all_runs = Vec::new();
        for plan in &plans {
            let mut runs = Vec::with_capacity(plan.runs);
            for run in 0..plan.runs {
                let rs = refset::build(self.refset, plan, run, source, &exclude)?;
                check_disjoint(rs.ids(), eval.iter().map(|r| r.id.as_str()))?;
                let data = TrainingSet::from_refset(&rs)?;
                let det = fit(&data, &self.spec_for(((plan.n_per_class as u64) << 20) + run as u64))?;
                runs.push(evaluate(&det, &eval, source, self.config.threshold)?);
                log::info!("N={} run {}/{} done", plan.n_per_class, run + 1, plan.runs);
            }
            points.push(SizeSweepPoint {
                n_per_class: plan.n_per_class,
                runs: plan.runs,
                report: aggregate(&runs, &families)?,
            });
            all_runs.push(runs);
        }
        Ok((SizeSweepReport { config_hash: self.config.hash(), points }, all_runs))
    }

    /// Scores laundered copies of the evaluation set with one fixed model.
    pub fn run_robustness_sweep<S: EmbeddingSource + ?Sized>(
        &self,
        detector: &Detector<f64>,
        grid: &SweepGrid,
        source: &mut S,
    ) -> Result<Vec<RobustnessRow>> {
        self.check()?;
        grid.validate()?;
        let eval: Vec<&ImageRecord> = self.eval.records().iter().collect();
        let families = self.config.family_map();
        let mut rows = Vec::with_capacity(grid.values.len());
        for &value in &grid.values {
            let recipe = grid.recipe(value)?;
            let scores = eval
                .iter()
                .map(|r| detector.score_embedding(&source.embed_laundered(r, &recipe)?.values))
                .collect::<Result<Vec<f64>>>()?;
            let scored: Vec<(f64, &ImageRecord)> = scores.into_iter().zip(eval.iter().copied()).collect();
            let report = aggregate(&[evaluate_by_generator(&scored, self.config.threshold)?], &families)?;
            rows.push(RobustnessRow {
                axis: grid.axis.name().to_string(),
                value,
                auc: report.grand_mean.auc,
                acc: report.grand_mean.accuracy,
            });
        }
        Ok(rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub axis: String,
    pub value: f64,
    pub auc: f64,
    pub acc: f64,
}

pub fn robustness_csv(rows: &[RobustnessRow]) -> String {
    let mut out = String::from("axis,value,auc,acc\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.6},{:.6}\n", r.axis, r.value, r.auc, r.acc));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotRun {
    pub run: usize,
    pub real_ids: Vec<String>,
    pub fake_ids: Vec<String>,
    pub auc: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotResult {
    pub n_examples: usize,
    pub report: EvalReport,
    pub runs: Vec<FewShotRun>,
}

/// Samples `n + n` examples per run from the pool, trains, and evaluates on
/// the rest of the pool.
pub fn run_fewshot<S: EmbeddingSource + ?Sized>(
    protocol: &FewShotProtocol,
    pool: &DatasetManifest,
    source: &mut S,
    spec: &ClassifierSpec,
    seed: u64,
    threshold: f64,
    families: &FamilyMap,
) -> Result<FewShotResult> {
    let n = protocol.n_examples;
    if protocol.runs == 0 || n == 0 {
        return Err(Error::Config("few-shot runs and n_examples must be positive".into()));
    }
    for label in [Label::Real, Label::Fake] {
        let have = pool.records().iter().filter(|r| r.label == label).count();
        if have <= n {
            return Err(Error::InsufficientData(format!(
                "few-shot pool has {have} {label} records; need more than {n}"
            )));
        }
    }
    let mut reports = Vec::with_capacity(protocol.runs);
    let mut logs = Vec::with_capacity(protocol.runs);
    for run in 0..protocol.runs {
        let plan = SamplingPlan {
            n_per_class: n,
            seed: derive_seed(seed, "fewshot", run as u64),
            runs: 1,
            require_pairing: false,
            augmented_fraction: 0.0,
        };
        let sel = refset::select(pool, &plan, 0, &HashSet::new())?;
        let chosen: HashSet<&str> = sel.real.iter().chain(&sel.fake).map(|r| r.id.as_str()).collect();
        let rest: Vec<&ImageRecord> = pool.records().iter().filter(|r| !chosen.contains(r.id.as_str())).collect();
        check_disjoint(chosen.iter().copied(), rest.iter().map(|r| r.id.as_str()))?;
        let run_spec = ClassifierSpec { seed: derive_seed(seed, "fewshot-train", run as u64), ..spec.clone() };
        let det = train_on(&sel.real, &sel.fake, source, &run_spec)?;
        let report = evaluate(&det, &rest, source, threshold)?;
        let n_gen = report.len() as f64;
        logs.push(FewShotRun {
            run,
            real_ids: sel.real.iter().map(|r| r.id.clone()).collect(),
            fake_ids: sel.fake.iter().map(|r| r.id.clone()).collect(),
            auc: report.values().map(|m| m.auc).sum::<f64>() / n_gen,
            accuracy: report.values().map(|m| m.accuracy).sum::<f64>() / n_gen,
        });
        reports.push(report);
    }
    Ok(FewShotResult { n_examples: n, report: aggregate(&reports, families)?, runs: logs })
}
