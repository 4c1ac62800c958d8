//! Command-line front end for reference-set detectors.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use clipforensics::classify::{ClassifierKind, Detector, ModelArtifact};
use clipforensics::embed::{
    cache_get_or_extract, load_image, BackendConfig, CachedEmbeddings, EmbeddingCache, Encoder, ExportManifest,
};
use clipforensics::harness::{
    emit_report, method_from_scores, robustness_csv, run_fewshot, score_records, ExperimentConfig, MethodReport,
    Protocol, ReportLayout, TableMetric,
};
use clipforensics::launder::SweepGrid;
use clipforensics::manifest::{import_scores, DatasetManifest, ImageRecord};
use clipforensics::metrics::aggregate;
use clipforensics::refset::{self, SamplingPlan};
use clipforensics::spectral::{decimate, detect_peaks, mean_power_spectrum, Plane};
use clipforensics::{Error, PlaneF64, SpectrumMapF64};
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "clipforensics", version, about = "Detect generated images from frozen encoder features")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Embedding cache file.
    #[arg(long, global = true)]
    cache: Option<PathBuf>,
    /// Encoder export manifest (`*.export.json`).
    #[arg(long, global = true)]
    backend: Option<PathBuf>,
    /// Output root; each run writes to a content-addressed subdirectory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Never run the encoder; cache misses are errors.
    #[arg(long, global = true)]
    cache_only: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Embed every record of the given manifests into the cache.
    Embed {
        /// Manifests to embed; defaults to the configured reference and evaluation manifests.
        #[arg(long = "manifest")]
        manifests: Vec<PathBuf>,
    },
    /// Sample a reference set and write its provenance.
    Refset {
        #[arg(long, default_value_t = 0)]
        run: usize,
    },
    /// Train a detector on run 0 of the sampling plan.
    Train,
    /// Score a manifest with a saved model; writes `scores.csv`.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Evaluate a saved model (or a freshly trained one) on the evaluation manifest.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Row name used in reports.
        #[arg(long)]
        name: Option<String>,
    },
    /// Accuracy and AUC as a function of the reference-set size.
    SweepSize,
    /// Evaluate one trained model under a laundering grid.
    SweepRobust,
    /// Few-shot adaptation on the configured pool.
    Fewshot,
    /// Mean noise-residual spectrum of a manifest's images, with peak detection.
    Spectrum {
        #[arg(long)]
        manifest: PathBuf,
        /// Restrict to one generator.
        #[arg(long)]
        generator: Option<String>,
        #[arg(long, default_value_t = 256)]
        side: usize,
        /// Peak threshold in robust standard deviations.
        #[arg(long, default_value_t = 6.0)]
        k: f64,
        /// Downscale by this integer factor before the analysis.
        #[arg(long)]
        decimate: Option<usize>,
    },
    /// Combine evaluation reports and imported score tables into one table.
    Report {
        /// `report.json` files written by `eval`.
        #[arg(long = "method")]
        methods: Vec<PathBuf>,
        /// External `id,score` CSV files; the file stem names the row.
        #[arg(long = "scores")]
        scores: Vec<PathBuf>,
        /// Manifest the score tables refer to; defaults to the evaluation manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "table_csv")]
        layout: String,
        #[arg(long, default_value = "auc")]
        metric: String,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.chain().find_map(|c| c.downcast_ref::<Error>()).map_or(4, Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

fn load_config(g: &Global) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(c) = &g.cache {
        cfg.cache = Some(c.clone());
    }
    if let Some(b) = &g.backend {
        cfg.backend = Some(b.clone());
    }
    if let Some(o) = &g.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a manifest with record paths resolved against its directory.
fn load_manifest(path: &Path) -> anyhow::Result<DatasetManifest> {
    let m = DatasetManifest::load(path).with_context(|| format!("loading {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let records = m.records().iter().map(|r| ImageRecord { path: base.join(&r.path), ..r.clone() }).collect();
    let mut resolved = DatasetManifest::new(m.name.clone(), records)?;
    resolved.notes = m.notes.clone();
    Ok(resolved)
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> anyhow::Result<&'a PathBuf> {
    p.as_ref().ok_or_else(|| config_error(format!("{what} is not set")))
}

struct Source {
    embeddings: CachedEmbeddings,
    cache_path: Option<PathBuf>,
}

impl Source {
    /// Opens the cache and, unless `cache_only`, the encoder. In cache-only
    /// mode the graph is never read: the feature width comes from the export manifest.
    fn open(cfg: &ExperimentConfig, cache_only: bool) -> anyhow::Result<Self> {
        let export = ExportManifest::load(required(&cfg.backend, "backend export manifest")?).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("backend export manifest: {io}")),
            e => e,
        })?;
        let (config, encoder) = if cache_only {
            let config = BackendConfig {
                graph_path: export.graph.clone(),
                tap: cfg.tap,
                feature_dim: export.dims.get(cfg.tap),
                pretrain_tag: export.pretrain_tag.clone(),
            };
            (config, None)
        } else {
            let enc = Encoder::from_export(&export, cfg.tap)?;
            (enc.config().clone(), Some(enc))
        };
        let cache = match &cfg.cache {
            Some(p) if cache_only => EmbeddingCache::open(p)?,
            Some(p) => EmbeddingCache::open_or_create(p, config.feature_dim)?,
            None if cache_only => return Err(config_error("--cache-only needs a cache file")),
            None => EmbeddingCache::new(config.feature_dim),
        };
        let embeddings = CachedEmbeddings::new(cache, config, export.preprocess.clone(), encoder)?;
        Ok(Source { embeddings, cache_path: cfg.cache.clone() })
    }

    /// Persists rows added during the run.
    fn finish(self) -> anyhow::Result<()> {
        if let Some(p) = &self.cache_path {
            self.embeddings.cache().save(p)?;
        }
        Ok(())
    }
}

fn manifests(cfg: &ExperimentConfig) -> anyhow::Result<(DatasetManifest, DatasetManifest)> {
    Ok((
        load_manifest(required(&cfg.refset_manifest, "refset_manifest")?)?,
        load_manifest(required(&cfg.eval_manifest, "eval_manifest")?)?,
    ))
}

/// `out_dir/<command>-<hash>`, where the hash also covers command arguments.
fn run_dir(cfg: &ExperimentConfig, command: &str, args: &[&str]) -> anyhow::Result<PathBuf> {
    Ok(cfg.run_dir_for(command, args)?)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn say(dir: &Path) {
    println!("{}", dir.display());
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    let cfg = load_config(g)?;
    match cli.command {
        Command::Embed { manifests: paths } => {
            let paths = if paths.is_empty() {
                [&cfg.refset_manifest, &cfg.eval_manifest, &cfg.fewshot.pool].into_iter().flatten().cloned().collect()
            } else {
                paths
            };
            if paths.is_empty() {
                return Err(config_error("no manifest given and none configured"));
            }
            let mut src = Source::open(&cfg, g.cache_only)?;
            let before = src.embeddings.cache().len();
            let mut total = 0;
            for p in &paths {
                let m = load_manifest(p)?;
                total += cache_get_or_extract(m.records(), &mut src.embeddings)?.len();
            }
            let after = src.embeddings.cache().len();
            println!("{}", json!({ "records": total, "new_rows": after - before, "cache_rows": after }));
            src.finish()
        }
        Command::Refset { run } => {
            let (refm, evalm) = manifests(&cfg)?;
            Protocol { refset: &refm, eval: &evalm, config: &cfg }.check()?;
            let plan = SamplingPlan { seed: cfg.seed, ..cfg.sampling.clone() };
            if run >= plan.runs {
                return Err(config_error(format!("run {run} out of range for {} run(s)", plan.runs)));
            }
            let mut src = Source::open(&cfg, g.cache_only)?;
            let exclude: HashSet<String> = evalm.records().iter().map(|r| r.id.clone()).collect();
            let rs = refset::build(&refm, &plan, run, &mut src.embeddings, &exclude)?;
            let dir = run_dir(&cfg, "refset", &[&run.to_string()])?;
            rs.save_provenance(dir.join("refset.json"))?;
            say(&dir);
            src.finish()
        }
        Command::Train => {
            let (refm, evalm) = manifests(&cfg)?;
            let mut src = Source::open(&cfg, g.cache_only)?;
            let (det, rs) = Protocol { refset: &refm, eval: &evalm, config: &cfg }.train(&mut src.embeddings)?;
            let dir = cfg.run_dir("train")?;
            ModelArtifact::from_detector(&det).save(dir.join("model.json"))?;
            rs.save_provenance(dir.join("refset.json"))?;
            say(&dir);
            src.finish()
        }
        Command::Score { model, manifest } => {
            let det: Detector<f64> = ModelArtifact::load(&model)?.to_detector()?;
            let m = load_manifest(&manifest)?;
            let mut src = Source::open(&cfg, g.cache_only)?;
            let records: Vec<&ImageRecord> = m.records().iter().collect();
            let scores = score_records(&det, &records, &mut src.embeddings)?;
            let mut csv = String::from("id,score\n");
            for (r, s) in records.iter().zip(&scores) {
                csv.push_str(&format!("{},{s:.9}\n", r.id));
            }
            let dir = run_dir(&cfg, "score", &[&model.display().to_string(), &manifest.display().to_string()])?;
            fs::write(dir.join("scores.csv"), csv)?;
            say(&dir);
            src.finish()
        }
        Command::Eval { model, name } => {
            let (refm, evalm) = manifests(&cfg)?;
            let protocol = Protocol { refset: &refm, eval: &evalm, config: &cfg };
            protocol.check()?;
            let mut src = Source::open(&cfg, g.cache_only)?;
            let det = match &model {
                Some(p) => ModelArtifact::load(p)?.to_detector()?,
                None => protocol.train(&mut src.embeddings)?.0,
            };
            let eval: Vec<&ImageRecord> = evalm.records().iter().collect();
            let run = clipforensics::harness::evaluate(&det, &eval, &mut src.embeddings, cfg.threshold)?;
            let report = aggregate(&[run], &cfg.family_map())?;
            let method = name.unwrap_or_else(|| kind_name(det.kind()));
            let model_arg = model.map(|p| p.display().to_string()).unwrap_or_default();
            let dir = run_dir(&cfg, "eval", &[&model_arg, &method])?;
            write_json(&dir.join("report.json"), &MethodReport { method, report })?;
            say(&dir);
            src.finish()
        }
        Command::SweepSize => {
            let (refm, evalm) = manifests(&cfg)?;
            let mut src = Source::open(&cfg, g.cache_only)?;
            let protocol = Protocol { refset: &refm, eval: &evalm, config: &cfg };
            let (report, runs) = protocol.run_size_sweep(&cfg.size_sweep, &mut src.embeddings)?;
            let dir = cfg.run_dir("sweep-size")?;
            write_json(&dir.join("report.json"), &report)?;
            fs::write(dir.join("sweep.csv"), report.to_csv(&runs))?;
            say(&dir);
            src.finish()
        }
        Command::SweepRobust => {
            if g.cache_only {
                return Err(config_error("the robustness sweep needs decoded images and cannot run with --cache-only"));
            }
            let (refm, evalm) = manifests(&cfg)?;
            let mut src = Source::open(&cfg, false)?;
            let protocol = Protocol { refset: &refm, eval: &evalm, config: &cfg };
            let grid = cfg.robustness.clone().unwrap_or_else(SweepGrid::jpeg_default);
            let (det, _) = protocol.train(&mut src.embeddings)?;
            let rows = protocol.run_robustness_sweep(&det, &grid, &mut src.embeddings)?;
            let dir = cfg.run_dir("sweep-robust")?;
            fs::write(dir.join("robustness.csv"), robustness_csv(&rows))?;
            write_json(&dir.join("robustness.json"), &rows)?;
            say(&dir);
            src.finish()
        }
        Command::Fewshot => {
            let pool = load_manifest(required(&cfg.fewshot.pool, "fewshot.pool")?)?;
            let mut src = Source::open(&cfg, g.cache_only)?;
            let result = run_fewshot(
                &cfg.fewshot,
                &pool,
                &mut src.embeddings,
                &cfg.classifier,
                cfg.seed,
                cfg.threshold,
                &cfg.family_map(),
            )?;
            let dir = cfg.run_dir("fewshot")?;
            write_json(&dir.join("fewshot.json"), &result)?;
            say(&dir);
            src.finish()
        }
        Command::Spectrum { manifest, generator, side, k, decimate: factor } => {
            let m = load_manifest(&manifest)?;
            let records: Vec<&ImageRecord> =
                m.records().iter().filter(|r| generator.as_ref().is_none_or(|g| &r.generator == g)).collect();
            if records.is_empty() {
                return Err(Error::Empty("no records match the spectrum selection").into());
            }
            let planes = records
                .iter()
                .map(|r| {
                    let img = load_image(&r.path)?;
                    let img = match factor {
                        Some(f) => decimate(&img, f)?,
                        None => img,
                    };
                    Ok(Plane::luminance(&img))
                })
                .collect::<clipforensics::Result<Vec<PlaneF64>>>()?;
            let spectrum: SpectrumMapF64 = mean_power_spectrum(&planes, side)?;
            let peaks = detect_peaks(&spectrum, k)?;
            let args = [
                manifest.display().to_string(),
                generator.unwrap_or_default(),
                side.to_string(),
                k.to_string(),
                factor.unwrap_or(1).to_string(),
            ];
            let dir = run_dir(&cfg, "spectrum", &args.iter().map(String::as_str).collect::<Vec<_>>())?;
            spectrum.save(&dir, "spectrum")?;
            write_json(&dir.join("peaks.json"), &peaks)?;
            say(&dir);
            Ok(())
        }
        Command::Report { methods, scores, manifest, layout, metric } => {
            let layout: ReportLayout = layout.parse()?;
            let metric: TableMetric = metric.parse()?;
            let families = cfg.family_map();
            let mut rows = Vec::new();
            for p in &methods {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                let m: MethodReport =
                    serde_json::from_str(&text).map_err(|e| Error::Scores(format!("{}: {e}", p.display())))?;
                rows.push(m);
            }
            if !scores.is_empty() {
                let mpath = manifest.as_ref().or(cfg.eval_manifest.as_ref());
                let m = load_manifest(mpath.ok_or_else(|| config_error("score tables need --manifest"))?)?;
                for p in &scores {
                    let imported = import_scores(p, &m)?;
                    if !imported.unmatched.is_empty() {
                        log::warn!("{}: {} id(s) not in the manifest", p.display(), imported.unmatched.len());
                    }
                    rows.push(method_from_scores(&imported.table, &m, cfg.threshold, &families)?);
                }
            }
            if rows.is_empty() {
                return Err(config_error("report needs at least one --method or --scores input"));
            }
            let mut args: Vec<String> = methods.iter().chain(&scores).map(|p| p.display().to_string()).collect();
            args.push(format!("{layout:?}/{metric:?}"));
            let dir = run_dir(&cfg, "report", &args.iter().map(String::as_str).collect::<Vec<_>>())?;
            let file = match layout {
                ReportLayout::TableCsv => "table.csv",
                ReportLayout::Json => "report.json",
                ReportLayout::Markdown => "table.md",
            };
            emit_report(&rows, layout, metric, &families, dir.join(file))?;
            say(&dir);
            Ok(())
        }
    }
}

fn kind_name(kind: ClassifierKind) -> String {
    serde_json::to_value(kind).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_else(|| format!("{kind:?}"))
}
