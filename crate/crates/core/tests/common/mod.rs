#![allow(dead_code)]

use std::path::{Path, PathBuf};

use clipforensics::embed::{EmbeddingSource, ExportManifest, MemoryEmbeddings};
use clipforensics::manifest::{DatasetManifest, ImageRecord, Label};
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/encoder")
}

pub fn export_manifest() -> ExportManifest {
    ExportManifest::load(fixture_dir().join("toy_vit.export.json")).expect("export manifest")
}

#[derive(Debug, Deserialize)]
pub struct Fixture {
    pub image: PathBuf,
    pub tensor: PathBuf,
    pub penultimate: PathBuf,
    #[serde(rename = "final")]
    pub final_: PathBuf,
}

pub fn read_f32(path: &Path) -> Vec<f32> {
    let bytes = std::fs::read(path).expect("fixture file");
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

/// Fixture records with paths resolved against the export directory.
pub fn fixtures() -> Vec<Fixture> {
    let dir = fixture_dir();
    export_manifest()
        .fixtures
        .iter()
        .map(|p| {
            let f: Fixture = serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap();
            Fixture {
                image: dir.join(f.image),
                tensor: dir.join(f.tensor),
                penultimate: dir.join(f.penultimate),
                final_: dir.join(f.final_),
            }
        })
        .collect()
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Two Gaussian clusters with unit covariance whose means lie `separation`
/// apart along the first axis. Ids are `{prefix}r{i}` and `{prefix}f{i}`;
/// record `i` of each class shares pair id `{prefix}p{i}`. Vectors go into `emb`.
pub fn gaussian_clusters(
    emb: &mut MemoryEmbeddings,
    prefix: &str,
    per_class: usize,
    separation: f64,
    generators: &[&str],
    seed: u64,
) -> DatasetManifest {
    let dim = emb.feature_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    for i in 0..per_class {
        for (label, sign) in [(Label::Real, -1.0), (Label::Fake, 1.0)] {
            let id = format!("{prefix}{}{i}", if label == Label::Real { "r" } else { "f" });
            let generator = if label == Label::Real { "real" } else { generators[i % generators.len()] };
            let v: Vec<f32> = (0..dim)
                .map(|d| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let shift = if d == 0 { sign * separation / 2.0 } else { 0.0 };
                    (z + shift) as f32
                })
                .collect();
            emb.insert(id.clone(), v).unwrap();
            records.push(
                ImageRecord::new(id.clone(), format!("{id}.png"), label, generator, "toy")
                    .with_pair(format!("{prefix}p{i}")),
            );
        }
    }
    DatasetManifest::new(prefix, records).unwrap()
}

/// Smooth sinusoidal texture plus noise; `periodic` adds a 4-pixel grid.
pub fn textured(rng: &mut ChaCha8Rng, w: u32, h: u32, periodic: bool) -> RgbImage {
    let (fx, fy, phase) = (rng.random_range(0.02..0.08), rng.random_range(0.02..0.08), rng.random_range(0.0..6.0));
    RgbImage::from_fn(w, h, |x, y| {
        let base = 120.0 + 60.0 * ((x as f64 * fx + phase).sin() * (y as f64 * fy).cos());
        let grid = if periodic && (x % 4 == 0 || y % 4 == 0) { 25.0 } else { 0.0 };
        let mut px = |o: f64| {
            let z: f64 = StandardNormal.sample(rng);
            (base + grid + o + 6.0 * z).round().clamp(0.0, 255.0) as u8
        };
        image::Rgb([px(0.0), px(10.0), px(-10.0)])
    })
}

/// Writes `n` real/fake PNG pairs into `dir`; fakes carry the grid.
pub fn write_set(dir: &std::path::Path, prefix: &str, n: usize, rng: &mut ChaCha8Rng) -> DatasetManifest {
    let mut recs = Vec::new();
    for i in 0..n {
        for (label, gen) in [(Label::Real, "real"), (Label::Fake, "toygen")] {
            let id = format!("{prefix}{}{i}", &gen[..1]);
            let path = dir.join(format!("{id}.png"));
            textured(rng, 96 + 8 * i as u32, 80, label == Label::Fake).save(&path).unwrap();
            recs.push(ImageRecord::new(id, path, label, gen, "toy").with_pair(format!("{prefix}p{i}")));
        }
    }
    DatasetManifest::new(prefix, recs).unwrap()
}
