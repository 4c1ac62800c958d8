//! Dataset manifests (JSON lines) and external score tables (CSV).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Fake => "fake",
        }
    }

    /// `-1` for real, `+1` for fake.
    pub fn sign(self) -> i8 {
        match self {
            Label::Real => -1,
            Label::Fake => 1,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(Label::Real),
            "fake" => Ok(Label::Fake),
            other => Err(Error::Manifest(format!("unknown label value {other:?}"))),
        }
    }
}

/// Generator name carried by every real image.
pub const REAL_GENERATOR: &str = "real";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub path: PathBuf,
    pub label: Label,
    pub generator: String,
    pub source_set: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
    /// Unrecognized keys, written back untouched.
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl ImageRecord {
    pub fn new(
        id: impl Into<String>,
        path: impl Into<PathBuf>,
        label: Label,
        generator: impl Into<String>,
        source_set: impl Into<String>,
    ) -> Self {
        ImageRecord {
            id: id.into(),
            path: path.into(),
            label,
            generator: generator.into(),
            source_set: source_set.into(),
            caption: None,
            pair_id: None,
            width: None,
            height: None,
            extra: serde_json::Map::new(),
        }
    }

    pub fn with_pair(mut self, pair_id: impl Into<String>) -> Self {
        self.pair_id = Some(pair_id.into());
        self
    }

    pub fn resolution(&self) -> Option<(u32, u32)> {
        Some((self.width?, self.height?))
    }

    fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Manifest("record with empty id".into()));
        }
        let says_real = self.generator == REAL_GENERATOR;
        if says_real != (self.label == Label::Real) {
            return Err(Error::Manifest(format!(
                "record {}: label {} inconsistent with generator {:?}",
                self.id, self.label, self.generator
            )));
        }
        if self.width.is_some() != self.height.is_some() {
            return Err(Error::Manifest(format!("record {}: width and height must be given together", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKey {
    Generator,
    SourceSet,
    Label,
}

impl FromStr for SplitKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "generator" => Ok(SplitKey::Generator),
            "source_set" => Ok(SplitKey::SourceSet),
            "label" => Ok(SplitKey::Label),
            other => Err(Error::Config(format!("unknown split key {other:?}"))),
        }
    }
}

/// A validated, immutable collection of image records.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub notes: String,
    records: Vec<ImageRecord>,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, records: Vec<ImageRecord>) -> Result<Self> {
        let manifest = DatasetManifest { name: name.into(), notes: String::new(), records };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn ids(&self) -> HashSet<&str> {
        self.records.iter().map(|r| r.id.as_str()).collect()
    }

    /// Complete real/fake pairs as `(pair_id, real, fake)`, sorted by pair id.
    pub fn pairs(&self) -> Vec<(&str, &ImageRecord, &ImageRecord)> {
        let mut by_pair: BTreeMap<&str, (Option<&ImageRecord>, Option<&ImageRecord>)> = BTreeMap::new();
        for r in &self.records {
            if let Some(p) = r.pair_id.as_deref() {
                let slot = by_pair.entry(p).or_default();
                match r.label {
                    Label::Real => slot.0 = Some(r),
                    Label::Fake => slot.1 = Some(r),
                }
            }
        }
        by_pair.into_iter().filter_map(|(p, (real, fake))| Some((p, real?, fake?))).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::Manifest("manifest has no records".into()));
        }
        let mut seen = HashSet::with_capacity(self.records.len());
        let mut pairs: HashMap<&str, Vec<Label>> = HashMap::new();
        for r in &self.records {
            r.validate()?;
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate id {}", r.id)));
            }
            if let Some(p) = r.pair_id.as_deref() {
                pairs.entry(p).or_default().push(r.label);
            }
        }
        let mut pair_ids: Vec<_> = pairs.keys().copied().collect();
        pair_ids.sort_unstable();
        for p in pair_ids {
            let labels = &pairs[p];
            if labels.len() > 2 {
                return Err(Error::Manifest(format!("pair {p} has {} members", labels.len())));
            }
            if labels.len() == 2 {
                if !labels.contains(&Label::Real) {
                    return Err(Error::Manifest(format!("pair {p} lacks a real member")));
                }
                if !labels.contains(&Label::Fake) {
                    return Err(Error::Manifest(format!("pair {p} lacks a fake member")));
                }
            }
        }
        Ok(())
    }

    /// Parses JSON-lines text. Blank lines are skipped.
    pub fn parse(text: &str, name: impl Into<String>, origin: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record =
                parse_record(line).map_err(|msg| Error::Parse { path: origin.to_path_buf(), line: i + 1, msg })?;
            records.push(record);
        }
        DatasetManifest::new(name, records)
    }

    /// Loads a manifest; its name is the file stem.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        DatasetManifest::parse(&text, name, path)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    /// Partitions records by the chosen field. Groups preserve manifest order.
    pub fn split_by(&self, key: SplitKey) -> BTreeMap<String, Vec<ImageRecord>> {
        let mut groups: BTreeMap<String, Vec<ImageRecord>> = BTreeMap::new();
        for r in &self.records {
            let k = match key {
                SplitKey::Generator => r.generator.clone(),
                SplitKey::SourceSet => r.source_set.clone(),
                SplitKey::Label => r.label.to_string(),
            };
            groups.entry(k).or_default().push(r.clone());
        }
        groups
    }

    /// Returns a manifest restricted to the given ids, keeping manifest order.
    pub fn subset(&self, keep: &HashSet<&str>) -> Result<Self> {
        let records = self.records.iter().filter(|r| keep.contains(r.id.as_str())).cloned().collect();
        let mut m = DatasetManifest::new(self.name.clone(), records)?;
        m.notes = self.notes.clone();
        Ok(m)
    }
}

fn parse_record(line: &str) -> std::result::Result<ImageRecord, String> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if let Some(label) = value.get("label").and_then(|l| l.as_str()) {
        label.parse::<Label>().map_err(|e| e.to_string())?;
    }
    serde_json::from_value(value).map_err(|e| e.to_string())
}

/// Scores produced by an external detector, keyed by record id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub method_name: String,
    pub entries: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportedScores {
    pub table: ScoreTable,
    /// Ids present in the file but absent from the manifest.
    pub unmatched: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct ScoreRow {
    id: String,
    score: String,
}

/// Reads a `id,score` CSV against `manifest`. The method name is the file stem.
pub fn import_scores(path: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<ImportedScores> {
    let path = path.as_ref();
    let method = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let text = fs::read_to_string(path)?;
    parse_scores(&text, method, manifest)
}

pub fn parse_scores(text: &str, method_name: impl Into<String>, manifest: &DatasetManifest) -> Result<ImportedScores> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::Scores(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["id", "score"] {
        return Err(Error::Scores(format!(
            "expected header id,score, found {}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let ids = manifest.ids();
    let mut entries = BTreeMap::new();
    let mut unmatched = Vec::new();
    for (i, row) in reader.deserialize::<ScoreRow>().enumerate() {
        // header is line 1
        let line = i + 2;
        let row = row.map_err(|e| Error::Scores(format!("row {line}: {e}")))?;
        let score: f64 = row
            .score
            .parse()
            .map_err(|_| Error::Scores(format!("row {line} (id {}): unparseable score {:?}", row.id, row.score)))?;
        if !score.is_finite() || !(0.0..=1.0).contains(&score) {
            return Err(Error::Scores(format!("row {line} (id {}): score {score} outside [0,1]", row.id)));
        }
        if ids.contains(row.id.as_str()) {
            if entries.insert(row.id.clone(), score).is_some() {
                return Err(Error::Scores(format!("row {line}: duplicate id {}", row.id)));
            }
        } else {
            log::warn!("score row {line}: id {} not in manifest {}", row.id, manifest.name);
            unmatched.push(row.id);
        }
    }
    Ok(ImportedScores { table: ScoreTable { method_name: method_name.into(), entries }, unmatched })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn real(id: &str) -> ImageRecord {
        ImageRecord::new(id, format!("{id}.png"), Label::Real, REAL_GENERATOR, "coco")
    }

    fn fake(id: &str, generator: &str) -> ImageRecord {
        ImageRecord::new(id, format!("{id}.png"), Label::Fake, generator, "coco")
    }

    fn parse(text: &str) -> Result<DatasetManifest> {
        DatasetManifest::parse(text, "t", Path::new("t.jsonl"))
    }

    #[test]
    fn minimal_pair_loads() {
        let text = concat!(
            r#"{"id":"r1","path":"r1.png","label":"real","generator":"real","source_set":"coco","caption":"a cat","pair_id":"p1"}"#,
            "\n",
            r#"{"id":"f1","path":"f1.png","label":"fake","generator":"latent-diffusion","source_set":"coco","caption":"a cat","pair_id":"p1"}"#,
            "\n"
        );
        let m = parse(text).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.pairs().len(), 1);
        assert_eq!(m.to_jsonl(), text);
    }

    #[test]
    fn pair_with_two_fakes_is_rejected() {
        let m = DatasetManifest::new("t", vec![fake("a", "g").with_pair("p1"), fake("b", "g").with_pair("p1")]);
        assert_eq!(m.unwrap_err().to_string(), "invalid manifest: pair p1 lacks a real member");
    }

    #[test]
    fn duplicate_id_is_rejected() {
        let err = DatasetManifest::new("t", vec![real("a"), real("a")]).unwrap_err();
        assert!(err.to_string().contains("duplicate id a"));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = format!("{}\n{{not json\n", serde_json::to_string(&real("a")).unwrap());
        match parse(&text).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn unknown_label_is_rejected() {
        let text = r#"{"id":"a","path":"a.png","label":"maybe","generator":"real","source_set":"coco"}"#;
        let err = parse(text).unwrap_err();
        assert!(err.to_string().contains("unknown label value \"maybe\""), "{err}");
    }

    #[test]
    fn label_generator_consistency() {
        assert!(DatasetManifest::new("t", vec![ImageRecord::new("a", "a", Label::Real, "sdxl", "x")]).is_err());
        assert!(DatasetManifest::new("t", vec![ImageRecord::new("a", "a", Label::Fake, "real", "x")]).is_err());
    }

    #[test]
    fn empty_manifest_is_rejected() {
        assert!(parse("\n\n").is_err());
    }

    #[test]
    fn extra_fields_survive_round_trip() {
        let line = r#"{"id":"a","path":"a.png","label":"real","generator":"real","source_set":"raise","width":640,"height":480,"camera":"nikon","iso":200}"#;
        let m = parse(line).unwrap();
        assert_eq!(m.records()[0].extra["camera"], "nikon");
        assert_eq!(m.records()[0].resolution(), Some((640, 480)));
        let back = parse(&m.to_jsonl()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn split_by_generator() {
        let m = DatasetManifest::new("t", vec![fake("1", "a"), fake("2", "a"), fake("3", "b")]).unwrap();
        let groups = m.split_by(SplitKey::Generator);
        assert_eq!(groups.len(), 2);
        assert_eq!(groups["a"].len(), 2);
        assert_eq!(groups["b"].len(), 1);
    }

    #[test]
    fn split_all_real_by_label() {
        let m = DatasetManifest::new("t", vec![real("1"), real("2")]).unwrap();
        let groups = m.split_by(SplitKey::Label);
        assert_eq!(groups.keys().collect::<Vec<_>>(), ["real"]);
        assert_eq!(groups["real"].len(), 2);
    }

    fn three() -> DatasetManifest {
        DatasetManifest::new("t", vec![real("a"), fake("b", "g"), fake("c", "g")]).unwrap()
    }

    #[test]
    fn scores_import() {
        let t = parse_scores("id,score\na,0.1\nb,0.9\nc,1\n", "m", &three()).unwrap();
        assert_eq!(t.table.entries.len(), 3);
        assert!(t.unmatched.is_empty());
    }

    #[test]
    fn score_out_of_range_names_row() {
        let err = parse_scores("id,score\na,0.1\nb,1.5\n", "m", &three()).unwrap_err();
        assert!(err.to_string().contains("row 3 (id b)"), "{err}");
        assert!(parse_scores("id,score\na,NaN\n", "m", &three()).is_err());
        assert!(parse_scores("id,score\na,inf\n", "m", &three()).is_err());
    }

    #[test]
    fn unknown_score_id_is_a_warning() {
        let t = parse_scores("id,score\na,0.1\nzz,0.5\n", "m", &three()).unwrap();
        assert_eq!(t.table.entries.len(), 1);
        assert_eq!(t.unmatched, ["zz"]);
    }

    #[test]
    fn wrong_header_is_rejected() {
        assert!(parse_scores("name,value\na,0.1\n", "m", &three()).is_err());
    }
}
