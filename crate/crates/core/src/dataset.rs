//! Annotated image records and the dataset transformations applied before
//! training: singleton-species removal, the per-species half split and the
//! two ways of mixing pattern photos into the training set.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, SplitMix64};

/// Axis-aligned pixel box. `x_max`/`y_max` are one past the last covered
/// pixel, so the area is exactly `(x_max - x_min) * (y_max - y_min)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BoundingBox {
    pub const fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub const fn full(width: u32, height: u32) -> Self {
        Self::new(0, 0, width, height)
    }

    pub fn width(&self) -> u32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    /// Checks `0 <= x_min < x_max <= width` and likewise for y.
    pub fn validate(&self, width: u32, height: u32) -> std::result::Result<(), String> {
        if self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(format!("degenerate box {self}"));
        }
        if self.x_max > width || self.y_max > height {
            return Err(format!("box {self} exceeds image {width}x{height}"));
        }
        Ok(())
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.x_min, self.y_min, self.x_max, self.y_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageKind {
    /// Field photograph; any number of butterflies.
    Ecological,
    /// Specimen photograph; one butterfly filling the frame.
    Pattern,
}

/// One species-labelled box.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub species: String,
    #[serde(flatten)]
    pub bbox: BoundingBox,
}

impl Annotation {
    pub fn new(species: impl Into<String>, bbox: BoundingBox) -> Self {
        Self {
            species: species.into(),
            bbox,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedImage {
    pub image_id: String,
    pub path: String,
    pub kind: ImageKind,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub boxes: Vec<Annotation>,
    /// Record-level species for pattern photos whose box is implied by the
    /// image extent. Never written back out once the box exists.
    #[serde(default, skip_serializing)]
    pub species: Option<String>,
}

impl AnnotatedImage {
    pub fn ecological(
        image_id: impl Into<String>,
        path: impl Into<String>,
        width: u32,
        height: u32,
        boxes: Vec<Annotation>,
    ) -> Self {
        Self {
            image_id: image_id.into(),
            path: path.into(),
            kind: ImageKind::Ecological,
            width,
            height,
            boxes,
            species: None,
        }
    }

    pub fn pattern(
        image_id: impl Into<String>,
        path: impl Into<String>,
        width: u32,
        height: u32,
        species: impl Into<String>,
    ) -> Self {
        Self {
            image_id: image_id.into(),
            path: path.into(),
            kind: ImageKind::Pattern,
            width,
            height,
            boxes: vec![Annotation::new(species, BoundingBox::full(width, height))],
            species: None,
        }
    }

    /// Distinct species in first-appearance order.
    pub fn species(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.boxes
            .iter()
            .map(|a| a.species.as_str())
            .filter(|s| seen.insert(*s))
            .collect()
    }

    pub fn first_species(&self) -> Option<&str> {
        self.boxes.first().map(|a| a.species.as_str())
    }

    /// Fills in the implied full-image box of a pattern record and checks
    /// every record invariant.
    pub fn normalize(&mut self) -> Result<()> {
        let invalid = |reason: String| Error::InvalidRecord {
            image_id: self.image_id.clone(),
            reason,
        };
        if self.image_id.is_empty() {
            return Err(invalid("empty image_id".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(invalid(format!("zero image size {}x{}", self.width, self.height)));
        }
        if self.kind == ImageKind::Pattern && self.boxes.is_empty() {
            let species = self
                .species
                .take()
                .ok_or_else(|| invalid("pattern record has neither boxes nor species".into()))?;
            self.boxes = vec![Annotation::new(species, BoundingBox::full(self.width, self.height))];
        }
        self.species = None;
        for a in &self.boxes {
            if a.species.is_empty() {
                return Err(invalid("box with empty species".into()));
            }
            a.bbox.validate(self.width, self.height).map_err(invalid)?;
        }
        match self.kind {
            ImageKind::Ecological if self.boxes.is_empty() => Err(invalid("ecological record has no boxes".into())),
            ImageKind::Pattern
                if self.boxes.len() != 1 || self.boxes[0].bbox != BoundingBox::full(self.width, self.height) =>
            {
                Err(invalid("pattern record must have exactly one full-image box".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestMeta {
    #[serde(default)]
    pub label: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub provenance: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderLine {
    manifest: ManifestMeta,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<AnnotatedImage>,
    pub label: String,
    pub seed: u64,
    /// Free-form notes on how the manifest was derived.
    pub provenance: Vec<String>,
}

impl DatasetManifest {
    pub fn new(label: impl Into<String>, records: Vec<AnnotatedImage>) -> Self {
        Self {
            records,
            label: label.into(),
            seed: 0,
            provenance: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// All species mentioned by any box, sorted.
    pub fn species_set(&self) -> BTreeSet<String> {
        self.records
            .iter()
            .flat_map(|r| r.boxes.iter().map(|a| a.species.clone()))
            .collect()
    }

    /// Normalizes every record and checks id uniqueness.
    pub fn validate(&mut self) -> Result<()> {
        let mut ids = HashSet::with_capacity(self.records.len());
        for record in &mut self.records {
            record.normalize()?;
            if !ids.insert(record.image_id.clone()) {
                return Err(Error::InvalidRecord {
                    image_id: record.image_id.clone(),
                    reason: "duplicate image_id".into(),
                });
            }
        }
        Ok(())
    }

    fn meta(&self) -> ManifestMeta {
        ManifestMeta {
            label: self.label.clone(),
            seed: self.seed,
            provenance: self.provenance.clone(),
        }
    }

    fn derived(&self, label: impl Into<String>, records: Vec<AnnotatedImage>) -> Self {
        Self {
            records,
            label: label.into(),
            seed: self.seed,
            provenance: self.provenance.clone(),
        }
    }
}

/// Reads a JSON-lines manifest. The first non-blank line may be a
/// `{"manifest": {...}}` header carrying the label, seed and provenance.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_manifest(BufReader::new(file), path)
}

pub fn read_manifest(reader: impl BufRead, path: &Path) -> Result<DatasetManifest> {
    let mut manifest = DatasetManifest::default();
    let mut seen_content = false;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        if !seen_content && text.starts_with("{\"manifest\"") {
            let header: HeaderLine = serde_json::from_str(text).map_err(|e| parse_err(e.to_string()))?;
            manifest.label = header.manifest.label;
            manifest.seed = header.manifest.seed;
            manifest.provenance = header.manifest.provenance;
            seen_content = true;
            continue;
        }
        seen_content = true;
        let record: AnnotatedImage = serde_json::from_str(text).map_err(|e| parse_err(e.to_string()))?;
        manifest.records.push(record);
    }
    manifest.validate()?;
    Ok(manifest)
}

pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|source| Error::Write {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = BufWriter::new(file);
    write_manifest_to(manifest, &mut out).map_err(|source| Error::Write {
        path: path.to_path_buf(),
        source,
    })?;
    out.flush().map_err(|source| Error::Write {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_manifest_to(manifest: &DatasetManifest, out: &mut impl Write) -> std::io::Result<()> {
    let header = HeaderLine {
        manifest: manifest.meta(),
    };
    serde_json::to_writer(&mut *out, &header)?;
    out.write_all(b"\n")?;
    for record in &manifest.records {
        serde_json::to_writer(&mut *out, record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Per-species image counts, sorted by descending count then species id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SpeciesHistogram {
    pub entries: Vec<(String, usize)>,
}

impl SpeciesHistogram {
    pub fn get(&self, species: &str) -> Option<usize> {
        self.entries.iter().find(|(s, _)| s == species).map(|&(_, c)| c)
    }

    pub fn total(&self) -> usize {
        self.entries.iter().map(|&(_, c)| c).sum()
    }

    pub fn singletons(&self) -> usize {
        self.entries.iter().filter(|&&(_, c)| c == 1).count()
    }

    /// (min, median, max) of the per-species counts. The median of an even
    /// number of classes is the lower middle value.
    pub fn long_tail_summary(&self) -> Option<(usize, usize, usize)> {
        if self.entries.is_empty() {
            return None;
        }
        let mut counts: Vec<usize> = self.entries.iter().map(|&(_, c)| c).collect();
        counts.sort_unstable();
        Some((counts[0], counts[(counts.len() - 1) / 2], counts[counts.len() - 1]))
    }

    pub fn to_csv(&self) -> String {
        let mut csv = String::from("species,count\n");
        for (species, count) in &self.entries {
            csv.push_str(&format!("{species},{count}\n"));
        }
        csv
    }
}

fn species_counts(records: &[AnnotatedImage]) -> BTreeMap<&str, usize> {
    let mut counts = BTreeMap::new();
    for record in records {
        for species in record.species() {
            *counts.entry(species).or_insert(0) += 1;
        }
    }
    counts
}

/// Counts one occurrence per (image, species) pair.
pub fn species_histogram(manifest: &DatasetManifest) -> SpeciesHistogram {
    let mut entries: Vec<(String, usize)> = species_counts(&manifest.records)
        .into_iter()
        .map(|(s, c)| (s.to_string(), c))
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    SpeciesHistogram { entries }
}

/// Drops every species that occurs in only one image. Boxes of such species
/// are removed from mixed images; images left without boxes are dropped.
pub fn remove_singletons(manifest: &DatasetManifest) -> DatasetManifest {
    let counts = species_counts(&manifest.records);
    let singleton: HashSet<&str> = counts.iter().filter(|&(_, &c)| c == 1).map(|(&s, _)| s).collect();
    let records = manifest
        .records
        .iter()
        .filter_map(|record| {
            let boxes: Vec<Annotation> = record
                .boxes
                .iter()
                .filter(|a| !singleton.contains(a.species.as_str()))
                .cloned()
                .collect();
            (!boxes.is_empty()).then(|| AnnotatedImage {
                boxes,
                ..record.clone()
            })
        })
        .collect();
    let mut out = manifest.derived(manifest.label.clone(), records);
    if !singleton.is_empty() {
        out.provenance
            .push(format!("removed {} singleton species", singleton.len()));
    }
    out
}

/// Splits each species' images half and half, rounding the training share up.
///
/// An image with several species is grouped under its first-listed species.
/// Within a species the images are shuffled with a seed derived from `seed`
/// and the species id, so the outcome does not depend on species order.
/// Both outputs keep the input record order.
pub fn split_stratified(manifest: &DatasetManifest, seed: u64) -> (DatasetManifest, DatasetManifest) {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (idx, record) in manifest.records.iter().enumerate() {
        let key = record.first_species().unwrap_or("");
        groups.entry(key).or_default().push(idx);
    }
    let mut in_train = vec![false; manifest.records.len()];
    for (species, mut members) in groups {
        SplitMix64::new(derive_seed(seed, species)).shuffle(&mut members);
        let n_train = members.len().div_ceil(2);
        for &idx in &members[..n_train] {
            in_train[idx] = true;
        }
    }
    let (train, test): (Vec<_>, Vec<_>) = manifest.records.iter().zip(&in_train).partition(|(_, &t)| t);
    let strip = |v: Vec<(&AnnotatedImage, &bool)>| v.into_iter().map(|(r, _)| r.clone()).collect();
    let note = format!("split_stratified seed={seed}; multi-species images follow first-listed species");
    let mut train = manifest.derived("train", strip(train));
    let mut test = manifest.derived("test", strip(test));
    for m in [&mut train, &mut test] {
        m.seed = seed;
        m.provenance.push(note.clone());
    }
    (train, test)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatternStrategy {
    /// Every pattern photo joins the training set (Data_1).
    AllPatterns,
    /// Only pattern photos of species present in the ecological training set (Data_2).
    MatchedPatterns,
}

impl PatternStrategy {
    pub fn label(self) -> &'static str {
        match self {
            PatternStrategy::AllPatterns => "Data_1",
            PatternStrategy::MatchedPatterns => "Data_2",
        }
    }
}

/// Ecological training records followed by the selected pattern records.
pub fn build_training_set(
    eco_train: &DatasetManifest,
    patterns: &DatasetManifest,
    strategy: PatternStrategy,
) -> Result<DatasetManifest> {
    if let Some(bad) = patterns.records.iter().find(|r| r.kind != ImageKind::Pattern) {
        return Err(Error::InvalidRecord {
            image_id: bad.image_id.clone(),
            reason: "non-pattern record in pattern manifest".into(),
        });
    }
    let eco_species = eco_train.species_set();
    let mut records = eco_train.records.clone();
    records.extend(
        patterns
            .records
            .iter()
            .filter(|r| match strategy {
                PatternStrategy::AllPatterns => true,
                PatternStrategy::MatchedPatterns => r.boxes.iter().all(|a| eco_species.contains(&a.species)),
            })
            .cloned(),
    );
    let mut out = eco_train.derived(strategy.label(), records);
    out.provenance.push(format!(
        "build_training_set {:?}: {} ecological + {} pattern",
        strategy,
        eco_train.len(),
        out.len() - eco_train.len()
    ));
    Ok(out)
}
