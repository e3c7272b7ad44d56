//! Pretraining corpus records, the on-disk region-feature store, and the
//! distillation-style ingestion path that builds records from a caption
//! teacher plus detector tags.
//!
//! Records are one JSON object per line; region features live in a single
//! binary store file so a corpus ships as exactly two artifacts.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::detector::regions::{Region, RegionSet};
use crate::error::{Error, Result};

/// Where a tag label came from. Distilled corpora mix machine-generated
/// labels of different reliability, so every tag keeps its origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    DetectorPredicted,
    TeacherPredicted,
    HumanVerified,
}

/// A tag with its origin.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedLabel {
    pub tag: String,
    pub provenance: Provenance,
}

/// One pretraining example: an image id, a caption, tags, and a key into
/// the feature store holding the image's detected regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub image_id: String,
    pub caption: String,
    pub tags: Vec<TaggedLabel>,
    /// Key of the matching [`RegionSet`] in the feature store.
    pub features: String,
}

impl PretrainRecord {
    pub fn validate(&self) -> Result<()> {
        if self.image_id.trim().is_empty() {
            return Err(Error::MalformedData("record with empty image id".into()));
        }
        if self.caption.trim().is_empty() {
            return Err(Error::MalformedData(format!(
                "record {} has an empty caption",
                self.image_id
            )));
        }
        if self.features.trim().is_empty() {
            return Err(Error::MalformedData(format!(
                "record {} has no feature-store key",
                self.image_id
            )));
        }
        Ok(())
    }
}

/// Write records as JSON lines.
pub fn write_records(records: &[PretrainRecord], w: &mut impl Write) -> Result<()> {
    for record in records {
        record.validate()?;
        serde_json::to_writer(&mut *w, record)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Read JSON-lines records, validating each and reporting the offending
/// line number on failure. Blank lines are not tolerated: a corpus file is
/// machine-written.
pub fn read_records(r: &mut impl Read) -> Result<Vec<PretrainRecord>> {
    let reader = BufReader::new(r);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let record: PretrainRecord = serde_json::from_str(&line)
            .map_err(|e| Error::MalformedData(format!("corpus line {}: {e}", idx + 1)))?;
        record
            .validate()
            .map_err(|e| Error::MalformedData(format!("corpus line {}: {e}", idx + 1)))?;
        out.push(record);
    }
    Ok(out)
}

pub fn save_records(records: &[PretrainRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_records(records, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<PretrainRecord>> {
    read_records(&mut File::open(path)?)
}

const STORE_MAGIC: &[u8; 4] = b"MVFS";
const STORE_VERSION: u16 = 1;

/// A keyed collection of [`RegionSet`]s representing the cached detector
/// output for a corpus, stored as a single binary file.
#[derive(Debug, Default, Clone)]
pub struct FeatureStore {
    sets: BTreeMap<String, RegionSet>,
}

impl FeatureStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a set keyed by its own image id; duplicate ids are an error.
    pub fn insert(&mut self, set: RegionSet) -> Result<()> {
        set.validate()?;
        if self.sets.contains_key(&set.image_id) {
            return Err(Error::MalformedData(format!(
                "duplicate feature entry for image {}",
                set.image_id
            )));
        }
        self.sets.insert(set.image_id.clone(), set);
        Ok(())
    }

    pub fn get(&self, image_id: &str) -> Option<&RegionSet> {
        self.sets.get(image_id)
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.sets.keys().map(String::as_str)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(STORE_MAGIC)?;
        w.write_all(&STORE_VERSION.to_le_bytes())?;
        let count = u32::try_from(self.sets.len())
            .map_err(|_| Error::MalformedData("feature store too large".into()))?;
        w.write_all(&count.to_le_bytes())?;
        for set in self.sets.values() {
            set.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != STORE_MAGIC {
            return Err(Error::MalformedData("not a feature store file".into()));
        }
        let mut version = [0u8; 2];
        r.read_exact(&mut version)?;
        let version = u16::from_le_bytes(version);
        if version != STORE_VERSION {
            return Err(Error::MalformedData(format!(
                "unsupported feature store version {version}"
            )));
        }
        let mut count = [0u8; 4];
        r.read_exact(&mut count)?;
        let count = u32::from_le_bytes(count);
        let mut store = Self::new();
        for _ in 0..count {
            store.insert(RegionSet::read_from(r)?)?;
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(Error::MalformedData(
                "trailing bytes after the last feature entry".into(),
            ));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// Supplies captions for images, e.g. a stronger captioning model whose
/// output is distilled into the corpus.
pub trait CaptionProvider {
    fn caption(&self, image_id: &str, regions: &RegionSet) -> String;
}

/// Supplies extra tags beyond the detector's own predictions.
pub trait TagProvider {
    fn tags(&self, image_id: &str, regions: &RegionSet) -> Vec<String>;
}

/// Trivial stand-in teacher that captions every image the same way.
/// Useful for wiring tests and as the default when no teacher is plugged in.
#[derive(Debug, Clone)]
pub struct FixedCaptioner(pub String);

impl CaptionProvider for FixedCaptioner {
    fn caption(&self, _image_id: &str, _regions: &RegionSet) -> String {
        self.0.clone()
    }
}

/// Outcome of an ingestion run: the records built, plus every source image
/// that was skipped and why.
#[derive(Debug, Clone, PartialEq)]
pub struct IngestReport {
    pub records: Vec<PretrainRecord>,
    pub skipped: Vec<(String, String)>,
}

/// Build pretraining records for `image_ids` by pairing each image's cached
/// region features with a teacher-provided caption; detector tags come from
/// the region set itself, and an optional tagger contributes additional
/// teacher-predicted tags.
///
/// Images without cached features are skipped (reported, not fatal). Output
/// is sorted by image id and fully determined by the inputs, so re-running
/// over the same source yields byte-identical records.
pub fn ingest_distilled(
    image_ids: &[String],
    store: &FeatureStore,
    teacher: &dyn CaptionProvider,
    tagger: Option<&dyn TagProvider>,
) -> IngestReport {
    let mut sorted: Vec<&String> = image_ids.iter().collect();
    sorted.sort();
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    let mut previous: Option<&String> = None;
    for id in sorted {
        if previous == Some(id) {
            skipped.push((id.clone(), "duplicate id in source".into()));
            continue;
        }
        previous = Some(id);
        let Some(regions) = store.get(id) else {
            skipped.push((id.clone(), "no cached region features".into()));
            continue;
        };
        let caption = teacher.caption(id, regions);
        if caption.trim().is_empty() {
            skipped.push((id.clone(), "teacher produced an empty caption".into()));
            continue;
        }
        let mut tags = Vec::new();
        for tag in regions.tags() {
            if !tags.iter().any(|t: &TaggedLabel| t.tag == tag) {
                tags.push(TaggedLabel {
                    tag: tag.to_string(),
                    provenance: Provenance::DetectorPredicted,
                });
            }
        }
        if let Some(tagger) = tagger {
            for tag in tagger.tags(id, regions) {
                if !tags.iter().any(|t| t.tag == tag) {
                    tags.push(TaggedLabel { tag, provenance: Provenance::TeacherPredicted });
                }
            }
        }
        records.push(PretrainRecord {
            image_id: id.clone(),
            caption,
            tags,
            features: id.clone(),
        });
    }
    IngestReport { records, skipped }
}

/// Word pool used by the synthetic corpus generator; the matching
/// tokenizer vocabulary is [`synthetic_vocab`].
const SYNTH_ADJECTIVES: &[&str] = &["red", "blue", "green", "small", "wide"];
const SYNTH_NOUNS: &[&str] =
    &["dog", "cat", "car", "tree", "ball", "sign", "bench", "kite"];
const SYNTH_GLUE: &[&str] = &["a", "near", "the", "on"];

/// Vocabulary pieces covering every word the synthetic corpus can emit.
pub fn synthetic_vocab() -> Vec<&'static str> {
    let mut v = Vec::new();
    v.extend_from_slice(SYNTH_GLUE);
    v.extend_from_slice(SYNTH_ADJECTIVES);
    v.extend_from_slice(SYNTH_NOUNS);
    v
}

/// Generate a deterministic synthetic corpus: `n` records plus a feature
/// store of `regions_per_image` random boxes with `feature_dim` features
/// each. Captions follow "a <adj> <noun> near the <noun>" so a tokenizer
/// over [`synthetic_vocab`] covers them exactly.
pub fn synthetic_corpus(
    n: usize,
    regions_per_image: usize,
    feature_dim: usize,
    seed: u64,
) -> (Vec<PretrainRecord>, FeatureStore) {
    use rand::SeedableRng;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (width, height) = (640u32, 480u32);
    let (w, h) = (width as f32, height as f32);
    let mut records = Vec::with_capacity(n);
    let mut store = FeatureStore::new();
    for i in 0..n {
        let image_id = format!("synthetic-{i:04}");
        let adj = SYNTH_ADJECTIVES[rng.random_range(0..SYNTH_ADJECTIVES.len())];
        let noun_a = SYNTH_NOUNS[rng.random_range(0..SYNTH_NOUNS.len())];
        let noun_b = SYNTH_NOUNS[rng.random_range(0..SYNTH_NOUNS.len())];
        let caption = format!("a {adj} {noun_a} near the {noun_b}");

        let mut regions = Vec::with_capacity(regions_per_image);
        for r in 0..regions_per_image {
            let x1 = rng.random_range(0.0..w - 2.0);
            let y1 = rng.random_range(0.0..h - 2.0);
            let x2 = rng.random_range(x1 + 1.0..w);
            let y2 = rng.random_range(y1 + 1.0..h);
            let tag = if r == 0 { noun_a } else { SYNTH_NOUNS[rng.random_range(0..SYNTH_NOUNS.len())] };
            let feature = (0..feature_dim).map(|_| rng.random_range(-1.0..1.0f32)).collect();
            regions.push(Region {
                bbox: [x1, y1, x2, y2],
                score: rng.random_range(0.05..1.0f32),
                class_id: 1,
                tag: tag.to_string(),
                feature,
            });
        }
        regions.sort_by(|a, b| b.score.total_cmp(&a.score));
        let set = RegionSet {
            image_id: image_id.clone(),
            image_width: width,
            image_height: height,
            feature_dim: feature_dim as u32,
            regions,
        };
        store.insert(set).expect("unique synthetic ids");
        let mut tags = vec![TaggedLabel {
            tag: noun_a.to_string(),
            provenance: Provenance::DetectorPredicted,
        }];
        if noun_b != noun_a {
            tags.push(TaggedLabel {
                tag: noun_b.to_string(),
                provenance: Provenance::DetectorPredicted,
            });
        }
        records.push(PretrainRecord { image_id: image_id.clone(), caption, tags, features: image_id });
    }
    (records, store)
}
