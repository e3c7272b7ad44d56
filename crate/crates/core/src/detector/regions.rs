//! Detected-region container and its on-disk format.
//!
//! A `RegionSet` is the detector-to-fusion interface: for one image, up to
//! `max_regions` boxes with a confidence, a predicted object tag, and the
//! visual feature vector from the per-region head. Features are stored in
//! single precision — the quantization happens once, at extraction time, so
//! a set loaded from disk is bit-identical to the one that was saved.
//!
//! Binary layout (little-endian throughout):
//!
//! ```text
//! magic "MVRS" | u16 version | u32 id_len | id bytes (utf-8)
//! | u32 image_width | u32 image_height | u32 feature_dim | u32 n_regions
//! | n_regions x ( 4 x f32 box (x1,y1,x2,y2) | f32 score | u16 class_id
//!                | u32 tag_len | tag bytes | feature_dim x f32 )
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const REGION_MAGIC: [u8; 4] = *b"MVRS";
pub const REGION_FORMAT_VERSION: u16 = 1;

/// One detected region.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    /// Pixel box `(x1, y1, x2, y2)` in image coordinates.
    pub bbox: [f32; 4],
    /// Detection confidence in `[0, 1]`.
    pub score: f32,
    /// Index into the detector's class vocabulary (0 is background).
    pub class_id: u16,
    /// Human-readable object tag for the class.
    pub tag: String,
    /// Visual feature from the per-region head.
    pub feature: Vec<f32>,
}

/// All regions extracted from one image, sorted by descending score.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSet {
    pub image_id: String,
    pub image_width: u32,
    pub image_height: u32,
    pub feature_dim: u32,
    pub regions: Vec<Region>,
}

impl RegionSet {
    /// Object tags in region order (duplicates preserved; downstream text
    /// assembly decides how to use them).
    pub fn tags(&self) -> Vec<&str> {
        self.regions.iter().map(|r| r.tag.as_str()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_width == 0 || self.image_height == 0 {
            return Err(Error::InvalidArgument(format!(
                "region set {}: empty image extent",
                self.image_id
            )));
        }
        let (w, h) = (self.image_width as f32, self.image_height as f32);
        let mut prev = f32::INFINITY;
        for (i, r) in self.regions.iter().enumerate() {
            if r.feature.len() != self.feature_dim as usize {
                return Err(Error::InvalidArgument(format!(
                    "region {i}: feature has {} values, set says {}",
                    r.feature.len(),
                    self.feature_dim
                )));
            }
            let [x1, y1, x2, y2] = r.bbox;
            let finite = r.bbox.iter().all(|v| v.is_finite());
            if !finite || x2 <= x1 || y2 <= y1 || x1 < 0.0 || y1 < 0.0 || x2 > w || y2 > h {
                return Err(Error::InvalidArgument(format!(
                    "region {i}: box {:?} invalid for {w}x{h} image",
                    r.bbox
                )));
            }
            if !(0.0..=1.0).contains(&r.score) {
                return Err(Error::InvalidArgument(format!(
                    "region {i}: score {} outside [0, 1]",
                    r.score
                )));
            }
            if r.score > prev {
                return Err(Error::InvalidArgument(format!(
                    "region {i}: scores not sorted descending"
                )));
            }
            prev = r.score;
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&REGION_MAGIC)?;
        w.write_all(&REGION_FORMAT_VERSION.to_le_bytes())?;
        write_str(w, &self.image_id)?;
        w.write_all(&self.image_width.to_le_bytes())?;
        w.write_all(&self.image_height.to_le_bytes())?;
        w.write_all(&self.feature_dim.to_le_bytes())?;
        w.write_all(&(self.regions.len() as u32).to_le_bytes())?;
        for r in &self.regions {
            for v in r.bbox {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&r.score.to_le_bytes())?;
            w.write_all(&r.class_id.to_le_bytes())?;
            write_str(w, &r.tag)?;
            if r.feature.len() != self.feature_dim as usize {
                return Err(Error::InvalidArgument(format!(
                    "region feature has {} values, set says {}",
                    r.feature.len(),
                    self.feature_dim
                )));
            }
            for v in &r.feature {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<RegionSet> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != REGION_MAGIC {
            return Err(Error::MalformedData(format!(
                "not a region file (magic {magic:?})"
            )));
        }
        let version = read_u16(r)?;
        if version != REGION_FORMAT_VERSION {
            return Err(Error::MalformedData(format!(
                "unsupported region format version {version}"
            )));
        }
        let image_id = read_str(r)?;
        let image_width = read_u32(r)?;
        let image_height = read_u32(r)?;
        let feature_dim = read_u32(r)?;
        let n = read_u32(r)?;
        let mut regions = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let mut bbox = [0f32; 4];
            for v in &mut bbox {
                *v = read_f32(r)?;
            }
            let score = read_f32(r)?;
            let class_id = read_u16(r)?;
            let tag = read_str(r)?;
            let mut feature = vec![0f32; feature_dim as usize];
            for v in &mut feature {
                *v = read_f32(r)?;
            }
            regions.push(Region { bbox, score, class_id, tag, feature });
        }
        Ok(RegionSet { image_id, image_width, image_height, feature_dim, regions })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RegionSet> {
        let mut r = BufReader::new(File::open(path)?);
        let set = Self::read_from(&mut r)?;
        // Trailing garbage means the file is not what we wrote.
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(Error::MalformedData(
                "trailing bytes after region records".into(),
            ));
        }
        Ok(set)
    }
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(Error::MalformedData(format!(
            "unreasonable string length {len} in region file"
        )));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf)
        .map_err(|e| Error::MalformedData(format!("region file string not utf-8: {e}")))
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32(r: &mut impl Read) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_set() -> RegionSet {
        RegionSet {
            image_id: "img-000042".into(),
            image_width: 640,
            image_height: 480,
            feature_dim: 3,
            regions: vec![
                Region {
                    bbox: [10.5, 20.25, 100.0, 200.0],
                    score: 0.875,
                    class_id: 7,
                    tag: "dog".into(),
                    feature: vec![0.1, -2.5, 3.75],
                },
                Region {
                    bbox: [0.0, 0.0, 640.0, 480.0],
                    score: 0.25,
                    class_id: 2,
                    tag: "room".into(),
                    feature: vec![f32::MIN_POSITIVE, 0.0, -0.0],
                },
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let set = sample_set();
        let mut buf = Vec::new();
        set.write_to(&mut buf).unwrap();
        let back = RegionSet::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(set.image_id, back.image_id);
        assert_eq!(set.regions.len(), back.regions.len());
        for (a, b) in set.regions.iter().zip(back.regions.iter()) {
            for (x, y) in a.bbox.iter().zip(b.bbox.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            assert_eq!(a.score.to_bits(), b.score.to_bits());
            assert_eq!(a.class_id, b.class_id);
            assert_eq!(a.tag, b.tag);
            for (x, y) in a.feature.iter().zip(b.feature.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        // Serializing the reloaded set reproduces the same bytes.
        let mut buf2 = Vec::new();
        back.write_to(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn file_round_trip_and_empty_set() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.regions");
        let set = RegionSet {
            image_id: String::new(),
            image_width: 64,
            image_height: 64,
            feature_dim: 16,
            regions: vec![],
        };
        set.save(&path).unwrap();
        let back = RegionSet::load(&path).unwrap();
        assert_eq!(back, set);
        back.validate().unwrap();
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut buf = Vec::new();
        sample_set().write_to(&mut buf).unwrap();
        buf[0] = b'X';
        assert!(RegionSet::read_from(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut buf = Vec::new();
        sample_set().write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 5);
        assert!(RegionSet::read_from(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn trailing_bytes_are_rejected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("padded.regions");
        let mut buf = Vec::new();
        sample_set().write_to(&mut buf).unwrap();
        buf.push(0);
        std::fs::write(&path, &buf).unwrap();
        assert!(RegionSet::load(&path).is_err());
    }

    #[test]
    fn validate_catches_malformed_sets() {
        let mut set = sample_set();
        set.validate().unwrap();
        set.regions[0].score = 1.5;
        assert!(set.validate().is_err());

        let mut set = sample_set();
        set.regions[1].bbox = [50.0, 50.0, 40.0, 60.0];
        assert!(set.validate().is_err());

        let mut set = sample_set();
        set.regions.swap(0, 1); // ascending scores
        assert!(set.validate().is_err());

        let mut set = sample_set();
        set.regions[0].feature.pop();
        assert!(set.validate().is_err());
    }
}
