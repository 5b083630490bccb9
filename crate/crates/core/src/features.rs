//! Feature containers and dataset manifests.
//!
//! A feature file stores one record's clip-structured appearance and motion
//! features:
//!
//! ```text
//! b"CMFB" | u32 version=1 | u32 N | u32 T | u32 d_app | u32 d_mot   (little endian)
//! f32 × (N·T·d_app)   appearance, row-major (clip, frame, channel)
//! f32 × (N·d_mot)     motion, row-major (clip, channel)
//! ```
//!
//! A dataset directory holds `manifest.json` plus `features/<record_id>.cmfb`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};

pub const MAGIC: &[u8; 4] = b"CMFB";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 4 + 5 * 4;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FEATURE_DIR: &str = "features";

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub record_id: String,
    /// `N_clips × T_frames × d_app_raw`
    pub appearance: Array3<f32>,
    /// `N_clips × d_mot_raw`
    pub motion: Array2<f32>,
}

impl FeatureRecord {
    pub fn n_clips(&self) -> usize {
        self.appearance.dim().0
    }

    pub fn frames_per_clip(&self) -> usize {
        self.appearance.dim().1
    }

    /// `(d_app_raw, d_mot_raw)`
    pub fn dims(&self) -> (usize, usize) {
        (self.appearance.dim().2, self.motion.dim().1)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, t, _) = self.appearance.dim();
        if n == 0 || t == 0 {
            return Err(validation(format!(
                "record {} needs at least one clip and one frame",
                self.record_id
            )));
        }
        if self.motion.nrows() != n {
            return Err(validation(format!(
                "record {}: motion has {} clips, appearance has {n}",
                self.record_id,
                self.motion.nrows()
            )));
        }
        let finite = self.appearance.iter().chain(self.motion.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(validation(format!(
                "record {} contains non-finite values",
                self.record_id
            )));
        }
        Ok(())
    }

    /// Appearance flattened to `(N·T) × d_app_raw`, clip-major, in `f64`.
    pub fn appearance_rows(&self) -> Array2<f64> {
        let (n, t, d) = self.appearance.dim();
        Array2::from_shape_fn((n * t, d), |(r, c)| self.appearance[[r / t, r % t, c]] as f64)
    }

    pub fn motion_rows(&self) -> Array2<f64> {
        self.motion.mapv(|v| v as f64)
    }
}

/// Number of payload bytes implied by the header fields.
pub fn payload_len(n: usize, t: usize, d_app: usize, d_mot: usize) -> usize {
    4 * (n * t * d_app + n * d_mot)
}

pub fn encode_feature_record(record: &FeatureRecord) -> Result<Vec<u8>> {
    record.validate()?;
    let (n, t, d_app) = record.appearance.dim();
    let d_mot = record.motion.ncols();
    let mut buf = Vec::with_capacity(HEADER_LEN + payload_len(n, t, d_app, d_mot));
    buf.extend_from_slice(MAGIC);
    for v in [VERSION as usize, n, t, d_app, d_mot] {
        let v = u32::try_from(v).map_err(|_| validation("dimension exceeds u32"))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in record.appearance.iter().chain(record.motion.iter()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_feature_record(record_id: &str, bytes: &[u8]) -> Result<FeatureRecord> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("{record_id}: missing CMFB magic")));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Corruption(format!("{record_id}: truncated header")));
    }
    let word = |i: usize| {
        let o = 4 + 4 * i;
        u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize
    };
    let version = word(0);
    if version != VERSION as usize {
        return Err(Error::Format(format!(
            "{record_id}: unsupported version {version}"
        )));
    }
    let (n, t, d_app, d_mot) = (word(1), word(2), word(3), word(4));
    let expected = payload_len(n, t, d_app, d_mot);
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::Corruption(format!(
            "{record_id}: payload is {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let mut floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let appearance: Vec<f32> = floats.by_ref().take(n * t * d_app).collect();
    let motion: Vec<f32> = floats.collect();
    let record = FeatureRecord {
        record_id: record_id.to_string(),
        appearance: Array3::from_shape_vec((n, t, d_app), appearance)
            .map_err(|e| Error::Corruption(e.to_string()))?,
        motion: Array2::from_shape_vec((n, d_mot), motion)
            .map_err(|e| Error::Corruption(e.to_string()))?,
    };
    record.validate()?;
    Ok(record)
}

pub fn write_feature_file(record: &FeatureRecord, path: &Path) -> Result<()> {
    let bytes = encode_feature_record(record)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: &Path) -> Result<FeatureRecord> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string();
    decode_feature_record(&id, &bytes)
}

/// Reads a feature file and checks its raw dims against a manifest header.
pub fn read_feature_file_checked(path: &Path, dims: (usize, usize)) -> Result<FeatureRecord> {
    let record = read_feature_file(path)?;
    if record.dims() != dims {
        return Err(Error::DimensionMismatch(format!(
            "{}: file dims {:?}, manifest dims {:?}",
            path.display(),
            record.dims(),
            dims
        )));
    }
    Ok(record)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    #[default]
    OpenEnded,
    MultiChoice,
    Counting,
}

/// Generator-side latent variables, kept so bias splits can be rebuilt.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentInfo {
    pub event: u32,
    pub motif: u32,
    pub nuisance: u32,
    pub subject: u32,
    pub object: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub record_id: String,
    pub question: String,
    #[serde(default)]
    pub candidates: Option<Vec<String>>,
    /// Class label, index of the correct candidate, or count.
    pub answer: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent: Option<LatentInfo>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub task_type: TaskType,
    pub entries: Vec<ManifestEntry>,
    pub splits: BTreeMap<String, Vec<usize>>,
    /// `(d_app_raw, d_mot_raw)`
    pub feature_dims: (usize, usize),
}

impl DatasetManifest {
    pub fn split(&self, name: &str) -> Result<&[usize]> {
        self.splits
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| validation(format!("unknown split {name}")))
    }

    pub fn validate(&self) -> Result<()> {
        for (i, e) in self.entries.iter().enumerate() {
            match self.task_type {
                TaskType::MultiChoice => {
                    let c = e.candidates.as_ref().map_or(0, Vec::len);
                    if c < 2 {
                        return Err(validation(format!(
                            "entry {i}: multi-choice needs at least 2 candidates, has {c}"
                        )));
                    }
                    if e.answer as usize >= c {
                        return Err(validation(format!(
                            "entry {i}: correct candidate {} out of range",
                            e.answer
                        )));
                    }
                }
                TaskType::OpenEnded | TaskType::Counting => {}
            }
        }
        for (name, idx) in &self.splits {
            if let Some(bad) = idx.iter().find(|&&i| i >= self.entries.len()) {
                return Err(validation(format!("split {name} references entry {bad}")));
            }
        }
        Ok(())
    }

    /// Checks that every record id resolves to a feature file under `dir`.
    pub fn check_features(&self, dir: &Path) -> Result<()> {
        for e in &self.entries {
            let p = feature_path(dir, &e.record_id);
            if !p.is_file() {
                return Err(validation(format!(
                    "record {} has no feature file at {}",
                    e.record_id,
                    p.display()
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn feature_path(dataset_dir: &Path, record_id: &str) -> PathBuf {
    dataset_dir.join(FEATURE_DIR).join(format!("{record_id}.cmfb"))
}

pub fn write_dataset(dir: &Path, manifest: &DatasetManifest, records: &[FeatureRecord]) -> Result<()> {
    manifest.validate()?;
    let fdir = dir.join(FEATURE_DIR);
    fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
    for r in records {
        write_feature_file(r, &feature_path(dir, &r.record_id))?;
    }
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, manifest.to_json()?).map_err(|e| Error::io(&mpath, e))
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    manifest.validate()?;
    manifest.check_features(dir)?;
    Ok(manifest)
}

/// Loads every record named by the manifest, in entry order.
pub fn load_records(dir: &Path, manifest: &DatasetManifest) -> Result<Vec<FeatureRecord>> {
    manifest
        .entries
        .iter()
        .map(|e| read_feature_file_checked(&feature_path(dir, &e.record_id), manifest.feature_dims))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> FeatureRecord {
        FeatureRecord {
            record_id: "r0".into(),
            appearance: Array3::from_shape_fn((3, 2, 5), |(a, b, c)| (a * 10 + b) as f32 + c as f32 * 0.5),
            motion: Array2::from_shape_fn((3, 4), |(a, b)| a as f32 - b as f32 * 0.25),
        }
    }

    #[test]
    fn header_and_payload_layout() {
        let bytes = encode_feature_record(&record()).unwrap();
        assert_eq!(&bytes[..4], b"CMFB");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(bytes.len() - HEADER_LEN, 4 * (3 * 2 * 5 + 3 * 4));
        // first appearance float, then first motion float right after the block
        let first = f32::from_le_bytes(bytes[HEADER_LEN..HEADER_LEN + 4].try_into().unwrap());
        assert_eq!(first, 0.0);
        let off = HEADER_LEN + 4 * 30;
        let m0 = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        assert_eq!(m0, 0.0);
        let m1 = f32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap());
        assert_eq!(m1, -0.25);
    }

    #[test]
    fn file_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r0.cmfb");
        write_feature_file(&record(), &p).unwrap();
        assert_eq!(read_feature_file(&p).unwrap(), record());

        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_feature_file(&p), Err(Error::Corruption(_))));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&p, &bad).unwrap();
        assert!(matches!(read_feature_file(&p), Err(Error::Format(_))));

        let mut v2 = bytes.clone();
        v2[4] = 2;
        fs::write(&p, &v2).unwrap();
        assert!(matches!(read_feature_file(&p), Err(Error::Format(_))));

        fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            read_feature_file_checked(&p, (5, 5)),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(read_feature_file_checked(&p, (5, 4)).is_ok());
    }

    #[test]
    fn rejects_non_finite_and_empty() {
        let mut r = record();
        r.motion[[0, 0]] = f32::NAN;
        assert!(encode_feature_record(&r).is_err());
        let empty = FeatureRecord {
            record_id: "e".into(),
            appearance: Array3::zeros((0, 1, 2)),
            motion: Array2::zeros((0, 2)),
        };
        assert!(empty.validate().is_err());
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let err = write_feature_file(&record(), Path::new("/nonexistent-dir/x/r0.cmfb")).unwrap_err();
        assert_eq!(err.category(), "io");
    }

    #[test]
    fn manifest_validation() {
        let mut m = DatasetManifest {
            task_type: TaskType::MultiChoice,
            entries: vec![ManifestEntry {
                record_id: "a".into(),
                question: "q".into(),
                candidates: Some(vec!["x".into()]),
                answer: 0,
                latent: None,
            }],
            splits: BTreeMap::new(),
            feature_dims: (4, 4),
        };
        assert!(m.validate().is_err());
        m.entries[0].candidates = Some(vec!["x".into(), "y".into()]);
        assert!(m.validate().is_ok());
        m.entries[0].answer = 2;
        assert!(m.validate().is_err());
        m.entries[0].answer = 1;
        m.splits.insert("train".into(), vec![3]);
        assert!(m.validate().is_err());
    }
}
