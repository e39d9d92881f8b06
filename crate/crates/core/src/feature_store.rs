//! On-disk feature container (EAIF) and JSON-lines dataset manifests.
//!
//! EAIF layout, little-endian:
//!
//! ```text
//! "EAIF" | version u32 = 1 | T u32 | d_e u32 | d_a u32 | label u8 (0 bonafide, 1 spoof)
//! | id_len u16 | id bytes (UTF-8)
//! | emo_frames T·d_e f64 (row-major) | emo_utt d_e f64 | acu_frames T·d_a f64 (row-major)
//! ```

use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const EAIF_MAGIC: [u8; 4] = *b"EAIF";
pub const EAIF_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Bonafide,
    Spoof,
}

impl Label {
    pub fn code(self) -> u8 {
        match self {
            Label::Bonafide => 0,
            Label::Spoof => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Label::Bonafide),
            1 => Some(Label::Spoof),
            _ => None,
        }
    }

    /// Index of this class in the classifier's logit vector.
    pub fn class_index(self) -> usize {
        self.code() as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Bonafide => "bonafide",
            Label::Spoof => "spoof",
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Frame- and utterance-level features of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub id: String,
    /// `T × d_e` frame-level emotion features.
    pub emo_frames: Matrix,
    /// `d_e` utterance-level emotion embedding.
    pub emo_utt: Vec<f64>,
    /// `T × d_a` frame-level acoustic features.
    pub acu_frames: Matrix,
    pub label: Label,
}

impl FeatureBundle {
    pub fn frames(&self) -> usize {
        self.emo_frames.rows()
    }

    pub fn emo_dim(&self) -> usize {
        self.emo_frames.cols()
    }

    pub fn acu_dim(&self) -> usize {
        self.acu_frames.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.emo_frames.rows();
        if t < 2 {
            return Err(Error::TooFewFrames(t));
        }
        if self.acu_frames.rows() != t {
            return Err(Error::DimensionMismatch {
                context: "acoustic frame count",
                expected: t,
                actual: self.acu_frames.rows(),
            });
        }
        if self.emo_utt.len() != self.emo_frames.cols() {
            return Err(Error::DimensionMismatch {
                context: "utterance emotion dimension",
                expected: self.emo_frames.cols(),
                actual: self.emo_utt.len(),
            });
        }
        if self.id.len() > u16::MAX as usize {
            return Err(Error::InvalidConfig(format!(
                "bundle id is {} bytes, limit is {}",
                self.id.len(),
                u16::MAX
            )));
        }
        if !self.emo_frames.is_finite() {
            return Err(Error::NonFinite("emo_frames"));
        }
        if !self.emo_utt.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("emo_utt"));
        }
        if !self.acu_frames.is_finite() {
            return Err(Error::NonFinite("acu_frames"));
        }
        Ok(())
    }

    /// Serializes to EAIF bytes after validating.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let (t, de, da) = (self.frames(), self.emo_dim(), self.acu_dim());
        let mut out = Vec::with_capacity(23 + self.id.len() + 8 * (t * de + de + t * da));
        out.extend_from_slice(&EAIF_MAGIC);
        out.extend_from_slice(&EAIF_VERSION.to_le_bytes());
        for dim in [t, de, da] {
            let dim = u32::try_from(dim)
                .map_err(|_| Error::InvalidConfig(format!("dimension {dim} exceeds u32")))?;
            out.extend_from_slice(&dim.to_le_bytes());
        }
        out.push(self.label.code());
        out.extend_from_slice(&(self.id.len() as u16).to_le_bytes());
        out.extend_from_slice(self.id.as_bytes());
        let payload = self
            .emo_frames
            .as_slice()
            .iter()
            .chain(&self.emo_utt)
            .chain(self.acu_frames.as_slice());
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    /// Parses and validates EAIF bytes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != EAIF_MAGIC {
            return Err(Error::BadMagic {
                expected: EAIF_MAGIC,
                found: magic,
            });
        }
        let version = r.u32("version")?;
        if version != EAIF_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let t = r.u32("frame count")? as usize;
        let de = r.u32("emotion dimension")? as usize;
        let da = r.u32("acoustic dimension")? as usize;
        let code = r.take(1, "label")?[0];
        let label = Label::from_code(code)
            .ok_or_else(|| Error::Format(format!("unknown label code {code}")))?;
        let id_len = u16::from_le_bytes(r.take(2, "id length")?.try_into().expect("2 bytes"));
        let id = std::str::from_utf8(r.take(id_len as usize, "id")?)
            .map_err(|e| Error::Format(format!("id is not UTF-8: {e}")))?
            .to_owned();
        if t < 2 {
            return Err(Error::TooFewFrames(t));
        }
        let emo_frames = Matrix::from_vec(t, de, r.f64s(t * de, "emotion frames")?);
        let emo_utt = r.f64s(de, "utterance emotion")?;
        let acu_frames = Matrix::from_vec(t, da, r.f64s(t * da, "acoustic frames")?);
        if r.remaining() != 0 {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                r.remaining()
            )));
        }
        let bundle = FeatureBundle {
            id,
            emo_frames,
            emo_utt,
            acu_frames,
            label,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated(what));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f64s(&mut self, n: usize, what: &'static str) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or(Error::Truncated(what))?;
        let raw = self.take(len, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn save_bundle(bundle: &FeatureBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = bundle.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<FeatureBundle> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureBundle::from_bytes(&bytes)
}

/// One manifest line: `{"id":..., "path":..., "label":...}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub label: Label,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Generator seed, 0 for external data. Not stored in the JSON-lines file.
    pub seed: u64,
}

impl DatasetManifest {
    /// Parses JSON-lines text. Blank lines are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| Error::Manifest {
                line: i + 1,
                message: e.to_string(),
            })?;
            if !seen.insert(entry.id.clone()) {
                return Err(Error::DuplicateId(entry.id));
            }
            entries.push(entry);
        }
        Ok(Self { entries, seed: 0 })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut text = String::new();
        for line in BufReader::new(file).lines() {
            text.push_str(&line.map_err(|e| Error::io(path, e))?);
            text.push('\n');
        }
        Self::parse(&text)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("manifest entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let write = || -> io::Result<()> {
            let mut f = fs::File::create(path)?;
            f.write_all(self.to_jsonl().as_bytes())?;
            f.sync_all()
        };
        write().map_err(|e| Error::io(path, e))
    }

    /// Reads every bundle, resolving relative paths against `base_dir`.
    ///
    /// The bundle's own id and label must agree with its manifest entry.
    pub fn load_bundles(&self, base_dir: &Path) -> Result<Vec<FeatureBundle>> {
        self.entries
            .iter()
            .map(|entry| {
                let wrap = |source: Error| Error::Bundle {
                    id: entry.id.clone(),
                    source: Box::new(source),
                };
                let path = if entry.path.is_absolute() {
                    entry.path.clone()
                } else {
                    base_dir.join(&entry.path)
                };
                let bundle = load_bundle(&path).map_err(wrap)?;
                if bundle.id != entry.id {
                    return Err(wrap(Error::Format(format!(
                        "file holds id {:?}",
                        bundle.id
                    ))));
                }
                if bundle.label != entry.label {
                    return Err(wrap(Error::Format(format!(
                        "file labelled {}, manifest says {}",
                        bundle.label, entry.label
                    ))));
                }
                Ok(bundle)
            })
            .collect()
    }
}

/// Loads every bundle listed in a manifest file, in manifest order.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<FeatureBundle>> {
    let path = path.as_ref();
    let manifest = DatasetManifest::read(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    manifest.load_bundles(base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn zero_bundle() -> FeatureBundle {
        FeatureBundle {
            id: "z".into(),
            emo_frames: Matrix::zeros(2, 1),
            emo_utt: vec![0.0],
            acu_frames: Matrix::zeros(2, 1),
            label: Label::Bonafide,
        }
    }

    pub(crate) fn random_bundle(seed: u64, t: usize, de: usize, da: usize) -> FeatureBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<_>>();
        FeatureBundle {
            id: format!("rand-{seed}"),
            emo_frames: Matrix::from_vec(t, de, draw(t * de)),
            emo_utt: draw(de),
            acu_frames: Matrix::from_vec(t, da, draw(t * da)),
            label: if seed % 2 == 0 { Label::Bonafide } else { Label::Spoof },
        }
    }

    #[test]
    fn minimal_bundle_layout() {
        let b = zero_bundle();
        let bytes = b.to_bytes().unwrap();
        let header = 4 + 4 + 12 + 1 + 2 + 1;
        assert_eq!(bytes.len(), header + 5 * 8);
        assert_eq!(FeatureBundle::from_bytes(&bytes).unwrap(), b);
    }

    #[test]
    fn nan_rejected_before_write() {
        let mut b = zero_bundle();
        b.acu_frames[(1, 0)] = f64::NAN;
        let err = b.to_bytes().unwrap_err();
        assert!(err.to_string().contains("non-finite value"), "{err}");
    }

    #[test]
    fn random_bundle_roundtrip_is_exact() {
        let b = random_bundle(7, 64, 16, 16);
        let back = FeatureBundle::from_bytes(&b.to_bytes().unwrap()).unwrap();
        for (x, y) in b.emo_frames.as_slice().iter().zip(back.emo_frames.as_slice()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in b.acu_frames.as_slice().iter().zip(back.acu_frames.as_slice()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(b, back);
    }

    #[test]
    fn corrupt_magic() {
        let mut bytes = zero_bundle().to_bytes().unwrap();
        bytes[0] = b'X';
        let err = FeatureBundle::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn wrong_version() {
        let mut bytes = zero_bundle().to_bytes().unwrap();
        bytes[4] = 2;
        let err = FeatureBundle::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("unsupported version"), "{err}");
    }

    #[test]
    fn truncated_by_one_value() {
        let bytes = random_bundle(3, 5, 2, 3).to_bytes().unwrap();
        let err = FeatureBundle::from_bytes(&bytes[..bytes.len() - 8]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn single_frame_rejected() {
        let mut bytes = zero_bundle().to_bytes().unwrap();
        bytes[8] = 1;
        let err = FeatureBundle::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("T < 2"), "{err}");
    }

    #[test]
    fn mismatched_frame_counts_rejected() {
        let mut b = zero_bundle();
        b.acu_frames = Matrix::zeros(3, 1);
        assert!(matches!(b.validate(), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn manifest_rejects_duplicate_ids() {
        let text = r#"{"id":"a","path":"a.eaif","label":"spoof"}
{"id":"a","path":"b.eaif","label":"bonafide"}"#;
        assert!(matches!(DatasetManifest::parse(text), Err(Error::DuplicateId(_))));
    }

    #[test]
    fn manifest_jsonl_shape() {
        let m = DatasetManifest {
            entries: vec![ManifestEntry {
                id: "u1".into(),
                path: "u1.eaif".into(),
                label: Label::Spoof,
            }],
            seed: 0,
        };
        assert_eq!(
            m.to_jsonl(),
            "{\"id\":\"u1\",\"path\":\"u1.eaif\",\"label\":\"spoof\"}\n"
        );
        assert_eq!(DatasetManifest::parse(&m.to_jsonl()).unwrap(), m);
    }
}
