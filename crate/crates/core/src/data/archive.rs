//! On-disk feature archives.
//!
//! An archive is a directory holding `manifest.json` and six sibling binary
//! files, all little-endian and row-major:
//!
//! | file            | element | shape            |
//! |-----------------|---------|------------------|
//! | `audio.f32`     | f32     | N x d_in_a       |
//! | `visual.f32`    | f32     | N x d_in_v       |
//! | `text_clip.f32` | f32     | K x d_in_v       |
//! | `text_clap.f32` | f32     | K x d_in_a       |
//! | `labels.u32`    | u32     | N (class index)  |
//! | `splits.u8`     | u8      | N (split code)   |
//!
//! N and K come from the manifest and every file size is checked against them.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Matrix;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const AUDIO_FILE: &str = "audio.f32";
pub const VISUAL_FILE: &str = "visual.f32";
pub const TEXT_CLIP_FILE: &str = "text_clip.f32";
pub const TEXT_CLAP_FILE: &str = "text_clap.f32";
pub const LABELS_FILE: &str = "labels.u32";
pub const SPLITS_FILE: &str = "splits.u8";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassRole {
    TrainSeen,
    ValUnseen,
    TestUnseen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    ValS,
    ValU,
    TestS,
    TestU,
}

impl Split {
    pub const ALL: [Split; 5] = [Split::Train, Split::ValS, Split::ValU, Split::TestS, Split::TestU];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    /// The only class role a sample in this split may have.
    pub fn role(self) -> ClassRole {
        match self {
            Split::Train | Split::ValS | Split::TestS => ClassRole::TrainSeen,
            Split::ValU => ClassRole::ValUnseen,
            Split::TestU => ClassRole::TestUnseen,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub name: String,
    pub role: ClassRole,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub dataset: String,
    pub d_in_a: usize,
    pub d_in_v: usize,
    pub num_samples: usize,
    pub classes: Vec<ClassEntry>,
    /// Samples the producer dropped (e.g. undecodable media).
    #[serde(default)]
    pub skipped_samples: u64,
    /// Free-form producer identifiers, such as encoder checkpoints.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extractors: BTreeMap<String, String>,
}

impl Manifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes_with_role(&self, role: ClassRole) -> Vec<usize> {
        (0..self.classes.len())
            .filter(|&k| self.classes[k].role == role)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureArchive {
    pub manifest: Manifest,
    /// `N x d_in_a`
    pub audio: Matrix<f32>,
    /// `N x d_in_v`
    pub visual: Matrix<f32>,
    /// `K x d_in_v`
    pub text_clip: Matrix<f32>,
    /// `K x d_in_a`
    pub text_clap: Matrix<f32>,
    pub labels: Vec<u32>,
    pub splits: Vec<Split>,
}

/// Raw contents of the binary files, as read from disk.
#[derive(Debug, Clone, Copy)]
pub struct ArchiveBlobs<'a> {
    pub audio: &'a [u8],
    pub visual: &'a [u8],
    pub text_clip: &'a [u8],
    pub text_clap: &'a [u8],
    pub labels: &'a [u8],
    pub splits: &'a [u8],
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// L2-normalize every feature and text row after loading.
    pub renormalize: bool,
}

impl FeatureArchive {
    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.classes.len()
    }

    pub fn role(&self, class: usize) -> ClassRole {
        self.manifest.classes[class].role
    }

    pub fn samples_in(&self, split: Split) -> Vec<usize> {
        (0..self.splits.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn split_sizes(&self) -> BTreeMap<Split, usize> {
        let mut out: BTreeMap<Split, usize> = Split::ALL.iter().map(|&s| (s, 0)).collect();
        for s in &self.splits {
            *out.entry(*s).or_default() += 1;
        }
        out
    }

    /// Checks shapes against the manifest, finiteness, label range and
    /// split/role consistency.
    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "archive format version {} (expected {FORMAT_VERSION})",
                m.format_version
            )));
        }
        if m.d_in_a == 0 || m.d_in_v == 0 {
            return Err(Error::Format("feature dims must be positive".into()));
        }
        if m.classes.is_empty() {
            return Err(Error::Format("manifest lists no classes".into()));
        }
        let n = m.num_samples;
        let k = m.classes.len();
        for (what, mat, rows, cols) in [
            ("audio", &self.audio, n, m.d_in_a),
            ("visual", &self.visual, n, m.d_in_v),
            ("text_clip", &self.text_clip, k, m.d_in_v),
            ("text_clap", &self.text_clap, k, m.d_in_a),
        ] {
            if mat.shape() != (rows, cols) {
                return Err(Error::dim("archive", format!("{what} {}", mat.shape_str()), format!("{rows}x{cols}")));
            }
            if !mat.is_finite() {
                return Err(Error::Data(format!("{what} contains non-finite values")));
            }
        }
        if self.labels.len() != n || self.splits.len() != n {
            return Err(Error::dim("archive", "labels/splits length", n));
        }
        for (i, (&label, &split)) in self.labels.iter().zip(&self.splits).enumerate() {
            let class = m.classes.get(label as usize).ok_or_else(|| {
                Error::Data(format!("sample {i} references class {label}, archive has {k}"))
            })?;
            if class.role != split.role() {
                return Err(Error::Data(format!(
                    "sample {i} is in split {split:?} but its class {:?} has role {:?}",
                    class.name, class.role
                )));
            }
        }
        Ok(())
    }

    /// Decodes an archive from the manifest text and the raw file contents.
    pub fn decode(manifest_json: &[u8], blobs: ArchiveBlobs<'_>, options: LoadOptions) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(manifest_json)
            .map_err(|e| Error::Format(format!("{MANIFEST_FILE}: {e}")))?;
        let n = manifest.num_samples;
        let k = manifest.classes.len();
        let audio = f32_matrix(AUDIO_FILE, blobs.audio, n, manifest.d_in_a)?;
        let visual = f32_matrix(VISUAL_FILE, blobs.visual, n, manifest.d_in_v)?;
        let text_clip = f32_matrix(TEXT_CLIP_FILE, blobs.text_clip, k, manifest.d_in_v)?;
        let text_clap = f32_matrix(TEXT_CLAP_FILE, blobs.text_clap, k, manifest.d_in_a)?;
        expect_len(LABELS_FILE, blobs.labels, n, 4)?;
        let labels = blobs
            .labels
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        expect_len(SPLITS_FILE, blobs.splits, n, 1)?;
        let splits = blobs
            .splits
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                Split::from_code(c)
                    .ok_or_else(|| Error::Format(format!("{SPLITS_FILE}: unknown split code {c} at sample {i}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut archive = Self {
            manifest,
            audio,
            visual,
            text_clip,
            text_clap,
            labels,
            splits,
        };
        archive.validate()?;
        if options.renormalize {
            for m in [
                &mut archive.audio,
                &mut archive.visual,
                &mut archive.text_clip,
                &mut archive.text_clap,
            ] {
                normalize_rows(m);
            }
        }
        Ok(archive)
    }

    pub fn manifest_json(&self) -> String {
        serde_json::to_string_pretty(&self.manifest).expect("manifest serializes") + "\n"
    }

    /// Contents of each binary file, keyed by file name.
    pub fn encode_blobs(&self) -> [(&'static str, Vec<u8>); 6] {
        [
            (AUDIO_FILE, f32_bytes(self.audio.as_slice())),
            (VISUAL_FILE, f32_bytes(self.visual.as_slice())),
            (TEXT_CLIP_FILE, f32_bytes(self.text_clip.as_slice())),
            (TEXT_CLAP_FILE, f32_bytes(self.text_clap.as_slice())),
            (LABELS_FILE, self.labels.iter().flat_map(|l| l.to_le_bytes()).collect()),
            (SPLITS_FILE, self.splits.iter().map(|s| s.code()).collect()),
        ]
    }
}

/// Writes `archive` into directory `dir`, creating it if needed.
pub fn write_archive(archive: &FeatureArchive, dir: impl AsRef<Path>) -> Result<()> {
    archive.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, bytes) in archive.encode_blobs() {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, archive.manifest_json()).map_err(|e| Error::io(&path, e))
}

pub fn load_archive(dir: impl AsRef<Path>) -> Result<FeatureArchive> {
    load_archive_with(dir, LoadOptions::default())
}

pub fn load_archive_with(dir: impl AsRef<Path>, options: LoadOptions) -> Result<FeatureArchive> {
    let dir = dir.as_ref();
    let read = |name: &str| {
        let path = dir.join(name);
        fs::read(&path).map_err(|e| Error::io(path, e))
    };
    let manifest = read(MANIFEST_FILE)?;
    let audio = read(AUDIO_FILE)?;
    let visual = read(VISUAL_FILE)?;
    let text_clip = read(TEXT_CLIP_FILE)?;
    let text_clap = read(TEXT_CLAP_FILE)?;
    let labels = read(LABELS_FILE)?;
    let splits = read(SPLITS_FILE)?;
    FeatureArchive::decode(
        &manifest,
        ArchiveBlobs {
            audio: &audio,
            visual: &visual,
            text_clip: &text_clip,
            text_clap: &text_clap,
            labels: &labels,
            splits: &splits,
        },
        options,
    )
}

fn expect_len(file: &str, bytes: &[u8], count: usize, width: usize) -> Result<()> {
    let expected = (count as u64).checked_mul(width as u64);
    match expected {
        Some(e) if e == bytes.len() as u64 => Ok(()),
        _ => Err(Error::CorruptArchive {
            file: file.to_string(),
            expected: expected.unwrap_or(u64::MAX),
            actual: bytes.len() as u64,
        }),
    }
}

fn f32_matrix(file: &str, bytes: &[u8], rows: usize, cols: usize) -> Result<Matrix<f32>> {
    let count = rows.checked_mul(cols).ok_or_else(|| Error::Format(format!("{file}: shape overflows")))?;
    expect_len(file, bytes, count, 4)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

fn f32_bytes(xs: &[f32]) -> Vec<u8> {
    xs.iter().flat_map(|x| x.to_le_bytes()).collect()
}

/// Scales every nonzero row to unit L2 norm.
pub fn normalize_rows(m: &mut Matrix<f32>) {
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let norm = row.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in row {
                *x = (*x as f64 / norm) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> FeatureArchive {
        let classes = vec![
            ClassEntry { name: "dog".into(), role: ClassRole::TrainSeen },
            ClassEntry { name: "cat".into(), role: ClassRole::ValUnseen },
            ClassEntry { name: "owl".into(), role: ClassRole::TestUnseen },
        ];
        FeatureArchive {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                dataset: "tiny".into(),
                d_in_a: 3,
                d_in_v: 2,
                num_samples: 4,
                classes,
                skipped_samples: 1,
                extractors: BTreeMap::from([("audio".into(), "enc-v1".into())]),
            },
            audio: Matrix::from_vec(4, 3, (0..12).map(|i| i as f32 * 0.5 - 2.0).collect()).unwrap(),
            visual: Matrix::from_vec(4, 2, vec![0.1, -0.0, f32::MIN_POSITIVE, 3.0, 1e-30, 7.0, -1.5, 0.25]).unwrap(),
            text_clip: Matrix::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.6, 0.8]).unwrap(),
            text_clap: Matrix::from_vec(3, 3, vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap(),
            labels: vec![0, 0, 1, 2],
            splits: vec![Split::Train, Split::TestS, Split::ValU, Split::TestU],
        }
    }

    #[test]
    fn write_then_load_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let a = tiny();
        write_archive(&a, dir.path()).unwrap();
        let b = load_archive(dir.path()).unwrap();
        assert_eq!(a, b);
        // -0.0 == 0.0 under PartialEq, so compare the bytes too
        assert_eq!(a.encode_blobs(), b.encode_blobs());
    }

    #[test]
    fn truncated_audio_names_byte_counts() {
        let dir = tempfile::tempdir().unwrap();
        write_archive(&tiny(), dir.path()).unwrap();
        let path = dir.path().join(AUDIO_FILE);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        match load_archive(dir.path()) {
            Err(Error::CorruptArchive { file, expected, actual }) => {
                assert_eq!(file, AUDIO_FILE);
                assert_eq!((expected, actual), (48, 44));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_split_code_is_a_format_error() {
        let a = tiny();
        let blobs = a.encode_blobs();
        let mut splits = blobs[5].1.clone();
        splits[2] = 9;
        let err = FeatureArchive::decode(
            a.manifest_json().as_bytes(),
            ArchiveBlobs {
                audio: &blobs[0].1,
                visual: &blobs[1].1,
                text_clip: &blobs[2].1,
                text_clap: &blobs[3].1,
                labels: &blobs[4].1,
                splits: &splits,
            },
            LoadOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Format(ref m) if m.contains("unknown split code 9")), "{err}");
    }

    #[test]
    fn role_mismatch_and_bad_labels_are_rejected() {
        let mut a = tiny();
        a.splits[0] = Split::ValU;
        assert!(matches!(a.validate(), Err(Error::Data(_))));
        let mut a = tiny();
        a.labels[1] = 3;
        assert!(matches!(a.validate(), Err(Error::Data(_))));
        let mut a = tiny();
        a.audio.as_mut_slice()[0] = f32::NAN;
        assert!(a.validate().is_err());
        let dir = tempfile::tempdir().unwrap();
        assert!(write_archive(&a, dir.path()).is_err());
    }

    #[test]
    fn unknown_manifest_field_is_rejected() {
        let a = tiny();
        let mut json: serde_json::Value = serde_json::from_str(&a.manifest_json()).unwrap();
        json["surprise"] = 1.into();
        let blobs = a.encode_blobs();
        let err = FeatureArchive::decode(
            json.to_string().as_bytes(),
            ArchiveBlobs {
                audio: &blobs[0].1,
                visual: &blobs[1].1,
                text_clip: &blobs[2].1,
                text_clap: &blobs[3].1,
                labels: &blobs[4].1,
                splits: &blobs[5].1,
            },
            LoadOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn renormalize_makes_rows_unit_length() {
        let dir = tempfile::tempdir().unwrap();
        write_archive(&tiny(), dir.path()).unwrap();
        let b = load_archive_with(dir.path(), LoadOptions { renormalize: true }).unwrap();
        for row in b.audio.row_iter() {
            let n: f32 = row.iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-5);
        }
        assert_eq!(b.text_clip, tiny().text_clip);
    }

    #[test]
    fn split_codes_round_trip() {
        for s in Split::ALL {
            assert_eq!(Split::from_code(s.code()), Some(s));
        }
        assert_eq!(Split::from_code(5), None);
    }
}
