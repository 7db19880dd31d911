//! Directory-backed image corpora: `<root>/images/<split>/<class>/<id>.png`
//! plus a JSON-lines manifest with one record per image.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::{LabelClass, LesionBox, Provenance, Split};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub class: LabelClass,
    pub split: Split,
    #[serde(default)]
    pub boxes: Vec<LesionBox>,
    pub seed: u64,
    #[serde(default = "real")]
    pub provenance: Provenance,
    /// Intensity at or below which a pixel counts as background. `None`
    /// means the floor is unknown and Otsu thresholding is used instead.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tissue_floor: Option<u16>,
    /// For patches: the full image the patch was cut from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    /// For patches: top-left corner of the window in the source image.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<[usize; 2]>,
    /// For synthetic patches: SHA-256 of the generator checkpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<String>,
}

fn real() -> Provenance {
    Provenance::Real
}

impl ManifestRecord {
    pub fn relative_path(&self) -> PathBuf {
        Path::new("images")
            .join(self.split.as_str())
            .join(self.class.as_str())
            .join(format!("{}.png", self.id))
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Corpus {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let path = root.join(MANIFEST_FILE);
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut records = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Ok(Self { root, records })
    }

    pub fn path_of(&self, record: &ManifestRecord) -> PathBuf {
        self.root.join(record.relative_path())
    }

    pub fn load_raw(&self, record: &ManifestRecord) -> Result<Array2<u16>> {
        read_png16(self.path_of(record))
    }

    pub fn filter<'a>(
        &'a self,
        split: Option<Split>,
        class: Option<LabelClass>,
    ) -> impl Iterator<Item = &'a ManifestRecord> + 'a {
        self.records.iter().filter(move |r| {
            split.map_or(true, |s| r.split == s) && class.map_or(true, |c| r.class == c)
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Counts per class, in [`LabelClass::ALL`] order.
    pub fn class_histogram(&self) -> [usize; 4] {
        let mut hist = [0; 4];
        for r in &self.records {
            hist[r.class.ordinal() as usize] += 1;
        }
        hist
    }
}

/// Single-writer corpus builder. Images are written as they arrive; the
/// manifest is written once in `finish`.
pub struct CorpusWriter {
    root: PathBuf,
    records: Vec<ManifestRecord>,
}

impl CorpusWriter {
    pub fn create(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(root.join("images")).map_err(|e| Error::io(&root, e))?;
        Ok(Self {
            root,
            records: Vec::new(),
        })
    }

    pub fn add(&mut self, record: ManifestRecord, pixels: &Array2<u16>) -> Result<()> {
        let path = self.root.join(record.relative_path());
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_png16(&path, pixels)?;
        self.records.push(record);
        Ok(())
    }

    pub fn finish(self) -> Result<Corpus> {
        let path = self.root.join(MANIFEST_FILE);
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        file.write_all(&out).map_err(|e| Error::io(&path, e))?;
        Ok(Corpus {
            root: self.root,
            records: self.records,
        })
    }
}

pub fn write_png16(path: impl AsRef<Path>, pixels: &Array2<u16>) -> Result<()> {
    let (h, w) = pixels.dim();
    let data: Vec<u16> = pixels.iter().copied().collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(w as u32, h as u32, data)
        .ok_or_else(|| Error::Shape {
            expected: format!("{w}x{h} buffer"),
            actual: "short buffer".into(),
        })?;
    img.save(path.as_ref())?;
    Ok(())
}

pub fn read_png16(path: impl AsRef<Path>) -> Result<Array2<u16>> {
    let img = image::open(path.as_ref())?.into_luma16();
    let (w, h) = img.dimensions();
    Array2::from_shape_vec((h as usize, w as usize), img.into_raw()).map_err(|e| Error::Shape {
        expected: format!("{w}x{h}"),
        actual: e.to_string(),
    })
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let bytes = fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Content hash over the manifest and every image it references, in
/// manifest order.
pub fn corpus_hash(root: impl AsRef<Path>) -> Result<String> {
    let corpus = Corpus::open(root.as_ref())?;
    let mut hasher = Sha256::new();
    let manifest = root.as_ref().join(MANIFEST_FILE);
    hasher.update(fs::read(&manifest).map_err(|e| Error::io(&manifest, e))?);
    for r in &corpus.records {
        let p = corpus.path_of(r);
        hasher.update(fs::read(&p).map_err(|e| Error::io(&p, e))?);
    }
    Ok(hex::encode(hasher.finalize()))
}
