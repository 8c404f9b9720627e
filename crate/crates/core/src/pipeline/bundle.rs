//! Self-describing dataset bundles (`.htrb`) and corpus ingestion.
//!
//! Layout, all integers little-endian:
//!   magic "HTRB" | version u32 | manifest_len u32 | manifest JSON (UTF-8)
//!   then per sample: id_len u32, id bytes, label_count u32, label u32[],
//!   png_len u32, PNG bytes of the preprocessed grayscale image.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::charset::Charset;
use super::preprocess::{preprocess, RawImage};
use crate::ctc::LabelSeq;
use crate::error::{Error, Result};
use crate::metrics::nfc;

pub const BUNDLE_MAGIC: &[u8; 4] = b"HTRB";
pub const BUNDLE_VERSION: u32 = 1;

/// One preprocessed sample: the image is already at the configured input
/// size; the label indexes the bundle's charset.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: LabelSeq,
    pub image: RawImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub split: String,
    pub sample_count: u32,
    pub charset: String,
    pub charset_hash: String,
    pub image_width: u32,
    pub image_height: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub manifest: BundleManifest,
    pub samples: Vec<Sample>,
}

impl DatasetBundle {
    pub fn charset(&self) -> Result<Charset> {
        Charset::from_text(&self.manifest.charset)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(BUNDLE_MAGIC)?;
        w.write_all(&BUNDLE_VERSION.to_le_bytes())?;
        let manifest = serde_json::to_vec(&self.manifest)
            .map_err(|e| Error::Format { path: "<manifest>".into(), msg: e.to_string() })?;
        w.write_all(&(manifest.len() as u32).to_le_bytes())?;
        w.write_all(&manifest)?;
        for s in &self.samples {
            let id = s.id.as_bytes();
            w.write_all(&(id.len() as u32).to_le_bytes())?;
            w.write_all(id)?;
            w.write_all(&(s.label.len() as u32).to_le_bytes())?;
            for &i in s.label.indices() {
                w.write_all(&(i as u32).to_le_bytes())?;
            }
            let png = encode_png(&s.image)?;
            w.write_all(&(png.len() as u32).to_le_bytes())?;
            w.write_all(&png)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<DatasetBundle> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&bytes, &path.display().to_string())
    }

    pub fn read_from(bytes: &[u8], origin: &str) -> Result<DatasetBundle> {
        let bad = |msg: &str| Error::Format { path: origin.to_string(), msg: msg.to_string() };
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != BUNDLE_MAGIC {
            return Err(bad("not an HTRB bundle"));
        }
        let version = read_u32(&mut cur).map_err(|_| bad("truncated version"))?;
        if version != BUNDLE_VERSION {
            return Err(bad(&format!("unsupported bundle version {version}")));
        }
        let mlen = read_u32(&mut cur).map_err(|_| bad("truncated manifest length"))? as usize;
        let mut mbytes = vec![0u8; mlen];
        cur.read_exact(&mut mbytes).map_err(|_| bad("truncated manifest"))?;
        let manifest: BundleManifest = serde_json::from_slice(&mbytes)
            .map_err(|e| bad(&format!("manifest JSON: {e}")))?;
        let charset = Charset::from_text(&manifest.charset)?;
        if charset.hash_hex() != manifest.charset_hash {
            return Err(bad("charset hash does not match charset"));
        }

        let mut samples = Vec::with_capacity(manifest.sample_count as usize);
        for i in 0..manifest.sample_count {
            let more = |what: &str| bad(&format!("sample {i}: truncated {what}"));
            let id_len = read_u32(&mut cur).map_err(|_| more("id length"))? as usize;
            let mut id = vec![0u8; id_len];
            cur.read_exact(&mut id).map_err(|_| more("id"))?;
            let id = String::from_utf8(id).map_err(|_| bad(&format!("sample {i}: id is not UTF-8")))?;
            let label_len = read_u32(&mut cur).map_err(|_| more("label length"))? as usize;
            let mut indices = Vec::with_capacity(label_len);
            for _ in 0..label_len {
                indices.push(read_u32(&mut cur).map_err(|_| more("label"))? as usize);
            }
            let label = LabelSeq::new(indices, charset.len())?;
            let png_len = read_u32(&mut cur).map_err(|_| more("png length"))? as usize;
            let mut png = vec![0u8; png_len];
            cur.read_exact(&mut png).map_err(|_| more("png bytes"))?;
            let image = decode_png(&png)?;
            if image.width != manifest.image_width as usize
                || image.height != manifest.image_height as usize
            {
                return Err(bad(&format!(
                    "sample {id}: image is {}x{}, manifest says {}x{}",
                    image.width, image.height, manifest.image_width, manifest.image_height
                )));
            }
            samples.push(Sample { id, label, image });
        }
        if cur.position() != bytes.len() as u64 {
            return Err(bad("trailing bytes after last sample"));
        }
        Ok(DatasetBundle { manifest, samples })
    }
}

fn read_u32(cur: &mut Cursor<&[u8]>) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    cur.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn encode_png(img: &RawImage) -> Result<Vec<u8>> {
    let gray = image::GrayImage::from_raw(img.width as u32, img.height as u32, img.pixels.clone())
        .ok_or_else(|| Error::Image("raw image buffer mismatch".into()))?;
    let mut buf = Vec::new();
    image::DynamicImage::ImageLuma8(gray)
        .write_to(&mut Cursor::new(&mut buf), image::ImageFormat::Png)?;
    Ok(buf)
}

pub fn decode_png(bytes: &[u8]) -> Result<RawImage> {
    let img = image::load_from_memory(bytes)?.into_luma8();
    RawImage::new(img.width() as usize, img.height() as usize, img.into_raw())
}

/// Load any supported image file as grayscale.
pub fn load_image(path: &Path) -> Result<RawImage> {
    let img = image::open(path)?.into_luma8();
    RawImage::new(img.width() as usize, img.height() as usize, img.into_raw())
}

pub fn save_png(img: &RawImage, path: &Path) -> Result<()> {
    std::fs::write(path, encode_png(img)?)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Corpus ingestion and splits
// ---------------------------------------------------------------------------

/// One line of `labels.tsv` resolved to its image file.
#[derive(Debug, Clone)]
pub struct CorpusEntry {
    pub id: String,
    pub transcript: String,
    pub image_path: PathBuf,
}

/// Read `labels.tsv` (id TAB transcript) and resolve `<id>.png` / `<id>.pgm`.
pub fn load_corpus_index(dir: &Path) -> Result<Vec<CorpusEntry>> {
    let labels = dir.join("labels.tsv");
    let text = std::fs::read_to_string(&labels)
        .map_err(|e| Error::Corpus(format!("cannot read {}: {e}", labels.display())))?;
    let mut by_id: BTreeMap<String, CorpusEntry> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, transcript) = line.split_once('\t').ok_or_else(|| {
            Error::Corpus(format!("{}:{}: expected 'id<TAB>transcript'", labels.display(), lineno + 1))
        })?;
        if id.is_empty() {
            return Err(Error::Corpus(format!("{}:{}: empty id", labels.display(), lineno + 1)));
        }
        let image_path = ["png", "pgm"]
            .iter()
            .map(|ext| dir.join(format!("{id}.{ext}")))
            .find(|p| p.exists())
            .ok_or_else(|| Error::Corpus(format!("no image file for sample id {id:?} in {}", dir.display())))?;
        let entry = CorpusEntry {
            id: id.to_string(),
            transcript: transcript.to_string(),
            image_path,
        };
        if by_id.insert(entry.id.clone(), entry).is_some() {
            return Err(Error::Corpus(format!("duplicate sample id {id:?}")));
        }
    }
    if by_id.is_empty() {
        return Err(Error::Corpus(format!("corpus {} has no samples", dir.display())));
    }
    Ok(by_id.into_values().collect())
}

/// Named split fractions plus the word-disjointness option for the last
/// split (which then becomes `<name>1` / `<name>2`).
#[derive(Debug, Clone)]
pub struct SplitSpec {
    pub names: Vec<String>,
    pub fractions: Vec<f64>,
    pub word_disjoint_test: bool,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.names.is_empty() || self.names.len() != self.fractions.len() {
            return Err(Error::Config(format!(
                "split names ({}) and fractions ({}) must align and be non-empty",
                self.names.len(),
                self.fractions.len()
            )));
        }
        let uniq: BTreeSet<&String> = self.names.iter().collect();
        if uniq.len() != self.names.len() {
            return Err(Error::Config("split names must be unique".into()));
        }
        if self.fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) {
            return Err(Error::Config("split fractions must lie in [0,1]".into()));
        }
        let sum: f64 = self.fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {sum}, expected 1")));
        }
        Ok(())
    }

    /// Deterministic sizes: earlier splits floor, the last takes the rest.
    pub fn counts(&self, n: usize) -> Vec<usize> {
        let mut counts = Vec::with_capacity(self.names.len());
        let mut used = 0;
        for (i, &f) in self.fractions.iter().enumerate() {
            if i + 1 == self.fractions.len() {
                counts.push(n - used);
            } else {
                let c = ((n as f64) * f + 1e-9).floor() as usize;
                counts.push(c.min(n - used));
                used += counts[i];
            }
        }
        counts
    }
}

#[derive(Debug, Clone)]
pub struct BundleSummary {
    pub split: String,
    pub path: PathBuf,
    pub sample_count: usize,
}

/// Build one bundle file per split from a corpus directory: preprocess every
/// image, encode every transcript, split by a seeded shuffle of sample ids.
pub fn build_bundles(
    corpus_dir: &Path,
    out_dir: &Path,
    charset: &Charset,
    spec: &SplitSpec,
    target_w: usize,
    target_h: usize,
) -> Result<Vec<BundleSummary>> {
    spec.validate()?;
    let entries = load_corpus_index(corpus_dir)?;

    // encode transcripts first so that charset errors surface before the
    // (expensive) image work, naming the offending sample
    let mut labels = Vec::with_capacity(entries.len());
    for e in &entries {
        let label = charset.encode(&e.transcript).map_err(|err| {
            Error::Corpus(format!("sample {:?}: {err}", e.id))
        })?;
        labels.push(label);
    }

    let processed: Vec<Result<Sample>> = entries
        .par_iter()
        .zip(labels.par_iter())
        .map(|(e, label)| {
            let raw = load_image(&e.image_path)
                .map_err(|err| Error::Corpus(format!("sample {:?}: {err}", e.id)))?;
            Ok(Sample {
                id: e.id.clone(),
                label: label.clone(),
                image: preprocess(&raw, target_w, target_h),
            })
        })
        .collect();
    let mut samples = Vec::with_capacity(processed.len());
    for s in processed {
        samples.push(s?);
    }

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    order.shuffle(&mut rng);

    let counts = spec.counts(samples.len());
    let mut assigned: Vec<(String, Vec<usize>)> = Vec::new();
    let mut cursor = 0;
    for (name, &count) in spec.names.iter().zip(&counts) {
        assigned.push((name.clone(), order[cursor..cursor + count].to_vec()));
        cursor += count;
    }

    if spec.word_disjoint_test {
        let (last_name, last_idx) = assigned.pop().expect("validated non-empty");
        let seen: BTreeSet<String> = assigned
            .iter()
            .flat_map(|(_, idx)| idx.iter())
            .map(|&i| nfc(&entries[i].transcript))
            .collect();
        let (disjoint, rest): (Vec<usize>, Vec<usize>) = last_idx
            .into_iter()
            .partition(|&i| !seen.contains(&nfc(&entries[i].transcript)));
        assigned.push((format!("{last_name}1"), disjoint));
        assigned.push((format!("{last_name}2"), rest));
    }

    std::fs::create_dir_all(out_dir)?;
    let mut summaries = Vec::new();
    for (name, idx) in assigned {
        let bundle = DatasetBundle {
            manifest: BundleManifest {
                split: name.clone(),
                sample_count: idx.len() as u32,
                charset: charset.as_string(),
                charset_hash: charset.hash_hex(),
                image_width: target_w as u32,
                image_height: target_h as u32,
                seed: spec.seed,
            },
            samples: idx.iter().map(|&i| samples[i].clone()).collect(),
        };
        let path = out_dir.join(format!("{name}.htrb"));
        bundle.save(&path)?;
        summaries.push(BundleSummary {
            split: name,
            path,
            sample_count: idx.len(),
        });
    }
    Ok(summaries)
}
