//! Corpus directories: `manifest.toml` carrying the generating configuration
//! and its fingerprint, one JSON record per line for each set, and
//! `images.bin` holding every visual feature block as little-endian f64.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rc3_core::model::{ModelConfig, TokenSequence, VisualFeatures, VisualMode};
use rc3_core::synthdata::{
    gen_strict_as, gen_weak_as, AlignedTriplet, Alignment, ConceptWorld, Corpora, CorpusKind, CorpusSpec, ParallelPair,
    WorldConfig,
};
use rc3_core::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.toml";
pub const IMAGES: &str = "images.bin";
const FORMAT: &str = "rc3-corpus";
const VERSION: u32 = 1;
const SETS: [&str; 5] = ["strict", "weak", "parallel", "heldout_strict", "heldout_weak"];

/// Training corpora plus the held-out sets evaluation and probing read.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSet {
    pub train: Corpora,
    pub heldout_strict: Vec<AlignedTriplet>,
    pub heldout_weak: Vec<AlignedTriplet>,
}

/// Everything that determines the generated content.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub world: WorldConfig,
    pub data: CorpusSpec,
    pub k_roi: usize,
    pub d_roi: usize,
    pub n_patches: usize,
    pub d_patch: usize,
    pub vocab_size: usize,
    pub n_heldout_strict: usize,
    pub n_heldout_weak: usize,
}

impl Provenance {
    pub fn of(cfg: &Config) -> Self {
        let ModelConfig {
            k_roi,
            d_roi,
            n_patches,
            d_patch,
            vocab_size,
            ..
        } = cfg.model;
        Self {
            world: cfg.world.clone(),
            data: cfg.data.clone(),
            k_roi,
            d_roi,
            n_patches,
            d_patch,
            vocab_size,
            n_heldout_strict: cfg.eval.n_heldout.max(cfg.eval.probe_controls),
            n_heldout_weak: cfg.eval.probe_weak,
        }
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn fingerprint(&self) -> String {
        let text = toml::to_string(self).expect("provenance serializes");
        hex::encode(Sha256::digest(format!("{FORMAT} v{VERSION}\n{text}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    pub name: String,
    pub records: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub fingerprint: String,
    pub provenance: Provenance,
    pub images: FileEntry,
    pub file: Vec<FileEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageRecord {
    mode: VisualMode,
    /// Offsets in f64 units into the image blob.
    roi: Option<usize>,
    patches: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TripletRecord {
    id: usize,
    alignment: Alignment,
    concept_overlap: f64,
    text_i: Vec<usize>,
    text_j: Vec<usize>,
    concepts_i: Vec<usize>,
    concepts_j: Vec<usize>,
    image: ImageRecord,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairRecord {
    id: usize,
    text_i: Vec<usize>,
    text_j: Vec<usize>,
    concepts: Vec<usize>,
}

impl CorpusSet {
    pub fn generate(world: &ConceptWorld, cfg: &Config) -> Result<Self> {
        let p = Provenance::of(cfg);
        Ok(Self {
            train: Corpora::generate(world, &cfg.data)?,
            heldout_strict: gen_strict_as(world, &cfg.data, CorpusKind::HeldoutStrict, p.n_heldout_strict)?,
            heldout_weak: gen_weak_as(world, &cfg.data, CorpusKind::HeldoutWeak, p.n_heldout_weak)?,
        })
    }

    pub fn save(&self, cfg: &Config, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob: Vec<f64> = Vec::new();
        let mut files = Vec::new();
        let triplet_sets = [
            ("strict", &self.train.strict),
            ("weak", &self.train.weak),
            ("heldout_strict", &self.heldout_strict),
            ("heldout_weak", &self.heldout_weak),
        ];
        for (name, set) in triplet_sets {
            let lines = set.iter().map(|t| {
                let mut push = |x: &Option<Tensor>| {
                    x.as_ref().map(|t| {
                        blob.extend_from_slice(t.data());
                        blob.len() - t.len()
                    })
                };
                let image = ImageRecord {
                    mode: t.image.mode,
                    roi: push(&t.image.roi),
                    patches: push(&t.image.patches),
                };
                serde_json::to_string(&TripletRecord {
                    id: t.id,
                    alignment: t.alignment,
                    concept_overlap: t.concept_overlap,
                    text_i: t.text_i.tokens().to_vec(),
                    text_j: t.text_j.tokens().to_vec(),
                    concepts_i: t.concepts_i.clone(),
                    concepts_j: t.concepts_j.clone(),
                    image,
                })
                .expect("record serializes")
            });
            files.push(write_lines(dir, name, lines.collect())?);
        }
        let pairs = self
            .train
            .parallel
            .iter()
            .map(|p| {
                serde_json::to_string(&PairRecord {
                    id: p.id,
                    text_i: p.text_i.tokens().to_vec(),
                    text_j: p.text_j.tokens().to_vec(),
                    concepts: p.concepts.clone(),
                })
                .expect("record serializes")
            })
            .collect();
        files.insert(2, write_lines(dir, "parallel", pairs)?);
        let bytes: Vec<u8> = blob.iter().flat_map(|x| x.to_le_bytes()).collect();
        let ipath = dir.join(IMAGES);
        fs::write(&ipath, &bytes).map_err(|e| Error::io(&ipath, e))?;
        let provenance = Provenance::of(cfg);
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            fingerprint: provenance.fingerprint(),
            provenance,
            images: FileEntry {
                name: IMAGES.into(),
                records: blob.len(),
                sha256: hex::encode(Sha256::digest(&bytes)),
            },
            file: files,
        };
        let mpath = dir.join(MANIFEST);
        fs::write(&mpath, toml::to_string(&manifest).expect("manifest serializes")).map_err(|e| Error::io(&mpath, e))
    }

    /// Loads a corpus directory written for `cfg`. A fingerprint that differs
    /// from the one `cfg` produces is an error, as is any file whose checksum
    /// or record count disagrees with the manifest.
    pub fn load(cfg: &Config, dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let m: Manifest =
            toml::from_str(&text).map_err(|e| Error::Corpus(format!("{}: {}", mpath.display(), e.message())))?;
        if m.format != FORMAT || m.version != VERSION {
            return Err(Error::Corpus(format!(
                "{}: format {} v{}, expected {FORMAT} v{VERSION}",
                mpath.display(),
                m.format,
                m.version
            )));
        }
        let want = Provenance::of(cfg).fingerprint();
        if m.fingerprint != want || m.provenance.fingerprint() != m.fingerprint {
            return Err(Error::Corpus(format!(
                "{}: fingerprint {} does not match the configuration ({want})",
                dir.display(),
                m.fingerprint
            )));
        }
        let ipath = dir.join(&m.images.name);
        let bytes = fs::read(&ipath).map_err(|e| Error::io(&ipath, e))?;
        if bytes.len() != 8 * m.images.records || hex::encode(Sha256::digest(&bytes)) != m.images.sha256 {
            return Err(Error::Corpus(format!("{}: size or checksum mismatch", ipath.display())));
        }
        let blob: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let names: Vec<&str> = m.file.iter().map(|f| f.name.as_str()).collect();
        if names != SETS.map(|s| format!("{s}.jsonl")).iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Corpus(format!("{}: unexpected file list {names:?}", mpath.display())));
        }
        let mc = &cfg.model;
        let triplets = |entry: &FileEntry| -> Result<Vec<AlignedTriplet>> {
            read_lines(dir, entry)?
                .iter()
                .enumerate()
                .map(|(i, line)| {
                    let r: TripletRecord = serde_json::from_str(line).map_err(|e| record_err(entry, i, e))?;
                    let block = |off: Option<usize>, rows: usize, cols: usize| -> Result<Option<Tensor>> {
                        off.map(|o| {
                            let data = blob
                                .get(o..o + rows * cols)
                                .ok_or_else(|| Error::Corpus(format!("{} line {}: image out of range", entry.name, i + 1)))?;
                            Ok(Tensor::new(vec![rows, cols], data.to_vec())?)
                        })
                        .transpose()
                    };
                    Ok(AlignedTriplet {
                        id: r.id,
                        image: VisualFeatures {
                            mode: r.image.mode,
                            roi: block(r.image.roi, mc.k_roi, mc.d_roi)?,
                            patches: block(r.image.patches, mc.n_patches, mc.d_patch)?,
                        },
                        text_i: TokenSequence::from_tokens(r.text_i)?,
                        text_j: TokenSequence::from_tokens(r.text_j)?,
                        alignment: r.alignment,
                        concept_overlap: r.concept_overlap,
                        concepts_i: r.concepts_i,
                        concepts_j: r.concepts_j,
                    })
                })
                .collect()
        };
        let parallel = read_lines(dir, &m.file[2])?
            .iter()
            .enumerate()
            .map(|(i, line)| {
                let r: PairRecord = serde_json::from_str(line).map_err(|e| record_err(&m.file[2], i, e))?;
                Ok(ParallelPair {
                    id: r.id,
                    text_i: TokenSequence::from_tokens(r.text_i)?,
                    text_j: TokenSequence::from_tokens(r.text_j)?,
                    concepts: r.concepts,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            train: Corpora {
                strict: triplets(&m.file[0])?,
                weak: triplets(&m.file[1])?,
                parallel,
            },
            heldout_strict: triplets(&m.file[3])?,
            heldout_weak: triplets(&m.file[4])?,
        })
    }
}

fn record_err(entry: &FileEntry, i: usize, e: serde_json::Error) -> Error {
    Error::Corpus(format!("{} line {}: {e}", entry.name, i + 1))
}

fn write_lines(dir: &Path, set: &str, lines: Vec<String>) -> Result<FileEntry> {
    let name = format!("{set}.jsonl");
    let path = dir.join(&name);
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    let mut h = Sha256::new();
    for l in &lines {
        h.update(l.as_bytes());
        h.update(b"\n");
        writeln!(w, "{l}").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(FileEntry {
        name,
        records: lines.len(),
        sha256: hex::encode(h.finalize()),
    })
}

fn read_lines(dir: &Path, entry: &FileEntry) -> Result<Vec<String>> {
    let path = dir.join(&entry.name);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut h = Sha256::new();
    let mut lines = Vec::new();
    for l in BufReader::new(file).lines() {
        let l = l.map_err(|e| Error::io(&path, e))?;
        h.update(l.as_bytes());
        h.update(b"\n");
        lines.push(l);
    }
    if lines.len() != entry.records || hex::encode(h.finalize()) != entry.sha256 {
        return Err(Error::Corpus(format!(
            "{}: {} records or checksum disagree with the manifest",
            path.display(),
            lines.len()
        )));
    }
    Ok(lines)
}
