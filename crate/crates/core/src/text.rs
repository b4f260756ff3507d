//! Text-side guidance embeddings. The default provider is dependency-free:
//! captions are tokenized on whitespace and each token indexes a fixed
//! seeded embedding table, which keeps the one property alignment training
//! needs (distinct captions map to distinct, deterministic embeddings).
//! A second provider loads precomputed embeddings, so output from a real
//! text encoder can be swapped in without code changes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::IxDyn;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::init;
use crate::tensor::Arr;

/// Caption plus its embedding, keyed by image id.
#[derive(Clone, Debug)]
pub struct CaptionRecord {
    pub image_id: String,
    pub caption: String,
    /// [L, D]
    pub embedding: Arr,
}

pub trait PromptProvider {
    /// Embedding for one training image, shape [L, D].
    fn embed(&self, image_id: &str, caption: &str) -> Result<Arr>;
    /// (L, D) every embedding from this provider has.
    fn shape(&self) -> (usize, usize);
}

/// Seeded hash-table provider.
pub struct HashTextProvider {
    table: Arr,
    bos: Arr,
    l_text: usize,
    dim: usize,
    vocab: usize,
}

fn fnv1a(token: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in token.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Declared caption normalization: trim then lowercase.
pub fn normalize_caption(caption: &str) -> String {
    caption.trim().to_lowercase()
}

impl HashTextProvider {
    pub fn new(l_text: usize, dim: usize, seed: u64) -> Self {
        let vocab = 4096;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let table = init::normal(&mut rng, &[vocab, dim], 1.0 / (dim as f64).sqrt());
        let bos = init::normal(&mut rng, &[dim], 1.0 / (dim as f64).sqrt());
        Self {
            table,
            bos,
            l_text,
            dim,
            vocab,
        }
    }

    pub fn embed_text(&self, caption: &str) -> Result<Arr> {
        let norm = normalize_caption(caption);
        if norm.is_empty() {
            return Err(Error::Domain("empty caption".into()));
        }
        let mut out = Arr::zeros(IxDyn(&[self.l_text, self.dim]));
        for d in 0..self.dim {
            out[[0, d]] = self.bos[[d]];
        }
        for (slot, token) in norm.split_whitespace().take(self.l_text - 1).enumerate() {
            let row = (fnv1a(token) % self.vocab as u64) as usize;
            for d in 0..self.dim {
                out[[slot + 1, d]] = self.table[[row, d]];
            }
        }
        // Remaining rows stay at the declared padding vector (zeros).
        Ok(out)
    }
}

impl PromptProvider for HashTextProvider {
    fn embed(&self, _image_id: &str, caption: &str) -> Result<Arr> {
        self.embed_text(caption)
    }

    fn shape(&self) -> (usize, usize) {
        (self.l_text, self.dim)
    }
}

/// Parse `image_id<TAB>caption` lines. Blank lines are permitted and
/// skipped; anything else malformed errors with its line number.
pub fn parse_caption_lines(content: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in content.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (id, caption) = line.split_once('\t').ok_or(Error::Parse {
            line: lineno,
            msg: "expected image_id<TAB>caption".into(),
        })?;
        let id = id.trim();
        if id.is_empty() {
            return Err(Error::Parse {
                line: lineno,
                msg: "empty image_id".into(),
            });
        }
        if caption.trim().is_empty() {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("empty caption for id {id:?}"),
            });
        }
        if out.insert(id.to_string(), caption.to_string()).is_some() {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("duplicate image_id {id:?}"),
            });
        }
    }
    Ok(out)
}

/// Load a caption file and embed every record with the given provider.
pub fn load_caption_file(
    path: &Path,
    provider: &dyn PromptProvider,
) -> Result<BTreeMap<String, CaptionRecord>> {
    let content = std::fs::read_to_string(path)?;
    let raw = parse_caption_lines(&content)?;
    let mut out = BTreeMap::new();
    for (id, caption) in raw {
        let embedding = provider.embed(&id, &caption)?;
        out.insert(
            id.clone(),
            CaptionRecord {
                image_id: id,
                caption,
                embedding,
            },
        );
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    dtype: String,
    /// [n_records, L, D]
    shape: [usize; 3],
    ids: Vec<String>,
}

/// Provider backed by a binary blob of f64-LE embeddings plus a JSON
/// sidecar declaring shape and record ids.
pub struct PrecomputedProvider {
    records: BTreeMap<String, Arr>,
    l: usize,
    d: usize,
}

impl PrecomputedProvider {
    pub fn load(bin_path: &Path, sidecar_path: &Path) -> Result<Self> {
        let sidecar: Sidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path)?)?;
        if sidecar.dtype != "f64" {
            return Err(Error::Checkpoint(format!(
                "unsupported dtype {:?}",
                sidecar.dtype
            )));
        }
        let [n, l, d] = sidecar.shape;
        if sidecar.ids.len() != n {
            return Err(Error::Checkpoint(format!(
                "sidecar declares {n} records but lists {} ids",
                sidecar.ids.len()
            )));
        }
        let mut f = std::fs::File::open(bin_path)?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes)?;
        if bytes.len() != n * l * d * 8 {
            return Err(Error::Checkpoint(format!(
                "embedding blob is {} bytes, expected {}",
                bytes.len(),
                n * l * d * 8
            )));
        }
        let mut records = BTreeMap::new();
        for (r, id) in sidecar.ids.iter().enumerate() {
            let mut a = Arr::zeros(IxDyn(&[l, d]));
            for i in 0..l {
                for j in 0..d {
                    let off = ((r * l + i) * d + j) * 8;
                    a[[i, j]] = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
                }
            }
            records.insert(id.clone(), a);
        }
        Ok(Self { records, l, d })
    }

    /// Write embeddings in the format [`PrecomputedProvider::load`] reads.
    pub fn save(
        bin_path: &Path,
        sidecar_path: &Path,
        records: &[(String, Arr)],
    ) -> Result<()> {
        let (l, d) = match records.first() {
            Some((_, a)) => (a.shape()[0], a.shape()[1]),
            None => return Err(Error::Domain("no embeddings to save".into())),
        };
        let mut blob = Vec::with_capacity(records.len() * l * d * 8);
        for (id, a) in records {
            if a.shape() != [l, d] {
                return Err(Error::Shape(format!(
                    "embedding {id:?} has shape {:?}, expected [{l}, {d}]",
                    a.shape()
                )));
            }
            for v in a.iter() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::File::create(bin_path)?.write_all(&blob)?;
        let sidecar = Sidecar {
            dtype: "f64".into(),
            shape: [records.len(), l, d],
            ids: records.iter().map(|(id, _)| id.clone()).collect(),
        };
        std::fs::write(sidecar_path, serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }
}

impl PromptProvider for PrecomputedProvider {
    fn embed(&self, image_id: &str, _caption: &str) -> Result<Arr> {
        self.records
            .get(image_id)
            .cloned()
            .ok_or_else(|| Error::Domain(format!("no precomputed embedding for id {image_id:?}")))
    }

    fn shape(&self) -> (usize, usize) {
        (self.l, self.d)
    }
}
