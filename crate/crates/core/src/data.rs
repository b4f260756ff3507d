//! Dataset plumbing: synthetic corpora for toy-scale runs, directory ingest,
//! seeded crop/flip sampling, and compression manifests.
//!
//! Everything here is deterministic under a seed. Samplers take an external
//! RNG so a training loop can derive per-step generators and stay replayable
//! across process restarts.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::image::{ColorSpace, ImageTensor};

/// Smooth-plus-texture synthetic stand-in for a natural crop.
///
/// Low-frequency color ramps carry most of the energy, a weak sinusoidal
/// texture adds high frequencies for the compressor to destroy, and a hard
/// vertical edge provides the discontinuity that rings at low quality.
pub fn synthetic_natural(h: usize, w: usize, phase: f64) -> ImageTensor {
    let mut data = Array3::<f64>::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            let x = j as f64 / w as f64;
            let y = i as f64 / h as f64;
            let base = 0.5 + 0.25 * ((x * 6.0 + phase).sin() * (y * 4.0 - phase).cos());
            let texture = 0.08 * ((x * 51.0 + y * 37.0 + phase * 3.0).sin());
            let edge = if x > 0.5 { 0.12 } else { -0.12 };
            data[[i, j, 0]] = (base + texture + edge).clamp(0.0, 1.0);
            data[[i, j, 1]] = (base * 0.8 + texture - edge * 0.5).clamp(0.0, 1.0);
            data[[i, j, 2]] = (0.9 - base * 0.6 + texture).clamp(0.0, 1.0);
        }
    }
    ImageTensor::new(data, ColorSpace::Rgb)
}

/// Randomized variant of [`synthetic_natural`]: frequencies, edge position,
/// and channel mixing are drawn from the RNG so a corpus of these spans more
/// of the statistics a quality regressor has to cope with.
pub fn synthetic_image(h: usize, w: usize, rng: &mut ChaCha20Rng) -> ImageTensor {
    let fx = rng.gen_range(2.0..9.0);
    let fy = rng.gen_range(2.0..7.0);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let tex_amp = rng.gen_range(0.03..0.12);
    let tex_fx = rng.gen_range(25.0..60.0);
    let tex_fy = rng.gen_range(25.0..60.0);
    let edge_pos = rng.gen_range(0.25..0.75);
    let edge_amp = rng.gen_range(0.06..0.18);
    let edge_vertical = rng.gen_bool(0.5);
    let mix: Vec<f64> = (0..6).map(|_| rng.gen_range(-0.9..0.9)).collect();
    let offs: Vec<f64> = (0..3).map(|_| rng.gen_range(0.3..0.7)).collect();

    let mut data = Array3::<f64>::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            let x = j as f64 / w as f64;
            let y = i as f64 / h as f64;
            let base = 0.25 * ((x * fx + phase).sin() * (y * fy - phase).cos());
            let texture = tex_amp * ((x * tex_fx + y * tex_fy + phase * 3.0).sin());
            let coord = if edge_vertical { x } else { y };
            let edge = if coord > edge_pos { edge_amp } else { -edge_amp };
            for c in 0..3 {
                let v = offs[c] + mix[c] * base + mix[c + 3] * edge + texture;
                data[[i, j, c]] = v.clamp(0.0, 1.0);
            }
        }
    }
    ImageTensor::new(data, ColorSpace::Rgb)
}

/// Deterministic corpus of distinct synthetic images with stable ids
/// (`img_00000`, `img_00001`, ...).
pub fn synthetic_corpus(n: usize, h: usize, w: usize, seed: u64) -> Vec<(String, ImageTensor)> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| (format!("img_{i:05}"), synthetic_image(h, w, &mut rng)))
        .collect()
}

const CAPTION_SUBJECTS: [&str; 8] = [
    "gradient", "stripes", "weave", "bands", "field", "pattern", "wash", "grid",
];
const CAPTION_COLORS: [&str; 8] = [
    "teal", "amber", "violet", "crimson", "olive", "slate", "coral", "indigo",
];
const CAPTION_MOODS: [&str; 8] = [
    "soft", "vivid", "muted", "glossy", "hazy", "sharp", "pale", "deep",
];

/// Deterministic pseudo-caption for a synthetic image id. Word choice is
/// seeded so the same (id, seed) pair always produces the same sentence.
pub fn synthetic_caption(image_id: &str, seed: u64) -> String {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for b in image_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    let mood = CAPTION_MOODS[(h % 8) as usize];
    let color = CAPTION_COLORS[((h >> 8) % 8) as usize];
    let subject = CAPTION_SUBJECTS[((h >> 16) % 8) as usize];
    let second = CAPTION_COLORS[((h >> 24) % 8) as usize];
    format!("a {mood} {color} {subject} over a {second} background")
}

/// Result of scanning a directory for training or evaluation images.
#[derive(Debug)]
pub struct ImageSet {
    /// (file stem, image) pairs sorted by filename.
    pub images: Vec<(String, ImageTensor)>,
    /// Files present but skipped: unreadable, non-image, or under `min_size`.
    pub skipped: usize,
}

fn is_image_ext(path: &Path) -> bool {
    // The whole pipeline reads and writes PNG; other extensions are ignored
    // rather than warned about so mixed directories stay quiet.
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
        Some(ref e) if e == "png"
    )
}

/// Load every readable image from `dir` that is at least `min_size` on both
/// sides. Undersized or unreadable files are counted, not fatal; an empty
/// result is an error because every downstream consumer needs data.
/// Order is sorted by filename so runs are reproducible across filesystems.
pub fn load_images_dir(dir: &Path, min_size: usize) -> Result<ImageSet> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_ext(p))
        .collect();
    paths.sort();

    let mut images = Vec::new();
    let mut skipped = 0usize;
    for path in &paths {
        let img = match ImageTensor::load_png(path) {
            Ok(img) => img,
            Err(e) => {
                eprintln!("warning: skipping {}: {e}", path.display());
                skipped += 1;
                continue;
            }
        };
        if img.height() < min_size || img.width() < min_size {
            eprintln!(
                "warning: skipping {}: {}x{} below minimum {min_size}",
                path.display(),
                img.height(),
                img.width()
            );
            skipped += 1;
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("unnamed")
            .to_string();
        images.push((stem, img));
    }

    if images.is_empty() {
        return Err(Error::Domain(format!(
            "no usable images in {} ({} file(s) skipped)",
            dir.display(),
            skipped
        )));
    }
    Ok(ImageSet { images, skipped })
}

/// Seeded crop-and-flip sampler for training patches.
#[derive(Debug, Clone, Copy)]
pub struct CropSampler {
    pub size: usize,
    pub flips: bool,
}

impl CropSampler {
    pub fn new(size: usize, flips: bool) -> Self {
        Self { size, flips }
    }

    /// Draw one patch. Consumes exactly three RNG values (row, col, flip)
    /// regardless of outcome so sampling stays aligned across images.
    pub fn sample(&self, img: &ImageTensor, rng: &mut ChaCha20Rng) -> Result<ImageTensor> {
        let (h, w) = (img.height(), img.width());
        let s = self.size;
        if h < s || w < s {
            return Err(Error::Shape(format!(
                "image {h}x{w} smaller than crop {s}"
            )));
        }
        let i0 = rng.gen_range(0..=h - s);
        let j0 = rng.gen_range(0..=w - s);
        let flip = rng.gen_bool(0.5) && self.flips;
        let view = img.data.slice(ndarray::s![i0..i0 + s, j0..j0 + s, ..]);
        let patch = if flip {
            let mut flipped = view.to_owned();
            flipped.invert_axis(ndarray::Axis(1));
            flipped.as_standard_layout().to_owned()
        } else {
            view.as_standard_layout().to_owned()
        };
        Ok(ImageTensor::new(patch, img.color_space))
    }
}

/// One manifest row: an output filename and the quality factor used for it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub filename: String,
    pub qf: u8,
}

/// Write a `filename,qf` CSV manifest describing a degraded set.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = std::fs::File::create(path)?;
    writeln!(out, "filename,qf")?;
    for e in entries {
        if e.filename.contains(',') || e.filename.contains('\n') {
            return Err(Error::Domain(format!(
                "filename {:?} cannot be stored in a csv manifest",
                e.filename
            )));
        }
        writeln!(out, "{},{}", e.filename, e.qf)?;
    }
    Ok(())
}

fn manifest_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

/// Read a manifest written by [`write_manifest`]. Validates the header,
/// per-row field count, quality range, and duplicate filenames.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| manifest_err(1, "manifest is empty"))?;
    if header.trim() != "filename,qf" {
        return Err(manifest_err(
            1,
            format!("manifest header must be 'filename,qf', got {header:?}"),
        ));
    }
    let mut entries = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 2;
        let (name, qf_str) = line
            .split_once(',')
            .ok_or_else(|| manifest_err(lineno, "expected 2 fields"))?;
        if qf_str.contains(',') {
            return Err(manifest_err(lineno, "expected 2 fields"));
        }
        let qf: u8 = qf_str
            .trim()
            .parse()
            .map_err(|_| manifest_err(lineno, format!("bad qf {qf_str:?}")))?;
        if !(1..=100).contains(&qf) {
            return Err(manifest_err(lineno, format!("qf {qf} outside 1..=100")));
        }
        if !seen.insert(name.to_string()) {
            return Err(manifest_err(lineno, format!("duplicate filename {name:?}")));
        }
        entries.push(ManifestEntry { filename: name.to_string(), qf });
    }
    Ok(entries)
}
