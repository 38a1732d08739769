//! Deterministic synthetic morph dataset.
//!
//! Identities are smooth radial-bump images; bona fide samples add Gaussian
//! pixel noise, attacks blend two identities pixelwise. Train and test draw
//! from disjoint identity pools and every random draw is keyed by
//! `(seed, purpose, index)`, so regenerating with the same arguments yields
//! a byte-identical directory tree.
//!
//! On disk: 8-bit binary PGM images under `images/`, a tab-separated
//! `manifest.tsv` (sample_id, split, label, path, source_ids), and a
//! `params.json` recording the generation arguments.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pgm::{self, GrayImage};
use crate::rng::keyed_rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LABEL_ATTACK: u8 = 0;
pub const LABEL_BONA_FIDE: u8 = 1;

const MANIFEST_VERSION: u32 = 1;
const BUMPS_PER_IDENTITY: usize = 6;
/// Standard deviation of the per-identity pixel texture.
const TEXTURE_STD: f64 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split {other:?}, expected \"train\" or \"test\""
            ))),
        }
    }
}

/// Base image of one synthetic identity, pixels in [0,1].
#[derive(Debug, Clone)]
pub struct IdentityPrototype {
    pub identity_id: u32,
    pub size: usize,
    /// Row-major H×W reals in [0,1].
    pub image: Vec<f64>,
}

/// One dataset sample held in memory.
#[derive(Debug, Clone)]
pub struct Sample {
    pub sample_id: String,
    pub image: Vec<f64>,
    pub size: usize,
    /// 1 = bona fide, 0 = attack.
    pub label: u8,
    pub source_ids: Vec<u32>,
}

/// Generation arguments; also serialized as `params.json`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GenParams {
    pub seed: u64,
    pub n_identities: u32,
    pub bona_fide_per_identity: u32,
    pub n_morphs: u32,
    pub split_fraction: f64,
    pub size: usize,
    pub noise_std: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            seed: 7,
            n_identities: 40,
            bona_fide_per_identity: 10,
            n_morphs: 300,
            split_fraction: 0.75,
            size: 64,
            noise_std: 0.03,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_identities < 4 {
            return Err(Error::Config(format!(
                "too few identities: {} (need at least 4 to form identity-disjoint morph pools)",
                self.n_identities
            )));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::Config(format!(
                "split_fraction must be in (0,1), got {}",
                self.split_fraction
            )));
        }
        if self.size < 16 {
            return Err(Error::Config(format!("size must be at least 16, got {}", self.size)));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config(format!(
                "noise_std must be non-negative, got {}",
                self.noise_std
            )));
        }
        let (train_ids, test_ids) = self.identity_pools();
        let (train_morphs, test_morphs) = self.morph_counts();
        if (train_morphs > 0 && train_ids.len() < 2) || (test_morphs > 0 && test_ids.len() < 2) {
            return Err(Error::Config(
                "too few identities in a pool to draw morph pairs".into(),
            ));
        }
        Ok(())
    }

    /// Identity ids partitioned into disjoint train/test pools.
    pub fn identity_pools(&self) -> (Vec<u32>, Vec<u32>) {
        let n_train = ((self.n_identities as f64) * self.split_fraction).round() as u32;
        let n_train = n_train.clamp(1, self.n_identities - 1);
        ((0..n_train).collect(), (n_train..self.n_identities).collect())
    }

    fn morph_counts(&self) -> (u32, u32) {
        let train = ((self.n_morphs as f64) * self.split_fraction).round() as u32;
        let train = train.min(self.n_morphs);
        (train, self.n_morphs - train)
    }
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub sample_id: String,
    pub split: Split,
    pub label: u8,
    /// Path relative to the dataset root.
    pub path: String,
    pub source_ids: Vec<u32>,
}

/// On-disk dataset description.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub version: u32,
    pub image_size: usize,
    pub records: Vec<ManifestRecord>,
    pub params: GenParams,
    /// Directory containing `manifest.tsv`.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn split_records(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// Identity ids appearing in a split.
    pub fn split_identities(&self, split: Split) -> BTreeSet<u32> {
        self.split_records(split)
            .iter()
            .flat_map(|r| r.source_ids.iter().copied())
            .collect()
    }
}

/// Smooth radial-bump identity image, deterministic in (seed, id, size).
pub fn make_prototype(seed: u64, identity_id: u32, size: usize) -> Result<IdentityPrototype> {
    if size < 16 {
        return Err(Error::Config(format!("size must be at least 16, got {size}")));
    }
    let mut rng = keyed_rng(seed, "prototype", identity_id as u64);
    let s = size as f64;
    let mut bumps = Vec::with_capacity(BUMPS_PER_IDENTITY);
    for _ in 0..BUMPS_PER_IDENTITY {
        let cx = rng.gen_range(0.15 * s..0.85 * s);
        let cy = rng.gen_range(0.15 * s..0.85 * s);
        let radius = rng.gen_range(0.08 * s..0.30 * s);
        let amplitude = rng.gen_range(0.3..1.0);
        bumps.push((cx, cy, radius, amplitude));
    }

    let mut image = vec![0.0f64; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut v = 0.0;
            for &(cx, cy, r, a) in &bumps {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                v += a * (-(dx * dx + dy * dy) / (2.0 * r * r)).exp();
            }
            image[y * size + x] = v;
        }
    }
    let min = image.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = image.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = (max - min).max(1e-12);
    for v in &mut image {
        *v = (*v - min) / range;
    }

    // Per-identity fine texture on top of the smooth shape. Blending two
    // identities averages two independent patterns, so morphs carry
    // measurably less texture contrast than bona fide images — the
    // desk-scale analogue of the ghosting/smoothing artifacts of real
    // morphs. The shape is compressed into [0.2, 0.8] first so the texture
    // rarely clips.
    let mut texture_rng = keyed_rng(seed, "texture", identity_id as u64);
    let texture = Normal::new(0.0, TEXTURE_STD).expect("constant std");
    for v in &mut image {
        *v = (0.2 + 0.6 * *v + texture.sample(&mut texture_rng)).clamp(0.0, 1.0);
    }
    Ok(IdentityPrototype {
        identity_id,
        size,
        image,
    })
}

fn add_noise(image: &mut [f64], noise_seed: u64, noise_std: f64) {
    if noise_std == 0.0 {
        return;
    }
    let mut rng = keyed_rng(noise_seed, "noise", 0);
    let normal = Normal::new(0.0, noise_std).expect("validated std");
    for v in image.iter_mut() {
        *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
    }
}

/// Bona fide sample: prototype plus clamped Gaussian noise, label 1.
pub fn make_bona_fide(
    proto: &IdentityPrototype,
    sample_id: String,
    noise_seed: u64,
    noise_std: f64,
) -> Result<Sample> {
    if noise_std < 0.0 {
        return Err(Error::Contract(format!(
            "noise_std must be non-negative, got {noise_std}"
        )));
    }
    let mut image = proto.image.clone();
    add_noise(&mut image, noise_seed, noise_std);
    Ok(Sample {
        sample_id,
        image,
        size: proto.size,
        label: LABEL_BONA_FIDE,
        source_ids: vec![proto.identity_id],
    })
}

/// Attack sample: convex pixel blend of two distinct identities, label 0.
pub fn make_morph(
    a: &IdentityPrototype,
    b: &IdentityPrototype,
    sample_id: String,
    blend: f64,
    noise_seed: u64,
    noise_std: f64,
) -> Result<Sample> {
    if a.identity_id == b.identity_id {
        return Err(Error::Contract(format!(
            "a morph needs two distinct identities, got {} twice",
            a.identity_id
        )));
    }
    if !(0.0..=1.0).contains(&blend) {
        return Err(Error::Contract(format!("blend must be in [0,1], got {blend}")));
    }
    if a.size != b.size {
        return Err(Error::Contract(format!(
            "prototype sizes differ: {} vs {}",
            a.size, b.size
        )));
    }
    let mut image: Vec<f64> = a
        .image
        .iter()
        .zip(&b.image)
        .map(|(&pa, &pb)| (blend * pa + (1.0 - blend) * pb).clamp(0.0, 1.0))
        .collect();
    add_noise(&mut image, noise_seed, noise_std);
    Ok(Sample {
        sample_id,
        image,
        size: a.size,
        label: LABEL_ATTACK,
        source_ids: vec![a.identity_id, b.identity_id],
    })
}

fn sample_path(sample_id: &str) -> String {
    format!("images/{sample_id}.pgm")
}

/// Generate the dataset under `root` and return its manifest.
pub fn generate_dataset(params: &GenParams, root: &Path) -> Result<DatasetManifest> {
    params.validate()?;
    let images_dir = root.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;

    let (train_ids, test_ids) = params.identity_pools();
    let (train_morphs, test_morphs) = params.morph_counts();

    let mut records = Vec::new();
    let mut emit = |sample: &Sample, split: Split| -> Result<()> {
        let rel = sample_path(&sample.sample_id);
        let image = GrayImage::from_unit_range(sample.size, sample.size, &sample.image)?;
        pgm::write_pgm(&root.join(&rel), &image)?;
        records.push(ManifestRecord {
            sample_id: sample.sample_id.clone(),
            split,
            label: sample.label,
            path: rel,
            source_ids: sample.source_ids.clone(),
        });
        Ok(())
    };

    for (split, ids) in [(Split::Train, &train_ids), (Split::Test, &test_ids)] {
        for &id in ids {
            let proto = make_prototype(params.seed, id, params.size)?;
            for k in 0..params.bona_fide_per_identity {
                let sample_id = format!("{split}_bf_{id:04}_{k:02}");
                let noise_seed = params
                    .seed
                    .wrapping_add(1)
                    .wrapping_mul(1_000_003)
                    .wrapping_add((id as u64) << 16 | k as u64);
                let sample = make_bona_fide(&proto, sample_id, noise_seed, params.noise_std)?;
                emit(&sample, split)?;
            }
        }
    }

    for (split, pool, count) in [
        (Split::Train, &train_ids, train_morphs),
        (Split::Test, &test_ids, test_morphs),
    ] {
        for i in 0..count {
            let mut rng = keyed_rng(params.seed, &format!("morph_{split}"), i as u64);
            let ai = rng.gen_range(0..pool.len());
            let bi = loop {
                let j = rng.gen_range(0..pool.len());
                if j != ai {
                    break j;
                }
            };
            let a = make_prototype(params.seed, pool[ai], params.size)?;
            let b = make_prototype(params.seed, pool[bi], params.size)?;
            let sample_id = format!("{split}_at_{i:04}");
            let noise_seed = params
                .seed
                .wrapping_mul(2_000_003)
                .wrapping_add(0x4d00_0000 + i as u64 + if split == Split::Train { 0 } else { 1 << 32 });
            let sample = make_morph(&a, &b, sample_id, 0.5, noise_seed, params.noise_std)?;
            emit(&sample, split)?;
        }
    }

    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        image_size: params.size,
        records,
        params: params.clone(),
        root: root.to_path_buf(),
    };
    write_manifest(&manifest)?;
    Ok(manifest)
}

fn write_manifest(manifest: &DatasetManifest) -> Result<()> {
    let tsv_path = manifest.root.join("manifest.tsv");
    let mut out = String::from("sample_id\tsplit\tlabel\tpath\tsource_ids\n");
    for r in &manifest.records {
        let ids: Vec<String> = r.source_ids.iter().map(|i| i.to_string()).collect();
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.sample_id,
            r.split,
            r.label,
            r.path,
            ids.join(",")
        ));
    }
    std::fs::write(&tsv_path, out).map_err(|e| Error::io(&tsv_path, e))?;

    let json_path = manifest.root.join("params.json");
    let json = serde_json::to_string_pretty(&manifest.params)
        .expect("GenParams serializes") + "\n";
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))
}

/// Load `manifest.tsv` + `params.json` from a dataset directory.
pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let json_path = root.join("params.json");
    let json = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let params: GenParams = serde_json::from_str(&json).map_err(|e| Error::Parse {
        path: json_path.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;

    let tsv_path = root.join("manifest.tsv");
    let text = std::fs::read_to_string(&tsv_path).map_err(|e| Error::io(&tsv_path, e))?;
    let mut lines = text.lines().enumerate();
    let parse_err = |line: usize, message: String| Error::Parse {
        path: tsv_path.clone(),
        line: line + 1,
        message,
    };
    match lines.next() {
        Some((_, header)) if header == "sample_id\tsplit\tlabel\tpath\tsource_ids" => {}
        Some((i, header)) => return Err(parse_err(i, format!("bad manifest header {header:?}"))),
        None => return Err(parse_err(0, "empty manifest".into())),
    }

    let mut records = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(parse_err(i, format!("expected 5 tab-separated fields, got {}", fields.len())));
        }
        let split = fields[1]
            .parse()
            .map_err(|e: Error| parse_err(i, e.to_string()))?;
        let label: u8 = fields[2]
            .parse()
            .map_err(|_| parse_err(i, format!("bad label {:?}", fields[2])))?;
        if label > 1 {
            return Err(parse_err(i, format!("label must be 0 or 1, got {label}")));
        }
        let source_ids = fields[4]
            .split(',')
            .map(|s| s.parse().map_err(|_| parse_err(i, format!("bad source id {s:?}"))))
            .collect::<Result<Vec<u32>>>()?;
        records.push(ManifestRecord {
            sample_id: fields[0].to_string(),
            split,
            label,
            path: fields[3].to_string(),
            source_ids,
        });
    }

    Ok(DatasetManifest {
        version: MANIFEST_VERSION,
        image_size: params.size,
        records,
        params,
        root: root.to_path_buf(),
    })
}

fn flip_horizontal(pixels: &mut [f64], size: usize) {
    for y in 0..size {
        pixels[y * size..(y + 1) * size].reverse();
    }
}

/// Bilinear resize of a square unit-range image. Identity when sizes match.
pub fn resize_bilinear(src: &[f64], src_size: usize, dst_size: usize) -> Vec<f64> {
    if src_size == dst_size {
        return src.to_vec();
    }
    let scale = src_size as f64 / dst_size as f64;
    let mut out = vec![0.0; dst_size * dst_size];
    for y in 0..dst_size {
        for x in 0..dst_size {
            let sy = ((y as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_size - 1) as f64);
            let sx = ((x as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_size - 1) as f64);
            let y0 = sy.floor() as usize;
            let x0 = sx.floor() as usize;
            let y1 = (y0 + 1).min(src_size - 1);
            let x1 = (x0 + 1).min(src_size - 1);
            let fy = sy - y0 as f64;
            let fx = sx - x0 as f64;
            let top = src[y0 * src_size + x0] * (1.0 - fx) + src[y0 * src_size + x1] * fx;
            let bottom = src[y1 * src_size + x0] * (1.0 - fx) + src[y1 * src_size + x1] * fx;
            out[y * dst_size + x] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

/// Load selected samples of a split as `[1,S,S]` tensors with labels.
///
/// Pixels are scaled to [0,1]; with `augment` each sample is horizontally
/// flipped with probability ½, decided by `(flip_seed, sample index)`.
/// Images are bilinearly resized when their size differs from `target_size`.
pub fn load_batch<F: Scalar>(
    manifest: &DatasetManifest,
    split: Split,
    indices: &[usize],
    augment: bool,
    flip_seed: u64,
    target_size: usize,
) -> Result<Vec<(Tensor<F>, u8)>> {
    let records = manifest.split_records(split);
    let mut batch = Vec::with_capacity(indices.len());
    for &idx in indices {
        let record = records.get(idx).ok_or_else(|| {
            Error::Contract(format!(
                "index {idx} out of range for split {split} ({} samples)",
                records.len()
            ))
        })?;
        let path = manifest.root.join(&record.path);
        let image = pgm::read_pgm(&path).map_err(|e| match e {
            Error::Io { path, source } => Error::Io {
                path: PathBuf::from(format!("{} (sample {})", path.display(), record.sample_id)),
                source,
            },
            other => other,
        })?;
        if image.width != image.height || image.width != manifest.image_size {
            return Err(Error::Contract(format!(
                "sample {} has size {}x{}, manifest says {}",
                record.sample_id, image.width, image.height, manifest.image_size
            )));
        }
        let mut pixels: Vec<f64> = image.pixels.iter().map(|&p| p as f64 / 255.0).collect();
        if augment && keyed_rng(flip_seed, "flip", idx as u64).gen_bool(0.5) {
            flip_horizontal(&mut pixels, image.width);
        }
        let pixels = resize_bilinear(&pixels, image.width, target_size);
        let data = pixels.iter().map(|&v| F::of_f64(v)).collect();
        let tensor = Tensor::new(vec![1, target_size, target_size], data)?;
        batch.push((tensor, record.label));
    }
    Ok(batch)
}
