//! Multi-annotator datasets: on-disk layout, loading, splitting and a synthetic
//! generator with consistently biased annotators.
//!
//! Layout: `root/manifest.json`, `root/cases/<case_id>/image.png`,
//! `root/cases/<case_id>/ann_<annotator_id>.png`.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::domain::{fuse_annotations, AnnotatedCase, BinaryMask, ImageSample};
use crate::engine::derive_seed;
use crate::error::{Error, Result};
use crate::parallel::par_map;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRef {
    pub annotator_id: String,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub case_id: String,
    pub image: String,
    pub annotations: Vec<AnnotationRef>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub annotator_ids: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::InvalidArgument(format!("unsupported manifest format {}", self.format_version)));
        }
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.case_id.as_str()) {
                return Err(Error::Dataset { case_id: e.case_id.clone(), message: "duplicate case id".into() });
            }
            let ids: Vec<&str> = e.annotations.iter().map(|a| a.annotator_id.as_str()).collect();
            if ids != self.annotator_ids.iter().map(String::as_str).collect::<Vec<_>>() {
                return Err(Error::Dataset {
                    case_id: e.case_id.clone(),
                    message: format!("annotators {ids:?} differ from dataset annotators {:?}", self.annotator_ids),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub cases: Vec<AnnotatedCase>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn split(&self, which: Split) -> Vec<&AnnotatedCase> {
        self.cases.iter().zip(&self.splits).filter(|(_, &s)| s == which).map(|(c, _)| c).collect()
    }

    pub fn train(&self) -> Vec<&AnnotatedCase> {
        self.split(Split::Train)
    }

    pub fn test(&self) -> Vec<&AnnotatedCase> {
        self.split(Split::Test)
    }
}

fn dataset_err(case_id: &str, message: impl Into<String>) -> Error {
    Error::Dataset { case_id: case_id.to_string(), message: message.into() }
}

/// Reads and validates every case the manifest references.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path)
        .map_err(|e| Error::InvalidArgument(format!("cannot read manifest {}: {e}", manifest_path.display())))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    manifest.validate()?;
    let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let cases = par_map(&manifest.entries, |e| load_case(&root, e)).into_iter().collect::<Result<Vec<_>>>()?;
    let splits = manifest.entries.iter().map(|e| e.split).collect();
    Ok(Dataset { root, manifest, cases, splits })
}

fn load_case(root: &Path, e: &ManifestEntry) -> Result<AnnotatedCase> {
    let read = |rel: &str| {
        fs::read(root.join(rel)).map_err(|err| dataset_err(&e.case_id, format!("cannot read {rel}: {err}")))
    };
    let image = codec::image_from_png(&e.case_id, &read(&e.image)?)
        .map_err(|err| dataset_err(&e.case_id, format!("image {}: {err}", e.image)))?;
    let masks = e
        .annotations
        .iter()
        .map(|a| {
            let m = codec::mask_from_png(&read(&a.file)?)
                .map_err(|err| dataset_err(&e.case_id, format!("mask {}: {err}", a.file)))?;
            if m.shape() != (image.height(), image.width()) {
                return Err(dataset_err(&e.case_id, format!("mask {} is {:?}, image is {}×{}", a.file, m.shape(), image.height(), image.width())));
            }
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    AnnotatedCase::new(image, masks, e.annotations.iter().map(|a| a.annotator_id.clone()).collect())
}

/// Writes cases as PNGs plus a manifest.
pub fn write_dataset(root: &Path, cases: &[AnnotatedCase], splits: &[Split]) -> Result<DatasetManifest> {
    let annotator_ids = cases.first().map(|c| c.annotator_ids().to_vec()).unwrap_or_default();
    let mut entries = Vec::with_capacity(cases.len());
    for (case, &split) in cases.iter().zip(splits) {
        let dir = format!("cases/{}", case.case_id());
        fs::create_dir_all(root.join(&dir))?;
        let image = format!("{dir}/image.png");
        fs::write(root.join(&image), codec::image_to_png(case.image())?)?;
        let mut annotations = Vec::new();
        for (m, aid) in case.annotations().iter().zip(case.annotator_ids()) {
            let file = format!("{dir}/ann_{aid}.png");
            fs::write(root.join(&file), codec::mask_to_png(m)?)?;
            annotations.push(AnnotationRef { annotator_id: aid.clone(), file });
        }
        entries.push(ManifestEntry { case_id: case.case_id().to_string(), image, annotations, split });
    }
    let manifest = DatasetManifest { format_version: FORMAT_VERSION, annotator_ids, entries };
    manifest.validate()?;
    fs::write(root.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Seeded assignment with `round(n · train_fraction)` training cases.
pub fn assign_splits(n: usize, train_fraction: f64, seed: u64) -> Vec<Split> {
    let n_train = ((n as f64) * train_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut splits = vec![Split::Test; n];
    for &i in &order[..n_train.min(n)] {
        splits[i] = Split::Train;
    }
    splits
}

/// Seeded choice of `r` annotators without replacement, fused by strict majority.
pub fn make_ground_truth(case: &AnnotatedCase, r: usize, seed: u64) -> Result<BinaryMask> {
    let big_r = case.annotator_count();
    if r == 0 || r > big_r {
        return Err(Error::InvalidArgument(format!("subset size {r} outside 1..={big_r}")));
    }
    let subset = ground_truth_subset(big_r, r, seed);
    fuse_annotations(case, &subset)
}

pub fn ground_truth_subset(big_r: usize, r: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut subset = rand::seq::index::sample(&mut rng, big_r, r).into_vec();
    subset.sort_unstable();
    subset
}

// ----- synthetic generator -------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub image_size: usize,
    pub cases: usize,
    /// Signed boundary offset of each annotator in pixels; positive dilates.
    pub annotator_biases: Vec<f64>,
    /// Peak amplitude of each annotator's low-frequency boundary wobble, in pixels.
    pub jitter: f64,
    pub blob_count: [usize; 2],
    pub blob_radius: [f64; 2],
    /// Relative amplitude of the radial harmonics that shape each blob.
    pub harmonic_amplitude: f64,
    /// Width of the intensity falloff across the boundary, in pixels.
    pub edge_softness: f64,
    pub noise: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            cases: 250,
            annotator_biases: vec![-2.0, -1.0, 1.0, 2.0],
            jitter: 0.4,
            blob_count: [1, 2],
            blob_radius: [9.0, 16.0],
            harmonic_amplitude: 0.2,
            edge_softness: 2.5,
            noise: 0.08,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.annotator_biases.len() < 2 {
            return bad("at least two annotators are required");
        }
        let mut sorted = self.annotator_biases.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return bad("annotator biases must be distinct");
        }
        if self.image_size < crate::domain::MIN_IMAGE_SIDE || self.cases == 0 {
            return bad("image_size must be ≥ 16 and cases ≥ 1");
        }
        if self.blob_count[0] == 0 || self.blob_count[0] > self.blob_count[1] || self.blob_radius[0] > self.blob_radius[1] {
            return bad("blob ranges must be non-empty and ordered");
        }
        if !(0.0..=1.0).contains(&self.train_fraction) || self.jitter < 0.0 || self.noise < 0.0 {
            return bad("train_fraction must lie in [0,1]; jitter and noise must be non-negative");
        }
        Ok(())
    }

    pub fn annotator_ids(&self) -> Vec<String> {
        (0..self.annotator_biases.len()).map(|i| format!("a{i}")).collect()
    }
}

struct Blob {
    cy: f64,
    cx: f64,
    boundary: Vec<(f64, f64)>,
    radius: Vec<f64>,
}

const BOUNDARY_POINTS: usize = 360;

impl Blob {
    fn random(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Self {
        let s = cfg.image_size as f64;
        let r0 = rng.gen_range(cfg.blob_radius[0]..=cfg.blob_radius[1]);
        let margin = (r0 * (1.0 + cfg.harmonic_amplitude) + 2.0).min(s / 2.0);
        let cy = rng.gen_range(margin..=(s - margin).max(margin));
        let cx = rng.gen_range(margin..=(s - margin).max(margin));
        let harmonics: Vec<(f64, f64)> = (2..=4)
            .map(|_| (rng.gen_range(-1.0..1.0) * cfg.harmonic_amplitude / 3.0, rng.gen_range(0.0..2.0 * PI)))
            .collect();
        let radius: Vec<f64> = (0..BOUNDARY_POINTS)
            .map(|i| {
                let t = 2.0 * PI * i as f64 / BOUNDARY_POINTS as f64;
                r0 * (1.0 + harmonics.iter().enumerate().map(|(k, (a, ph))| a * ((k as f64 + 2.0) * t + ph).cos()).sum::<f64>())
            })
            .collect();
        let boundary = radius
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let t = 2.0 * PI * i as f64 / BOUNDARY_POINTS as f64;
                (cy + r * t.sin(), cx + r * t.cos())
            })
            .collect();
        Self { cy, cx, boundary, radius }
    }

    /// Signed distance (negative inside) and polar angle around the centre.
    fn signed_distance(&self, y: f64, x: f64) -> (f64, f64) {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let theta = dy.atan2(dx).rem_euclid(2.0 * PI);
        let idx = ((theta / (2.0 * PI) * BOUNDARY_POINTS as f64).round() as usize) % BOUNDARY_POINTS;
        let inside = dy.hypot(dx) < self.radius[idx];
        let d = self
            .boundary
            .iter()
            .map(|(by, bx)| (y - by).hypot(x - bx))
            .fold(f64::INFINITY, f64::min);
        (if inside { -d } else { d }, theta)
    }
}

/// Boundary wobble of one annotator: two low harmonics scaled to peak `amplitude`.
fn jitter_fn(rng: &mut ChaCha8Rng, amplitude: f64) -> impl Fn(f64) -> f64 {
    let (p1, p2) = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
    let mix = rng.gen_range(0.0..1.0);
    move |t: f64| amplitude * (mix * (t + p1).sin() + (1.0 - mix) * (2.0 * t + p2).sin())
}

/// Renders one case; annotator `r` marks pixels with `sdf < bias_r + jitter_r(θ)`.
pub fn synthesize_case(cfg: &SynthConfig, index: usize) -> Result<AnnotatedCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x5947, index as u64));
    let s = cfg.image_size;
    let n_blobs = rng.gen_range(cfg.blob_count[0]..=cfg.blob_count[1]);
    let blobs: Vec<Blob> = (0..n_blobs).map(|_| Blob::random(&mut rng, cfg)).collect();
    let jitters: Vec<Vec<_>> = cfg
        .annotator_biases
        .iter()
        .map(|_| (0..n_blobs).map(|_| jitter_fn(&mut rng, cfg.jitter)).collect())
        .collect();
    let noise = Normal::new(0.0, cfg.noise.max(1e-12)).expect("valid noise");
    let (fg, bg) = (rng.gen_range(0.6..0.85), rng.gen_range(0.1..0.3));

    let mut pixels = Vec::with_capacity(s * s);
    let mut masks = vec![Vec::with_capacity(s * s); cfg.annotator_biases.len()];
    for r in 0..s {
        for c in 0..s {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            let per_blob: Vec<(f64, f64)> = blobs.iter().map(|b| b.signed_distance(y, x)).collect();
            let (nearest, &(sdf, theta)) = per_blob
                .iter()
                .enumerate()
                .min_by(|a, b| a.1 .0.total_cmp(&b.1 .0))
                .expect("at least one blob");
            let shade = 1.0 / (1.0 + (sdf / cfg.edge_softness.max(1e-6)).exp());
            let v = bg + (fg - bg) * shade + if cfg.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            // quantise to the 8-bit grid so the PNG round trip is exact
            pixels.push((v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
            for (a, bias) in cfg.annotator_biases.iter().enumerate() {
                masks[a].push(u8::from(sdf < bias + jitters[a][nearest](theta)));
            }
        }
    }
    let case_id = format!("case{index:04}");
    let image = ImageSample::new(case_id, s, s, 1, pixels)?;
    let masks = masks.into_iter().map(|m| BinaryMask::new(s, s, m)).collect::<Result<Vec<_>>>()?;
    AnnotatedCase::new(image, masks, cfg.annotator_ids())
}

/// Generates every case in memory with its seeded split.
pub fn synthesize(cfg: &SynthConfig) -> Result<(Vec<AnnotatedCase>, Vec<Split>)> {
    cfg.validate()?;
    let idx: Vec<usize> = (0..cfg.cases).collect();
    let cases = par_map(&idx, |&i| synthesize_case(cfg, i)).into_iter().collect::<Result<Vec<_>>>()?;
    Ok((cases, assign_splits(cfg.cases, cfg.train_fraction, derive_seed(cfg.seed, 0x5917, 0))))
}

/// Generates the dataset and writes it under `root`.
pub fn generate_synthetic(cfg: &SynthConfig, root: &Path) -> Result<DatasetManifest> {
    let (cases, splits) = synthesize(cfg)?;
    fs::create_dir_all(root)?;
    write_dataset(root, &cases, &splits)
}
