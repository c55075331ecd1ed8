//! Synthetic supervision: training pairs with known ground-truth warps.
//!
//! A pair is built from one source image: the source is resized to the crop
//! size, mirror-padded by half the crop size on each side, and image A is
//! the central crop (the resized source itself). Image B is produced by
//! inverse-warping the *padded* source with a randomly sampled
//! transformation, so no border artifacts leak into the pair. The sampled
//! parameters are expressed in the crop's normalized frame and are stored as
//! the ground truth; re-warping the padded context with the stored
//! parameters reproduces image B exactly.
//!
//! Every pair derives its own sub-seed from `(seed, index)` through a
//! splitmix64 mix, so parallel and serial generation agree bitwise. The PRNG
//! is ChaCha8, which is stable across platforms; its identity is part of the
//! manifest contract.

use crate::error::{Error, Result};
use crate::io;
use crate::par;
use crate::resampler;
use crate::tensor::{Scalar, Tensor};
use crate::transforms::{
    compose, AffineParams, TpsParams, TransformParams,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

const MAX_SAMPLE_ATTEMPTS: usize = 64;

/// Ranges for ground-truth transformation sampling.
///
/// Scales are drawn log-uniformly from `[1/scale_max, scale_max]` per axis;
/// rotation, shear and translation are uniform in their symmetric ranges.
/// TPS control points jitter uniformly by up to `tps_jitter` in normalized
/// units (0.25 = one quarter of the image half-extent grid spacing scale).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingRanges {
    pub scale_max: Scalar,
    pub rot_max: Scalar,
    pub shear_max: Scalar,
    pub trans_max: Scalar,
    pub tps_jitter: Scalar,
}

impl Default for SamplingRanges {
    fn default() -> Self {
        SamplingRanges {
            scale_max: 2.0,
            rot_max: std::f64::consts::PI / 6.0,
            shear_max: 0.2,
            trans_max: 0.25,
            tps_jitter: 0.25,
        }
    }
}

impl SamplingRanges {
    /// All-zero ranges: sampling always yields the identity transform.
    pub fn zero() -> Self {
        SamplingRanges {
            scale_max: 1.0,
            rot_max: 0.0,
            shear_max: 0.0,
            trans_max: 0.0,
            tps_jitter: 0.0,
        }
    }
}

/// Which transformation family a dataset carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairKind {
    Affine,
    Tps,
}

impl PairKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PairKind::Affine => "affine",
            PairKind::Tps => "tps",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "affine" => Ok(PairKind::Affine),
            "tps" => Ok(PairKind::Tps),
            other => Err(Error::invalid(format!("unknown pair kind '{other}'"))),
        }
    }
}

/// One supervised pair.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub image_a: Tensor,
    pub image_b: Tensor,
    pub theta_gt: TransformParams,
    pub source_id: String,
}

/// Deterministic per-item seed derivation (splitmix64 over seed and index).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(0x9E3779B97F4A7C15)))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Mirror-pad an image by half its extent on each side (edge-inclusive
/// symmetric reflection). A `[S, S, c]` image becomes `[2S, 2S, c]` and its
/// central crop is the original.
pub fn pad_symmetric(image: &Tensor) -> Result<Tensor> {
    let (h, w, c) = image.dims3()?;
    let (ph, pw) = (h / 2, w / 2);
    let (oh, ow) = (h + 2 * ph, w + 2 * pw);
    let src = image.data();
    let mut out = Tensor::zeros(&[oh, ow, c]);
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        if i < 0 {
            i = -i - 1;
        }
        if i >= n {
            i = 2 * n - 1 - i;
        }
        i as usize
    };
    let od = out.data_mut();
    for v in 0..oh {
        let sv = reflect(v as isize - ph as isize, h);
        for u in 0..ow {
            let su = reflect(u as isize - pw as isize, w);
            let sbase = (sv * w + su) * c;
            let obase = (v * ow + u) * c;
            od[obase..obase + c].copy_from_slice(&src[sbase..sbase + c]);
        }
    }
    Ok(out)
}

/// Transform mapping crop-frame coordinates into the padded context's frame:
/// the crop spans half the padded extent, so the composition is
/// `scale(1/2) ∘ theta`.
pub fn context_transform(theta: &TransformParams) -> Result<TransformParams> {
    let halve = TransformParams::Affine(AffineParams {
        a11: 0.5,
        a22: 0.5,
        ..AffineParams::identity()
    });
    compose(&halve, theta)
}

/// Re-create image B from image A and the stored ground truth: pad A back
/// into its context and warp with the composed transform.
pub fn rewarp(image_a: &Tensor, theta_gt: &TransformParams) -> Result<Tensor> {
    let (h, w, _) = image_a.dims3()?;
    let padded = pad_symmetric(image_a)?;
    resampler::warp(&padded, &context_transform(theta_gt)?, (h, w))
}

/// Decomposed affine sample; composes as rotation ∘ shear ∘ scale plus
/// translation.
#[derive(Clone, Copy, Debug)]
pub struct AffineComponents {
    pub scale_x: Scalar,
    pub scale_y: Scalar,
    pub rotation: Scalar,
    pub shear: Scalar,
    pub tx: Scalar,
    pub ty: Scalar,
}

impl AffineComponents {
    pub fn to_affine(self) -> AffineParams {
        let (s, c) = self.rotation.sin_cos();
        // R * Sh * S with Sh = [[1, shear], [0, 1]], S = diag(sx, sy).
        let m11 = c * self.scale_x;
        let m12 = (c * self.shear - s) * self.scale_y;
        let m21 = s * self.scale_x;
        let m22 = (s * self.shear + c) * self.scale_y;
        AffineParams {
            a11: m11,
            a12: m12,
            a21: m21,
            a22: m22,
            tx: self.tx,
            ty: self.ty,
        }
    }
}

/// Draw affine components uniformly within `ranges` (scales log-uniform).
pub fn sample_affine_components(ranges: &SamplingRanges, rng: &mut ChaCha8Rng) -> AffineComponents {
    let log_s = ranges.scale_max.max(1.0).ln();
    let draw_scale = |rng: &mut ChaCha8Rng| {
        if log_s == 0.0 {
            1.0
        } else {
            rng.gen_range(-log_s..=log_s).exp()
        }
    };
    let sym = |rng: &mut ChaCha8Rng, m: Scalar| {
        if m == 0.0 {
            0.0
        } else {
            rng.gen_range(-m..=m)
        }
    };
    let scale_x = draw_scale(rng);
    let scale_y = draw_scale(rng);
    AffineComponents {
        scale_x,
        scale_y,
        rotation: sym(rng, ranges.rot_max),
        shear: sym(rng, ranges.shear_max),
        tx: sym(rng, ranges.trans_max),
        ty: sym(rng, ranges.trans_max),
    }
}

fn sample_theta(kind: PairKind, ranges: &SamplingRanges, rng: &mut ChaCha8Rng) -> TransformParams {
    match kind {
        PairKind::Affine => {
            TransformParams::Affine(sample_affine_components(ranges, rng).to_affine())
        }
        PairKind::Tps => {
            let mut t = TpsParams::identity();
            if ranges.tps_jitter > 0.0 {
                for v in t.target_coords.iter_mut() {
                    *v += rng.gen_range(-ranges.tps_jitter..=ranges.tps_jitter);
                }
            }
            TransformParams::Tps(t)
        }
    }
}

/// The sampled warp must read only inside the padded context (with a small
/// bilinear-footprint margin), checked on a dense grid over the crop.
fn stays_in_context(theta: &TransformParams, crop: usize) -> Result<bool> {
    const STEPS: usize = 33;
    let mut pts = Vec::with_capacity(STEPS * STEPS);
    for iy in 0..STEPS {
        for ix in 0..STEPS {
            pts.push((
                -1.0 + 2.0 * ix as Scalar / (STEPS - 1) as Scalar,
                -1.0 + 2.0 * iy as Scalar / (STEPS - 1) as Scalar,
            ));
        }
    }
    let mapped = crate::transforms::apply_points(theta, &pts)?;
    let bound = 2.0 - 3.0 / crop as Scalar;
    Ok(mapped
        .iter()
        .all(|&(x, y)| x.abs() <= bound && y.abs() <= bound))
}

/// Generate one training pair; deterministic given `rng_seed`.
pub fn generate_pair(
    source: &Tensor,
    kind: PairKind,
    ranges: &SamplingRanges,
    crop: usize,
    rng_seed: u64,
    source_id: &str,
) -> Result<TrainingPair> {
    let (h, w, _) = source.dims3()?;
    if h < crop || w < crop {
        return Err(Error::invalid(format!(
            "source {source_id} is {h}x{w}, smaller than crop {crop}"
        )));
    }
    let original = if h == crop && w == crop {
        source.clone()
    } else {
        resampler::warp(source, &TransformParams::identity_affine(), (crop, crop))?
    };
    let padded = pad_symmetric(&original)?;

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut last = None;
    for _attempt in 0..MAX_SAMPLE_ATTEMPTS {
        let theta = sample_theta(kind, ranges, &mut rng);
        if stays_in_context(&theta, crop)? {
            let image_b =
                resampler::warp(&padded, &context_transform(&theta)?, (crop, crop))?;
            return Ok(TrainingPair {
                image_a: original,
                image_b,
                theta_gt: theta,
                source_id: source_id.to_string(),
            });
        }
        last = Some(theta);
    }
    Err(Error::Generation {
        attempts: MAX_SAMPLE_ATTEMPTS,
        detail: format!(
            "no in-context transform for {source_id}; last rejected: {last:?}"
        ),
    })
}

/// One line of a dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub pair_id: String,
    pub image_a_path: String,
    pub image_b_path: String,
    pub kind: PairKind,
    pub theta: Vec<Scalar>,
    pub sub_seed: u64,
    pub split: String,
}

impl ManifestRecord {
    pub fn theta_gt(&self) -> Result<TransformParams> {
        Ok(match self.kind {
            PairKind::Affine => TransformParams::Affine(AffineParams::from_slice(&self.theta)?),
            PairKind::Tps => TransformParams::Tps(TpsParams::from_slice(&self.theta)?),
        })
    }
}

/// Dataset manifest: line-delimited JSON records plus the directory they
/// resolve against.
#[derive(Clone, Debug)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    pub root: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let file = std::fs::File::open(path)?;
        let reader = std::io::BufReader::new(file);
        let mut records = Vec::new();
        for (ln, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Manifest(format!("line {}: {e}", ln + 1)))?;
            records.push(rec);
        }
        let root = path
            .parent()
            .map(|p| p.to_path_buf())
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(Manifest { records, root })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        for rec in &self.records {
            let line = serde_json::to_string(rec)
                .map_err(|e| Error::Manifest(e.to_string()))?;
            writeln!(file, "{line}")?;
        }
        Ok(())
    }

    pub fn split(&self, split: &str) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

fn list_sources(source_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut sources: Vec<PathBuf> = std::fs::read_dir(source_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map(|e| e.eq_ignore_ascii_case("png"))
                .unwrap_or(false)
        })
        .collect();
    sources.sort();
    if sources.is_empty() {
        return Err(Error::invalid(format!(
            "no PNG sources in {}",
            source_dir.display()
        )));
    }
    Ok(sources)
}

/// Generate a dataset on disk: PNG pairs plus a JSONL manifest.
///
/// Train and validation pairs draw from disjoint source images. Pair i of a
/// split uses sub-seed `derive_seed(seed, global_index)`, so regeneration
/// with the same seed is byte-identical regardless of parallelism.
#[allow(clippy::too_many_arguments)]
pub fn generate_dataset(
    source_dir: &Path,
    n_train: usize,
    n_val: usize,
    kind: PairKind,
    ranges: &SamplingRanges,
    crop: usize,
    out_dir: &Path,
    seed: u64,
) -> Result<Manifest> {
    let sources = list_sources(source_dir)?;
    let image_dir = out_dir.join("images");
    std::fs::create_dir_all(&image_dir)?;

    // Disjoint source assignment between the splits.
    let mut order: Vec<usize> = (0..sources.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX));
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let (train_sources, val_sources): (Vec<usize>, Vec<usize>) = if n_train == 0 {
        (Vec::new(), order)
    } else if n_val == 0 {
        (order, Vec::new())
    } else {
        if sources.len() < 2 {
            return Err(Error::invalid(
                "need at least two source images for disjoint train/val splits",
            ));
        }
        let k = ((sources.len() * n_train) / (n_train + n_val)).clamp(1, sources.len() - 1);
        (order[..k].to_vec(), order[k..].to_vec())
    };

    struct Job {
        pair_id: String,
        split: &'static str,
        source_idx: usize,
        sub_seed: u64,
    }
    let mut jobs = Vec::with_capacity(n_train + n_val);
    for i in 0..n_train {
        jobs.push(Job {
            pair_id: format!("train_{i:06}"),
            split: "train",
            source_idx: train_sources[i % train_sources.len()],
            sub_seed: derive_seed(seed, jobs.len() as u64),
        });
    }
    for i in 0..n_val {
        jobs.push(Job {
            pair_id: format!("val_{i:06}"),
            split: "val",
            source_idx: val_sources[i % val_sources.len()],
            sub_seed: derive_seed(seed, jobs.len() as u64),
        });
    }

    let results: Vec<Result<ManifestRecord>> = par::map_indexed(jobs.len(), |ji| {
        let job = &jobs[ji];
        let src_path = &sources[job.source_idx];
        let source = io::load_image(src_path)?;
        let source_id = src_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("src{}", job.source_idx));
        let pair = generate_pair(&source, kind, ranges, crop, job.sub_seed, &source_id)?;
        let a_rel = format!("images/{}_A.png", job.pair_id);
        let b_rel = format!("images/{}_B.png", job.pair_id);
        io::save_image(&pair.image_a, &out_dir.join(&a_rel))?;
        io::save_image(&pair.image_b, &out_dir.join(&b_rel))?;
        Ok(ManifestRecord {
            pair_id: job.pair_id.clone(),
            image_a_path: a_rel,
            image_b_path: b_rel,
            kind,
            theta: pair.theta_gt.to_vec(),
            sub_seed: job.sub_seed,
            split: job.split.to_string(),
        })
    });
    let mut records = Vec::with_capacity(results.len());
    for r in results {
        records.push(r?);
    }
    let manifest = Manifest {
        records,
        root: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// Smooth random RGB texture: a low-frequency color gradient plus a handful
/// of soft blobs. Localized structure keeps the correlation layer's matches
/// unambiguous, and smoothness keeps bilinear warps faithful.
pub fn synth_source_image(size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Tensor::zeros(&[size, size, 3]);
    let mut base = [0.0; 6];
    for v in base.iter_mut() {
        *v = rng.gen_range(-0.25..0.25);
    }
    let mid: [Scalar; 3] = [
        rng.gen_range(0.3..0.7),
        rng.gen_range(0.3..0.7),
        rng.gen_range(0.3..0.7),
    ];
    struct Blob {
        cx: Scalar,
        cy: Scalar,
        inv2s2: Scalar,
        color: [Scalar; 3],
    }
    let n_blobs = rng.gen_range(14..22);
    let blobs: Vec<Blob> = (0..n_blobs)
        .map(|_| {
            let sigma = rng.gen_range(0.04..0.18);
            Blob {
                cx: rng.gen_range(-1.0..1.0),
                cy: rng.gen_range(-1.0..1.0),
                inv2s2: 1.0 / (2.0 * sigma * sigma),
                color: [
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                ],
            }
        })
        .collect();
    let d = img.data_mut();
    for v in 0..size {
        let y = 2.0 * (v as Scalar + 0.5) / size as Scalar - 1.0;
        for u in 0..size {
            let x = 2.0 * (u as Scalar + 0.5) / size as Scalar - 1.0;
            for ch in 0..3 {
                let mut val = mid[ch] + base[ch * 2] * x + base[ch * 2 + 1] * y;
                for b in &blobs {
                    let r2 = (x - b.cx) * (x - b.cx) + (y - b.cy) * (y - b.cy);
                    val += b.color[ch] * (-r2 * b.inv2s2).exp();
                }
                d[(v * size + u) * 3 + ch] = val.clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Write `count` synthetic source textures into `dir`.
pub fn write_synthetic_sources(
    dir: &Path,
    count: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(count);
    for i in 0..count {
        let img = synth_source_image(size, derive_seed(seed, i as u64));
        let path = dir.join(format!("source_{i:04}.png"));
        io::save_image(&img, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transforms::grid_loss;

    #[test]
    fn zero_ranges_give_identity_pair() {
        let src = synth_source_image(32, 1);
        let pair = generate_pair(&src, PairKind::Affine, &SamplingRanges::zero(), 32, 7, "s").unwrap();
        assert_eq!(pair.theta_gt, TransformParams::identity_affine());
        assert!(pair.image_b.max_abs_diff(&pair.image_a) < 1e-12);

        let pair = generate_pair(&src, PairKind::Tps, &SamplingRanges::zero(), 32, 7, "s").unwrap();
        assert!(pair.image_b.max_abs_diff(&pair.image_a) < 1e-9);
    }

    #[test]
    fn pure_translation_shifts_crop() {
        // A one-pixel translation in the crop frame reads the padded source
        // one pixel over, which is the unpadded source shifted.
        let crop = 32;
        let src = synth_source_image(crop, 2);
        let padded = pad_symmetric(&src).unwrap();
        let theta = TransformParams::Affine(AffineParams::translation(2.0 / crop as f64, 0.0));
        let b = resampler::warp(&padded, &context_transform(&theta).unwrap(), (crop, crop)).unwrap();
        for v in 0..crop {
            for u in 0..crop - 1 {
                let got = b.data()[(v * crop + u) * 3];
                let want = src.data()[(v * crop + u + 1) * 3];
                assert!((got - want).abs() < 1e-12, "pixel ({v},{u})");
            }
        }
    }

    #[test]
    fn rewarp_reproduces_image_b() {
        let src = synth_source_image(48, 3);
        for seed in 0..5 {
            let pair =
                generate_pair(&src, PairKind::Affine, &SamplingRanges::default(), 32, seed, "s")
                    .unwrap();
            let re = rewarp(&pair.image_a, &pair.theta_gt).unwrap();
            assert!(re.max_abs_diff(&pair.image_b) < 1e-9);

            let pair =
                generate_pair(&src, PairKind::Tps, &SamplingRanges::default(), 32, seed, "s")
                    .unwrap();
            let re = rewarp(&pair.image_a, &pair.theta_gt).unwrap();
            assert!(re.max_abs_diff(&pair.image_b) < 1e-9);
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let src = synth_source_image(40, 4);
        let p1 = generate_pair(&src, PairKind::Tps, &SamplingRanges::default(), 32, 99, "s").unwrap();
        let p2 = generate_pair(&src, PairKind::Tps, &SamplingRanges::default(), 32, 99, "s").unwrap();
        assert_eq!(p1.theta_gt, p2.theta_gt);
        assert_eq!(p1.image_b, p2.image_b);
        assert!(grid_loss(&p1.theta_gt, &p2.theta_gt).unwrap() == 0.0);
    }

    #[test]
    fn sampled_components_respect_ranges() {
        let ranges = SamplingRanges::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            let c = sample_affine_components(&ranges, &mut rng);
            assert!(c.scale_x >= 1.0 / ranges.scale_max - 1e-12);
            assert!(c.scale_x <= ranges.scale_max + 1e-12);
            assert!(c.scale_y >= 1.0 / ranges.scale_max - 1e-12);
            assert!(c.scale_y <= ranges.scale_max + 1e-12);
            assert!(c.rotation.abs() <= ranges.rot_max);
            assert!(c.shear.abs() <= ranges.shear_max);
            assert!(c.tx.abs() <= ranges.trans_max && c.ty.abs() <= ranges.trans_max);
        }
    }

    #[test]
    fn padded_central_crop_is_original() {
        let src = synth_source_image(20, 6);
        let padded = pad_symmetric(&src).unwrap();
        assert_eq!(padded.shape(), &[40, 40, 3]);
        for v in 0..20 {
            for u in 0..20 {
                for ch in 0..3 {
                    assert_eq!(
                        padded.data()[((v + 10) * 40 + (u + 10)) * 3 + ch],
                        src.data()[(v * 20 + u) * 3 + ch]
                    );
                }
            }
        }
    }

    #[test]
    fn dataset_generation_roundtrip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let src_dir = dir.path().join("src");
        write_synthetic_sources(&src_dir, 4, 32, 11).unwrap();

        let out1 = dir.path().join("d1");
        let m1 = generate_dataset(
            &src_dir,
            6,
            3,
            PairKind::Affine,
            &SamplingRanges::default(),
            32,
            &out1,
            42,
        )
        .unwrap();
        assert_eq!(m1.split("train").len(), 6);
        assert_eq!(m1.split("val").len(), 3);

        let out2 = dir.path().join("d2");
        generate_dataset(
            &src_dir,
            6,
            3,
            PairKind::Affine,
            &SamplingRanges::default(),
            32,
            &out2,
            42,
        )
        .unwrap();
        let bytes1 = std::fs::read(out1.join("manifest.jsonl")).unwrap();
        let bytes2 = std::fs::read(out2.join("manifest.jsonl")).unwrap();
        assert_eq!(bytes1, bytes2, "same seed must give identical manifests");

        // Re-warp every stored pair from disk within one 8-bit level.
        let loaded = Manifest::load(&out1.join("manifest.jsonl")).unwrap();
        for rec in &loaded.records {
            let a = io::load_image(&loaded.resolve(&rec.image_a_path)).unwrap();
            let b = io::load_image(&loaded.resolve(&rec.image_b_path)).unwrap();
            let re = rewarp(&a, &rec.theta_gt().unwrap()).unwrap();
            assert!(
                re.max_abs_diff(&b) <= 1.0 / 255.0 + 1e-9,
                "pair {} drifted beyond one intensity level",
                rec.pair_id
            );
        }
    }

    #[test]
    fn empty_train_split_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let src_dir = dir.path().join("src");
        write_synthetic_sources(&src_dir, 2, 32, 1).unwrap();
        let m = generate_dataset(
            &src_dir,
            0,
            2,
            PairKind::Tps,
            &SamplingRanges::default(),
            32,
            &dir.path().join("out"),
            5,
        )
        .unwrap();
        assert_eq!(m.split("train").len(), 0);
        assert_eq!(m.split("val").len(), 2);
    }

    #[test]
    fn source_smaller_than_crop_is_rejected() {
        let src = synth_source_image(16, 1);
        assert!(matches!(
            generate_pair(&src, PairKind::Affine, &SamplingRanges::default(), 32, 1, "s"),
            Err(Error::InvalidArgument(_))
        ));
    }
}
