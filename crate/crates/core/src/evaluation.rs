//! Benchmark harness: keypoint transfer with PCK, mask-transfer metrics,
//! a RANSAC baseline over the same dense descriptors, and descriptor-space
//! difference maps.
//!
//! Estimated transformations map B-frame coordinates into A's frame (the
//! sampling direction), so transferring keypoints from A to B goes through
//! the transform inverse.

use crate::error::{Error, Result};
use crate::io;
use crate::network::{
    estimate_affine, estimate_two_stage, prepare_image, GeometryModel,
};
use crate::par;
use crate::resampler::{normalized_to_pixel, pixel_to_normalized, warp, warp_nearest};
use crate::synthgen::{derive_seed, Manifest, PairKind};
use crate::tensor::{Scalar, Tensor};
use crate::transforms::{
    apply_point, grid_loss, invert, AffineParams, InvertedPoint, TpsParams, TransformParams,
};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

/// Fraction of `predicted` keypoints within `alpha * max(h, w)` of their
/// targets (inclusive threshold), `h, w` from the object bounding box.
pub fn pck(
    predicted: &[(Scalar, Scalar)],
    target: &[(Scalar, Scalar)],
    bbox_hw: (Scalar, Scalar),
    alpha: Scalar,
) -> Result<Scalar> {
    if predicted.len() != target.len() {
        return Err(Error::invalid(format!(
            "pck got {} predictions for {} targets",
            predicted.len(),
            target.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::UndefinedMetric("pck over an empty keypoint set".into()));
    }
    let thresh = alpha * bbox_hw.0.max(bbox_hw.1);
    let correct = predicted
        .iter()
        .zip(target.iter())
        .filter(|(p, t)| {
            let d = ((p.0 - t.0).powi(2) + (p.1 - t.1).powi(2)).sqrt();
            d <= thresh
        })
        .count();
    Ok(correct as Scalar / predicted.len() as Scalar)
}

/// Map keypoints (pixels in image A) into image B through the inverse of
/// `theta`. Per-point inversion failures are flagged, not fatal.
pub fn transfer_keypoints(
    theta: &TransformParams,
    keypoints_a: &[(Scalar, Scalar)],
    size_a: (usize, usize),
    size_b: (usize, usize),
) -> Result<Vec<InvertedPoint>> {
    let normalized: Vec<(Scalar, Scalar)> = keypoints_a
        .iter()
        .map(|&(x, y)| {
            (
                pixel_to_normalized(x, size_a.1),
                pixel_to_normalized(y, size_a.0),
            )
        })
        .collect();
    let inverted = invert(theta, &normalized)?;
    Ok(inverted
        .into_iter()
        .map(|p| InvertedPoint {
            x: normalized_to_pixel(p.x, size_b.1),
            y: normalized_to_pixel(p.y, size_b.0),
            converged: p.converged,
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskMetrics {
    pub lt_acc: Scalar,
    pub iou: Scalar,
}

/// Warp `mask_a` into B's frame (nearest neighbor, labels stay binary) and
/// score label-transfer accuracy and foreground intersection-over-union.
pub fn mask_transfer_metrics(
    theta: &TransformParams,
    mask_a: &Tensor,
    mask_b: &Tensor,
) -> Result<MaskMetrics> {
    let (hb, wb, _) = mask_b.dims3()?;
    let warped = warp_nearest(mask_a, theta, (hb, wb))?;
    let mut agree = 0usize;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (w, b) in warped.data().iter().zip(mask_b.data().iter()) {
        let w = *w >= 0.5;
        let b = *b >= 0.5;
        if w == b {
            agree += 1;
        }
        if w && b {
            inter += 1;
        }
        if w || b {
            union += 1;
        }
    }
    if union == 0 {
        return Err(Error::UndefinedMetric(
            "mask IoU undefined: both foregrounds empty".into(),
        ));
    }
    Ok(MaskMetrics {
        lt_acc: agree as Scalar / warped.len() as Scalar,
        iou: inter as Scalar / union as Scalar,
    })
}

// --- RANSAC baseline --------------------------------------------------------

/// One tentative correspondence in normalized coordinates: a B-frame
/// position matched to an A-frame position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub from: (Scalar, Scalar),
    pub to: (Scalar, Scalar),
}

/// Hypothesis pruning bounds; hypotheses whose singular values or
/// translation leave these ranges are discarded before inlier counting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeFilter {
    pub scale_max: Scalar,
    pub trans_max: Scalar,
}

impl Default for RangeFilter {
    fn default() -> Self {
        RangeFilter {
            scale_max: 2.5,
            trans_max: 0.6,
        }
    }
}

impl RangeFilter {
    fn accepts(&self, a: &AffineParams) -> bool {
        // Singular values of the 2x2 linear part via the eigenvalues of A^T A.
        let (m11, m12, m21, m22) = (a.a11, a.a12, a.a21, a.a22);
        let t = m11 * m11 + m12 * m12 + m21 * m21 + m22 * m22;
        let d = (m11 * m22 - m12 * m21).powi(2);
        let disc = (t * t - 4.0 * d).max(0.0).sqrt();
        let s_max = ((t + disc) / 2.0).sqrt();
        let s_min = ((t - disc) / 2.0).max(0.0).sqrt();
        s_max <= self.scale_max
            && s_min >= 1.0 / self.scale_max
            && a.tx.abs() <= self.trans_max
            && a.ty.abs() <= self.trans_max
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    /// Second-nearest-neighbor ratio: keep matches with d1 <= ratio * d2.
    pub snn_ratio: Scalar,
    pub iterations: usize,
    /// Inlier tolerance in normalized units.
    pub inlier_tol: Scalar,
    pub seed: u64,
    pub range_filter: Option<RangeFilter>,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            snn_ratio: 0.9,
            iterations: 1000,
            inlier_tol: 0.05,
            seed: 0,
            range_filter: Some(RangeFilter::default()),
        }
    }
}

/// Tentative correspondences between two dense descriptor maps: a pair is
/// kept when it is a mutual nearest neighbor or passes the
/// second-nearest-neighbor ratio test.
pub fn tentative_matches(
    f_a: &Tensor,
    f_b: &Tensor,
    snn_ratio: Scalar,
) -> Result<Vec<Correspondence>> {
    if f_a.shape() != f_b.shape() {
        return Err(Error::invalid(format!(
            "descriptor maps differ: {:?} vs {:?}",
            f_a.shape(),
            f_b.shape()
        )));
    }
    let (h, w, d) = f_a.dims3()?;
    let n = h * w;
    let ad = f_a.data();
    let bd = f_b.data();
    let dist2 = |p: usize, q: usize| -> Scalar {
        let pa = &ad[q * d..(q + 1) * d];
        let pb = &bd[p * d..(p + 1) * d];
        pa.iter()
            .zip(pb.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum()
    };
    // Best A index per B position and vice versa.
    let best_for_b: Vec<(usize, Scalar, Scalar)> = par::map_indexed(n, |p| {
        let mut b1 = (0usize, Scalar::INFINITY);
        let mut d2 = Scalar::INFINITY;
        for q in 0..n {
            let dd = dist2(p, q);
            if dd < b1.1 {
                d2 = b1.1;
                b1 = (q, dd);
            } else if dd < d2 {
                d2 = dd;
            }
        }
        (b1.0, b1.1, d2)
    });
    let best_for_a: Vec<usize> = par::map_indexed(n, |q| {
        let mut best = (0usize, Scalar::INFINITY);
        for p in 0..n {
            let dd = dist2(p, q);
            if dd < best.1 {
                best = (p, dd);
            }
        }
        best.0
    });

    let mut out = Vec::new();
    for p in 0..n {
        let (q, d1, d2) = best_for_b[p];
        let mutual = best_for_a[q] == p;
        let ratio_ok = d1 <= snn_ratio * snn_ratio * d2;
        if mutual || ratio_ok {
            let (pb_r, pb_c) = (p / w, p % w);
            let (pa_r, pa_c) = (q / w, q % w);
            out.push(Correspondence {
                from: (
                    pixel_to_normalized(pb_c as Scalar, w),
                    pixel_to_normalized(pb_r as Scalar, h),
                ),
                to: (
                    pixel_to_normalized(pa_c as Scalar, w),
                    pixel_to_normalized(pa_r as Scalar, h),
                ),
            });
        }
    }
    Ok(out)
}

fn affine_from_three(m: &[Correspondence; 3]) -> Option<AffineParams> {
    let design = Matrix3::new(
        m[0].from.0, m[0].from.1, 1.0,
        m[1].from.0, m[1].from.1, 1.0,
        m[2].from.0, m[2].from.1, 1.0,
    );
    let lu = design.lu();
    let cx = lu.solve(&Vector3::new(m[0].to.0, m[1].to.0, m[2].to.0))?;
    let cy = lu.solve(&Vector3::new(m[0].to.1, m[1].to.1, m[2].to.1))?;
    let a = AffineParams {
        a11: cx[0],
        a12: cx[1],
        tx: cx[2],
        a21: cy[0],
        a22: cy[1],
        ty: cy[2],
    };
    a.to_array().iter().all(|v| v.is_finite()).then_some(a)
}

fn least_squares_affine(matches: &[Correspondence], idxs: &[usize]) -> Option<AffineParams> {
    let mut m = Matrix3::zeros();
    let mut rx = Vector3::zeros();
    let mut ry = Vector3::zeros();
    for &i in idxs {
        let (x, y) = matches[i].from;
        let row = Vector3::new(x, y, 1.0);
        m += row * row.transpose();
        rx += row * matches[i].to.0;
        ry += row * matches[i].to.1;
    }
    let lu = m.lu();
    let cx = lu.solve(&rx)?;
    let cy = lu.solve(&ry)?;
    Some(AffineParams {
        a11: cx[0],
        a12: cx[1],
        tx: cx[2],
        a21: cy[0],
        a22: cy[1],
        ty: cy[2],
    })
}

fn inliers_of(matches: &[Correspondence], a: &AffineParams, tol: Scalar) -> Vec<usize> {
    let tol2 = tol * tol;
    matches
        .iter()
        .enumerate()
        .filter(|(_, c)| {
            let p = a.apply(c.from);
            (p.0 - c.to.0).powi(2) + (p.1 - c.to.1).powi(2) <= tol2
        })
        .map(|(i, _)| i)
        .collect()
}

/// RANSAC over a tentative correspondence set: minimal three-point affine
/// hypotheses, optional range pruning, inlier maximization, least-squares
/// refit on the winning inlier set.
pub fn ransac_from_matches(
    matches: &[Correspondence],
    config: &RansacConfig,
) -> Result<(AffineParams, Vec<usize>)> {
    if matches.len() < 3 {
        return Err(Error::Estimation(format!(
            "RANSAC needs at least 3 tentative correspondences, got {}",
            matches.len()
        )));
    }
    let n = matches.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let samples: Vec<[usize; 3]> = (0..config.iterations)
        .map(|_| {
            let i = rng.gen_range(0..n);
            let mut j = rng.gen_range(0..n);
            while j == i {
                j = rng.gen_range(0..n);
            }
            let mut k = rng.gen_range(0..n);
            while k == i || k == j {
                k = rng.gen_range(0..n);
            }
            [i, j, k]
        })
        .collect();

    let scores: Vec<usize> = par::map_indexed(samples.len(), |s| {
        let [i, j, k] = samples[s];
        let Some(hyp) = affine_from_three(&[matches[i], matches[j], matches[k]]) else {
            return 0;
        };
        if let Some(filter) = &config.range_filter {
            if !filter.accepts(&hyp) {
                return 0;
            }
        }
        inliers_of(matches, &hyp, config.inlier_tol).len()
    });
    let (best_iter, &best_count) = scores
        .iter()
        .enumerate()
        .max_by_key(|&(i, &c)| (c, std::cmp::Reverse(i)))
        .expect("iterations >= 1");
    if best_count < 3 {
        return Err(Error::Estimation(
            "no hypothesis reached 3 inliers".into(),
        ));
    }
    let [i, j, k] = samples[best_iter];
    let hyp = affine_from_three(&[matches[i], matches[j], matches[k]])
        .expect("winning hypothesis solvable");
    let support = inliers_of(matches, &hyp, config.inlier_tol);
    let refit = least_squares_affine(matches, &support)
        .ok_or_else(|| Error::Estimation("degenerate inlier set in refit".into()))?;
    let final_inliers = inliers_of(matches, &refit, config.inlier_tol);
    Ok((refit, final_inliers))
}

/// Full RANSAC baseline over dense feature maps.
pub fn ransac_affine(
    f_a: &Tensor,
    f_b: &Tensor,
    config: &RansacConfig,
) -> Result<(AffineParams, Vec<Correspondence>)> {
    let matches = tentative_matches(f_a, f_b, config.snn_ratio)?;
    let (affine, inliers) = ransac_from_matches(&matches, config)?;
    Ok((affine, inliers.into_iter().map(|i| matches[i]).collect()))
}

// --- Difference maps --------------------------------------------------------

/// Descriptor-space difference between image B and image A warped by
/// `theta`: per-location L2 distance of the two feature maps, bilinearly
/// upsampled to B's resolution and normalized to `[0, 1]`.
pub fn difference_map(
    image_a: &Tensor,
    image_b: &Tensor,
    theta: &TransformParams,
    model: &GeometryModel,
) -> Result<Tensor> {
    let size = model.config.input_size;
    let (hb, wb, _) = image_b.dims3()?;
    let a = prepare_image(image_a, size)?;
    let warped = warp(&a, theta, (size, size))?;
    let f_w = model.extract_features(&warped)?;
    let f_b = model.extract_features(&prepare_image(image_b, size)?)?;
    let (mh, mw, d) = f_w.dims3()?;
    let mut heat = Tensor::zeros(&[mh, mw, 1]);
    for loc in 0..mh * mw {
        let mut acc = 0.0;
        for t in 0..d {
            let diff = f_w.data()[loc * d + t] - f_b.data()[loc * d + t];
            acc += diff * diff;
        }
        heat.data_mut()[loc] = acc.sqrt();
    }
    let up = warp(&heat, &TransformParams::identity_affine(), (hb, wb))?;
    let lo = up.data().iter().cloned().fold(Scalar::INFINITY, Scalar::min);
    let hi = up.data().iter().cloned().fold(Scalar::NEG_INFINITY, Scalar::max);
    if hi - lo < 1e-15 {
        return Ok(Tensor::zeros(&[hb, wb, 1]));
    }
    Ok(up.map(|v| (v - lo) / (hi - lo)))
}

// --- Benchmark records and harness -------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaGt {
    pub kind: PairKind,
    pub values: Vec<Scalar>,
}

/// One benchmark pair: images, matched keypoint lists, the object bounding
/// box in B, optional segmentation masks, and (for synthetic benchmarks) the
/// ground-truth transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub pair_id: String,
    pub image_a_path: String,
    pub image_b_path: String,
    /// Matched keypoints in pixel units; index i of A corresponds to index
    /// i of B.
    pub keypoints_a: Vec<(Scalar, Scalar)>,
    pub keypoints_b: Vec<(Scalar, Scalar)>,
    /// Object bounding box in B: (x, y, w, h) pixels.
    pub bbox_b: (Scalar, Scalar, Scalar, Scalar),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_a_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_b_path: Option<String>,
    pub category: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_gt: Option<ThetaGt>,
}

impl EvalRecord {
    pub fn ground_truth(&self) -> Result<Option<TransformParams>> {
        match &self.theta_gt {
            None => Ok(None),
            Some(t) => Ok(Some(match t.kind {
                PairKind::Affine => {
                    TransformParams::Affine(AffineParams::from_slice(&t.values)?)
                }
                PairKind::Tps => TransformParams::Tps(TpsParams::from_slice(&t.values)?),
            })),
        }
    }
}

/// A set of benchmark records plus the directory their paths resolve
/// against.
#[derive(Clone, Debug)]
pub struct BenchmarkSet {
    pub records: Vec<EvalRecord>,
    pub root: PathBuf,
}

impl BenchmarkSet {
    pub fn load(path: &Path) -> Result<BenchmarkSet> {
        let file = std::fs::File::open(path)?;
        let reader = std::io::BufReader::new(file);
        let mut records = Vec::new();
        for (ln, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(&line)
                    .map_err(|e| Error::Manifest(format!("record line {}: {e}", ln + 1)))?,
            );
        }
        let root = path
            .parent()
            .map(|p| p.to_path_buf())
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(BenchmarkSet { records, root })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        for rec in &self.records {
            writeln!(
                file,
                "{}",
                serde_json::to_string(rec).map_err(|e| Error::Manifest(e.to_string()))?
            )?;
        }
        Ok(())
    }
}

/// How the benchmark estimates each pair's transformation.
pub enum EstimatorKind<'a> {
    /// Predict the identity for every pair (floor baseline).
    Identity,
    /// Use the record's stored ground truth (ceiling oracle).
    GtOracle,
    /// Learned stage(s): affine, optional second affine for the ensemble,
    /// optional TPS refinement stage.
    Learned {
        affine: &'a GeometryModel,
        affine_second: Option<&'a GeometryModel>,
        tps: Option<&'a GeometryModel>,
    },
    /// RANSAC over the extractor's dense descriptors.
    Ransac {
        extractor: &'a GeometryModel,
        config: RansacConfig,
    },
}

impl EstimatorKind<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::Identity => "identity",
            EstimatorKind::GtOracle => "gt-oracle",
            EstimatorKind::Learned { .. } => "learned",
            EstimatorKind::Ransac { .. } => "ransac",
        }
    }

    fn estimate(
        &self,
        record: &EvalRecord,
        image_a: &Tensor,
        image_b: &Tensor,
        record_index: usize,
    ) -> Result<TransformParams> {
        match self {
            EstimatorKind::Identity => Ok(TransformParams::identity_affine()),
            EstimatorKind::GtOracle => record.ground_truth()?.ok_or_else(|| {
                Error::invalid(format!(
                    "record {} has no stored ground truth for the oracle estimator",
                    record.pair_id
                ))
            }),
            EstimatorKind::Learned {
                affine,
                affine_second,
                tps,
            } => match tps {
                None => Ok(TransformParams::Affine(estimate_affine(
                    affine,
                    *affine_second,
                    image_a,
                    image_b,
                )?)),
                Some(tps) => estimate_two_stage(affine, *affine_second, tps, image_a, image_b),
            },
            EstimatorKind::Ransac { extractor, config } => {
                let f_a = extractor.extract_features(image_a)?;
                let f_b = extractor.extract_features(image_b)?;
                let per_record = RansacConfig {
                    seed: derive_seed(config.seed, record_index as u64),
                    ..*config
                };
                let (affine, _) = ransac_affine(&f_a, &f_b, &per_record)?;
                Ok(TransformParams::Affine(affine))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairOutcome {
    pub pair_id: String,
    pub category: String,
    pub n_keypoints: usize,
    pub correct_keypoints: usize,
    pub pck: Option<Scalar>,
    pub lt_acc: Option<Scalar>,
    pub iou: Option<Scalar>,
    pub grid_loss_vs_gt: Option<Scalar>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub pairs_evaluated: usize,
    pub failures: usize,
    /// Mean of per-pair PCK values.
    pub mean_pck_per_pair: Scalar,
    /// PCK pooled over every keypoint of every pair.
    pub pooled_pck: Scalar,
    pub mean_lt_acc: Option<Scalar>,
    pub mean_iou: Option<Scalar>,
    pub mean_grid_loss: Option<Scalar>,
}

#[derive(Clone, Debug)]
pub struct BenchmarkReport {
    pub rows: Vec<PairOutcome>,
    pub aggregate: Aggregate,
}

impl BenchmarkReport {
    /// CSV with one row per pair and two aggregate rows (per-pair mean and
    /// keypoint-pooled PCK).
    pub fn to_csv(&self) -> String {
        fn opt(v: Option<Scalar>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        let mut out =
            String::from("pair_id,category,n_keypoints,pck,lt_acc,iou,grid_loss,error\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.pair_id,
                r.category,
                r.n_keypoints,
                opt(r.pck),
                opt(r.lt_acc),
                opt(r.iou),
                opt(r.grid_loss_vs_gt),
                r.error.clone().unwrap_or_default().replace(',', ";")
            ));
        }
        let a = &self.aggregate;
        out.push_str(&format!(
            "aggregate_per_pair,all,{},{},{},{},{},failures={}\n",
            a.pairs_evaluated,
            a.mean_pck_per_pair,
            opt(a.mean_lt_acc),
            opt(a.mean_iou),
            opt(a.mean_grid_loss),
            a.failures
        ));
        out.push_str(&format!(
            "aggregate_pooled,all,{},{},,,,\n",
            a.pairs_evaluated, a.pooled_pck
        ));
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

fn evaluate_record(
    set: &BenchmarkSet,
    idx: usize,
    estimator: &EstimatorKind,
    alpha: Scalar,
) -> PairOutcome {
    let rec = &set.records[idx];
    let mut outcome = PairOutcome {
        pair_id: rec.pair_id.clone(),
        category: rec.category.clone(),
        n_keypoints: rec.keypoints_a.len(),
        correct_keypoints: 0,
        pck: None,
        lt_acc: None,
        iou: None,
        grid_loss_vs_gt: None,
        error: None,
    };
    let run = || -> Result<(Scalar, usize, Option<MaskMetrics>, Option<Scalar>)> {
        let image_a = io::load_image(&set.root.join(&rec.image_a_path))?;
        let image_b = io::load_image(&set.root.join(&rec.image_b_path))?;
        let theta = estimator.estimate(rec, &image_a, &image_b, idx)?;

        let (ha, wa, _) = image_a.dims3()?;
        let (hb, wb, _) = image_b.dims3()?;
        let transferred =
            transfer_keypoints(&theta, &rec.keypoints_a, (ha, wa), (hb, wb))?;
        let predicted: Vec<(Scalar, Scalar)> =
            transferred.iter().map(|p| (p.x, p.y)).collect();
        let bbox_hw = (rec.bbox_b.3, rec.bbox_b.2);
        let score = pck(&predicted, &rec.keypoints_b, bbox_hw, alpha)?;
        let thresh = alpha * bbox_hw.0.max(bbox_hw.1);
        let correct = predicted
            .iter()
            .zip(rec.keypoints_b.iter())
            .filter(|(p, t)| ((p.0 - t.0).powi(2) + (p.1 - t.1).powi(2)).sqrt() <= thresh)
            .count();

        let masks = match (&rec.mask_a_path, &rec.mask_b_path) {
            (Some(ma), Some(mb)) => Some(mask_transfer_metrics(
                &theta,
                &io::load_mask(&set.root.join(ma))?,
                &io::load_mask(&set.root.join(mb))?,
            )?),
            _ => None,
        };
        let gl = match rec.ground_truth()? {
            Some(gt) => Some(grid_loss(&theta, &gt)?),
            None => None,
        };
        Ok((score, correct, masks, gl))
    };
    match run() {
        Ok((score, correct, masks, gl)) => {
            outcome.pck = Some(score);
            outcome.correct_keypoints = correct;
            if let Some(m) = masks {
                outcome.lt_acc = Some(m.lt_acc);
                outcome.iou = Some(m.iou);
            }
            outcome.grid_loss_vs_gt = gl;
        }
        Err(e) => outcome.error = Some(e.to_string()),
    }
    outcome
}

/// Run an estimator over a benchmark. Per-record failures are recorded in
/// their row; aggregates cover the successes and report the failure count.
pub fn evaluate_benchmark(
    set: &BenchmarkSet,
    estimator: &EstimatorKind,
    alpha: Scalar,
) -> Result<BenchmarkReport> {
    if set.records.is_empty() {
        return Err(Error::UndefinedMetric("empty benchmark record set".into()));
    }
    let rows: Vec<PairOutcome> =
        par::map_indexed(set.records.len(), |i| evaluate_record(set, i, estimator, alpha));

    let ok: Vec<&PairOutcome> = rows.iter().filter(|r| r.error.is_none()).collect();
    let failures = rows.len() - ok.len();
    let mean = |vals: Vec<Scalar>| -> Option<Scalar> {
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<Scalar>() / vals.len() as Scalar)
        }
    };
    let mean_pck_per_pair = mean(ok.iter().filter_map(|r| r.pck).collect()).unwrap_or(0.0);
    let total_kp: usize = ok.iter().map(|r| r.n_keypoints).sum();
    let total_correct: usize = ok.iter().map(|r| r.correct_keypoints).sum();
    let pooled_pck = if total_kp == 0 {
        0.0
    } else {
        total_correct as Scalar / total_kp as Scalar
    };
    let aggregate = Aggregate {
        pairs_evaluated: ok.len(),
        failures,
        mean_pck_per_pair,
        pooled_pck,
        mean_lt_acc: mean(ok.iter().filter_map(|r| r.lt_acc).collect()),
        mean_iou: mean(ok.iter().filter_map(|r| r.iou).collect()),
        mean_grid_loss: mean(ok.iter().filter_map(|r| r.grid_loss_vs_gt).collect()),
    };
    Ok(BenchmarkReport { rows, aggregate })
}

/// Build a synthetic benchmark from a generated dataset: keypoints are
/// random B-frame positions paired with their ground-truth correspondences
/// in A, and the bounding box is the whole image.
pub fn benchmark_from_manifest(
    manifest: &Manifest,
    split: &str,
    n_keypoints: usize,
    seed: u64,
) -> Result<BenchmarkSet> {
    let records = manifest.split(split);
    if records.is_empty() {
        return Err(Error::Manifest(format!(
            "manifest has no '{split}' records to build a benchmark from"
        )));
    }
    let mut out = Vec::with_capacity(records.len());
    for (idx, rec) in records.iter().enumerate() {
        let theta = rec.theta_gt()?;
        let image_a = io::load_image(&manifest.resolve(&rec.image_a_path))?;
        let image_b = io::load_image(&manifest.resolve(&rec.image_b_path))?;
        let (ha, wa, _) = image_a.dims3()?;
        let (hb, wb, _) = image_b.dims3()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, idx as u64));
        let mut kp_a = Vec::with_capacity(n_keypoints);
        let mut kp_b = Vec::with_capacity(n_keypoints);
        let mut attempts = 0;
        while kp_a.len() < n_keypoints && attempts < 200 * n_keypoints {
            attempts += 1;
            let pb = (rng.gen_range(-0.85..0.85), rng.gen_range(-0.85..0.85));
            let pa = apply_point(&theta, pb)?;
            if pa.0.abs() <= 0.95 && pa.1.abs() <= 0.95 {
                kp_a.push((
                    normalized_to_pixel(pa.0, wa),
                    normalized_to_pixel(pa.1, ha),
                ));
                kp_b.push((
                    normalized_to_pixel(pb.0, wb),
                    normalized_to_pixel(pb.1, hb),
                ));
            }
        }
        if kp_a.is_empty() {
            return Err(Error::Generation {
                attempts,
                detail: format!("no in-frame keypoints for pair {}", rec.pair_id),
            });
        }
        out.push(EvalRecord {
            pair_id: rec.pair_id.clone(),
            image_a_path: rec.image_a_path.clone(),
            image_b_path: rec.image_b_path.clone(),
            keypoints_a: kp_a,
            keypoints_b: kp_b,
            bbox_b: (0.0, 0.0, wb as Scalar, hb as Scalar),
            mask_a_path: None,
            mask_b_path: None,
            category: "synthetic".into(),
            theta_gt: Some(ThetaGt {
                kind: rec.kind,
                values: rec.theta.clone(),
            }),
        });
    }
    Ok(BenchmarkSet {
        records: out,
        root: manifest.root.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn pck_trivial_and_boundary() {
        let pts = vec![(1.0, 2.0), (3.0, 4.0)];
        assert_eq!(pck(&pts, &pts, (10.0, 20.0), 0.1).unwrap(), 1.0);

        // One keypoint exactly at the threshold (inclusive), one far away.
        let target = vec![(0.0, 0.0), (0.0, 0.0)];
        let pred = vec![(2.0, 0.0), (15.0, 0.0)];
        let score = pck(&pred, &target, (20.0, 10.0), 0.1).unwrap();
        assert_eq!(score, 0.5);
    }

    #[test]
    fn pck_empty_is_undefined() {
        assert!(matches!(
            pck(&[], &[], (1.0, 1.0), 0.1),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn pck_monotone_in_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let target: Vec<(f64, f64)> = (0..20)
            .map(|_| (rng.gen_range(0.0..50.0), rng.gen_range(0.0..50.0)))
            .collect();
        let pred: Vec<(f64, f64)> = target
            .iter()
            .map(|&(x, y)| (x + rng.gen_range(-8.0..8.0), y + rng.gen_range(-8.0..8.0)))
            .collect();
        let mut prev = 0.0;
        for i in 1..=20 {
            let alpha = 0.02 * i as f64;
            let score = pck(&pred, &target, (50.0, 50.0), alpha).unwrap();
            assert!(score >= prev);
            prev = score;
        }
    }

    #[test]
    fn pck_invariant_under_joint_permutation() {
        let target = vec![(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)];
        let pred = vec![(1.0, 0.0), (30.0, 0.0), (0.0, 11.0)];
        let s1 = pck(&pred, &target, (20.0, 20.0), 0.1).unwrap();
        let perm = [2usize, 0, 1];
        let pred2: Vec<_> = perm.iter().map(|&i| pred[i]).collect();
        let target2: Vec<_> = perm.iter().map(|&i| target[i]).collect();
        assert_eq!(s1, pck(&pred2, &target2, (20.0, 20.0), 0.1).unwrap());
    }

    #[test]
    fn transfer_identity_keeps_points() {
        let kp = vec![(5.0, 7.0), (1.5, 2.5)];
        let out = transfer_keypoints(
            &TransformParams::identity_affine(),
            &kp,
            (32, 32),
            (32, 32),
        )
        .unwrap();
        for (o, k) in out.iter().zip(kp.iter()) {
            assert!((o.x - k.0).abs() < 1e-12 && (o.y - k.1).abs() < 1e-12);
        }
    }

    #[test]
    fn transfer_scale_halves_around_center() {
        // theta: B -> A doubles coordinates, so A -> B transfer halves them
        // around the image center.
        let theta = TransformParams::Affine(AffineParams {
            a11: 2.0,
            a22: 2.0,
            ..AffineParams::identity()
        });
        let (h, w) = (64, 64);
        let kp = vec![(48.0, 16.0)];
        let out = transfer_keypoints(&theta, &kp, (h, w), (h, w)).unwrap();
        let cx = (w as f64 - 1.0) / 2.0;
        let cy = (h as f64 - 1.0) / 2.0;
        let expect = (cx + (48.0 - cx) / 2.0, cy + (16.0 - cy) / 2.0);
        assert!((out[0].x - expect.0).abs() < 1e-9);
        assert!((out[0].y - expect.1).abs() < 1e-9);
    }

    #[test]
    fn transfer_roundtrip_through_forward_map() {
        use crate::transforms::apply_point;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = TpsParams::identity();
        for v in t.target_coords.iter_mut() {
            *v += rng.gen_range(-0.12..0.12);
        }
        let theta = TransformParams::Tps(t);
        let (h, w) = (64, 64);
        let kp_a: Vec<(f64, f64)> = (0..20)
            .map(|_| (rng.gen_range(16.0..48.0), rng.gen_range(16.0..48.0)))
            .collect();
        let out = transfer_keypoints(&theta, &kp_a, (h, w), (h, w)).unwrap();
        for (o, k) in out.iter().zip(kp_a.iter()) {
            assert!(o.converged);
            // Re-apply the forward map to the transferred point.
            let pb = (
                pixel_to_normalized(o.x, w),
                pixel_to_normalized(o.y, h),
            );
            let pa = apply_point(&theta, pb).unwrap();
            let px = (
                normalized_to_pixel(pa.0, w),
                normalized_to_pixel(pa.1, h),
            );
            assert!((px.0 - k.0).abs() < 1e-4 && (px.1 - k.1).abs() < 1e-4);
        }
    }

    #[test]
    fn mask_metrics_identity_and_disjoint() {
        let mut mask = Tensor::zeros(&[8, 8, 1]);
        for i in 0..32 {
            mask.data_mut()[i] = 1.0;
        }
        let m = mask_transfer_metrics(&TransformParams::identity_affine(), &mask, &mask).unwrap();
        assert_eq!(m.lt_acc, 1.0);
        assert_eq!(m.iou, 1.0);

        // Disjoint halves: IoU 0, LT-ACC 0 (every pixel disagrees).
        let mut other = Tensor::zeros(&[8, 8, 1]);
        for i in 32..64 {
            other.data_mut()[i] = 1.0;
        }
        let m =
            mask_transfer_metrics(&TransformParams::identity_affine(), &mask, &other).unwrap();
        assert_eq!(m.iou, 0.0);
        assert_eq!(m.lt_acc, 0.0);
    }

    #[test]
    fn mask_metrics_empty_union_is_undefined() {
        let empty = Tensor::zeros(&[4, 4, 1]);
        assert!(matches!(
            mask_transfer_metrics(&TransformParams::identity_affine(), &empty, &empty),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn ransac_exact_recovery_on_mirrored_features() {
        // f_B is f_A mirrored along x; in normalized coordinates the map
        // B -> A is exactly x -> -x. Unique descriptors per cell.
        let (h, w, d) = (5, 6, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f_a = Tensor::rand_uniform(&[h, w, d], -1.0, 1.0, &mut rng);
        let mut f_b = Tensor::zeros(&[h, w, d]);
        for r in 0..h {
            for c in 0..w {
                let src = (r * w + (w - 1 - c)) * d;
                let dst = (r * w + c) * d;
                for t in 0..d {
                    f_b.data_mut()[dst + t] = f_a.data()[src + t];
                }
            }
        }
        let config = RansacConfig {
            iterations: 200,
            seed: 7,
            range_filter: None,
            ..RansacConfig::default()
        };
        let (aff, inliers) = ransac_affine(&f_a, &f_b, &config).unwrap();
        assert_eq!(inliers.len(), h * w, "all matches must be inliers");
        assert!((aff.a11 + 1.0).abs() < 1e-10);
        assert!((aff.a22 - 1.0).abs() < 1e-10);
        assert!(aff.a12.abs() < 1e-10 && aff.a21.abs() < 1e-10);
        assert!(aff.tx.abs() < 1e-10 && aff.ty.abs() < 1e-10);
    }

    #[test]
    fn ransac_refit_is_least_squares_on_clean_data() {
        let truth = AffineParams {
            a11: 1.1,
            a12: -0.2,
            a21: 0.15,
            a22: 0.9,
            tx: 0.05,
            ty: -0.1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let matches: Vec<Correspondence> = (0..40)
            .map(|_| {
                let from = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                Correspondence {
                    from,
                    to: truth.apply(from),
                }
            })
            .collect();
        let config = RansacConfig {
            iterations: 100,
            seed: 3,
            range_filter: None,
            ..RansacConfig::default()
        };
        let (aff, inliers) = ransac_from_matches(&matches, &config).unwrap();
        assert_eq!(inliers.len(), 40);
        for (a, b) in aff.to_array().iter().zip(truth.to_array().iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn ransac_survives_thirty_percent_outliers() {
        let truth = AffineParams {
            a11: 0.95,
            a12: 0.1,
            a21: -0.08,
            a22: 1.05,
            tx: 0.12,
            ty: -0.07,
        };
        let mut successes = 0;
        for trial in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
            let mut matches = Vec::new();
            for i in 0..60 {
                let from = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                let to = if i % 10 < 7 {
                    truth.apply(from)
                } else {
                    (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
                };
                matches.push(Correspondence { from, to });
            }
            let config = RansacConfig {
                iterations: 1000,
                seed: trial,
                range_filter: None,
                ..RansacConfig::default()
            };
            let (aff, _) = ransac_from_matches(&matches, &config).unwrap();
            let loss = grid_loss(
                &TransformParams::Affine(aff),
                &TransformParams::Affine(truth),
            )
            .unwrap();
            if loss < 1e-3 {
                successes += 1;
            }
        }
        assert!(successes >= 19, "only {successes}/20 trials recovered");
    }

    #[test]
    fn ransac_needs_three_matches() {
        let matches = vec![
            Correspondence { from: (0.0, 0.0), to: (0.0, 0.0) },
            Correspondence { from: (1.0, 0.0), to: (1.0, 0.0) },
        ];
        assert!(matches!(
            ransac_from_matches(&matches, &RansacConfig::default()),
            Err(Error::Estimation(_))
        ));
    }

    #[test]
    fn range_filter_bounds_scale_and_translation() {
        let f = RangeFilter {
            scale_max: 2.0,
            trans_max: 0.3,
        };
        assert!(f.accepts(&AffineParams::identity()));
        assert!(!f.accepts(&AffineParams {
            a11: 3.0,
            ..AffineParams::identity()
        }));
        assert!(!f.accepts(&AffineParams::translation(0.5, 0.0)));
        assert!(!f.accepts(&AffineParams {
            a11: 0.2,
            a22: 1.0,
            ..AffineParams::identity()
        }));
    }
}
