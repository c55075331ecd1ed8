//! The geometry-estimation network.
//!
//! One *stage* estimates the parameters of one transformation model from an
//! image pair: both images pass through a weight-shared convolutional
//! feature extractor ending in per-feature L2 normalization, the descriptor
//! maps are combined by the matching layer, and a small convolutional
//! regressor (two no-padding convs, each followed by batch norm and ReLU,
//! then one fully connected layer) outputs the raw parameter vector. The raw
//! output is a residual on the identity transform, so an untrained stage
//! predicts the identity.
//!
//! Two stages chain into the full pipeline: the affine estimate warps image
//! A toward B, and a second stage regresses a TPS refinement from the warped
//! pair; the final estimate is the functional composition of the two.

use crate::error::{Error, Result};
use crate::matching;
use crate::resampler;
use crate::tensor::{BatchNormMode, RunningStats, Scalar, Tape, Tensor, Var};
use crate::transforms::{compose, AffineParams, TpsParams, TransformParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// One convolutional block of the feature extractor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Feature extractor: a stack of conv+ReLU blocks, then per-feature L2
/// normalization. Both siamese branches share one parameter set by
/// construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractorConfig {
    pub blocks: Vec<ConvBlockSpec>,
    pub norm_epsilon: Scalar,
}

impl FeatureExtractorConfig {
    /// Desk-scale default: three stride-2 blocks, 64x64 -> 8x8x16.
    pub fn desk_default() -> Self {
        FeatureExtractorConfig {
            blocks: vec![
                ConvBlockSpec { out_channels: 8, kernel: 3, stride: 2, padding: 1 },
                ConvBlockSpec { out_channels: 16, kernel: 3, stride: 2, padding: 1 },
                ConvBlockSpec { out_channels: 16, kernel: 3, stride: 2, padding: 1 },
            ],
            norm_epsilon: 1e-8,
        }
    }

    /// Minimal config for gradient checks: 16x16 -> 4x4x4.
    pub fn tiny() -> Self {
        FeatureExtractorConfig {
            blocks: vec![
                ConvBlockSpec { out_channels: 4, kernel: 3, stride: 2, padding: 1 },
                ConvBlockSpec { out_channels: 4, kernel: 3, stride: 2, padding: 1 },
            ],
            norm_epsilon: 1e-8,
        }
    }

    pub fn descriptor_dim(&self) -> usize {
        self.blocks.last().map(|b| b.out_channels).unwrap_or(0)
    }

    /// Spatial extent of the output map for a square input.
    pub fn output_extent(&self, input: usize) -> Result<usize> {
        let mut e = input;
        for b in &self.blocks {
            let padded = e + 2 * b.padding;
            if b.kernel > padded {
                return Err(Error::invalid(format!(
                    "input {input} too small for extractor (block kernel {} > extent {padded})",
                    b.kernel
                )));
            }
            e = (padded - b.kernel) / b.stride + 1;
        }
        Ok(e)
    }
}

/// The parameter regressor: two no-padding stride-1 convs with batch norm
/// and ReLU, then a fully connected layer to `output_dim` parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressorConfig {
    pub conv1_channels: usize,
    pub conv1_kernel: usize,
    pub conv2_channels: usize,
    pub conv2_kernel: usize,
    pub output_dim: usize,
}

/// How the two descriptor maps combine before regression.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchingMode {
    /// Correlation volume with ReLU + channel L2 normalization (default).
    Correlation,
    /// Raw correlation volume (normalization ablation).
    CorrelationNoNorm,
    /// Channelwise concatenation baseline.
    Concat,
    /// Channelwise subtraction baseline.
    Subtract,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransformKind {
    Affine,
    Tps,
}

impl TransformKind {
    pub fn param_count(&self) -> usize {
        match self {
            TransformKind::Affine => 6,
            TransformKind::Tps => 18,
        }
    }
}

/// Full configuration of one estimation stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub kind: TransformKind,
    /// Square input extent; images are resized to this before the extractor.
    pub input_size: usize,
    pub extractor: FeatureExtractorConfig,
    pub matching: MatchingMode,
    pub regressor: RegressorConfig,
    /// Train only the regressor, keeping descriptors fixed.
    pub freeze_features: bool,
    pub bn_epsilon: Scalar,
    pub bn_decay: Scalar,
}

impl StageConfig {
    pub fn desk(kind: TransformKind) -> Self {
        StageConfig {
            kind,
            input_size: 64,
            extractor: FeatureExtractorConfig::desk_default(),
            matching: MatchingMode::Correlation,
            regressor: RegressorConfig {
                conv1_channels: 32,
                conv1_kernel: 5,
                conv2_channels: 16,
                conv2_kernel: 3,
                output_dim: kind.param_count(),
            },
            freeze_features: false,
            bn_epsilon: crate::tensor::BN_EPSILON,
            bn_decay: crate::tensor::BN_EMA_DECAY,
        }
    }

    pub fn tiny(kind: TransformKind) -> Self {
        StageConfig {
            kind,
            input_size: 16,
            extractor: FeatureExtractorConfig::tiny(),
            matching: MatchingMode::Correlation,
            regressor: RegressorConfig {
                conv1_channels: 8,
                conv1_kernel: 2,
                conv2_channels: 16,
                conv2_kernel: 2,
                output_dim: kind.param_count(),
            },
            freeze_features: false,
            bn_epsilon: crate::tensor::BN_EPSILON,
            bn_decay: crate::tensor::BN_EMA_DECAY,
        }
    }

    /// Spatial extent of the descriptor map.
    pub fn feature_extent(&self) -> Result<usize> {
        self.extractor.output_extent(self.input_size)
    }

    /// Channel count entering the regressor for the configured matching mode.
    pub fn matcher_channels(&self) -> Result<usize> {
        let m = self.feature_extent()?;
        Ok(match self.matching {
            MatchingMode::Correlation | MatchingMode::CorrelationNoNorm => m * m,
            MatchingMode::Concat => 2 * self.extractor.descriptor_dim(),
            MatchingMode::Subtract => self.extractor.descriptor_dim(),
        })
    }

    /// Spatial chain through the regressor; errors on underflow.
    pub fn regressor_extents(&self) -> Result<(usize, usize)> {
        let m = self.feature_extent()?;
        let after1 = m
            .checked_sub(self.regressor.conv1_kernel - 1)
            .filter(|&e| e >= 1)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "feature map {m} too small for regressor conv1 kernel {}",
                    self.regressor.conv1_kernel
                ))
            })?;
        let after2 = after1
            .checked_sub(self.regressor.conv2_kernel - 1)
            .filter(|&e| e >= 1)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "map {after1} too small for regressor conv2 kernel {}",
                    self.regressor.conv2_kernel
                ))
            })?;
        Ok((after1, after2))
    }

    pub fn validate(&self) -> Result<()> {
        if self.regressor.output_dim != self.kind.param_count() {
            return Err(Error::invalid(format!(
                "regressor outputs {} parameters but {:?} needs {}",
                self.regressor.output_dim,
                self.kind,
                self.kind.param_count()
            )));
        }
        self.regressor_extents()?;
        Ok(())
    }
}

/// A named parameter tensor.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Whether the trainer updates this tensor (extractor weights are frozen
    /// when `freeze_features` is set).
    pub trainable: bool,
}

/// A named batch-norm running-statistics buffer.
#[derive(Clone, Debug)]
pub struct BnLayer {
    pub name: String,
    pub stats: RunningStats,
}

/// One estimation stage: configuration, parameters and batch-norm state.
#[derive(Clone, Debug)]
pub struct GeometryModel {
    pub config: StageConfig,
    params: Vec<Param>,
    bn: Vec<BnLayer>,
}

fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in as Scalar).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

impl GeometryModel {
    /// Initialize a stage. Convolution weights draw from a seeded
    /// fan-in-scaled uniform; the final fully connected layer starts at zero
    /// so the untrained stage predicts the identity transform.
    pub fn new(config: StageConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let feat_trainable = !config.freeze_features;

        let mut cin = 3;
        for (i, b) in config.extractor.blocks.iter().enumerate() {
            let fan_in = b.kernel * b.kernel * cin;
            params.push(Param {
                name: format!("ext.block{i}.kernel"),
                value: he_uniform(&[b.kernel, b.kernel, cin, b.out_channels], fan_in, &mut rng),
                trainable: feat_trainable,
            });
            params.push(Param {
                name: format!("ext.block{i}.bias"),
                value: Tensor::zeros(&[b.out_channels]),
                trainable: feat_trainable,
            });
            cin = b.out_channels;
        }

        let rc = &config.regressor;
        let in_ch = config.matcher_channels()?;
        let fan1 = rc.conv1_kernel * rc.conv1_kernel * in_ch;
        params.push(Param {
            name: "reg.conv1.kernel".into(),
            value: he_uniform(
                &[rc.conv1_kernel, rc.conv1_kernel, in_ch, rc.conv1_channels],
                fan1,
                &mut rng,
            ),
            trainable: true,
        });
        params.push(Param {
            name: "reg.conv1.bias".into(),
            value: Tensor::zeros(&[rc.conv1_channels]),
            trainable: true,
        });
        params.push(Param {
            name: "reg.conv1.gamma".into(),
            value: Tensor::ones(&[rc.conv1_channels]),
            trainable: true,
        });
        params.push(Param {
            name: "reg.conv1.beta".into(),
            value: Tensor::zeros(&[rc.conv1_channels]),
            trainable: true,
        });
        let fan2 = rc.conv2_kernel * rc.conv2_kernel * rc.conv1_channels;
        params.push(Param {
            name: "reg.conv2.kernel".into(),
            value: he_uniform(
                &[rc.conv2_kernel, rc.conv2_kernel, rc.conv1_channels, rc.conv2_channels],
                fan2,
                &mut rng,
            ),
            trainable: true,
        });
        params.push(Param {
            name: "reg.conv2.bias".into(),
            value: Tensor::zeros(&[rc.conv2_channels]),
            trainable: true,
        });
        params.push(Param {
            name: "reg.conv2.gamma".into(),
            value: Tensor::ones(&[rc.conv2_channels]),
            trainable: true,
        });
        params.push(Param {
            name: "reg.conv2.beta".into(),
            value: Tensor::zeros(&[rc.conv2_channels]),
            trainable: true,
        });

        let (_, m2) = config.regressor_extents()?;
        let fc_in = m2 * m2 * rc.conv2_channels;
        params.push(Param {
            name: "reg.fc.weight".into(),
            value: Tensor::zeros(&[fc_in, rc.output_dim]),
            trainable: true,
        });
        params.push(Param {
            name: "reg.fc.bias".into(),
            value: Tensor::zeros(&[rc.output_dim]),
            trainable: true,
        });

        let bn = vec![
            BnLayer {
                name: "reg.conv1.bn".into(),
                stats: RunningStats::new(rc.conv1_channels),
            },
            BnLayer {
                name: "reg.conv2.bn".into(),
                stats: RunningStats::new(rc.conv2_channels),
            },
        ];

        Ok(GeometryModel { config, params, bn })
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn bn_layers(&self) -> &[BnLayer] {
        &self.bn
    }

    pub fn bn_layers_mut(&mut self) -> &mut [BnLayer] {
        &mut self.bn
    }

    pub fn param_by_name(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    /// Give the regression head small random weights. Used by gradient
    /// checks, which need a generic (non-zero) linearization point.
    pub fn randomize_head(&mut self, scale: Scalar, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in self.params.iter_mut() {
            if p.name.starts_with("reg.fc.") {
                p.value =
                    Tensor::rand_uniform(p.value.shape(), -scale, scale, &mut rng);
            }
        }
    }

    /// Run the stage on a batch, recording on `tape`.
    ///
    /// Returns the raw `[n, P]` residual output plus the tape handles of
    /// every parameter, aligned with `params()`. Train mode uses batch
    /// statistics and updates the model's running stats in place.
    pub fn forward_batch(
        &mut self,
        tape: &mut Tape,
        images_a: &Tensor,
        images_b: &Tensor,
        mode: BatchNormMode,
        trainable: bool,
    ) -> Result<(Var, Vec<Var>)> {
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), trainable && p.trainable))
            .collect();
        let a = tape.constant(images_a.clone());
        let b = tape.constant(images_b.clone());
        let mut bn: Vec<&mut RunningStats> =
            self.bn.iter_mut().map(|l| &mut l.stats).collect();
        let raw = run_stage(tape, &self.config, &vars, &mut bn, a, b, mode)?;
        Ok((raw, vars))
    }

    /// Inference forward pass; running statistics are read, never written.
    pub fn forward_eval(&self, tape: &mut Tape, images_a: &Tensor, images_b: &Tensor) -> Result<Var> {
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), false))
            .collect();
        let a = tape.constant(images_a.clone());
        let b = tape.constant(images_b.clone());
        let mut stats: Vec<RunningStats> = self.bn.iter().map(|l| l.stats.clone()).collect();
        let mut bn: Vec<&mut RunningStats> = stats.iter_mut().collect();
        run_stage(tape, &self.config, &vars, &mut bn, a, b, BatchNormMode::Eval)
    }

    /// Dense L2-normalized descriptor map of a single image (eval mode).
    pub fn extract_features(&self, image: &Tensor) -> Result<Tensor> {
        let img = prepare_image(image, self.config.input_size)?;
        let mut tape = Tape::new();
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), false))
            .collect();
        let v = tape.constant(img);
        let f = extract_on_tape(&mut tape, &self.config, &vars, v)?;
        Ok(tape.value(f).clone())
    }
}

/// Index of a parameter within the fixed ordering of `GeometryModel::params`.
fn param_index(config: &StageConfig, name: &str) -> usize {
    let nblocks = config.extractor.blocks.len();
    let fixed = [
        "reg.conv1.kernel",
        "reg.conv1.bias",
        "reg.conv1.gamma",
        "reg.conv1.beta",
        "reg.conv2.kernel",
        "reg.conv2.bias",
        "reg.conv2.gamma",
        "reg.conv2.beta",
        "reg.fc.weight",
        "reg.fc.bias",
    ];
    if let Some(rest) = name.strip_prefix("ext.block") {
        let (i, field) = rest.split_once('.').expect("block param name");
        let i: usize = i.parse().expect("block index");
        return 2 * i + if field == "kernel" { 0 } else { 1 };
    }
    2 * nblocks
        + fixed
            .iter()
            .position(|&f| f == name)
            .expect("known parameter name")
}

fn extract_on_tape(
    tape: &mut Tape,
    config: &StageConfig,
    vars: &[Var],
    image: Var,
) -> Result<Var> {
    let mut x = image;
    for (i, b) in config.extractor.blocks.iter().enumerate() {
        let k = vars[param_index(config, &format!("ext.block{i}.kernel"))];
        let bias = vars[param_index(config, &format!("ext.block{i}.bias"))];
        x = tape.conv2d(x, k, Some(bias), b.stride, b.padding)?;
        x = tape.relu(x);
    }
    // Per-feature L2 normalization along the channel axis.
    let axis = tape.value(x).rank() - 1;
    tape.l2_normalize(x, axis, config.extractor.norm_epsilon)
}

fn run_stage(
    tape: &mut Tape,
    config: &StageConfig,
    vars: &[Var],
    bn: &mut [&mut RunningStats],
    images_a: Var,
    images_b: Var,
    mode: BatchNormMode,
) -> Result<Var> {
    let f_a = extract_on_tape(tape, config, vars, images_a)?;
    let f_b = extract_on_tape(tape, config, vars, images_b)?;

    let matched = match config.matching {
        MatchingMode::Correlation => {
            let c = matching::correlate(tape, f_a, f_b)?;
            matching::normalize_correspondences(tape, c, matching::CORRELATION_EPSILON)?
        }
        MatchingMode::CorrelationNoNorm => matching::correlate(tape, f_a, f_b)?,
        MatchingMode::Concat => matching::match_concat(tape, f_a, f_b)?,
        MatchingMode::Subtract => matching::match_subtract(tape, f_a, f_b)?,
    };

    let idx = |name: &str| vars[param_index(config, name)];
    let mut x = tape.conv2d(
        matched,
        idx("reg.conv1.kernel"),
        Some(idx("reg.conv1.bias")),
        1,
        0,
    )?;
    x = tape.batchnorm(
        x,
        idx("reg.conv1.gamma"),
        idx("reg.conv1.beta"),
        bn[0],
        mode,
        config.bn_epsilon,
        config.bn_decay,
    )?;
    x = tape.relu(x);
    x = tape.conv2d(
        x,
        idx("reg.conv2.kernel"),
        Some(idx("reg.conv2.bias")),
        1,
        0,
    )?;
    x = tape.batchnorm(
        x,
        idx("reg.conv2.gamma"),
        idx("reg.conv2.beta"),
        bn[1],
        mode,
        config.bn_epsilon,
        config.bn_decay,
    )?;
    x = tape.relu(x);
    let flat = tape.flatten(x)?;
    tape.linear(flat, idx("reg.fc.weight"), idx("reg.fc.bias"))
}

/// Interpret a raw residual vector as transform parameters relative to the
/// identity transform.
pub fn raw_to_theta(kind: TransformKind, raw: &[Scalar]) -> Result<TransformParams> {
    match kind {
        TransformKind::Affine => {
            if raw.len() != 6 {
                return Err(Error::invalid(format!("affine residual needs 6 values, got {}", raw.len())));
            }
            let base = AffineParams::identity().to_array();
            let v: Vec<Scalar> = base.iter().zip(raw.iter()).map(|(b, r)| b + r).collect();
            Ok(TransformParams::Affine(AffineParams::from_slice(&v)?))
        }
        TransformKind::Tps => {
            if raw.len() != 18 {
                return Err(Error::invalid(format!("TPS residual needs 18 values, got {}", raw.len())));
            }
            let mut t = TpsParams::identity();
            for (c, r) in t.target_coords.iter_mut().zip(raw.iter()) {
                *c += r;
            }
            Ok(TransformParams::Tps(t))
        }
    }
}

/// Resize (bilinearly) to a square `size` when needed; identity otherwise.
pub fn prepare_image(image: &Tensor, size: usize) -> Result<Tensor> {
    let (h, w, _) = image.dims3()?;
    if h == size && w == size {
        Ok(image.clone())
    } else {
        resampler::warp(image, &TransformParams::identity_affine(), (size, size))
    }
}

/// Estimate a transformation from a single stage (extract, correlate,
/// normalize, regress — in that order).
pub fn estimate_single_stage(
    model: &GeometryModel,
    image_a: &Tensor,
    image_b: &Tensor,
) -> Result<TransformParams> {
    let a = prepare_image(image_a, model.config.input_size)?;
    let b = prepare_image(image_b, model.config.input_size)?;
    let mut tape = Tape::new();
    let raw = model.forward_eval(&mut tape, &a, &b)?;
    let row = tape.value(raw);
    let p = model.config.kind.param_count();
    raw_to_theta(model.config.kind, &row.data()[..p])
}

/// Elementwise average of two affine estimates.
pub fn ensemble_affine(theta_1: &AffineParams, theta_2: &AffineParams) -> AffineParams {
    theta_1.average(theta_2)
}

/// Affine estimate from one model or an ensemble of two.
pub fn estimate_affine(
    model: &GeometryModel,
    second: Option<&GeometryModel>,
    image_a: &Tensor,
    image_b: &Tensor,
) -> Result<AffineParams> {
    let first = match estimate_single_stage(model, image_a, image_b)? {
        TransformParams::Affine(a) => a,
        other => {
            return Err(Error::invalid(format!(
                "affine stage produced {}",
                other.kind_name()
            )))
        }
    };
    match second {
        None => Ok(first),
        Some(m2) => match estimate_single_stage(m2, image_a, image_b)? {
            TransformParams::Affine(a) => Ok(ensemble_affine(&first, &a)),
            other => Err(Error::invalid(format!(
                "affine ensemble member produced {}",
                other.kind_name()
            ))),
        },
    }
}

/// Two-stage estimate: affine stage, warp of image A by the affine estimate,
/// TPS stage on the warped pair, then functional composition.
pub fn estimate_two_stage(
    affine_model: &GeometryModel,
    affine_second: Option<&GeometryModel>,
    tps_model: &GeometryModel,
    image_a: &Tensor,
    image_b: &Tensor,
) -> Result<TransformParams> {
    let theta_aff = estimate_affine(affine_model, affine_second, image_a, image_b)?;
    let size = tps_model.config.input_size;
    let a = prepare_image(image_a, size)?;
    let warped_a = resampler::warp(&a, &TransformParams::Affine(theta_aff), (size, size))?;
    let theta_tps = match estimate_single_stage(tps_model, &warped_a, image_b)? {
        TransformParams::Tps(t) => t,
        other => {
            return Err(Error::invalid(format!(
                "TPS stage produced {}",
                other.kind_name()
            )))
        }
    };
    compose(
        &TransformParams::Affine(theta_aff),
        &TransformParams::Tps(theta_tps),
    )
}

/// Peak-average visualization of first-layer regressor filters.
///
/// Every `k x k` spatial slice of a filter is a weight vector over the
/// `h*w` correlation channels; reshaped through the channel flattening it
/// becomes an `h x w` image. Each non-constant slice contributes a delta at
/// its peak; the deltas are averaged into one map per output filter.
pub fn visualize_regressor_filters(
    conv1_kernel: &Tensor,
    map_h: usize,
    map_w: usize,
) -> Result<Vec<Tensor>> {
    let (kh, kw, cin, cout) = conv1_kernel.dims4()?;
    if cin != map_h * map_w {
        return Err(Error::invalid(format!(
            "filter has {cin} input channels, expected {map_h}x{map_w}={}",
            map_h * map_w
        )));
    }
    let kd = conv1_kernel.data();
    let mut maps = Vec::with_capacity(cout);
    for co in 0..cout {
        let mut acc = Tensor::zeros(&[map_h, map_w]);
        for ky in 0..kh {
            for kx in 0..kw {
                let mut best = Scalar::NEG_INFINITY;
                let mut worst = Scalar::INFINITY;
                let mut best_idx = 0;
                for ci in 0..cin {
                    let v = kd[((ky * kw + kx) * cin + ci) * cout + co];
                    if v > best {
                        best = v;
                        best_idx = ci;
                    }
                    if v < worst {
                        worst = v;
                    }
                }
                if best > worst {
                    let (r, c) = matching::unflatten_index(best_idx, map_h);
                    acc.data_mut()[r * map_w + c] += 1.0;
                }
            }
        }
        let scale = 1.0 / (kh * kw) as Scalar;
        maps.push(acc.map(|v| v * scale));
    }
    Ok(maps)
}
