//! Geometric transformation models and the grid-comparison loss.
//!
//! All geometry lives in normalized image coordinates: an image spans
//! `[-1, 1]` on both axes, with `x` along width and `y` along height.
//! Transformations map points from the *output* frame (image B) into the
//! *source* frame (image A), matching the inverse-sampling direction used by
//! the resampler.
//!
//! The thin-plate spline is parametrized by the mapped positions of a fixed
//! uniform 3x3 control grid over `[-1,1]^2`; the 18-vector stores the nine
//! x-coordinates followed by the nine y-coordinates. Control points are
//! ordered row-major: (-1,-1), (0,-1), (1,-1), (-1,0), ... (1,1).

use crate::error::{Error, Result};
use crate::tensor::Scalar;
use nalgebra::{DMatrix, DVector};
use std::sync::OnceLock;

/// Number of TPS control points (fixed 3x3 grid).
pub const TPS_POINTS: usize = 9;
/// Number of points in the loss grid (21 x 21).
pub const LOSS_GRID_POINTS: usize = 441;

/// 2-D affine map `(x, y) -> (a11 x + a12 y + tx, a21 x + a22 y + ty)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub a11: Scalar,
    pub a12: Scalar,
    pub a21: Scalar,
    pub a22: Scalar,
    pub tx: Scalar,
    pub ty: Scalar,
}

impl AffineParams {
    pub fn identity() -> Self {
        AffineParams {
            a11: 1.0,
            a12: 0.0,
            a21: 0.0,
            a22: 1.0,
            tx: 0.0,
            ty: 0.0,
        }
    }

    pub fn translation(tx: Scalar, ty: Scalar) -> Self {
        AffineParams {
            tx,
            ty,
            ..Self::identity()
        }
    }

    /// Parameter vector in the pinned order `(a11, a12, a21, a22, tx, ty)`.
    pub fn to_array(self) -> [Scalar; 6] {
        [self.a11, self.a12, self.a21, self.a22, self.tx, self.ty]
    }

    pub fn from_slice(v: &[Scalar]) -> Result<Self> {
        if v.len() != 6 {
            return Err(Error::invalid(format!(
                "affine parameters need 6 values, got {}",
                v.len()
            )));
        }
        Ok(AffineParams {
            a11: v[0],
            a12: v[1],
            a21: v[2],
            a22: v[3],
            tx: v[4],
            ty: v[5],
        })
    }

    pub fn apply(&self, p: (Scalar, Scalar)) -> (Scalar, Scalar) {
        (
            self.a11 * p.0 + self.a12 * p.1 + self.tx,
            self.a21 * p.0 + self.a22 * p.1 + self.ty,
        )
    }

    pub fn determinant(&self) -> Scalar {
        self.a11 * self.a22 - self.a12 * self.a21
    }

    /// `self` after `inner`: returns the map `p -> self(inner(p))`.
    pub fn compose_affine(&self, inner: &AffineParams) -> AffineParams {
        AffineParams {
            a11: self.a11 * inner.a11 + self.a12 * inner.a21,
            a12: self.a11 * inner.a12 + self.a12 * inner.a22,
            a21: self.a21 * inner.a11 + self.a22 * inner.a21,
            a22: self.a21 * inner.a12 + self.a22 * inner.a22,
            tx: self.a11 * inner.tx + self.a12 * inner.ty + self.tx,
            ty: self.a21 * inner.tx + self.a22 * inner.ty + self.ty,
        }
    }

    pub fn inverse(&self) -> Result<AffineParams> {
        let det = self.determinant();
        if det.abs() <= 1e-12 {
            return Err(Error::Numeric(format!(
                "affine inverse: |det| = {:.3e} below 1e-12",
                det.abs()
            )));
        }
        let (i11, i12, i21, i22) = (
            self.a22 / det,
            -self.a12 / det,
            -self.a21 / det,
            self.a11 / det,
        );
        Ok(AffineParams {
            a11: i11,
            a12: i12,
            a21: i21,
            a22: i22,
            tx: -(i11 * self.tx + i12 * self.ty),
            ty: -(i21 * self.tx + i22 * self.ty),
        })
    }

    /// Elementwise mean of two parameter vectors.
    pub fn average(&self, other: &AffineParams) -> AffineParams {
        AffineParams {
            a11: 0.5 * (self.a11 + other.a11),
            a12: 0.5 * (self.a12 + other.a12),
            a21: 0.5 * (self.a21 + other.a21),
            a22: 0.5 * (self.a22 + other.a22),
            tx: 0.5 * (self.tx + other.tx),
            ty: 0.5 * (self.ty + other.ty),
        }
    }
}

/// TPS target coordinates: nine x values followed by nine y values.
#[derive(Clone, Debug, PartialEq)]
pub struct TpsParams {
    pub target_coords: [Scalar; 18],
}

impl TpsParams {
    /// Zero-displacement TPS: targets coincide with the source grid.
    pub fn identity() -> Self {
        let mut target_coords = [0.0; 18];
        for (i, &(x, y)) in source_control_points().iter().enumerate() {
            target_coords[i] = x;
            target_coords[TPS_POINTS + i] = y;
        }
        TpsParams { target_coords }
    }

    pub fn from_slice(v: &[Scalar]) -> Result<Self> {
        if v.len() != 18 {
            return Err(Error::invalid(format!(
                "TPS parameters need 18 values, got {}",
                v.len()
            )));
        }
        let mut target_coords = [0.0; 18];
        target_coords.copy_from_slice(v);
        Ok(TpsParams { target_coords })
    }

    pub fn target_point(&self, i: usize) -> (Scalar, Scalar) {
        (self.target_coords[i], self.target_coords[TPS_POINTS + i])
    }

    /// Targets transformed by an affine map; exact representation of
    /// `affine ∘ tps` back in pure TPS form.
    pub fn map_targets(&self, affine: &AffineParams) -> TpsParams {
        let mut target_coords = [0.0; 18];
        for i in 0..TPS_POINTS {
            let (x, y) = affine.apply(self.target_point(i));
            target_coords[i] = x;
            target_coords[TPS_POINTS + i] = y;
        }
        TpsParams { target_coords }
    }
}

/// Estimated or ground-truth transformation parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum TransformParams {
    Affine(AffineParams),
    Tps(TpsParams),
    /// Functional composition `outer ∘ inner` produced by [`compose`]; the
    /// two-stage pipeline's final estimate. Evaluated exactly, never refit.
    AffineTps {
        outer: AffineParams,
        inner: TpsParams,
    },
}

impl TransformParams {
    pub fn identity_affine() -> Self {
        TransformParams::Affine(AffineParams::identity())
    }

    pub fn identity_tps() -> Self {
        TransformParams::Tps(TpsParams::identity())
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            TransformParams::Affine(_) => "affine",
            TransformParams::Tps(_) => "tps",
            TransformParams::AffineTps { .. } => "affine+tps",
        }
    }

    /// Raw parameter vector (6 affine / 18 TPS / 24 composed).
    pub fn to_vec(&self) -> Vec<Scalar> {
        match self {
            TransformParams::Affine(a) => a.to_array().to_vec(),
            TransformParams::Tps(t) => t.target_coords.to_vec(),
            TransformParams::AffineTps { outer, inner } => {
                let mut v = outer.to_array().to_vec();
                v.extend_from_slice(&inner.target_coords);
                v
            }
        }
    }
}

/// Ordered list of 2-D points in normalized coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PointGrid {
    pub points: Vec<(Scalar, Scalar)>,
}

impl PointGrid {
    pub fn new(points: Vec<(Scalar, Scalar)>) -> Self {
        PointGrid { points }
    }

    /// The 21x21 loss grid: both coordinates range over `-1 + 0.1 n`,
    /// `n = 0..=20`.
    pub fn loss_grid() -> &'static PointGrid {
        static GRID: OnceLock<PointGrid> = OnceLock::new();
        GRID.get_or_init(|| {
            let mut points = Vec::with_capacity(LOSS_GRID_POINTS);
            for ny in 0..21 {
                for nx in 0..21 {
                    points.push((-1.0 + 0.1 * nx as Scalar, -1.0 + 0.1 * ny as Scalar));
                }
            }
            PointGrid { points }
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// The fixed 3x3 source control grid, row-major over `[-1,1]^2`.
pub fn source_control_points() -> &'static [(Scalar, Scalar); TPS_POINTS] {
    static PTS: OnceLock<[(Scalar, Scalar); TPS_POINTS]> = OnceLock::new();
    PTS.get_or_init(|| {
        let mut pts = [(0.0, 0.0); TPS_POINTS];
        for r in 0..3 {
            for c in 0..3 {
                pts[r * 3 + c] = (-1.0 + c as Scalar, -1.0 + r as Scalar);
            }
        }
        pts
    })
}

/// Radial kernel `U(r) = r^2 log(r^2)` evaluated on the squared distance,
/// with `U(0) = 0`.
fn kernel_u(d2: Scalar) -> Scalar {
    if d2 < 1e-30 {
        0.0
    } else {
        d2 * d2.ln()
    }
}

/// `d/dc U(|p - s|^2)` for coordinate difference `c = p_x - s_x` (or y).
fn kernel_u_prime(d2: Scalar, diff: Scalar) -> Scalar {
    if d2 < 1e-30 {
        0.0
    } else {
        2.0 * diff * (d2.ln() + 1.0)
    }
}

/// Solved interpolation coefficients for one TPS: per output dimension, nine
/// kernel weights plus affine terms `(a0, ax, ay)`.
#[derive(Clone, Debug)]
pub struct TpsCoefficients {
    pub w_x: [Scalar; TPS_POINTS],
    pub a_x: [Scalar; 3],
    pub w_y: [Scalar; TPS_POINTS],
    pub a_y: [Scalar; 3],
}

impl TpsCoefficients {
    pub fn evaluate(&self, p: (Scalar, Scalar)) -> (Scalar, Scalar) {
        let src = source_control_points();
        let mut x = self.a_x[0] + self.a_x[1] * p.0 + self.a_x[2] * p.1;
        let mut y = self.a_y[0] + self.a_y[1] * p.0 + self.a_y[2] * p.1;
        for (j, &(sx, sy)) in src.iter().enumerate() {
            let dx = p.0 - sx;
            let dy = p.1 - sy;
            let u = kernel_u(dx * dx + dy * dy);
            x += self.w_x[j] * u;
            y += self.w_y[j] * u;
        }
        (x, y)
    }

    /// 2x2 Jacobian `[dX/dx, dX/dy; dY/dx, dY/dy]` at `p`.
    fn jacobian(&self, p: (Scalar, Scalar)) -> [[Scalar; 2]; 2] {
        let src = source_control_points();
        let mut j = [[self.a_x[1], self.a_x[2]], [self.a_y[1], self.a_y[2]]];
        for (k, &(sx, sy)) in src.iter().enumerate() {
            let dx = p.0 - sx;
            let dy = p.1 - sy;
            let d2 = dx * dx + dy * dy;
            let ux = kernel_u_prime(d2, dx);
            let uy = kernel_u_prime(d2, dy);
            j[0][0] += self.w_x[k] * ux;
            j[0][1] += self.w_x[k] * uy;
            j[1][0] += self.w_y[k] * ux;
            j[1][1] += self.w_y[k] * uy;
        }
        j
    }
}

/// Precomputed inverse of the TPS interpolation system for the fixed source
/// grid, plus its condition number.
struct TpsSystem {
    inv: DMatrix<Scalar>,
    condition: Scalar,
}

fn tps_system() -> Result<&'static TpsSystem> {
    static SYS: OnceLock<std::result::Result<TpsSystem, String>> = OnceLock::new();
    SYS.get_or_init(|| {
        let src = source_control_points();
        let n = TPS_POINTS;
        let dim = n + 3;
        let mut l = DMatrix::<Scalar>::zeros(dim, dim);
        for i in 0..n {
            for j in 0..n {
                let dx = src[i].0 - src[j].0;
                let dy = src[i].1 - src[j].1;
                l[(i, j)] = kernel_u(dx * dx + dy * dy);
            }
            l[(i, n)] = 1.0;
            l[(i, n + 1)] = src[i].0;
            l[(i, n + 2)] = src[i].1;
            l[(n, i)] = 1.0;
            l[(n + 1, i)] = src[i].0;
            l[(n + 2, i)] = src[i].1;
        }
        let svd = l.clone().svd(false, false);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        let condition = if smin > 0.0 { smax / smin } else { Scalar::INFINITY };
        if !condition.is_finite() || condition > 1e12 {
            return Err(format!(
                "TPS system is numerically singular (condition {condition:.3e})"
            ));
        }
        match l.try_inverse() {
            Some(inv) => Ok(TpsSystem { inv, condition }),
            None => Err(format!(
                "TPS system not invertible (condition {condition:.3e})"
            )),
        }
    })
    .as_ref()
    .map_err(|msg| Error::Numeric(msg.clone()))
}

/// Solve the TPS interpolation problem for the fixed source grid.
///
/// The returned coefficients interpolate every control point exactly and
/// satisfy the usual side conditions (kernel weights orthogonal to constants
/// and to both coordinates).
pub fn tps_solve(params: &TpsParams) -> Result<TpsCoefficients> {
    let sys = tps_system()?;
    let n = TPS_POINTS;
    let mut rhs_x = DVector::<Scalar>::zeros(n + 3);
    let mut rhs_y = DVector::<Scalar>::zeros(n + 3);
    for i in 0..n {
        rhs_x[i] = params.target_coords[i];
        rhs_y[i] = params.target_coords[n + i];
    }
    let cx = &sys.inv * rhs_x;
    let cy = &sys.inv * rhs_y;
    let mut coeffs = TpsCoefficients {
        w_x: [0.0; TPS_POINTS],
        a_x: [cx[n], cx[n + 1], cx[n + 2]],
        w_y: [0.0; TPS_POINTS],
        a_y: [cy[n], cy[n + 1], cy[n + 2]],
    };
    for i in 0..n {
        coeffs.w_x[i] = cx[i];
        coeffs.w_y[i] = cy[i];
    }
    Ok(coeffs)
}

/// Condition number of the (fixed) TPS interpolation system.
pub fn tps_condition_number() -> Result<Scalar> {
    Ok(tps_system()?.condition)
}

/// Apply `theta` to a single point.
pub fn apply_point(theta: &TransformParams, p: (Scalar, Scalar)) -> Result<(Scalar, Scalar)> {
    Ok(match theta {
        TransformParams::Affine(a) => a.apply(p),
        TransformParams::Tps(t) => tps_solve(t)?.evaluate(p),
        TransformParams::AffineTps { outer, inner } => {
            outer.apply(tps_solve(inner)?.evaluate(p))
        }
    })
}

/// Apply `theta` to a list of points.
pub fn apply_points(
    theta: &TransformParams,
    points: &[(Scalar, Scalar)],
) -> Result<Vec<(Scalar, Scalar)>> {
    match theta {
        TransformParams::Affine(a) => Ok(points.iter().map(|&p| a.apply(p)).collect()),
        TransformParams::Tps(t) => {
            let c = tps_solve(t)?;
            Ok(points.iter().map(|&p| c.evaluate(p)).collect())
        }
        TransformParams::AffineTps { outer, inner } => {
            let c = tps_solve(inner)?;
            Ok(points.iter().map(|&p| outer.apply(c.evaluate(p))).collect())
        }
    }
}

/// Transform every point of a grid.
pub fn apply_transform(theta: &TransformParams, grid: &PointGrid) -> Result<PointGrid> {
    Ok(PointGrid::new(apply_points(theta, &grid.points)?))
}

/// Basis functions of the loss grid w.r.t. the 18 TPS targets: entry
/// `[i][j]` is the sensitivity of the transformed i-th grid point to target
/// j (identical for x and y because the spline is solved per dimension).
fn loss_grid_tps_basis() -> Result<&'static Vec<[Scalar; TPS_POINTS]>> {
    static BASIS: OnceLock<std::result::Result<Vec<[Scalar; TPS_POINTS]>, String>> =
        OnceLock::new();
    BASIS
        .get_or_init(|| {
            let sys = match tps_system() {
                Ok(s) => s,
                Err(e) => return Err(e.to_string()),
            };
            let src = source_control_points();
            let n = TPS_POINTS;
            let grid = PointGrid::loss_grid();
            let mut rows = Vec::with_capacity(grid.len());
            for &(px, py) in &grid.points {
                // k(p) = [U(|p-s_j|^2).., 1, px, py]; phi = (L^-T k)[0..9]
                let mut k = DVector::<Scalar>::zeros(n + 3);
                for (j, &(sx, sy)) in src.iter().enumerate() {
                    let dx = px - sx;
                    let dy = py - sy;
                    k[j] = kernel_u(dx * dx + dy * dy);
                }
                k[n] = 1.0;
                k[n + 1] = px;
                k[n + 2] = py;
                let phi = sys.inv.transpose() * k;
                let mut row = [0.0; TPS_POINTS];
                for j in 0..n {
                    row[j] = phi[j];
                }
                rows.push(row);
            }
            Ok(rows)
        })
        .as_ref()
        .map_err(|msg| Error::Numeric(msg.clone()))
}

/// Mean squared distance between the loss grid transformed by the two
/// parameter sets. Mixed kinds are allowed: the loss compares transformed
/// grids, never raw parameters.
pub fn grid_loss(theta_hat: &TransformParams, theta_gt: &TransformParams) -> Result<Scalar> {
    let grid = PointGrid::loss_grid();
    let hat = apply_points(theta_hat, &grid.points)?;
    let gt = apply_points(theta_gt, &grid.points)?;
    let n = grid.len() as Scalar;
    let mut acc = 0.0;
    for (a, b) in hat.iter().zip(gt.iter()) {
        let dx = a.0 - b.0;
        let dy = a.1 - b.1;
        acc += dx * dx + dy * dy;
    }
    Ok(acc / n)
}

/// Grid loss plus its gradient w.r.t. `theta_hat`'s raw parameter vector
/// (6 for affine, 18 for TPS). Composed estimates have no parameter vector
/// to differentiate and are rejected.
pub fn grid_loss_with_grad(
    theta_hat: &TransformParams,
    theta_gt: &TransformParams,
) -> Result<(Scalar, Vec<Scalar>)> {
    let grid = PointGrid::loss_grid();
    let hat = apply_points(theta_hat, &grid.points)?;
    let gt = apply_points(theta_gt, &grid.points)?;
    let n = grid.len() as Scalar;
    let mut loss = 0.0;
    let mut residuals = Vec::with_capacity(grid.len());
    for (a, b) in hat.iter().zip(gt.iter()) {
        let rx = a.0 - b.0;
        let ry = a.1 - b.1;
        loss += rx * rx + ry * ry;
        residuals.push((rx, ry));
    }
    loss /= n;

    let scale = 2.0 / n;
    let grad = match theta_hat {
        TransformParams::Affine(_) => {
            // d(x')/d(a11,a12,tx) = (gx, gy, 1); same pattern for y'.
            let mut g = vec![0.0; 6];
            for (&(gx, gy), &(rx, ry)) in grid.points.iter().zip(residuals.iter()) {
                g[0] += rx * gx;
                g[1] += rx * gy;
                g[2] += ry * gx;
                g[3] += ry * gy;
                g[4] += rx;
                g[5] += ry;
            }
            for v in g.iter_mut() {
                *v *= scale;
            }
            g
        }
        TransformParams::Tps(_) => {
            let basis = loss_grid_tps_basis()?;
            let mut g = vec![0.0; 18];
            for (row, &(rx, ry)) in basis.iter().zip(residuals.iter()) {
                for j in 0..TPS_POINTS {
                    g[j] += rx * row[j];
                    g[TPS_POINTS + j] += ry * row[j];
                }
            }
            for v in g.iter_mut() {
                *v *= scale;
            }
            g
        }
        TransformParams::AffineTps { .. } => {
            return Err(Error::invalid(
                "grid_loss gradient is defined for affine or TPS estimates, not compositions",
            ))
        }
    };
    Ok((loss, grad))
}

/// Functional composition `outer ∘ inner` (`outer` applied second).
///
/// Supported combinations: affine∘affine (closed form), affine∘TPS (the
/// two-stage pipeline's case, kept as an exact functional wrapper) and
/// affine∘(affine∘TPS) by folding the outer maps.
pub fn compose(outer: &TransformParams, inner: &TransformParams) -> Result<TransformParams> {
    match (outer, inner) {
        (TransformParams::Affine(o), TransformParams::Affine(i)) => {
            Ok(TransformParams::Affine(o.compose_affine(i)))
        }
        (TransformParams::Affine(o), TransformParams::Tps(i)) => Ok(TransformParams::AffineTps {
            outer: *o,
            inner: i.clone(),
        }),
        (TransformParams::Affine(o), TransformParams::AffineTps { outer: o2, inner }) => {
            Ok(TransformParams::AffineTps {
                outer: o.compose_affine(o2),
                inner: inner.clone(),
            })
        }
        _ => Err(Error::invalid(format!(
            "unsupported composition: outer {} with inner {}",
            outer.kind_name(),
            inner.kind_name()
        ))),
    }
}

/// A point mapped through [`invert`], with its convergence flag.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InvertedPoint {
    pub x: Scalar,
    pub y: Scalar,
    pub converged: bool,
}

const INVERT_RESIDUAL_TOL: Scalar = 1e-6;
const INVERT_MAX_ITERS: usize = 80;

/// Map points through the inverse of `theta`.
///
/// Affine transforms invert in closed form. TPS (and composed) transforms
/// invert per point by Gauss-Newton on `||T(x) - p||^2`, seeded from a dense
/// grid lookup; points that fail to reach residual 1e-6 are flagged rather
/// than failing the whole call.
pub fn invert(
    theta: &TransformParams,
    points: &[(Scalar, Scalar)],
) -> Result<Vec<InvertedPoint>> {
    match theta {
        TransformParams::Affine(a) => {
            let inv = a.inverse()?;
            Ok(points
                .iter()
                .map(|&p| {
                    let (x, y) = inv.apply(p);
                    InvertedPoint {
                        x,
                        y,
                        converged: true,
                    }
                })
                .collect())
        }
        TransformParams::Tps(t) => {
            let coeffs = tps_solve(t)?;
            Ok(points
                .iter()
                .map(|&p| invert_tps_point(&coeffs, p))
                .collect())
        }
        TransformParams::AffineTps { outer, inner } => {
            // outer(tps(x)) = p  <=>  tps(x) = outer^-1(p)
            let inv_outer = outer.inverse()?;
            let coeffs = tps_solve(inner)?;
            Ok(points
                .iter()
                .map(|&p| invert_tps_point(&coeffs, inv_outer.apply(p)))
                .collect())
        }
    }
}

fn invert_tps_point(coeffs: &TpsCoefficients, target: (Scalar, Scalar)) -> InvertedPoint {
    // Seed: nearest forward image over a coarse grid spanning past [-1,1].
    let mut best = (0.0, 0.0);
    let mut best_d2 = Scalar::INFINITY;
    const SEED_STEPS: usize = 33;
    for iy in 0..SEED_STEPS {
        for ix in 0..SEED_STEPS {
            let x = -1.6 + 3.2 * ix as Scalar / (SEED_STEPS - 1) as Scalar;
            let y = -1.6 + 3.2 * iy as Scalar / (SEED_STEPS - 1) as Scalar;
            let (fx, fy) = coeffs.evaluate((x, y));
            let d2 = (fx - target.0).powi(2) + (fy - target.1).powi(2);
            if d2 < best_d2 {
                best_d2 = d2;
                best = (x, y);
            }
        }
    }

    let mut p = best;
    let mut residual = best_d2.sqrt();
    for _ in 0..INVERT_MAX_ITERS {
        if residual < INVERT_RESIDUAL_TOL {
            return InvertedPoint {
                x: p.0,
                y: p.1,
                converged: true,
            };
        }
        let (fx, fy) = coeffs.evaluate(p);
        let (rx, ry) = (fx - target.0, fy - target.1);
        let j = coeffs.jacobian(p);
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        let (mut dx, mut dy);
        if det.abs() > 1e-12 {
            dx = -(j[1][1] * rx - j[0][1] * ry) / det;
            dy = -(-j[1][0] * rx + j[0][0] * ry) / det;
        } else {
            // Damped gradient step when the Jacobian degenerates.
            let gx = j[0][0] * rx + j[1][0] * ry;
            let gy = j[0][1] * rx + j[1][1] * ry;
            dx = -0.1 * gx;
            dy = -0.1 * gy;
        }
        // Backtrack if the full step overshoots.
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..8 {
            let cand = (p.0 + t * dx, p.1 + t * dy);
            let (cx, cy) = coeffs.evaluate(cand);
            let cr = ((cx - target.0).powi(2) + (cy - target.1).powi(2)).sqrt();
            if cr < residual {
                p = cand;
                residual = cr;
                improved = true;
                break;
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
        let _ = (&mut dx, &mut dy);
    }
    InvertedPoint {
        x: p.0,
        y: p.1,
        converged: residual < INVERT_RESIDUAL_TOL,
    }
}
