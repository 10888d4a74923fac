//! Epipolar evaluation: flow-sampled correspondences, the normalized
//! eight-point estimator, Sampson error, and mean flow magnitude.

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{Intrinsics, RelativeTransform};
use crate::grid::{GridError, TensorGrid, ValidityMask};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("insufficient data: {0}")]
    Insufficient(String),
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrespondenceSource {
    FlowSampled,
    SyntheticGt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceSet {
    /// `(u, u')` pixel pairs, `u` in frame a and `u'` in frame b.
    pub pairs: Vec<([f64; 2], [f64; 2])>,
    pub source: CorrespondenceSource,
}

impl CorrespondenceSet {
    pub fn new(pairs: Vec<([f64; 2], [f64; 2])>, source: CorrespondenceSource) -> Result<Self> {
        if pairs.iter().any(|(a, b)| !a.iter().chain(b).all(|v| v.is_finite())) {
            return Err(MetricsError::Numeric("correspondence with a non-finite coordinate".into()));
        }
        Ok(CorrespondenceSet { pairs, source })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Rank-2, unit Frobenius norm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FundamentalMatrix(Matrix3<f64>);

impl FundamentalMatrix {
    /// Normalizes an arbitrary nonzero matrix to unit Frobenius norm without
    /// touching its rank.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let n = m.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(MetricsError::Numeric("fundamental matrix must be finite and nonzero".into()));
        }
        Ok(FundamentalMatrix(m / n))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// `|<F, G>|` for unit-norm matrices; 1 means equal up to sign.
    pub fn alignment(&self, other: &FundamentalMatrix) -> f64 {
        self.0.dot(&other.0).abs()
    }
}

fn skew(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

/// `K_b^-T [t]_x R K_a^-1` for `X_b = R X_a + t`.
pub fn fundamental_from_pose(k_a: &Intrinsics, k_b: &Intrinsics, rel: &RelativeTransform) -> Result<FundamentalMatrix> {
    let pose = rel.as_pose();
    let e = skew(pose.translation()) * pose.rotation();
    FundamentalMatrix::from_matrix(k_b.inverse_matrix().transpose() * e * k_a.inverse_matrix())
}

/// Regular grid samples `u` with `u' = u + F(u)`. Pairs whose `u` or rounded
/// `u'` falls outside the static mask, or whose `u'` leaves the image, are dropped.
pub fn sample_correspondences(flow: &TensorGrid, grid_step: usize, static_mask: Option<&ValidityMask>) -> Result<CorrespondenceSet> {
    let (h, w, c) = flow.hwc()?;
    if c != 2 {
        return Err(MetricsError::Shape(format!("flow needs 2 channels, got {c}")));
    }
    if grid_step == 0 {
        return Err(MetricsError::Shape("grid_step must be at least 1".into()));
    }
    if let Some(m) = static_mask {
        if (m.height(), m.width()) != (h, w) {
            return Err(MetricsError::Shape(format!("mask is {}x{}, flow is {h}x{w}", m.height(), m.width())));
        }
    }
    let mut pairs = Vec::new();
    for y in (0..h).step_by(grid_step) {
        for x in (0..w).step_by(grid_step) {
            let i = (y * w + x) * 2;
            let (xb, yb) = (x as f64 + flow.get(i), y as f64 + flow.get(i + 1));
            if !(xb >= 0.0 && xb <= (w - 1) as f64 && yb >= 0.0 && yb <= (h - 1) as f64) {
                continue;
            }
            if let Some(m) = static_mask {
                if !m.get(y, x) || !m.get(yb.round() as usize, xb.round() as usize) {
                    continue;
                }
            }
            pairs.push(([x as f64, y as f64], [xb, yb]));
        }
    }
    if pairs.len() < 8 {
        return Err(MetricsError::Insufficient(format!("{} correspondences survive, need at least 8", pairs.len())));
    }
    CorrespondenceSet::new(pairs, CorrespondenceSource::FlowSampled)
}

/// Similarity taking the points to zero centroid and mean distance sqrt(2).
fn normalizer(points: impl Iterator<Item = [f64; 2]> + Clone) -> Result<Matrix3<f64>> {
    let n = points.clone().count() as f64;
    let (sx, sy) = points.clone().fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
    let (cx, cy) = (sx / n, sy / n);
    let mean_dist = points.map(|p| (p[0] - cx).hypot(p[1] - cy)).sum::<f64>() / n;
    if !(mean_dist > 0.0) {
        return Err(MetricsError::Degenerate("all points coincide".into()));
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Ok(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

const RANK_TOL: f64 = 1e-10;

/// Hartley-normalized linear eight-point estimate with rank-2 enforcement.
pub fn eight_point(corr: &CorrespondenceSet) -> Result<FundamentalMatrix> {
    let n = corr.len();
    if n < 8 {
        return Err(MetricsError::Insufficient(format!("{n} correspondences, need at least 8")));
    }
    let ta = normalizer(corr.pairs.iter().map(|p| p.0))?;
    let tb = normalizer(corr.pairs.iter().map(|p| p.1))?;
    let rows = n.max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (r, (u, v)) in corr.pairs.iter().enumerate() {
        let p = ta * Vector3::new(u[0], u[1], 1.0);
        let q = tb * Vector3::new(v[0], v[1], 1.0);
        let row = [q.x * p.x, q.x * p.y, q.x, q.y * p.x, q.y * p.y, q.y, p.x, p.y, 1.0];
        for (c, val) in row.iter().enumerate() {
            a[(r, c)] = *val;
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let (largest, eighth) = (svd.singular_values[order[0]], svd.singular_values[order[7]]);
    if !(eighth > RANK_TOL * largest) {
        return Err(MetricsError::Degenerate(format!(
            "design matrix has rank < 8 (singular value ratio {:.3e})",
            eighth / largest
        )));
    }
    let f = v_t.row(order[8]);
    let f_hat = Matrix3::new(f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7], f[8]);
    let inner = f_hat.svd(true, true);
    let (u, vt) = (inner.u.expect("requested U"), inner.v_t.expect("requested V^T"));
    let mut s = inner.singular_values;
    let smallest = s.imin();
    s[smallest] = 0.0;
    let rank2 = u * Matrix3::from_diagonal(&s) * vt;
    let mut full = tb.transpose() * rank2 * ta;
    // deterministic sign: largest-magnitude entry positive
    let pivot = full.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
    if pivot < 0.0 {
        full = -full;
    }
    FundamentalMatrix::from_matrix(full)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampsonReport {
    /// Per-pair errors, in pair order, for the pairs that were scored.
    pub errors: Vec<f64>,
    pub mean: f64,
    /// Pairs skipped because the gradient denominator vanished.
    pub skipped: usize,
}

const DENOM_MIN: f64 = 1e-18;

/// `(u'^T F u)^2 / ((Fu)_1^2 + (Fu)_2^2 + (F^T u')_1^2 + (F^T u')_2^2)` in pixel coordinates.
pub fn sampson_error(f: &FundamentalMatrix, corr: &CorrespondenceSet) -> Result<SampsonReport> {
    let m = f.matrix();
    let mut errors = Vec::with_capacity(corr.len());
    let mut skipped = 0;
    for (u, v) in &corr.pairs {
        let p = Vector3::new(u[0], u[1], 1.0);
        let q = Vector3::new(v[0], v[1], 1.0);
        let fp = m * p;
        let ftq = m.transpose() * q;
        let denom = fp.x * fp.x + fp.y * fp.y + ftq.x * ftq.x + ftq.y * ftq.y;
        if denom < DENOM_MIN {
            skipped += 1;
            continue;
        }
        let num = q.dot(&fp);
        errors.push(num * num / denom);
    }
    if errors.is_empty() {
        return Err(MetricsError::Insufficient(format!("all {} pairs hit the denominator guard", corr.len())));
    }
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    Ok(SampsonReport { errors, mean, skipped })
}

/// Mean flow magnitude over all pixels of all fields.
pub fn dynamic_degree(flows: &[&TensorGrid]) -> Result<f64> {
    if flows.is_empty() {
        return Err(MetricsError::Insufficient("no flow fields".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for f in flows {
        let (h, w, c) = f.hwc()?;
        if c != 2 {
            return Err(MetricsError::Shape(format!("flow needs 2 channels, got {c}")));
        }
        for i in 0..h * w {
            total += f.get(2 * i).hypot(f.get(2 * i + 1));
        }
        count += h * w;
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_flow(h: usize, w: usize, fx: f64, fy: f64) -> TensorGrid {
        TensorGrid::from_f64(vec![h, w, 2], (0..h * w).flat_map(|_| [fx, fy]).collect()).unwrap()
    }

    #[test]
    fn zero_flow_grid() {
        let c = sample_correspondences(&constant_flow(32, 32, 0.0, 0.0), 8, None).unwrap();
        assert_eq!(c.len(), 16);
        assert!(c.pairs.iter().all(|(a, b)| a == b));
        assert!(matches!(sample_correspondences(&constant_flow(8, 8, 0.0, 0.0), 16, None), Err(MetricsError::Insufficient(_))));
    }

    #[test]
    fn zero_motion_is_degenerate() {
        let c = sample_correspondences(&constant_flow(32, 32, 0.0, 0.0), 4, None).unwrap();
        assert!(matches!(eight_point(&c), Err(MetricsError::Degenerate(_))));
    }

    #[test]
    fn sampson_worked_values() {
        let f = FundamentalMatrix(Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0));
        let on_line = CorrespondenceSet::new(vec![([0.0, 0.0], [5.0, 0.0])], CorrespondenceSource::SyntheticGt).unwrap();
        assert_eq!(sampson_error(&f, &on_line).unwrap().mean, 0.0);
        let off = CorrespondenceSet::new(vec![([0.0, 0.0], [0.0, 1.0])], CorrespondenceSource::SyntheticGt).unwrap();
        assert!((sampson_error(&f, &off).unwrap().mean - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sampson_guard_counts_skips() {
        let f = FundamentalMatrix(Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0));
        let c = CorrespondenceSet::new(vec![([1.0, 2.0], [3.0, 4.0])], CorrespondenceSource::SyntheticGt).unwrap();
        assert!(matches!(sampson_error(&f, &c), Err(MetricsError::Insufficient(_))));
    }

    #[test]
    fn dynamic_degree_values() {
        assert_eq!(dynamic_degree(&[&constant_flow(4, 4, 0.0, 0.0)]).unwrap(), 0.0);
        assert_eq!(dynamic_degree(&[&constant_flow(4, 4, 3.0, 4.0)]).unwrap(), 5.0);
        let half = TensorGrid::from_f64(vec![1, 2, 2], vec![0.0, 0.0, 2.0, 0.0]).unwrap();
        assert_eq!(dynamic_degree(&[&half]).unwrap(), 1.0);
        assert!(dynamic_degree(&[]).is_err());
    }
}
