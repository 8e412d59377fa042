//! Raw pen traces to standardized time-function feature sequences.
//!
//! The pipeline is `center_normalize -> normalize_pressure -> resample ->
//! compute_time_functions -> standardize`; [`preprocess`] runs all of it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TracePoint<T> {
    pub x: T,
    pub y: T,
    /// Pen pressure, `>= 0`.
    pub p: T,
    /// Seconds.
    pub t: T,
}

impl<T> TracePoint<T> {
    pub fn new(x: T, y: T, p: T, t: T) -> Self {
        Self { x, y, p, t }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleKind {
    Genuine,
    Skilled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawTrace<T> {
    pub points: Vec<TracePoint<T>>,
    pub writer_id: String,
    pub kind: SampleKind,
    pub session: u32,
    pub source_hz: T,
}

impl<T: Scalar> RawTrace<T> {
    pub fn new(writer_id: impl Into<String>, kind: SampleKind, points: Vec<TracePoint<T>>) -> Self {
        Self {
            points,
            writer_id: writer_id.into(),
            kind,
            session: 1,
            source_hz: T::lit(120.0),
        }
    }

    /// Checks non-emptiness, strictly increasing time and non-negative pressure.
    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::InvalidTrace("trace has no points".into()));
        }
        for (i, pt) in self.points.iter().enumerate() {
            if !(pt.x.is_finite() && pt.y.is_finite() && pt.p.is_finite() && pt.t.is_finite()) {
                return Err(Error::InvalidTrace(format!("non-finite value at point {i}")));
            }
            if pt.p < T::zero() {
                return Err(Error::InvalidTrace(format!("negative pressure at point {i}")));
            }
        }
        if let Some(i) = self.points.windows(2).position(|w| w[1].t <= w[0].t) {
            return Err(Error::InvalidTrace(format!(
                "timestamps not strictly increasing at point {}",
                i + 1
            )));
        }
        Ok(())
    }

    fn with_points(&self, points: Vec<TracePoint<T>>) -> Self {
        Self {
            points,
            writer_id: self.writer_id.clone(),
            kind: self.kind,
            session: self.session,
            source_hz: self.source_hz,
        }
    }

    pub fn duration(&self) -> T {
        match (self.points.first(), self.points.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => T::zero(),
        }
    }
}

/// Which time functions are emitted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelSet {
    /// The fourteen listed kinematic/pressure channels plus `log(1 + v)`.
    #[default]
    Fifteen,
    /// The fourteen listed channels only.
    Fourteen,
}

impl ChannelSet {
    pub fn count(self) -> usize {
        match self {
            ChannelSet::Fifteen => 15,
            ChannelSet::Fourteen => 14,
        }
    }
}

/// Channel names in emission order.
pub const CHANNEL_NAMES: [&str; 15] = [
    "vx", "vy", "v", "dv", "theta", "cos", "sin", "dtheta", "ddtheta", "cent", "a", "p", "dp",
    "ddp", "logv",
];

pub fn channel_index(name: &str) -> Option<usize> {
    CHANNEL_NAMES.iter().position(|&n| n == name)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence<T> {
    /// `[L x channels]`, one row per timestep.
    pub values: Matrix<T>,
}

impl<T: Scalar> FeatureSequence<T> {
    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Diagnostics {
    /// Samples where the pen did not move and the tangent angle was set to 0.
    pub zero_velocity_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub target_hz: f64,
    pub channels: ChannelSet,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_hz: 120.0,
            channels: ChannelSet::Fifteen,
        }
    }
}

/// Moves the mean of `(x, y)` to the origin and scales both axes by one factor
/// so that `max(|x|, |y|) = 1`.
pub fn center_normalize<T: Scalar>(trace: &RawTrace<T>) -> RawTrace<T> {
    let n = T::from_usize_lossy(trace.points.len().max(1));
    let mx = trace.points.iter().map(|p| p.x).sum::<T>() / n;
    let my = trace.points.iter().map(|p| p.y).sum::<T>() / n;
    let extent = trace
        .points
        .iter()
        .fold(T::zero(), |m, p| m.max((p.x - mx).abs()).max((p.y - my).abs()));
    let scale = if extent > T::zero() { extent } else { T::one() };
    let points = trace
        .points
        .iter()
        .map(|p| TracePoint::new((p.x - mx) / scale, (p.y - my) / scale, p.p, p.t))
        .collect();
    trace.with_points(points)
}

/// Min-max scales pressure into `[0, 1]`; a constant pressure maps to 0.
pub fn normalize_pressure<T: Scalar>(trace: &RawTrace<T>) -> RawTrace<T> {
    let lo = trace.points.iter().fold(T::infinity(), |m, p| m.min(p.p));
    let hi = trace.points.iter().fold(T::neg_infinity(), |m, p| m.max(p.p));
    let span = hi - lo;
    let points = trace
        .points
        .iter()
        .map(|p| {
            let q = if span > T::zero() { (p.p - lo) / span } else { T::zero() };
            TracePoint::new(p.x, p.y, q, p.t)
        })
        .collect();
    trace.with_points(points)
}

/// Resamples to a uniform `target_hz` grid over `[t0, t_last]` with a cubic
/// Hermite spline whose tangents are finite differences (Catmull-Rom on
/// non-uniform knots). Fewer than four points fall back to linear interpolation.
pub fn resample<T: Scalar>(trace: &RawTrace<T>, target_hz: T) -> Result<RawTrace<T>> {
    if !(target_hz > T::zero()) {
        return Err(Error::InvalidInput(format!("target rate must be positive, got {target_hz}")));
    }
    let pts = &trace.points;
    let duration = trace.duration();
    if pts.len() < 2 || !(duration > T::zero()) {
        return Err(Error::InvalidTrace("zero-duration trace cannot be resampled".into()));
    }
    let t0 = pts[0].t;
    let count = (duration * target_hz + T::lit(1e-9)).floor().to_usize().unwrap_or(0) + 1;
    let times: Vec<T> = pts.iter().map(|p| p.t).collect();
    let chans: [Vec<T>; 3] = [
        pts.iter().map(|p| p.x).collect(),
        pts.iter().map(|p| p.y).collect(),
        pts.iter().map(|p| p.p).collect(),
    ];
    let tangents: Option<[Vec<T>; 3]> = (pts.len() >= 4).then(|| {
        [
            knot_tangents(&times, &chans[0]),
            knot_tangents(&times, &chans[1]),
            knot_tangents(&times, &chans[2]),
        ]
    });

    let mut out = Vec::with_capacity(count);
    let mut seg = 0usize;
    for i in 0..count {
        let t = t0 + T::from_usize_lossy(i) / target_hz;
        while seg + 2 < times.len() && t > times[seg + 1] {
            seg += 1;
        }
        let (ta, tb) = (times[seg], times[seg + 1]);
        let h = tb - ta;
        let u = ((t - ta) / h).max(T::zero()).min(T::one());
        let mut v = [T::zero(); 3];
        for (c, vc) in v.iter_mut().enumerate() {
            let (ya, yb) = (chans[c][seg], chans[c][seg + 1]);
            *vc = match &tangents {
                Some(m) => hermite(ya, yb, m[c][seg] * h, m[c][seg + 1] * h, u),
                None => ya + (yb - ya) * u,
            };
        }
        // Cubic overshoot can dip pressure below zero.
        out.push(TracePoint::new(v[0], v[1], v[2].max(T::zero()), t));
    }
    let mut res = trace.with_points(out);
    res.source_hz = target_hz;
    Ok(res)
}

fn knot_tangents<T: Scalar>(t: &[T], y: &[T]) -> Vec<T> {
    let n = t.len();
    (0..n)
        .map(|i| {
            let (a, b) = if i == 0 {
                (0, 1)
            } else if i == n - 1 {
                (n - 2, n - 1)
            } else {
                (i - 1, i + 1)
            };
            (y[b] - y[a]) / (t[b] - t[a])
        })
        .collect()
}

#[inline]
fn hermite<T: Scalar>(y0: T, y1: T, m0: T, m1: T, u: T) -> T {
    let two = T::lit(2.0);
    let three = T::lit(3.0);
    let u2 = u * u;
    let u3 = u2 * u;
    let h00 = two * u3 - three * u2 + T::one();
    let h10 = u3 - two * u2 + u;
    let h01 = three * u2 - two * u3;
    let h11 = u3 - u2;
    h00 * y0 + h10 * m0 + h01 * y1 + h11 * m1
}

/// Central differences inside, one-sided at the ends, scaled by `rate`.
pub fn derivative<T: Scalar>(y: &[T], rate: T) -> Vec<T> {
    let n = y.len();
    if n < 2 {
        return vec![T::zero(); n];
    }
    let half = T::lit(0.5);
    (0..n)
        .map(|i| {
            if i == 0 {
                (y[1] - y[0]) * rate
            } else if i == n - 1 {
                (y[n - 1] - y[n - 2]) * rate
            } else {
                (y[i + 1] - y[i - 1]) * half * rate
            }
        })
        .collect()
}

/// Removes `2π` jumps so consecutive samples differ by at most `π`.
pub fn unwrap_angle<T: Scalar>(theta: &[T]) -> Vec<T> {
    let pi = T::PI();
    let two_pi = pi + pi;
    let mut out = Vec::with_capacity(theta.len());
    let mut offset = T::zero();
    for (i, &th) in theta.iter().enumerate() {
        if i > 0 {
            let d = th - theta[i - 1];
            if d.abs() > pi {
                offset -= two_pi * (d / two_pi).round();
            }
        }
        out.push(th + offset);
    }
    out
}

/// Extracts the time-function channels from a uniformly sampled trace.
pub fn compute_time_functions<T: Scalar>(
    trace: &RawTrace<T>,
    channels: ChannelSet,
) -> Result<(FeatureSequence<T>, Diagnostics)> {
    let n = trace.points.len();
    if n < 3 {
        return Err(Error::TooShort { what: "time functions", min: 3, got: n });
    }
    let duration = trace.duration();
    if !(duration > T::zero()) {
        return Err(Error::InvalidTrace("zero-duration trace".into()));
    }
    let rate = T::from_usize_lossy(n - 1) / duration;
    let x: Vec<T> = trace.points.iter().map(|p| p.x).collect();
    let y: Vec<T> = trace.points.iter().map(|p| p.y).collect();
    let p: Vec<T> = trace.points.iter().map(|p| p.p).collect();

    let vx = derivative(&x, rate);
    let vy = derivative(&y, rate);
    let v: Vec<T> = vx.iter().zip(&vy).map(|(&a, &b)| a.hypot(b)).collect();
    let dv = derivative(&v, rate);
    let mut diag = Diagnostics::default();
    let theta: Vec<T> = vx
        .iter()
        .zip(&vy)
        .map(|(&a, &b)| {
            if a == T::zero() && b == T::zero() {
                diag.zero_velocity_samples += 1;
                T::zero()
            } else {
                b.atan2(a)
            }
        })
        .collect();
    let dtheta = derivative(&unwrap_angle(&theta), rate);
    let ddtheta = derivative(&dtheta, rate);
    let cent: Vec<T> = v.iter().zip(&dtheta).map(|(&a, &b)| a * b).collect();
    let acc: Vec<T> = dv.iter().zip(&cent).map(|(&a, &b)| a.hypot(b)).collect();
    let dp = derivative(&p, rate);
    let ddp = derivative(&dp, rate);
    let logv: Vec<T> = v.iter().map(|&s| s.ln_1p()).collect();

    let cos: Vec<T> = theta.iter().map(|t| t.cos()).collect();
    let sin: Vec<T> = theta.iter().map(|t| t.sin()).collect();
    let mut cols: Vec<&[T]> = vec![
        &vx, &vy, &v, &dv, &theta, &cos, &sin, &dtheta, &ddtheta, &cent, &acc, &p, &dp, &ddp,
    ];
    if channels == ChannelSet::Fifteen {
        cols.push(&logv);
    }
    let values = Matrix::from_fn(n, cols.len(), |r, c| cols[c][r]);
    Ok((FeatureSequence { values }, diag))
}

/// Per-column z-score with population standard deviation; constant columns
/// become zeros.
pub fn standardize<T: Scalar>(features: &FeatureSequence<T>) -> Result<FeatureSequence<T>> {
    let (l, ch) = features.values.shape();
    if l < 2 {
        return Err(Error::TooShort { what: "standardize", min: 2, got: l });
    }
    let nl = T::from_usize_lossy(l);
    let mut out = features.values.clone();
    for c in 0..ch {
        let col = features.values.column(c);
        let mean = col.iter().copied().sum::<T>() / nl;
        let var = col.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nl;
        let sd = var.sqrt();
        let scale = col.iter().fold(T::zero(), |m, v| m.max(v.abs()));
        let degenerate = !(sd > T::epsilon() * T::lit(64.0) * scale.max(T::min_positive_value()));
        for r in 0..l {
            out[(r, c)] = if degenerate { T::zero() } else { (col[r] - mean) / sd };
        }
    }
    Ok(FeatureSequence { values: out })
}

/// Full preprocessing chain for one trace.
pub fn preprocess<T: Scalar>(trace: &RawTrace<T>, cfg: &PreprocessConfig) -> Result<(FeatureSequence<T>, Diagnostics)> {
    trace.validate()?;
    let t = normalize_pressure(&center_normalize(trace));
    let t = resample(&t, T::lit(cfg.target_hz))?;
    let (f, diag) = compute_time_functions(&t, cfg.channels)?;
    Ok((standardize(&f)?, diag))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace_xy(pts: &[(f64, f64)]) -> RawTrace<f64> {
        let points = pts
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| TracePoint::new(x, y, 1.0, i as f64 * 0.01))
            .collect();
        RawTrace::new("w", SampleKind::Genuine, points)
    }

    fn trace_fn(n: usize, hz: f64, f: impl Fn(f64) -> (f64, f64, f64)) -> RawTrace<f64> {
        let points = (0..n)
            .map(|i| {
                let t = i as f64 / hz;
                let (x, y, p) = f(t);
                TracePoint::new(x, y, p, t)
            })
            .collect();
        let mut tr = RawTrace::new("w", SampleKind::Genuine, points);
        tr.source_hz = hz;
        tr
    }

    fn xy(t: &RawTrace<f64>) -> Vec<(f64, f64)> {
        t.points.iter().map(|p| (p.x, p.y)).collect()
    }

    #[test]
    fn center_normalize_examples() {
        assert_eq!(xy(&center_normalize(&trace_xy(&[(0.0, 0.0), (2.0, 0.0)]))), vec![(-1.0, 0.0), (1.0, 0.0)]);
        assert_eq!(xy(&center_normalize(&trace_xy(&[(5.0, 5.0)]))), vec![(0.0, 0.0)]);
        assert_eq!(xy(&center_normalize(&trace_xy(&[(0.0, 0.0), (4.0, 2.0)]))), vec![(-1.0, -0.5), (1.0, 0.5)]);
    }

    #[test]
    fn center_normalize_keeps_pressure_and_time() {
        let tr = trace_fn(10, 100.0, |t| (3.0 * t, -t, t * 2.0));
        let out = center_normalize(&tr);
        for (a, b) in tr.points.iter().zip(&out.points) {
            assert_eq!((a.p, a.t), (b.p, b.t));
        }
    }

    #[test]
    fn pressure_examples() {
        let mk = |ps: &[f64]| {
            let pts = ps.iter().enumerate().map(|(i, &p)| TracePoint::new(0.0, 0.0, p, i as f64)).collect();
            let out = normalize_pressure(&RawTrace::new("w", SampleKind::Genuine, pts));
            out.points.iter().map(|p| p.p).collect::<Vec<_>>()
        };
        assert_eq!(mk(&[0.0, 5.0, 10.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(mk(&[3.0, 3.0, 3.0]), vec![0.0, 0.0, 0.0]);
        assert_eq!(mk(&[1.0, 2.0]), vec![0.0, 1.0]);
    }

    #[test]
    fn resample_count() {
        let tr = trace_fn(100, 100.0, |t| (t, 0.0, 1.0));
        let out = resample(&tr, 120.0).unwrap();
        assert_eq!(out.points.len(), 119);
        assert!(out.points.windows(2).all(|w| w[1].t > w[0].t));
    }

    #[test]
    fn resample_reproduces_linear_ramp() {
        let tr = trace_fn(37, 50.0, |t| (t, 2.0 * t - 1.0, 0.5 + t));
        for hz in [33.0, 120.0, 250.0] {
            let out = resample(&tr, hz).unwrap();
            for p in &out.points {
                assert!((p.x - p.t).abs() < 1e-9);
                assert!((p.y - (2.0 * p.t - 1.0)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn resample_cubic_error_against_closed_form() {
        let tr = trace_fn(51, 50.0, |t| (t * t * t, 0.0, 1.0));
        let out = resample(&tr, 120.0).unwrap();
        let err = out.points.iter().map(|p| (p.x - p.t.powi(3)).abs()).fold(0.0, f64::max);
        assert!(err < 1e-3, "max error {err}");
    }

    #[test]
    fn resample_linear_fallback_and_errors() {
        let tr = trace_fn(3, 10.0, |t| (t, t, 1.0));
        let out = resample(&tr, 100.0).unwrap();
        assert_eq!(out.points.len(), 21);
        assert!(out.points.iter().all(|p| (p.x - p.t).abs() < 1e-12));
        let single = trace_fn(1, 10.0, |_| (0.0, 0.0, 0.0));
        assert!(resample(&single, 120.0).is_err());
        assert!(resample(&tr, 0.0).is_err());
    }

    #[test]
    fn resample_at_source_rate_is_identity_inside() {
        let tr = trace_fn(60, 100.0, |t| ((7.0 * t).sin(), (3.0 * t).cos(), 1.0 + t));
        let out = resample(&tr, 100.0).unwrap();
        assert_eq!(out.points.len(), 60);
        for (a, b) in tr.points.iter().zip(&out.points).skip(1).take(58) {
            assert!((a.x - b.x).abs() < 1e-6 && (a.y - b.y).abs() < 1e-6 && (a.p - b.p).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_motion_time_functions() {
        let tr = trace_fn(20, 100.0, |t| (t, 0.0, 0.7));
        let (f, diag) = compute_time_functions(&tr, ChannelSet::Fifteen).unwrap();
        assert_eq!(diag.zero_velocity_samples, 0);
        for r in 1..19 {
            let row = f.values.row(r);
            assert!((row[0] - 1.0).abs() < 1e-9, "vx {}", row[0]);
            let expect = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.7, 0.0, 0.0];
            for (c, &e) in expect.iter().enumerate() {
                assert!((row[c] - e).abs() < 1e-9, "channel {} = {}", CHANNEL_NAMES[c], row[c]);
            }
            assert!((row[14] - 2f64.ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn circular_motion_has_constant_speed_and_turn_rate() {
        let hz = 1000.0;
        let tr = trace_fn(4000, hz, |t| (t.cos(), t.sin(), 1.0));
        let (f, _) = compute_time_functions(&tr, ChannelSet::Fifteen).unwrap();
        for r in 2..3998 {
            assert!((f.values[(r, 2)] - 1.0).abs() < 1e-2);
            assert!((f.values[(r, 7)] - 1.0).abs() < 1e-2, "dtheta {} at {r}", f.values[(r, 7)]);
        }
    }

    #[test]
    fn stationary_pen_is_all_zero_derivatives() {
        let tr = trace_fn(10, 100.0, |_| (0.3, 0.3, 0.5));
        let (f, diag) = compute_time_functions(&tr, ChannelSet::Fourteen).unwrap();
        assert_eq!(f.channels(), 14);
        assert_eq!(diag.zero_velocity_samples, 10);
        for r in 0..10 {
            let row = f.values.row(r);
            for c in [0, 1, 2, 3, 4, 6, 7, 8, 9, 10, 12, 13] {
                assert_eq!(row[c], 0.0);
            }
            assert_eq!(row[5], 1.0);
        }
    }

    #[test]
    fn standardize_examples() {
        let f = FeatureSequence { values: Matrix::from_vec(2, 1, vec![1.0, 3.0]).unwrap() };
        assert_eq!(standardize(&f).unwrap().values.as_slice(), &[-1.0, 1.0]);
        let f = FeatureSequence { values: Matrix::from_vec(3, 1, vec![5.0, 5.0, 5.0]).unwrap() };
        assert_eq!(standardize(&f).unwrap().values.as_slice(), &[0.0, 0.0, 0.0]);
        let f = FeatureSequence { values: Matrix::from_vec(1, 1, vec![5.0]).unwrap() };
        assert!(standardize(&f).is_err());
    }

    #[test]
    fn angle_unwrap_removes_jumps() {
        let th = [3.0_f64, -3.0, -2.9, 3.1];
        let u = unwrap_angle(&th);
        for w in u.windows(2) {
            assert!((w[1] - w[0]).abs() <= std::f64::consts::PI);
        }
        assert!((u[1] - (2.0 * std::f64::consts::PI - 3.0)).abs() < 1e-12);
    }

    #[test]
    fn invalid_traces_rejected() {
        let mut tr = trace_fn(5, 100.0, |t| (t, t, 1.0));
        tr.points[3].t = tr.points[2].t;
        assert!(tr.validate().is_err());
        let mut tr = trace_fn(5, 100.0, |t| (t, t, 1.0));
        tr.points[1].p = -0.1;
        assert!(tr.validate().is_err());
        assert!(RawTrace::<f64>::new("w", SampleKind::Genuine, vec![]).validate().is_err());
    }
}
