//! Real-input DFT kernels, half-spectrum bookkeeping, the learnable complex
//! filter and STFT spectrograms.
//!
//! Matrices in this module are channel-major: `[d x N]`, one row per channel,
//! transforms taken along each row.
//!
//! A half spectrum keeps the first `⌈N/2⌉` bins. For even `N` the Nyquist bin
//! `X[N/2]` is not among them, yet it is needed to invert the transform, so it
//! is carried separately as one real value per channel. Packed form, used by
//! the gradient tape, lays a row out as `[re_0..re_{K-1}, im_0..im_{K-1}, nyq]`
//! with the trailing Nyquist entry present only for even `N`.

pub mod fft;

use std::io::Write;

use num_complex::Complex;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;
use fft::{fft, Direction};

/// Number of retained bins for a length-`n` signal.
#[inline]
pub fn half_len(n: usize) -> usize {
    n.div_ceil(2)
}

/// Width of one packed half-spectrum row.
#[inline]
pub fn packed_len(n: usize) -> usize {
    2 * half_len(n) + usize::from(n.is_multiple_of(2))
}

#[derive(Clone, Debug, PartialEq)]
pub struct HalfSpectrum<T> {
    /// `[d x ⌈N/2⌉]`, row-major.
    pub coeffs: Vec<Complex<T>>,
    /// Real Nyquist coefficient per channel; empty when `N` is odd.
    pub nyquist: Vec<T>,
    pub channels: usize,
    pub full_len: usize,
}

impl<T: Scalar> HalfSpectrum<T> {
    pub fn bins(&self) -> usize {
        half_len(self.full_len)
    }

    #[inline]
    pub fn coeff(&self, ch: usize, k: usize) -> Complex<T> {
        self.coeffs[ch * self.bins() + k]
    }

    pub fn to_packed(&self) -> Matrix<T> {
        let k = self.bins();
        let even = self.full_len.is_multiple_of(2);
        Matrix::from_fn(self.channels, packed_len(self.full_len), |r, c| {
            if c < k {
                self.coeffs[r * k + c].re
            } else if c < 2 * k {
                self.coeffs[r * k + c - k].im
            } else {
                debug_assert!(even);
                self.nyquist[r]
            }
        })
    }

    pub fn from_packed(p: &Matrix<T>, full_len: usize) -> Result<Self> {
        if p.cols() != packed_len(full_len) {
            return Err(Error::Shape {
                op: "HalfSpectrum::from_packed",
                detail: format!("{} columns for N={full_len}", p.cols()),
            });
        }
        let k = half_len(full_len);
        let mut coeffs = Vec::with_capacity(p.rows() * k);
        let mut nyquist = Vec::new();
        for r in 0..p.rows() {
            let row = p.row(r);
            coeffs.extend((0..k).map(|i| Complex::new(row[i], row[k + i])));
            if full_len.is_multiple_of(2) {
                nyquist.push(row[2 * k]);
            }
        }
        Ok(Self {
            coeffs,
            nyquist,
            channels: p.rows(),
            full_len,
        })
    }
}

/// Learnable complex weights, `[d x l]` real and imaginary parts.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterWeights<T> {
    pub re: Matrix<T>,
    pub im: Matrix<T>,
}

impl<T: Scalar> FilterWeights<T> {
    pub fn new(re: Matrix<T>, im: Matrix<T>) -> Result<Self> {
        if re.shape() != im.shape() {
            return Err(Error::Shape {
                op: "FilterWeights::new",
                detail: format!("re {:?} vs im {:?}", re.shape(), im.shape()),
            });
        }
        if re.cols() < 2 {
            return Err(Error::InvalidInput(format!("filter scale must be >= 2, got {}", re.cols())));
        }
        Ok(Self { re, im })
    }

    /// All-pass filter `w = 1 + 0j`.
    pub fn identity(d: usize, l: usize) -> Self {
        Self {
            re: Matrix::filled(d, l, T::one()),
            im: Matrix::zeros(d, l),
        }
    }

    /// `1 + 0j` plus independent Gaussian noise on both parts.
    pub fn init<R: Rng + ?Sized>(d: usize, l: usize, sigma: f64, rng: &mut R) -> Self {
        let noise = Normal::new(0.0, sigma).expect("valid sigma");
        Self {
            re: Matrix::from_fn(d, l, |_, _| T::lit(1.0 + noise.sample(rng))),
            im: Matrix::from_fn(d, l, |_, _| T::lit(noise.sample(rng))),
        }
    }

    pub fn channels(&self) -> usize {
        self.re.rows()
    }

    pub fn scale(&self) -> usize {
        self.re.cols()
    }
}

/// `X[i,k] = Σ_n x[i,n] e^{-j2πkn/N}` for the retained bins.
pub fn rdft<T: Scalar>(x: &Matrix<T>) -> Result<HalfSpectrum<T>> {
    let (d, n) = x.shape();
    if n == 0 {
        return Err(Error::InvalidInput("rdft of an empty signal".into()));
    }
    let k = half_len(n);
    let mut coeffs = Vec::with_capacity(d * k);
    let mut nyquist = Vec::new();
    for r in 0..d {
        let buf: Vec<Complex<T>> = x.row(r).iter().map(|&v| Complex::new(v, T::zero())).collect();
        let spec = fft(&buf, Direction::Forward);
        coeffs.extend_from_slice(&spec[..k]);
        if n % 2 == 0 {
            nyquist.push(spec[n / 2].re);
        }
    }
    Ok(HalfSpectrum {
        coeffs,
        nyquist,
        channels: d,
        full_len: n,
    })
}

/// Rebuilds the full spectrum by conjugate symmetry and applies the
/// `1/N`-normalized inverse transform. The imaginary part of the DC bin is not
/// representable in a real signal and is dropped, as is done for the Nyquist
/// bin by construction.
pub fn irdft<T: Scalar>(spec: &HalfSpectrum<T>) -> Result<Matrix<T>> {
    let n = spec.full_len;
    let k = spec.bins();
    if spec.coeffs.len() != spec.channels * k
        || (n.is_multiple_of(2) && spec.nyquist.len() != spec.channels)
    {
        return Err(Error::Shape {
            op: "irdft",
            detail: "coefficient count does not match channels x bins".into(),
        });
    }
    let inv_n = T::one() / T::from_usize_lossy(n);
    let zero = Complex::new(T::zero(), T::zero());
    let mut out = Matrix::zeros(spec.channels, n);
    let mut residue = T::zero();
    let mut magnitude = T::zero();
    for r in 0..spec.channels {
        let mut full = vec![zero; n];
        full[0] = Complex::new(spec.coeff(r, 0).re, T::zero());
        for i in 1..k {
            let c = spec.coeff(r, i);
            full[i] = c;
            full[n - i] = c.conj();
        }
        if n.is_multiple_of(2) {
            full[n / 2] = Complex::new(spec.nyquist[r], T::zero());
        }
        magnitude = full.iter().fold(magnitude, |m, c| m.max(c.norm() * inv_n));
        let y = fft(&full, Direction::Inverse);
        for (i, v) in y.iter().enumerate() {
            out[(r, i)] = v.re * inv_n;
            residue = residue.max((v.im * inv_n).abs());
        }
    }
    let rel = T::lit(1e-9).max(T::epsilon() * T::lit(1e3));
    let limit = rel * out.max_abs().max(magnitude);
    if residue > limit {
        return Err(Error::BrokenSymmetry {
            residue: residue.to_f64_lossy(),
            limit: limit.to_f64_lossy(),
        });
    }
    Ok(out)
}

/// `rdft` in packed layout.
pub fn rdft_packed<T: Scalar>(x: &Matrix<T>) -> Result<Matrix<T>> {
    Ok(rdft(x)?.to_packed())
}

/// `irdft` from packed layout.
pub fn irdft_packed<T: Scalar>(p: &Matrix<T>, full_len: usize) -> Result<Matrix<T>> {
    irdft(&HalfSpectrum::from_packed(p, full_len)?)
}

/// Adjoint of [`rdft_packed`]: maps a packed cotangent `[d x packed_len(N)]`
/// back to `[d x N]`. Equals `Re(Σ_k G[k] e^{+j2πkn/N})` with `G` holding the
/// retained bins and the Nyquist entry.
pub fn rdft_adjoint<T: Scalar>(g: &Matrix<T>, full_len: usize) -> Result<Matrix<T>> {
    let n = full_len;
    if g.cols() != packed_len(n) {
        return Err(Error::Shape {
            op: "rdft_adjoint",
            detail: format!("{} columns for N={n}", g.cols()),
        });
    }
    let k = half_len(n);
    let zero = Complex::new(T::zero(), T::zero());
    let mut out = Matrix::zeros(g.rows(), n);
    for r in 0..g.rows() {
        let row = g.row(r);
        let mut buf = vec![zero; n];
        for i in 0..k {
            buf[i] = Complex::new(row[i], row[k + i]);
        }
        if n.is_multiple_of(2) {
            buf[n / 2] = Complex::new(row[2 * k], T::zero());
        }
        let y = fft(&buf, Direction::Inverse);
        for (i, v) in y.iter().enumerate() {
            out[(r, i)] = v.re;
        }
    }
    Ok(out)
}

/// Adjoint of [`irdft_packed`]: `(1/N)·rdft(g)` with interior bins doubled and
/// the DC imaginary slot zeroed.
pub fn irdft_adjoint<T: Scalar>(g: &Matrix<T>) -> Result<Matrix<T>> {
    let n = g.cols();
    let k = half_len(n);
    let mut p = rdft_packed(g)?;
    let inv_n = T::one() / T::from_usize_lossy(n);
    let two = T::lit(2.0);
    for r in 0..p.rows() {
        let row = p.row_mut(r);
        for i in 0..k {
            let w = if i == 0 { inv_n } else { two * inv_n };
            row[i] *= w;
            row[k + i] *= w;
        }
        row[k] = T::zero();
        if n.is_multiple_of(2) {
            row[2 * k] *= inv_n;
        }
    }
    Ok(p)
}

/// One target bin of the linear resampling grid: `lo`, `lo + 1` and the
/// weight of `lo + 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InterpTap<T> {
    pub lo: usize,
    pub hi: usize,
    pub frac: T,
}

/// Corner-aligned linear resampling positions from `source` points onto
/// `target` points.
pub fn interp_taps<T: Scalar>(source: usize, target: usize) -> Vec<InterpTap<T>> {
    (0..target)
        .map(|k| {
            if target == 1 || source == 1 {
                return InterpTap { lo: 0, hi: 0, frac: T::zero() };
            }
            let pos = T::from_usize_lossy(k * (source - 1)) / T::from_usize_lossy(target - 1);
            let lo = pos.floor().to_usize().unwrap_or(0).min(source - 1);
            let hi = (lo + 1).min(source - 1);
            InterpTap {
                lo,
                hi,
                frac: pos - T::from_usize_lossy(lo),
            }
        })
        .collect()
}

/// Linear interpolation of every row of `m` from `m.cols()` to `target` points.
pub fn interpolate_rows<T: Scalar>(m: &Matrix<T>, target: usize) -> Result<Matrix<T>> {
    if target == 0 {
        return Err(Error::InvalidInput("interpolation target must be positive".into()));
    }
    if target == m.cols() {
        return Ok(m.clone());
    }
    let taps = interp_taps::<T>(m.cols(), target);
    Ok(Matrix::from_fn(m.rows(), target, |r, c| {
        let t = taps[c];
        let row = m.row(r);
        row[t.lo] * (T::one() - t.frac) + row[t.hi] * t.frac
    }))
}

/// Real and imaginary parts interpolated independently.
pub fn interpolate_weights<T: Scalar>(w: &FilterWeights<T>, target: usize) -> Result<FilterWeights<T>> {
    Ok(FilterWeights {
        re: interpolate_rows(&w.re, target)?,
        im: interpolate_rows(&w.im, target)?,
    })
}

/// Multiplies a packed half spectrum by interpolated weights `[d x K]`. The
/// Nyquist bin is scaled by the real part of the last weight.
pub fn filter_packed<T: Scalar>(p: &Matrix<T>, wre: &Matrix<T>, wim: &Matrix<T>, full_len: usize) -> Result<Matrix<T>> {
    let k = half_len(full_len);
    if p.cols() != packed_len(full_len) || wre.shape() != (p.rows(), k) || wim.shape() != wre.shape() {
        return Err(Error::Shape {
            op: "filter_packed",
            detail: format!("spectrum {:?}, weights {:?}, N={full_len}", p.shape(), wre.shape()),
        });
    }
    let mut out = p.clone();
    for r in 0..p.rows() {
        let (src, wr, wi) = (p.row(r), wre.row(r), wim.row(r));
        let dst = out.row_mut(r);
        for i in 0..k {
            let (a, b) = (src[i], src[k + i]);
            dst[i] = a * wr[i] - b * wi[i];
            dst[k + i] = a * wi[i] + b * wr[i];
        }
        if full_len.is_multiple_of(2) {
            dst[2 * k] = src[2 * k] * wr[k - 1];
        }
    }
    Ok(out)
}

/// `irdft(rdft(x) ⊙ interpolate(w, ⌈N/2⌉))`.
pub fn apply_spectral_filter<T: Scalar>(x: &Matrix<T>, w: &FilterWeights<T>) -> Result<Matrix<T>> {
    let (d, n) = x.shape();
    if w.channels() != d {
        return Err(Error::Shape {
            op: "apply_spectral_filter",
            detail: format!("{d} signal channels vs {} filter channels", w.channels()),
        });
    }
    let wb = interpolate_weights(w, half_len(n))?;
    let p = rdft_packed(x)?;
    irdft_packed(&filter_packed(&p, &wb.re, &wb.im, n)?, n)
}

/// Periodic Hann window.
pub fn hann<T: Scalar>(len: usize) -> Vec<T> {
    (0..len)
        .map(|i| {
            let a = T::TAU() * T::from_usize_lossy(i) / T::from_usize_lossy(len);
            T::lit(0.5) - T::lit(0.5) * a.cos()
        })
        .collect()
}

/// Magnitude spectrogram `[frames x ⌈window/2⌉]` of Hann-windowed frames.
pub fn stft_spectrogram<T: Scalar>(channel: &[T], window: usize, hop: usize) -> Result<Matrix<T>> {
    if window == 0 || hop == 0 {
        return Err(Error::InvalidInput("window and hop must be positive".into()));
    }
    if channel.len() < window {
        return Err(Error::TooShort {
            what: "spectrogram window",
            min: window,
            got: channel.len(),
        });
    }
    let frames = (channel.len() - window) / hop + 1;
    let bins = half_len(window);
    let win = hann::<T>(window);
    let mut out = Matrix::zeros(frames, bins);
    for f in 0..frames {
        let frame: Vec<Complex<T>> = channel[f * hop..f * hop + window]
            .iter()
            .zip(&win)
            .map(|(&v, &w)| Complex::new(v * w, T::zero()))
            .collect();
        let spec = fft(&frame, Direction::Forward);
        for (b, c) in spec.iter().take(bins).enumerate() {
            out[(f, b)] = c.norm();
        }
    }
    Ok(out)
}

/// Comma separated, one frame per line.
pub fn write_spectrogram_csv<T: Scalar, W: Write>(spec: &Matrix<T>, mut out: W) -> std::io::Result<()> {
    for r in 0..spec.rows() {
        let line: Vec<String> = spec.row(r).iter().map(|v| format!("{v}")).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

/// Binary PGM (P5): time runs left to right, frequency bottom to top; pixel
/// intensity is log-magnitude mapped onto `0..=255`.
pub fn write_spectrogram_pgm<T: Scalar, W: Write>(spec: &Matrix<T>, mut out: W) -> std::io::Result<()> {
    let (frames, bins) = spec.shape();
    let logs = spec.map(|v| v.ln_1p());
    let hi = logs.max_abs();
    write!(out, "P5\n{frames} {bins}\n255\n")?;
    let mut pixels = Vec::with_capacity(frames * bins);
    for b in (0..bins).rev() {
        for f in 0..frames {
            let v = if hi > T::zero() { logs[(f, b)] / hi } else { T::zero() };
            pixels.push((v.to_f64_lossy() * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    out.write_all(&pixels)
}
