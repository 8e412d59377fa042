//! Complex FFT: iterative radix-2 for powers of two, Bluestein's chirp-z
//! algorithm for every other length, and an O(N²) direct DFT used as the
//! reference in tests.
//!
//! All transforms are unnormalized: the forward kernel is `e^{-j2πkn/N}`,
//! the inverse kernel `e^{+j2πkn/N}`, and neither divides by `N`.

use num_complex::Complex;

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

impl Direction {
    fn sign<T: Scalar>(self) -> T {
        match self {
            Direction::Forward => -T::one(),
            Direction::Inverse => T::one(),
        }
    }
}

/// `e^{sign·j·2π·num/den}` with `num` reduced modulo `den` first, so large
/// index products keep full precision.
#[inline]
fn twiddle<T: Scalar>(num: usize, den: usize, sign: T) -> Complex<T> {
    let r = num % den;
    let angle = sign * T::TAU() * T::from_usize_lossy(r) / T::from_usize_lossy(den);
    Complex::new(angle.cos(), angle.sin())
}

/// Reference transform, O(N²).
pub fn dft_direct<T: Scalar>(input: &[Complex<T>], dir: Direction) -> Vec<Complex<T>> {
    let n = input.len();
    let sign = dir.sign::<T>();
    (0..n)
        .map(|k| {
            input
                .iter()
                .enumerate()
                .fold(Complex::new(T::zero(), T::zero()), |acc, (i, &x)| {
                    acc + x * twiddle(k * i, n, sign)
                })
        })
        .collect()
}

/// Transform of any length. Empty input returns empty output.
pub fn fft<T: Scalar>(input: &[Complex<T>], dir: Direction) -> Vec<Complex<T>> {
    let n = input.len();
    if n <= 1 {
        return input.to_vec();
    }
    if n.is_power_of_two() {
        let mut buf = input.to_vec();
        radix2_in_place(&mut buf, dir);
        buf
    } else {
        bluestein(input, dir)
    }
}

/// In-place iterative Cooley-Tukey; `buf.len()` must be a power of two.
pub fn radix2_in_place<T: Scalar>(buf: &mut [Complex<T>], dir: Direction) {
    let n = buf.len();
    assert!(n.is_power_of_two(), "radix-2 length must be a power of two, got {n}");
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let sign = dir.sign::<T>();
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let tw: Vec<Complex<T>> = (0..half).map(|k| twiddle(k, len, sign)).collect();
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let a = buf[start + k];
                let b = buf[start + k + half] * tw[k];
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
}

/// Chirp-z: rewrites the length-N DFT as a circular convolution of length
/// `M >= 2N-1` (a power of two) using `kn = (k² + n² - (k-n)²) / 2`.
fn bluestein<T: Scalar>(input: &[Complex<T>], dir: Direction) -> Vec<Complex<T>> {
    let n = input.len();
    let m = (2 * n - 1).next_power_of_two();
    let sign = dir.sign::<T>();
    // chirp[i] = e^{sign·jπ i²/N}; i² reduced mod 2N.
    let chirp: Vec<Complex<T>> = (0..n).map(|i| twiddle(i * i, 2 * n, sign)).collect();

    let zero = Complex::new(T::zero(), T::zero());
    let mut a = vec![zero; m];
    for i in 0..n {
        a[i] = input[i] * chirp[i];
    }
    let mut b = vec![zero; m];
    b[0] = chirp[0].conj();
    for i in 1..n {
        let c = chirp[i].conj();
        b[i] = c;
        b[m - i] = c;
    }
    radix2_in_place(&mut a, Direction::Forward);
    radix2_in_place(&mut b, Direction::Forward);
    for (x, y) in a.iter_mut().zip(&b) {
        *x = *x * *y;
    }
    radix2_in_place(&mut a, Direction::Inverse);
    let scale = T::one() / T::from_usize_lossy(m);
    (0..n).map(|k| a[k] * chirp[k] * scale).collect()
}
