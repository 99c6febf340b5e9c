//! Iterative radix-2 FFT, just enough for the spectrogram front end.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Complex {
    pub re: f64,
    pub im: f64,
}

impl Complex {
    pub const ZERO: Complex = Complex { re: 0.0, im: 0.0 };

    pub fn new(re: f64, im: f64) -> Complex {
        Complex { re, im }
    }

    pub fn conj(self) -> Complex {
        Complex { re: self.re, im: -self.im }
    }

    pub fn scale(self, s: f64) -> Complex {
        Complex { re: self.re * s, im: self.im * s }
    }

    pub fn norm_sq(self) -> f64 {
        self.re * self.re + self.im * self.im
    }
}

impl std::ops::Add for Complex {
    type Output = Complex;
    fn add(self, other: Complex) -> Complex {
        Complex { re: self.re + other.re, im: self.im + other.im }
    }
}

impl std::ops::Sub for Complex {
    type Output = Complex;
    fn sub(self, other: Complex) -> Complex {
        Complex { re: self.re - other.re, im: self.im - other.im }
    }
}

impl std::ops::Mul for Complex {
    type Output = Complex;
    fn mul(self, other: Complex) -> Complex {
        Complex {
            re: self.re * other.re - self.im * other.im,
            im: self.re * other.im + self.im * other.re,
        }
    }
}

/// Precomputed plan for forward FFTs of one power-of-two size.
pub struct FftPlan {
    n: usize,
    twiddles: Vec<Complex>,
    rev: Vec<u32>,
}

impl FftPlan {
    pub fn new(n: usize) -> FftPlan {
        assert!(n.is_power_of_two() && n >= 2, "FFT size must be a power of two");
        let mut twiddles = Vec::with_capacity(n / 2);
        for k in 0..n / 2 {
            let angle = -2.0 * std::f64::consts::PI * k as f64 / n as f64;
            twiddles.push(Complex::new(angle.cos(), angle.sin()));
        }
        let bits = n.trailing_zeros();
        let rev = (0..n as u32).map(|i| i.reverse_bits() >> (32 - bits)).collect();
        FftPlan { n, twiddles, rev }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    /// In-place forward DFT: X[k] = sum_n x[n] exp(-2*pi*i*k*n/N).
    pub fn forward(&self, buf: &mut [Complex]) {
        assert_eq!(buf.len(), self.n);
        for i in 0..self.n {
            let j = self.rev[i] as usize;
            if i < j {
                buf.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= self.n {
            let half = len / 2;
            let step = self.n / len;
            let mut start = 0;
            while start < self.n {
                for k in 0..half {
                    let w = self.twiddles[k * step];
                    let a = buf[start + k];
                    let b = buf[start + k + half] * w;
                    buf[start + k] = a + b;
                    buf[start + k + half] = a - b;
                }
                start += len;
            }
            len *= 2;
        }
    }

    /// One-sided spectra of two real frames at once, using the packing
    /// z = a + i*b. Each output has n/2 + 1 bins.
    pub fn forward_real_pair(&self, a: &[f64], b: &[f64], out_a: &mut [Complex], out_b: &mut [Complex]) {
        let n = self.n;
        assert_eq!(a.len(), n);
        assert_eq!(b.len(), n);
        assert_eq!(out_a.len(), n / 2 + 1);
        assert_eq!(out_b.len(), n / 2 + 1);
        let mut buf: Vec<Complex> = a.iter().zip(b).map(|(&x, &y)| Complex::new(x, y)).collect();
        self.forward(&mut buf);
        out_a[0] = Complex::new(buf[0].re, 0.0);
        out_b[0] = Complex::new(buf[0].im, 0.0);
        for k in 1..=n / 2 {
            let zk = buf[k];
            let znk = buf[n - k].conj();
            out_a[k] = (zk + znk).scale(0.5);
            out_b[k] = (zk - znk) * Complex::new(0.0, -0.5);
        }
    }
}
