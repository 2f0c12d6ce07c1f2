use rand::Rng;

/// Largest rank count with a precomputed table.
pub const MAX_RANKS: u64 = 10_000_000;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ZipfError {
    #[error("rank count must be at least 1")]
    NoRanks,
    #[error("rank count {0} exceeds {MAX_RANKS}")]
    TooManyRanks(u64),
    #[error("exponent must be finite and non-negative, got {0}")]
    BadExponent(f64),
}

/// Zipf distribution over ranks `1..=n`: rank k has weight `1 / k^s`.
/// Sampling inverts a precomputed CDF by binary search.
#[derive(Clone, Debug)]
pub struct Zipf {
    cdf: Vec<f64>,
    s: f64,
}

impl Zipf {
    pub fn new(n: u64, s: f64) -> Result<Self, ZipfError> {
        if n == 0 {
            return Err(ZipfError::NoRanks);
        }
        if n > MAX_RANKS {
            return Err(ZipfError::TooManyRanks(n));
        }
        if !s.is_finite() || s < 0.0 {
            return Err(ZipfError::BadExponent(s));
        }
        let mut cdf = Vec::with_capacity(n as usize);
        let mut acc = 0.0;
        for k in 1..=n {
            acc += (k as f64).powf(-s);
            cdf.push(acc);
        }
        for c in &mut cdf {
            *c /= acc;
        }
        // Rounding must not leave a gap above the last bucket.
        *cdf.last_mut().expect("n >= 1") = 1.0;
        Ok(Self { cdf, s })
    }

    pub fn ranks(&self) -> u64 {
        self.cdf.len() as u64
    }

    pub fn exponent(&self) -> f64 {
        self.s
    }

    /// Probability of rank `k`.
    pub fn pmf(&self, k: u64) -> f64 {
        let i = (k - 1) as usize;
        self.cdf[i] - if i == 0 { 0.0 } else { self.cdf[i - 1] }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let u: f64 = rng.gen();
        self.cdf.partition_point(|&c| c <= u) as u64 + 1
    }
}

/// Key distribution of a workload. Keys are `1..=n`; rank k maps to key k.
#[derive(Clone, Debug)]
pub enum KeyDist {
    Uniform(u64),
    Zipf(Zipf),
}

impl KeyDist {
    /// Uniform for `s == 0`, Zipfian otherwise.
    pub fn new(n: u64, s: f64) -> Result<Self, ZipfError> {
        if n == 0 {
            return Err(ZipfError::NoRanks);
        }
        if s == 0.0 {
            Ok(KeyDist::Uniform(n))
        } else {
            Zipf::new(n, s).map(KeyDist::Zipf)
        }
    }

    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        match self {
            KeyDist::Uniform(n) => rng.gen_range(1..=*n),
            KeyDist::Zipf(z) => z.sample(rng),
        }
    }
}
