use serde::{Deserialize, Serialize};

use super::{dot, norm, Mat, Rng};
use crate::error::{Error, Result};

/// How static routing keys are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyStrategy {
    /// Entries uniform in `[0, 1)`.
    Uniform,
    /// Standard-normal entries.
    Normal,
    /// Entries drawn from `{0, 1}`.
    Binary,
    /// Mutually orthogonal unit vectors.
    #[default]
    Orthogonal,
}

impl std::str::FromStr for KeyStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "normal" => Ok(Self::Normal),
            "binary" => Ok(Self::Binary),
            "orthogonal" => Ok(Self::Orthogonal),
            other => Err(Error::config(
                "key_strategy",
                format!("unknown strategy `{other}` (uniform|normal|binary|orthogonal)"),
            )),
        }
    }
}

/// Fixed, non-learnable anchors, one per prompt expert. Rows are the keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaticKeySet {
    keys: Mat,
    strategy: KeyStrategy,
}

impl StaticKeySet {
    pub fn new(keys: Mat, strategy: KeyStrategy) -> Result<Self> {
        if let Some(i) = keys.iter_rows().position(|k| norm(k) == 0.0) {
            return Err(Error::Domain(format!("static key {i} has zero norm")));
        }
        Ok(Self { keys, strategy })
    }

    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.keys.cols()
    }

    pub fn key(&self, j: usize) -> &[f64] {
        self.keys.row(j)
    }

    pub fn matrix(&self) -> &Mat {
        &self.keys
    }

    pub fn strategy(&self) -> KeyStrategy {
        self.strategy
    }

    /// Number of scalars a broadcast of the key set carries.
    pub fn param_count(&self) -> usize {
        self.keys.rows() * self.keys.cols()
    }

    /// Returns a copy with rows reordered: row `i` of the result is row `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let rows: Vec<Vec<f64>> = perm.iter().map(|&j| self.key(j).to_vec()).collect();
        Self {
            keys: Mat::from_rows(&rows).expect("rows of a valid key set"),
            strategy: self.strategy,
        }
    }

    /// FNV-1a over the raw bits of every entry; equal digests mean bit-identical keys
    /// for all practical purposes.
    pub fn digest(&self) -> u64 {
        self.keys
            .as_slice()
            .iter()
            .flat_map(|v| v.to_bits().to_le_bytes())
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
                (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
            })
    }
}

/// Draws `m` keys of dimension `d`.
pub fn init_keys(m: usize, d: usize, strategy: KeyStrategy, rng: &mut Rng) -> Result<StaticKeySet> {
    if m == 0 || d == 0 {
        return Err(Error::config("keys", "key count and dimension must be positive"));
    }
    let keys = match strategy {
        KeyStrategy::Orthogonal => {
            if m > d {
                return Err(Error::config(
                    "key_strategy",
                    format!("{m} orthogonal keys do not fit in dimension {d}"),
                ));
            }
            orthonormal_rows(m, d, rng)
        }
        KeyStrategy::Uniform => nonzero_rows(m, d, || rng.uniform()),
        KeyStrategy::Normal => nonzero_rows(m, d, || rng.normal()),
        KeyStrategy::Binary => nonzero_rows(m, d, || if rng.uniform() < 0.5 { 0.0 } else { 1.0 }),
    };
    StaticKeySet::new(keys, strategy)
}

fn nonzero_rows(m: usize, d: usize, mut draw: impl FnMut() -> f64) -> Mat {
    let mut out = Mat::zeros(m, d);
    for i in 0..m {
        // an all-zero key has no direction; redraw (probability 2^-d for binary)
        loop {
            let row = out.row_mut(i);
            row.iter_mut().for_each(|v| *v = draw());
            if norm(row) > 0.0 {
                break;
            }
        }
    }
    out
}

/// `m ≤ d` orthonormal rows via classical Gram–Schmidt with one re-orthogonalization
/// pass over seeded Gaussian draws.
pub(crate) fn orthonormal_rows(m: usize, d: usize, rng: &mut Rng) -> Mat {
    assert!(m <= d, "cannot fit {m} orthonormal rows in dimension {d}");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m);
    while basis.len() < m {
        let mut v = rng.normal_vec(d);
        let start = norm(&v);
        for _ in 0..2 {
            let coeffs: Vec<f64> = basis.iter().map(|q| dot(q, &v)).collect();
            for (q, c) in basis.iter().zip(coeffs) {
                for (vi, qi) in v.iter_mut().zip(q) {
                    *vi -= c * qi;
                }
            }
        }
        let n = norm(&v);
        if n <= 1e-6 * start {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        basis.push(v);
    }
    Mat::from_rows(&basis).expect("finite basis")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gram_error(keys: &StaticKeySet) -> f64 {
        let m = keys.len();
        let mut worst: f64 = 0.0;
        for i in 0..m {
            for j in 0..m {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot(keys.key(i), keys.key(j)) - target).abs());
            }
        }
        worst
    }

    #[test]
    fn orthogonal_keys_form_identity_gram() {
        let k = init_keys(2, 2, KeyStrategy::Orthogonal, &mut Rng::new(1)).unwrap();
        assert!(dot(k.key(0), k.key(1)).abs() < 1e-10);
        let k = init_keys(4, 64, KeyStrategy::Orthogonal, &mut Rng::new(2)).unwrap();
        assert!(gram_error(&k) < 1e-10);
        let k = init_keys(64, 64, KeyStrategy::Orthogonal, &mut Rng::new(3)).unwrap();
        assert!(gram_error(&k) < 1e-10);
    }

    #[test]
    fn too_many_orthogonal_keys_is_config_error() {
        let err = init_keys(5, 4, KeyStrategy::Orthogonal, &mut Rng::new(0)).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
        // other strategies have no such limit
        assert!(init_keys(5, 4, KeyStrategy::Normal, &mut Rng::new(0)).is_ok());
    }

    #[test]
    fn same_seed_bitwise_identical() {
        for s in [
            KeyStrategy::Uniform,
            KeyStrategy::Normal,
            KeyStrategy::Binary,
            KeyStrategy::Orthogonal,
        ] {
            let a = init_keys(4, 16, s, &mut Rng::new(11)).unwrap();
            let b = init_keys(4, 16, s, &mut Rng::new(11)).unwrap();
            assert_eq!(a.digest(), b.digest());
            assert!(a
                .matrix()
                .as_slice()
                .iter()
                .zip(b.matrix().as_slice())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn strategy_ranges() {
        let u = init_keys(3, 32, KeyStrategy::Uniform, &mut Rng::new(4)).unwrap();
        assert!(u.matrix().as_slice().iter().all(|v| (0.0..1.0).contains(v)));
        let b = init_keys(3, 32, KeyStrategy::Binary, &mut Rng::new(4)).unwrap();
        assert!(b.matrix().as_slice().iter().all(|&v| v == 0.0 || v == 1.0));
        let n = init_keys(3, 32, KeyStrategy::Normal, &mut Rng::new(4)).unwrap();
        assert!(n.matrix().as_slice().iter().any(|&v| v < 0.0));
    }

    #[test]
    fn parses_strategy_names() {
        assert_eq!("binary".parse::<KeyStrategy>().unwrap(), KeyStrategy::Binary);
        assert!("sobol".parse::<KeyStrategy>().is_err());
    }
}
