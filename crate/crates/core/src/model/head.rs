use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::keys::orthonormal_rows;
use crate::tensor::{norm, Mat, Rng};

/// Proxy text encoder: `w_c = normalize(T_c · vec(E) + u_c)`.
///
/// `T_c` is a fixed Gaussian `D × (L·D)` map with entries `N(0, 1/(L·D))`, drawn per
/// class from one seeded stream; `u_c` is the unit class anchor. Immutable once built.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrozenTextHead {
    anchors: Mat,
    projections: Vec<Mat>,
    prompt_len: usize,
    seed: u64,
    #[serde(skip)]
    reference: Option<Mat>,
}

pub(crate) struct Forward {
    pub features: Mat,
    /// `‖T_c e + u_c‖` before normalization.
    pub norms: Vec<f64>,
}

impl FrozenTextHead {
    /// Head over the given class anchors (rows are normalized) for prompts of `prompt_len` tokens.
    pub fn new(anchors: Mat, prompt_len: usize, seed: u64) -> Result<Self> {
        let (classes, dim) = anchors.shape();
        if classes == 0 || dim == 0 || prompt_len == 0 {
            return Err(Error::config("head", "classes, dimension and prompt length must be positive"));
        }
        let mut unit = Mat::zeros(classes, dim);
        for c in 0..classes {
            let n = norm(anchors.row(c));
            if n == 0.0 {
                return Err(Error::Domain(format!("class anchor {c} has zero norm")));
            }
            for (u, a) in unit.row_mut(c).iter_mut().zip(anchors.row(c)) {
                *u = a / n;
            }
        }
        let fan_in = prompt_len * dim;
        let scale = 1.0 / (fan_in as f64).sqrt();
        let mut rng = Rng::derive(seed, &[0x7e47]);
        let projections = (0..classes)
            .map(|_| {
                let data = (0..dim * fan_in).map(|_| rng.normal() * scale).collect();
                Mat::from_vec(dim, fan_in, data).expect("finite draws")
            })
            .collect();
        let mut head = Self {
            anchors: unit,
            projections,
            prompt_len,
            seed,
            reference: None,
        };
        head.reference = Some(head.forward(&Mat::zeros(prompt_len, dim))?.features);
        Ok(head)
    }

    /// Head with its own anchors: orthonormal when `classes ≤ dim`, otherwise
    /// normalized Gaussian draws.
    pub fn with_random_anchors(classes: usize, prompt_len: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = Rng::derive(seed, &[0xa7c]);
        let anchors = if classes <= dim {
            orthonormal_rows(classes, dim, &mut rng)
        } else {
            Mat::from_vec(classes, dim, rng.normal_vec(classes * dim))?
        };
        Self::new(anchors, prompt_len, seed)
    }

    pub fn classes(&self) -> usize {
        self.anchors.rows()
    }

    pub fn dim(&self) -> usize {
        self.anchors.cols()
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn anchor(&self, c: usize) -> &[f64] {
        self.anchors.row(c)
    }

    pub fn anchors(&self) -> &Mat {
        &self.anchors
    }

    pub(crate) fn projection(&self, c: usize) -> &Mat {
        &self.projections[c]
    }

    /// Text features of the all-zero reference prompt.
    pub fn reference_features(&self) -> &Mat {
        self.reference.as_ref().expect("built in constructor")
    }

    /// One unit text feature per class (rows).
    pub fn text_features(&self, prompt: &Mat) -> Result<Mat> {
        Ok(self.forward(prompt)?.features)
    }

    pub(crate) fn forward(&self, prompt: &Mat) -> Result<Forward> {
        if prompt.shape() != (self.prompt_len, self.dim()) {
            return Err(Error::shape(format!(
                "prompt is {:?}, head expects ({}, {})",
                prompt.shape(),
                self.prompt_len,
                self.dim()
            )));
        }
        let flat = prompt.as_slice();
        let mut features = Mat::zeros(self.classes(), self.dim());
        let mut norms = Vec::with_capacity(self.classes());
        for c in 0..self.classes() {
            let mut a = self.projections[c].matvec(flat);
            for (ak, uk) in a.iter_mut().zip(self.anchors.row(c)) {
                *ak += uk;
            }
            let mut r = norm(&a);
            if r == 0.0 {
                log::warn!("text feature of class {c} vanished; nudging toward its anchor");
                for (ak, uk) in a.iter_mut().zip(self.anchors.row(c)) {
                    *ak += 1e-8 * uk;
                }
                r = norm(&a);
            }
            for (w, ak) in features.row_mut(c).iter_mut().zip(&a) {
                *w = ak / r;
            }
            norms.push(r);
        }
        Ok(Forward { features, norms })
    }
}

impl PartialEq for FrozenTextHead {
    fn eq(&self, other: &Self) -> bool {
        self.anchors == other.anchors
            && self.projections == other.projections
            && self.prompt_len == other.prompt_len
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_prompt_returns_anchors() {
        let head = FrozenTextHead::with_random_anchors(4, 3, 6, 9).unwrap();
        let w = head.text_features(&Mat::zeros(3, 6)).unwrap();
        for c in 0..4 {
            for (a, b) in w.row(c).iter().zip(head.anchor(c)) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn features_are_unit_norm() {
        let mut rng = Rng::new(5);
        let head = FrozenTextHead::with_random_anchors(3, 2, 7, 1).unwrap();
        let prompt = Mat::from_vec(2, 7, rng.normal_vec(14)).unwrap();
        let w = head.text_features(&prompt).unwrap();
        assert!(w.iter_rows().all(|r| (norm(r) - 1.0).abs() < 1e-12));
    }

    #[test]
    fn scaling_projection_keeps_unit_sphere() {
        let mut rng = Rng::new(6);
        let mut head = FrozenTextHead::with_random_anchors(3, 1, 5, 2).unwrap();
        let prompt = Mat::from_vec(1, 5, rng.normal_vec(5)).unwrap();
        let before = head.forward(&prompt).unwrap();
        head.projections.iter_mut().for_each(|t| t.scale(2.0));
        let after = head.forward(&prompt).unwrap();
        assert!(after.features.iter_rows().all(|r| (norm(r) - 1.0).abs() < 1e-12));
        assert!(after.norms.iter().zip(&before.norms).any(|(a, b)| a != b));
    }

    #[test]
    fn orthonormal_anchors_when_they_fit() {
        let head = FrozenTextHead::with_random_anchors(7, 1, 64, 3).unwrap();
        for i in 0..7 {
            for j in 0..7 {
                let d = crate::tensor::dot(head.anchor(i), head.anchor(j));
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn same_seed_same_head() {
        let a = FrozenTextHead::with_random_anchors(3, 2, 4, 17).unwrap();
        let b = FrozenTextHead::with_random_anchors(3, 2, 4, 17).unwrap();
        assert_eq!(a, b);
        let c = FrozenTextHead::with_random_anchors(3, 2, 4, 18).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn wrong_prompt_shape_is_structural_error() {
        let head = FrozenTextHead::with_random_anchors(2, 2, 3, 0).unwrap();
        assert!(matches!(head.text_features(&Mat::zeros(1, 3)), Err(Error::Shape(_))));
    }
}
