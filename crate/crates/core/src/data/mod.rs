//! Seeded multi-domain token datasets and leave-one-domain-out splits.
//!
//! Every image carries a CLS-like token (noisy class prototype) followed by patch
//! tokens grouped into semantic regions: region 0 holds the class object, the rest
//! hold backgrounds shared by all classes. Patch tokens pass through the domain's
//! style transform (Givens rotations, then a translation) before noise is added.

mod fixture;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::keys::orthonormal_rows;
use crate::tensor::{norm, Mat, Rng};

pub use fixture::{read_fixture, write_fixture, FixtureHeader};

/// Style of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub id: usize,
    /// Translation added to every patch token.
    pub shift: Vec<f64>,
    pub rotation_seed: u64,
    /// Angle (radians) of each Givens rotation.
    pub rotation_angle: f64,
    /// Standard deviation of the per-coordinate token noise.
    pub noise: f64,
}

impl DomainSpec {
    /// Domain with a seeded random shift of the given norm.
    pub fn random(id: usize, dim: usize, shift_norm: f64, rotation_angle: f64, noise: f64, seed: u64) -> Self {
        let mut rng = Rng::derive(seed, &[0xd0, id as u64]);
        let dir = rng.normal_vec(dim);
        let n = norm(&dir);
        let shift = dir.iter().map(|v| v * shift_norm / n).collect();
        Self {
            id,
            shift,
            rotation_seed: rng.next_u64(),
            rotation_angle,
            noise,
        }
    }

    pub fn shift_norm(&self) -> f64 {
        norm(&self.shift)
    }

    /// Same domain with its shift scaled by `factor`.
    pub fn with_shift_scale(mut self, factor: f64) -> Self {
        self.shift.iter_mut().for_each(|v| *v *= factor);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub classes: usize,
    pub regions: usize,
    /// Tokens per image including the CLS-like token (N+1).
    pub tokens: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    /// Cosine between each class's object prototype and its class prototype.
    pub object_alignment: f64,
    /// Norm of the shared background prototypes.
    pub background_scale: f64,
    pub domains: Vec<DomainSpec>,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::with_domains(7, 4, 17, 64, 40, 0)
    }
}

impl GeneratorConfig {
    pub const DEFAULT_SHIFT: f64 = 0.6;
    pub const DEFAULT_ROTATION: f64 = 0.5;
    pub const DEFAULT_NOISE: f64 = 0.3;

    /// Config with `domains` seeded domains at the default shift, rotation and noise.
    pub fn with_domains(classes: usize, domains: usize, tokens: usize, dim: usize, samples_per_class: usize, seed: u64) -> Self {
        let domains = (0..domains)
            .map(|d| DomainSpec::random(d, dim, Self::DEFAULT_SHIFT, Self::DEFAULT_ROTATION, Self::DEFAULT_NOISE, seed))
            .collect();
        Self {
            classes,
            regions: 4,
            tokens,
            dim,
            samples_per_class,
            object_alignment: 0.5,
            background_scale: 1.0,
            domains,
            seed,
        }
    }

    /// Overrides the noise scale of every domain.
    pub fn with_noise(mut self, noise: f64) -> Self {
        self.domains.iter_mut().for_each(|d| d.noise = noise);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut bad = |field: &str, msg: &str| errs.push(Error::config(field, msg));
        if self.classes == 0 {
            bad("classes", "must be at least 1");
        }
        if self.classes > self.dim {
            bad("classes", "orthogonal class prototypes need classes <= dim");
        }
        if self.regions < 2 {
            bad("regions", "need an object region and at least one background region");
        }
        if self.tokens < self.regions + 1 {
            bad("tokens", "every region needs at least one patch token");
        }
        if self.samples_per_class == 0 {
            bad("samples_per_class", "must be at least 1");
        }
        if !(-1.0..=1.0).contains(&self.object_alignment) {
            bad("object_alignment", "must lie in [-1, 1]");
        }
        if !(self.background_scale >= 0.0 && self.background_scale.is_finite()) {
            bad("background_scale", "must be finite and non-negative");
        }
        if self.domains.is_empty() {
            bad("domains", "need at least one domain");
        }
        for (i, d) in self.domains.iter().enumerate() {
            if d.shift.len() != self.dim {
                errs.push(Error::config(format!("domains[{i}].shift"), format!("length must equal dim ({})", self.dim)));
            }
            if !(d.noise >= 0.0 && d.noise.is_finite()) {
                errs.push(Error::config(format!("domains[{i}].noise"), "must be finite and non-negative"));
            }
            if !d.rotation_angle.is_finite() || d.shift.iter().any(|v| !v.is_finite()) {
                errs.push(Error::config(format!("domains[{i}]"), "rotation and shift must be finite"));
            }
            if self.domains[..i].iter().any(|o| o.id == d.id) {
                errs.push(Error::config(format!("domains[{i}].id"), format!("duplicate domain id {}", d.id)));
            }
        }
        match errs.len() {
            0 => Ok(()),
            1 => Err(errs.pop().expect("one error")),
            _ => Err(Error::ConfigList(errs)),
        }
    }

    /// Patch tokens per region; region 0 takes any remainder.
    pub fn region_sizes(&self) -> Vec<usize> {
        let patches = self.tokens - 1;
        let base = patches / self.regions;
        let mut sizes = vec![base; self.regions];
        sizes[0] += patches - base * self.regions;
        sizes
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: Mat,
    pub label: usize,
    pub domain: usize,
}

/// Samples grouped by domain, plus the class prototypes used to build them.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub dim: usize,
    pub tokens: usize,
    /// Orthonormal class prototypes, one row per class.
    pub prototypes: Mat,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Domain ids in order of first appearance.
    pub fn domain_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = Vec::new();
        for s in &self.samples {
            if !ids.contains(&s.domain) {
                ids.push(s.domain);
            }
        }
        ids
    }

    pub fn domain(&self, id: usize) -> impl Iterator<Item = &Sample> + '_ {
        self.samples.iter().filter(move |s| s.domain == id)
    }
}

/// Rotation by disjoint random coordinate pairs followed by a translation.
struct StyleTransform {
    pairs: Vec<(usize, usize)>,
    cos: f64,
    sin: f64,
    shift: Vec<f64>,
}

impl StyleTransform {
    fn new(spec: &DomainSpec, dim: usize) -> Self {
        let mut rng = Rng::new(spec.rotation_seed);
        let mut idx: Vec<usize> = (0..dim).collect();
        rng.shuffle(&mut idx);
        let pairs = idx.chunks_exact(2).map(|p| (p[0], p[1])).collect();
        Self {
            pairs,
            cos: spec.rotation_angle.cos(),
            sin: spec.rotation_angle.sin(),
            shift: spec.shift.clone(),
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        for &(i, j) in &self.pairs {
            let (a, b) = (x[i], x[j]);
            y[i] = self.cos * a - self.sin * b;
            y[j] = self.sin * a + self.cos * b;
        }
        for (v, s) in y.iter_mut().zip(&self.shift) {
            *v += s;
        }
        y
    }
}

/// Deterministically generates the dataset described by `cfg`.
pub fn generate(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let (c, dim) = (cfg.classes, cfg.dim);
    let mut rng = Rng::derive(cfg.seed, &[0xda7a]);
    let prototypes = orthonormal_rows(c, dim, &mut rng);
    let rho = cfg.object_alignment;
    let objects: Vec<Vec<f64>> = (0..c)
        .map(|k| {
            let q = orthogonal_unit(prototypes.row(k), &mut rng);
            prototypes
                .row(k)
                .iter()
                .zip(&q)
                .map(|(p, q)| rho * p + (1.0 - rho * rho).sqrt() * q)
                .collect()
        })
        .collect();
    let backgrounds: Vec<Vec<f64>> = (1..cfg.regions)
        .map(|_| {
            let v = rng.normal_vec(dim);
            let n = norm(&v);
            v.iter().map(|x| x * cfg.background_scale / n).collect()
        })
        .collect();
    let sizes = cfg.region_sizes();

    let mut samples = Vec::with_capacity(cfg.domains.len() * c * cfg.samples_per_class);
    for spec in &cfg.domains {
        let style = StyleTransform::new(spec, dim);
        let region_means: Vec<Vec<Vec<f64>>> = (0..c)
            .map(|k| {
                std::iter::once(style.apply(&objects[k]))
                    .chain(backgrounds.iter().map(|b| style.apply(b)))
                    .collect()
            })
            .collect();
        for label in 0..c {
            for i in 0..cfg.samples_per_class {
                let mut srng = Rng::derive(cfg.seed, &[spec.id as u64, label as u64, i as u64]);
                let mut data = Vec::with_capacity(cfg.tokens * dim);
                data.extend(prototypes.row(label).iter().map(|p| p + spec.noise * srng.normal()));
                for (r, &count) in sizes.iter().enumerate() {
                    for _ in 0..count {
                        data.extend(region_means[label][r].iter().map(|m| m + spec.noise * srng.normal()));
                    }
                }
                samples.push(Sample {
                    tokens: Mat::from_vec(cfg.tokens, dim, data)?,
                    label,
                    domain: spec.id,
                });
            }
        }
    }
    Ok(Dataset {
        classes: c,
        dim,
        tokens: cfg.tokens,
        prototypes,
        samples,
    })
}

fn orthogonal_unit(p: &[f64], rng: &mut Rng) -> Vec<f64> {
    loop {
        let mut v = rng.normal_vec(p.len());
        let proj = crate::tensor::dot(&v, p);
        crate::tensor::axpy(-proj, p, &mut v);
        let n = norm(&v);
        if n > 1e-6 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

/// Training and evaluation samples of one source domain.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientData {
    pub domain: usize,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSplit {
    pub clients: Vec<ClientData>,
    pub target: Vec<Sample>,
    pub target_domain: usize,
}

/// Holds out `target` and turns every other domain into one client, each split into
/// train and eval parts by a seeded shuffle (`eval_fraction` of the samples, rounded
/// down, go to eval; train always keeps at least one sample).
pub fn leave_one_out(dataset: &Dataset, target: usize, eval_fraction: f64, seed: u64) -> Result<DomainSplit> {
    let ids = dataset.domain_ids();
    if ids.len() < 2 {
        return Err(Error::config("data.domains", "leave-one-domain-out needs at least two domains"));
    }
    if !ids.contains(&target) {
        return Err(Error::config("target_domain", format!("unknown domain {target}; have {ids:?}")));
    }
    if !(0.0..1.0).contains(&eval_fraction) {
        return Err(Error::config("eval_fraction", "must lie in [0, 1)"));
    }
    let clients = ids
        .iter()
        .filter(|&&d| d != target)
        .map(|&d| {
            let mut samples: Vec<Sample> = dataset.domain(d).cloned().collect();
            Rng::derive(seed, &[0x5b11, d as u64]).shuffle(&mut samples);
            let n_eval = ((samples.len() as f64 * eval_fraction).floor() as usize).min(samples.len() - 1);
            let eval = samples.split_off(samples.len() - n_eval);
            ClientData {
                domain: d,
                train: samples,
                eval,
            }
        })
        .collect();
    Ok(DomainSplit {
        clients,
        target: dataset.domain(target).cloned().collect(),
        target_domain: target,
    })
}
