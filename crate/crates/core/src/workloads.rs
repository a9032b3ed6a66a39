//! Seeded synthetic attention workloads.
//!
//! * `gaussian`: i.i.d. unit normal `Q`, `K`, `V`.
//! * `sink_local`: Gaussian base plus a sink direction shared by every query
//!   and by key 0 only (all other keys are orthogonal to it), and a slowly
//!   varying positional component shared by `Q` and `K` so that nearby tokens
//!   score high.
//! * `needle`: `sink_local` plus key rows at chosen positions pushed toward one
//!   late query row.
//!
//! Every head draws from its own ChaCha stream of the spec's seed, so outputs
//! are a pure function of the spec.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dense::{DenseMatrix, HeadInput};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadKind {
    Gaussian,
    SinkLocal,
    Needle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    pub seed: u64,
    pub n: usize,
    pub d: usize,
    pub heads: usize,
    pub kind: WorkloadKind,
    /// Logit gain of key 0 for every query row.
    pub sink_strength: f32,
    /// Expected logit gain between a query and the key at the same position.
    pub locality_strength: f32,
    /// Token distance over which the positional correlation decays by `1/e`.
    pub locality_decay: f32,
    pub needles: Vec<usize>,
    /// Query row the needles match; the last row when unset.
    pub needle_query: Option<usize>,
    /// Logit gain of each needle key for the matching query row.
    pub needle_strength: f32,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n: 1024,
            d: 64,
            heads: 1,
            kind: WorkloadKind::SinkLocal,
            sink_strength: 14.0,
            locality_strength: 4.0,
            locality_decay: 24.0,
            needles: Vec::new(),
            needle_query: None,
            needle_strength: 12.0,
        }
    }
}

impl WorkloadSpec {
    pub fn gaussian(seed: u64, n: usize, d: usize, heads: usize) -> Self {
        Self {
            seed,
            n,
            d,
            heads,
            kind: WorkloadKind::Gaussian,
            ..Self::default()
        }
    }

    pub fn sink_local(seed: u64, n: usize, d: usize, heads: usize) -> Self {
        Self {
            seed,
            n,
            d,
            heads,
            kind: WorkloadKind::SinkLocal,
            ..Self::default()
        }
    }

    pub fn needle(seed: u64, n: usize, d: usize, heads: usize, needles: Vec<usize>) -> Self {
        Self {
            seed,
            n,
            d,
            heads,
            kind: WorkloadKind::Needle,
            needles,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 || self.heads == 0 {
            return Err(Error::InvalidParameter(format!(
                "workload needs n, d, heads >= 1 (got {}, {}, {})",
                self.n, self.d, self.heads
            )));
        }
        let finite = [self.sink_strength, self.locality_strength, self.locality_decay, self.needle_strength];
        if finite.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::InvalidParameter("workload strengths must be finite and >= 0".into()));
        }
        if self.kind == WorkloadKind::Needle {
            if let Some(&p) = self.needles.iter().find(|&&p| p >= self.n) {
                return Err(Error::InvalidParameter(format!("needle position {p} is out of range for n = {}", self.n)));
            }
            if let Some(t) = self.needle_query.filter(|&t| t >= self.n) {
                return Err(Error::InvalidParameter(format!("needle query row {t} is out of range for n = {}", self.n)));
            }
        }
        Ok(())
    }

    pub fn needle_query_row(&self) -> usize {
        self.needle_query.unwrap_or(self.n - 1)
    }
}

fn head_rng(seed: u64, head: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(head as u64);
    rng
}

fn normals(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

fn gaussian_parts(rng: &mut ChaCha8Rng, n: usize, d: usize) -> [Vec<f32>; 3] {
    [normals(rng, n * d), normals(rng, n * d), normals(rng, n * d)]
}

fn assemble(n: usize, d: usize, [q, k, v]: [Vec<f32>; 3]) -> Result<HeadInput> {
    HeadInput::new(DenseMatrix::new(n, d, q)?, DenseMatrix::new(n, d, k)?, DenseMatrix::new(n, d, v)?)
}

fn check_kind(spec: &WorkloadSpec, kind: WorkloadKind) -> Result<()> {
    spec.validate()?;
    if spec.kind != kind {
        return Err(Error::InvalidParameter(format!(
            "expected a {kind:?} workload, got {:?}",
            spec.kind
        )));
    }
    Ok(())
}

pub fn gen_gaussian(spec: &WorkloadSpec) -> Result<Vec<HeadInput>> {
    check_kind(spec, WorkloadKind::Gaussian)?;
    (0..spec.heads)
        .map(|h| assemble(spec.n, spec.d, gaussian_parts(&mut head_rng(spec.seed, h), spec.n, spec.d)))
        .collect()
}

struct SinkLocalParts {
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    /// Unit sink direction; keys other than key 0 carry no component along it
    /// when the sink is enabled.
    sink_dir: Vec<f32>,
}

fn remove_component(x: &mut [f32], unit: &[f32]) {
    let along: f32 = x.iter().zip(unit).map(|(a, b)| a * b).sum();
    for (a, b) in x.iter_mut().zip(unit) {
        *a -= along * b;
    }
}

fn sink_local_parts(spec: &WorkloadSpec, head: usize) -> SinkLocalParts {
    let (n, d) = (spec.n, spec.d);
    let mut rng = head_rng(spec.seed, head);
    let [mut q, mut k, v] = gaussian_parts(&mut rng, n, d);
    let sqrt_d = (d as f32).sqrt();

    let mut sink_dir = normals(&mut rng, d);
    let norm = sink_dir.iter().map(|x| x * x).sum::<f32>().sqrt().max(f32::MIN_POSITIVE);
    sink_dir.iter_mut().for_each(|x| *x /= norm);
    // AR(1) positional walk: E[p_i . p_j] = d * rho^|i-j|.
    let rho = if spec.locality_decay > 0.0 {
        (-1.0 / spec.locality_decay).exp()
    } else {
        0.0
    };
    let innov = (1.0 - rho * rho).sqrt();
    let c = (spec.locality_strength / sqrt_d).sqrt();
    let mut p = normals(&mut rng, d);
    for r in 0..n {
        if r > 0 {
            let xi = normals(&mut rng, d);
            for (pp, e) in p.iter_mut().zip(&xi) {
                *pp = rho * *pp + innov * e;
            }
        }
        for col in 0..d {
            q[r * d + col] += c * p[col];
            k[r * d + col] += c * p[col];
        }
    }

    // Every query gets exactly `a` along the sink direction and no key but
    // key 0 has any, so q_i . k_0 / sqrt(d) carries `sink_strength` and no
    // other logit is affected.
    if spec.sink_strength > 0.0 {
        let a = (spec.sink_strength * sqrt_d).sqrt();
        for r in 0..n {
            let qr = &mut q[r * d..(r + 1) * d];
            remove_component(qr, &sink_dir);
            for (x, u) in qr.iter_mut().zip(&sink_dir) {
                *x += a * u;
            }
            remove_component(&mut k[r * d..(r + 1) * d], &sink_dir);
        }
        for (x, u) in k[..d].iter_mut().zip(&sink_dir) {
            *x += a * u;
        }
    }
    SinkLocalParts { q, k, v, sink_dir }
}

pub fn gen_sink_local(spec: &WorkloadSpec) -> Result<Vec<HeadInput>> {
    check_kind(spec, WorkloadKind::SinkLocal)?;
    (0..spec.heads)
        .map(|h| {
            let p = sink_local_parts(spec, h);
            assemble(spec.n, spec.d, [p.q, p.k, p.v])
        })
        .collect()
}

pub fn gen_needle(spec: &WorkloadSpec) -> Result<Vec<HeadInput>> {
    check_kind(spec, WorkloadKind::Needle)?;
    let (n, d) = (spec.n, spec.d);
    let target = spec.needle_query_row();
    (0..spec.heads)
        .map(|h| {
            let SinkLocalParts { q, mut k, v, sink_dir } = sink_local_parts(spec, h);
            // Needle direction: the target query minus its sink component, so
            // the needle does not turn into a second sink for every row.
            let mut dir = q[target * d..(target + 1) * d].to_vec();
            if spec.sink_strength > 0.0 {
                remove_component(&mut dir, &sink_dir);
            }
            let norm2: f32 = dir.iter().map(|x| x * x).sum();
            if norm2 > 0.0 {
                // q_t . dir = |dir|^2, so this raises q_t . k_p / sqrt(d) by
                // exactly `needle_strength`.
                let gain = spec.needle_strength * (d as f32).sqrt() / norm2;
                for &p in &spec.needles {
                    for (x, y) in k[p * d..(p + 1) * d].iter_mut().zip(&dir) {
                        *x += gain * y;
                    }
                }
            }
            assemble(n, d, [q, k, v])
        })
        .collect()
}

pub fn generate(spec: &WorkloadSpec) -> Result<Vec<HeadInput>> {
    match spec.kind {
        WorkloadKind::Gaussian => gen_gaussian(spec),
        WorkloadKind::SinkLocal => gen_sink_local(spec),
        WorkloadKind::Needle => gen_needle(spec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let s = WorkloadSpec::gaussian(7, 16, 4, 2);
        assert_eq!(generate(&s).unwrap(), generate(&s).unwrap());
        let other = WorkloadSpec { seed: 8, ..s.clone() };
        assert_ne!(generate(&s).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn shapes() {
        let out = generate(&WorkloadSpec::gaussian(1, 8, 4, 2)).unwrap();
        assert_eq!(out.len(), 2);
        for h in &out {
            for m in [h.q(), h.k(), h.v()] {
                assert_eq!(m.shape(), (8, 4));
            }
        }
        assert_ne!(out[0], out[1]);
    }

    #[test]
    fn gaussian_moments() {
        let s = WorkloadSpec::gaussian(3, 500, 40, 1);
        let h = &generate(&s).unwrap()[0];
        for m in [h.q(), h.k(), h.v()] {
            let n = m.data().len() as f64;
            let mean = m.data().iter().map(|&x| x as f64).sum::<f64>() / n;
            let var = m.data().iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
            // 5 sigma: sd(mean) = 1/sqrt(n), sd(var) ~ sqrt(2/n).
            assert!(mean.abs() < 5.0 / n.sqrt(), "mean {mean}");
            assert!((var - 1.0).abs() < 5.0 * (2.0 / n).sqrt(), "var {var}");
        }
    }

    #[test]
    fn kind_mismatch_and_bad_needles() {
        assert!(gen_gaussian(&WorkloadSpec::sink_local(0, 8, 2, 1)).is_err());
        assert!(generate(&WorkloadSpec::needle(0, 8, 2, 1, vec![8])).is_err());
        assert!(generate(&WorkloadSpec { needle_query: Some(9), ..WorkloadSpec::needle(0, 8, 2, 1, vec![1]) }).is_err());
        assert!(generate(&WorkloadSpec::gaussian(0, 0, 2, 1)).is_err());
    }

    #[test]
    fn zero_needles_equal_sink_local() {
        let base = WorkloadSpec::sink_local(11, 64, 8, 2);
        let needle = WorkloadSpec { kind: WorkloadKind::Needle, ..base.clone() };
        assert_eq!(generate(&base).unwrap(), generate(&needle).unwrap());
    }

    #[test]
    fn needle_gain_is_exact() {
        let spec = WorkloadSpec::needle(5, 200, 16, 1, vec![40]);
        let base = generate(&WorkloadSpec { kind: WorkloadKind::SinkLocal, ..spec.clone() }).unwrap();
        let planted = generate(&spec).unwrap();
        let logit = |h: &HeadInput| {
            h.q().row(199).iter().zip(h.k().row(40)).map(|(a, b)| (a * b) as f64).sum::<f64>() / 4.0
        };
        assert!((logit(&planted[0]) - logit(&base[0]) - 12.0).abs() < 1e-3);
    }

    #[test]
    fn spec_parses_from_toml() {
        let s: WorkloadSpec = toml::from_str("seed = 3\nn = 128\nkind = \"needle\"\nneedles = [5, 60]").unwrap();
        assert_eq!(s.needles, vec![5, 60]);
        assert_eq!(s.d, 64);
        assert!(toml::from_str::<WorkloadSpec>("bogus = 1").is_err());
    }
}
