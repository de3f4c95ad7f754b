//! Finite-difference check of the head gradient composed with sigmoid and
//! the matchability-aware loss.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::align_head::{backward, forward, sigmoid, HeadGrads, LogitAffine};
use crate::losses::{mal, mal_grad_logit, MalConfig};
use crate::matrix::Matrix;
use crate::rng::{rng_from_seed, uniform_inclusive, StreamRng};

pub const DEFAULT_TRIALS: usize = 64;
pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;
/// Denominator floor of the relative error, so entries whose true gradient
/// is near zero are judged by absolute error against this scale.
pub const REL_FLOOR: f64 = 1e-4;
pub const GROUPS: [&str; 5] = ["v", "t", "w", "alpha_raw", "beta"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    None,
    /// Negates the analytic `beta` gradient.
    FlipBetaSign,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub trials: usize,
    pub eps: f64,
    pub tolerance: f64,
    pub mal: MalConfig,
    pub fault: Fault,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: DEFAULT_TRIALS,
            eps: DEFAULT_EPS,
            tolerance: DEFAULT_TOLERANCE,
            mal: MalConfig::default(),
            fault: Fault::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub trials: usize,
    pub eps: f64,
    pub tolerance: f64,
    pub max_rel_error: BTreeMap<String, f64>,
    pub max_abs_error: BTreeMap<String, f64>,
    pub failing_groups: Vec<String>,
    pub passed: bool,
}

/// One random problem: features, texts, projection, affine, mask, targets.
#[derive(Debug, Clone)]
pub struct Instance {
    pub v: Matrix,
    pub t: Matrix,
    pub w: Matrix,
    pub affine: LogitAffine,
    pub valid: Vec<bool>,
    pub q: Vec<f64>,
    pub y: Vec<Vec<bool>>,
}

fn gaussian(rows: usize, cols: usize, rng: &mut StreamRng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| Distribution::<f64>::sample(&StandardNormal, rng))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

impl Instance {
    /// Sizes in `1..=5`; `trial == 0` is the `N = C = 1` edge.
    pub fn random(rng: &mut StreamRng, trial: usize) -> Self {
        let (n, c) = if trial == 0 {
            (1, 1)
        } else {
            (uniform_inclusive(rng, 1, 5), uniform_inclusive(rng, 1, 5))
        };
        let d_vis = uniform_inclusive(rng, 1, 5);
        let d_txt = uniform_inclusive(rng, 1, 5);
        let mut valid: Vec<bool> = (0..c).map(|_| rng.random_bool(0.75)).collect();
        valid[0] = true;
        Self {
            v: gaussian(n, d_vis, rng),
            t: gaussian(c, d_txt, rng),
            w: gaussian(d_txt, d_vis, rng),
            affine: LogitAffine {
                alpha_raw: rng.random_range(-0.5..1.0),
                beta: rng.random_range(-1.0..1.0),
            },
            valid,
            q: (0..n).map(|_| rng.random::<f64>()).collect(),
            y: (0..n).map(|_| (0..c).map(|_| rng.random_bool(0.4)).collect()).collect(),
        }
    }

    pub fn loss(&self, v: &Matrix, t: &Matrix, w: &Matrix, affine: &LogitAffine, cfg: &MalConfig) -> f64 {
        let f = forward(v, t, w, affine, &self.valid).expect("random instance is well-posed");
        let mut total = 0.0;
        for i in 0..v.rows() {
            for j in 0..t.rows() {
                if self.valid[j] {
                    total += mal(sigmoid(f.block.values.get(i, j)), self.q[i], self.y[i][j], cfg);
                }
            }
        }
        total
    }

    pub fn analytic(&self, cfg: &MalConfig) -> HeadGrads {
        let f = forward(&self.v, &self.t, &self.w, &self.affine, &self.valid).expect("well-posed");
        let mut up = Matrix::zeros(self.v.rows(), self.t.rows());
        for i in 0..self.v.rows() {
            for j in 0..self.t.rows() {
                if self.valid[j] {
                    up.set(i, j, mal_grad_logit(f.block.values.get(i, j), self.q[i], self.y[i][j], cfg));
                }
            }
        }
        backward(&f, &self.v, &self.w, &up)
    }

    /// Central differences for every parameter, in the layout of
    /// [`HeadGrads`].
    pub fn numeric(&self, cfg: &MalConfig, eps: f64) -> HeadGrads {
        let fd_matrix = |m: &Matrix, eval: &dyn Fn(&Matrix) -> f64| {
            let mut g = Matrix::zeros(m.rows(), m.cols());
            let mut work = m.clone();
            for idx in 0..m.as_slice().len() {
                let x = m.as_slice()[idx];
                work.as_mut_slice()[idx] = x + eps;
                let plus = eval(&work);
                work.as_mut_slice()[idx] = x - eps;
                let minus = eval(&work);
                work.as_mut_slice()[idx] = x;
                g.as_mut_slice()[idx] = (plus - minus) / (2.0 * eps);
            }
            g
        };
        let v = fd_matrix(&self.v, &|v| self.loss(v, &self.t, &self.w, &self.affine, cfg));
        let t = fd_matrix(&self.t, &|t| self.loss(&self.v, t, &self.w, &self.affine, cfg));
        let w = fd_matrix(&self.w, &|w| self.loss(&self.v, &self.t, w, &self.affine, cfg));
        let shifted = |da: f64, db: f64| LogitAffine {
            alpha_raw: self.affine.alpha_raw + da,
            beta: self.affine.beta + db,
        };
        let l = |a: LogitAffine| self.loss(&self.v, &self.t, &self.w, &a, cfg);
        HeadGrads {
            v,
            t,
            w,
            alpha_raw: (l(shifted(eps, 0.0)) - l(shifted(-eps, 0.0))) / (2.0 * eps),
            beta: (l(shifted(0.0, eps)) - l(shifted(0.0, -eps))) / (2.0 * eps),
        }
    }
}

fn compare(a: &[f64], n: &[f64]) -> (f64, f64) {
    a.iter().zip(n).fold((0.0f64, 0.0f64), |(r, m), (&x, &y)| {
        let abs = (x - y).abs();
        (r.max(abs / x.abs().max(y.abs()).max(REL_FLOOR)), m.max(abs))
    })
}

pub fn gradcheck(cfg: &GradcheckConfig) -> GradcheckReport {
    let mut rng = rng_from_seed(cfg.seed);
    let mut rel: BTreeMap<String, f64> = GROUPS.iter().map(|g| (g.to_string(), 0.0)).collect();
    let mut abs = rel.clone();
    for trial in 0..cfg.trials {
        let inst = Instance::random(&mut rng, trial);
        let mut a = inst.analytic(&cfg.mal);
        if cfg.fault == Fault::FlipBetaSign {
            a.beta = -a.beta;
        }
        let n = inst.numeric(&cfg.mal, cfg.eps);
        let groups: [(&str, &[f64], &[f64]); 5] = [
            ("v", a.v.as_slice(), n.v.as_slice()),
            ("t", a.t.as_slice(), n.t.as_slice()),
            ("w", a.w.as_slice(), n.w.as_slice()),
            ("alpha_raw", &[a.alpha_raw], &[n.alpha_raw]),
            ("beta", &[a.beta], &[n.beta]),
        ];
        for (name, x, y) in groups {
            let (r, m) = compare(x, y);
            let e = rel.get_mut(name).unwrap();
            *e = e.max(r);
            let e = abs.get_mut(name).unwrap();
            *e = e.max(m);
        }
    }
    let failing_groups: Vec<String> = rel
        .iter()
        .filter(|(_, &e)| e.is_nan() || e >= cfg.tolerance)
        .map(|(k, _)| k.clone())
        .collect();
    GradcheckReport {
        seed: cfg.seed,
        trials: cfg.trials,
        eps: cfg.eps,
        tolerance: cfg.tolerance,
        max_rel_error: rel,
        max_abs_error: abs,
        passed: failing_groups.is_empty(),
        failing_groups,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_run_passes() {
        let r = gradcheck(&GradcheckConfig::default());
        assert!(r.passed, "{:?}", r.max_rel_error);
    }

    #[test]
    fn injected_fault_is_reported() {
        let r = gradcheck(&GradcheckConfig {
            fault: Fault::FlipBetaSign,
            trials: 8,
            ..GradcheckConfig::default()
        });
        assert!(!r.passed);
        assert_eq!(r.failing_groups, vec!["beta".to_string()]);
    }

    #[test]
    fn first_trial_is_one_by_one() {
        let inst = Instance::random(&mut rng_from_seed(0), 0);
        assert_eq!((inst.v.rows(), inst.t.rows()), (1, 1));
    }

    #[test]
    fn report_schema() {
        let r = gradcheck(&GradcheckConfig {
            trials: 2,
            ..GradcheckConfig::default()
        });
        let v = serde_json::to_value(&r).unwrap();
        for k in ["seed", "trials", "eps", "tolerance", "max_rel_error", "max_abs_error", "failing_groups", "passed"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        assert_eq!(v["max_rel_error"].as_object().unwrap().len(), 5);
    }
}
