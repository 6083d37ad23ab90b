//! Finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::params::ParamStore;
use super::tape::{Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Coordinates probed per tensor; smaller tensors are checked exhaustively.
    pub coords_per_tensor: usize,
    /// Base central-difference step, scaled by `max(1, |w|)`.
    pub step: f64,
    pub tol: f64,
    /// Denominator floor for the relative error of near-zero gradients.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            coords_per_tensor: 8,
            step: 1e-5,
            tol: 1e-4,
            abs_floor: 1e-7,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoordCheck {
    pub path: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tol: f64,
    pub checks: Vec<CoordCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&CoordCheck> {
        self.checks.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares tape gradients of the scalar computed by `f` against central
/// differences on a subsample of coordinates of every tensor in `params`.
///
/// `f` must register tensor `i` on the tape through [`Tape::param`] with
/// index `i`; tensors it never registers are treated as having zero gradient.
pub fn grad_check<F>(params: &mut ParamStore<f64>, cfg: GradCheckConfig, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>, &mut Tape<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(params, &mut tape)?;
    let grads = tape.backward(loss)?;
    let analytic = tape.param_grads(&grads);
    drop(tape);

    let mut eval = |p: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let l = f(p, &mut t)?;
        Ok(t.value(l).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut checks = Vec::new();
    for ti in 0..params.len() {
        let len = params.get(ti).len();
        let coords: Vec<usize> = if len <= cfg.coords_per_tensor {
            (0..len).collect()
        } else {
            let mut v = sample(&mut rng, len, cfg.coords_per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        for idx in coords {
            let a = analytic.get(&ti).map_or(0.0, |g| g.data()[idx]);
            let orig = params.get(ti).data()[idx];
            let h = cfg.step * orig.abs().max(1.0);
            params.get_mut(ti).data_mut()[idx] = orig + h;
            let plus = eval(params);
            params.get_mut(ti).data_mut()[idx] = orig - h;
            let minus = eval(params);
            params.get_mut(ti).data_mut()[idx] = orig;
            let n = (plus? - minus?) / (2.0 * h);
            let path = format!("{}[{idx}]", params.name(ti));
            if !a.is_finite() || !n.is_finite() {
                return Err(Error::GradCheck {
                    path,
                    detail: format!("non-finite gradient (analytic {a}, numeric {n})"),
                });
            }
            checks.push(CoordCheck {
                rel_err: relative_error(a, n, cfg.abs_floor),
                path,
                index: idx,
                analytic: a,
                numeric: n,
            });
        }
    }
    Ok(GradCheckReport { tol: cfg.tol, checks })
}
