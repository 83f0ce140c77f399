use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Settings for [`finite_diff_check`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Central-difference half step.
    pub h: f64,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// true gradient is ~0 are judged on absolute error instead.
    pub floor: f64,
    /// Check `count` random coordinates drawn with `seed` instead of all of them.
    pub probes: Option<(usize, u64)>,
}

impl GradCheck {
    pub fn f64_default() -> Self {
        Self {
            h: 1e-5,
            floor: 1e-6,
            probes: None,
        }
    }

    pub fn f32_default() -> Self {
        Self {
            h: 1e-2,
            floor: 1e-2,
            probes: None,
        }
    }

    pub fn with_probes(mut self, count: usize, seed: u64) -> Self {
        self.probes = Some((count, seed));
        self
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor index, element index, autodiff, numeric)` for the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

fn evaluate<S, F>(f: &F, params: &[Tensor<S>], with_grad: bool) -> Result<(f64, Option<Vec<Vec<S>>>)>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p, with_grad)).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.scalar(out).as_f64();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("objective is {value}")));
    }
    if !with_grad {
        return Ok((value, None));
    }
    let grads = tape.backward(out);
    let gs = vars
        .iter()
        .zip(params)
        .map(|(v, p)| grads.get(*v).map_or_else(|| vec![S::zero(); p.len()], <[S]>::to_vec))
        .collect();
    Ok((value, Some(gs)))
}

/// Compares tape gradients of a scalar objective against central finite
/// differences and returns the worst relative error.
pub fn finite_diff_check<S, F>(f: F, params: &[Tensor<S>], cfg: &GradCheck) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    if cfg.h.is_nan() || cfg.h <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be positive, got {}", cfg.h)));
    }
    let (_, grads) = evaluate(&f, params, true)?;
    let grads = grads.expect("requested gradients");

    let coords: Vec<(usize, usize)> = match cfg.probes {
        None => params
            .iter()
            .enumerate()
            .flat_map(|(i, p)| (0..p.len()).map(move |j| (i, j)))
            .collect(),
        Some((count, seed)) => {
            let total: usize = params.iter().map(Tensor::len).sum();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..count)
                .map(|_| {
                    let mut k = rng.gen_range(0..total);
                    let mut i = 0;
                    while k >= params[i].len() {
                        k -= params[i].len();
                        i += 1;
                    }
                    (i, k)
                })
                .collect()
        }
    };

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (i, j) in coords {
        let orig = work[i].data()[j];
        let plus = orig + S::of(cfg.h);
        let minus = orig - S::of(cfg.h);
        work[i].data_mut()[j] = plus;
        let (fp, _) = evaluate(&f, &work, false)?;
        work[i].data_mut()[j] = minus;
        let (fm, _) = evaluate(&f, &work, false)?;
        work[i].data_mut()[j] = orig;
        let numeric = (fp - fm) / (plus - minus).as_f64();
        let analytic = grads[i][j].as_f64();
        let denom = analytic.abs().max(numeric.abs()).max(cfg.floor);
        let rel = (analytic - numeric).abs() / denom;
        report.checked += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((i, j, analytic, numeric));
        }
    }
    Ok(report)
}
