//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Tape, Var};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Maximum accepted relative error per checked entry.
    pub tolerance: f64,
    /// Central-difference half step.
    pub step: f64,
    /// Entries probed per parameter tensor; tensors at most this large are
    /// checked exhaustively.
    pub samples_per_param: usize,
    /// Gradient magnitude below which errors are measured absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-3,
            step: 1e-4,
            samples_per_param: 6,
            floor: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Analytic and numeric values at the worst entry.
    pub worst_pair: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error < self.tolerance)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| p.max_rel_error >= self.tolerance)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for p in &self.params {
            let flag = if p.max_rel_error < self.tolerance { "ok  " } else { "FAIL" };
            writeln!(
                f,
                "{flag} {:<48} n={:<3} max_rel={:.3e} (analytic {:.6e}, numeric {:.6e})",
                p.name, p.checked, p.max_rel_error, p.worst_pair.0, p.worst_pair.1
            )?;
        }
        write!(
            f,
            "{} params, max relative error {:.3e}, tolerance {:.1e}: {}",
            self.params.len(),
            self.max_rel_error(),
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Compares tape gradients of `fragment` with central differences for every
/// trainable parameter of `store`.
///
/// The fragment must be deterministic: it is evaluated twice at the base
/// point and a mismatch is reported as a usage error.
pub fn grad_check<F>(store: &ParamStore<f64>, fragment: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new(s);
        let loss = fragment(&mut tape)?;
        Ok(tape.scalar(loss))
    };
    let (base, analytic) = {
        let mut tape = Tape::new(store);
        let loss = fragment(&mut tape)?;
        (tape.scalar(loss), tape.backward(loss)?.params)
    };
    if eval(store)?.to_bits() != base.to_bits() {
        return Err(Error::Usage(
            "fragment is not deterministic; disable stochastic layers before checking".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut report = GradCheckReport {
        tolerance: opts.tolerance,
        params: Vec::new(),
    };
    for (id, param) in store.iter() {
        if !param.trainable {
            continue;
        }
        let n = param.values.len();
        let picks: Vec<usize> = if n <= opts.samples_per_param {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, opts.samples_per_param).into_vec();
            v.sort_unstable();
            v
        };
        let mut check = ParamCheck {
            name: param.name.clone(),
            checked: picks.len(),
            max_rel_error: 0.0,
            worst_pair: (0.0, 0.0),
        };
        for i in picks {
            let orig = param.values[i];
            work.values_mut(id)[i] = orig + opts.step;
            let plus = eval(&work)?;
            work.values_mut(id)[i] = orig - opts.step;
            let minus = eval(&work)?;
            work.values_mut(id)[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.get(id)[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            if err > check.max_rel_error || check.worst_pair == (0.0, 0.0) {
                check.max_rel_error = check.max_rel_error.max(err);
                if err >= check.max_rel_error {
                    check.worst_pair = (a, numeric);
                }
            }
        }
        report.params.push(check);
    }
    Ok(report)
}
