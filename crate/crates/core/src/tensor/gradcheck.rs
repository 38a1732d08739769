//! Central finite-difference gradient checking.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{GradMap, ParamSet};

/// Outcome of one element's comparison.
#[derive(Debug, Clone)]
pub struct ElementCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub checked: usize,
    pub tolerance: f64,
    pub max_rel_err: f64,
    /// Element with the largest relative error.
    pub worst: Option<ElementCheck>,
    pub failures: Vec<ElementCheck>,
}

impl CheckReport {
    pub fn pass(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Relative error |g_a − g_n| / max(1, |g_a|, |g_n|).
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1.0_f64.max(analytic.abs()).max(numeric.abs())
}

/// Compare analytic gradients against central finite differences of `eval`.
///
/// Requires 64-bit precision. When the parameter set has more than
/// `max_elements` scalar elements, a seeded random subsample of that size is
/// checked instead of every element.
pub fn finite_diff_check<F, E>(
    mut eval: E,
    params: &mut ParamSet<F>,
    analytic: &GradMap<F>,
    step: f64,
    tolerance: f64,
    max_elements: usize,
    sample_seed: u64,
) -> Result<CheckReport>
where
    F: Scalar,
    E: FnMut(&ParamSet<F>) -> Result<F>,
{
    if F::BITS != 64 {
        return Err(Error::Contract(
            "finite_diff_check requires 64-bit precision mode".into(),
        ));
    }
    if step <= 0.0 {
        return Err(Error::Contract(format!("step must be positive, got {step}")));
    }

    // All (param, element) coordinates, subsampled if too many.
    let mut coords: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(name, t)| (0..t.len()).map(move |i| (name.to_string(), i)))
        .collect();
    if coords.len() > max_elements {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
        coords.shuffle(&mut rng);
        coords.truncate(max_elements);
    }

    let mut report = CheckReport {
        checked: 0,
        tolerance,
        max_rel_err: 0.0,
        worst: None,
        failures: Vec::new(),
    };
    let h = F::of_f64(step);

    for (name, idx) in coords {
        let ga = analytic
            .get(&name)
            .ok_or_else(|| Error::Contract(format!("no analytic gradient for parameter {name:?}")))?[idx]
            .as_f64();

        let original = params.get(&name).expect("coordinate from this set").data()[idx];
        params.get_mut(&name).unwrap().data_mut()[idx] = original + h;
        let plus = eval(params)?;
        params.get_mut(&name).unwrap().data_mut()[idx] = original - h;
        let minus = eval(params)?;
        params.get_mut(&name).unwrap().data_mut()[idx] = original;

        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "finite-difference evaluation at parameter {name:?}[{idx}]"
            )));
        }
        let gn = (plus - minus).as_f64() / (2.0 * step);
        let err = rel_err(ga, gn);
        let check = ElementCheck {
            param: name,
            index: idx,
            analytic: ga,
            numeric: gn,
            rel_err: err,
        };
        report.checked += 1;
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = err.max(report.max_rel_err);
            report.worst = Some(check.clone());
        }
        if err > tolerance {
            report.failures.push(check);
        }
    }
    Ok(report)
}
