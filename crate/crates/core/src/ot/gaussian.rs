use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{asymmetry, sym_sqrt};

/// Squared 2-Wasserstein distance between `N(m1, s1)` and `N(m2, s2)`:
/// `‖m1 − m2‖² + tr(s1 + s2 − 2 (s1^{½} s2 s1^{½})^{½})`.
pub fn gaussian_w2_sq(
    m1: &DVector<f64>,
    s1: &DMatrix<f64>,
    m2: &DVector<f64>,
    s2: &DMatrix<f64>,
) -> Result<f64> {
    let d = m1.len();
    if m2.len() != d || s1.shape() != (d, d) || s2.shape() != (d, d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: m2.len(),
            context: "gaussian arguments",
        });
    }
    for (s, name) in [(s1, "s1"), (s2, "s2")] {
        let asym = asymmetry(s);
        if asym > 1e-8 {
            return Err(Error::InvalidInput(format!(
                "{name} asymmetric by {asym:e}"
            )));
        }
    }
    let r1 = sym_sqrt(s1);
    let cross = sym_sqrt(&(&r1 * s2 * &r1));
    let bures = s1.trace() + s2.trace() - 2.0 * cross.trace();
    Ok((m1 - m2).norm_squared() + bures.max(0.0))
}
