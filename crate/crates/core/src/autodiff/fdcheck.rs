//! Central finite-difference gradient checking.
//!
//! This is the independent oracle used by the test suites: it only ever
//! calls the forward evaluation closure and never touches the tape's
//! backward pass, so agreement between the two is meaningful.

use super::{Matrix, ParamStore, Scalar};

/// Numeric gradient of `f` with respect to every entry of the named
/// parameter, by central differences with step `eps`.
pub fn numeric_param_grad(
    store: &ParamStore,
    name: &str,
    eps: Scalar,
    f: impl Fn(&ParamStore) -> Scalar,
) -> Matrix {
    let base = store
        .get(name)
        .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
        .clone();
    let mut grad = Matrix::zeros(base.raw_dim());
    let mut work = store.clone();
    for idx in 0..base.len() {
        let (r, c) = (idx / base.ncols(), idx % base.ncols());
        let original = base[(r, c)];

        work.get_mut(name).unwrap()[(r, c)] = original + eps;
        let plus = f(&work);
        work.get_mut(name).unwrap()[(r, c)] = original - eps;
        let minus = f(&work);
        work.get_mut(name).unwrap()[(r, c)] = original;

        grad[(r, c)] = (plus - minus) / (2.0 * eps);
    }
    grad
}

/// Maximum relative error between two same-shaped matrices, with a unit
/// floor on the denominator so near-zero entries compare absolutely.
pub fn max_rel_error(a: &Matrix, b: &Matrix) -> Scalar {
    assert_eq!(a.raw_dim(), b.raw_dim(), "shape mismatch in comparison");
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, Scalar::max)
}
