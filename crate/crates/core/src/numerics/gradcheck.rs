use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Maximum relative error between the tape gradient of `f` at `theta` and a
/// central finite difference with step `eps`, over every component.
///
/// The per-component error is `|analytic - fd| / (|analytic| + |fd| + 1e-12)`.
pub fn grad_check<F>(f: F, theta: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..theta.len()).collect();
    grad_check_subset(f, theta, eps, &all)
}

/// [`grad_check`] restricted to the listed flat component indices.
pub fn grad_check_subset<F>(f: F, theta: &Tensor, eps: f64, components: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Invalid(format!("grad_check eps must be > 0, got {eps}")));
    }
    let analytic = {
        let mut tape = Tape::new();
        let x = tape.leaf(theta.clone())?;
        let loss = f(&mut tape, x)?;
        tape.backward(loss)?.wrt(x, &tape)?
    };
    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(t)?;
        let loss = f(&mut tape, x)?;
        let v = tape.value(loss)?.item();
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    for &c in components {
        if c >= theta.len() {
            return Err(Error::OutOfRange { index: c, len: theta.len() });
        }
        let mut plus = theta.clone();
        plus.data_mut()[c] += eps;
        let mut minus = theta.clone();
        minus.data_mut()[c] -= eps;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let an = analytic.data()[c];
        let err = (an - fd).abs() / (an.abs() + fd.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let theta = Tensor::row(vec![1.0, 2.0]);
        let err = grad_check(
            |tape, x| {
                let sq = tape.square(x)?;
                tape.sum(sq)
            },
            &theta,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8, "err = {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let theta = Tensor::row(vec![0.3, -0.7, 1.1]);
        let err = grad_check(
            |tape, x| {
                let z = tape.scale(x, 0.0)?;
                let s = tape.sum(z)?;
                tape.offset(s, 4.0)
            },
            &theta,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_nonpositive_eps() {
        let theta = Tensor::scalar(1.0);
        assert!(grad_check(|t, x| t.sum(x), &theta, 0.0).is_err());
    }
}
