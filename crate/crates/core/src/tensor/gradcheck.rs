//! Central finite-difference checks of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Check at most this many entries per input (evenly strided); `None`
    /// checks all of them.
    pub max_entries: Option<usize>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { h: 1e-5, tol: 1e-4, max_entries: None }
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    /// max over checked entries of |g − ĝ| / max(1, |g|, |ĝ|)
    pub max_rel_error: f64,
    /// (input index, flat entry index) of the worst entry
    pub worst: (usize, usize),
    pub checked: usize,
    pub tol: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compare the tape gradient of the scalar function `f` with central
/// differences at `inputs`. Non-differentiable points (argmax, kinks) are
/// outside the contract: the check will simply report a large error there.
pub fn gradcheck<Fun>(f: Fun, inputs: &[Tensor<f64>], opts: GradcheckOptions) -> Result<GradcheckReport>
where
    Fun: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::Shape(format!("gradcheck: f must be scalar, got {:?}", v.shape())));
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(Error::NonFinite("gradcheck: f(x) is not finite".into()));
        }
        Ok(v)
    };

    eval(inputs)?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| tape.grad(v).cloned().expect("leaf gradient")).collect();

    let mut report = GradcheckReport { max_rel_error: 0.0, worst: (0, 0), checked: 0, tol: opts.tol };
    let mut xs = inputs.to_vec();
    for (ii, x) in inputs.iter().enumerate() {
        let n = x.len();
        let step = match opts.max_entries {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for e in (0..n).step_by(step) {
            let orig = x.data()[e];
            xs[ii].data_mut()[e] = orig + opts.h;
            let fp = eval(&xs)?;
            xs[ii].data_mut()[e] = orig - opts.h;
            let fm = eval(&xs)?;
            xs[ii].data_mut()[e] = orig;
            let numeric = (fp - fm) / (2.0 * opts.h);
            let err = relative_error(analytic[ii].data()[e], numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (ii, e);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_zero_error() {
        let x = Tensor::from_f64(vec![5], &[0.1, -2.0, 3.0, 4.5, 0.0]).unwrap();
        let r = gradcheck(|t, v| Ok(t.sum(v[0])), &[x], GradcheckOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-9 && r.passed());
    }

    #[test]
    fn non_finite_value_is_an_error() {
        let x = Tensor::from_f64(vec![1], &[-1.0]).unwrap();
        let r = gradcheck(
            |t, v| {
                let l = t.log(v[0]);
                Ok(t.sum(l))
            },
            &[x],
            GradcheckOptions::default(),
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
