//! Central finite-difference gradient checking.

use super::{Result, Tape, Tensor, Var};

/// Gradient norms below this are compared in absolute terms, so inputs
/// with an exactly zero gradient (a key bias under softmax, say) are not
/// judged by the ratio of two rounding noises.
pub const NORM_FLOOR: f64 = 1e-6;

/// Outcome of comparing backward gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Norm-wise relative error `‖g_ad − g_fd‖ / max(‖g_ad‖, ‖g_fd‖, NORM_FLOOR)`
    /// per input.
    pub relative_errors: Vec<f64>,
    pub max_abs_error: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Evaluates `f` on fresh tapes to compare its backward gradients with
/// central differences of step `h`, for every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.take_grad(v)).collect();

    let mut xs = inputs.to_vec();
    let mut relative_errors = Vec::with_capacity(inputs.len());
    let mut max_abs_error = 0.0f64;
    for (i, ad) in analytic.iter().enumerate() {
        let mut diff2 = 0.0;
        let mut ad2 = 0.0;
        let mut fd2 = 0.0;
        for j in 0..xs[i].numel() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + h;
            let plus = eval(&xs)?;
            xs[i].data_mut()[j] = orig - h;
            let minus = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let d = ad[j] - fd;
            max_abs_error = max_abs_error.max(d.abs());
            diff2 += d * d;
            ad2 += ad[j] * ad[j];
            fd2 += fd * fd;
        }
        let denom = ad2.sqrt().max(fd2.sqrt()).max(NORM_FLOOR);
        relative_errors.push(diff2.sqrt() / denom);
    }
    Ok(GradCheckReport { relative_errors, max_abs_error })
}
