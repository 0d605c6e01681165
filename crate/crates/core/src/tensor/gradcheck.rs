use super::{Result, Tape, Tensor, TensorError, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport<T> {
    pub max_rel_error: T,
    /// `(parameter index, flat element index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: T,
    pub numeric: T,
    pub coordinates: usize,
}

/// Compares tape gradients with central finite differences.
///
/// `f` must build a scalar loss from the given parameter leaves on a fresh
/// tape and be deterministic. Every coordinate of every parameter is
/// perturbed by `±h`; the relative error uses the denominator
/// `max(|analytic|, |numeric|, 1e-6)`. The floor keeps gradients that are
/// zero by symmetry (a key bias under softmax, say) from turning rounding
/// noise in the difference quotient into a large relative error.
pub fn gradient_check<T, F>(params: &[Tensor<T>], h: T, f: F) -> Result<GradCheckReport<T>>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if !(h >= T::lit(1e-6) && h <= T::lit(1e-3)) {
        return Err(TensorError::Parameter(format!(
            "finite-difference step must lie in [1e-6, 1e-3], got {h}"
        )));
    }
    let eval = |ps: &[Tensor<T>], grad: bool| -> Result<(T, Vec<Vec<T>>)> {
        let mut tape = Tape::new();
        let vars = ps
            .iter()
            .map(|p| tape.leaf(p.clone(), grad))
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&mut tape, &vars)?;
        let value = tape
            .value(loss)?
            .item()
            .ok_or_else(|| TensorError::NonScalarLoss(tape.value(loss).map(|t| t.shape().to_vec()).unwrap_or_default()))?;
        if !grad {
            return Ok((value, Vec::new()));
        }
        tape.backward(loss)?;
        let grads = vars
            .iter()
            .map(|&v| tape.grad(v).map(<[T]>::to_vec).unwrap_or_default())
            .collect();
        Ok((value, grads))
    };

    let (_, analytic) = eval(params, true)?;
    let floor = T::lit(1e-6);
    let two_h = h + h;
    let mut report = GradCheckReport {
        max_rel_error: T::zero(),
        worst: (0, 0),
        analytic: T::zero(),
        numeric: T::zero(),
        coordinates: 0,
    };
    let mut probe = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for ei in 0..p.len() {
            let orig = p.data()[ei];
            probe[pi] = with_element(p, ei, orig + h);
            let (plus, _) = eval(&probe, false)?;
            probe[pi] = with_element(p, ei, orig - h);
            let (minus, _) = eval(&probe, false)?;
            probe[pi] = p.clone();

            let numeric = (plus - minus) / two_h;
            let a = analytic[pi][ei];
            let denom = a.abs().max(numeric.abs()).max(floor);
            let rel = (a - numeric).abs() / denom;
            report.coordinates += 1;
            if rel > report.max_rel_error || report.coordinates == 1 {
                report.max_rel_error = rel;
                report.worst = (pi, ei);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

fn with_element<T: Scalar>(t: &Tensor<T>, index: usize, value: T) -> Tensor<T> {
    let mut data = t.data().to_vec();
    data[index] = value;
    Tensor::from_parts(t.shape().to_vec(), data)
}
