use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Compares the tape gradient of a scalar function against central
/// differences `(f(x + εe) − f(x − εe)) / 2ε` for every element of `x`.
///
/// Returns the largest relative error
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let eval = |input: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(input);
        let root = f(&mut tape, v)?;
        Ok(tape.value(root).item())
    };

    let mut tape = Tape::new();
    let xv = tape.variable(x.clone());
    let root = f(&mut tape, xv)?;
    let grads = tape.gradients(root)?;
    let zeros = Tensor::zeros(x.shape());
    let analytic = grads.get(xv).unwrap_or(&zeros);

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(seed: u64, n: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..n)
            .map(|_| {
                // keep away from the |x| kink at 0
                let m: f64 = rng.gen_range(0.1..2.0);
                if rng.gen_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect();
        Tensor::from_vec([n], v).unwrap()
    }

    #[test]
    fn linear_function_is_exact() {
        let x = random(1, 6);
        let err = grad_check(|t, v| t.mean(v), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn mean_abs_and_mean_sigmoid() {
        for seed in 0..10 {
            let x = random(seed, 7);
            let e1 = grad_check(
                |t, v| {
                    let a = t.abs(v)?;
                    t.mean(a)
                },
                &x,
                1e-5,
            )
            .unwrap();
            let e2 = grad_check(
                |t, v| {
                    let s = t.sigmoid(v)?;
                    t.mean(s)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(e1 < 1e-6, "abs seed {seed}: {e1}");
            assert!(e2 < 1e-6, "sigmoid seed {seed}: {e2}");
        }
    }

    #[test]
    fn hand_chain_rule_example() {
        // d/dw mean(|w|) = sign(w)/2
        let mut tape = Tape::<f64>::new();
        let w = tape.variable(Tensor::from_f64([2], &[-1.0, 2.0]).unwrap());
        let a = tape.abs(w).unwrap();
        let m = tape.mean(a).unwrap();
        let g = tape.gradients(m).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[-0.5, 0.5]);
    }
}
