//! Training objectives: L1 photometric reconstruction, left-right disparity
//! consistency, and their weighted combination for the Siamese network.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Var};
use crate::warp::DispSign;

/// Weights of the reconstruction (left, right) and consistency terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha_l: f64,
    pub alpha_r: f64,
    pub alpha_c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_l: 0.5,
            alpha_r: 0.5,
            alpha_c: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha_l, self.alpha_r, self.alpha_c]
            .iter()
            .any(|a| !(a.is_finite() && *a >= 0.0))
        {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be finite and non-negative, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Mean absolute difference over every element (pixels and channels).
pub fn l1_reconstruction<T: Scalar>(tape: &mut Tape<T>, target: Var, recon: Var) -> Result<Var> {
    let diff = tape.sub(target, recon)?;
    let a = tape.abs(diff)?;
    tape.mean(a)
}

/// `mean |D_l − D_r(i + sign·D_l)|` over the pixels of the left map.
pub fn consistency_loss<T: Scalar>(
    tape: &mut Tape<T>,
    d_l: Var,
    d_r: Var,
    sign: DispSign,
) -> Result<Var> {
    if tape.shape(d_l) != tape.shape(d_r) {
        return Err(Error::shape(
            "consistency_loss",
            tape.shape(d_l),
            tape.shape(d_r),
        ));
    }
    let resampled = tape.resample_disparity(d_r, d_l, sign)?;
    l1_reconstruction(tape, d_l, resampled)
}

/// Component values of one loss evaluation. `right` and `consistency` are
/// absent for the single-stream network.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub left: f64,
    pub right: Option<f64>,
    pub consistency: Option<f64>,
}

/// Weighted sum of already-computed component losses.
pub fn weighted_sum<T: Scalar>(tape: &mut Tape<T>, terms: &[(Var, f64)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(v, w) in terms {
        let scaled = tape.scale(v, T::of_f64(w))?;
        acc = Some(match acc {
            Some(a) => tape.add(a, scaled)?,
            None => scaled,
        });
    }
    acc.ok_or_else(|| Error::InvalidArgument("weighted_sum of no terms".into()))
}

/// Views and predictions of one Siamese step.
#[derive(Clone, Copy, Debug)]
pub struct SiameseInputs {
    pub left: Var,
    pub right: Var,
    pub left_recon: Var,
    pub right_recon: Var,
    pub disp_left: Var,
    pub disp_right: Var,
}

/// `alpha_l·l1(I_l, I_l*) + alpha_r·l1(I_r, I_r*) + alpha_c·l_c(D_l, D_r)`.
pub fn siamese_loss<T: Scalar>(
    tape: &mut Tape<T>,
    x: SiameseInputs,
    w: LossWeights,
    sign: DispSign,
) -> Result<(Var, LossTerms)> {
    w.validate()?;
    let l_l = l1_reconstruction(tape, x.left, x.left_recon)?;
    let l_r = l1_reconstruction(tape, x.right, x.right_recon)?;
    let l_c = consistency_loss(tape, x.disp_left, x.disp_right, sign)?;
    let total = weighted_sum(
        tape,
        &[(l_l, w.alpha_l), (l_r, w.alpha_r), (l_c, w.alpha_c)],
    )?;
    let item = |v: Var| tape.value(v).item().as_f64();
    let terms = LossTerms {
        total: item(total),
        left: item(l_l),
        right: Some(item(l_r)),
        consistency: Some(item(l_c)),
    };
    Ok((total, terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn img(shape: [usize; 4], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn l1_examples() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::full([1, 3, 2, 2], 0.2));
        let b = tape.constant(Tensor::full([1, 3, 2, 2], 0.5));
        let l = l1_reconstruction(&mut tape, a, b).unwrap();
        assert!((tape.value(l).item() - 0.3).abs() < 1e-15);
        let same = l1_reconstruction(&mut tape, a, a).unwrap();
        assert_eq!(tape.value(same).item(), 0.0);

        let t = tape.constant(img([1, 1, 2, 2], &[0., 1., 1., 0.]));
        let r = tape.constant(Tensor::full([1, 1, 2, 2], 0.5));
        let l = l1_reconstruction(&mut tape, t, r).unwrap();
        assert_eq!(tape.value(l).item(), 0.5);
    }

    #[test]
    fn consistency_on_constant_fields() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full([1, 1, 4, 8], 2.5));
        let l = consistency_loss(&mut tape, c, c, DispSign::Positive).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let d2 = tape.constant(Tensor::full([1, 1, 4, 8], 2.0));
        let d3 = tape.constant(Tensor::full([1, 1, 4, 8], 3.0));
        let l = consistency_loss(&mut tape, d2, d3, DispSign::Positive).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);
    }

    #[test]
    fn weighted_combination_arithmetic() {
        let mut tape = Tape::<f64>::new();
        let parts = [0.2, 0.4, 0.1].map(|v| tape.scalar_constant(v));
        let w = LossWeights::default();
        let total = weighted_sum(
            &mut tape,
            &[
                (parts[0], w.alpha_l),
                (parts[1], w.alpha_r),
                (parts[2], w.alpha_c),
            ],
        )
        .unwrap();
        assert!((tape.value(total).item() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn degenerate_weights_reduce_to_left_term() {
        let mut tape = Tape::<f64>::new();
        let left = tape.constant(img([1, 1, 1, 4], &[0.1, 0.2, 0.3, 0.4]));
        let left_recon = tape.constant(Tensor::full([1, 1, 1, 4], 0.25));
        let right = tape.constant(Tensor::full([1, 1, 1, 4], 0.9));
        let dl = tape.constant(Tensor::full([1, 1, 1, 4], 1.0));
        let dr = tape.constant(Tensor::full([1, 1, 1, 4], 3.0));
        let inputs = SiameseInputs {
            left,
            right,
            left_recon,
            right_recon: left_recon,
            disp_left: dl,
            disp_right: dr,
        };
        let w = LossWeights {
            alpha_l: 1.0,
            alpha_r: 0.0,
            alpha_c: 0.0,
        };
        let (total, terms) = siamese_loss(&mut tape, inputs, w, DispSign::Positive).unwrap();
        let basic = l1_reconstruction(&mut tape, left, left_recon).unwrap();
        assert_eq!(tape.value(total).item(), tape.value(basic).item());
        assert_eq!(terms.consistency, Some(2.0));
    }

    #[test]
    fn negative_weights_rejected() {
        let w = LossWeights {
            alpha_l: -1.0,
            ..LossWeights::default()
        };
        assert!(w.validate().is_err());
    }
}
