use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};
use crate::scalar::Scalar;

/// Discriminator loss `softplus(-l_real) + softplus(l_fake)`, i.e.
/// `-ln D(real) - ln(1 - D(fake))` in log-sigmoid form.
pub fn d_loss<T: Scalar>(tape: &mut Tape<T>, logit_real: Var, logit_fake: Var) -> Result<Var> {
    let neg = tape.scale(logit_real, -T::one())?;
    let a = tape.softplus(neg)?;
    let b = tape.softplus(logit_fake)?;
    tape.add(a, b)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub adv: f64,
    pub cls: f64,
    pub mse: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            adv: 1.0,
            cls: 1.0,
            mse: 1.0,
        }
    }
}

/// Generator loss and its unweighted terms.
#[derive(Clone, Copy, Debug)]
pub struct GLoss {
    pub total: Var,
    pub adv: Option<Var>,
    pub cls: Var,
    pub mse: Option<Var>,
}

/// `w_adv·softplus(-l_fake) + w_cls·(-ln ŷ[label]) + w_mse·Σ_k ‖η_k - η̂_k‖²`.
///
/// Terms whose inputs are absent are omitted.
pub fn g_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logit_fake: Option<Var>,
    y_hat: Var,
    label: usize,
    eta_hat: &[Var],
    eta_true: &[Var],
    w: LossWeights,
) -> Result<GLoss> {
    let probs = tape.data(y_hat);
    let total_p: f64 = probs.iter().map(|p| p.to_f64_lossy()).sum();
    if probs.iter().any(|&p| p < T::zero()) || (total_p - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("class scores are not a probability vector (sum {total_p})")));
    }
    let cls = tape.nll(y_hat, label)?;
    let mut total = tape.scale(cls, T::lit(w.cls))?;

    let adv = match logit_fake {
        Some(l) => {
            let neg = tape.scale(l, -T::one())?;
            let adv = tape.softplus(neg)?;
            let wa = tape.scale(adv, T::lit(w.adv))?;
            total = tape.add(total, wa)?;
            Some(adv)
        }
        None => None,
    };

    let mse = if eta_hat.is_empty() {
        None
    } else {
        if eta_hat.len() != eta_true.len() {
            return crate::error::dim_err("g_loss", "predicted and true grids differ in patch count");
        }
        let parts = eta_hat
            .iter()
            .zip(eta_true)
            .map(|(&p, &t)| tape.sq_dist(p, t))
            .collect::<Result<Vec<_>>>()?;
        let joined = tape.concat(&parts)?;
        let mse = tape.sum(joined)?;
        let wm = tape.scale(mse, T::lit(w.mse))?;
        total = tape.add(total, wm)?;
        Some(mse)
    };
    Ok(GLoss { total, adv, cls, mse })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn even_discriminator_gives_two_ln_two() {
        let mut t = Tape::<f64>::new();
        let z = t.constant(vec![0.0]).unwrap();
        let l = d_loss(&mut t, z, z).unwrap();
        assert!((t.scalar(l) - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn perfect_discriminator_loss_vanishes() {
        let mut t = Tape::<f64>::new();
        let real = t.constant(vec![50.0]).unwrap();
        let fake = t.constant(vec![-50.0]).unwrap();
        let l = d_loss(&mut t, real, fake).unwrap();
        assert!(t.scalar(l) < 1e-20);
    }

    #[test]
    fn d_loss_matches_formula() {
        let mut t = Tape::<f64>::new();
        let (a, b) = (0.73, -1.21);
        let real = t.constant(vec![a]).unwrap();
        let fake = t.constant(vec![b]).unwrap();
        let l = d_loss(&mut t, real, fake).unwrap();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let expect = -sig(a).ln() - (1.0 - sig(b)).ln();
        assert!((t.scalar(l) - expect).abs() < 1e-12);
    }

    #[test]
    fn g_loss_perfect_prediction_even_discriminator() {
        let mut t = Tape::<f64>::new();
        let l = t.constant(vec![0.0]).unwrap();
        let y = t.constant(vec![0.0, 1.0]).unwrap();
        let eta = vec![t.constant(vec![0.5, 1.5]).unwrap()];
        let g = g_loss(&mut t, Some(l), y, 1, &eta, &eta, LossWeights::default()).unwrap();
        assert!((t.scalar(g.total) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn zero_weights_leave_adversarial_term() {
        let mut t = Tape::<f64>::new();
        let l = t.constant(vec![0.4]).unwrap();
        let y = t.constant(vec![0.7, 0.3]).unwrap();
        let p = vec![t.constant(vec![0.0, 1.0]).unwrap()];
        let q = vec![t.constant(vec![2.0, 0.0]).unwrap()];
        let w = LossWeights {
            adv: 1.0,
            cls: 0.0,
            mse: 0.0,
        };
        let g = g_loss(&mut t, Some(l), y, 1, &p, &q, w).unwrap();
        assert!((t.scalar(g.total) - (1.0 + (-0.4f64).exp()).ln()).abs() < 1e-15);
    }

    #[test]
    fn g_loss_term_by_term() {
        let mut t = Tape::<f64>::new();
        let l = t.constant(vec![-0.35]).unwrap();
        let y = t.constant(vec![0.62, 0.38]).unwrap();
        let p = vec![t.constant(vec![0.1, 1.0]).unwrap(), t.constant(vec![0.4, 0.0]).unwrap()];
        let q = vec![t.constant(vec![0.3, 0.5]).unwrap(), t.constant(vec![0.0, 0.2]).unwrap()];
        let w = LossWeights {
            adv: 1.0,
            cls: 0.5,
            mse: 2.0,
        };
        let g = g_loss(&mut t, Some(l), y, 0, &p, &q, w).unwrap();
        let adv = (1.0 + 0.35f64.exp()).ln();
        let cls = -(0.62f64).ln();
        let mse = 0.2f64.powi(2) + 0.5f64.powi(2) + 0.4f64.powi(2) + 0.2f64.powi(2);
        assert!((t.scalar(g.adv.unwrap()) - adv).abs() < 1e-12);
        assert!((t.scalar(g.cls) - cls).abs() < 1e-12);
        assert!((t.scalar(g.mse.unwrap()) - mse).abs() < 1e-12);
        assert!((t.scalar(g.total) - (adv + 0.5 * cls + 2.0 * mse)).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_probability() {
        let mut t = Tape::<f64>::new();
        let y = t.constant(vec![0.7, 0.7]).unwrap();
        assert!(matches!(
            g_loss(&mut t, None, y, 0, &[], &[], LossWeights::default()),
            Err(Error::Domain(_))
        ));
    }
}
