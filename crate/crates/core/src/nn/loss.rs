use super::layers::softmax_backward;
use super::tensor::Tensor;
use crate::{Error, Result};

const P_MIN: f64 = 1e-12;

/// Multiclass focal loss `-alpha * (1 - p_t)^gamma * ln(p_t)`, averaged over
/// the batch, where `p_t` is the probability assigned to the true class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalLoss {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalLoss {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

impl FocalLoss {
    pub fn new(alpha: f64, gamma: f64) -> Self {
        Self { alpha, gamma }
    }

    /// Loss of a single true-class probability (clamped to `[1e-12, 1]`).
    pub fn sample_loss(&self, p_true: f64) -> f64 {
        let p = p_true.clamp(P_MIN, 1.0);
        -self.alpha * (1.0 - p).powf(self.gamma) * p.ln()
    }

    fn true_probs<'a>(
        &self,
        probs: &'a Tensor,
        targets: &'a [usize],
    ) -> Result<impl Iterator<Item = (usize, f64)> + 'a> {
        let (b, k) = probs.dims2()?;
        if targets.len() != b {
            return Err(Error::Shape(format!(
                "{} targets for a batch of {b}",
                targets.len()
            )));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Input(format!("target class {t} outside [0, {k})")));
        }
        Ok(targets
            .iter()
            .enumerate()
            .map(move |(i, &t)| (i * k + t, probs.data()[i * k + t])))
    }

    pub fn per_sample(&self, probs: &Tensor, targets: &[usize]) -> Result<Vec<f64>> {
        Ok(self
            .true_probs(probs, targets)?
            .map(|(_, p)| self.sample_loss(p))
            .collect())
    }

    pub fn forward(&self, probs: &Tensor, targets: &[usize]) -> Result<f64> {
        let losses = self.per_sample(probs, targets)?;
        if losses.is_empty() {
            return Ok(0.0);
        }
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    /// Gradient of the batch-mean loss with respect to the probabilities.
    pub fn grad_probs(&self, probs: &Tensor, targets: &[usize]) -> Result<Tensor> {
        let b = targets.len().max(1) as f64;
        let mut g = Tensor::zeros(probs.shape().to_vec());
        let (a, gamma) = (self.alpha, self.gamma);
        let entries: Vec<_> = self.true_probs(probs, targets)?.collect();
        let gd = g.data_mut();
        for (idx, p) in entries {
            if p < P_MIN {
                continue;
            }
            let q = 1.0 - p;
            let focal_term = if gamma == 0.0 {
                0.0
            } else {
                gamma * q.powf(gamma - 1.0) * p.ln()
            };
            gd[idx] = a * (focal_term - q.powf(gamma) / p) / b;
        }
        Ok(g)
    }

    /// Gradient of the batch-mean loss with respect to the logits that
    /// produced `probs` through softmax.
    pub fn grad_logits(&self, probs: &Tensor, targets: &[usize]) -> Result<Tensor> {
        softmax_backward(probs, &self.grad_probs(probs, targets)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(p: &[f64]) -> Tensor {
        Tensor::new(vec![1, p.len()], p.to_vec()).unwrap()
    }

    #[test]
    fn closed_form_values() {
        let fl = FocalLoss::default();
        assert_eq!(fl.sample_loss(1.0), 0.0);
        let l = fl.sample_loss(0.5);
        assert!((l - 0.0433216987849966).abs() < 1e-12, "{l}");
        assert!((l - 0.0433217).abs() < 1e-6);
    }

    #[test]
    fn reduces_to_cross_entropy() {
        let ce = FocalLoss::new(1.0, 0.0);
        for p in [0.01, 0.3, 0.5, 0.99] {
            assert_eq!(ce.sample_loss(p), -p.ln());
        }
    }

    #[test]
    fn clamps_zero_probability() {
        let fl = FocalLoss::default();
        let l = fl.sample_loss(0.0);
        assert!(l.is_finite() && l > 0.0);
        let g = fl.grad_probs(&row(&[0.0, 1.0]), &[0]).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0]);
    }

    #[test]
    fn rejects_bad_targets() {
        let fl = FocalLoss::default();
        let probs = row(&[0.1; 10]);
        assert!(matches!(fl.forward(&probs, &[10]), Err(Error::Input(_))));
        assert!(fl.forward(&probs, &[0, 1]).is_err());
    }

    #[test]
    fn monotone_and_nonnegative() {
        let fl = FocalLoss::default();
        let mut prev = f64::INFINITY;
        for i in 1..=1000 {
            let l = fl.sample_loss(i as f64 / 1000.0);
            assert!(l >= 0.0 && l <= prev);
            prev = l;
        }
    }

    #[test]
    fn probability_gradient_matches_difference_quotient() {
        let fl = FocalLoss::default();
        for p in [0.05, 0.3, 0.7] {
            let h = 1e-6;
            let fd = (fl.sample_loss(p + h) - fl.sample_loss(p - h)) / (2.0 * h);
            let g = fl.grad_probs(&row(&[p, 1.0 - p]), &[0]).unwrap();
            assert!((g.data()[0] - fd).abs() < 1e-8);
        }
    }
}
