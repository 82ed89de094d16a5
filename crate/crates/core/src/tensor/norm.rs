use super::{Scalar, Tensor};
use crate::error::{check_dim, Error, Result};

/// Per-channel batch normalization parameters and running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub gamma: Vec<Scalar>,
    pub beta: Vec<Scalar>,
    pub running_mean: Vec<Scalar>,
    pub running_var: Vec<Scalar>,
    pub eps: Scalar,
    pub momentum: Scalar,
}

pub const BN_EPS: Scalar = 1e-5;
pub const BN_MOMENTUM: Scalar = 0.1;

impl BatchNormState {
    /// γ = 1, β = 0, running mean 0 and variance 1.
    pub fn identity(channels: usize) -> Self {
        BatchNormState {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        check_dim("batchnorm", "beta", c, self.beta.len())?;
        check_dim("batchnorm", "running_mean", c, self.running_mean.len())?;
        check_dim("batchnorm", "running_var", c, self.running_var.len())?;
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::config("batchnorm epsilon must be > 0"));
        }
        if self.running_var.iter().any(|&v| v < 0.0) {
            return Err(Error::config("batchnorm running variance must be >= 0"));
        }
        Ok(())
    }

    /// Folds the batch statistics of a training-mode forward into the
    /// running estimates (unbiased variance, as PyTorch does).
    pub fn update_running(&mut self, cache: &BnCache) {
        let Some(stats) = &cache.batch else { return };
        let m = self.momentum;
        let count = cache.count as Scalar;
        let correction = if cache.count > 1 {
            count / (count - 1.0)
        } else {
            1.0
        };
        for c in 0..self.gamma.len() {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * stats.mean[c];
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * stats.var[c] * correction;
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<Scalar>,
    /// Biased (population) variance of the batch.
    pub var: Vec<Scalar>,
}

/// What the backward pass needs from a forward call.
#[derive(Clone, Debug)]
pub struct BnCache {
    /// Normalized input before the affine step.
    pub x_hat: Tensor,
    /// 1 / sqrt(var + eps) per channel, of whichever statistics were used.
    pub inv_std: Vec<Scalar>,
    /// Present for training-mode calls.
    pub batch: Option<BatchStats>,
    /// Elements per channel (N·H·W).
    pub count: usize,
}

#[derive(Clone, Debug)]
pub struct BnGrads {
    pub x: Tensor,
    pub gamma: Vec<Scalar>,
    pub beta: Vec<Scalar>,
}

/// Training mode normalizes with batch statistics; inference mode with the
/// running estimates. The state is not modified: apply
/// [`BatchNormState::update_running`] with the returned cache.
pub fn batchnorm_forward(
    x: &Tensor,
    state: &BatchNormState,
    training: bool,
) -> Result<(Tensor, BnCache)> {
    state.validate()?;
    let s = x.shape();
    check_dim("batchnorm", "C", state.channels(), s.c)?;
    let plane = s.plane();
    let count = s.n * plane;

    let (mean, var, batch) = if training {
        let mut mean = vec![0.0; s.c];
        let mut var = vec![0.0; s.c];
        if count > 0 {
            for c in 0..s.c {
                let mut acc = 0.0;
                for n in 0..s.n {
                    acc += x.plane(n, c).iter().sum::<Scalar>();
                }
                let mu = acc / count as Scalar;
                let mut sq = 0.0;
                for n in 0..s.n {
                    sq += x
                        .plane(n, c)
                        .iter()
                        .map(|v| (v - mu) * (v - mu))
                        .sum::<Scalar>();
                }
                mean[c] = mu;
                var[c] = sq / count as Scalar;
            }
        }
        let stats = BatchStats {
            mean: mean.clone(),
            var: var.clone(),
        };
        (mean, var, Some(stats))
    } else {
        (state.running_mean.clone(), state.running_var.clone(), None)
    };

    let inv_std: Vec<Scalar> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
    let mut x_hat = Tensor::zeros(s);
    let mut y = Tensor::zeros(s);
    for (i, (&xv, (xh, yv))) in x
        .data()
        .iter()
        .zip(x_hat.data_mut().iter_mut().zip(y.data_mut().iter_mut()))
        .enumerate()
    {
        let c = (i / plane) % s.c;
        *xh = (xv - mean[c]) * inv_std[c];
        *yv = state.gamma[c] * *xh + state.beta[c];
    }
    Ok((
        y,
        BnCache {
            x_hat,
            inv_std,
            batch,
            count,
        },
    ))
}

pub fn batchnorm_backward(
    state: &BatchNormState,
    cache: &BnCache,
    grad_out: &Tensor,
) -> Result<BnGrads> {
    let s = grad_out.shape();
    super::same_shape("batchnorm_backward", cache.x_hat.shape(), s)?;
    let plane = s.plane();
    let mut dgamma = vec![0.0; s.c];
    let mut dbeta = vec![0.0; s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            let g = grad_out.plane(n, c);
            let xh = cache.x_hat.plane(n, c);
            dbeta[c] += g.iter().sum::<Scalar>();
            dgamma[c] += g.iter().zip(xh).map(|(a, b)| a * b).sum::<Scalar>();
        }
    }
    let mut gx = Tensor::zeros(s);
    let m = cache.count as Scalar;
    for (i, v) in gx.data_mut().iter_mut().enumerate() {
        let c = (i / plane) % s.c;
        let g = grad_out.data()[i];
        *v = if cache.batch.is_some() {
            // d/dx of gamma * (x - mean) * inv_std with batch statistics
            state.gamma[c] * cache.inv_std[c] / m
                * (m * g - dbeta[c] - cache.x_hat.data()[i] * dgamma[c])
        } else {
            state.gamma[c] * cache.inv_std[c] * g
        };
    }
    Ok(BnGrads {
        x: gx,
        gamma: dgamma,
        beta: dbeta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn identity_normalization_in_inference_mode() {
        let x = Tensor::from_fn(Shape::new(2, 3, 2, 2), |i| i as Scalar - 7.0);
        let (y, _) = batchnorm_forward(&x, &BatchNormState::identity(3), false).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() <= 1e-4 * a.abs().max(1.0));
        }
    }

    #[test]
    fn zero_gamma_outputs_beta() {
        let mut st = BatchNormState::identity(2);
        st.gamma = vec![0.0, 0.0];
        st.beta = vec![0.5, -1.0];
        let x = Tensor::from_fn(Shape::new(3, 2, 2, 2), |i| i as Scalar);
        for training in [false, true] {
            let (y, _) = batchnorm_forward(&x, &st, training).unwrap();
            assert!(y.plane(1, 0).iter().all(|&v| v == 0.5));
            assert!(y.plane(2, 1).iter().all(|&v| v == -1.0));
        }
    }

    #[test]
    fn training_batch_of_two_values() {
        // per channel the batch holds {0, 2}: mean 1, biased variance 1
        let x = Tensor::from_vec(Shape::new(2, 1, 1, 1), vec![0.0, 2.0]).unwrap();
        let (y, cache) = batchnorm_forward(&x, &BatchNormState::identity(1), true).unwrap();
        let expected = 1.0 / (1.0 + BN_EPS).sqrt();
        assert!((y.data()[0] + expected).abs() < 1e-12);
        assert!((y.data()[1] - expected).abs() < 1e-12);
        assert!((y.data()[1] - 1.0).abs() < 1e-5);
        let stats = cache.batch.as_ref().unwrap();
        assert_eq!(stats.mean, vec![1.0]);
        assert_eq!(stats.var, vec![1.0]);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let x = Tensor::from_vec(Shape::new(2, 1, 1, 1), vec![0.0, 2.0]).unwrap();
        let mut st = BatchNormState::identity(1);
        let (_, cache) = batchnorm_forward(&x, &st, true).unwrap();
        st.update_running(&cache);
        assert!((st.running_mean[0] - 0.1).abs() < 1e-15);
        // unbiased batch variance is 2
        assert!((st.running_var[0] - (0.9 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn channel_mismatch() {
        let x = Tensor::zeros(Shape::new(1, 4, 1, 1));
        let err = batchnorm_forward(&x, &BatchNormState::identity(3), false).unwrap_err();
        assert!(matches!(err, Error::Dimension { axis: "C", .. }));
    }

    #[test]
    fn rejects_bad_state() {
        let mut st = BatchNormState::identity(1);
        st.eps = 0.0;
        assert!(st.validate().is_err());
        let mut st = BatchNormState::identity(1);
        st.running_var[0] = -1.0;
        assert!(st.validate().is_err());
    }
}
