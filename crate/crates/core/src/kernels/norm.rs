use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates.
    Eval,
}

/// Running per-channel mean and (unbiased) variance.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros([channels]),
            var: Tensor::full([channels], T::one()),
        }
    }

    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn update(&mut self, batch: &BatchStats<T>, momentum: f64) {
        let m = T::from_f64_lossy(momentum);
        let keep = T::one() - m;
        for (r, b) in self.mean.data_mut().iter_mut().zip(&batch.mean) {
            *r = keep * *r + m * *b;
        }
        for (r, b) in self.var.data_mut().iter_mut().zip(&batch.var) {
            *r = keep * *r + m * *b;
        }
    }
}

/// Per-channel statistics of one training-mode batch; `var` is unbiased.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// What the backward pass needs from a forward call.
#[derive(Clone, Debug)]
pub struct BatchNormSaved<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mode: NormMode,
}

pub type BatchNormOutput<T> = (Tensor<T>, BatchNormSaved<T>, Option<BatchStats<T>>);

/// Training mode normalizes with biased batch variance and returns the batch statistics
/// for the caller to fold into the running estimates; eval mode reads `stats` only.
pub fn batch_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &RunningStats<T>,
    mode: NormMode,
    eps: f64,
) -> Result<BatchNormOutput<T>> {
    let [n, c, h, w] = x.dims4("batch_norm")?;
    for (name, t) in [("gamma", gamma), ("beta", beta), ("running mean", &stats.mean), ("running var", &stats.var)] {
        if t.shape() != [c] {
            return Err(Error::shape("batch_norm", format!("{name} [{c}]"), format!("{:?}", t.shape())));
        }
    }
    let hw = h * w;
    let count = n * hw;
    if count == 0 {
        return Err(Error::invalid("batch_norm", "zero batch*spatial extent"));
    }
    let eps = T::from_f64_lossy(eps);
    let mut xhat = Tensor::zeros(x.shape().to_vec());
    let mut y = Tensor::zeros(x.shape().to_vec());
    let mut inv_std = vec![T::zero(); c];
    let cnt = T::from_usize(count).unwrap();
    let mut batch = (mode == NormMode::Train).then(|| BatchStats {
        mean: vec![T::zero(); c],
        var: vec![T::zero(); c],
    });
    for ch in 0..c {
        let planes = (0..n).map(|b| (b * c + ch) * hw);
        let (mean, var) = match &mut batch {
            Some(bs) => {
                let mean = planes.clone().map(|s| x.data()[s..s + hw].iter().copied().sum::<T>()).sum::<T>() / cnt;
                let var = planes
                    .clone()
                    .map(|s| x.data()[s..s + hw].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>())
                    .sum::<T>()
                    / cnt;
                bs.mean[ch] = mean;
                bs.var[ch] = if count > 1 { var * cnt / (cnt - T::one()) } else { var };
                (mean, var)
            }
            None => (stats.mean.data()[ch], stats.var.data()[ch]),
        };
        let istd = T::one() / (var + eps).sqrt();
        inv_std[ch] = istd;
        let (gm, bt) = (gamma.data()[ch], beta.data()[ch]);
        for s in planes {
            for i in s..s + hw {
                let xh = (x.data()[i] - mean) * istd;
                xhat.data_mut()[i] = xh;
                y.data_mut()[i] = gm * xh + bt;
            }
        }
    }
    Ok((y, BatchNormSaved { xhat, inv_std, mode }, batch))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward<T: Scalar>(
    gamma: &Tensor<T>,
    saved: &BatchNormSaved<T>,
    gout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [n, c, h, w] = saved.xhat.dims4("batch_norm_backward")?;
    if gout.shape() != saved.xhat.shape() {
        return Err(Error::shape("batch_norm_backward", format!("{:?}", saved.xhat.shape()), format!("{:?}", gout.shape())));
    }
    let hw = h * w;
    let cnt = T::from_usize(n * hw).unwrap();
    let mut dx = Tensor::zeros(gout.shape().to_vec());
    let mut dgamma = Tensor::zeros([c]);
    let mut dbeta = Tensor::zeros([c]);
    let xh = saved.xhat.data();
    let g = gout.data();
    for ch in 0..c {
        let planes = (0..n).map(move |b| (b * c + ch) * hw);
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for s in planes.clone() {
            for i in s..s + hw {
                sum_g += g[i];
                sum_gx += g[i] * xh[i];
            }
        }
        dgamma.data_mut()[ch] = sum_gx;
        dbeta.data_mut()[ch] = sum_g;
        let scale = gamma.data()[ch] * saved.inv_std[ch];
        for s in planes {
            for i in s..s + hw {
                dx.data_mut()[i] = match saved.mode {
                    NormMode::Train => scale * (g[i] - sum_g / cnt - xh[i] * sum_gx / cnt),
                    NormMode::Eval => scale * g[i],
                };
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gaussian_init;

    #[test]
    fn train_mode_standardizes_each_channel() {
        let x: Tensor<f64> = gaussian_init([3, 2, 4, 5], 2.0, 9).unwrap().map(|v| v + 3.0);
        let mut stats = RunningStats::new(2);
        let (y, _, batch) = batch_norm_forward(&x, &Tensor::full([2], 1.0), &Tensor::zeros([2]), &stats, NormMode::Train, 1e-5).unwrap();
        stats.update(&batch.unwrap(), 0.1);
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|b| (0..20).map(move |i| (b, i))).map(|(b, i)| y.data()[(b * 2 + ch) * 20 + i]).collect();
            let mean = vals.iter().sum::<f64>() / 60.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 60.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5);
        }
        // Running stats moved 10% of the way towards the batch statistics.
        assert!(stats.mean.data()[0] > 0.2 && stats.mean.data()[0] < 0.4);
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let x = Tensor::<f64>::full([2, 1, 3, 3], 4.5);
        let stats = RunningStats::new(1);
        let beta = Tensor::from_f64([1], &[0.25]).unwrap();
        let (y, _, _) = batch_norm_forward(&x, &Tensor::full([1], 2.0), &beta, &stats, NormMode::Train, 1e-5).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.25).abs() < 1e-9));
    }

    #[test]
    fn eval_mode_uses_running_stats_and_leaves_them() {
        let x = Tensor::<f64>::full([1, 1, 2, 2], 3.0);
        let mut stats = RunningStats::new(1);
        stats.mean = Tensor::from_f64([1], &[1.0]).unwrap();
        stats.var = Tensor::from_f64([1], &[4.0]).unwrap();
        let (y, _, batch) = batch_norm_forward(&x, &Tensor::full([1], 1.0), &Tensor::zeros([1]), &stats, NormMode::Eval, 0.0).unwrap();
        assert!(y.data().iter().all(|&v| v == 1.0));
        assert!(batch.is_none());
    }

    #[test]
    fn empty_extent_is_an_error() {
        let x = Tensor::<f32>::zeros([0, 2, 3, 3]);
        let stats = RunningStats::new(2);
        assert!(batch_norm_forward(&x, &Tensor::full([2], 1.0), &Tensor::zeros([2]), &stats, NormMode::Train, 1e-5).is_err());
    }
}
