//! Batch normalization over every axis except the channel axis (axis 1).

use super::{Mode, Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running statistics used in eval mode. Fresh statistics are mean 0 and
/// variance 1, so eval before any training step is a pure affine map.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
    pub momentum: f64,
    pub eps: f64,
}

impl<S: Scalar> RunningStats<S> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![S::of(0.0); channels],
            var: vec![S::of(1.0); channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Learnable affine parameters plus running statistics of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<S> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub stats: RunningStats<S>,
}

impl<S: Scalar> BatchNormState<S> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], S::of(1.0)),
            beta: Tensor::zeros(&[channels]),
            stats: RunningStats::new(channels),
        }
    }
}

/// Channel geometry of a `B×C×…` tensor: `(batch, channels, inner)`.
pub(crate) fn bn_dims(shape: &[usize], channels: usize) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 || shape[1] != channels {
        return Err(shape_err!(
            "batchnorm over {} channels got input {:?}",
            channels,
            shape
        ));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// Normalized values `x̂` and per-channel `1/σ` from the given statistics.
pub(crate) struct BnForward<S> {
    pub out: Vec<S>,
    pub xhat: Vec<S>,
    pub inv_std: Vec<S>,
}

pub(crate) fn bn_forward<S: Scalar>(
    x: &[S],
    shape: &[usize],
    gamma: &[S],
    beta: &[S],
    stats: &mut RunningStats<S>,
    mode: Mode,
) -> Result<BnForward<S>> {
    let (batch, ch, inner) = bn_dims(shape, stats.channels())?;
    if gamma.len() != ch || beta.len() != ch {
        return Err(shape_err!("batchnorm affine length mismatch"));
    }
    let count = batch * inner;
    let (mean, var) = match mode {
        Mode::Train => {
            if count < 2 {
                return Err(Error::InvalidArgument(
                    "batchnorm in train mode needs at least 2 values per channel".into(),
                ));
            }
            let mut mean = vec![0.0f64; ch];
            let mut var = vec![0.0f64; ch];
            for c in 0..ch {
                let mut sum = 0.0;
                for b in 0..batch {
                    let base = (b * ch + c) * inner;
                    sum += x[base..base + inner]
                        .iter()
                        .map(|v| v.as_f64())
                        .sum::<f64>();
                }
                let m = sum / count as f64;
                let mut sq = 0.0;
                for b in 0..batch {
                    let base = (b * ch + c) * inner;
                    sq += x[base..base + inner]
                        .iter()
                        .map(|v| (v.as_f64() - m).powi(2))
                        .sum::<f64>();
                }
                mean[c] = m;
                var[c] = sq / count as f64;
            }
            // running variance tracks the unbiased estimate
            let mom = stats.momentum;
            let unbias = count as f64 / (count - 1) as f64;
            for c in 0..ch {
                stats.mean[c] = S::of((1.0 - mom) * stats.mean[c].as_f64() + mom * mean[c]);
                stats.var[c] = S::of((1.0 - mom) * stats.var[c].as_f64() + mom * var[c] * unbias);
            }
            (mean, var)
        }
        Mode::Eval => (
            stats.mean.iter().map(|v| v.as_f64()).collect(),
            stats.var.iter().map(|v| v.as_f64()).collect(),
        ),
    };
    let inv_std: Vec<S> = var
        .iter()
        .map(|v| S::of(1.0 / (v + stats.eps).sqrt()))
        .collect();
    let mut xhat = vec![S::of(0.0); x.len()];
    let mut out = vec![S::of(0.0); x.len()];
    for b in 0..batch {
        for c in 0..ch {
            let base = (b * ch + c) * inner;
            let m = S::of(mean[c]);
            for i in base..base + inner {
                let h = (x[i] - m) * inv_std[c];
                xhat[i] = h;
                out[i] = gamma[c] * h + beta[c];
            }
        }
    }
    Ok(BnForward { out, xhat, inv_std })
}

/// Gradients `(dx, dγ, dβ)` of batchnorm given the saved forward values.
pub(crate) fn bn_backward<S: Scalar>(
    dy: &[S],
    shape: &[usize],
    gamma: &[S],
    xhat: &[S],
    inv_std: &[S],
    mode: Mode,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let (batch, ch, inner) = (shape[0], shape[1], shape[2..].iter().product::<usize>());
    let count = (batch * inner) as f64;
    let mut dgamma = vec![S::of(0.0); ch];
    let mut dbeta = vec![S::of(0.0); ch];
    for b in 0..batch {
        for c in 0..ch {
            let base = (b * ch + c) * inner;
            for i in base..base + inner {
                dgamma[c] += dy[i] * xhat[i];
                dbeta[c] += dy[i];
            }
        }
    }
    let mut dx = vec![S::of(0.0); dy.len()];
    for c in 0..ch {
        let scale = gamma[c] * inv_std[c];
        match mode {
            Mode::Eval => {
                for b in 0..batch {
                    let base = (b * ch + c) * inner;
                    for i in base..base + inner {
                        dx[i] = dy[i] * scale;
                    }
                }
            }
            Mode::Train => {
                let mean_dy = S::of(dbeta[c].as_f64() / count);
                let mean_dy_xhat = S::of(dgamma[c].as_f64() / count);
                for b in 0..batch {
                    let base = (b * ch + c) * inner;
                    for i in base..base + inner {
                        dx[i] = scale * (dy[i] - mean_dy - xhat[i] * mean_dy_xhat);
                    }
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// BatchNorm as a plain forward op. Train mode normalizes with batch
/// statistics and updates the running statistics; eval mode uses the stored
/// ones.
pub fn batchnorm<S: Scalar>(
    x: &Tensor<S>,
    state: &mut BatchNormState<S>,
    mode: Mode,
) -> Result<Tensor<S>> {
    let fwd = bn_forward(
        x.data(),
        x.shape(),
        state.gamma.data(),
        state.beta.data(),
        &mut state.stats,
        mode,
    )?;
    let t = Tensor::new(x.shape(), fwd.out)?;
    t.ensure_finite("batchnorm")?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn channel_moments(y: &Tensor<f64>, c: usize) -> (f64, f64) {
        let s = y.shape();
        let inner: usize = s[2..].iter().product();
        let vals: Vec<f64> = (0..s[0])
            .flat_map(|b| {
                let base = (b * s[1] + c) * inner;
                y.data()[base..base + inner].to_vec()
            })
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
        (m, v)
    }

    #[test]
    fn train_mode_standardizes_each_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::from_fn(&[4, 3, 5, 2], |i| {
            rng.random_range(-3.0..7.0) + (i % 3) as f64
        });
        let mut st = BatchNormState::new(3);
        let y = batchnorm(&x, &mut st, Mode::Train).unwrap();
        for c in 0..3 {
            let (m, v) = channel_moments(&y, c);
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-4, "var {v}");
        }
        assert!(st.stats.var.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let x = Tensor::<f64>::full(&[2, 2, 3], 4.2);
        let mut st = BatchNormState::new(2);
        st.beta = Tensor::new(&[2], vec![0.25, -1.0]).unwrap();
        let y = batchnorm(&x, &mut st, Mode::Train).unwrap();
        assert!((y.get(&[1, 0, 2]) - 0.25).abs() < 1e-12);
        assert!((y.get(&[0, 1, 1]) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn eval_matches_manual_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::from_fn(&[3, 2, 4], |_| rng.random_range(-1.0..1.0));
        let mut st = BatchNormState::new(2);
        st.stats.mean = vec![0.3, -0.2];
        st.stats.var = vec![2.0, 0.5];
        st.gamma = Tensor::new(&[2], vec![1.5, 0.7]).unwrap();
        st.beta = Tensor::new(&[2], vec![0.1, 0.2]).unwrap();
        let before = st.clone();
        let y = batchnorm(&x, &mut st, Mode::Eval).unwrap();
        assert_eq!(st, before, "eval must not touch running stats");
        for b in 0..3 {
            for c in 0..2 {
                for i in 0..4 {
                    let want = before.gamma.data()[c] * (x.get(&[b, c, i]) - before.stats.mean[c])
                        / (before.stats.var[c] + BN_EPS).sqrt()
                        + before.beta.data()[c];
                    assert!((y.get(&[b, c, i]) - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn eval_with_default_stats_is_near_identity() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 3], |i| i as f64);
        let y = batchnorm(&x, &mut BatchNormState::new(2), Mode::Eval).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-4);
    }

    #[test]
    fn running_stats_move_with_momentum() {
        let x = Tensor::<f64>::new(&[2, 1, 1], vec![1.0, 3.0]).unwrap();
        let mut st = BatchNormState::new(1);
        batchnorm(&x, &mut st, Mode::Train).unwrap();
        assert!((st.stats.mean[0] - 0.2).abs() < 1e-12);
        // biased var 1, unbiased 2
        assert!((st.stats.var[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn train_needs_two_values() {
        let x = Tensor::<f64>::new(&[1, 1, 1], vec![1.0]).unwrap();
        assert!(batchnorm(&x, &mut BatchNormState::new(1), Mode::Train).is_err());
        assert!(batchnorm(&x, &mut BatchNormState::new(2), Mode::Eval).is_err());
    }
}
