//! Dense layers with hand-written backward passes.
//!
//! Every forward function returns its output together with whatever it needs
//! to run backward later. Backward functions never touch the parameter state;
//! they return fresh gradient buffers that callers accumulate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::{Matrix, Real};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams<T = f32> {
    /// `in_dim x out_dim`
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Real> AffineParams<T> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(in_dim, out_dim),
            bias: vec![T::ZERO; out_dim],
        }
    }

    /// Uniform weights in `±sqrt(1/fan_in)`, zero bias.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = (1.0 / in_dim as f64).sqrt();
        let data = (0..in_dim * out_dim)
            .map(|_| T::from_f64(rng.random_range(-bound..bound)))
            .collect();
        Self {
            weight: Matrix::from_vec(in_dim, out_dim, data).expect("sized above"),
            bias: vec![T::ZERO; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn cast<U: Real>(&self) -> AffineParams<U> {
        AffineParams {
            weight: self.weight.cast(),
            bias: cast_vec(&self.bias),
        }
    }
}

pub(crate) fn cast_vec<T: Real, U: Real>(v: &[T]) -> Vec<U> {
    v.iter().map(|x| U::from_f64(x.to_f64())).collect()
}

/// `y = x·W + b`
pub fn affine<T: Real>(x: &Matrix<T>, p: &AffineParams<T>) -> Result<Matrix<T>> {
    if x.cols() != p.weight.rows() {
        return Err(Error::dim("affine", x.shape_str(), p.weight.shape_str()));
    }
    let mut y = x.matmul(&p.weight)?;
    for i in 0..y.rows() {
        for (v, &b) in y.row_mut(i).iter_mut().zip(&p.bias) {
            *v += b;
        }
    }
    Ok(y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineGrads<T> {
    pub input: Matrix<T>,
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

pub fn affine_backward<T: Real>(
    x: &Matrix<T>,
    p: &AffineParams<T>,
    grad: &Matrix<T>,
) -> Result<AffineGrads<T>> {
    Ok(AffineGrads {
        input: grad.matmul_t(&p.weight)?,
        weight: x.t_matmul(grad)?,
        bias: grad.column_sums(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: vec![T::ONE; dim],
            beta: vec![T::ZERO; dim],
            running_mean: vec![T::ZERO; dim],
            running_var: vec![T::ONE; dim],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn cast<U: Real>(&self) -> BatchNormState<U> {
        BatchNormState {
            gamma: cast_vec(&self.gamma),
            beta: cast_vec(&self.beta),
            running_mean: cast_vec(&self.running_mean),
            running_var: cast_vec(&self.running_var),
            momentum: self.momentum,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    x_hat: Matrix<T>,
    inv_std: Vec<T>,
    /// Batch mean and unbiased batch variance, present in train mode.
    batch_stats: Option<(Vec<T>, Vec<T>)>,
}

impl<T: Real> BatchNormState<T> {
    /// Folds a train-mode batch into the running statistics.
    pub fn update_running(&mut self, cache: &BatchNormCache<T>) {
        if let Some((mean, var)) = &cache.batch_stats {
            let m = T::from_f64(self.momentum);
            let keep = T::ONE - m;
            for j in 0..self.dim() {
                self.running_mean[j] = keep * self.running_mean[j] + m * mean[j];
                self.running_var[j] = keep * self.running_var[j] + m * var[j];
            }
        }
    }
}

/// Batch normalization over rows, updating running statistics in train mode.
///
/// Train mode normalizes with the biased batch variance and folds the
/// unbiased estimate into the running variance. Eval mode reads the running
/// statistics and leaves `s` untouched.
pub fn batch_norm<T: Real>(
    x: &Matrix<T>,
    s: &mut BatchNormState<T>,
    mode: Mode,
) -> Result<(Matrix<T>, BatchNormCache<T>)> {
    let (y, cache) = batch_norm_forward(x, s, mode)?;
    s.update_running(&cache);
    Ok((y, cache))
}

/// [`batch_norm`] without the running-statistics update.
pub fn batch_norm_forward<T: Real>(
    x: &Matrix<T>,
    s: &BatchNormState<T>,
    mode: Mode,
) -> Result<(Matrix<T>, BatchNormCache<T>)> {
    let (rows, d) = x.shape();
    if d != s.dim() {
        return Err(Error::dim("batch_norm", x.shape_str(), format!("{} features", s.dim())));
    }
    let eps = T::from_f64(s.eps);
    let (mean, inv_std, batch_stats) = match mode {
        Mode::Train => {
            if rows < 2 {
                return Err(Error::DegenerateBatch { rows });
            }
            let n = T::from_f64(rows as f64);
            let mean: Vec<T> = x.column_sums().into_iter().map(|c| c / n).collect();
            let mut var = vec![T::ZERO; d];
            for row in x.row_iter() {
                for j in 0..d {
                    let c = row[j] - mean[j];
                    var[j] += c * c;
                }
            }
            for v in &mut var {
                *v = *v / n;
            }
            let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
            let unbias = T::from_f64(rows as f64 / (rows as f64 - 1.0));
            let unbiased = var.iter().map(|&v| v * unbias).collect();
            (mean.clone(), inv_std, Some((mean, unbiased)))
        }
        Mode::Eval => {
            let inv_std = s
                .running_var
                .iter()
                .map(|&v| T::ONE / (v + eps).sqrt())
                .collect();
            (s.running_mean.clone(), inv_std, None)
        }
    };

    let mut x_hat = Matrix::zeros(rows, d);
    let mut y = Matrix::zeros(rows, d);
    for i in 0..rows {
        let xr = x.row(i);
        for j in 0..d {
            let h = (xr[j] - mean[j]) * inv_std[j];
            x_hat[(i, j)] = h;
            y[(i, j)] = s.gamma[j] * h + s.beta[j];
        }
    }
    Ok((
        y,
        BatchNormCache {
            x_hat,
            inv_std,
            batch_stats,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormGrads<T> {
    pub input: Matrix<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub fn batch_norm_backward<T: Real>(
    cache: &BatchNormCache<T>,
    s: &BatchNormState<T>,
    mode: Mode,
    grad: &Matrix<T>,
) -> Result<BatchNormGrads<T>> {
    let (rows, d) = grad.shape();
    if cache.x_hat.shape() != grad.shape() {
        return Err(Error::dim("batch_norm_backward", cache.x_hat.shape_str(), grad.shape_str()));
    }
    let mut dgamma = vec![T::ZERO; d];
    let mut dbeta = vec![T::ZERO; d];
    for i in 0..rows {
        let g = grad.row(i);
        let h = cache.x_hat.row(i);
        for j in 0..d {
            dgamma[j] += g[j] * h[j];
            dbeta[j] += g[j];
        }
    }
    let mut dx = Matrix::zeros(rows, d);
    match mode {
        Mode::Train => {
            // dx = inv_std/n * (n*dxh - sum(dxh) - x_hat*sum(dxh*x_hat)), dxh = g*gamma
            let n = T::from_f64(rows as f64);
            for i in 0..rows {
                let g = grad.row(i);
                let h = cache.x_hat.row(i);
                let out = dx.row_mut(i);
                for j in 0..d {
                    let dxh = g[j] * s.gamma[j];
                    let sum_dxh = dbeta[j] * s.gamma[j];
                    let sum_dxh_h = dgamma[j] * s.gamma[j];
                    out[j] = cache.inv_std[j] / n * (n * dxh - sum_dxh - h[j] * sum_dxh_h);
                }
            }
        }
        Mode::Eval => {
            for i in 0..rows {
                let g = grad.row(i);
                let out = dx.row_mut(i);
                for j in 0..d {
                    out[j] = g[j] * s.gamma[j] * cache.inv_std[j];
                }
            }
        }
    }
    Ok(BatchNormGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    })
}

pub fn relu<T: Real>(x: &Matrix<T>) -> Matrix<T> {
    x.map(|v| if v > T::ZERO { v } else { T::ZERO })
}

/// Passes `grad` where the forward input was strictly positive.
pub fn relu_backward<T: Real>(x: &Matrix<T>, grad: &Matrix<T>) -> Result<Matrix<T>> {
    if x.shape() != grad.shape() {
        return Err(Error::dim("relu_backward", x.shape_str(), grad.shape_str()));
    }
    let data = x
        .as_slice()
        .iter()
        .zip(grad.as_slice())
        .map(|(&v, &g)| if v > T::ZERO { g } else { T::ZERO })
        .collect();
    Matrix::from_vec(x.rows(), x.cols(), data)
}

pub fn check_dropout_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// Scaled keep-mask of inverted dropout: each entry is `0` or `1/(1-rate)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask<T>(Option<Vec<T>>);

impl<T: Real> DropoutMask<T> {
    pub fn identity() -> Self {
        Self(None)
    }

    pub fn apply(&self, x: &Matrix<T>) -> Matrix<T> {
        match &self.0 {
            None => x.clone(),
            Some(mask) => {
                let data = x.as_slice().iter().zip(mask).map(|(&v, &m)| v * m).collect();
                Matrix::from_vec(x.rows(), x.cols(), data).expect("mask sized to input")
            }
        }
    }

    pub fn kept(&self) -> Option<usize> {
        self.0
            .as_ref()
            .map(|m| m.iter().filter(|&&v| v != T::ZERO).count())
    }
}

pub fn dropout<T: Real>(
    x: &Matrix<T>,
    rate: f64,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<(Matrix<T>, DropoutMask<T>)> {
    check_dropout_rate(rate)?;
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((x.clone(), DropoutMask::identity()));
    }
    let scale = T::from_f64(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..x.as_slice().len())
        .map(|_| {
            if rng.random::<f64>() < rate {
                T::ZERO
            } else {
                scale
            }
        })
        .collect();
    let mask = DropoutMask(Some(mask));
    Ok((mask.apply(x), mask))
}

/// Linear → BatchNorm → ReLU → Dropout.
#[derive(Debug, Clone, PartialEq)]
pub struct FFBlockParams<T = f32> {
    pub affine: AffineParams<T>,
    pub bn: BatchNormState<T>,
    pub dropout_rate: f64,
}

impl<T: Real> FFBlockParams<T> {
    pub fn init(in_dim: usize, out_dim: usize, dropout_rate: f64, rng: &mut impl Rng) -> Self {
        Self {
            affine: AffineParams::init(in_dim, out_dim, rng),
            bn: BatchNormState::new(out_dim),
            dropout_rate,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.affine.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.affine.out_dim()
    }

    /// Learnable scalars: weight, bias, gamma, beta.
    pub fn learnable_count(&self) -> usize {
        self.affine.weight.as_slice().len() + self.affine.bias.len() + 2 * self.bn.dim()
    }

    pub fn cast<U: Real>(&self) -> FFBlockParams<U> {
        FFBlockParams {
            affine: self.affine.cast(),
            bn: self.bn.cast(),
            dropout_rate: self.dropout_rate,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FFBlockCache<T> {
    input: Matrix<T>,
    bn: BatchNormCache<T>,
    pre_relu: Matrix<T>,
    mask: DropoutMask<T>,
    mode: Mode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrads<T = f32> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Real> BlockGrads<T> {
    pub fn zeros_like(p: &FFBlockParams<T>) -> Self {
        Self {
            weight: Matrix::zeros(p.in_dim(), p.out_dim()),
            bias: vec![T::ZERO; p.out_dim()],
            gamma: vec![T::ZERO; p.out_dim()],
            beta: vec![T::ZERO; p.out_dim()],
        }
    }

    pub fn accumulate(&mut self, other: &Self) -> Result<()> {
        self.weight.add_assign(&other.weight)?;
        for (dst, src) in [
            (&mut self.bias, &other.bias),
            (&mut self.gamma, &other.gamma),
            (&mut self.beta, &other.beta),
        ] {
            for (a, &b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        }
        Ok(())
    }
}

/// Runs the block and, in train mode, updates its batch-norm running statistics.
pub fn ff_block<T: Real>(
    x: &Matrix<T>,
    p: &mut FFBlockParams<T>,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<(Matrix<T>, FFBlockCache<T>)> {
    let (y, cache) = ff_block_forward(x, p, mode, rng)?;
    p.bn.update_running(&cache.bn);
    Ok((y, cache))
}

/// [`ff_block`] without the running-statistics update.
pub fn ff_block_forward<T: Real>(
    x: &Matrix<T>,
    p: &FFBlockParams<T>,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<(Matrix<T>, FFBlockCache<T>)> {
    let z = affine(x, &p.affine)?;
    let (pre_relu, bn) = batch_norm_forward(&z, &p.bn, mode)?;
    let act = relu(&pre_relu);
    let (out, mask) = dropout(&act, p.dropout_rate, mode, rng)?;
    Ok((
        out,
        FFBlockCache {
            input: x.clone(),
            bn,
            pre_relu,
            mask,
            mode,
        },
    ))
}

impl<T> FFBlockCache<T> {
    pub fn bn(&self) -> &BatchNormCache<T> {
        &self.bn
    }
}

/// Returns the gradient w.r.t. the block input plus the parameter gradients.
pub fn ff_block_backward<T: Real>(
    cache: &FFBlockCache<T>,
    p: &FFBlockParams<T>,
    grad: &Matrix<T>,
) -> Result<(Matrix<T>, BlockGrads<T>)> {
    let g = cache.mask.apply(grad);
    let g = relu_backward(&cache.pre_relu, &g)?;
    let bn = batch_norm_backward(&cache.bn, &p.bn, cache.mode, &g)?;
    let aff = affine_backward(&cache.input, &p.affine, &bn.input)?;
    Ok((
        aff.input,
        BlockGrads {
            weight: aff.weight,
            bias: aff.bias,
            gamma: bn.gamma,
            beta: bn.beta,
        },
    ))
}
