//! Position-wise feed-forward sub-layer and the residual add-norm wrapper.
//!
//! The factorized form replaces `W1` (`d×d_f`) with `W1a·W1b` (`d×d_r`, `d_r×d_f`)
//! and `W2` (`d_f×d`) with `W2a·W2b` (`d_f×d_r`, `d_r×d`). Its forward pass is
//! evaluated left to right, so no `d×d_f` product is formed.

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::{self, matmul, Scalar, Tensor};

/// Epsilon inside every layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub enum FfnParams<T = f32> {
    Standard {
        w1: Tensor<T>,
        b1: Tensor<T>,
        w2: Tensor<T>,
        b2: Tensor<T>,
    },
    Factorized {
        w1a: Tensor<T>,
        w1b: Tensor<T>,
        w2a: Tensor<T>,
        w2b: Tensor<T>,
        b1: Tensor<T>,
        b2: Tensor<T>,
    },
}

impl<T: Scalar> FfnParams<T> {
    pub fn init_standard(d: usize, d_f: usize, std: f64, rng: &mut Rng) -> Self {
        let mut w = |r, c| Tensor::from_fn(&[r, c], |_| T::lit(rng.truncated_normal(std)));
        FfnParams::Standard {
            w1: w(d, d_f),
            w2: w(d_f, d),
            b1: Tensor::zeros(&[d_f]),
            b2: Tensor::zeros(&[d]),
        }
    }

    pub fn init_factorized(d: usize, d_f: usize, d_r: usize, std: f64, rng: &mut Rng) -> Self {
        let mut w = |r, c| Tensor::from_fn(&[r, c], |_| T::lit(rng.truncated_normal(std)));
        FfnParams::Factorized {
            w1a: w(d, d_r),
            w1b: w(d_r, d_f),
            w2a: w(d_f, d_r),
            w2b: w(d_r, d),
            b1: Tensor::zeros(&[d_f]),
            b2: Tensor::zeros(&[d]),
        }
    }

    pub fn is_factorized(&self) -> bool {
        matches!(self, FfnParams::Factorized { .. })
    }

    /// `(d, d_f)`.
    pub fn dims(&self) -> (usize, usize) {
        match self {
            FfnParams::Standard { w1, .. } => (w1.shape()[0], w1.shape()[1]),
            FfnParams::Factorized { w1a, w1b, .. } => (w1a.shape()[0], w1b.shape()[1]),
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Weights and biases in storage order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        match self {
            FfnParams::Standard { w1, b1, w2, b2 } => vec![w1, b1, w2, b2],
            FfnParams::Factorized {
                w1a,
                w1b,
                w2a,
                w2b,
                b1,
                b2,
            } => vec![w1a, w1b, w2a, w2b, b1, b2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (d, d_f) = self.dims();
        let expect: Vec<Vec<usize>> = match self {
            FfnParams::Standard { .. } => vec![vec![d, d_f], vec![d_f], vec![d_f, d], vec![d]],
            FfnParams::Factorized { w1a, .. } => {
                let r = w1a.shape()[1];
                vec![vec![d, r], vec![r, d_f], vec![d_f, r], vec![r, d], vec![d_f], vec![d]]
            }
        };
        for (t, e) in self.tensors().into_iter().zip(&expect) {
            if t.shape() != e.as_slice() {
                return shape_err("ffn params", t.shape(), e);
            }
            if !t.all_finite() {
                return Err(Error::Input("non-finite ffn weight".into()));
            }
        }
        Ok(())
    }

    /// Multiplies the factor pairs back into full `W1` and `W2`; biases are copied.
    pub fn recover(&self) -> Result<Self> {
        match self {
            FfnParams::Standard { .. } => Err(Error::Contract("ffn is already in standard form".into())),
            FfnParams::Factorized {
                w1a,
                w1b,
                w2a,
                w2b,
                b1,
                b2,
            } => Ok(FfnParams::Standard {
                w1: matmul(w1a, w1b)?,
                b1: b1.clone(),
                w2: matmul(w2a, w2b)?,
                b2: b2.clone(),
            }),
        }
    }
}

/// Parameter count of a standard FFN: `2·d·d_f + d_f + d`.
pub fn standard_param_count(d: usize, d_f: usize) -> usize {
    2 * d * d_f + d_f + d
}

/// Parameter count of a factorized FFN: `d_r·(2d + 2d_f) + d_f + d`.
pub fn factorized_param_count(d: usize, d_f: usize, d_r: usize) -> usize {
    d_r * (2 * d + 2 * d_f) + d_f + d
}

/// `relu(x·W1 + b1)·W2 + b2`, or the factorized equivalent.
pub fn ffn_forward<T: Scalar>(x: &Tensor<T>, p: &FfnParams<T>) -> Result<Tensor<T>> {
    let (d, _) = p.dims();
    if x.rank() != 2 || x.cols() != d {
        return shape_err("ffn_forward", x.shape(), &[d]);
    }
    match p {
        FfnParams::Standard { w1, b1, w2, b2 } => {
            let h = tensor::relu(&tensor::add_row_bias(&matmul(x, w1)?, b1)?);
            tensor::add_row_bias(&matmul(&h, w2)?, b2)
        }
        FfnParams::Factorized {
            w1a,
            w1b,
            w2a,
            w2b,
            b1,
            b2,
        } => {
            let h = tensor::add_row_bias(&matmul(&matmul(x, w1a)?, w1b)?, b1)?;
            let h = tensor::relu(&h);
            tensor::add_row_bias(&matmul(&matmul(&h, w2a)?, w2b)?, b2)
        }
    }
}

/// `LayerNorm(x + sublayer_out)`.
pub fn add_norm<T: Scalar>(
    x: &Tensor<T>,
    sublayer_out: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<Tensor<T>> {
    tensor::layer_norm(&tensor::add(x, sublayer_out)?, gamma, beta, T::lit(LAYER_NORM_EPS))
}

/// Tape handles for an FFN's parameters, mirroring [`FfnParams`].
#[derive(Clone, Debug)]
pub enum FfnVars {
    Standard {
        w1: Var,
        b1: Var,
        w2: Var,
        b2: Var,
    },
    Factorized {
        w1a: Var,
        w1b: Var,
        w2a: Var,
        w2b: Var,
        b1: Var,
        b2: Var,
    },
}

pub fn ffn_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &FfnVars) -> Result<Var> {
    match *p {
        FfnVars::Standard { w1, b1, w2, b2 } => {
            let h = tape.matmul(x, w1)?;
            let h = tape.add_row_bias(h, b1)?;
            let h = tape.relu(h);
            let o = tape.matmul(h, w2)?;
            tape.add_row_bias(o, b2)
        }
        FfnVars::Factorized {
            w1a,
            w1b,
            w2a,
            w2b,
            b1,
            b2,
        } => {
            let h = tape.matmul(x, w1a)?;
            let h = tape.matmul(h, w1b)?;
            let h = tape.add_row_bias(h, b1)?;
            let h = tape.relu(h);
            let o = tape.matmul(h, w2a)?;
            let o = tape.matmul(o, w2b)?;
            tape.add_row_bias(o, b2)
        }
    }
}

pub fn add_norm_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, sub: Var, gamma: Var, beta: Var) -> Result<Var> {
    let s = tape.add(x, sub)?;
    tape.layer_norm(s, gamma, beta, T::lit(LAYER_NORM_EPS))
}
