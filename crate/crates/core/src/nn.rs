//! Shared building blocks: gated recurrent cells, dropout, model dimensions.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Parameter initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Every entry uniform in `(-0.1, 0.1)`.
    #[default]
    Uniform,
    /// Uniform in `±sqrt(6 / (rows + cols))`, biases zero. About 0.1 at
    /// the default widths; keeps signal alive through narrow layers.
    Glorot,
}

pub const UNIFORM_SCALE: f64 = 0.1;

impl Init {
    pub fn scale(self, rows: usize, cols: usize) -> f64 {
        match self {
            Init::Uniform => UNIFORM_SCALE,
            Init::Glorot => (6.0 / (rows + cols).max(1) as f64).sqrt(),
        }
    }
}

/// Layer sizes and initialization. Defaults follow the reference configuration
/// (128-d embeddings, 256-d recurrent states, 196 x 1024 grids).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub embed: usize,
    /// Per-direction encoder state size `d`; encoder states are `2d` wide.
    pub hidden: usize,
    pub decoder_hidden: usize,
    /// `D_v`
    pub visual_dim: usize,
    /// `L`
    pub grid_rows: usize,
    /// `d_k` of the grid fusion attention.
    pub key_dim: usize,
    /// `d_a` of the region scorer.
    pub region_dim: usize,
    /// Hidden size of the decoder's additive attentions.
    pub attention_dim: usize,
    /// Width of the pre-logit layer.
    pub readout: usize,
    pub init: Init,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            src_vocab: 0,
            tgt_vocab: 0,
            embed: 128,
            hidden: 256,
            decoder_hidden: 256,
            visual_dim: 1024,
            grid_rows: 196,
            key_dim: 256,
            region_dim: 256,
            attention_dim: 256,
            readout: 128,
            init: Init::Uniform,
        }
    }
}

impl ModelDims {
    /// Width of encoder states, `2d`.
    pub fn ctx(&self) -> usize {
        2 * self.hidden
    }

    /// Small sizes used by tests and gradient checks.
    pub fn tiny(src_vocab: usize, tgt_vocab: usize) -> Self {
        Self {
            src_vocab,
            tgt_vocab,
            embed: 3,
            hidden: 2,
            decoder_hidden: 3,
            visual_dim: 4,
            grid_rows: 3,
            key_dim: 3,
            region_dim: 3,
            attention_dim: 3,
            readout: 3,
            init: Init::Uniform,
        }
    }
}

/// Gated recurrent unit:
///
/// ```text
/// z  = sigmoid(W_z x + U_z h + b_z)
/// r  = sigmoid(W_r x + U_r h + b_r)
/// h~ = tanh(W_h x + U_h (r * h) + b_h)
/// h' = (1 - z) * h + z * h~
/// ```
#[derive(Debug, Clone, Copy)]
pub struct GruCell {
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_h: ParamId,
    pub u_h: ParamId,
    pub b_h: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let mut w = |name: &str, rows, cols| {
            let full = format!("{prefix}.{name}");
            if name.starts_with("b_") && init == Init::Glorot {
                params.add(full, Matrix::zeros(rows, cols))
            } else {
                params.add_init(full, rows, cols, init, rng)
            }
        };
        Self {
            w_z: w("w_z", hidden, input),
            u_z: w("u_z", hidden, hidden),
            b_z: w("b_z", 1, hidden),
            w_r: w("w_r", hidden, input),
            u_r: w("u_r", hidden, hidden),
            b_r: w("b_r", 1, hidden),
            w_h: w("w_h", hidden, input),
            u_h: w("u_h", hidden, hidden),
            b_h: w("b_h", 1, hidden),
            input,
            hidden,
        }
    }

    fn gate<T: Scalar>(tape: &mut Tape<T>, x: Var, h: Var, w: ParamId, u: ParamId, b: ParamId) -> Result<Var> {
        let wx = tape.linear(x, w.var())?;
        let uh = tape.linear(h, u.var())?;
        let s = tape.add(wx, uh)?;
        tape.add_row(s, b.var())
    }

    /// One step on `1 x input` / `1 x hidden` rows.
    pub fn step<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, h: Var) -> Result<Var> {
        let z_pre = Self::gate(tape, x, h, self.w_z, self.u_z, self.b_z)?;
        let z = tape.sigmoid(z_pre);
        let r_pre = Self::gate(tape, x, h, self.w_r, self.u_r, self.b_r)?;
        let r = tape.sigmoid(r_pre);
        let rh = tape.mul(r, h)?;
        let cand_pre = Self::gate(tape, x, rh, self.w_h, self.u_h, self.b_h)?;
        let cand = tape.tanh(cand_pre);
        let keep = tape.one_minus(z);
        let old = tape.mul(keep, h)?;
        let new = tape.mul(z, cand)?;
        tape.add(old, new)
    }
}

/// Inverted dropout driven by a dedicated RNG stream.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub rate: f64,
    pub rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, rng: ChaCha8Rng) -> Self {
        Self { rate, rng }
    }

    /// Scaled Bernoulli keep-mask of the given shape.
    pub fn mask<T: Scalar>(&mut self, rows: usize, cols: usize) -> Matrix<T> {
        let keep = 1.0 - self.rate;
        let scale = T::of(1.0 / keep);
        Matrix::from_fn(rows, cols, |_, _| {
            if self.rng.gen::<f64>() < keep {
                scale
            } else {
                T::zero()
            }
        })
    }

    pub fn apply<T: Scalar>(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        if self.rate == 0.0 {
            return Ok(x);
        }
        let (r, c) = tape.shape(x);
        let m = self.mask(r, c);
        tape.mul_const(x, m)
    }
}

/// Applies dropout when a training stream is present.
pub fn maybe_dropout<T: Scalar>(
    dropout: &mut Option<&mut Dropout>,
    tape: &mut Tape<T>,
    x: Var,
) -> Result<Var> {
    match dropout {
        Some(d) => d.apply(tape, x),
        None => Ok(x),
    }
}
