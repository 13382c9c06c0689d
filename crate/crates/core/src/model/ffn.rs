//! SwiGLU feed-forward block: `(silu(x·W_gate) ⊙ (x·W_up)) · W_down`.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct SwiGluParams {
    pub gate: Tensor,
    pub up: Tensor,
    pub down: Tensor,
}

/// The same block after registration on a tape.
#[derive(Debug, Clone, Copy)]
pub struct SwiGluVars {
    pub gate: Var,
    pub up: Var,
    pub down: Var,
}

impl SwiGluParams {
    pub fn init<R: Rng + ?Sized>(d_model: usize, hidden: usize, std: f64, rng: &mut R) -> Self {
        Self {
            gate: Tensor::randn(&[d_model, hidden], std, rng),
            up: Tensor::randn(&[d_model, hidden], std, rng),
            down: Tensor::randn(&[hidden, d_model], std, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.gate.cols()
    }

    pub fn register(&self, tape: &mut Tape) -> SwiGluVars {
        SwiGluVars {
            gate: tape.param(self.gate.clone()),
            up: tape.param(self.up.clone()),
            down: tape.param(self.down.clone()),
        }
    }
}

pub fn swiglu(tape: &mut Tape, x: Var, p: &SwiGluVars) -> Result<Var> {
    let g = tape.matmul(x, p.gate)?;
    let g = tape.silu(g);
    let u = tape.matmul(x, p.up)?;
    let h = tape.mul(g, u)?;
    tape.matmul(h, p.down)
}
