//! Standard LSTM cell: sigmoid input/forget/output gates, tanh candidate.
//!
//! Weights are stored input-major (`[in, 4H]` / `[H, 4H]`) so a step is two
//! row-vector matmuls. Gate order along the 4H axis: input, forget,
//! candidate, output.

use rand::Rng;

use crate::error::Result;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{Tape, TensorRef};

#[derive(Debug, Clone)]
pub struct LstmCellParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmCellParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let w_ih = store.register_init(
            format!("{prefix}.w_ih"),
            &[input_dim, 4 * hidden_dim],
            input_dim,
            rng,
        );
        let w_hh = store.register_init(
            format!("{prefix}.w_hh"),
            &[hidden_dim, 4 * hidden_dim],
            hidden_dim,
            rng,
        );
        let b = store.register_zeros(format!("{prefix}.b"), &[1, 4 * hidden_dim]);
        LstmCellParams {
            w_ih,
            w_hh,
            b,
            input_dim,
            hidden_dim,
        }
    }
}

/// Hidden and cell state, both `1×H`.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: TensorRef,
    pub c: TensorRef,
}

impl LstmState {
    pub fn zeros(tape: &mut Tape, hidden_dim: usize) -> Self {
        LstmState {
            h: tape.zeros(&[1, hidden_dim]),
            c: tape.zeros(&[1, hidden_dim]),
        }
    }
}

/// One recurrence step: returns the next state.
pub fn lstm_step(
    tape: &mut Tape,
    bound: &Bound,
    p: &LstmCellParams,
    x: TensorRef,
    state: LstmState,
) -> Result<LstmState> {
    let h_dim = p.hidden_dim;
    let xw = tape.matmul(x, bound.get(p.w_ih))?;
    let hw = tape.matmul(state.h, bound.get(p.w_hh))?;
    let pre = tape.add(xw, hw)?;
    let gates = tape.add(pre, bound.get(p.b))?;

    let i_pre = tape.narrow_cols(gates, 0, h_dim)?;
    let f_pre = tape.narrow_cols(gates, h_dim, h_dim)?;
    let g_pre = tape.narrow_cols(gates, 2 * h_dim, h_dim)?;
    let o_pre = tape.narrow_cols(gates, 3 * h_dim, h_dim)?;

    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let g = tape.tanh(g_pre);
    let o = tape.sigmoid(o_pre);

    let keep = tape.mul(f, state.c)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let c_act = tape.tanh(c);
    let h = tape.mul(o, c_act)?;
    Ok(LstmState { h, c })
}
