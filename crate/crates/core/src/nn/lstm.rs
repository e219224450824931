//! LSTM cells and bidirectional runs on the tape.
//!
//! Gate layout in the `4H` pre-activation is `[input, forget, cell, output]`.

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const FORGET_BIAS_INIT: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmParams {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub input_size: usize,
    pub hidden_size: usize,
}

impl LstmParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input_size: usize,
        hidden_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let h = hidden_size;
        let w_input = store.init_weight(format!("{prefix}.w_input"), input_size, 4 * h, rng)?;
        let w_hidden = store.init_weight(format!("{prefix}.w_hidden"), h, 4 * h, rng)?;
        let mut b = Tensor::zeros(1, 4 * h);
        b.data_mut()[h..2 * h].iter_mut().for_each(|x| *x = FORGET_BIAS_INIT);
        let bias = store.insert(format!("{prefix}.bias"), b)?;
        Ok(LstmParams {
            w_input,
            w_hidden,
            bias,
            input_size,
            hidden_size,
        })
    }

    pub fn bind(&self, tape: &mut Tape<'_>) -> LstmVars {
        LstmVars {
            w_input: tape.param(self.w_input),
            w_hidden: tape.param(self.w_hidden),
            bias: tape.param(self.bias),
            hidden_size: self.hidden_size,
        }
    }
}

/// Parameters of one LSTM loaded onto a tape.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_input: Var,
    pub w_hidden: Var,
    pub bias: Var,
    pub hidden_size: usize,
}

/// One step: `x` is `B × in`, `h` and `c` are `B × H`.
pub fn lstm_step(tape: &mut Tape<'_>, x: Var, h: Var, c: Var, p: &LstmVars) -> Result<(Var, Var)> {
    let xw = tape.matmul(x, p.w_input)?;
    let xw = tape.add_row(xw, p.bias)?;
    step_from_preactivation(tape, xw, h, c, p)
}

/// One step given `x·W_input + bias` already computed.
pub fn step_from_preactivation(
    tape: &mut Tape<'_>,
    xw: Var,
    h: Var,
    c: Var,
    p: &LstmVars,
) -> Result<(Var, Var)> {
    let n = p.hidden_size;
    let hw = tape.matmul(h, p.w_hidden)?;
    let z = tape.add(xw, hw)?;
    let i = tape.slice_cols(z, 0, n)?;
    let f = tape.slice_cols(z, n, 2 * n)?;
    let g = tape.slice_cols(z, 2 * n, 3 * n)?;
    let o = tape.slice_cols(z, 3 * n, 4 * n)?;
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let tc = tape.tanh(c_next);
    let h_next = tape.mul(o, tc)?;
    Ok((h_next, c_next))
}

/// Runs one direction over `steps` (each `B × in`), returning hidden states in
/// the original time order. Where `masks[t]` is 0 a row keeps its previous
/// state, which is how padded batch entries are skipped.
pub fn run_direction(
    tape: &mut Tape<'_>,
    steps: &[Var],
    masks: Option<&[Tensor]>,
    p: &LstmVars,
    reverse: bool,
) -> Result<Vec<Var>> {
    let Some(first) = steps.first() else {
        return Ok(Vec::new());
    };
    let batch = tape.value(*first).rows();
    let mut h = tape.constant(Tensor::zeros(batch, p.hidden_size));
    let mut c = tape.constant(Tensor::zeros(batch, p.hidden_size));
    let mut out = vec![h; steps.len()];
    let order: Vec<usize> = if reverse {
        (0..steps.len()).rev().collect()
    } else {
        (0..steps.len()).collect()
    };
    for t in order {
        let (h_new, c_new) = lstm_step(tape, steps[t], h, c, p)?;
        match masks {
            Some(m) => {
                h = tape.blend(h_new, h, &m[t])?;
                c = tape.blend(c_new, c, &m[t])?;
            }
            None => {
                h = h_new;
                c = c_new;
            }
        }
        out[t] = h;
    }
    Ok(out)
}

/// Bidirectional LSTM over a single sequence `x` (`L × in`, one row per
/// position). Returns `L × 2H`, forward states then backward states per row.
pub fn bilstm(tape: &mut Tape<'_>, x: Var, fw: &LstmVars, bw: &LstmVars) -> Result<Var> {
    let len = tape.value(x).rows();
    let fw_states = run_sequence(tape, x, fw, false)?;
    let bw_states = run_sequence(tape, x, bw, true)?;
    debug_assert_eq!(fw_states.len(), len);
    let f = tape.concat_rows(&fw_states)?;
    let b = tape.concat_rows(&bw_states)?;
    tape.concat_cols(&[f, b])
}

/// Final states of both directions of a single sequence, `1 × 2H`
/// (forward after the last row, backward after the first row).
pub fn bilstm_final(tape: &mut Tape<'_>, x: Var, fw: &LstmVars, bw: &LstmVars) -> Result<Var> {
    let fw_states = run_sequence(tape, x, fw, false)?;
    let bw_states = run_sequence(tape, x, bw, true)?;
    let last = *fw_states.last().expect("non-empty sequence");
    tape.concat_cols(&[last, bw_states[0]])
}

fn run_sequence(tape: &mut Tape<'_>, x: Var, p: &LstmVars, reverse: bool) -> Result<Vec<Var>> {
    let len = tape.value(x).rows();
    let xw = tape.matmul(x, p.w_input)?;
    let xw = tape.add_row(xw, p.bias)?;
    let mut h = tape.constant(Tensor::zeros(1, p.hidden_size));
    let mut c = tape.constant(Tensor::zeros(1, p.hidden_size));
    let mut out = vec![h; len];
    let order: Vec<usize> = if reverse {
        (0..len).rev().collect()
    } else {
        (0..len).collect()
    };
    for t in order {
        let row = tape.row(xw, t)?;
        (h, c) = step_from_preactivation(tape, row, h, c, p)?;
        out[t] = h;
    }
    Ok(out)
}
