//! Differentiable building blocks over batched N×C×H×W activations.
//!
//! Each function takes the block's parameter handles already registered on
//! the tape; ownership and naming of the tensors lives in [`crate::model`].

use alloc::format;

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::spec::{Activation, SaNorm, QKV_DIM};
use crate::tape::{Tape, Var};

fn activate<T: Scalar>(tape: &mut Tape<T>, x: Var, act: Activation) -> Result<Var> {
    match act {
        Activation::Relu => tape.relu(x),
        Activation::Identity => Ok(x),
    }
}

fn dims4<T: Scalar>(tape: &Tape<T>, x: Var, op: &'static str) -> Result<[usize; 4]> {
    match *tape.shape(x) {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => Err(shape_err(op, format!("expected N×C×H×W, got {s:?}"))),
    }
}

/// 5×5 conv → activation → 2×2/2 max pool.
pub fn alpha<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var, act: Activation) -> Result<Var> {
    if tape.shape(w).get(2) != Some(&5) {
        return Err(shape_err("alpha", format!("kernel must be 5×5, got {:?}", tape.shape(w))));
    }
    let y = tape.conv2d(x, w, b)?;
    let y = activate(tape, y, act)?;
    tape.maxpool2d(y)
}

/// k×k conv → activation.
pub fn beta<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var, act: Activation) -> Result<Var> {
    let k = tape.shape(w).get(2).copied().unwrap_or(0);
    if k % 2 == 0 {
        return Err(shape_err("beta", format!("kernel size {k} is even")));
    }
    let y = tape.conv2d(x, w, b)?;
    activate(tape, y, act)
}

/// Parameter handles of an attention block. `value`/`output` are present
/// iff the block transforms its values.
#[derive(Debug, Clone, Copy)]
pub struct SaParams {
    pub query: (Var, Var),
    pub key: (Var, Var),
    pub value: Option<(Var, Var)>,
    pub output: Option<(Var, Var)>,
    pub affine: Option<(Var, Var)>,
}

#[derive(Debug, Clone, Copy)]
pub struct SaOutput {
    /// N×C×H×W.
    pub y: Var,
    /// N×T×T with T = H·W; row i holds the weights token i puts on every
    /// token.
    pub attention: Var,
    /// Attended tokens before residual and normalization, N×T×C.
    pub pre_norm: Var,
}

/// Single-head scaled dot-product attention over the H·W positions.
pub fn self_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    p: &SaParams,
    norm: SaNorm,
    residual: bool,
) -> Result<SaOutput> {
    let [n, c, h, w] = dims4(tape, x, "self_attention")?;
    let t = h * w;
    let flat = tape.reshape(x, &[n, c, t])?;
    let tokens = tape.swap_last2(flat)?;
    let q = tape.linear(tokens, p.query.0, p.query.1)?;
    let k = tape.linear(tokens, p.key.0, p.key.1)?;
    let scores = tape.bmm(q, k, true)?;
    let scale = T::one() / T::from_usize(QKV_DIM).unwrap().sqrt();
    let scores = tape.scale(scores, scale)?;
    let attention = tape.softmax_rows(scores)?;
    let attended = match (p.value, p.output) {
        (Some(v), Some(o)) => {
            let v = tape.linear(tokens, v.0, v.1)?;
            let z = tape.bmm(attention, v, false)?;
            tape.linear(z, o.0, o.1)?
        }
        (None, None) => tape.bmm(attention, tokens, false)?,
        _ => return Err(shape_err("self_attention", "value and output maps come as a pair")),
    };
    let mut y = attended;
    if residual {
        y = tape.add(y, tokens)?;
    }
    match norm {
        SaNorm::None => {}
        SaNorm::Channel | SaNorm::ChannelAffine => {
            y = tape.row_norm(y)?;
            if let Some((g, b)) = p.affine {
                y = tape.row_affine(y, g, b)?;
            }
        }
    }
    let y = tape.swap_last2(y)?;
    let y = tape.reshape(y, &[n, c, h, w])?;
    Ok(SaOutput {
        y,
        attention,
        pre_norm: attended,
    })
}

/// Linear map over every activation: N×C×H×W → N.
pub fn fcl<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let [n, c, h, wd] = dims4(tape, x, "fcl")?;
    let flat = tape.reshape(x, &[n, c * h * wd])?;
    let y = tape.linear(flat, w, b)?;
    tape.reshape(y, &[n])
}

/// Linear map over the center hypercolumn (⌊H/2⌋, ⌊W/2⌋): N×C×H×W → N.
pub fn ctl<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let [n, _, h, wd] = dims4(tape, x, "ctl")?;
    if h % 2 == 0 || wd % 2 == 0 {
        return Err(shape_err("ctl", format!("center undefined on {h}×{wd}")));
    }
    let center = tape.pick_spatial(x, h / 2, wd / 2)?;
    let y = tape.linear(center, w, b)?;
    tape.reshape(y, &[n])
}
