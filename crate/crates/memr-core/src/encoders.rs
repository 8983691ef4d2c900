//! The two parallel encoders.
//!
//! Encoder 1 is a stack of bidirectional LSTM layers at full temporal
//! resolution: T input frames give exactly T output rows. Encoder 2 runs a
//! small convolutional front end (two blocks of two 3×3 convolutions and a
//! 2×2 max-pool, 64 then 128 channels) before one bidirectional layer, so
//! its output has ⌈T/4⌉ rows. Both produce width-H rows so the decoder can
//! fuse them.
//!
//! Each direction of a bidirectional layer is an independent unidirectional
//! pass; per step the two hidden states are concatenated and projected back
//! to width H.

use rand::Rng;

use crate::error::{Error, Result};
use crate::lstm::{lstm_step, LstmCellParams, LstmState};
use crate::params::{linear, Bound, LinearParams, ParamId, ParamStore};
use crate::tape::{Tape, TensorRef};

/// Which encoder streams are active. `Enc1Only`/`Enc2Only` bypass the other
/// stream entirely (its CTC head included), reducing the system to a plain
/// single-encoder joint CTC/attention model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamMode {
    Both,
    Enc1Only,
    Enc2Only,
}

impl StreamMode {
    pub fn uses_enc1(&self) -> bool {
        matches!(self, StreamMode::Both | StreamMode::Enc1Only)
    }

    pub fn uses_enc2(&self) -> bool {
        matches!(self, StreamMode::Both | StreamMode::Enc2Only)
    }
}

/// Hidden-vector matrices per active stream: `h1` is `T×H`, `h2` is
/// `⌈T/4⌉×H`.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutputs {
    pub h1: Option<TensorRef>,
    pub h2: Option<TensorRef>,
}

#[derive(Debug, Clone)]
pub struct BlstmLayerParams {
    pub fwd: LstmCellParams,
    pub bwd: LstmCellParams,
    pub proj: LinearParams,
}

impl BlstmLayerParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        BlstmLayerParams {
            fwd: LstmCellParams::init(store, &format!("{prefix}.fwd"), input_dim, hidden_dim, rng),
            bwd: LstmCellParams::init(store, &format!("{prefix}.bwd"), input_dim, hidden_dim, rng),
            proj: LinearParams::init(
                store,
                &format!("{prefix}.proj"),
                2 * hidden_dim,
                hidden_dim,
                rng,
            ),
        }
    }
}

/// One bidirectional layer over a `T×in` matrix, output `T×H`.
pub fn blstm_layer_forward(
    tape: &mut Tape,
    bound: &Bound,
    p: &BlstmLayerParams,
    x: TensorRef,
) -> Result<TensorRef> {
    let t_len = tape.shape(x)[0];
    let hidden = p.fwd.hidden_dim;

    let mut fwd_states = Vec::with_capacity(t_len);
    let mut state = LstmState::zeros(tape, hidden);
    for t in 0..t_len {
        let x_t = tape.row(x, t)?;
        state = lstm_step(tape, bound, &p.fwd, x_t, state)?;
        fwd_states.push(state.h);
    }

    let mut bwd_states = vec![state.h; t_len];
    let mut state = LstmState::zeros(tape, hidden);
    for t in (0..t_len).rev() {
        let x_t = tape.row(x, t)?;
        state = lstm_step(tape, bound, &p.bwd, x_t, state)?;
        bwd_states[t] = state.h;
    }

    let mut rows = Vec::with_capacity(t_len);
    for t in 0..t_len {
        rows.push(tape.concat_cols(fwd_states[t], bwd_states[t])?);
    }
    let stacked = tape.stack_rows(&rows)?;
    linear(tape, bound, &p.proj, stacked)
}

/// Full-resolution recurrent encoder.
#[derive(Debug, Clone)]
pub struct BlstmParams {
    pub layers: Vec<BlstmLayerParams>,
}

impl BlstmParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        n_layers: usize,
        rng: &mut R,
    ) -> Self {
        let layers = (0..n_layers)
            .map(|l| {
                let in_dim = if l == 0 { input_dim } else { hidden_dim };
                BlstmLayerParams::init(store, &format!("{prefix}.l{l}"), in_dim, hidden_dim, rng)
            })
            .collect();
        BlstmParams { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fwd.input_dim
    }
}

/// T input frames → exactly T output rows.
pub fn blstm_forward(
    tape: &mut Tape,
    bound: &Bound,
    p: &BlstmParams,
    x: TensorRef,
) -> Result<TensorRef> {
    let shape = tape.shape(x);
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::Contract("blstm_forward: empty input".into()));
    }
    if shape[1] != p.input_dim() {
        return Err(Error::ShapeMismatch {
            op: "blstm_forward",
            lhs: shape.to_vec(),
            rhs: vec![0, p.input_dim()],
        });
    }
    let mut h = x;
    for layer in &p.layers {
        h = blstm_layer_forward(tape, bound, layer, h)?;
    }
    Ok(h)
}

#[derive(Debug, Clone)]
pub struct ConvParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl ConvParams {
    fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.register_init(
            format!("{prefix}.w"),
            &[c_out, c_in, 3, 3],
            9 * c_in,
            rng,
        );
        let b = store.register_zeros(format!("{prefix}.b"), &[c_out]);
        ConvParams { w, b }
    }
}

pub const VGG_CHANNELS_1: usize = 64;
pub const VGG_CHANNELS_2: usize = 128;

/// Feature width after the two pooling stages.
pub fn vgg_pooled_feat_dim(feat_dim: usize) -> usize {
    feat_dim.div_ceil(2).div_ceil(2)
}

/// Quarter-resolution convolutional-recurrent encoder.
#[derive(Debug, Clone)]
pub struct VggBlstmParams {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
    pub conv3: ConvParams,
    pub conv4: ConvParams,
    pub blstm: BlstmLayerParams,
}

impl VggBlstmParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        feat_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let conv1 = ConvParams::init(store, &format!("{prefix}.conv1"), 1, VGG_CHANNELS_1, rng);
        let conv2 = ConvParams::init(
            store,
            &format!("{prefix}.conv2"),
            VGG_CHANNELS_1,
            VGG_CHANNELS_1,
            rng,
        );
        let conv3 = ConvParams::init(
            store,
            &format!("{prefix}.conv3"),
            VGG_CHANNELS_1,
            VGG_CHANNELS_2,
            rng,
        );
        let conv4 = ConvParams::init(
            store,
            &format!("{prefix}.conv4"),
            VGG_CHANNELS_2,
            VGG_CHANNELS_2,
            rng,
        );
        let flat = VGG_CHANNELS_2 * vgg_pooled_feat_dim(feat_dim);
        let blstm =
            BlstmLayerParams::init(store, &format!("{prefix}.blstm"), flat, hidden_dim, rng);
        VggBlstmParams {
            conv1,
            conv2,
            conv3,
            conv4,
            blstm,
        }
    }
}

fn conv_relu(
    tape: &mut Tape,
    bound: &Bound,
    p: &ConvParams,
    x: TensorRef,
) -> Result<TensorRef> {
    let c = tape.conv3x3(x, bound.get(p.w), bound.get(p.b))?;
    Ok(tape.relu(c))
}

/// T input frames → ⌈T/4⌉ output rows. Inputs shorter than 4 frames (or
/// with T not divisible by 4) are zero-padded in time before pooling.
pub fn vggblstm_forward(
    tape: &mut Tape,
    bound: &Bound,
    p: &VggBlstmParams,
    x: TensorRef,
) -> Result<TensorRef> {
    let shape = tape.shape(x);
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::Contract("vggblstm_forward: empty input".into()));
    }
    let (t_len, feat_dim) = (shape[0], shape[1]);

    let t_pad = t_len.next_multiple_of(4).max(4);
    let x = if t_pad > t_len {
        tape.pad_rows(x, t_pad - t_len)?
    } else {
        x
    };
    let img = tape.reshape(x, &[1, t_pad, feat_dim])?;

    let c = conv_relu(tape, bound, &p.conv1, img)?;
    let c = conv_relu(tape, bound, &p.conv2, c)?;
    let c = tape.max_pool2(c)?;
    let c = conv_relu(tape, bound, &p.conv3, c)?;
    let c = conv_relu(tape, bound, &p.conv4, c)?;
    let c = tape.max_pool2(c)?;

    let rows = tape.channels_to_rows(c)?;
    blstm_layer_forward(tape, bound, &p.blstm, rows)
}
