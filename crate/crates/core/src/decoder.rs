//! Translation decoder: bidirectional text–visual attention, per-step
//! co-attention producing the text context `c_t` and visual vector `v_t`,
//! and a two-cell conditional GRU.
//!
//! Bidirectional attention, with `ã_l = W_p a_l` and `E = H W_b Ã^T`:
//!
//! ```text
//! text_enh_n   = tanh(W_t [h_n ; sum_l softmax_l(E_n.) ã_l])
//! visual_enh_l = tanh(W_v [ã_l ; ã_l * sum_n softmax_n(E_.l) h_n])
//! ```
//!
//! The visual side gates its text context by `ã_l`, so all-zero visual
//! input yields all-zero enhanced visual rows and `v_t = 0` at every step.
//!
//! One decoding step:
//!
//! ```text
//! s'  = GRU1(emb(y_prev), s_prev)
//! c_t = sum_n softmax_n(w_c^T tanh(W_c1 s' + U_c1 text_enh_n)) text_enh_n
//! v_t = sum_l softmax_l(w_v^T tanh(W_v1 s' + U_v1 visual_enh_l)) visual_enh_l
//! s_t = GRU2([c_t ; v_t], s')
//! p   = softmax(W_o tanh(W_1 s_t + W_2 c_t + W_3 v_t + W_4 emb(y_prev)))
//! ```
//!
//! with PAD forced to probability zero. Without a visual pathway the same
//! step runs with zero visual context.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::corpus::{BOS, EOS, PAD};
use crate::encoders::{PooledText, TextEncoding};
use crate::error::{Error, Result};
use crate::nn::{maybe_dropout, Dropout, GruCell, ModelDims};
use crate::params::{ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy)]
pub struct AdditiveAttention {
    /// `A x S`
    pub w_state: ParamId,
    /// `A x 2d`
    pub u_item: ParamId,
    /// `1 x A`
    pub w_score: ParamId,
}

impl AdditiveAttention {
    fn new<T: Scalar, R: Rng + ?Sized>(params: &mut ParamSet<T>, prefix: &str, dims: &ModelDims, rng: &mut R) -> Self {
        let a = dims.attention_dim;
        Self {
            w_state: params.add_init(format!("{prefix}.w_state"), a, dims.decoder_hidden, dims.init, rng),
            u_item: params.add_init(format!("{prefix}.u_item"), a, dims.ctx(), dims.init, rng),
            w_score: params.add_init(format!("{prefix}.w_score"), 1, a, dims.init, rng),
        }
    }

    /// Attends from `state` over `items` whose `U` projection is `proj`;
    /// returns the `1 x 2d` context and the `1 x K` weights.
    fn attend<T: Scalar>(&self, tape: &mut Tape<T>, state: Var, items: Var, proj: Var) -> Result<(Var, Var)> {
        let q = tape.linear(state, self.w_state.var())?;
        let pre = tape.add_row(proj, q)?;
        let act = tape.tanh(pre);
        let scores = tape.linear(act, self.w_score.var())?;
        let scores = tape.transpose(scores);
        let weights = tape.softmax_rows(scores);
        Ok((tape.matmul(weights, items)?, weights))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderParams {
    pub embedding: ParamId,
    /// `2d x D_v`
    pub w_p: ParamId,
    /// `2d x 2d`
    pub w_b: ParamId,
    /// `2d x 4d`
    pub w_t: ParamId,
    /// `2d x 4d`
    pub w_v: ParamId,
    /// `S x 2d`
    pub w_init: ParamId,
    pub gru1: GruCell,
    pub gru2: GruCell,
    pub text_attention: AdditiveAttention,
    pub visual_attention: AdditiveAttention,
    pub w_1: ParamId,
    pub w_2: ParamId,
    pub w_3: ParamId,
    pub w_4: ParamId,
    /// `V x R`
    pub w_o: ParamId,
}

impl DecoderParams {
    pub fn new<T: Scalar, R: Rng + ?Sized>(params: &mut ParamSet<T>, dims: &ModelDims, rng: &mut R) -> Self {
        let c = dims.ctx();
        let w = |params: &mut ParamSet<T>, name: &str, rows, cols, rng: &mut R| {
            params.add_init(format!("dec.{name}"), rows, cols, dims.init, rng)
        };
        let embedding = w(params, "embedding", dims.tgt_vocab, dims.embed, rng);
        let w_p = w(params, "w_p", c, dims.visual_dim, rng);
        let w_b = w(params, "w_b", c, c, rng);
        let w_t = w(params, "w_t", c, 2 * c, rng);
        let w_v = w(params, "w_v", c, 2 * c, rng);
        let w_init = w(params, "w_init", dims.decoder_hidden, c, rng);
        let gru1 = GruCell::new(params, "dec.gru1", dims.embed, dims.decoder_hidden, dims.init, rng);
        let gru2 = GruCell::new(params, "dec.gru2", 2 * c, dims.decoder_hidden, dims.init, rng);
        let text_attention = AdditiveAttention::new(params, "dec.text_att", dims, rng);
        let visual_attention = AdditiveAttention::new(params, "dec.visual_att", dims, rng);
        let w_1 = w(params, "w_1", dims.readout, dims.decoder_hidden, rng);
        let w_2 = w(params, "w_2", dims.readout, c, rng);
        let w_3 = w(params, "w_3", dims.readout, c, rng);
        let w_4 = w(params, "w_4", dims.readout, dims.embed, rng);
        let w_o = w(params, "w_o", dims.tgt_vocab, dims.readout, rng);
        Self {
            embedding,
            w_p,
            w_b,
            w_t,
            w_v,
            w_init,
            gru1,
            gru2,
            text_attention,
            visual_attention,
            w_1,
            w_2,
            w_3,
            w_4,
            w_o,
        }
    }

    /// Parameters that only the visual pathway reaches.
    pub fn visual_only(&self) -> Vec<ParamId> {
        let a = &self.visual_attention;
        vec![self.w_p, self.w_b, self.w_v, a.w_state, a.u_item, a.w_score, self.w_3]
    }
}

/// Tape nodes of one bidirectional-attention pass.
#[derive(Debug, Clone, Copy)]
pub struct EnhancedVars {
    pub text_enh: Var,
    pub visual_enh: Option<Var>,
    /// `N x L'`, rows sum to one.
    pub text_attention: Option<Var>,
    /// `L' x N`, rows sum to one.
    pub visual_attention: Option<Var>,
}

pub fn bidirectional_attention_on<T: Scalar>(
    tape: &mut Tape<T>,
    dec: &DecoderParams,
    states: Var,
    visual: Option<Var>,
) -> Result<EnhancedVars> {
    let (n, width) = tape.shape(states);
    let Some(visual) = visual else {
        let zeros = tape.zeros(n, width);
        let joined = tape.hcat(&[states, zeros])?;
        let pre = tape.linear(joined, dec.w_t.var())?;
        return Ok(EnhancedVars {
            text_enh: tape.tanh(pre),
            visual_enh: None,
            text_attention: None,
            visual_attention: None,
        });
    };
    let projected = tape.linear(visual, dec.w_p.var())?;
    let hb = tape.matmul(states, dec.w_b.var())?;
    let affinity = tape.linear(hb, projected)?;

    let text_att = tape.softmax_rows(affinity);
    let text_ctx = tape.matmul(text_att, projected)?;
    let joined = tape.hcat(&[states, text_ctx])?;
    let pre = tape.linear(joined, dec.w_t.var())?;
    let text_enh = tape.tanh(pre);

    let affinity_t = tape.transpose(affinity);
    let vis_att = tape.softmax_rows(affinity_t);
    let vis_ctx = tape.matmul(vis_att, states)?;
    let gated = tape.mul(projected, vis_ctx)?;
    let joined = tape.hcat(&[projected, gated])?;
    let pre = tape.linear(joined, dec.w_v.var())?;
    let visual_enh = tape.tanh(pre);

    Ok(EnhancedVars {
        text_enh,
        visual_enh: Some(visual_enh),
        text_attention: Some(text_att),
        visual_attention: Some(vis_att),
    })
}

/// Per-sentence decoder inputs with the attention projections precomputed.
#[derive(Debug, Clone, Copy)]
pub struct DecoderMemory {
    pub text_enh: Var,
    pub text_proj: Var,
    pub visual: Option<(Var, Var)>,
    pub width: usize,
}

impl DecoderMemory {
    pub fn new<T: Scalar>(tape: &mut Tape<T>, dec: &DecoderParams, enh: &EnhancedVars) -> Result<Self> {
        let text_proj = tape.linear(enh.text_enh, dec.text_attention.u_item.var())?;
        let visual = match enh.visual_enh {
            Some(v) => Some((v, tape.linear(v, dec.visual_attention.u_item.var())?)),
            None => None,
        };
        Ok(Self {
            text_enh: enh.text_enh,
            text_proj,
            visual,
            width: tape.shape(enh.text_enh).1,
        })
    }
}

/// Tape nodes of one decoding step.
#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    pub state: Var,
    pub c_t: Var,
    pub v_t: Var,
    pub text_weights: Var,
    pub visual_weights: Option<Var>,
    pub distribution: Var,
}

/// `s_0 = tanh(W_init C')`
pub fn initial_state_on<T: Scalar>(tape: &mut Tape<T>, dec: &DecoderParams, pooled: Var) -> Result<Var> {
    let pre = tape.linear(pooled, dec.w_init.var())?;
    Ok(tape.tanh(pre))
}

pub fn decode_step_on<T: Scalar>(
    tape: &mut Tape<T>,
    dec: &DecoderParams,
    memory: &DecoderMemory,
    state: Var,
    y_prev: u32,
    dropout: &mut Option<&mut Dropout>,
) -> Result<StepVars> {
    let vocab = tape.shape(dec.embedding.var()).0;
    if y_prev as usize >= vocab {
        return Err(Error::IdOutOfRange {
            id: y_prev as usize,
            size: vocab,
        });
    }
    let emb = tape.gather(dec.embedding.var(), &[y_prev as usize])?;
    let s1 = dec.gru1.step(tape, emb, state)?;
    let (c_t, text_weights) = dec
        .text_attention
        .attend(tape, s1, memory.text_enh, memory.text_proj)?;
    let (v_t, visual_weights) = match memory.visual {
        Some((items, proj)) => {
            let (v, w) = dec.visual_attention.attend(tape, s1, items, proj)?;
            (v, Some(w))
        }
        None => (tape.zeros(1, memory.width), None),
    };
    let joined = tape.hcat(&[c_t, v_t])?;
    let s_t = dec.gru2.step(tape, joined, s1)?;

    let a = tape.linear(s_t, dec.w_1.var())?;
    let b = tape.linear(c_t, dec.w_2.var())?;
    let c = tape.linear(v_t, dec.w_3.var())?;
    let d = tape.linear(emb, dec.w_4.var())?;
    let ab = tape.add(a, b)?;
    let abc = tape.add(ab, c)?;
    let sum = tape.add(abc, d)?;
    let readout = tape.tanh(sum);
    let readout = maybe_dropout(dropout, tape, readout)?;
    let logits = tape.linear(readout, dec.w_o.var())?;
    let mut pad_mask = Matrix::zeros(1, vocab);
    pad_mask.set(0, PAD as usize, T::neg_infinity());
    let pad_mask = tape.leaf(pad_mask);
    let masked = tape.add_row(logits, pad_mask)?;
    let distribution = tape.softmax_rows(masked);
    Ok(StepVars {
        state: s_t,
        c_t,
        v_t,
        text_weights,
        visual_weights,
        distribution,
    })
}

/// Argmax with ties resolved to the smaller id.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding from BOS until EOS or `max_len` tokens; BOS/EOS are
/// not returned.
pub fn greedy_decode_on<T: Scalar>(
    tape: &mut Tape<T>,
    dec: &DecoderParams,
    memory: &DecoderMemory,
    initial: Var,
    max_len: usize,
) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    let mut state = initial;
    let mut prev = BOS;
    while out.len() < max_len {
        let step = decode_step_on(tape, dec, memory, state, prev, &mut None)?;
        let next = argmax(tape.value(step.distribution).as_slice()) as u32;
        if next == EOS {
            break;
        }
        out.push(next);
        state = step.state;
        prev = next;
    }
    Ok(out)
}

// Value-level API --------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct EnhancedRepresentations<T> {
    pub text_enh: Matrix<T>,
    pub visual_enh: Option<Matrix<T>>,
    pub text_attention: Option<Matrix<T>>,
    pub visual_attention: Option<Matrix<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState<T> {
    pub s: Matrix<T>,
    pub t: usize,
    pub y_prev: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepContext<T> {
    pub c_t: Matrix<T>,
    pub v_t: Matrix<T>,
    pub text_weights: Vec<T>,
    pub visual_weights: Option<Vec<T>>,
}

pub fn bidirectional_attention<T: Scalar>(
    enc: &TextEncoding<T>,
    visual: Option<&Matrix<T>>,
    params: &ParamSet<T>,
    dec: &DecoderParams,
) -> Result<EnhancedRepresentations<T>> {
    let mut tape = Tape::new();
    params.bind(&mut tape);
    let h = tape.leaf(enc.states.clone());
    let v = visual.map(|m| tape.leaf(m.clone()));
    let e = bidirectional_attention_on(&mut tape, dec, h, v)?;
    Ok(EnhancedRepresentations {
        text_enh: tape.value(e.text_enh).clone(),
        visual_enh: e.visual_enh.map(|x| tape.value(x).clone()),
        text_attention: e.text_attention.map(|x| tape.value(x).clone()),
        visual_attention: e.visual_attention.map(|x| tape.value(x).clone()),
    })
}

pub fn initial_state<T: Scalar>(
    pooled: &PooledText<T>,
    params: &ParamSet<T>,
    dec: &DecoderParams,
) -> Result<DecoderState<T>> {
    let mut tape = Tape::new();
    params.bind(&mut tape);
    let p = tape.leaf(pooled.vector.clone());
    let s = initial_state_on(&mut tape, dec, p)?;
    Ok(DecoderState {
        s: tape.value(s).clone(),
        t: 0,
        y_prev: BOS,
    })
}

fn memory_from<T: Scalar>(
    tape: &mut Tape<T>,
    dec: &DecoderParams,
    enh: &EnhancedRepresentations<T>,
) -> Result<DecoderMemory> {
    let vars = EnhancedVars {
        text_enh: tape.leaf(enh.text_enh.clone()),
        visual_enh: enh.visual_enh.as_ref().map(|m| tape.leaf(m.clone())),
        text_attention: None,
        visual_attention: None,
    };
    DecoderMemory::new(tape, dec, &vars)
}

/// One step; returns the next state, the step context and the
/// distribution over the target vocabulary.
pub fn decode_step<T: Scalar>(
    state: &DecoderState<T>,
    enh: &EnhancedRepresentations<T>,
    params: &ParamSet<T>,
    dec: &DecoderParams,
) -> Result<(DecoderState<T>, StepContext<T>, Vec<T>)> {
    let mut tape = Tape::new();
    params.bind(&mut tape);
    let memory = memory_from(&mut tape, dec, enh)?;
    let s = tape.leaf(state.s.clone());
    let step = decode_step_on(&mut tape, dec, &memory, s, state.y_prev, &mut None)?;
    let dist = tape.value(step.distribution).as_slice().to_vec();
    let next = DecoderState {
        s: tape.value(step.state).clone(),
        t: state.t + 1,
        y_prev: argmax(&dist) as u32,
    };
    let ctx = StepContext {
        c_t: tape.value(step.c_t).clone(),
        v_t: tape.value(step.v_t).clone(),
        text_weights: tape.value(step.text_weights).as_slice().to_vec(),
        visual_weights: step.visual_weights.map(|w| tape.value(w).as_slice().to_vec()),
    };
    Ok((next, ctx, dist))
}

pub fn greedy_decode<T: Scalar>(
    enc: &TextEncoding<T>,
    visual: Option<&Matrix<T>>,
    params: &ParamSet<T>,
    dec: &DecoderParams,
    max_len: usize,
) -> Result<Vec<u32>> {
    let mut tape = Tape::new();
    params.bind(&mut tape);
    let h = tape.leaf(enc.states.clone());
    let v = visual.map(|m| tape.leaf(m.clone()));
    let enh = bidirectional_attention_on(&mut tape, dec, h, v)?;
    let memory = DecoderMemory::new(&mut tape, dec, &enh)?;
    let pooled = tape.mean_rows(h);
    let s0 = initial_state_on(&mut tape, dec, pooled)?;
    greedy_decode_on(&mut tape, dec, &memory, s0, max_len)
}
