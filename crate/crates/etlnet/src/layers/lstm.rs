//! LSTM and BiLSTM layers with full backpropagation through time.
//!
//! The recurrence is the standard one,
//!
//! ```text
//! i_t = sigmoid(x_t W_i^T + h_{t-1} U_i^T + b_i)
//! f_t = sigmoid(x_t W_f^T + h_{t-1} U_f^T + b_f)
//! o_t = sigmoid(x_t W_o^T + h_{t-1} U_o^T + b_o)
//! g_t = tanh   (x_t W_g^T + h_{t-1} U_g^T + b_g)
//! c_t = f_t * c_{t-1} + i_t * g_t
//! h_t = o_t * tanh(c_t)
//! ```
//!
//! with `h_0 = c_0 = 0`. A reverse pass consumes the sequence back to front;
//! `h_last` is then the state after consuming index 0. A BiLSTM runs one
//! pass in each direction; its final-state form concatenates the two last
//! hidden states, its sequence form concatenates the two hidden sequences
//! per time step.

use crate::error::{Error, Result};
use crate::layers::activation::sigmoid;
use crate::layers::dense::{add_bias_rows, column_sums};
use crate::numcore::{matmul, matmul_nt, matmul_tn, Precision, Rng, Tensor};

/// One gate's parameters.
#[derive(Debug, Clone)]
pub struct GateParams {
    /// Input weights, `[hidden, in]`.
    pub w: Tensor,
    /// Recurrent weights, `[hidden, hidden]`.
    pub u: Tensor,
    /// Bias, `[hidden]`.
    pub b: Tensor,
}

/// Parameters for the four gates of one direction.
#[derive(Debug, Clone)]
pub struct LstmParams {
    pub input_gate: GateParams,
    pub forget_gate: GateParams,
    pub output_gate: GateParams,
    pub cell_gate: GateParams,
}

impl LstmParams {
    /// Glorot-uniform weights per gate; forget-gate bias 1, other biases 0.
    pub fn init(in_dim: usize, hidden: usize, rng: &mut Rng, precision: Precision) -> Result<Self> {
        let mut gate = |forget: bool| -> Result<GateParams> {
            let wl = (6.0 / (in_dim + hidden) as f64).sqrt();
            let ul = (6.0 / (2 * hidden) as f64).sqrt();
            Ok(GateParams {
                w: rng.uniform_tensor(&[hidden, in_dim], -wl, wl, precision)?,
                u: rng.uniform_tensor(&[hidden, hidden], -ul, ul, precision)?,
                b: if forget {
                    Tensor::full(&[hidden], 1.0, precision)
                } else {
                    Tensor::zeros(&[hidden], precision)
                },
            })
        };
        Ok(LstmParams {
            input_gate: gate(false)?,
            forget_gate: gate(true)?,
            output_gate: gate(false)?,
            cell_gate: gate(false)?,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.input_gate.w.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.input_gate.w.shape()[0]
    }

    pub fn gates(&self) -> [&GateParams; 4] {
        [
            &self.input_gate,
            &self.forget_gate,
            &self.output_gate,
            &self.cell_gate,
        ]
    }
}

/// Per-gate gradients mirroring [`LstmParams`].
#[derive(Debug, Clone)]
pub struct GateGrads {
    pub w: Tensor,
    pub u: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone)]
pub struct LstmParamGrads {
    pub input_gate: GateGrads,
    pub forget_gate: GateGrads,
    pub output_gate: GateGrads,
    pub cell_gate: GateGrads,
}

#[derive(Debug, Clone)]
pub struct LstmGrads {
    pub input: Tensor,
    pub params: LstmParamGrads,
}

/// Values cached for one recurrence step, all `[batch, hidden]`.
#[derive(Debug, Clone)]
struct StepCache {
    time_index: usize,
    h_prev: Tensor,
    c_prev: Tensor,
    i: Tensor,
    f: Tensor,
    o: Tensor,
    g: Tensor,
    tanh_c: Tensor,
}

#[derive(Debug, Clone)]
pub struct LstmCache {
    input: Tensor,
    steps: Vec<StepCache>,
}

/// Runs the recurrence over a `[batch, time, in]` input.
///
/// Returns the hidden sequence `[batch, time, hidden]` (indexed by input
/// time, regardless of direction), the last state `[batch, hidden]`, and the
/// cache for backpropagation through time.
pub fn forward(x: &Tensor, p: &LstmParams, reverse: bool) -> Result<(Tensor, Tensor, LstmCache)> {
    let (batch, time, c_in) = x.dim3()?;
    if c_in != p.in_dim() {
        return Err(Error::Dim(format!(
            "lstm: input has {c_in} channels but gate weights are {:?}",
            p.input_gate.w.shape()
        )));
    }
    let hidden = p.hidden();
    let precision = x.precision();

    let mut h = Tensor::zeros(&[batch, hidden], precision);
    let mut c = Tensor::zeros(&[batch, hidden], precision);
    let mut h_seq = vec![0.0f64; batch * time * hidden];
    let mut steps = Vec::with_capacity(time);

    let order: Vec<usize> = if reverse {
        (0..time).rev().collect()
    } else {
        (0..time).collect()
    };

    for &t in &order {
        let x_t = time_slice(x, t)?;
        let gate = |gp: &GateParams, squash: fn(f64) -> f64| -> Result<Tensor> {
            let a = matmul_nt(&x_t, &gp.w)?.add(&matmul_nt(&h, &gp.u)?)?;
            add_bias_rows(&a, &gp.b)?.map(squash)
        };
        let i = gate(&p.input_gate, sigmoid)?;
        let f = gate(&p.forget_gate, sigmoid)?;
        let o = gate(&p.output_gate, sigmoid)?;
        let g = gate(&p.cell_gate, f64::tanh)?;
        let c_next = f.mul(&c)?.add(&i.mul(&g)?)?;
        let tanh_c = c_next.map(f64::tanh)?;
        let h_next = o.mul(&tanh_c)?;

        for b in 0..batch {
            for k in 0..hidden {
                h_seq[(b * time + t) * hidden + k] = h_next.data()[b * hidden + k];
            }
        }
        steps.push(StepCache {
            time_index: t,
            h_prev: h,
            c_prev: c,
            i,
            f,
            o,
            g,
            tanh_c,
        });
        h = h_next;
        c = c_next;
    }

    let h_seq = Tensor::from_data(&[batch, time, hidden], h_seq, precision)?;
    Ok((
        h_seq,
        h,
        LstmCache {
            input: x.clone(),
            steps,
        },
    ))
}

/// Backpropagation through time.
///
/// `dh_seq` is the upstream gradient on the full hidden sequence (pass
/// `None` when only the last state feeds the rest of the network), and
/// `dh_last` the gradient on the final state.
pub fn backward(
    dh_seq: Option<&Tensor>,
    dh_last: Option<&Tensor>,
    cache: &LstmCache,
    p: &LstmParams,
) -> Result<LstmGrads> {
    let (batch, time, c_in) = cache.input.dim3()?;
    let hidden = p.hidden();
    if c_in != p.in_dim() || cache.steps.len() != time {
        return Err(Error::Contract(
            "lstm backward: cache does not match the supplied parameters".into(),
        ));
    }
    if let Some(seq) = dh_seq {
        if seq.shape() != [batch, time, hidden] {
            return Err(Error::Dim(format!(
                "lstm backward: dh_seq shape {:?}, expected [{batch}, {time}, {hidden}]",
                seq.shape()
            )));
        }
    }
    if let Some(last) = dh_last {
        if last.shape() != [batch, hidden] {
            return Err(Error::Dim(format!(
                "lstm backward: dh_last shape {:?}, expected [{batch}, {hidden}]",
                last.shape()
            )));
        }
    }
    let precision = cache.input.precision();

    let zero_gate = || -> GateGrads {
        GateGrads {
            w: Tensor::zeros(&[hidden, c_in], precision),
            u: Tensor::zeros(&[hidden, hidden], precision),
            b: Tensor::zeros(&[hidden], precision),
        }
    };
    let mut grads = LstmParamGrads {
        input_gate: zero_gate(),
        forget_gate: zero_gate(),
        output_gate: zero_gate(),
        cell_gate: zero_gate(),
    };
    let mut d_input = vec![0.0f64; batch * time * c_in];
    let mut dh_carry = Tensor::zeros(&[batch, hidden], precision);
    let mut dc_carry = Tensor::zeros(&[batch, hidden], precision);

    for (s, step) in cache.steps.iter().enumerate().rev() {
        let mut dh = dh_carry.clone();
        if let Some(seq) = dh_seq {
            dh = dh.add(&time_slice(seq, step.time_index)?)?;
        }
        if s == cache.steps.len() - 1 {
            if let Some(last) = dh_last {
                dh = dh.add(last)?;
            }
        }

        let d_o = dh.mul(&step.tanh_c)?;
        let one_minus_tanh2 = step.tanh_c.map(|v| 1.0 - v * v)?;
        let dc = dc_carry.add(&dh.mul(&step.o)?.mul(&one_minus_tanh2)?)?;
        let d_i = dc.mul(&step.g)?;
        let d_f = dc.mul(&step.c_prev)?;
        let d_g = dc.mul(&step.i)?;

        // Pre-activation gradients.
        let da_i = d_i.mul(&step.i.map(|v| v * (1.0 - v))?)?;
        let da_f = d_f.mul(&step.f.map(|v| v * (1.0 - v))?)?;
        let da_o = d_o.mul(&step.o.map(|v| v * (1.0 - v))?)?;
        let da_g = d_g.mul(&step.g.map(|v| 1.0 - v * v)?)?;

        let x_t = time_slice(&cache.input, step.time_index)?;
        let mut dx_t = Tensor::zeros(&[batch, c_in], precision);
        let mut dh_prev = Tensor::zeros(&[batch, hidden], precision);
        for (gp, gg, da) in [
            (&p.input_gate, &mut grads.input_gate, &da_i),
            (&p.forget_gate, &mut grads.forget_gate, &da_f),
            (&p.output_gate, &mut grads.output_gate, &da_o),
            (&p.cell_gate, &mut grads.cell_gate, &da_g),
        ] {
            gg.w = gg.w.add(&matmul_tn(da, &x_t)?)?;
            gg.u = gg.u.add(&matmul_tn(da, &step.h_prev)?)?;
            gg.b = gg.b.add(&column_sums(da)?)?;
            dx_t = dx_t.add(&matmul(da, &gp.w)?)?;
            dh_prev = dh_prev.add(&matmul(da, &gp.u)?)?;
        }

        for b in 0..batch {
            for ch in 0..c_in {
                d_input[(b * time + step.time_index) * c_in + ch] = dx_t.data()[b * c_in + ch];
            }
        }
        dh_carry = dh_prev;
        dc_carry = dc.mul(&step.f)?;
    }

    Ok(LstmGrads {
        input: Tensor::from_data(&[batch, time, c_in], d_input, precision)?,
        params: grads,
    })
}

/// Extracts time step `t` of a `[batch, time, ch]` tensor as `[batch, ch]`.
fn time_slice(x: &Tensor, t: usize) -> Result<Tensor> {
    let (batch, time, ch) = x.dim3()?;
    let mut out = Vec::with_capacity(batch * ch);
    for b in 0..batch {
        out.extend_from_slice(&x.data()[(b * time + t) * ch..(b * time + t) * ch + ch]);
    }
    Tensor::from_data(&[batch, ch], out, x.precision())
}

// ---------------------------------------------------------------------------
// BiLSTM
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BilstmCache {
    fwd: LstmCache,
    bwd: LstmCache,
    hidden: usize,
    /// Whether the forward call returned sequences or final states.
    sequences: bool,
}

#[derive(Debug, Clone)]
pub struct BilstmGrads {
    pub input: Tensor,
    pub fwd: LstmParamGrads,
    pub bwd: LstmParamGrads,
}

fn check_bilstm(p_fwd: &LstmParams, p_bwd: &LstmParams) -> Result<usize> {
    if p_fwd.hidden() != p_bwd.hidden() {
        return Err(Error::Dim(format!(
            "bilstm: directions disagree on hidden size, {} vs {}",
            p_fwd.hidden(),
            p_bwd.hidden()
        )));
    }
    if p_fwd.in_dim() != p_bwd.in_dim() {
        return Err(Error::Dim(format!(
            "bilstm: directions disagree on input size, {} vs {}",
            p_fwd.in_dim(),
            p_bwd.in_dim()
        )));
    }
    Ok(p_fwd.hidden())
}

/// Final-state BiLSTM: `[batch, 2*hidden]`, the concatenation of the forward
/// pass's last state and the backward pass's last state.
pub fn bilstm_fwd(
    x: &Tensor,
    p_fwd: &LstmParams,
    p_bwd: &LstmParams,
) -> Result<(Tensor, BilstmCache)> {
    let hidden = check_bilstm(p_fwd, p_bwd)?;
    let (batch, _, _) = x.dim3()?;
    let (_, last_f, cache_f) = forward(x, p_fwd, false)?;
    let (_, last_b, cache_b) = forward(x, p_bwd, true)?;
    let mut out = Vec::with_capacity(batch * 2 * hidden);
    for b in 0..batch {
        out.extend_from_slice(&last_f.data()[b * hidden..(b + 1) * hidden]);
        out.extend_from_slice(&last_b.data()[b * hidden..(b + 1) * hidden]);
    }
    let out = Tensor::from_data(&[batch, 2 * hidden], out, x.precision())?;
    Ok((
        out,
        BilstmCache {
            fwd: cache_f,
            bwd: cache_b,
            hidden,
            sequences: false,
        },
    ))
}

pub fn bilstm_bwd(
    dout: &Tensor,
    cache: &BilstmCache,
    p_fwd: &LstmParams,
    p_bwd: &LstmParams,
) -> Result<BilstmGrads> {
    if cache.sequences {
        return Err(Error::Contract(
            "bilstm backward: cache came from the sequence-form forward".into(),
        ));
    }
    let hidden = cache.hidden;
    let (batch, cols) = dout.dim2()?;
    if cols != 2 * hidden {
        return Err(Error::Dim(format!(
            "bilstm backward: gradient has {cols} columns, expected {}",
            2 * hidden
        )));
    }
    let mut df = Vec::with_capacity(batch * hidden);
    let mut db = Vec::with_capacity(batch * hidden);
    for b in 0..batch {
        df.extend_from_slice(&dout.data()[b * 2 * hidden..b * 2 * hidden + hidden]);
        db.extend_from_slice(&dout.data()[b * 2 * hidden + hidden..(b + 1) * 2 * hidden]);
    }
    let df = Tensor::from_data(&[batch, hidden], df, dout.precision())?;
    let db = Tensor::from_data(&[batch, hidden], db, dout.precision())?;
    let gf = backward(None, Some(&df), &cache.fwd, p_fwd)?;
    let gb = backward(None, Some(&db), &cache.bwd, p_bwd)?;
    Ok(BilstmGrads {
        input: gf.input.add(&gb.input)?,
        fwd: gf.params,
        bwd: gb.params,
    })
}

/// Sequence-form BiLSTM: `[batch, time, 2*hidden]`, per-step concatenation
/// of the two directions' hidden states. Used when BiLSTM layers stack.
pub fn bilstm_seq_fwd(
    x: &Tensor,
    p_fwd: &LstmParams,
    p_bwd: &LstmParams,
) -> Result<(Tensor, BilstmCache)> {
    let hidden = check_bilstm(p_fwd, p_bwd)?;
    let (batch, time, _) = x.dim3()?;
    let (seq_f, _, cache_f) = forward(x, p_fwd, false)?;
    let (seq_b, _, cache_b) = forward(x, p_bwd, true)?;
    let mut out = vec![0.0f64; batch * time * 2 * hidden];
    for b in 0..batch {
        for t in 0..time {
            let dst = (b * time + t) * 2 * hidden;
            let src = (b * time + t) * hidden;
            out[dst..dst + hidden].copy_from_slice(&seq_f.data()[src..src + hidden]);
            out[dst + hidden..dst + 2 * hidden].copy_from_slice(&seq_b.data()[src..src + hidden]);
        }
    }
    let out = Tensor::from_data(&[batch, time, 2 * hidden], out, x.precision())?;
    Ok((
        out,
        BilstmCache {
            fwd: cache_f,
            bwd: cache_b,
            hidden,
            sequences: true,
        },
    ))
}

pub fn bilstm_seq_bwd(
    dout: &Tensor,
    cache: &BilstmCache,
    p_fwd: &LstmParams,
    p_bwd: &LstmParams,
) -> Result<BilstmGrads> {
    if !cache.sequences {
        return Err(Error::Contract(
            "bilstm backward: cache came from the final-state forward".into(),
        ));
    }
    let hidden = cache.hidden;
    let (batch, time, cols) = dout.dim3()?;
    if cols != 2 * hidden {
        return Err(Error::Dim(format!(
            "bilstm backward: gradient has {cols} channels, expected {}",
            2 * hidden
        )));
    }
    let mut df = vec![0.0f64; batch * time * hidden];
    let mut db = vec![0.0f64; batch * time * hidden];
    for b in 0..batch {
        for t in 0..time {
            let src = (b * time + t) * 2 * hidden;
            let dst = (b * time + t) * hidden;
            df[dst..dst + hidden].copy_from_slice(&dout.data()[src..src + hidden]);
            db[dst..dst + hidden].copy_from_slice(&dout.data()[src + hidden..src + 2 * hidden]);
        }
    }
    let df = Tensor::from_data(&[batch, time, hidden], df, dout.precision())?;
    let db = Tensor::from_data(&[batch, time, hidden], db, dout.precision())?;
    let gf = backward(Some(&df), None, &cache.fwd, p_fwd)?;
    let gb = backward(Some(&db), None, &cache.bwd, p_bwd)?;
    Ok(BilstmGrads {
        input: gf.input.add(&gb.input)?,
        fwd: gf.params,
        bwd: gb.params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_err, DEFAULT_STEP};

    fn zero_params(in_dim: usize, hidden: usize) -> LstmParams {
        let gate = || GateParams {
            w: Tensor::zeros(&[hidden, in_dim], Precision::Extended),
            u: Tensor::zeros(&[hidden, hidden], Precision::Extended),
            b: Tensor::zeros(&[hidden], Precision::Extended),
        };
        LstmParams {
            input_gate: gate(),
            forget_gate: gate(),
            output_gate: gate(),
            cell_gate: gate(),
        }
    }

    #[test]
    fn all_zero_parameters_give_zero_hidden_states() {
        // i = f = o = 0.5, g = 0, so c = 0 and h = 0 at every step.
        let p = zero_params(3, 4);
        let x = Rng::new(1)
            .uniform_tensor(&[2, 5, 3], -1.0, 1.0, Precision::Extended)
            .unwrap();
        let (h_seq, h_last, _) = forward(&x, &p, false).unwrap();
        assert!(h_seq.data().iter().all(|&v| v == 0.0));
        assert!(h_last.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_single_step_fixed_point() {
        // W = 1, U = 0, b = 0, x = [0]: all gates sigma(0) = 0.5, g = 0, h = 0.
        let mut p = zero_params(1, 1);
        for gp in [
            &mut p.input_gate,
            &mut p.forget_gate,
            &mut p.output_gate,
            &mut p.cell_gate,
        ] {
            gp.w = Tensor::full(&[1, 1], 1.0, Precision::Extended);
        }
        let x = Tensor::zeros(&[1, 1, 1], Precision::Extended);
        let (_, h_last, cache) = forward(&x, &p, false).unwrap();
        assert_eq!(h_last.data(), &[0.0]);
        let step = &cache.steps[0];
        assert_eq!(step.i.data(), &[0.5]);
        assert_eq!(step.f.data(), &[0.5]);
        assert_eq!(step.o.data(), &[0.5]);
        assert_eq!(step.g.data(), &[0.0]);
    }

    // Scalar-loop oracle: runs the recurrence one (batch, hidden) element at
    // a time with plain f64 arithmetic. Independent of the matmul-based path.
    fn scalar_loop_oracle(x: &Tensor, p: &LstmParams, reverse: bool) -> Vec<f64> {
        let (batch, time, c_in) = x.dim3().unwrap();
        let hidden = p.hidden();
        let order: Vec<usize> = if reverse {
            (0..time).rev().collect()
        } else {
            (0..time).collect()
        };
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let mut h_seq = vec![0.0; batch * time * hidden];
        for b in 0..batch {
            let mut h = vec![0.0; hidden];
            let mut c = vec![0.0; hidden];
            for &t in &order {
                let mut next_h = vec![0.0; hidden];
                let mut next_c = vec![0.0; hidden];
                for k in 0..hidden {
                    let mut acc = [0.0f64; 4];
                    for (gi, gp) in p.gates().iter().enumerate() {
                        let mut a = gp.b.data()[k];
                        for ch in 0..c_in {
                            a += gp.w.data()[k * c_in + ch] * x.data()[(b * time + t) * c_in + ch];
                        }
                        for hh in 0..hidden {
                            a += gp.u.data()[k * hidden + hh] * h[hh];
                        }
                        acc[gi] = a;
                    }
                    let i = sig(acc[0]);
                    let f = sig(acc[1]);
                    let o = sig(acc[2]);
                    let g = acc[3].tanh();
                    next_c[k] = f * c[k] + i * g;
                    next_h[k] = o * next_c[k].tanh();
                    h_seq[(b * time + t) * hidden + k] = next_h[k];
                }
                h = next_h;
                c = next_c;
            }
        }
        h_seq
    }

    #[test]
    fn matches_scalar_loop_oracle() {
        let mut rng = Rng::new(17);
        let p = LstmParams::init(3, 4, &mut rng, Precision::Extended).unwrap();
        let x = rng
            .uniform_tensor(&[1, 5, 3], -1.0, 1.0, Precision::Extended)
            .unwrap();
        for reverse in [false, true] {
            let (h_seq, _, _) = forward(&x, &p, reverse).unwrap();
            let want = scalar_loop_oracle(&x, &p, reverse);
            for (got, want) in h_seq.data().iter().zip(&want) {
                assert!((got - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn channel_mismatch_is_a_dimension_error() {
        let mut rng = Rng::new(0);
        let p = LstmParams::init(4, 2, &mut rng, Precision::Extended).unwrap();
        let x = Tensor::zeros(&[1, 3, 3], Precision::Extended);
        assert!(matches!(forward(&x, &p, false).unwrap_err(), Error::Dim(_)));
    }

    #[test]
    fn reverse_pass_last_state_consumes_index_zero() {
        let mut rng = Rng::new(23);
        let p = LstmParams::init(2, 3, &mut rng, Precision::Extended).unwrap();
        let x = rng
            .uniform_tensor(&[1, 4, 2], -1.0, 1.0, Precision::Extended)
            .unwrap();
        let (h_seq, h_last, _) = forward(&x, &p, true).unwrap();
        // In a reverse pass the state at input index 0 is the last one computed.
        for k in 0..3 {
            assert_eq!(h_seq.data()[k], h_last.data()[k]);
        }
    }

    #[test]
    fn bilstm_constant_input_zero_recurrence_has_equal_halves() {
        let mut rng = Rng::new(31);
        let mut p = LstmParams::init(2, 3, &mut rng, Precision::Extended).unwrap();
        for gp in [
            &mut p.input_gate,
            &mut p.forget_gate,
            &mut p.output_gate,
            &mut p.cell_gate,
        ] {
            gp.u = Tensor::zeros(&[3, 3], Precision::Extended);
        }
        let mut x = vec![0.0; 6 * 2];
        for t in 0..6 {
            x[t * 2] = 0.4;
            x[t * 2 + 1] = -0.7;
        }
        let x = Tensor::from_data(&[1, 6, 2], x, Precision::Extended).unwrap();
        let (out, _) = bilstm_fwd(&x, &p, &p).unwrap();
        for k in 0..3 {
            assert!((out.data()[k] - out.data()[3 + k]).abs() < 1e-12);
        }
    }

    #[test]
    fn reversing_input_swaps_halves_when_directions_share_params() {
        let mut rng = Rng::new(37);
        let p = LstmParams::init(2, 3, &mut rng, Precision::Extended).unwrap();
        let x = rng
            .uniform_tensor(&[2, 5, 2], -1.0, 1.0, Precision::Extended)
            .unwrap();
        let (out, _) = bilstm_fwd(&x, &p, &p).unwrap();
        let mut rev = vec![0.0; x.len()];
        for b in 0..2 {
            for t in 0..5 {
                for c in 0..2 {
                    rev[(b * 5 + t) * 2 + c] = x.data()[(b * 5 + (4 - t)) * 2 + c];
                }
            }
        }
        let xr = Tensor::from_data(&[2, 5, 2], rev, Precision::Extended).unwrap();
        let (out_r, _) = bilstm_fwd(&xr, &p, &p).unwrap();
        for b in 0..2 {
            for k in 0..3 {
                assert!((out.data()[b * 6 + k] - out_r.data()[b * 6 + 3 + k]).abs() < 1e-12);
                assert!((out.data()[b * 6 + 3 + k] - out_r.data()[b * 6 + k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilstm_equals_two_lstm_runs_concatenated() {
        let mut rng = Rng::new(41);
        let pf = LstmParams::init(3, 2, &mut rng, Precision::Extended).unwrap();
        let pb = LstmParams::init(3, 2, &mut rng, Precision::Extended).unwrap();
        let x = rng
            .uniform_tensor(&[2, 4, 3], -1.0, 1.0, Precision::Extended)
            .unwrap();
        let (out, _) = bilstm_fwd(&x, &pf, &pb).unwrap();
        let (_, lf, _) = forward(&x, &pf, false).unwrap();
        let (_, lb, _) = forward(&x, &pb, true).unwrap();
        for b in 0..2 {
            for k in 0..2 {
                assert_eq!(out.data()[b * 4 + k], lf.data()[b * 2 + k]);
                assert_eq!(out.data()[b * 4 + 2 + k], lb.data()[b * 2 + k]);
            }
        }
    }

    #[test]
    fn hidden_size_mismatch_is_a_dimension_error() {
        let mut rng = Rng::new(2);
        let pf = LstmParams::init(3, 2, &mut rng, Precision::Extended).unwrap();
        let pb = LstmParams::init(3, 4, &mut rng, Precision::Extended).unwrap();
        let x = Tensor::zeros(&[1, 3, 3], Precision::Extended);
        assert!(matches!(
            bilstm_fwd(&x, &pf, &pb).unwrap_err(),
            Error::Dim(_)
        ));
    }

    #[test]
    fn single_step_backward_reduces_to_gate_formulas() {
        // At T = 1 with h_0 = c_0 = 0 the BPTT recursion collapses to the
        // plain gate gradients; spell those out by hand and compare.
        let mut rng = Rng::new(53);
        let p = LstmParams::init(2, 3, &mut rng, Precision::Extended).unwrap();
        let x = rng
            .uniform_tensor(&[1, 1, 2], -1.0, 1.0, Precision::Extended)
            .unwrap();
        let (_, h_last, cache) = forward(&x, &p, false).unwrap();
        let dh = rng
            .uniform_tensor(&[1, 3], -1.0, 1.0, Precision::Extended)
            .unwrap();
        let grads = backward(None, Some(&dh), &cache, &p).unwrap();

        let step = &cache.steps[0];
        let sig = |v: f64| v * (1.0 - v);
        for k in 0..3 {
            let i = step.i.data()[k];
            let f = step.f.data()[k];
            let o = step.o.data()[k];
            let g = step.g.data()[k];
            let tc = step.tanh_c.data()[k];
            let dhk = dh.data()[k];
            // c = i*g (c_prev = 0), h = o*tanh(c)
            let d_o = dhk * tc;
            let d_c = dhk * o * (1.0 - tc * tc);
            let d_i = d_c * g;
            let d_g = d_c * i;
            let da_i = d_i * sig(i);
            let da_o = d_o * sig(o);
            let da_g = d_g * (1.0 - g * g);
            let da_f = d_c * 0.0 * sig(f); // c_prev = 0
            for ch in 0..2 {
                let xv = x.data()[ch];
                assert!((grads.params.input_gate.w.data()[k * 2 + ch] - da_i * xv).abs() < 1e-12);
                assert!((grads.params.output_gate.w.data()[k * 2 + ch] - da_o * xv).abs() < 1e-12);
                assert!((grads.params.cell_gate.w.data()[k * 2 + ch] - da_g * xv).abs() < 1e-12);
                assert!((grads.params.forget_gate.w.data()[k * 2 + ch] - da_f * xv).abs() < 1e-12);
            }
            assert!((grads.params.input_gate.b.data()[k] - da_i).abs() < 1e-12);
        }
        assert_eq!(h_last.shape(), &[1, 3]);
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn bptt_gradients_match_finite_differences() {
        let mut rng = Rng::new(61);
        for (batch, time, c_in, hidden, reverse) in
            [(1, 4, 2, 3, false), (2, 3, 3, 2, true), (1, 5, 1, 2, false)]
        {
            let p = LstmParams::init(c_in, hidden, &mut rng, Precision::Extended).unwrap();
            let x = rng
                .uniform_tensor(&[batch, time, c_in], -1.0, 1.0, Precision::Extended)
                .unwrap();
            let dh_seq = rng
                .uniform_tensor(&[batch, time, hidden], -1.0, 1.0, Precision::Extended)
                .unwrap();
            let dh_last = rng
                .uniform_tensor(&[batch, hidden], -1.0, 1.0, Precision::Extended)
                .unwrap();
            let (_, _, cache) = forward(&x, &p, reverse).unwrap();
            let grads = backward(Some(&dh_seq), Some(&dh_last), &cache, &p).unwrap();

            let loss = |probe_x: &Tensor, probe_p: &LstmParams| -> Result<f64> {
                let (seq, last, _) = forward(probe_x, probe_p, reverse)?;
                Ok(dot(&seq, &dh_seq) + dot(&last, &dh_last))
            };

            let num = central_diff(&x, |xi| loss(xi, &p), DEFAULT_STEP).unwrap();
            assert!(
                max_rel_err(&grads.input, &num).unwrap() < 1e-4,
                "input grad"
            );

            // Check one weight, one recurrent and one bias tensor per run to
            // keep the FD cost bounded; the gates share one code path.
            let num = central_diff(
                &p.input_gate.w,
                |w| {
                    let mut p2 = p.clone();
                    p2.input_gate.w = w.clone();
                    loss(&x, &p2)
                },
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(
                max_rel_err(&grads.params.input_gate.w, &num).unwrap() < 1e-4,
                "W_i grad"
            );
            let num = central_diff(
                &p.forget_gate.u,
                |u| {
                    let mut p2 = p.clone();
                    p2.forget_gate.u = u.clone();
                    loss(&x, &p2)
                },
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(
                max_rel_err(&grads.params.forget_gate.u, &num).unwrap() < 1e-4,
                "U_f grad"
            );
            let num = central_diff(
                &p.cell_gate.b,
                |b| {
                    let mut p2 = p.clone();
                    p2.cell_gate.b = b.clone();
                    loss(&x, &p2)
                },
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(
                max_rel_err(&grads.params.cell_gate.b, &num).unwrap() < 1e-4,
                "b_g grad"
            );
        }
    }

    #[test]
    fn bilstm_backward_matches_finite_differences() {
        let mut rng = Rng::new(67);
        let pf = LstmParams::init(2, 2, &mut rng, Precision::Extended).unwrap();
        let pb = LstmParams::init(2, 2, &mut rng, Precision::Extended).unwrap();
        let x = rng
            .uniform_tensor(&[2, 4, 2], -1.0, 1.0, Precision::Extended)
            .unwrap();
        let dout = rng
            .uniform_tensor(&[2, 4], -1.0, 1.0, Precision::Extended)
            .unwrap();
        let (_, cache) = bilstm_fwd(&x, &pf, &pb).unwrap();
        let grads = bilstm_bwd(&dout, &cache, &pf, &pb).unwrap();
        let num = central_diff(
            &x,
            |xi| {
                let (out, _) = bilstm_fwd(xi, &pf, &pb)?;
                Ok(dot(&out, &dout))
            },
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(max_rel_err(&grads.input, &num).unwrap() < 1e-4);

        let (_, cache) = bilstm_seq_fwd(&x, &pf, &pb).unwrap();
        let dseq = rng
            .uniform_tensor(&[2, 4, 4], -1.0, 1.0, Precision::Extended)
            .unwrap();
        let grads = bilstm_seq_bwd(&dseq, &cache, &pf, &pb).unwrap();
        let num = central_diff(
            &x,
            |xi| {
                let (out, _) = bilstm_seq_fwd(xi, &pf, &pb)?;
                Ok(dot(&out, &dseq))
            },
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(max_rel_err(&grads.input, &num).unwrap() < 1e-4);
    }
}
