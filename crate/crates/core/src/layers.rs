//! LSTM / BLSTM, fully-connected and layer-norm layers.
//!
//! Layers only hold [`ParamId`]s; the weights are fetched from a [`Bound`]
//! at call time.
//!
//! LSTM layout: one coupled weight matrix `[4·H_o × (H_i + H_o)]` whose
//! first `H_i` columns multiply the input and the rest the previous hidden
//! state, plus an input-side and a recurrent-side bias of `4·H_o` each.
//! Gate rows are ordered (input, forget, cell, output).

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamRegistry};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-8;

fn uniform(rng: &mut impl Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

#[derive(Debug, Clone)]
pub struct Lstm {
    pub weight: ParamId,
    pub bias_ih: ParamId,
    pub bias_hh: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl Lstm {
    pub fn new(
        reg: &mut ParamRegistry,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let gates = 4 * hidden_dim;
        let cols = input_dim + hidden_dim;
        let weight = reg.register(
            &format!("{name}.weight"),
            &[gates, cols],
            uniform(rng, gates * cols, cols),
        )?;
        let mut forget_one = vec![0.0; gates];
        forget_one[hidden_dim..2 * hidden_dim].fill(1.0);
        let bias_ih = reg.register(&format!("{name}.bias_ih"), &[gates], forget_one)?;
        let bias_hh = reg.register(&format!("{name}.bias_hh"), &[gates], vec![0.0; gates])?;
        Ok(Lstm {
            weight,
            bias_ih,
            bias_hh,
            input_dim,
            hidden_dim,
        })
    }

    /// Closed form `4·H_o·(H_i+H_o) + 8·H_o`.
    pub fn param_count(input_dim: usize, hidden_dim: usize) -> usize {
        4 * hidden_dim * (input_dim + hidden_dim) + 8 * hidden_dim
    }

    /// Runs the recurrence over `seq: [len × batch × H_i]` from zero state,
    /// returning `[len × batch × H_o]`. With `reverse` the sequence is read
    /// back to front and outputs are written at their original positions.
    pub fn run(&self, p: &Bound, seq: &Tensor, reverse: bool) -> Result<Tensor> {
        let shape = seq.shape();
        if shape.len() != 3 || shape[2] != self.input_dim {
            return Err(Error::shape("lstm", shape, &[self.input_dim]));
        }
        let (len, batch) = (shape[0], shape[1]);
        let ho = self.hidden_dim;
        let w = p.get(self.weight);
        let w_in_t = w.slice(1, 0, self.input_dim)?.transpose()?;
        let w_rec_t = w.slice(1, self.input_dim, ho)?.transpose()?;
        let bias = p.get(self.bias_ih).add(p.get(self.bias_hh))?;
        // input projection for every step at once
        let proj = seq
            .reshape(&[len * batch, self.input_dim])?
            .matmul(&w_in_t)?
            .add(&bias)?;

        let mut outputs: Vec<Option<Tensor>> = vec![None; len];
        let mut state: Option<(Tensor, Tensor)> = None;
        let steps: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..len).rev())
        } else {
            Box::new(0..len)
        };
        for t in steps {
            let mut z = proj.slice(0, t * batch, batch)?;
            if let Some((h, _)) = &state {
                z = z.add(&h.matmul(&w_rec_t)?)?;
            }
            let (h, c) = gate_update(&z, state.as_ref().map(|(_, c)| c), ho)?;
            outputs[t] = Some(h.reshape(&[1, batch, ho])?);
            state = Some((h, c));
        }
        let outputs: Vec<Tensor> = outputs.into_iter().map(|o| o.expect("every step visited")).collect();
        Tensor::concat(&outputs, 0)
    }
}

/// Gate nonlinearities and state update from pre-activations `z: [B × 4·H_o]`.
fn gate_update(z: &Tensor, c_prev: Option<&Tensor>, ho: usize) -> Result<(Tensor, Tensor)> {
    let hc = z.lstm_cell(c_prev)?;
    Ok((hc.slice(1, 0, ho)?, hc.slice(1, ho, ho)?))
}

/// One LSTM step on `x: [H_i]`, `h, c: [H_o]` (or batched `[B × …]`).
pub fn lstm_step(p: &Bound, lstm: &Lstm, x: &Tensor, h: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor)> {
    let batched = x.rank() == 2;
    let as_rows = |t: &Tensor| -> Result<Tensor> {
        if batched {
            Ok(t.clone())
        } else {
            t.reshape(&[1, t.numel()])
        }
    };
    let (x2, h2, c2) = (as_rows(x)?, as_rows(h)?, as_rows(c)?);
    let ho = lstm.hidden_dim;
    if x2.shape()[1] != lstm.input_dim || h2.shape()[1] != ho || c2.shape() != h2.shape() {
        return Err(Error::shape("lstm_step", x.shape(), h.shape()));
    }
    let z = Tensor::concat(&[x2, h2], 1)?
        .matmul(&p.get(lstm.weight).transpose()?)?
        .add(p.get(lstm.bias_ih))?
        .add(p.get(lstm.bias_hh))?;
    let (h_new, c_new) = gate_update(&z, Some(&c2), ho)?;
    if batched {
        Ok((h_new, c_new))
    } else {
        Ok((h_new.reshape(&[ho])?, c_new.reshape(&[ho])?))
    }
}

#[derive(Debug, Clone)]
pub struct Blstm {
    pub forward: Lstm,
    pub backward: Lstm,
}

impl Blstm {
    pub fn new(
        reg: &mut ParamRegistry,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Blstm {
            forward: Lstm::new(reg, &format!("{name}.fwd"), input_dim, hidden_dim, rng)?,
            backward: Lstm::new(reg, &format!("{name}.bwd"), input_dim, hidden_dim, rng)?,
        })
    }

    /// `[len × batch × H_i] -> [len × batch × 2·H_o]`, forward half first.
    pub fn run(&self, p: &Bound, seq: &Tensor) -> Result<Tensor> {
        let fwd = self.forward.run(p, seq, false)?;
        let bwd = self.backward.run(p, seq, true)?;
        Tensor::concat(&[fwd, bwd], 2)
    }
}

/// Unbatched BLSTM: `[len × H_i] -> [len × 2·H_o]`.
pub fn blstm(p: &Bound, layer: &Blstm, seq: &Tensor) -> Result<Tensor> {
    if seq.rank() != 2 {
        return Err(Error::shape("blstm", seq.shape(), &[layer.forward.input_dim]));
    }
    let len = seq.shape()[0];
    if len == 0 {
        return Err(Error::Contract("blstm on an empty sequence".into()));
    }
    let out = layer.run(p, &seq.reshape(&[len, 1, seq.shape()[1]])?)?;
    out.reshape(&[len, 2 * layer.forward.hidden_dim])
}

/// Sequence model inside a residual branch: bidirectional by default.
#[derive(Debug, Clone)]
pub enum Recurrent {
    Bidirectional(Blstm),
    Unidirectional(Lstm),
}

impl Recurrent {
    pub fn output_dim(&self) -> usize {
        match self {
            Recurrent::Bidirectional(b) => 2 * b.forward.hidden_dim,
            Recurrent::Unidirectional(l) => l.hidden_dim,
        }
    }

    pub fn run(&self, p: &Bound, seq: &Tensor) -> Result<Tensor> {
        match self {
            Recurrent::Bidirectional(b) => b.run(p, seq),
            Recurrent::Unidirectional(l) => l.run(p, seq, false),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(reg: &mut ParamRegistry, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let weight = reg.register(
            &format!("{name}.weight"),
            &[out_dim, in_dim],
            uniform(rng, out_dim * in_dim, in_dim),
        )?;
        let bias = reg.register(&format!("{name}.bias"), &[out_dim], vec![0.0; out_dim])?;
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn param_count(in_dim: usize, out_dim: usize) -> usize {
        out_dim * in_dim + out_dim
    }

    /// `y = x·Wᵀ + b` on `[rows × in]` (or a single `[in]` vector).
    pub fn forward(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        if x.rank() == 1 {
            let y = self.forward(p, &x.reshape(&[1, x.numel()])?)?;
            return y.reshape(&[self.out_dim]);
        }
        if x.rank() != 2 || x.shape()[1] != self.in_dim {
            return Err(Error::shape("linear", x.shape(), &[self.out_dim, self.in_dim]));
        }
        x.matmul(&p.get(self.weight).transpose()?)?.add(p.get(self.bias))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(reg: &mut ParamRegistry, name: &str, dim: usize) -> Result<Self> {
        let gain = reg.register(&format!("{name}.gain"), &[dim], vec![1.0; dim])?;
        let bias = reg.register(&format!("{name}.bias"), &[dim], vec![0.0; dim])?;
        Ok(LayerNorm { gain, bias, dim })
    }

    pub fn param_count(dim: usize) -> usize {
        2 * dim
    }

    /// Normalises over the last axis.
    pub fn forward(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(p.get(self.gain), p.get(self.bias), LAYER_NORM_EPS)
    }
}

/// `x + LN(FC(RNN(x)))` over `[len × batch × D]`, the shared building block
/// of the intra-block, inter-block and inter-group passes.
#[derive(Debug, Clone)]
pub struct ResidualRnn {
    pub rnn: Recurrent,
    pub fc: Linear,
    pub norm: LayerNorm,
}

impl ResidualRnn {
    pub fn new(
        reg: &mut ParamRegistry,
        name: &str,
        feature_dim: usize,
        hidden_dim: usize,
        bidirectional: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let rnn = if bidirectional {
            Recurrent::Bidirectional(Blstm::new(reg, &format!("{name}.rnn"), feature_dim, hidden_dim, rng)?)
        } else {
            Recurrent::Unidirectional(Lstm::new(reg, &format!("{name}.rnn"), feature_dim, hidden_dim, rng)?)
        };
        let fc = Linear::new(reg, &format!("{name}.fc"), rnn.output_dim(), feature_dim, rng)?;
        let norm = LayerNorm::new(reg, &format!("{name}.norm"), feature_dim)?;
        Ok(ResidualRnn { rnn, fc, norm })
    }

    pub fn param_count(feature_dim: usize, hidden_dim: usize, bidirectional: bool) -> usize {
        let dirs = if bidirectional { 2 } else { 1 };
        dirs * Lstm::param_count(feature_dim, hidden_dim)
            + Linear::param_count(dirs * hidden_dim, feature_dim)
            + LayerNorm::param_count(feature_dim)
    }

    pub fn feature_dim(&self) -> usize {
        self.norm.dim
    }

    pub fn forward(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.feature_dim() {
            return Err(Error::shape("residual_rnn", s, &[self.feature_dim()]));
        }
        let rows = s[0] * s[1];
        let h = self.rnn.run(p, x)?;
        let y = self.fc.forward(p, &h.reshape(&[rows, self.rnn.output_dim()])?)?;
        let y = self.norm.forward(p, &y)?;
        x.add(&y.reshape(s)?)
    }
}
