//! Shared-parameter LSTM over grouped pixel rows.
//!
//! Standard cell, gate order `i, f, g, o`:
//!
//! ```text
//! z = x·W_ih + h·W_hh + b          (row vector, width 4C)
//! i, f, o = σ(z_i), σ(z_f), σ(z_o)
//! g = tanh(z_g)
//! c' = f ⊙ c + i ⊙ g
//! h' = o ⊙ tanh(c')
//! ```
//!
//! Every row of a [`GroupedEvents`] block is an independent sequence starting
//! from the zero state; only its `row_len` valid steps are evaluated and the
//! hidden state after the last one is the row's output. Rows are processed
//! in fixed-size chunks, so results do not depend on the worker count.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grouping::GroupedEvents;

pub const GATES: usize = 4;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MLP1";

/// Rows per work unit. Part of the numeric contract: gradient partial sums
/// are formed per chunk and then reduced in chunk order.
const ROW_CHUNK: usize = 64;

/// Cell parameters, shared by every pixel.
///
/// `input_weights` is `F × 4C` and `recurrent_weights` is `C × 4C`, both row
/// major; `biases` has `4C` entries. The same type carries gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    input_size: usize,
    hidden_size: usize,
    pub input_weights: Vec<f64>,
    pub recurrent_weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl LstmParams {
    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        let g = GATES * hidden_size;
        LstmParams {
            input_size,
            hidden_size,
            input_weights: vec![0.0; input_size * g],
            recurrent_weights: vec![0.0; hidden_size * g],
            biases: vec![0.0; g],
        }
    }

    /// Weights uniform in `(−1/√C, 1/√C)`, forget-gate bias 1, other biases 0.
    pub fn init(input_size: usize, hidden_size: usize, seed: u64) -> Result<Self> {
        if input_size == 0 || hidden_size == 0 {
            return Err(Error::arg("LSTM input and hidden sizes must be at least 1"));
        }
        let mut p = Self::zeros(input_size, hidden_size);
        let k = 1.0 / (hidden_size as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in p.input_weights.iter_mut().chain(p.recurrent_weights.iter_mut()) {
            *w = rng.gen_range(-k..k);
        }
        p.forget_bias_mut().fill(1.0);
        Ok(p)
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden_size
    }

    pub fn forget_bias(&self) -> &[f64] {
        &self.biases[self.hidden_size..2 * self.hidden_size]
    }

    pub fn forget_bias_mut(&mut self) -> &mut [f64] {
        let c = self.hidden_size;
        &mut self.biases[c..2 * c]
    }

    pub fn num_params(&self) -> usize {
        self.input_weights.len() + self.recurrent_weights.len() + self.biases.len()
    }

    /// Parameters concatenated as `input_weights ‖ recurrent_weights ‖ biases`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        v.extend_from_slice(&self.input_weights);
        v.extend_from_slice(&self.recurrent_weights);
        v.extend_from_slice(&self.biases);
        v
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::arg(format!(
                "{} values for {} LSTM parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let (a, rest) = flat.split_at(self.input_weights.len());
        let (b, c) = rest.split_at(self.recurrent_weights.len());
        self.input_weights.copy_from_slice(a);
        self.recurrent_weights.copy_from_slice(b);
        self.biases.copy_from_slice(c);
        Ok(())
    }

    pub fn add_assign(&mut self, other: &LstmParams) {
        for (a, b) in self.input_weights.iter_mut().zip(&other.input_weights) {
            *a += b;
        }
        for (a, b) in self.recurrent_weights.iter_mut().zip(&other.recurrent_weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.input_weights
            .iter()
            .chain(&self.recurrent_weights)
            .chain(&self.biases)
            .all(|v| v.is_finite())
    }

    /// `MLP1` checkpoint: magic, `u32` F, `u32` C, then the three blocks as
    /// little-endian `f64`.
    pub fn encode_checkpoint(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(12 + 8 * self.num_params());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(self.input_size as u32).to_le_bytes());
        buf.extend_from_slice(&(self.hidden_size as u32).to_le_bytes());
        for v in self.flatten() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn decode_checkpoint(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::format("missing MLP1 header"));
        }
        let f = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let c = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut p = Self::zeros(f, c);
        let body = &bytes[12..];
        if body.len() != 8 * p.num_params() {
            return Err(Error::format(format!(
                "MLP1 F={f} C={c} needs {} parameter bytes, found {}",
                8 * p.num_params(),
                body.len()
            )));
        }
        let flat: Vec<f64> = body
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        p.assign_flat(&flat)?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode_checkpoint())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode_checkpoint(&fs::read(path)?)
    }
}

/// Recurrent state `(h, c)` of one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden_size: usize) -> Self {
        LstmState { h: vec![0.0; hidden_size], c: vec![0.0; hidden_size] }
    }
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// One cell update. Writes activated gates (`4C`), the new cell state and the
/// new hidden state.
#[inline]
fn cell_forward(
    p: &LstmParams,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    gates: &mut [f64],
    c_out: &mut [f64],
    h_out: &mut [f64],
) {
    let c = p.hidden_size;
    let g4 = GATES * c;
    gates.copy_from_slice(&p.biases);
    for (&xf, w) in x.iter().zip(p.input_weights.chunks_exact(g4)) {
        for (z, &wj) in gates.iter_mut().zip(w) {
            *z += xf * wj;
        }
    }
    for (&hm, w) in h_prev.iter().zip(p.recurrent_weights.chunks_exact(g4)) {
        for (z, &wj) in gates.iter_mut().zip(w) {
            *z += hm * wj;
        }
    }
    for j in 0..c {
        let i = sigmoid(gates[j]);
        let f = sigmoid(gates[c + j]);
        let g = gates[2 * c + j].tanh();
        let o = sigmoid(gates[3 * c + j]);
        gates[j] = i;
        gates[c + j] = f;
        gates[2 * c + j] = g;
        gates[3 * c + j] = o;
        let cj = f * c_prev[j] + i * g;
        c_out[j] = cj;
        h_out[j] = o * cj.tanh();
    }
}

/// Allocation-free cell update used by dense baselines: writes the
/// activated gates, `c'` and `h'` into the provided buffers.
#[inline]
pub fn cell_step_into(
    params: &LstmParams,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    gates: &mut [f64],
    c_out: &mut [f64],
    h_out: &mut [f64],
) {
    cell_forward(params, x, h_prev, c_prev, gates, c_out, h_out);
}

/// Single LSTM step from `state` on input `x`.
pub fn lstm_cell_step(params: &LstmParams, x: &[f64], state: &LstmState) -> LstmState {
    assert_eq!(x.len(), params.input_size, "input width");
    assert_eq!(state.h.len(), params.hidden_size, "state width");
    let c = params.hidden_size;
    let mut gates = vec![0.0; GATES * c];
    let mut next = LstmState::zeros(c);
    cell_forward(params, x, &state.h, &state.c, &mut gates, &mut next.c, &mut next.h);
    next
}

fn check_inputs(params: &LstmParams, grouped: &GroupedEvents) -> Result<()> {
    if grouped.rows() > 0 && grouped.features != params.input_size {
        return Err(Error::config(format!(
            "grouped features have width {} but the LSTM expects {}",
            grouped.features, params.input_size
        )));
    }
    if let Some(r) = grouped.row_len.iter().position(|&l| l == 0) {
        return Err(Error::arg(format!("row {r} has no events")));
    }
    Ok(())
}

/// Splits `buf` into consecutive pieces of `(bounds[k+1] − bounds[k]) · scale` elements.
fn split_by<'a, T>(mut buf: &'a mut [T], bounds: &[usize], scale: usize) -> Vec<&'a mut [T]> {
    let mut out = Vec::with_capacity(bounds.len().saturating_sub(1));
    for w in bounds.windows(2) {
        let (head, rest) = std::mem::take(&mut buf).split_at_mut((w[1] - w[0]) * scale);
        out.push(head);
        buf = rest;
    }
    out
}

fn chunk_bounds(rows: usize) -> Vec<usize> {
    let mut b: Vec<usize> = (0..rows).step_by(ROW_CHUNK).collect();
    b.push(rows);
    b
}

/// Last hidden state of every row (`rows × C`), without recording a tape.
pub fn infer_grouped(params: &LstmParams, grouped: &GroupedEvents) -> Result<Vec<f64>> {
    check_inputs(params, grouped)?;
    let c = params.hidden_size;
    let rows = grouped.rows();
    let mut outputs = vec![0.0; rows * c];
    let bounds = chunk_bounds(rows);
    let pieces = split_by(&mut outputs, &bounds, c);
    pieces.into_par_iter().zip(bounds.par_windows(2)).for_each(|(out, w)| {
        let mut gates = vec![0.0; GATES * c];
        let mut h = vec![0.0; c];
        let mut cs = vec![0.0; c];
        let mut h_next = vec![0.0; c];
        let mut c_next = vec![0.0; c];
        for (r, o) in (w[0]..w[1]).zip(out.chunks_exact_mut(c)) {
            h.fill(0.0);
            cs.fill(0.0);
            for k in 0..grouped.row_len[r] {
                cell_forward(params, grouped.slot(r, k), &h, &cs, &mut gates, &mut c_next, &mut h_next);
                std::mem::swap(&mut h, &mut h_next);
                std::mem::swap(&mut cs, &mut c_next);
            }
            o.copy_from_slice(&h);
        }
    });
    Ok(outputs)
}

/// Activations saved by [`forward_grouped`] for [`backward_grouped`].
///
/// Only valid steps are stored, packed row after row.
#[derive(Debug, Clone)]
pub struct LstmTape {
    params: LstmParams,
    t_max: usize,
    row_len: Vec<usize>,
    row_offset: Vec<usize>,
    row_key: Vec<(usize, u16, u16)>,
    inputs: Vec<f64>,
    gates: Vec<f64>,
    cells: Vec<f64>,
    hidden: Vec<f64>,
}

impl LstmTape {
    pub fn rows(&self) -> usize {
        self.row_len.len()
    }

    pub fn params(&self) -> &LstmParams {
        &self.params
    }

    pub fn element_count(&self) -> usize {
        self.inputs.len() + self.gates.len() + self.cells.len() + self.hidden.len()
    }
}

/// Runs every row and keeps the activations needed for exact backward.
/// Returns the last hidden state per row (`rows × C`) and the tape.
pub fn forward_grouped(params: &LstmParams, grouped: &GroupedEvents) -> Result<(Vec<f64>, LstmTape)> {
    check_inputs(params, grouped)?;
    let c = params.hidden_size;
    let f = params.input_size;
    let rows = grouped.rows();
    let total = grouped.total_len();

    let mut inputs = vec![0.0; total * f];
    let mut gates = vec![0.0; total * GATES * c];
    let mut cells = vec![0.0; total * c];
    let mut hidden = vec![0.0; total * c];
    let mut outputs = vec![0.0; rows * c];

    let bounds = chunk_bounds(rows);
    let slot_bounds: Vec<usize> = bounds.iter().map(|&r| grouped.row_offset[r]).collect();
    let work = split_by(&mut inputs, &slot_bounds, f)
        .into_iter()
        .zip(split_by(&mut gates, &slot_bounds, GATES * c))
        .zip(split_by(&mut cells, &slot_bounds, c))
        .zip(split_by(&mut hidden, &slot_bounds, c))
        .zip(split_by(&mut outputs, &bounds, c))
        .zip(bounds.windows(2))
        .collect::<Vec<_>>();

    work.into_par_iter().for_each(|(((((xs, gs), cs), hs), out), w)| {
        let mut hp = vec![0.0; c];
        let mut cp = vec![0.0; c];
        let base = grouped.row_offset[w[0]];
        for r in w[0]..w[1] {
            let len = grouped.row_len[r];
            let start = grouped.row_offset[r] - base;
            hp.fill(0.0);
            cp.fill(0.0);
            for k in 0..len {
                let s = start + k;
                xs[s * f..(s + 1) * f].copy_from_slice(grouped.slot(r, k));
                let (h_new, c_new) = (&mut hs[s * c..(s + 1) * c], &mut cs[s * c..(s + 1) * c]);
                cell_forward(
                    params,
                    &xs[s * f..(s + 1) * f],
                    &hp,
                    &cp,
                    &mut gs[s * GATES * c..(s + 1) * GATES * c],
                    c_new,
                    h_new,
                );
                hp.copy_from_slice(h_new);
                cp.copy_from_slice(c_new);
            }
            let last = start + len - 1;
            out[(r - w[0]) * c..(r - w[0] + 1) * c].copy_from_slice(&hs[last * c..(last + 1) * c]);
        }
    });

    let row_key = (0..rows)
        .map(|r| (grouped.row_sample[r], grouped.row_pixel[r].1, grouped.row_pixel[r].0))
        .collect();
    let tape = LstmTape {
        params: params.clone(),
        t_max: grouped.t_max,
        row_len: grouped.row_len.clone(),
        row_offset: grouped.row_offset.clone(),
        row_key,
        inputs,
        gates,
        cells,
        hidden,
    };
    Ok((outputs, tape))
}

/// Exact backpropagation through time from gradients of the row outputs.
///
/// Returns the parameter gradient and the gradient of the grouped feature
/// block (`rows × t_max × F`, zero at padding). Parameter contributions are
/// summed per chunk of rows taken in `(sample, y, x)` order, then across
/// chunks in order, so the result is independent of row order and worker
/// count.
pub fn backward_grouped(tape: &LstmTape, d_outputs: &[f64]) -> Result<(LstmParams, Vec<f64>)> {
    let p = &tape.params;
    let c = p.hidden_size;
    let f = p.input_size;
    let rows = tape.rows();
    if d_outputs.len() != rows * c {
        return Err(Error::arg(format!(
            "{} output gradients for a tape of {rows} rows × {c} channels",
            d_outputs.len()
        )));
    }
    let mut order: Vec<usize> = (0..rows).collect();
    order.sort_by_key(|&r| (tape.row_key[r], r));

    let partials: Vec<(LstmParams, Vec<f64>)> = order
        .par_chunks(ROW_CHUNK)
        .map(|chunk| {
            let mut grads = LstmParams::zeros(f, c);
            let mut dx_all = Vec::new();
            let mut dh = vec![0.0; c];
            let mut dh_prev = vec![0.0; c];
            let mut dc = vec![0.0; c];
            let mut dz = vec![0.0; GATES * c];
            let zeros = vec![0.0; c];
            for &r in chunk {
                let len = tape.row_len[r];
                let off = tape.row_offset[r];
                let mut dx_row = vec![0.0; tape.t_max * f];
                dh.copy_from_slice(&d_outputs[r * c..(r + 1) * c]);
                dc.fill(0.0);
                for k in (0..len).rev() {
                    let s = off + k;
                    let g = &tape.gates[s * GATES * c..(s + 1) * GATES * c];
                    let cell = &tape.cells[s * c..(s + 1) * c];
                    let (c_prev, h_prev) = if k == 0 {
                        (&zeros[..], &zeros[..])
                    } else {
                        (&tape.cells[(s - 1) * c..s * c], &tape.hidden[(s - 1) * c..s * c])
                    };
                    for j in 0..c {
                        let (i, fg, gg, o) = (g[j], g[c + j], g[2 * c + j], g[3 * c + j]);
                        let tc = cell[j].tanh();
                        let d_o = dh[j] * tc;
                        let dcj = dc[j] + dh[j] * o * (1.0 - tc * tc);
                        dz[j] = dcj * gg * i * (1.0 - i);
                        dz[c + j] = dcj * c_prev[j] * fg * (1.0 - fg);
                        dz[2 * c + j] = dcj * i * (1.0 - gg * gg);
                        dz[3 * c + j] = d_o * o * (1.0 - o);
                        dc[j] = dcj * fg;
                    }
                    for (b, &d) in grads.biases.iter_mut().zip(&dz) {
                        *b += d;
                    }
                    let x = &tape.inputs[s * f..(s + 1) * f];
                    let dx = &mut dx_row[k * f..(k + 1) * f];
                    for fi in 0..f {
                        let w = &p.input_weights[fi * GATES * c..(fi + 1) * GATES * c];
                        let gw = &mut grads.input_weights[fi * GATES * c..(fi + 1) * GATES * c];
                        let mut acc = 0.0;
                        for j in 0..GATES * c {
                            gw[j] += x[fi] * dz[j];
                            acc += w[j] * dz[j];
                        }
                        dx[fi] = acc;
                    }
                    for m in 0..c {
                        let w = &p.recurrent_weights[m * GATES * c..(m + 1) * GATES * c];
                        let gw = &mut grads.recurrent_weights[m * GATES * c..(m + 1) * GATES * c];
                        let mut acc = 0.0;
                        for j in 0..GATES * c {
                            gw[j] += h_prev[m] * dz[j];
                            acc += w[j] * dz[j];
                        }
                        dh_prev[m] = acc;
                    }
                    std::mem::swap(&mut dh, &mut dh_prev);
                }
                dx_all.extend_from_slice(&dx_row);
            }
            (grads, dx_all)
        })
        .collect();

    let mut d_params = LstmParams::zeros(f, c);
    let mut d_features = vec![0.0; rows * tape.t_max * f];
    let block = tape.t_max * f;
    for ((grads, dx), chunk) in partials.iter().zip(order.chunks(ROW_CHUNK)) {
        d_params.add_assign(grads);
        for (&r, d) in chunk.iter().zip(dx.chunks_exact(block.max(1))) {
            d_features[r * block..(r + 1) * block].copy_from_slice(d);
        }
    }
    Ok((d_params, d_features))
}
