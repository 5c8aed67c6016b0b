//! Layer-norm MLP used for both actor and critics:
//!
//! ```text
//! linear(in -> h) -> layer-norm -> tanh -> linear(h -> h) -> ELU -> linear(h -> out) [-> scale * tanh]
//! ```
//!
//! Parameters live in one flat vector so the optimizer and Polyak averaging
//! operate on a single slice. Gradients use the same layout.

use serde::{Deserialize, Serialize};

use super::gemm::gemm;
use super::{ensure_finite, RealArray, Rng, LAYER_NORM_EPS};
use crate::{Error, Result};

/// Final-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OutputHead {
    /// Unbounded linear output (critics).
    Linear,
    /// `scale * tanh(z)`; the actor uses the action bound as scale.
    Tanh { scale: f64 },
}

/// Layer widths of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpLayout {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl MlpLayout {
    pub fn new(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            input,
            hidden,
            output,
        }
    }

    pub fn num_params(&self) -> usize {
        let (i, h, o) = (self.input, self.hidden, self.output);
        i * h + h + 2 * h + h * h + h + h * o + o
    }

    // Offsets of each tensor in the flat parameter vector.
    fn w1(&self) -> std::ops::Range<usize> {
        0..self.input * self.hidden
    }
    fn b1(&self) -> std::ops::Range<usize> {
        let s = self.w1().end;
        s..s + self.hidden
    }
    fn gain(&self) -> std::ops::Range<usize> {
        let s = self.b1().end;
        s..s + self.hidden
    }
    fn offset(&self) -> std::ops::Range<usize> {
        let s = self.gain().end;
        s..s + self.hidden
    }
    fn w2(&self) -> std::ops::Range<usize> {
        let s = self.offset().end;
        s..s + self.hidden * self.hidden
    }
    fn b2(&self) -> std::ops::Range<usize> {
        let s = self.w2().end;
        s..s + self.hidden
    }
    fn w3(&self) -> std::ops::Range<usize> {
        let s = self.b2().end;
        s..s + self.hidden * self.output
    }
    fn b3(&self) -> std::ops::Range<usize> {
        let s = self.w3().end;
        s..s + self.output
    }
}

/// Learnable parameters of one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    layout: MlpLayout,
    head: OutputHead,
    data: Vec<f64>,
}

/// Gradients share the parameter layout.
pub type MlpGradients = MlpParams;

macro_rules! tensor_accessors {
    ($($name:ident, $name_mut:ident);* $(;)?) => {
        $(
            pub fn $name(&self) -> &[f64] {
                &self.data[self.layout.$name()]
            }
            pub fn $name_mut(&mut self) -> &mut [f64] {
                let r = self.layout.$name();
                &mut self.data[r]
            }
        )*
    };
}

impl MlpParams {
    /// All-zero parameters except layer-norm gain, which is 1.
    pub fn zeros(layout: MlpLayout, head: OutputHead) -> Self {
        let mut p = Self {
            layout,
            head,
            data: vec![0.0; layout.num_params()],
        };
        p.gain_mut().fill(1.0);
        p
    }

    /// Uniform fan-in initialization. With `small_final`, the last linear
    /// layer draws weights from `U(-1e-3, 1e-3)` and zero bias.
    pub fn init(layout: MlpLayout, head: OutputHead, small_final: bool, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(layout, head);
        let fill = |slice: &mut [f64], bound: f64, rng: &mut Rng| {
            for v in slice {
                *v = rng.uniform(-bound, bound);
            }
        };
        let b_in = 1.0 / (layout.input as f64).sqrt();
        let b_h = 1.0 / (layout.hidden as f64).sqrt();
        fill(p.w1_mut(), b_in, rng);
        fill(p.b1_mut(), b_in, rng);
        fill(p.w2_mut(), b_h, rng);
        fill(p.b2_mut(), b_h, rng);
        if small_final {
            fill(p.w3_mut(), 1e-3, rng);
        } else {
            fill(p.w3_mut(), b_h, rng);
            fill(p.b3_mut(), b_h, rng);
        }
        p
    }

    /// Gradient container of the same layout, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            layout: self.layout,
            head: self.head,
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn layout(&self) -> MlpLayout {
        self.layout
    }

    pub fn head(&self) -> OutputHead {
        self.head
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    tensor_accessors! {
        w1, w1_mut;
        b1, b1_mut;
        gain, gain_mut;
        offset, offset_mut;
        w2, w2_mut;
        b2, b2_mut;
        w3, w3_mut;
        b3, b3_mut;
    }

    /// Forward pass that keeps the intermediates needed by [`MlpParams::backward`].
    pub fn forward_tape(&self, input: &RealArray) -> Result<MlpTape> {
        let l = self.layout;
        if input.cols() != l.input || input.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                expected: vec![input.rows(), l.input],
                actual: input.shape().to_vec(),
            });
        }
        let n = input.rows();
        let h = l.hidden;

        let mut z1 = vec![0.0; n * h];
        broadcast_rows(&mut z1, self.b1());
        gemm(n, l.input, h, input.data(), false, self.w1(), false, &mut z1, 1.0);

        let mut xhat = z1;
        let mut inv_std = vec![0.0; n];
        let mut h1 = vec![0.0; n * h];
        let (gain, offset) = (self.gain(), self.offset());
        for r in 0..n {
            let row = &mut xhat[r * h..(r + 1) * h];
            let mean = row.iter().sum::<f64>() / h as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            let out = &mut h1[r * h..(r + 1) * h];
            for j in 0..h {
                row[j] = (row[j] - mean) * is;
                out[j] = fast_tanh(gain[j] * row[j] + offset[j]);
            }
        }

        let mut h2 = vec![0.0; n * h];
        broadcast_rows(&mut h2, self.b2());
        gemm(n, h, h, &h1, false, self.w2(), false, &mut h2, 1.0);
        for v in h2.iter_mut() {
            if *v <= 0.0 {
                *v = v.exp() - 1.0;
            }
        }

        let o = l.output;
        let mut out = vec![0.0; n * o];
        broadcast_rows(&mut out, self.b3());
        gemm(n, h, o, &h2, false, self.w3(), false, &mut out, 1.0);
        if let OutputHead::Tanh { scale } = self.head {
            for v in out.iter_mut() {
                *v = scale * fast_tanh(*v);
            }
        }
        ensure_finite(&out, "mlp output")?;

        Ok(MlpTape {
            input: input.clone(),
            xhat,
            inv_std,
            h1,
            h2,
            output: RealArray::from_vec(&[n, o], out)?,
        })
    }

    /// Backward pass for `cotangent . output`.
    ///
    /// Returns parameter gradients (`None` when `want_params` is false) and the
    /// gradient with respect to the network input.
    pub fn backward(
        &self,
        tape: &MlpTape,
        cotangent: &RealArray,
        want_params: bool,
    ) -> Result<(Option<MlpGradients>, RealArray)> {
        let l = self.layout;
        let n = tape.output.rows();
        let (h, o) = (l.hidden, l.output);
        if cotangent.shape() != tape.output.shape() {
            return Err(Error::ShapeMismatch {
                expected: tape.output.shape().to_vec(),
                actual: cotangent.shape().to_vec(),
            });
        }
        let mut grads = want_params.then(|| self.zeros_like());

        // Output head.
        let mut dz3 = cotangent.data().to_vec();
        if let OutputHead::Tanh { scale } = self.head {
            for (d, y) in dz3.iter_mut().zip(tape.output.data()) {
                let t = y / scale;
                *d *= scale * (1.0 - t * t);
            }
        }
        if let Some(g) = grads.as_mut() {
            gemm(h, n, o, &tape.h2, true, &dz3, false, g.w3_mut(), 0.0);
            column_sums(&dz3, n, o, g.b3_mut());
        }

        // ELU layer.
        let mut dz2 = vec![0.0; n * h];
        gemm(n, o, h, &dz3, false, self.w3(), true, &mut dz2, 0.0);
        for (d, &a) in dz2.iter_mut().zip(&tape.h2) {
            if a <= 0.0 {
                *d *= a + 1.0;
            }
        }
        if let Some(g) = grads.as_mut() {
            gemm(h, n, h, &tape.h1, true, &dz2, false, g.w2_mut(), 0.0);
            column_sums(&dz2, n, h, g.b2_mut());
        }

        // tanh after layer-norm.
        let mut dy = vec![0.0; n * h];
        gemm(n, h, h, &dz2, false, self.w2(), true, &mut dy, 0.0);
        for (d, &a) in dy.iter_mut().zip(&tape.h1) {
            *d *= 1.0 - a * a;
        }

        // Layer-norm.
        let gain = self.gain();
        let mut dz1 = vec![0.0; n * h];
        let (mut dgain, mut doffset) = (vec![0.0; h], vec![0.0; h]);
        for r in 0..n {
            let dyr = &dy[r * h..(r + 1) * h];
            let xr = &tape.xhat[r * h..(r + 1) * h];
            let mut mean_dx = 0.0;
            let mut mean_dx_x = 0.0;
            for j in 0..h {
                dgain[j] += dyr[j] * xr[j];
                doffset[j] += dyr[j];
                let dx = dyr[j] * gain[j];
                mean_dx += dx;
                mean_dx_x += dx * xr[j];
            }
            mean_dx /= h as f64;
            mean_dx_x /= h as f64;
            let is = tape.inv_std[r];
            let out = &mut dz1[r * h..(r + 1) * h];
            for j in 0..h {
                out[j] = is * (dyr[j] * gain[j] - mean_dx - xr[j] * mean_dx_x);
            }
        }
        if let Some(g) = grads.as_mut() {
            g.gain_mut().copy_from_slice(&dgain);
            g.offset_mut().copy_from_slice(&doffset);
            gemm(l.input, n, h, tape.input.data(), true, &dz1, false, g.w1_mut(), 0.0);
            column_sums(&dz1, n, h, g.b1_mut());
        }

        let mut dx = vec![0.0; n * l.input];
        gemm(n, h, l.input, &dz1, false, self.w1(), true, &mut dx, 0.0);
        ensure_finite(&dx, "mlp input gradient")?;
        if let Some(g) = grads.as_ref() {
            ensure_finite(g.as_slice(), "mlp parameter gradient")?;
        }
        Ok((grads, RealArray::from_vec(&[n, l.input], dx)?))
    }
}

/// Intermediates of one batched forward pass.
#[derive(Debug, Clone)]
pub struct MlpTape {
    input: RealArray,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    output: RealArray,
}

impl MlpTape {
    pub fn output(&self) -> &RealArray {
        &self.output
    }

    pub fn into_output(self) -> RealArray {
        self.output
    }
}

/// Batched forward pass; rows of `input` are independent samples.
pub fn mlp_forward(params: &MlpParams, input: &RealArray) -> Result<RealArray> {
    Ok(params.forward_tape(input)?.output)
}

/// Exact gradients of `cotangent . mlp_forward(params, input)` with respect
/// to every parameter and to the input.
pub fn mlp_backward(
    params: &MlpParams,
    input: &RealArray,
    cotangent: &RealArray,
) -> Result<(MlpGradients, RealArray)> {
    let tape = params.forward_tape(input)?;
    let (g, dx) = params.backward(&tape, cotangent, true)?;
    Ok((g.expect("parameter gradients requested"), dx))
}

/// `tanh` through a single `exp`; absolute error is at the 1e-16 level, and
/// the backward pass only relies on `1 - tanh^2` of the stored value.
#[inline]
fn fast_tanh(x: f64) -> f64 {
    let e = (2.0 * x.abs()).exp();
    (1.0 - 2.0 / (e + 1.0)).copysign(x)
}

fn broadcast_rows(dst: &mut [f64], row: &[f64]) {
    for chunk in dst.chunks_exact_mut(row.len()) {
        chunk.copy_from_slice(row);
    }
}

fn column_sums(x: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    out.fill(0.0);
    for r in 0..rows {
        for (o, v) in out.iter_mut().zip(&x[r * cols..(r + 1) * cols]) {
            *o += v;
        }
    }
}
