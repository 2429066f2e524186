//! Dense network over a flat parameter vector.
//!
//! Batches are column-major `features × batch` matrices, so each sample is
//! one contiguous column. Every layer stores its weight block (`out × in`,
//! column-major) followed by its bias.

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut, DVectorView};

/// Layer sizes of a network, input first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Layout {
    pub dims: Vec<usize>,
}

impl Layout {
    pub fn new(dims: Vec<usize>) -> Self {
        assert!(dims.len() >= 2, "network needs at least an input and an output");
        Self { dims }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn num_params(&self) -> usize {
        self.dims.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }

    /// `(weight_offset, bias_offset, in, out)` for every layer.
    pub fn offsets(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut off = 0;
        self.dims
            .windows(2)
            .map(|w| {
                let (inp, out) = (w[0], w[1]);
                let entry = (off, off + out * inp, inp, out);
                off += out * inp + out;
                entry
            })
            .collect()
    }
}

fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

fn silu_grad(z: f64) -> f64 {
    let s = 1.0 / (1.0 + (-z).exp());
    s * (1.0 + z * (1.0 - s))
}

/// Activations retained by a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchTrace {
    pub(crate) input: DMatrix<f64>,
    pub(crate) pre: Vec<DMatrix<f64>>,
    pub(crate) post: Vec<DMatrix<f64>>,
    pub(crate) output: DMatrix<f64>,
    pub(crate) num_params: usize,
}

impl BatchTrace {
    pub fn output(&self) -> &DMatrix<f64> {
        &self.output
    }

    pub fn batch_size(&self) -> usize {
        self.input.ncols()
    }
}

pub(crate) fn forward(layout: &Layout, params: &[f64], input: DMatrix<f64>) -> BatchTrace {
    debug_assert_eq!(params.len(), layout.num_params());
    debug_assert_eq!(input.nrows(), layout.input_dim());
    let batch = input.ncols();
    let offsets = layout.offsets();
    let last = offsets.len() - 1;
    let mut pre = Vec::with_capacity(last);
    let mut post: Vec<DMatrix<f64>> = Vec::with_capacity(last);
    let mut output = DMatrix::zeros(0, 0);
    for (l, &(w_off, b_off, inp, out)) in offsets.iter().enumerate() {
        let w = DMatrixView::from_slice(&params[w_off..b_off], out, inp);
        let b = DVectorView::from_slice(&params[b_off..b_off + out], out);
        let prev = if l == 0 { &input } else { &post[l - 1] };
        let mut z = DMatrix::zeros(out, batch);
        for mut col in z.column_iter_mut() {
            col.copy_from(&b);
        }
        z.gemm(1.0, &w, prev, 1.0);
        if l == last {
            output = z;
        } else {
            let a = z.map(silu);
            pre.push(z);
            post.push(a);
        }
    }
    BatchTrace { input, pre, post, output, num_params: params.len() }
}

/// Parameter gradient of `Σ ⟨d_output, output⟩`, plus the input gradient when
/// requested.
pub(crate) fn backward(
    layout: &Layout,
    params: &[f64],
    trace: &BatchTrace,
    d_output: &DMatrix<f64>,
    want_input_grad: bool,
) -> (Vec<f64>, Option<DMatrix<f64>>) {
    let offsets = layout.offsets();
    let mut grad = vec![0.0; params.len()];
    let mut dz = d_output.clone();
    let mut d_input = None;
    for l in (0..offsets.len()).rev() {
        let (w_off, b_off, inp, out) = offsets[l];
        let prev = if l == 0 { &trace.input } else { &trace.post[l - 1] };
        {
            let mut gw = DMatrixViewMut::from_slice(&mut grad[w_off..b_off], out, inp);
            gw.gemm(1.0, &dz, &prev.transpose(), 0.0);
        }
        for (r, g) in grad[b_off..b_off + out].iter_mut().enumerate() {
            *g = dz.row(r).sum();
        }
        if l == 0 && !want_input_grad {
            break;
        }
        let w = DMatrixView::from_slice(&params[w_off..b_off], out, inp);
        let mut da = DMatrix::zeros(inp, dz.ncols());
        // an explicit transpose lets gemm take the blocked kernel
        da.gemm(1.0, &w.transpose(), &dz, 0.0);
        if l == 0 {
            d_input = Some(da);
            break;
        }
        da.zip_apply(&trace.pre[l - 1], |d, z| *d *= silu_grad(z));
        dz = da;
    }
    (grad, d_input)
}
