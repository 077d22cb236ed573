//! A small fixed-layer neural network toolkit with hand-written reverse-mode
//! gradients: "same"-padded strided convolutions, their transposes, dense
//! layers, leaky ReLU and sigmoid, plus softmax, mean-squared error and Adam.
//!
//! Tensors are `f64`, row-major, batch first. Image samples are laid out as
//! channels × height × width.

use std::ops::Range;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::contract(format!(
                "tensor of shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.shape[1..]
    }

    pub fn sample_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn sample(&self, b: usize) -> &[f64] {
        let n = self.sample_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [f64] {
        let n = self.sample_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    /// Rows `idx` of the batch, in order.
    pub fn gather(&self, idx: &[usize]) -> Tensor {
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        let data = idx.iter().flat_map(|i| self.sample(*i).iter().copied()).collect();
        Tensor { shape, data }
    }

    fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NumericDomain(format!("{what}: non-finite value at index {i}"))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { filters: usize, kernel: usize, stride: usize },
    Deconv { filters: usize, kernel: usize, stride: usize },
    Dense { units: usize },
    Lrelu { slope: f64 },
    Sigmoid,
    Flatten,
    Reshape { shape: Vec<usize> },
}

/// Geometry of a strided "same" convolution from a large grid to a small one.
/// Transposed convolutions reuse it in the opposite direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub big_c: usize,
    pub big_h: usize,
    pub big_w: usize,
    pub small_c: usize,
    pub small_h: usize,
    pub small_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

/// Output extent `ceil(n / stride)` and the leading pad of "same" padding.
pub fn same_padding(n: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = n.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(n);
    (out, total / 2)
}

impl ConvGeom {
    fn new(big: [usize; 3], small_c: usize, kernel: usize, stride: usize) -> Self {
        let (small_h, pad_top) = same_padding(big[1], kernel, stride);
        let (small_w, pad_left) = same_padding(big[2], kernel, stride);
        ConvGeom {
            big_c: big[0],
            big_h: big[1],
            big_w: big[2],
            small_c,
            small_h,
            small_w,
            kernel,
            stride,
            pad_top,
            pad_left,
        }
    }

    fn weight_len(&self) -> usize {
        self.small_c * self.big_c * self.kernel * self.kernel
    }

    /// Output positions `o` along one axis whose tap `k` lands inside `[0, n)`.
    fn valid(&self, k: usize, pad: usize, n_big: usize, n_small: usize) -> Range<usize> {
        let s = self.stride;
        // o * s + k - pad >= 0  and  o * s + k - pad < n_big
        let lo = if pad > k { (pad - k).div_ceil(s) } else { 0 };
        let hi = if n_big + pad > k { (n_big + pad - k).div_ceil(s) } else { 0 };
        lo.min(n_small)..hi.min(n_small)
    }

    /// Visits every contiguous run of output positions sharing one weight:
    /// `(small row range, first big index, weight index)`. Big indices
    /// advance by the stride along the run.
    #[inline]
    fn for_each_row(&self, mut f: impl FnMut(Range<usize>, usize, usize)) {
        let k = self.kernel;
        let s = self.stride;
        for o in 0..self.small_c {
            for i in 0..self.big_c {
                for ky in 0..k {
                    let ys = self.valid(ky, self.pad_top, self.big_h, self.small_h);
                    for kx in 0..k {
                        let xs = self.valid(kx, self.pad_left, self.big_w, self.small_w);
                        if xs.is_empty() {
                            continue;
                        }
                        let widx = ((o * self.big_c + i) * k + ky) * k + kx;
                        for y in ys.clone() {
                            let by = y * s + ky - self.pad_top;
                            let small_row = (o * self.small_h + y) * self.small_w;
                            let big_row = (i * self.big_h + by) * self.big_w;
                            let bx = xs.start * s + kx - self.pad_left;
                            f(small_row + xs.start..small_row + xs.end, big_row + bx, widx);
                        }
                    }
                }
            }
        }
    }

    /// small += conv(big, w)
    pub fn conv(&self, big: &[f64], w: &[f64], small: &mut [f64]) {
        let s = self.stride;
        self.for_each_row(|row, b0, wi| {
            let wv = w[wi];
            for (v, b) in small[row].iter_mut().zip(big[b0..].iter().step_by(s)) {
                *v += wv * b;
            }
        });
    }

    /// big += convᵀ(small, w)
    pub fn conv_transpose(&self, small: &[f64], w: &[f64], big: &mut [f64]) {
        let s = self.stride;
        self.for_each_row(|row, b0, wi| {
            let wv = w[wi];
            for (b, v) in big[b0..].iter_mut().step_by(s).zip(&small[row]) {
                *b += wv * v;
            }
        });
    }

    /// dw += ∂⟨small, conv(big, w)⟩/∂w
    pub fn weight_grad(&self, big: &[f64], small: &[f64], dw: &mut [f64]) {
        let s = self.stride;
        self.for_each_row(|row, b0, wi| {
            let acc: f64 = small[row].iter().zip(big[b0..].iter().step_by(s)).map(|(v, b)| v * b).sum();
            dw[wi] += acc;
        });
    }
}

/// Marks a padded position in an im2col table.
const PAD: usize = usize::MAX;

impl ConvGeom {
    /// For every small position `p` and kernel column `(i, ky, kx)`, the big
    /// index it reads, or [`PAD`]. Row-major `positions × (big_c·k·k)`.
    fn column_table(&self) -> Vec<usize> {
        let k = self.kernel;
        let kc = self.big_c * k * k;
        let mut table = vec![PAD; self.small_h * self.small_w * kc];
        for y in 0..self.small_h {
            for x in 0..self.small_w {
                let row = &mut table[(y * self.small_w + x) * kc..][..kc];
                for i in 0..self.big_c {
                    for ky in 0..k {
                        let by = (y * self.stride + ky).checked_sub(self.pad_top);
                        for kx in 0..k {
                            let bx = (x * self.stride + kx).checked_sub(self.pad_left);
                            if let (Some(by), Some(bx)) = (by, bx) {
                                if by < self.big_h && bx < self.big_w {
                                    row[(i * k + ky) * k + kx] = (i * self.big_h + by) * self.big_w + bx;
                                }
                            }
                        }
                    }
                }
            }
        }
        table
    }
}

fn im2col(big: &[f64], table: &[usize], cols: &mut [f64]) {
    for (c, t) in cols.iter_mut().zip(table) {
        *c = if *t == PAD { 0.0 } else { big[*t] };
    }
}

fn col2im_add(cols: &[f64], table: &[usize], big: &mut [f64]) {
    for (c, t) in cols.iter().zip(table) {
        if *t != PAD {
            big[*t] += c;
        }
    }
}

/// Row and column strides of a matrix view into a flat slice.
#[derive(Clone, Copy)]
struct View(isize, isize);

/// `c = a·b + beta·c` with `a: m×k`, `b: k×n`, `c: m×n` given as strided views.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], va: View, b: &[f64], vb: View, beta: f64, c: &mut [f64], vc: View) {
    let last = |rows: usize, cols: usize, v: View| (rows as isize - 1) * v.0 + (cols as isize - 1) * v.1;
    if m == 0 || n == 0 {
        return;
    }
    assert!(last(m, n, vc) < c.len() as isize);
    if k > 0 {
        assert!(last(m, k, va) < a.len() as isize && last(k, n, vb) < b.len() as isize);
    }
    // SAFETY: the asserts above keep every strided access of all three
    // views inside its slice; strides are non-negative and `c` is the only
    // mutable view.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            va.0,
            va.1,
            b.as_ptr(),
            vb.0,
            vb.1,
            beta,
            c.as_mut_ptr(),
            vc.0,
            vc.1,
        );
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    pub weights: Range<usize>,
    pub bias: Range<usize>,
    geom: Option<ConvGeom>,
    columns: Vec<usize>,
}

fn as_image(shape: &[usize], index: usize, kind: &str) -> Result<[usize; 3]> {
    match shape {
        [c, h, w] => Ok([*c, *h, *w]),
        _ => Err(Error::contract(format!("layer {index} ({kind}) needs a channels×height×width input, got {shape:?}"))),
    }
}

fn require_positive(values: &[usize], index: usize, kind: &str) -> Result<()> {
    if values.contains(&0) {
        return Err(Error::contract(format!("layer {index} ({kind}): sizes must be >= 1")));
    }
    Ok(())
}

/// A feed-forward stack with all parameters in one flat vector, in layer
/// declaration order (weights, then bias, per layer).
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    params: Vec<f64>,
    version: u64,
}

/// Activations saved by [`Network::forward`] for the matching backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// `activations[0]` is the input, `activations[l + 1]` the output of layer `l`.
    pub activations: Vec<Tensor>,
    version: u64,
}

impl ForwardCache {
    pub fn output(&self) -> &Tensor {
        self.activations.last().expect("cache holds at least the input")
    }
}

impl Network {
    /// Builds the stack, inferring shapes and drawing He-style uniform
    /// weights (`±sqrt(6 / fan_in)`) from `seed`; biases start at zero.
    pub fn new(input_shape: Vec<usize>, specs: &[LayerSpec], seed: u64) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::contract(format!("invalid network input shape {input_shape:?}")));
        }
        let mut rng = seed::rng_for(seed, "neuralcore/init", &[]);
        let mut layers = Vec::with_capacity(specs.len());
        let mut params = Vec::new();
        let mut shape = input_shape.clone();
        for (index, spec) in specs.iter().enumerate() {
            let mut geom = None;
            let (out_shape, weight_len, bias_len, fan_in) = match spec {
                LayerSpec::Conv { filters, kernel, stride } => {
                    require_positive(&[*filters, *kernel, *stride], index, "conv")?;
                    let big = as_image(&shape, index, "conv")?;
                    let g = ConvGeom::new(big, *filters, *kernel, *stride);
                    geom = Some(g);
                    (vec![*filters, g.small_h, g.small_w], g.weight_len(), *filters, big[0] * kernel * kernel)
                }
                LayerSpec::Deconv { filters, kernel, stride } => {
                    require_positive(&[*filters, *kernel, *stride], index, "deconv")?;
                    let small = as_image(&shape, index, "deconv")?;
                    let big = [*filters, small[1] * stride, small[2] * stride];
                    let g = ConvGeom::new(big, small[0], *kernel, *stride);
                    debug_assert_eq!((g.small_h, g.small_w), (small[1], small[2]));
                    geom = Some(g);
                    (big.to_vec(), g.weight_len(), *filters, small[0] * kernel * kernel)
                }
                LayerSpec::Dense { units } => {
                    require_positive(&[*units], index, "dense")?;
                    if shape.len() != 1 {
                        return Err(Error::contract(format!(
                            "layer {index} (dense) needs a flat input, got {shape:?}"
                        )));
                    }
                    (vec![*units], units * shape[0], *units, shape[0])
                }
                LayerSpec::Lrelu { .. } | LayerSpec::Sigmoid => (shape.clone(), 0, 0, 1),
                LayerSpec::Flatten => (vec![shape.iter().product()], 0, 0, 1),
                LayerSpec::Reshape { shape: target } => {
                    if target.iter().product::<usize>() != shape.iter().product::<usize>() || target.contains(&0) {
                        return Err(Error::contract(format!(
                            "layer {index} (reshape): cannot reshape {shape:?} into {target:?}"
                        )));
                    }
                    (target.clone(), 0, 0, 1)
                }
            };
            let limit = (6.0 / fan_in as f64).sqrt();
            let w_start = params.len();
            params.extend((0..weight_len).map(|_| rng.gen_range(-limit..limit)));
            let b_start = params.len();
            params.extend(std::iter::repeat(0.0).take(bias_len));
            layers.push(Layer {
                spec: spec.clone(),
                in_shape: shape.clone(),
                out_shape: out_shape.clone(),
                weights: w_start..b_start,
                bias: b_start..params.len(),
                columns: geom.map(|g| g.column_table()).unwrap_or_default(),
                geom,
            });
            shape = out_shape;
        }
        Ok(Network { input_shape, layers, params, version: 0 })
    }

    pub fn output_shape(&self) -> &[usize] {
        self.layers.last().map_or(&self.input_shape, |l| &l.out_shape)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameters. Any forward cache taken before this call becomes stale.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    pub fn forward(&self, input: &Tensor) -> Result<ForwardCache> {
        if input.shape.len() < 2 || input.sample_shape() != self.input_shape.as_slice() {
            return Err(Error::contract(format!(
                "network expects batches of {:?}, got tensor of shape {:?}",
                self.input_shape, input.shape
            )));
        }
        let batch = input.batch();
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.clone());
        for layer in &self.layers {
            let x = activations.last().unwrap();
            let mut shape = vec![batch];
            shape.extend(&layer.out_shape);
            let mut y = Tensor::zeros(shape);
            let w = &self.params[layer.weights.clone()];
            let bias = &self.params[layer.bias.clone()];
            match &layer.spec {
                LayerSpec::Conv { .. } => {
                    let g = layer.geom.unwrap();
                    let (p, kc) = (g.small_h * g.small_w, layer.columns.len() / (g.small_h * g.small_w));
                    let mut cols = vec![0.0; p * kc];
                    for b in 0..batch {
                        im2col(x.sample(b), &layer.columns, &mut cols);
                        let out = y.sample_mut(b);
                        // out[o, q] = Σ_c cols[q, c] · w[o, c]
                        gemm(
                            p,
                            kc,
                            g.small_c,
                            &cols,
                            View(kc as isize, 1),
                            w,
                            View(1, kc as isize),
                            0.0,
                            out,
                            View(1, p as isize),
                        );
                        for (c, bv) in bias.iter().enumerate() {
                            out[c * p..(c + 1) * p].iter_mut().for_each(|v| *v += bv);
                        }
                    }
                }
                LayerSpec::Deconv { .. } => {
                    let g = layer.geom.unwrap();
                    let (p, kc) = (g.small_h * g.small_w, layer.columns.len() / (g.small_h * g.small_w));
                    let plane = g.big_h * g.big_w;
                    let mut cols = vec![0.0; p * kc];
                    for b in 0..batch {
                        // cols[q, c] = Σ_o x[o, q] · w[o, c]
                        gemm(
                            p,
                            g.small_c,
                            kc,
                            x.sample(b),
                            View(1, p as isize),
                            w,
                            View(kc as isize, 1),
                            0.0,
                            &mut cols,
                            View(kc as isize, 1),
                        );
                        let out = y.sample_mut(b);
                        for (c, bv) in bias.iter().enumerate() {
                            out[c * plane..(c + 1) * plane].fill(*bv);
                        }
                        col2im_add(&cols, &layer.columns, out);
                    }
                }
                LayerSpec::Dense { units } => {
                    let n_in = layer.in_shape[0];
                    gemm(
                        batch,
                        n_in,
                        *units,
                        &x.data,
                        View(n_in as isize, 1),
                        w,
                        View(1, n_in as isize),
                        0.0,
                        &mut y.data,
                        View(*units as isize, 1),
                    );
                    for row in y.data.chunks_exact_mut(*units) {
                        row.iter_mut().zip(bias).for_each(|(v, bv)| *v += bv);
                    }
                }
                LayerSpec::Lrelu { slope } => {
                    for (o, v) in y.data.iter_mut().zip(&x.data) {
                        *o = if *v > 0.0 { *v } else { slope * v };
                    }
                }
                LayerSpec::Sigmoid => {
                    for (o, v) in y.data.iter_mut().zip(&x.data) {
                        *o = sigmoid(*v);
                    }
                }
                LayerSpec::Flatten | LayerSpec::Reshape { .. } => y.data.copy_from_slice(&x.data),
            }
            activations.push(y);
        }
        let cache = ForwardCache { activations, version: self.version };
        cache.output().check_finite("network output")?;
        Ok(cache)
    }

    /// Gradients of a scalar loss with respect to every parameter (flat, same
    /// layout as [`Network::params`]) and to the input, given the loss
    /// gradient at the output.
    pub fn backward(&self, cache: &ForwardCache, grad_output: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        if cache.version != self.version || cache.activations.len() != self.layers.len() + 1 {
            return Err(Error::contract("stale forward cache: parameters changed since the forward pass"));
        }
        if grad_output.shape != cache.output().shape {
            return Err(Error::contract(format!(
                "output gradient shape {:?} does not match output {:?}",
                grad_output.shape,
                cache.output().shape
            )));
        }
        let batch = grad_output.batch();
        let mut grads = vec![0.0; self.params.len()];
        let mut dy = grad_output.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let x = &cache.activations[l];
            let mut dx = Tensor::zeros(x.shape.clone());
            let w = &self.params[layer.weights.clone()];
            let (gw, gb) = grads.split_at_mut(layer.bias.start);
            let dw = &mut gw[layer.weights.clone()];
            let db = &mut gb[..layer.bias.len()];
            match &layer.spec {
                LayerSpec::Conv { .. } => {
                    let g = layer.geom.unwrap();
                    let (p, kc) = (g.small_h * g.small_w, layer.columns.len() / (g.small_h * g.small_w));
                    let mut cols = vec![0.0; p * kc];
                    let mut dcols = vec![0.0; p * kc];
                    for b in 0..batch {
                        let dys = dy.sample(b);
                        // dcols[q, c] = Σ_o dy[o, q] · w[o, c]
                        gemm(
                            p,
                            g.small_c,
                            kc,
                            dys,
                            View(1, p as isize),
                            w,
                            View(kc as isize, 1),
                            0.0,
                            &mut dcols,
                            View(kc as isize, 1),
                        );
                        col2im_add(&dcols, &layer.columns, dx.sample_mut(b));
                        // dw[o, c] += Σ_q dy[o, q] · cols[q, c]
                        im2col(x.sample(b), &layer.columns, &mut cols);
                        gemm(
                            g.small_c,
                            p,
                            kc,
                            dys,
                            View(p as isize, 1),
                            &cols,
                            View(kc as isize, 1),
                            1.0,
                            dw,
                            View(kc as isize, 1),
                        );
                        for (c, d) in db.iter_mut().enumerate() {
                            *d += dys[c * p..(c + 1) * p].iter().sum::<f64>();
                        }
                    }
                }
                LayerSpec::Deconv { .. } => {
                    let g = layer.geom.unwrap();
                    let (p, kc) = (g.small_h * g.small_w, layer.columns.len() / (g.small_h * g.small_w));
                    let plane = g.big_h * g.big_w;
                    let mut dcols = vec![0.0; p * kc];
                    for b in 0..batch {
                        let dys = dy.sample(b);
                        let xs = x.sample(b);
                        im2col(dys, &layer.columns, &mut dcols);
                        // dx[o, q] = Σ_c dcols[q, c] · w[o, c]
                        gemm(
                            p,
                            kc,
                            g.small_c,
                            &dcols,
                            View(kc as isize, 1),
                            w,
                            View(1, kc as isize),
                            0.0,
                            dx.sample_mut(b),
                            View(1, p as isize),
                        );
                        // dw[o, c] += Σ_q x[o, q] · dcols[q, c]
                        gemm(
                            g.small_c,
                            p,
                            kc,
                            xs,
                            View(p as isize, 1),
                            &dcols,
                            View(kc as isize, 1),
                            1.0,
                            dw,
                            View(kc as isize, 1),
                        );
                        for (c, d) in db.iter_mut().enumerate() {
                            *d += dys[c * plane..(c + 1) * plane].iter().sum::<f64>();
                        }
                    }
                }
                LayerSpec::Dense { units } => {
                    let n_in = layer.in_shape[0];
                    let u = *units as isize;
                    let ni = n_in as isize;
                    gemm(batch, *units, n_in, &dy.data, View(u, 1), w, View(ni, 1), 0.0, &mut dx.data, View(ni, 1));
                    gemm(*units, batch, n_in, &dy.data, View(1, u), &x.data, View(ni, 1), 1.0, dw, View(ni, 1));
                    for row in dy.data.chunks_exact(*units) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
                LayerSpec::Lrelu { slope } => {
                    for ((d, v), g) in dx.data.iter_mut().zip(&x.data).zip(&dy.data) {
                        *d = if *v > 0.0 { *g } else { slope * g };
                    }
                }
                LayerSpec::Sigmoid => {
                    let y = &cache.activations[l + 1];
                    for ((d, s), g) in dx.data.iter_mut().zip(&y.data).zip(&dy.data) {
                        *d = g * s * (1.0 - s);
                    }
                }
                LayerSpec::Flatten | LayerSpec::Reshape { .. } => dx.data.copy_from_slice(&dy.data),
            }
            dy = dx;
        }
        Ok((grads, dy))
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax of a `rows × cols` matrix.
pub fn softmax_rows(logits: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (row, o) in logits.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (oi, v) in o.iter_mut().zip(row) {
            *oi = (v - max).exp();
            sum += *oi;
        }
        o.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Gradient at the logits given softmax outputs `p` and the gradient at `p`.
pub fn softmax_backward(p: &[f64], grad_p: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; p.len()];
    for ((pr, gr), o) in p.chunks_exact(cols).zip(grad_p.chunks_exact(cols)).zip(out.chunks_exact_mut(cols)) {
        let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((oi, pi), gi) in o.iter_mut().zip(pr).zip(gr) {
            *oi = pi * (gi - dot);
        }
    }
    out
}

pub fn mse(recon: &Tensor, target: &Tensor) -> Result<f64> {
    if recon.shape != target.shape {
        return Err(Error::contract(format!("mse shape mismatch: {:?} vs {:?}", recon.shape, target.shape)));
    }
    if recon.data.is_empty() {
        return Err(Error::contract("mse of empty tensors"));
    }
    let sum: f64 = recon.data.iter().zip(&target.data).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / recon.data.len() as f64)
}

/// Gradient of [`mse`] with respect to `recon`.
pub fn mse_grad(recon: &Tensor, target: &Tensor) -> Result<Tensor> {
    if recon.shape != target.shape {
        return Err(Error::contract("mse shape mismatch"));
    }
    let n = recon.data.len() as f64;
    let data = recon.data.iter().zip(&target.data).map(|(a, b)| 2.0 * (a - b) / n).collect();
    Tensor::new(recon.shape.clone(), data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { eta: 1e-3, beta1: 0.9, beta2: 0.99, epsilon: 1e-7 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::contract("adam eta must be > 0"));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(Error::contract("adam betas must lie in (0, 1)"));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::contract("adam epsilon must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Number of updates applied so far.
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

/// One bias-corrected Adam update.
pub fn adam_update(params: &mut [f64], grads: &[f64], state: &mut AdamState, config: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::contract("adam: parameter, gradient and moment lengths differ"));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
        state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= config.eta * m_hat / (v_hat.sqrt() + config.epsilon);
    }
    Ok(())
}

/// Scales all gradient blocks so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(blocks: &mut [&mut Vec<f64>], max_norm: f64) -> f64 {
    let norm = blocks.iter().flat_map(|b| b.iter()).map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for b in blocks.iter_mut() {
            b.iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}
