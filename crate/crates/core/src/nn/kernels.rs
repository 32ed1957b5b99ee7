//! Raw slice kernels shared by the functional layer API and the autodiff tape.
//!
//! Every routine here is deterministic: the accumulation order depends only on
//! the shapes, never on threading or data values.

/// Column block width for the matrix kernels; keeps a `k x NB` panel of the
/// right-hand operand resident in cache while every output row is updated.
const NB: usize = 256;

/// `c[m x n] += a[m x k] * b[k x n]`
pub fn gemm_nn(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut j0 = 0;
    while j0 < n {
        let j1 = (j0 + NB).min(n);
        for i in 0..m {
            let c_row = &mut c[i * n + j0..i * n + j1];
            let a_row = &a[i * k..(i + 1) * k];
            for (kk, &aik) in a_row.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let b_row = &b[kk * n + j0..kk * n + j1];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv += aik * bv;
                }
            }
        }
        j0 = j1;
    }
}

/// `c[m x p] += a[m x n] * b[p x n]^T`
pub fn gemm_nt(m: usize, p: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), p * n);
    debug_assert_eq!(c.len(), m * p);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for j in 0..p {
            let b_row = &b[j * n..(j + 1) * n];
            c[i * p + j] += dot(a_row, b_row);
        }
    }
}

/// `c[k x n] += a[m x k]^T * b[m x n]`
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    let mut j0 = 0;
    while j0 < n {
        let j1 = (j0 + NB).min(n);
        for i in 0..m {
            let b_row = &b[i * n + j0..i * n + j1];
            for kk in 0..k {
                let aik = a[i * k + kk];
                if aik == 0.0 {
                    continue;
                }
                let c_row = &mut c[kk * n + j0..kk * n + j1];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv += aik * bv;
                }
            }
        }
        j0 = j1;
    }
}

/// Four-lane dot product; fixed association order so results are reproducible.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let o = c * 4;
        acc[0] += a[o] * b[o];
        acc[1] += a[o + 1] * b[o + 1];
        acc[2] += a[o + 2] * b[o + 2];
        acc[3] += a[o + 3] * b[o + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Unfolds a `[c, h, w]` image into `[c * 9, h * w]` columns for a 3x3 kernel
/// with padding 1 and stride 1.
pub fn im2col3x3(input: &[f64], c: usize, h: usize, w: usize, cols: &mut [f64]) {
    let hw = h * w;
    debug_assert_eq!(cols.len(), c * 9 * hw);
    for ci in 0..c {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * hw;
                let dst = &mut cols[row..row + hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst_row = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst_row[0] = 0.0;
                            dst_row[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst_row.copy_from_slice(src),
                        _ => {
                            dst_row[..w - 1].copy_from_slice(&src[1..]);
                            dst_row[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3x3`]: scatters column gradients back onto the image.
pub fn col2im3x3(cols: &[f64], c: usize, h: usize, w: usize, out: &mut [f64]) {
    let hw = h * w;
    debug_assert_eq!(out.len(), c * hw);
    for ci in 0..c {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * hw;
                let src = &cols[row..row + hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = &src[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            for (d, s) in dst[..w - 1].iter_mut().zip(&src_row[1..]) {
                                *d += s;
                            }
                        }
                        1 => {
                            for (d, s) in dst.iter_mut().zip(src_row) {
                                *d += s;
                            }
                        }
                        _ => {
                            for (d, s) in dst[1..].iter_mut().zip(&src_row[..w - 1]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 3x3 same-padding convolution. Returns the output and the unfolded columns
/// (the backward pass needs them).
pub fn conv3x3_forward(
    input: &[f64],
    weights: &[f64],
    bias: &[f64],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<f64>) {
    let hw = h * w;
    let mut cols = vec![0.0; c_in * 9 * hw];
    im2col3x3(input, c_in, h, w, &mut cols);
    let mut out = vec![0.0; c_out * hw];
    for (co, &b) in bias.iter().enumerate() {
        out[co * hw..(co + 1) * hw].fill(b);
    }
    gemm_nn(c_out, hw, c_in * 9, weights, &cols, &mut out);
    (out, cols)
}

pub struct ConvGrads {
    pub input: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv3x3_backward(
    grad_out: &[f64],
    cols: &[f64],
    weights: &[f64],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
) -> ConvGrads {
    let hw = h * w;
    let k = c_in * 9;
    let mut grad_w = vec![0.0; c_out * k];
    gemm_nt(c_out, k, hw, grad_out, cols, &mut grad_w);
    let grad_b = (0..c_out)
        .map(|co| grad_out[co * hw..(co + 1) * hw].iter().sum())
        .collect();
    let mut grad_cols = vec![0.0; k * hw];
    gemm_tn(c_out, k, hw, weights, grad_out, &mut grad_cols);
    let mut grad_in = vec![0.0; c_in * hw];
    col2im3x3(&grad_cols, c_in, h, w, &mut grad_in);
    ConvGrads {
        input: grad_in,
        weights: grad_w,
        bias: grad_b,
    }
}

/// 2x2 max pooling with stride 2 (floor semantics). Returns the pooled values
/// and the flat input index each output was taken from; ties resolve to the
/// first cell in scan order.
pub fn maxpool2x2_forward(input: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        let base = ci * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + 2 * oy * w + 2 * ox;
                let mut best = input[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[idx] > best {
                        best = input[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax)
}

/// `out[b, o] = bias[o] + sum_i input[b, i] * weights[o, i]`
pub fn linear_forward(
    input: &[f64],
    weights: &[f64],
    bias: &[f64],
    batch: usize,
    f_in: usize,
    f_out: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(batch * f_out);
    for _ in 0..batch {
        out.extend_from_slice(bias);
    }
    gemm_nt(batch, f_out, f_in, input, weights, &mut out);
    out
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(logits: &[f64], rows: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * k];
    for r in 0..rows {
        let row = &logits[r * k..(r + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut out[r * k..(r + 1) * k];
        let mut sum = 0.0;
        for (d, &l) in dst.iter_mut().zip(row) {
            *d = (l - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}

/// Mean cross-entropy of `targets` under row-wise softmax of `logits`, plus the
/// softmax probabilities.
pub fn softmax_cross_entropy(logits: &[f64], targets: &[usize], k: usize) -> (f64, Vec<f64>) {
    let rows = targets.len();
    let probs = softmax_rows(logits, rows, k);
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = &logits[r * k..(r + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum: f64 = row.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
        total -= row[t] - max - log_sum;
    }
    (total / rows as f64, probs)
}

/// Sparse interpolation stencil: for each output point, a short list of
/// `(flat spatial cell, weight)` pairs into a `[C, H, W]` map.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Taps {
    start: Vec<usize>,
    cells: Vec<usize>,
    weights: Vec<f64>,
}

impl Taps {
    pub fn new() -> Self {
        Self {
            start: vec![0],
            cells: Vec::new(),
            weights: Vec::new(),
        }
    }

    pub fn with_capacity(points: usize) -> Self {
        let mut start = Vec::with_capacity(points + 1);
        start.push(0);
        Self {
            start,
            cells: Vec::with_capacity(points * 4),
            weights: Vec::with_capacity(points * 4),
        }
    }

    /// Appends one point. Zero-weight cells are dropped so that a point on
    /// the grid reads its cell without any additive rounding.
    pub fn push_point(&mut self, taps: impl IntoIterator<Item = (usize, f64)>) {
        if self.start.is_empty() {
            self.start.push(0);
        }
        for (cell, weight) in taps {
            if weight != 0.0 {
                self.cells.push(cell);
                self.weights.push(weight);
            }
        }
        self.start.push(self.cells.len());
    }

    pub fn len(&self) -> usize {
        self.start.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, p: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.start[p]..self.start[p + 1];
        self.cells[range.clone()]
            .iter()
            .copied()
            .zip(self.weights[range].iter().copied())
    }

    pub(crate) fn check_bounds(&self, plane: usize) -> crate::error::Result<()> {
        match self.cells.iter().find(|&&c| c >= plane) {
            Some(&c) => Err(crate::error::Error::invalid(
                "gather",
                format!("cell {c} outside plane of {plane} cells"),
            )),
            None => Ok(()),
        }
    }
}

/// `out[p, c] = sum_t w_t * map[c, cell_t]` over the taps of point `p`.
pub fn gather_weighted(map: &[f64], channels: usize, plane: usize, taps: &Taps) -> Vec<f64> {
    let points = taps.len();
    let mut out = vec![0.0; points * channels];
    for p in 0..points {
        let row = &mut out[p * channels..(p + 1) * channels];
        for (c, dst) in row.iter_mut().enumerate() {
            let base = c * plane;
            let mut it = taps.point(p);
            // Start from the first product rather than 0.0 so a single unit
            // tap reproduces the stored value bit for bit (including -0.0).
            let Some((cell, w)) = it.next() else {
                continue;
            };
            let mut acc = w * map[base + cell];
            for (cell, w) in it {
                acc += w * map[base + cell];
            }
            *dst = acc;
        }
    }
    out
}

pub fn gather_weighted_backward(
    grad_out: &[f64],
    channels: usize,
    plane: usize,
    taps: &Taps,
    grad_map: &mut [f64],
) {
    for p in 0..taps.len() {
        let row = &grad_out[p * channels..(p + 1) * channels];
        for (cell, w) in taps.point(p) {
            for (c, &g) in row.iter().enumerate() {
                grad_map[c * plane + cell] += w * g;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_mm(m: usize, n: usize, k: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for kk in 0..k {
                    c[i * n + j] += a[i * k + kk] * b[kk * n + j];
                }
            }
        }
        c
    }

    fn seq(n: usize, scale: f64) -> Vec<f64> {
        (0..n)
            .map(|i| ((i * 37 % 11) as f64 - 5.0) * scale)
            .collect()
    }

    #[test]
    fn gemm_variants_agree_with_naive_product() {
        let (m, n, k) = (5, 300, 7);
        let a = seq(m * k, 0.3);
        let b = seq(k * n, 0.7);
        let expect = naive_mm(m, n, k, &a, &b);

        let mut c = vec![0.0; m * n];
        gemm_nn(m, n, k, &a, &b, &mut c);
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }

        // a * (b^T)^T through gemm_nt
        let mut bt = vec![0.0; n * k];
        for i in 0..k {
            for j in 0..n {
                bt[j * k + i] = b[i * n + j];
            }
        }
        let mut c = vec![0.0; m * n];
        gemm_nt(m, n, k, &a, &bt, &mut c);
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }

        // (a^T)^T * b through gemm_tn
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for j in 0..k {
                at[j * m + i] = a[i * k + j];
            }
        }
        let mut c = vec![0.0; m * n];
        gemm_tn(k, m, n, &at, &b, &mut c);
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let (c, h, w) = (2, 4, 5);
        let x = seq(c * h * w, 0.5);
        let y = seq(c * 9 * h * w, 0.25);
        let mut cols = vec![0.0; y.len()];
        im2col3x3(&x, c, h, w, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im3x3(&y, c, h, w, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn width_one_images_unfold() {
        let x = [1.0, 2.0, 3.0];
        let mut cols = vec![0.0; 27];
        im2col3x3(&x, 1, 3, 1, &mut cols);
        // centre tap reproduces the input
        assert_eq!(&cols[4 * 3..5 * 3], &x);
    }
}
