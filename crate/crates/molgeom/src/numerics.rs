//! Dense real-matrix kernels shared by every downstream module: matmul,
//! masked last-axis softmax, layer norm, exact-Phi GELU, strided 3x3
//! convolution, window partitioning, and seeded parameter init.
//!
//! All arithmetic runs in f64 with a fixed reduction order so results are
//! bitwise reproducible across runs and thread counts; persisted artifacts
//! downcast to f32 at the serialization boundary.

use thiserror::Error;

/// Additive mask sentinel for padded positions. Finite by choice: keeps
/// masked softmax free of inf/NaN arithmetic while exp(x - max) still
/// underflows to exactly 0.0 for any realistic logit scale.
pub const NEG_INF: f64 = -1e9;

/// Mask entries at or below this are treated as padding.
pub const MASK_THRESHOLD: f64 = -0.5e9;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate mask: every column is masked")]
    DegenerateMask,
}

/// Dense row-major 2D block; rows = tokens, cols = channels.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TokenMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        TokenMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::Shape(format!(
                "data length {} != {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(TokenMatrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> TokenMatrix {
        let mut out = TokenMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Horizontal slice of columns [start, start+len).
    pub fn columns(&self, start: usize, len: usize) -> TokenMatrix {
        assert!(start + len <= self.cols);
        let mut out = TokenMatrix::zeros(self.rows, len);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + len]);
        }
        out
    }

    pub fn add_assign(&mut self, other: &TokenMatrix) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// C = A . B with f64 accumulation in a fixed k-inner order.
pub fn matmul(a: &TokenMatrix, b: &TokenMatrix) -> Result<TokenMatrix, NumericsError> {
    if a.cols != b.rows {
        return Err(NumericsError::Shape(format!(
            "matmul inner dims {} != {}",
            a.cols, b.rows
        )));
    }
    let mut out = TokenMatrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = b.row(k);
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Per-row softmax of (logits + mask) with max subtraction. Mask entries at
/// or below [`MASK_THRESHOLD`] receive exactly zero weight.
pub fn softmax_last_masked(
    logits: &TokenMatrix,
    mask: &[f64],
) -> Result<TokenMatrix, NumericsError> {
    if mask.len() != logits.cols {
        return Err(NumericsError::Shape(format!(
            "mask length {} != logit cols {}",
            mask.len(),
            logits.cols
        )));
    }
    if mask.iter().all(|&m| m <= MASK_THRESHOLD) {
        return Err(NumericsError::DegenerateMask);
    }
    let mut out = TokenMatrix::zeros(logits.rows, logits.cols);
    for r in 0..logits.rows {
        let row = logits.row(r);
        let mut mx = f64::NEG_INFINITY;
        for (v, m) in row.iter().zip(mask) {
            let z = v + m;
            if z > mx {
                mx = z;
            }
        }
        let orow = out.row_mut(r);
        let mut sum = 0.0;
        for ((o, v), m) in orow.iter_mut().zip(row).zip(mask) {
            let e = (v + m - mx).exp();
            *o = e;
            sum += e;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    Ok(out)
}

/// Per-row layer normalization with affine gain/bias; biased variance.
pub fn layer_norm(
    x: &TokenMatrix,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> Result<TokenMatrix, NumericsError> {
    if gain.len() != x.cols || bias.len() != x.cols {
        return Err(NumericsError::Shape(format!(
            "layer_norm affine length {}/{} != cols {}",
            gain.len(),
            bias.len(),
            x.cols
        )));
    }
    let mut out = TokenMatrix::zeros(x.rows, x.cols);
    let n = x.cols as f64;
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        let orow = out.row_mut(r);
        for i in 0..x.cols {
            orow[i] = (row[i] - mean) * inv * gain[i] + bias[i];
        }
    }
    Ok(out)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Exact Gaussian-CDF GELU: x * Phi(x).
pub fn gelu_scalar(x: f64) -> f64 {
    x * 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// d/dx of exact GELU: Phi(x) + x * phi(x).
pub fn gelu_prime(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_cdf + x * pdf
}

pub fn gelu(x: &TokenMatrix) -> TokenMatrix {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = gelu_scalar(*v);
    }
    out
}

/// Spatial grid of channel vectors, h x w x c, row-major (y, x, channel).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Grid {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.len() != h * w * c {
            return Err(NumericsError::Shape(format!(
                "grid data length {} != {}x{}x{}",
                data.len(),
                h,
                w,
                c
            )));
        }
        Ok(Grid { h, w, c, data })
    }

    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: f64) {
        self.data[(y * self.w + x) * self.c + ch] = v;
    }

    pub fn cell(&self, y: usize, x: usize) -> &[f64] {
        let base = (y * self.w + x) * self.c;
        &self.data[base..base + self.c]
    }

    pub fn cell_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let base = (y * self.w + x) * self.c;
        &mut self.data[base..base + self.c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// 3x3 convolution weights, c_out x c_in x 3 x 3 row-major, plus bias.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    pub c_out: usize,
    pub c_in: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv3x3 {
    pub fn zeros(c_out: usize, c_in: usize) -> Self {
        Conv3x3 {
            c_out,
            c_in,
            weights: vec![0.0; c_out * c_in * 9],
            bias: vec![0.0; c_out],
        }
    }

    pub fn seeded(c_out: usize, c_in: usize, seed: u64) -> Self {
        let bound = 1.0 / ((c_in * 9) as f64).sqrt();
        let rng = CounterRng::new(seed);
        let weights = (0..c_out * c_in * 9)
            .map(|i| rng.uniform_at(i as u64, bound))
            .collect();
        let bias = (0..c_out)
            .map(|i| rng.uniform_at((c_out * c_in * 9 + i) as u64, bound))
            .collect();
        Conv3x3 {
            c_out,
            c_in,
            weights,
            bias,
        }
    }

    fn weight(&self, co: usize, ci: usize, ky: usize, kx: usize) -> f64 {
        self.weights[((co * self.c_in + ci) * 3 + ky) * 3 + kx]
    }
}

/// 3x3 convolution, stride 2, zero padding 1; output extents ceil(h/2) x ceil(w/2).
pub fn conv3x3_s2(g: &Grid, conv: &Conv3x3) -> Result<Grid, NumericsError> {
    if conv.c_in != g.c {
        return Err(NumericsError::Shape(format!(
            "conv c_in {} != grid channels {}",
            conv.c_in, g.c
        )));
    }
    let oh = g.h.div_ceil(2);
    let ow = g.w.div_ceil(2);
    let mut out = Grid::zeros(oh, ow, conv.c_out);
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..conv.c_out {
                let mut acc = conv.bias[co];
                for ky in 0..3 {
                    let iy = (2 * oy + ky) as isize - 1;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (2 * ox + kx) as isize - 1;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let cell = g.cell(iy as usize, ix as usize);
                        for (ci, &v) in cell.iter().enumerate() {
                            acc += v * conv.weight(co, ci, ky, kx);
                        }
                    }
                }
                out.set(oy, ox, co, acc);
            }
        }
    }
    Ok(out)
}

/// Bookkeeping for reversing a window partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PadRecord {
    pub orig_h: usize,
    pub orig_w: usize,
    pub padded_h: usize,
    pub padded_w: usize,
    pub wins_y: usize,
    pub wins_x: usize,
    pub w_size: usize,
}

/// Zero-pad to multiples of `w_size` and split into non-overlapping
/// w_size x w_size windows, row-major over window positions.
pub fn window_partition(g: &Grid, w_size: usize) -> (Vec<Grid>, PadRecord) {
    assert!(w_size >= 1, "window size must be >= 1");
    let wins_y = g.h.div_ceil(w_size);
    let wins_x = g.w.div_ceil(w_size);
    let rec = PadRecord {
        orig_h: g.h,
        orig_w: g.w,
        padded_h: wins_y * w_size,
        padded_w: wins_x * w_size,
        wins_y,
        wins_x,
        w_size,
    };
    let mut windows = Vec::with_capacity(wins_y * wins_x);
    for wy in 0..wins_y {
        for wx in 0..wins_x {
            let mut win = Grid::zeros(w_size, w_size, g.c);
            for y in 0..w_size {
                let gy = wy * w_size + y;
                if gy >= g.h {
                    continue;
                }
                for x in 0..w_size {
                    let gx = wx * w_size + x;
                    if gx >= g.w {
                        continue;
                    }
                    win.cell_mut(y, x).copy_from_slice(g.cell(gy, gx));
                }
            }
            windows.push(win);
        }
    }
    (windows, rec)
}

/// Inverse of [`window_partition`]: restores the original extents exactly.
pub fn window_unpartition(windows: &[Grid], rec: &PadRecord) -> Result<Grid, NumericsError> {
    if windows.len() != rec.wins_y * rec.wins_x {
        return Err(NumericsError::Shape(format!(
            "window count {} != {}x{}",
            windows.len(),
            rec.wins_y,
            rec.wins_x
        )));
    }
    let c = windows.first().map(|w| w.c).unwrap_or(0);
    let mut out = Grid::zeros(rec.orig_h, rec.orig_w, c);
    for wy in 0..rec.wins_y {
        for wx in 0..rec.wins_x {
            let win = &windows[wy * rec.wins_x + wx];
            if win.h != rec.w_size || win.w != rec.w_size || win.c != c {
                return Err(NumericsError::Shape("inconsistent window extents".into()));
            }
            for y in 0..rec.w_size {
                let gy = wy * rec.w_size + y;
                if gy >= rec.orig_h {
                    continue;
                }
                for x in 0..rec.w_size {
                    let gx = wx * rec.w_size + x;
                    if gx >= rec.orig_w {
                        continue;
                    }
                    out.cell_mut(gy, gx).copy_from_slice(win.cell(y, x));
                }
            }
        }
    }
    Ok(out)
}

/// Stateless counter-based generator (splitmix64 finalizer over an indexed
/// stream). The value at index i depends only on (seed, i), so parameter
/// blocks are reproducible bit-for-bit regardless of generation order.
#[derive(Debug, Clone, Copy)]
pub struct CounterRng {
    seed: u64,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        CounterRng { seed }
    }

    /// Independent substream for a labeled parameter group.
    pub fn derive(&self, stream: u64) -> CounterRng {
        CounterRng {
            seed: splitmix64(self.seed ^ splitmix64(stream.wrapping_mul(GOLDEN))),
        }
    }

    pub fn u64_at(&self, i: u64) -> u64 {
        splitmix64(self.seed.wrapping_add(i.wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1) with 53-bit resolution.
    pub fn unit_f64_at(&self, i: u64) -> f64 {
        (self.u64_at(i) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in (-bound, +bound).
    pub fn uniform_at(&self, i: u64, bound: f64) -> f64 {
        (2.0 * self.unit_f64_at(i) - 1.0) * bound
    }
}

/// Seeded weight matrix, uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) with
/// fan_in = rows (the left operand dimension in x . W).
pub fn seeded_params(rows: usize, cols: usize, seed: u64) -> TokenMatrix {
    let bound = 1.0 / (rows.max(1) as f64).sqrt();
    let rng = CounterRng::new(seed);
    let data = (0..rows * cols)
        .map(|i| rng.uniform_at(i as u64, bound))
        .collect();
    TokenMatrix {
        rows,
        cols,
        data,
    }
}

/// Seeded vector, uniform(-bound, +bound).
pub fn seeded_vector(len: usize, bound: f64, seed: u64) -> Vec<f64> {
    let rng = CounterRng::new(seed);
    (0..len).map(|i| rng.uniform_at(i as u64, bound)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = TokenMatrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let i = TokenMatrix::identity(3);
        assert_eq!(matmul(&a, &i).unwrap(), a);
    }

    #[test]
    fn matmul_hand_product() {
        // (2x3) . (3x2), six entries checked against a hand computation
        let a = TokenMatrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = TokenMatrix::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        // row 0: 1*7+2*9+3*11 = 58, 1*8+2*10+3*12 = 64
        // row 1: 4*7+5*9+6*11 = 139, 4*8+5*10+6*12 = 154
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_shape_error() {
        let a = TokenMatrix::zeros(2, 3);
        let b = TokenMatrix::zeros(2, 2);
        assert!(matches!(matmul(&a, &b), Err(NumericsError::Shape(_))));
    }

    #[test]
    fn matmul_scalar_case() {
        let a = TokenMatrix::from_vec(1, 1, vec![3.0]).unwrap();
        let b = TokenMatrix::from_vec(1, 1, vec![4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().get(0, 0), 12.0);
    }

    #[test]
    fn softmax_uniform() {
        let logits = TokenMatrix::from_vec(1, 4, vec![0.7; 4]).unwrap();
        let w = softmax_last_masked(&logits, &[0.0; 4]).unwrap();
        for c in 0..4 {
            assert!((w.get(0, c) - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_single_unmasked_column() {
        let logits = TokenMatrix::from_vec(1, 3, vec![0.3, -2.0, 5.0]).unwrap();
        let w = softmax_last_masked(&logits, &[NEG_INF, 0.0, NEG_INF]).unwrap();
        assert_eq!(w.get(0, 1), 1.0);
        assert!(w.get(0, 0) <= 1e-12 && w.get(0, 2) <= 1e-12);
    }

    #[test]
    fn softmax_sentinel_magnitude() {
        let logits = TokenMatrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        let w = softmax_last_masked(&logits, &[0.0, NEG_INF]).unwrap();
        assert_eq!(w.get(0, 0), 1.0);
        assert!(w.get(0, 1) <= 1e-12);
    }

    #[test]
    fn softmax_degenerate_mask() {
        let logits = TokenMatrix::zeros(1, 2);
        assert!(matches!(
            softmax_last_masked(&logits, &[NEG_INF, NEG_INF]),
            Err(NumericsError::DegenerateMask)
        ));
    }

    #[test]
    fn layer_norm_constant_row() {
        let x = TokenMatrix::from_vec(1, 4, vec![5.0; 4]).unwrap();
        let y = layer_norm(&x, &[1.0; 4], &[0.0; 4], LAYER_NORM_EPS).unwrap();
        for c in 0..4 {
            assert_eq!(y.get(0, c), 0.0);
        }
    }

    #[test]
    fn layer_norm_two_point() {
        let x = TokenMatrix::from_vec(1, 2, vec![1.0, -1.0]).unwrap();
        let y = layer_norm(&x, &[1.0; 2], &[0.0; 2], LAYER_NORM_EPS).unwrap();
        let expect = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!((y.get(0, 0) - expect).abs() < 1e-12);
        assert!((y.get(0, 1) + expect).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_statistics() {
        let rng = CounterRng::new(77);
        let data: Vec<f64> = (0..8 * 16).map(|i| rng.uniform_at(i, 3.0)).collect();
        let x = TokenMatrix::from_vec(8, 16, data).unwrap();
        let y = layer_norm(&x, &[1.0; 16], &[0.0; 16], LAYER_NORM_EPS).unwrap();
        for r in 0..8 {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6, "row mean {mean}");
            assert!((var - 1.0).abs() < 1e-5, "row var {var}");
        }
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        // frozen from an erf oracle: 3 * Phi(3) = 2.99595030590511
        assert!((gelu_scalar(3.0) - 2.9960).abs() < 1e-3);
        assert!((gelu_scalar(3.0) - 2.99595030590511).abs() < 1e-12);
        assert!((gelu_scalar(1.0) - 0.8413447460685429).abs() < 1e-12);
        assert!((gelu_scalar(-1.0) + 0.15865525393145707).abs() < 1e-12);
    }

    #[test]
    fn gelu_prime_matches_finite_difference() {
        for &x in &[-2.0, -0.5, 0.0, 0.3, 1.7] {
            let h = 1e-6;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((gelu_prime(x) - fd).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn conv_shapes_halve_twice() {
        let g = Grid::zeros(64, 64, 2);
        let conv = Conv3x3::seeded(2, 2, 9);
        let o1 = conv3x3_s2(&g, &conv).unwrap();
        assert_eq!((o1.h, o1.w), (32, 32));
        let o2 = conv3x3_s2(&o1, &conv).unwrap();
        assert_eq!((o2.h, o2.w), (16, 16));
    }

    #[test]
    fn conv_identity_kernel_samples_even_pixels() {
        let mut g = Grid::zeros(6, 6, 1);
        for y in 0..6 {
            for x in 0..6 {
                g.set(y, x, 0, (y * 10 + x) as f64);
            }
        }
        let mut conv = Conv3x3::zeros(1, 1);
        conv.weights[4] = 1.0; // center tap
        let o = conv3x3_s2(&g, &conv).unwrap();
        for oy in 0..3 {
            for ox in 0..3 {
                assert_eq!(o.get(oy, ox, 0), (2 * oy * 10 + 2 * ox) as f64);
            }
        }
    }

    #[test]
    fn conv_zero_kernel_gives_bias() {
        let g = Grid::from_vec(4, 4, 1, (0..16).map(|v| v as f64).collect()).unwrap();
        let mut conv = Conv3x3::zeros(2, 1);
        conv.bias = vec![2.5, -1.0];
        let o = conv3x3_s2(&g, &conv).unwrap();
        for y in 0..o.h {
            for x in 0..o.w {
                assert_eq!(o.get(y, x, 0), 2.5);
                assert_eq!(o.get(y, x, 1), -1.0);
            }
        }
    }

    #[test]
    fn conv_channel_mismatch() {
        let g = Grid::zeros(4, 4, 3);
        let conv = Conv3x3::zeros(1, 2);
        assert!(conv3x3_s2(&g, &conv).is_err());
    }

    #[test]
    fn window_partition_64_by_14() {
        // ceil(64/14) = 5 per axis -> padded to 70x70, 25 windows
        let g = Grid::zeros(64, 64, 1);
        let (wins, rec) = window_partition(&g, 14);
        assert_eq!(wins.len(), 25);
        assert_eq!((rec.padded_h, rec.padded_w), (70, 70));
    }

    #[test]
    fn window_partition_exact_fit() {
        let g = Grid::zeros(14, 14, 3);
        let (wins, rec) = window_partition(&g, 14);
        assert_eq!(wins.len(), 1);
        assert_eq!((rec.padded_h, rec.padded_w), (14, 14));
    }

    #[test]
    fn window_roundtrip_identity() {
        let rng = CounterRng::new(5);
        let data: Vec<f64> = (0..9 * 11 * 2).map(|i| rng.uniform_at(i, 1.0)).collect();
        let g = Grid::from_vec(9, 11, 2, data).unwrap();
        let (wins, rec) = window_partition(&g, 4);
        let back = window_unpartition(&wins, &rec).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn seeded_params_deterministic() {
        let a = seeded_params(7, 5, 42);
        let b = seeded_params(7, 5, 42);
        assert_eq!(a.data(), b.data());
        let c = seeded_params(7, 5, 43);
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn seeded_params_mean_within_three_sigma() {
        let n = 10_000usize;
        let m = seeded_params(n, 1, 2024);
        let b = 1.0 / (n as f64).sqrt();
        let mean = m.data().iter().sum::<f64>() / n as f64;
        // var of U(-b, b) = b^2/3; sigma of the mean = b / sqrt(3n)
        let sigma = b / (3.0 * n as f64).sqrt();
        assert!(mean.abs() < 3.0 * sigma, "mean {mean} sigma {sigma}");
    }

    #[test]
    fn counter_rng_unit_range() {
        let rng = CounterRng::new(1);
        for i in 0..1000 {
            let u = rng.unit_f64_at(i);
            assert!((0.0..1.0).contains(&u));
        }
    }
}
