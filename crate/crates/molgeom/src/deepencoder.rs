//! Dual-pathway high-resolution image encoder: patch embedding, a windowed
//! local transformer, a strided convolutional token compressor, a dense
//! global transformer, and channel concatenation of the two pathways.
//!
//! Full-scale constants follow the published pipeline (1024x1024 input,
//! patch 16, window 14, width 1024, 4096 -> 256 token compression); depth
//! and width are configurable so desk-scale runs exercise every code path.

use crate::numerics::{
    self, conv3x3_s2, gelu, layer_norm, matmul, seeded_params, seeded_vector, softmax_last_masked,
    window_partition, window_unpartition, Conv3x3, CounterRng, Grid, TokenMatrix, LAYER_NORM_EPS,
};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("image error: {0}")]
    Image(String),
}

impl From<numerics::NumericsError> for EncoderError {
    fn from(e: numerics::NumericsError) -> Self {
        EncoderError::Shape(e.to_string())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderConfig {
    /// Image side length (height == width).
    pub img: usize,
    /// Patch size.
    pub p: usize,
    /// Local attention window (in patch-grid cells).
    pub window: usize,
    /// Channel width of both towers.
    pub d: usize,
    pub local_layers: usize,
    pub global_layers: usize,
    pub heads: usize,
    pub seed: u64,
    /// Learned additive 2D positional embeddings after patchify; disable to
    /// make the whole encoder permutation-equivariant for testing.
    pub use_pos_embed: bool,
}

impl EncoderConfig {
    /// Full-scale constants: 12-layer local tower, 24-layer global tower,
    /// width 1024, window 14 on a 64x64 patch grid.
    pub fn paper() -> Self {
        EncoderConfig {
            img: 1024,
            p: 16,
            window: 14,
            d: 1024,
            local_layers: 12,
            global_layers: 24,
            heads: 16,
            seed: 0,
            use_pos_embed: true,
        }
    }

    /// Desk-scale defaults: everything runs in milliseconds.
    pub fn desk(seed: u64) -> Self {
        EncoderConfig {
            img: 64,
            p: 16,
            window: 2,
            d: 32,
            local_layers: 2,
            global_layers: 2,
            heads: 4,
            seed,
            use_pos_embed: true,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.p == 0 || self.img % self.p != 0 {
            return Err(EncoderError::Shape(format!(
                "image side {} not divisible by patch size {}",
                self.img, self.p
            )));
        }
        let side = self.img / self.p;
        if side % 4 != 0 {
            return Err(EncoderError::Shape(format!(
                "patch grid side {side} must be divisible by 4 for the 16x token compressor"
            )));
        }
        if self.d == 0 || self.d % self.heads != 0 {
            return Err(EncoderError::Shape(format!(
                "width {} not divisible by heads {}",
                self.d, self.heads
            )));
        }
        if self.window == 0 {
            return Err(EncoderError::Shape("window must be >= 1".into()));
        }
        Ok(())
    }

    /// Patch-grid side; the local tower sees side^2 tokens.
    pub fn grid_side(&self) -> usize {
        self.img / self.p
    }

    pub fn n_tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Compressed token count; exactly n_tokens / 16.
    pub fn m_tokens(&self) -> usize {
        let s = self.grid_side().div_ceil(2).div_ceil(2);
        s * s
    }
}

/// Square RGB image with values in [0, 1].
#[derive(Debug, Clone)]
pub struct ImageTensor {
    pub side: usize,
    data: Vec<f64>,
}

pub const IMAGE_CHANNELS: usize = 3;
const RAW_IMAGE_MAGIC: &[u8; 8] = b"MGIMGF01";

impl ImageTensor {
    pub fn from_pixels(side: usize, data: Vec<f64>) -> Result<Self, EncoderError> {
        if data.len() != side * side * IMAGE_CHANNELS {
            return Err(EncoderError::Shape(format!(
                "pixel buffer {} != {side}x{side}x{IMAGE_CHANNELS}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(EncoderError::Image(
                "pixel values must be finite and within [0, 1]".into(),
            ));
        }
        Ok(ImageTensor { side, data })
    }

    /// Seeded synthetic image; deterministic in (side, seed).
    pub fn synthetic(side: usize, seed: u64) -> Self {
        let rng = CounterRng::new(seed);
        let data = (0..side * side * IMAGE_CHANNELS)
            .map(|i| rng.unit_f64_at(i as u64))
            .collect();
        ImageTensor { side, data }
    }

    pub fn pixel(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.side + x) * IMAGE_CHANNELS + ch]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize, ch: usize) -> &mut f64 {
        &mut self.data[(y * self.side + x) * IMAGE_CHANNELS + ch]
    }

    /// Binary P6 PPM with maxval 255.
    pub fn from_ppm(bytes: &[u8]) -> Result<Self, EncoderError> {
        fn next_token(bytes: &[u8], mut i: usize) -> Result<(usize, usize), EncoderError> {
            loop {
                while i < bytes.len() && bytes[i].is_ascii_whitespace() {
                    i += 1;
                }
                if i < bytes.len() && bytes[i] == b'#' {
                    while i < bytes.len() && bytes[i] != b'\n' {
                        i += 1;
                    }
                    continue;
                }
                break;
            }
            let start = i;
            while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if start == i {
                return Err(EncoderError::Image("truncated PPM header".into()));
            }
            Ok((start, i))
        }
        fn parse_usize(bytes: &[u8], range: (usize, usize)) -> Result<usize, EncoderError> {
            std::str::from_utf8(&bytes[range.0..range.1])
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| EncoderError::Image("bad PPM header field".into()))
        }
        if bytes.len() < 2 || &bytes[0..2] != b"P6" {
            return Err(EncoderError::Image("not a P6 PPM".into()));
        }
        let (s1, e1) = next_token(bytes, 2)?;
        let (s2, e2) = next_token(bytes, e1)?;
        let (s3, e3) = next_token(bytes, e2)?;
        let w = parse_usize(bytes, (s1, e1))?;
        let h = parse_usize(bytes, (s2, e2))?;
        let maxval = parse_usize(bytes, (s3, e3))?;
        if maxval != 255 {
            return Err(EncoderError::Image(format!("unsupported maxval {maxval}")));
        }
        if w != h {
            return Err(EncoderError::Image(format!("image must be square, got {w}x{h}")));
        }
        let data_start = e3 + 1; // single whitespace byte after maxval
        let need = w * h * IMAGE_CHANNELS;
        let raster = bytes
            .get(data_start..data_start + need)
            .ok_or_else(|| EncoderError::Image("truncated PPM raster".into()))?;
        let data = raster.iter().map(|&b| b as f64 / 255.0).collect();
        Ok(ImageTensor { side: w, data })
    }

    /// Raw float tensor: 8-byte magic, h/w/c as little-endian u32, then
    /// h*w*c little-endian f32 values.
    pub fn from_raw(bytes: &[u8]) -> Result<Self, EncoderError> {
        if bytes.len() < 20 || &bytes[0..8] != RAW_IMAGE_MAGIC {
            return Err(EncoderError::Image("not a raw image tensor".into()));
        }
        let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let c = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
        if c != IMAGE_CHANNELS || h != w {
            return Err(EncoderError::Image(format!(
                "raw tensor must be square with {IMAGE_CHANNELS} channels, got {h}x{w}x{c}"
            )));
        }
        let need = h * w * c * 4;
        let raster = bytes
            .get(20..20 + need)
            .ok_or_else(|| EncoderError::Image("truncated raw tensor".into()))?;
        let data: Vec<f64> = raster
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        Self::from_pixels(h, data)
    }

    pub fn to_raw(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.data.len() * 4);
        out.extend_from_slice(RAW_IMAGE_MAGIC);
        for v in [self.side as u32, self.side as u32, IMAGE_CHANNELS as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }
}

/// One pre-norm transformer block: attention then feed-forward, both under
/// residual connections.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub w_q: TokenMatrix,
    pub w_k: TokenMatrix,
    pub w_v: TokenMatrix,
    pub w_o: TokenMatrix,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    pub w_ff1: TokenMatrix,
    pub b_ff1: Vec<f64>,
    pub w_ff2: TokenMatrix,
    pub b_ff2: Vec<f64>,
}

impl BlockParams {
    pub fn seeded(d: usize, seed: u64) -> Self {
        let rng = CounterRng::new(seed);
        let sub = |i: u64| rng.derive(i).u64_at(0);
        BlockParams {
            ln1_gain: vec![1.0; d],
            ln1_bias: vec![0.0; d],
            w_q: seeded_params(d, d, sub(1)),
            w_k: seeded_params(d, d, sub(2)),
            w_v: seeded_params(d, d, sub(3)),
            w_o: seeded_params(d, d, sub(4)),
            ln2_gain: vec![1.0; d],
            ln2_bias: vec![0.0; d],
            w_ff1: seeded_params(d, 4 * d, sub(5)),
            b_ff1: seeded_vector(4 * d, 1.0 / (d as f64).sqrt(), sub(6)),
            w_ff2: seeded_params(4 * d, d, sub(7)),
            b_ff2: seeded_vector(d, 1.0 / (4.0 * d as f64).sqrt(), sub(8)),
        }
    }
}

/// Multi-head self-attention over a token block (no mask, optional causal).
fn self_attention(
    x: &TokenMatrix,
    block: &BlockParams,
    heads: usize,
    causal: bool,
) -> Result<TokenMatrix, EncoderError> {
    let d = x.cols();
    let d_k = d / heads;
    let t = x.rows();
    let q_all = matmul(x, &block.w_q)?;
    let k_all = matmul(x, &block.w_k)?;
    let v_all = matmul(x, &block.w_v)?;
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut concat = TokenMatrix::zeros(t, d);
    let zero_mask = vec![0.0f64; t];
    for h in 0..heads {
        let q = q_all.columns(h * d_k, d_k);
        let k = k_all.columns(h * d_k, d_k);
        let v = v_all.columns(h * d_k, d_k);
        let mut logits = matmul(&q, &k.transpose())?;
        logits.scale(scale);
        let attn = if causal {
            let mut weights = TokenMatrix::zeros(t, t);
            for row in 0..t {
                let mut l = TokenMatrix::zeros(1, t);
                l.row_mut(0).copy_from_slice(logits.row(row));
                let mut mask = vec![numerics::NEG_INF; t];
                for m in mask.iter_mut().take(row + 1) {
                    *m = 0.0;
                }
                let sm = softmax_last_masked(&l, &mask)?;
                weights.row_mut(row).copy_from_slice(sm.row(0));
            }
            weights
        } else {
            softmax_last_masked(&logits, &zero_mask)?
        };
        let o = matmul(&attn, &v)?;
        for row in 0..t {
            concat.row_mut(row)[h * d_k..(h + 1) * d_k].copy_from_slice(o.row(row));
        }
    }
    Ok(matmul(&concat, &block.w_o)?)
}

/// Pre-norm block application with a caller-supplied attention operator.
fn block_forward<F>(
    x: &TokenMatrix,
    block: &BlockParams,
    attend: F,
) -> Result<TokenMatrix, EncoderError>
where
    F: Fn(&TokenMatrix, &BlockParams) -> Result<TokenMatrix, EncoderError>,
{
    let normed = layer_norm(x, &block.ln1_gain, &block.ln1_bias, LAYER_NORM_EPS)?;
    let mut out = x.clone();
    out.add_assign(&attend(&normed, block)?);
    let normed2 = layer_norm(&out, &block.ln2_gain, &block.ln2_bias, LAYER_NORM_EPS)?;
    let mut ff = matmul(&normed2, &block.w_ff1)?;
    for r in 0..ff.rows() {
        for (v, b) in ff.row_mut(r).iter_mut().zip(&block.b_ff1) {
            *v += b;
        }
    }
    let ff = gelu(&ff);
    let mut ff = matmul(&ff, &block.w_ff2)?;
    for r in 0..ff.rows() {
        for (v, b) in ff.row_mut(r).iter_mut().zip(&block.b_ff2) {
            *v += b;
        }
    }
    out.add_assign(&ff);
    Ok(out)
}

/// All encoder weights, derived deterministically from the config seed.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub patch_w: TokenMatrix,
    pub pos_embed: TokenMatrix,
    pub local_blocks: Vec<BlockParams>,
    pub conv1: Conv3x3,
    pub conv2: Conv3x3,
    pub global_blocks: Vec<BlockParams>,
}

impl EncoderParams {
    pub fn seeded(cfg: &EncoderConfig) -> Result<Self, EncoderError> {
        cfg.validate()?;
        let rng = CounterRng::new(cfg.seed);
        let sub = |i: u64| rng.derive(i).u64_at(0);
        let local_blocks = (0..cfg.local_layers)
            .map(|l| BlockParams::seeded(cfg.d, sub(100 + l as u64)))
            .collect();
        let global_blocks = (0..cfg.global_layers)
            .map(|l| BlockParams::seeded(cfg.d, sub(200 + l as u64)))
            .collect();
        Ok(EncoderParams {
            patch_w: seeded_params(cfg.p * cfg.p * IMAGE_CHANNELS, cfg.d, sub(1)),
            pos_embed: seeded_params(cfg.n_tokens(), cfg.d, sub(2)),
            local_blocks,
            conv1: Conv3x3::seeded(cfg.d, cfg.d, sub(3)),
            conv2: Conv3x3::seeded(cfg.d, cfg.d, sub(4)),
            global_blocks,
        })
    }
}

/// Split the image into non-overlapping p x p patches, flatten each patch
/// (row-major pixels, channel-last), apply the learned linear map, and add
/// the learned 2D positional embedding.
pub fn patchify(
    img: &ImageTensor,
    cfg: &EncoderConfig,
    params: &EncoderParams,
) -> Result<TokenMatrix, EncoderError> {
    if img.side != cfg.img {
        return Err(EncoderError::Shape(format!(
            "image side {} != configured {}",
            img.side, cfg.img
        )));
    }
    if img.side % cfg.p != 0 {
        return Err(EncoderError::Shape(format!(
            "image side {} not divisible by patch {}",
            img.side, cfg.p
        )));
    }
    let side = cfg.grid_side();
    let patch_len = cfg.p * cfg.p * IMAGE_CHANNELS;
    let mut patches = TokenMatrix::zeros(cfg.n_tokens(), patch_len);
    for py in 0..side {
        for px in 0..side {
            let row = patches.row_mut(py * side + px);
            let mut idx = 0;
            for y in 0..cfg.p {
                for x in 0..cfg.p {
                    for ch in 0..IMAGE_CHANNELS {
                        row[idx] = img.pixel(py * cfg.p + y, px * cfg.p + x, ch);
                        idx += 1;
                    }
                }
            }
        }
    }
    let mut tokens = matmul(&patches, &params.patch_w)?;
    if cfg.use_pos_embed {
        tokens.add_assign(&params.pos_embed);
    }
    Ok(tokens)
}

fn tokens_to_grid(tokens: &TokenMatrix) -> Result<Grid, EncoderError> {
    let n = tokens.rows();
    let side = (n as f64).sqrt() as usize;
    if side * side != n {
        return Err(EncoderError::Shape(format!(
            "token count {n} is not a perfect square"
        )));
    }
    Ok(Grid::from_vec(side, side, tokens.cols(), tokens.data().to_vec())?)
}

fn grid_to_tokens(g: &Grid) -> TokenMatrix {
    TokenMatrix::from_vec(g.h * g.w, g.c, g.data().to_vec()).expect("grid is dense")
}

/// Windowed attention: partition the token grid into window x window tiles,
/// run full attention inside each tile, and stitch the grid back together.
fn window_attention(
    tokens: &TokenMatrix,
    block: &BlockParams,
    cfg: &EncoderConfig,
) -> Result<TokenMatrix, EncoderError> {
    let grid = tokens_to_grid(tokens)?;
    let (windows, rec) = window_partition(&grid, cfg.window);
    let mut attended = Vec::with_capacity(windows.len());
    for win in &windows {
        let wt = grid_to_tokens(win);
        let out = self_attention(&wt, block, cfg.heads, false)?;
        attended.push(Grid::from_vec(win.h, win.w, win.c, out.data().to_vec())?);
    }
    let stitched = window_unpartition(&attended, &rec)?;
    Ok(grid_to_tokens(&stitched))
}

/// Local tower: `local_layers` pre-norm blocks with window attention.
pub fn local_forward(
    tokens: &TokenMatrix,
    cfg: &EncoderConfig,
    params: &EncoderParams,
) -> Result<TokenMatrix, EncoderError> {
    let mut x = tokens.clone();
    for block in &params.local_blocks {
        x = block_forward(&x, block, |t, b| window_attention(t, b, cfg))?;
    }
    Ok(x)
}

/// Token compressor: reshape to the patch grid, apply two stride-2 3x3
/// convolutions with a GELU between them, flatten back to tokens. Reduces
/// the token count by exactly 16x, preserving the channel width.
pub fn compress(
    h_local: &TokenMatrix,
    cfg: &EncoderConfig,
    params: &EncoderParams,
) -> Result<TokenMatrix, EncoderError> {
    if h_local.cols() != cfg.d {
        return Err(EncoderError::Shape(format!(
            "compress expects width {}, got {}",
            cfg.d,
            h_local.cols()
        )));
    }
    let grid = tokens_to_grid(h_local)?;
    let c1 = conv3x3_s2(&grid, &params.conv1)?;
    let c1 = Grid::from_vec(
        c1.h,
        c1.w,
        c1.c,
        gelu(&grid_to_tokens(&c1)).data().to_vec(),
    )?;
    let c2 = conv3x3_s2(&c1, &params.conv2)?;
    Ok(grid_to_tokens(&c2))
}

/// Global tower: dense self-attention pre-norm blocks.
pub fn global_forward(
    h_cmp: &TokenMatrix,
    cfg: &EncoderConfig,
    params: &EncoderParams,
) -> Result<TokenMatrix, EncoderError> {
    let mut x = h_cmp.clone();
    for block in &params.global_blocks {
        x = block_forward(&x, block, |t, b| self_attention(t, b, cfg.heads, false))?;
    }
    Ok(x)
}

/// Channel concatenation of the two pathways. The local tokens are average
/// pooled over the 4x4 patch-grid cell feeding each compressed token, so
/// both operands carry the same row count.
pub fn fuse_local_global(
    h_global: &TokenMatrix,
    h_local: &TokenMatrix,
    cfg: &EncoderConfig,
) -> Result<TokenMatrix, EncoderError> {
    if h_global.cols() != h_local.cols() {
        return Err(EncoderError::Shape(format!(
            "channel widths differ: {} vs {}",
            h_global.cols(),
            h_local.cols()
        )));
    }
    if h_global.cols() != cfg.d {
        return Err(EncoderError::Shape(format!(
            "channel width {} != configured {}",
            h_global.cols(),
            cfg.d
        )));
    }
    let grid = tokens_to_grid(h_local)?;
    if grid.h % 4 != 0 {
        return Err(EncoderError::Shape(format!(
            "local grid side {} not divisible by 4",
            grid.h
        )));
    }
    let m_side = grid.h / 4;
    if h_global.rows() != m_side * m_side {
        return Err(EncoderError::Shape(format!(
            "global rows {} != pooled local rows {}",
            h_global.rows(),
            m_side * m_side
        )));
    }
    let d = h_local.cols();
    let mut out = TokenMatrix::zeros(h_global.rows(), 2 * d);
    for my in 0..m_side {
        for mx in 0..m_side {
            let row = out.row_mut(my * m_side + mx);
            row[..d].copy_from_slice(h_global.row(my * m_side + mx));
            let pooled = &mut row[d..];
            for y in 0..4 {
                for x in 0..4 {
                    for (p, v) in pooled.iter_mut().zip(grid.cell(my * 4 + y, mx * 4 + x)) {
                        *p += v;
                    }
                }
            }
            for p in pooled.iter_mut() {
                *p /= 16.0;
            }
        }
    }
    Ok(out)
}

/// Full encoder: image -> fused visual tokens (m_tokens x 2d).
pub fn encode(
    img: &ImageTensor,
    cfg: &EncoderConfig,
    params: &EncoderParams,
) -> Result<TokenMatrix, EncoderError> {
    let tokens = patchify(img, cfg, params)?;
    let h_local = local_forward(&tokens, cfg, params)?;
    let h_cmp = compress(&h_local, cfg, params)?;
    let h_global = global_forward(&h_cmp, cfg, params)?;
    fuse_local_global(&h_global, &h_local, cfg)
}

/// Causal self-attention block stack used by the decoder.
pub(crate) fn causal_block_forward(
    x: &TokenMatrix,
    block: &BlockParams,
    heads: usize,
) -> Result<TokenMatrix, EncoderError> {
    block_forward(x, block, |t, b| self_attention(t, b, heads, true))
}
