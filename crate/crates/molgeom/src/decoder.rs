//! Autoregressive decoding contract: prefix assembly from fused visual
//! tokens and embedded prompt tokens, a small causal transformer producing
//! per-step distributions, greedy and seeded sampled decoding, and sequence
//! log-probability as the sum of per-step log conditionals.
//!
//! The decoder here is a deterministic seeded toy, not a language model;
//! it exists to verify the interface: causality, distribution validity,
//! factorization, and reproducible decoding.

use crate::deepencoder::{causal_block_forward, BlockParams};
use crate::numerics::{layer_norm, matmul, seeded_params, seeded_vector, CounterRng, TokenMatrix, LAYER_NORM_EPS};
use crate::structok::EmbeddingTable;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("shape error: {0}")]
    Shape(String),
}

impl From<crate::deepencoder::EncoderError> for DecoderError {
    fn from(e: crate::deepencoder::EncoderError) -> Self {
        DecoderError::Shape(e.to_string())
    }
}

impl From<crate::numerics::NumericsError> for DecoderError {
    fn from(e: crate::numerics::NumericsError) -> Self {
        DecoderError::Shape(e.to_string())
    }
}

/// Prompt token ids over a fixed vocabulary.
#[derive(Debug, Clone)]
pub struct PromptTokens {
    ids: Vec<usize>,
    vocab_size: usize,
}

impl PromptTokens {
    pub fn new(ids: Vec<usize>, vocab_size: usize) -> Result<Self, DecoderError> {
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab_size) {
            return Err(DecoderError::Shape(format!(
                "prompt id {bad} >= vocabulary size {vocab_size}"
            )));
        }
        Ok(PromptTokens { ids, vocab_size })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderConfig {
    pub d_h: usize,
    pub n_layers: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl DecoderConfig {
    pub fn desk(d_h: usize, vocab_size: usize, seed: u64) -> Self {
        DecoderConfig {
            d_h,
            n_layers: 2,
            heads: 2,
            vocab_size,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), DecoderError> {
        if self.d_h == 0 || self.heads == 0 || self.d_h % self.heads != 0 {
            return Err(DecoderError::Shape(format!(
                "d_h {} must be a positive multiple of heads {}",
                self.d_h, self.heads
            )));
        }
        if self.vocab_size == 0 {
            return Err(DecoderError::Shape("vocabulary must be non-empty".into()));
        }
        Ok(())
    }
}

/// Seeded toy decoder weights: text embedding lookup, causal blocks, final
/// norm, and the vocabulary projection.
#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub cfg: DecoderConfig,
    pub e_txt: EmbeddingTable,
    pub blocks: Vec<BlockParams>,
    pub ln_f_gain: Vec<f64>,
    pub ln_f_bias: Vec<f64>,
    pub w_vocab: TokenMatrix,
    pub b_vocab: Vec<f64>,
}

impl DecoderParams {
    pub fn seeded(cfg: DecoderConfig) -> Result<Self, DecoderError> {
        cfg.validate()?;
        let rng = CounterRng::new(cfg.seed);
        let sub = |i: u64| rng.derive(i).u64_at(0);
        Ok(DecoderParams {
            cfg,
            e_txt: EmbeddingTable::seeded(cfg.vocab_size, cfg.d_h, sub(1)),
            blocks: (0..cfg.n_layers)
                .map(|l| BlockParams::seeded(cfg.d_h, sub(10 + l as u64)))
                .collect(),
            ln_f_gain: vec![1.0; cfg.d_h],
            ln_f_bias: vec![0.0; cfg.d_h],
            w_vocab: seeded_params(cfg.d_h, cfg.vocab_size, sub(2)),
            b_vocab: seeded_vector(cfg.vocab_size, 1.0 / (cfg.d_h as f64).sqrt(), sub(3)),
        })
    }

    /// Zero every weight including the vocabulary projection; step then
    /// yields the uniform distribution.
    pub fn zeroed(cfg: DecoderConfig) -> Result<Self, DecoderError> {
        let mut p = Self::seeded(cfg)?;
        for b in &mut p.blocks {
            for m in [&mut b.w_q, &mut b.w_k, &mut b.w_v, &mut b.w_o, &mut b.w_ff1, &mut b.w_ff2] {
                for v in m.data_mut() {
                    *v = 0.0;
                }
            }
            for vec in [&mut b.b_ff1, &mut b.b_ff2] {
                for v in vec.iter_mut() {
                    *v = 0.0;
                }
            }
        }
        for v in p.w_vocab.data_mut() {
            *v = 0.0;
        }
        for v in p.b_vocab.iter_mut() {
            *v = 0.0;
        }
        Ok(p)
    }
}

/// Decoding context: fused visual rows, embedded prompt rows, and embedded
/// generated rows, in that order.
#[derive(Debug, Clone)]
pub struct DecoderState {
    context: TokenMatrix,
    n_v: usize,
    p: usize,
    generated: Vec<usize>,
}

impl DecoderState {
    pub fn new(h_in: TokenMatrix, n_v: usize, p: usize) -> Result<Self, DecoderError> {
        if h_in.rows() != n_v + p {
            return Err(DecoderError::Shape(format!(
                "context rows {} != N_v {} + P {}",
                h_in.rows(),
                n_v,
                p
            )));
        }
        Ok(DecoderState {
            context: h_in,
            n_v,
            p,
            generated: Vec::new(),
        })
    }

    pub fn context(&self) -> &TokenMatrix {
        &self.context
    }

    pub fn n_v(&self) -> usize {
        self.n_v
    }

    pub fn prompt_len(&self) -> usize {
        self.p
    }

    pub fn generated(&self) -> &[usize] {
        &self.generated
    }

    /// Append a generated token's embedding row.
    pub fn push_token(&mut self, id: usize, params: &DecoderParams) -> Result<(), DecoderError> {
        if id >= params.cfg.vocab_size {
            return Err(DecoderError::Shape(format!(
                "token {id} >= vocabulary {}",
                params.cfg.vocab_size
            )));
        }
        let d = self.context.cols();
        let mut grown = TokenMatrix::zeros(self.context.rows() + 1, d);
        grown.data_mut()[..self.context.data().len()].copy_from_slice(self.context.data());
        let row: Vec<f64> = params.e_txt.row(id).iter().map(|&v| v as f64).collect();
        grown.row_mut(self.context.rows()).copy_from_slice(&row);
        self.context = grown;
        self.generated.push(id);
        Ok(())
    }

    /// Perturb one context row in place (test hook for causality checks).
    pub fn perturb_row(&mut self, row: usize, delta: f64) {
        for v in self.context.row_mut(row) {
            *v += delta;
        }
    }
}

/// Concatenate fused visual tokens with embedded prompt tokens.
pub fn assemble_prefix(
    h_fused: &TokenMatrix,
    prompt: &PromptTokens,
    txt_table: &EmbeddingTable,
) -> Result<TokenMatrix, DecoderError> {
    if txt_table.dim() != h_fused.cols() {
        return Err(DecoderError::Shape(format!(
            "text embedding dim {} != fused width {}",
            txt_table.dim(),
            h_fused.cols()
        )));
    }
    if txt_table.rows() < prompt.vocab_size() {
        return Err(DecoderError::Shape(format!(
            "embedding rows {} < vocabulary {}",
            txt_table.rows(),
            prompt.vocab_size()
        )));
    }
    let d = h_fused.cols();
    let mut h_in = TokenMatrix::zeros(h_fused.rows() + prompt.len(), d);
    h_in.data_mut()[..h_fused.data().len()].copy_from_slice(h_fused.data());
    for (i, &id) in prompt.ids().iter().enumerate() {
        let row: Vec<f64> = txt_table.row(id).iter().map(|&v| v as f64).collect();
        h_in.row_mut(h_fused.rows() + i).copy_from_slice(&row);
    }
    Ok(h_in)
}

fn softmax_vec(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = logits.iter().map(|&v| (v - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Hidden states for every position under causal attention.
fn forward_hidden(state: &DecoderState, params: &DecoderParams) -> Result<TokenMatrix, DecoderError> {
    let mut x = state.context.clone();
    for block in &params.blocks {
        x = causal_block_forward(&x, block, params.cfg.heads)?;
    }
    Ok(layer_norm(&x, &params.ln_f_gain, &params.ln_f_bias, LAYER_NORM_EPS)?)
}

/// Next-token distribution at context position `pos` (0-based).
pub fn distribution_at(
    state: &DecoderState,
    params: &DecoderParams,
    pos: usize,
) -> Result<Vec<f64>, DecoderError> {
    if pos >= state.context.rows() {
        return Err(DecoderError::Shape(format!(
            "position {pos} >= context rows {}",
            state.context.rows()
        )));
    }
    let hidden = forward_hidden(state, params)?;
    let h = TokenMatrix::from_vec(1, hidden.cols(), hidden.row(pos).to_vec())?;
    let mut logits = matmul(&h, &params.w_vocab)?;
    for (v, b) in logits.row_mut(0).iter_mut().zip(&params.b_vocab) {
        *v += b;
    }
    Ok(softmax_vec(logits.row(0)))
}

/// Next-token distribution from the last context position.
pub fn step(state: &DecoderState, params: &DecoderParams) -> Result<Vec<f64>, DecoderError> {
    distribution_at(state, params, state.context.rows() - 1)
}

/// Argmax with lowest-index tie-breaking.
pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding: append the argmax token each step; stop after emitting
/// `stop_id` or after `t_max` tokens.
pub fn greedy_decode(
    state: &DecoderState,
    params: &DecoderParams,
    t_max: usize,
    stop_id: usize,
) -> Result<Vec<usize>, DecoderError> {
    let mut st = state.clone();
    let mut out = Vec::new();
    for _ in 0..t_max {
        let probs = step(&st, params)?;
        let tok = argmax(&probs);
        out.push(tok);
        if tok == stop_id {
            break;
        }
        st.push_token(tok, params)?;
    }
    Ok(out)
}

/// Temperature-reweighted categorical pick: w_i proportional to
/// probs_i^(1/temperature); u is uniform in [0, 1). The limit of small
/// temperature reproduces the argmax on untied distributions.
pub fn sample_index(probs: &[f64], temperature: f64, u: f64) -> usize {
    assert!(temperature > 0.0, "temperature must be positive");
    let logw: Vec<f64> = probs.iter().map(|&p| p.ln() / temperature).collect();
    let mx = logw.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let w: Vec<f64> = logw.iter().map(|&l| (l - mx).exp()).collect();
    let total: f64 = w.iter().sum();
    let target = u * total;
    let mut cum = 0.0;
    for (i, &wi) in w.iter().enumerate() {
        cum += wi;
        if cum > target {
            return i;
        }
    }
    probs.len() - 1
}

/// Seeded sampled decoding; the draw at step t uses counter t of the seeded
/// stream, so sequences are reproducible.
pub fn sample_decode(
    state: &DecoderState,
    params: &DecoderParams,
    t_max: usize,
    seed: u64,
    temperature: f64,
    stop_id: usize,
) -> Result<Vec<usize>, DecoderError> {
    let rng = CounterRng::new(seed);
    let mut st = state.clone();
    let mut out = Vec::new();
    for t in 0..t_max {
        let probs = step(&st, params)?;
        let tok = sample_index(&probs, temperature, rng.unit_f64_at(t as u64));
        out.push(tok);
        if tok == stop_id {
            break;
        }
        st.push_token(tok, params)?;
    }
    Ok(out)
}

/// Sum over steps of log pi_t[y_t]; the empty sequence scores 0.
pub fn sequence_logprob(
    state: &DecoderState,
    params: &DecoderParams,
    y: &[usize],
) -> Result<f64, DecoderError> {
    let mut st = state.clone();
    let mut total = 0.0;
    for &tok in y {
        let probs = step(&st, params)?;
        if tok >= probs.len() {
            return Err(DecoderError::Shape(format!(
                "token {tok} >= vocabulary {}",
                probs.len()
            )));
        }
        total += probs[tok].ln();
        st.push_token(tok, params)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_params;

    fn desk() -> (DecoderParams, DecoderState) {
        let cfg = DecoderConfig::desk(16, 6, 5);
        let params = DecoderParams::seeded(cfg).unwrap();
        let h_fused = seeded_params(4, 16, 81);
        let prompt = PromptTokens::new(vec![1, 3], 6).unwrap();
        let h_in = assemble_prefix(&h_fused, &prompt, &params.e_txt).unwrap();
        let state = DecoderState::new(h_in, 4, 2).unwrap();
        (params, state)
    }

    #[test]
    fn assemble_prefix_empty_prompt_is_fused_only() {
        let cfg = DecoderConfig::desk(16, 6, 5);
        let params = DecoderParams::seeded(cfg).unwrap();
        let h_fused = seeded_params(4, 16, 81);
        let prompt = PromptTokens::new(vec![], 6).unwrap();
        let h_in = assemble_prefix(&h_fused, &prompt, &params.e_txt).unwrap();
        assert_eq!(h_in, h_fused);
    }

    #[test]
    fn assemble_prefix_row_placement() {
        let cfg = DecoderConfig::desk(16, 6, 5);
        let params = DecoderParams::seeded(cfg).unwrap();
        let h_fused = seeded_params(4, 16, 81);
        let prompt = PromptTokens::new(vec![2, 5, 0], 6).unwrap();
        let h_in = assemble_prefix(&h_fused, &prompt, &params.e_txt).unwrap();
        assert_eq!(h_in.rows(), 7);
        let expect: Vec<f64> = params.e_txt.row(2).iter().map(|&v| v as f64).collect();
        assert_eq!(h_in.row(4), &expect[..]);
    }

    #[test]
    fn prompt_rejects_out_of_vocab() {
        assert!(PromptTokens::new(vec![6], 6).is_err());
    }

    #[test]
    fn zero_weights_give_uniform_distribution() {
        let cfg = DecoderConfig::desk(16, 4, 5);
        let params = DecoderParams::zeroed(cfg).unwrap();
        let h_fused = seeded_params(3, 16, 81);
        let prompt = PromptTokens::new(vec![], 4).unwrap();
        let h_in = assemble_prefix(&h_fused, &prompt, &params.e_txt).unwrap();
        let state = DecoderState::new(h_in, 3, 0).unwrap();
        let probs = step(&state, &params).unwrap();
        for p in probs {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn distribution_sums_to_one() {
        let (params, state) = desk();
        let probs = step(&state, &params).unwrap();
        assert_eq!(probs.len(), 6);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(probs.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn causality_future_rows_do_not_matter() {
        let (params, state) = desk();
        // distribution at position 3 must ignore rows 4, 5
        let base = distribution_at(&state, &params, 3).unwrap();
        let mut poked = state.clone();
        poked.perturb_row(4, 0.37);
        poked.perturb_row(5, -1.25);
        let after = distribution_at(&poked, &params, 3).unwrap();
        for (a, b) in base.iter().zip(&after) {
            assert_eq!(a, b, "causal mask must block future positions");
        }
        // while the final position does see them
        let last_base = step(&state, &params).unwrap();
        let last_after = step(&poked, &params).unwrap();
        assert_ne!(last_base, last_after);
    }

    #[test]
    fn greedy_stops_on_stop_id() {
        let (params, state) = desk();
        let probs = step(&state, &params).unwrap();
        let first = argmax(&probs);
        let out = greedy_decode(&state, &params, 8, first).unwrap();
        assert_eq!(out, vec![first]);
    }

    #[test]
    fn greedy_is_deterministic() {
        let (params, state) = desk();
        let a = greedy_decode(&state, &params, 6, usize::MAX).unwrap();
        for _ in 0..4 {
            assert_eq!(greedy_decode(&state, &params, 6, usize::MAX).unwrap(), a);
        }
        assert_eq!(a.len(), 6);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.25, 0.25, 0.25, 0.25]), 0);
        assert_eq!(argmax(&[0.1, 0.4, 0.4, 0.1]), 1);
    }

    #[test]
    fn sampling_is_reproducible() {
        let (params, state) = desk();
        let a = sample_decode(&state, &params, 5, 77, 1.0, usize::MAX).unwrap();
        let b = sample_decode(&state, &params, 5, 77, 1.0, usize::MAX).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn one_hot_sampling_matches_greedy() {
        let probs = [0.0, 0.0, 1.0, 0.0];
        for u in [0.0, 0.3, 0.9, 0.999] {
            assert_eq!(sample_index(&probs, 1.0, u), 2);
        }
    }

    #[test]
    fn low_temperature_approaches_greedy() {
        let probs = [0.2, 0.5, 0.3];
        for u in [0.01, 0.5, 0.99] {
            assert_eq!(sample_index(&probs, 1e-3, u), 1);
        }
    }

    #[test]
    fn sampling_frequency_matches_probability() {
        let probs = [0.7, 0.2, 0.1];
        let rng = CounterRng::new(2024);
        let n = 10_000;
        let mut hits = 0;
        for i in 0..n {
            if sample_index(&probs, 1.0, rng.unit_f64_at(i)) == 0 {
                hits += 1;
            }
        }
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.7).abs() < 0.02, "frequency {freq}");
    }

    #[test]
    fn logprob_empty_sequence_is_zero() {
        let (params, state) = desk();
        assert_eq!(sequence_logprob(&state, &params, &[]).unwrap(), 0.0);
    }

    #[test]
    fn logprob_uniform_single_step() {
        let cfg = DecoderConfig::desk(16, 4, 5);
        let params = DecoderParams::zeroed(cfg).unwrap();
        let h_fused = seeded_params(2, 16, 81);
        let prompt = PromptTokens::new(vec![], 4).unwrap();
        let h_in = assemble_prefix(&h_fused, &prompt, &params.e_txt).unwrap();
        let state = DecoderState::new(h_in, 2, 0).unwrap();
        let lp = sequence_logprob(&state, &params, &[3]).unwrap();
        assert!((lp - 0.25f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn logprob_chain_consistency() {
        let (params, state) = desk();
        let y = [2usize, 0, 4];
        let full = sequence_logprob(&state, &params, &y).unwrap();
        let prefix = sequence_logprob(&state, &params, &y[..2]).unwrap();
        let mut st = state.clone();
        st.push_token(2, &params).unwrap();
        st.push_token(0, &params).unwrap();
        let last = step(&st, &params).unwrap()[4].ln();
        assert!((full - (prefix + last)).abs() < 1e-9);
    }

    #[test]
    fn greedy_per_step_dominance() {
        let (params, state) = desk();
        let greedy = greedy_decode(&state, &params, 3, usize::MAX).unwrap();
        let mut st = state.clone();
        for &tok in &greedy {
            let probs = step(&st, &params).unwrap();
            for w in 0..probs.len() {
                assert!(probs[tok] >= probs[w]);
            }
            st.push_token(tok, &params).unwrap();
        }
    }
}
