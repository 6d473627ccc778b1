//! Fused structural sequences: per-position fusion of topology-token
//! embeddings with averaged geometric-code embeddings, padded to a fixed
//! length with an additive mask.
//!
//! Embedding weights and sequence data are f32 (the on-disk precision);
//! positions where a heavy atom is introduced average the 1D and 3D
//! embeddings, control positions pass the 1D embedding through unchanged.

use crate::e3fp::FingerprintTable;
use crate::molgraph::StructuralTokens;
use crate::numerics::CounterRng;
use std::collections::HashMap;
use std::io::Write;
use thiserror::Error;

/// Additive mask sentinel on padded positions (f32 twin of numerics::NEG_INF).
pub const NEG_INF_F32: f32 = -1e9;

pub const SEQUENCE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StructokError {
    #[error("unknown token: {0}")]
    UnknownToken(String),
    #[error("sequence length {len} exceeds L_max {l_max}")]
    Length { len: usize, l_max: usize },
    #[error("dimension mismatch: {0}")]
    Dim(String),
}

/// Seeded dense embedding table; row values are uniform(-1/sqrt(dim),
/// +1/sqrt(dim)) drawn from a counter-based stream, so equal (rows, dim,
/// seed) reproduce identical weights bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    rows: usize,
    dim: usize,
    seed: u64,
    weights: Vec<f32>,
}

impl EmbeddingTable {
    pub fn seeded(rows: usize, dim: usize, seed: u64) -> Self {
        let bound = 1.0 / (dim.max(1) as f64).sqrt();
        let rng = CounterRng::new(seed);
        let weights = (0..rows * dim)
            .map(|i| rng.uniform_at(i as u64, bound) as f32)
            .collect();
        EmbeddingTable {
            rows,
            dim,
            seed,
            weights,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.weights[r * self.dim..(r + 1) * self.dim]
    }
}

/// Token-string vocabulary mapping tokens to embedding rows.
#[derive(Debug, Clone)]
pub struct TokenVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl TokenVocab {
    pub fn new(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut list = Vec::new();
        let mut index = HashMap::new();
        for t in tokens {
            if !index.contains_key(&t) {
                index.insert(t.clone(), list.len());
                list.push(t);
            }
        }
        TokenVocab {
            tokens: list,
            index,
        }
    }

    /// Deterministic vocabulary from a molecule's own tokens: unique,
    /// lexicographically sorted.
    pub fn from_structural_tokens(st: &StructuralTokens) -> Self {
        let mut unique: Vec<String> = st.tokens().to_vec();
        unique.sort();
        unique.dedup();
        TokenVocab::new(unique)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Look up the 1D embedding of every token; row t is the table row of
/// token t. Returned as a flat L x dim f32 buffer.
pub fn embed_1d(
    st: &StructuralTokens,
    vocab: &TokenVocab,
    tab: &EmbeddingTable,
) -> Result<Vec<f32>, StructokError> {
    if vocab.len() > tab.rows() {
        return Err(StructokError::Dim(format!(
            "vocabulary size {} exceeds table rows {}",
            vocab.len(),
            tab.rows()
        )));
    }
    let mut out = Vec::with_capacity(st.len() * tab.dim());
    for t in st.tokens() {
        let id = vocab
            .id_of(t)
            .ok_or_else(|| StructokError::UnknownToken(t.clone()))?;
        out.extend_from_slice(tab.row(id));
    }
    Ok(out)
}

/// Mean of the K+1 code embeddings of atom i (0-based row of the table).
pub fn embed_3d(
    ft: &FingerprintTable,
    i: usize,
    tab: &EmbeddingTable,
) -> Result<Vec<f32>, StructokError> {
    if (tab.rows() as u32) < ft.vocab_size {
        return Err(StructokError::Dim(format!(
            "3D table rows {} < vocabulary {}",
            tab.rows(),
            ft.vocab_size
        )));
    }
    let codes = ft.folded_row(i);
    let mut acc = vec![0.0f64; tab.dim()];
    for &code in codes {
        for (a, &w) in acc.iter_mut().zip(tab.row(code as usize)) {
            *a += w as f64;
        }
    }
    let inv = 1.0 / codes.len() as f64;
    Ok(acc.iter().map(|v| (v * inv) as f32).collect())
}

/// Fused, padded structural sequence with its additive mask.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuralSequence {
    data: Vec<f32>,
    mask: Vec<f32>,
    true_len: usize,
    l_max: usize,
    dim: usize,
}

impl StructuralSequence {
    pub fn l_max(&self) -> usize {
        self.l_max
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn true_len(&self) -> usize {
        self.true_len
    }

    /// Row for 1-based position t.
    pub fn position(&self, t: usize) -> &[f32] {
        &self.data[(t - 1) * self.dim..t * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Additive mask: 0 on positions 1..=true_len, the negative sentinel on
    /// padding.
    pub fn mask(&self) -> &[f32] {
        &self.mask
    }

    /// Flat binary export: 16-byte header (l_max, dim, true_len, version as
    /// little-endian u32) followed by l_max*dim little-endian f32 words.
    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        for v in [
            self.l_max as u32,
            self.dim as u32,
            self.true_len as u32,
            SEQUENCE_FORMAT_VERSION,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn write_binary(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&self.to_binary())
    }

    /// Inverse of [`to_binary`]: validates the header and reconstructs the
    /// mask from the true length.
    pub fn from_binary(bytes: &[u8]) -> Result<Self, StructokError> {
        if bytes.len() < 16 {
            return Err(StructokError::Dim("sequence header truncated".into()));
        }
        let word =
            |i: usize| u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
        let (l_max, dim, true_len, version) = (word(0), word(1), word(2), word(3));
        if version != SEQUENCE_FORMAT_VERSION as usize {
            return Err(StructokError::Dim(format!(
                "unsupported sequence format version {version}"
            )));
        }
        if true_len > l_max {
            return Err(StructokError::Length {
                len: true_len,
                l_max,
            });
        }
        let need = 16 + l_max * dim * 4;
        if bytes.len() != need {
            return Err(StructokError::Dim(format!(
                "sequence payload {} != expected {need}",
                bytes.len()
            )));
        }
        let data: Vec<f32> = bytes[16..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let mut mask = vec![NEG_INF_F32; l_max];
        for m in mask.iter_mut().take(true_len) {
            *m = 0.0;
        }
        Ok(StructuralSequence {
            data,
            mask,
            true_len,
            l_max,
            dim,
        })
    }

    /// Sidecar mask JSON.
    pub fn mask_json(&self) -> String {
        let entries: Vec<f32> = self.mask.clone();
        serde_json::json!({
            "version": SEQUENCE_FORMAT_VERSION,
            "l_max": self.l_max,
            "true_len": self.true_len,
            "mask": entries,
        })
        .to_string()
    }
}

fn build_sequence(
    st: &StructuralTokens,
    e1d: Vec<f32>,
    e3d_by_atom: Option<Vec<Vec<f32>>>,
    dim: usize,
    l_max: usize,
) -> Result<StructuralSequence, StructokError> {
    let len = st.len();
    if len > l_max {
        return Err(StructokError::Length { len, l_max });
    }
    let mut data = vec![0.0f32; l_max * dim];
    for t in 0..len {
        let row = &mut data[t * dim..(t + 1) * dim];
        row.copy_from_slice(&e1d[t * dim..(t + 1) * dim]);
    }
    if let Some(e3d) = &e3d_by_atom {
        for (i, &pos) in st.atom_positions().iter().enumerate() {
            let row = &mut data[(pos - 1) * dim..pos * dim];
            for (r, &g) in row.iter_mut().zip(&e3d[i]) {
                *r = (*r + g) * 0.5;
            }
        }
    }
    let mut mask = vec![NEG_INF_F32; l_max];
    for m in mask.iter_mut().take(len) {
        *m = 0.0;
    }
    Ok(StructuralSequence {
        data,
        mask,
        true_len: len,
        l_max,
        dim,
    })
}

/// Fuse 1D token embeddings with per-atom averaged 3D code embeddings:
/// s_t = e1d_t on control positions, (e1d_t + e3d_t) / 2 where position t
/// introduces heavy atom i, zero rows past the true length.
pub fn fuse_sequence(
    st: &StructuralTokens,
    ft: &FingerprintTable,
    vocab: &TokenVocab,
    tab_1d: &EmbeddingTable,
    tab_3d: &EmbeddingTable,
    l_max: usize,
) -> Result<StructuralSequence, StructokError> {
    if tab_1d.dim() != tab_3d.dim() {
        return Err(StructokError::Dim(format!(
            "1D dim {} != 3D dim {}",
            tab_1d.dim(),
            tab_3d.dim()
        )));
    }
    if ft.n_atoms != st.n_heavy() {
        return Err(StructokError::Dim(format!(
            "fingerprint atoms {} != token atoms {}",
            ft.n_atoms,
            st.n_heavy()
        )));
    }
    let e1d = embed_1d(st, vocab, tab_1d)?;
    let mut e3d = Vec::with_capacity(st.n_heavy());
    for i in 0..st.n_heavy() {
        e3d.push(embed_3d(ft, i, tab_3d)?);
    }
    build_sequence(st, e1d, Some(e3d), tab_1d.dim(), l_max)
}

/// Ablation variant: the 3D branch is dropped and every position carries
/// its 1D embedding unchanged.
pub fn no3d_sequence(
    st: &StructuralTokens,
    vocab: &TokenVocab,
    tab_1d: &EmbeddingTable,
    l_max: usize,
) -> Result<StructuralSequence, StructokError> {
    let e1d = embed_1d(st, vocab, tab_1d)?;
    build_sequence(st, e1d, None, tab_1d.dim(), l_max)
}
