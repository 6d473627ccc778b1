//! Molecular representation pipeline: SELFIES topology tokens aligned to
//! heavy atoms, 3D geometric shell fingerprints, fused structural sequences
//! with padding masks, a dual-pathway high-resolution image encoder, a
//! cross-attention fusion projector with analytic gradients, and an
//! autoregressive decoding contract. Deterministic end to end: fixed seeds
//! and inputs reproduce every artifact bit for bit.

pub mod decoder;
pub mod deepencoder;
pub mod e3fp;
pub mod molgraph;
pub mod numerics;
pub mod projector;
pub mod structok;

pub use molgraph::{
    align_phi, parse_conformer, parse_document, parse_selfies, Atom, Bond, BondOrder, Conformer,
    MolGraphError, MoleculeDocument, MoleculeGraph, StructuralTokens, Wedge,
};
pub use numerics::{NumericsError, TokenMatrix};
