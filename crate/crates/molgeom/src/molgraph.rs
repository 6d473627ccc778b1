//! Molecular data model, conformer-document ingestion, SELFIES parsing for
//! the supported grammar subset, and the heavy-atom <-> token-position
//! bijection phi.
//!
//! The supported SELFIES grammar: atom tokens with an optional =/# bond
//! prefix, an optional explicit H count, and an optional single-digit charge;
//! Branch1-family tokens with a one-symbol length operand; Ring1-family
//! tokens with a one-symbol operand. Index-alphabet control tokens such as
//! [Ring2] or [Branch2] are recognized in operand position only. Bond orders
//! are capped by the min() rule against remaining valence; strings whose
//! derivation would be degenerate (saturated extension, dangling operands,
//! out-of-range or duplicate ring targets) are rejected rather than guessed
//! at, so phi can never silently mis-map.
//!
//! Atom and bond indices are 0-based in memory and in documents; SELFIES
//! token positions (the values of phi and the atom-position set) are 1-based.

use serde::Deserialize;
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MolGraphError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("grammar error: {0}")]
    Grammar(String),
    #[error("unsupported token: {0}")]
    UnsupportedToken(String),
    #[error("mismatch: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    /// Connectivity code used by shell hashing: 1, 2, 3; aromatic -> 4.
    pub fn code(self) -> u32 {
        match self {
            BondOrder::Single => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
            BondOrder::Aromatic => 4,
        }
    }

    /// Twice the valence contribution (aromatic counts 1.5).
    pub fn twice_valence(self) -> u32 {
        match self {
            BondOrder::Single => 2,
            BondOrder::Double => 4,
            BondOrder::Triple => 6,
            BondOrder::Aromatic => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Wedge {
    #[default]
    None,
    Up,
    Down,
}

/// Heavy atom; hydrogens are implicit metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Atom {
    pub element: u32,
    pub formal_charge: i32,
    pub h_count: u32,
    pub in_ring: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub order: BondOrder,
    pub wedge: Wedge,
}

/// Heavy-atom graph: atoms plus at most one bond per unordered pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MoleculeGraph {
    pub atoms: Vec<Atom>,
    pub bonds: Vec<Bond>,
}

impl MoleculeGraph {
    pub fn n_heavy(&self) -> usize {
        self.atoms.len()
    }

    /// Bond between a and b, if any.
    pub fn bond_between(&self, a: usize, b: usize) -> Option<&Bond> {
        self.bonds
            .iter()
            .find(|bd| (bd.a == a && bd.b == b) || (bd.a == b && bd.b == a))
    }

    pub fn heavy_degree(&self, i: usize) -> u32 {
        self.bonds.iter().filter(|b| b.a == i || b.b == i).count() as u32
    }

    /// Heavy-bond valence: floor of summed bond orders with aromatic = 1.5.
    pub fn heavy_valence(&self, i: usize) -> u32 {
        let twice: u32 = self
            .bonds
            .iter()
            .filter(|b| b.a == i || b.b == i)
            .map(|b| b.order.twice_valence())
            .sum();
        twice / 2
    }
}

/// Molecular graph plus 3D heavy-atom coordinates in angstroms.
#[derive(Debug, Clone, PartialEq)]
pub struct Conformer {
    pub graph: MoleculeGraph,
    pub coords: Vec<[f64; 3]>,
}

impl Conformer {
    pub fn n_heavy(&self) -> usize {
        self.graph.atoms.len()
    }

    pub fn squared_distance(&self, i: usize, j: usize) -> f64 {
        let a = self.coords[i];
        let b = self.coords[j];
        let dx = a[0] - b[0];
        let dy = a[1] - b[1];
        let dz = a[2] - b[2];
        dx * dx + dy * dy + dz * dz
    }
}

const MIN_ATOM_SEPARATION: f64 = 0.1;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DocAtom {
    z: u32,
    charge: i32,
    h: u32,
    ring: bool,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum DocOrder {
    Int(u32),
    Tag(String),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DocBond {
    a: usize,
    b: usize,
    order: DocOrder,
    #[serde(default)]
    wedge: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Doc {
    atoms: Vec<DocAtom>,
    bonds: Vec<DocBond>,
    coords: Vec<[f64; 3]>,
    selfies: String,
}

/// A parsed conformer document: the validated conformer plus the canonical
/// SELFIES string the document carries.
#[derive(Debug, Clone)]
pub struct MoleculeDocument {
    pub conformer: Conformer,
    pub selfies: String,
}

/// Parse and validate a UTF-8 JSON conformer document.
pub fn parse_document(doc: &[u8]) -> Result<MoleculeDocument, MolGraphError> {
    let parsed: Doc =
        serde_json::from_slice(doc).map_err(|e| MolGraphError::Schema(e.to_string()))?;
    if parsed.atoms.is_empty() {
        return Err(MolGraphError::Schema("document has no atoms".into()));
    }
    if parsed.coords.len() != parsed.atoms.len() {
        return Err(MolGraphError::Schema(format!(
            "coords rows {} != atom count {}",
            parsed.coords.len(),
            parsed.atoms.len()
        )));
    }
    let n = parsed.atoms.len();
    let mut atoms = Vec::with_capacity(n);
    for (i, a) in parsed.atoms.iter().enumerate() {
        if a.z < 1 {
            return Err(MolGraphError::Schema(format!("atom {i} has element 0")));
        }
        atoms.push(Atom {
            element: a.z,
            formal_charge: a.charge,
            h_count: a.h,
            in_ring: a.ring,
        });
    }
    let mut bonds = Vec::with_capacity(parsed.bonds.len());
    let mut seen_pairs = std::collections::HashSet::new();
    for (i, b) in parsed.bonds.iter().enumerate() {
        if b.a >= n || b.b >= n {
            return Err(MolGraphError::Index(format!(
                "bond {i} references atom out of range ({}-{}, {n} atoms)",
                b.a, b.b
            )));
        }
        if b.a == b.b {
            return Err(MolGraphError::Schema(format!("bond {i} is a self-loop")));
        }
        if !seen_pairs.insert((b.a.min(b.b), b.a.max(b.b))) {
            return Err(MolGraphError::Schema(format!(
                "duplicate bond between {} and {}",
                b.a, b.b
            )));
        }
        let order = match &b.order {
            DocOrder::Int(1) => BondOrder::Single,
            DocOrder::Int(2) => BondOrder::Double,
            DocOrder::Int(3) => BondOrder::Triple,
            DocOrder::Tag(t) if t == "ar" => BondOrder::Aromatic,
            DocOrder::Int(o) => {
                return Err(MolGraphError::Schema(format!("bond {i} has order {o}")))
            }
            DocOrder::Tag(t) => {
                return Err(MolGraphError::Schema(format!("bond {i} has order {t:?}")))
            }
        };
        let wedge = match b.wedge.as_deref() {
            None | Some("none") => Wedge::None,
            Some("up") => Wedge::Up,
            Some("down") => Wedge::Down,
            Some(w) => return Err(MolGraphError::Schema(format!("bond {i} has wedge {w:?}"))),
        };
        bonds.push(Bond {
            a: b.a,
            b: b.b,
            order,
            wedge,
        });
    }
    for (i, c) in parsed.coords.iter().enumerate() {
        if !c.iter().all(|v| v.is_finite()) {
            return Err(MolGraphError::Geometry(format!(
                "atom {i} has non-finite coordinates"
            )));
        }
    }
    let conformer = Conformer {
        graph: MoleculeGraph { atoms, bonds },
        coords: parsed.coords,
    };
    for i in 0..n {
        for j in i + 1..n {
            if conformer.squared_distance(i, j) < MIN_ATOM_SEPARATION * MIN_ATOM_SEPARATION {
                return Err(MolGraphError::Geometry(format!(
                    "atoms {i} and {j} closer than {MIN_ATOM_SEPARATION} A"
                )));
            }
        }
    }
    Ok(MoleculeDocument {
        conformer,
        selfies: parsed.selfies,
    })
}

/// Parse just the conformer from a document.
pub fn parse_conformer(doc: &[u8]) -> Result<Conformer, MolGraphError> {
    parse_document(doc).map(|d| d.conformer)
}

/// SELFIES token sequence with the atom-position index set and phi.
/// Positions are 1-based; `atom_positions` is strictly increasing and
/// `phi(i) = atom_positions[i-1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuralTokens {
    tokens: Vec<String>,
    atom_positions: Vec<usize>,
    atom_elements: Vec<u32>,
}

impl StructuralTokens {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// The ordered atom-position set (1-based token positions).
    pub fn atom_positions(&self) -> &[usize] {
        &self.atom_positions
    }

    pub fn n_heavy(&self) -> usize {
        self.atom_positions.len()
    }

    /// phi(i) for 1-based heavy-atom index i.
    pub fn phi(&self, i: usize) -> usize {
        self.atom_positions[i - 1]
    }

    /// Element (atomic number) of the i-th introduced heavy atom, 0-based.
    pub fn atom_element(&self, i: usize) -> u32 {
        self.atom_elements[i]
    }

    /// True when the 1-based position t introduces a heavy atom (m_t = 1).
    pub fn is_atom_position(&self, t: usize) -> bool {
        self.atom_positions.binary_search(&t).is_ok()
    }

    pub fn to_selfies_string(&self) -> String {
        self.tokens.concat()
    }
}

fn element_number(sym: &str) -> Option<u32> {
    Some(match sym {
        "B" => 5,
        "C" => 6,
        "N" => 7,
        "O" => 8,
        "F" => 9,
        "Si" => 14,
        "P" => 15,
        "S" => 16,
        "Cl" => 17,
        "Se" => 34,
        "Br" => 35,
        "I" => 53,
        _ => return None,
    })
}

/// Bonding capacity per (element symbol, formal charge); selfies default
/// preset, 8 for anything unlisted.
fn capacity(sym: &str, charge: i32) -> u32 {
    match (sym, charge) {
        ("B", 0) => 3,
        ("B", 1) => 2,
        ("B", -1) => 4,
        ("C", 0) => 4,
        ("C", 1) => 5,
        ("C", -1) => 3,
        ("N", 0) => 3,
        ("N", 1) => 4,
        ("N", -1) => 2,
        ("O", 0) => 2,
        ("O", 1) => 3,
        ("O", -1) => 1,
        ("P", 0) => 5,
        ("P", 1) => 6,
        ("P", -1) => 4,
        ("S", 0) => 6,
        ("S", 1) => 7,
        ("S", -1) => 5,
        ("F", 0) | ("Cl", 0) | ("Br", 0) | ("I", 0) => 1,
        _ => 8,
    }
}

const INDEX_ALPHABET: [&str; 16] = [
    "[C]",
    "[Ring1]",
    "[Ring2]",
    "[Branch1]",
    "[=Branch1]",
    "[#Branch1]",
    "[Branch2]",
    "[=Branch2]",
    "[#Branch2]",
    "[O]",
    "[N]",
    "[=N]",
    "[=C]",
    "[#C]",
    "[S]",
    "[P]",
];

fn index_of(token: &str) -> usize {
    INDEX_ALPHABET.iter().position(|t| *t == token).unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum TokenKind {
    Atom {
        order: u32,
        symbol: String,
        h: Option<u32>,
        charge: i32,
    },
    Branch {
        order: u32,
    },
    Ring {
        order: u32,
    },
    /// Recognized only as a length/index operand ([Ring2], [Branch2], ...).
    IndexOnly,
}

fn split_tokens(s: &str) -> Result<Vec<&str>, MolGraphError> {
    if s.is_empty() {
        return Err(MolGraphError::Grammar("empty SELFIES string".into()));
    }
    let bytes = s.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'[' {
            return Err(MolGraphError::Grammar(format!(
                "expected '[' at byte {i} in {s:?}"
            )));
        }
        let mut j = i + 1;
        while j < bytes.len() && bytes[j] != b']' {
            if bytes[j] == b'[' {
                return Err(MolGraphError::Grammar(format!(
                    "nested '[' at byte {j} in {s:?}"
                )));
            }
            j += 1;
        }
        if j == bytes.len() {
            return Err(MolGraphError::Grammar(format!(
                "unbalanced bracket in {s:?}"
            )));
        }
        tokens.push(&s[i..=j]);
        i = j + 1;
    }
    Ok(tokens)
}

fn classify(token: &str) -> Result<TokenKind, MolGraphError> {
    let inner = &token[1..token.len() - 1];
    let (order, rest) = match inner.as_bytes().first() {
        Some(b'=') => (2u32, &inner[1..]),
        Some(b'#') => (3u32, &inner[1..]),
        _ => (1u32, inner),
    };
    match rest {
        "Branch1" => return Ok(TokenKind::Branch { order }),
        "Ring1" => return Ok(TokenKind::Ring { order }),
        "Branch2" | "Branch3" | "Ring2" | "Ring3" => return Ok(TokenKind::IndexOnly),
        _ => {}
    }
    // atom token: element symbol, optional H<digit>, optional [+-]<digit>
    let b = rest.as_bytes();
    if b.is_empty() || !b[0].is_ascii_uppercase() {
        return Err(MolGraphError::UnsupportedToken(token.into()));
    }
    let sym_len = if b.len() >= 2 && b[1].is_ascii_lowercase() {
        2
    } else {
        1
    };
    let symbol = &rest[..sym_len];
    if symbol == "H" {
        return Err(MolGraphError::UnsupportedToken(format!(
            "{token} (hydrogens are implicit)"
        )));
    }
    if element_number(symbol).is_none() {
        return Err(MolGraphError::UnsupportedToken(token.into()));
    }
    let mut rest2 = &rest[sym_len..];
    let mut h = None;
    if let Some(stripped) = rest2.strip_prefix('H') {
        let d = stripped
            .as_bytes()
            .first()
            .filter(|c| c.is_ascii_digit())
            .ok_or_else(|| MolGraphError::UnsupportedToken(token.into()))?;
        h = Some((d - b'0') as u32);
        rest2 = &stripped[1..];
    }
    let mut charge = 0i32;
    if !rest2.is_empty() {
        let sign = match rest2.as_bytes()[0] {
            b'+' => 1,
            b'-' => -1,
            _ => return Err(MolGraphError::UnsupportedToken(token.into())),
        };
        let d = rest2
            .as_bytes()
            .get(1)
            .filter(|c| c.is_ascii_digit())
            .ok_or_else(|| MolGraphError::UnsupportedToken(token.into()))?;
        charge = sign * (d - b'0') as i32;
        rest2 = &rest2[2..];
        if !rest2.is_empty() {
            return Err(MolGraphError::UnsupportedToken(token.into()));
        }
    }
    Ok(TokenKind::Atom {
        order,
        symbol: symbol.to_string(),
        h,
        charge,
    })
}

struct Derivation {
    /// (1-based token position, element symbol, explicit H, charge, capacity)
    atoms: Vec<(usize, String, Option<u32>, i32, u32)>,
    used: Vec<u32>,
    bonds: HashMap<(usize, usize), u32>,
    bond_order: Vec<(usize, usize, u32)>,
    rings: Vec<(usize, usize, u32)>,
}

impl Derivation {
    fn free(&self, i: usize) -> u32 {
        self.atoms[i].4 - self.used[i]
    }

    fn place(
        &mut self,
        pos: usize,
        symbol: &str,
        h: Option<u32>,
        charge: i32,
    ) -> Result<usize, MolGraphError> {
        let mut cap = capacity(symbol, charge);
        if let Some(hc) = h {
            if hc > cap {
                return Err(MolGraphError::Grammar(format!(
                    "H count {hc} exceeds capacity of {symbol} at position {pos}"
                )));
            }
            cap -= hc;
        }
        self.atoms.push((pos, symbol.to_string(), h, charge, cap));
        self.used.push(0);
        Ok(self.atoms.len() - 1)
    }

    fn add_bond(&mut self, a: usize, b: usize, order: u32) -> Result<(), MolGraphError> {
        let key = (a.min(b), a.max(b));
        if a == b || self.bonds.contains_key(&key) {
            return Err(MolGraphError::Grammar("degenerate bond".into()));
        }
        self.bonds.insert(key, order);
        self.bond_order.push((a, b, order));
        self.used[a] += order;
        self.used[b] += order;
        Ok(())
    }

    fn close_rings(&mut self) -> Result<(), MolGraphError> {
        let rings = std::mem::take(&mut self.rings);
        for (a, b, q) in rings {
            if self.bonds.contains_key(&(a.min(b), a.max(b))) {
                return Err(MolGraphError::Grammar("duplicate ring bond".into()));
            }
            let eff = q.min(self.free(a)).min(self.free(b));
            if eff == 0 {
                return Err(MolGraphError::Grammar("ring bond impossible".into()));
            }
            self.add_bond(a, b, eff)?;
        }
        Ok(())
    }
}

/// Bridge detection (iterative DFS); returns per-atom ring membership.
fn ring_membership(n: usize, bonds: &[(usize, usize, u32)]) -> Vec<bool> {
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n]; // (neighbor, edge id)
    for (e, (a, b, _)) in bonds.iter().enumerate() {
        adj[*a].push((*b, e));
        adj[*b].push((*a, e));
    }
    let mut disc = vec![usize::MAX; n];
    let mut low = vec![0usize; n];
    let mut is_bridge = vec![false; bonds.len()];
    let mut timer = 0usize;
    for root in 0..n {
        if disc[root] != usize::MAX {
            continue;
        }
        // stack of (node, parent edge, neighbor cursor)
        let mut stack = vec![(root, usize::MAX, 0usize)];
        disc[root] = timer;
        low[root] = timer;
        timer += 1;
        loop {
            let Some(&(u, pe, cursor)) = stack.last() else {
                break;
            };
            if cursor < adj[u].len() {
                stack.last_mut().unwrap().2 += 1;
                let (v, e) = adj[u][cursor];
                if e == pe {
                    continue;
                }
                if disc[v] == usize::MAX {
                    disc[v] = timer;
                    low[v] = timer;
                    timer += 1;
                    stack.push((v, e, 0));
                } else {
                    low[u] = low[u].min(disc[v]);
                }
            } else {
                stack.pop();
                if let Some(&(p, _, _)) = stack.last() {
                    low[p] = low[p].min(low[u]);
                    if low[u] > disc[p] {
                        is_bridge[pe] = true;
                    }
                }
            }
        }
    }
    let mut in_ring = vec![false; n];
    for (e, (a, b, _)) in bonds.iter().enumerate() {
        if !is_bridge[e] {
            in_ring[*a] = true;
            in_ring[*b] = true;
        }
    }
    in_ring
}

/// Parse a SELFIES string from the supported grammar subset into its token
/// sequence (with the atom-position set and phi) and the derived heavy-atom
/// graph.
pub fn parse_selfies(s: &str) -> Result<(StructuralTokens, MoleculeGraph), MolGraphError> {
    let raw = split_tokens(s)?;
    let mut kinds = Vec::with_capacity(raw.len());
    for t in &raw {
        kinds.push(classify(t)?);
    }
    let mut d = Derivation {
        atoms: Vec::new(),
        used: Vec::new(),
        bonds: HashMap::new(),
        bond_order: Vec::new(),
        rings: Vec::new(),
    };
    derive_with_raw(&mut d, &raw, &kinds, 0, raw.len(), None, None)?;
    d.close_rings()?;
    if d.atoms.is_empty() {
        return Err(MolGraphError::Grammar("no atoms derived".into()));
    }
    let in_ring = ring_membership(d.atoms.len(), &d.bond_order);
    let mut atoms = Vec::with_capacity(d.atoms.len());
    let mut atom_positions = Vec::with_capacity(d.atoms.len());
    let mut atom_elements = Vec::with_capacity(d.atoms.len());
    for (i, (pos, sym, h, charge, cap)) in d.atoms.iter().enumerate() {
        let element = element_number(sym).expect("classified element");
        let h_count = match h {
            Some(hc) => *hc,
            None => cap - d.used[i],
        };
        atoms.push(Atom {
            element,
            formal_charge: *charge,
            h_count,
            in_ring: in_ring[i],
        });
        atom_positions.push(*pos);
        atom_elements.push(element);
    }
    debug_assert!(atom_positions.windows(2).all(|w| w[0] < w[1]));
    let bonds = d
        .bond_order
        .iter()
        .map(|(a, b, o)| Bond {
            a: *a,
            b: *b,
            order: match o {
                1 => BondOrder::Single,
                2 => BondOrder::Double,
                _ => BondOrder::Triple,
            },
            wedge: Wedge::None,
        })
        .collect();
    Ok((
        StructuralTokens {
            tokens: raw.iter().map(|t| t.to_string()).collect(),
            atom_positions,
            atom_elements,
        },
        MoleculeGraph { atoms, bonds },
    ))
}

/// Recursive derivation over [start, end) with access to raw token text for
/// operand index lookup.
fn derive_with_raw(
    d: &mut Derivation,
    raw: &[&str],
    kinds: &[TokenKind],
    start: usize,
    end: usize,
    parent: Option<usize>,
    init_order: Option<u32>,
) -> Result<(), MolGraphError> {
    let mut cur = parent;
    let mut first = true;
    let mut i = start;
    while i < end {
        let pos = i + 1; // 1-based
        match &kinds[i] {
            TokenKind::Atom {
                order,
                symbol,
                h,
                charge,
            } => {
                let mut q = *order;
                match cur {
                    None => {
                        if q != 1 {
                            return Err(MolGraphError::Grammar(format!(
                                "bond prefix with no prior atom at position {pos}"
                            )));
                        }
                        cur = Some(d.place(pos, symbol, *h, *charge)?);
                    }
                    Some(prev) => {
                        if first {
                            if let Some(io) = init_order {
                                q = q.min(io);
                            }
                        }
                        let base_cap = capacity(symbol, *charge);
                        let hc = h.unwrap_or(0);
                        if hc > base_cap {
                            return Err(MolGraphError::Grammar(format!(
                                "H count {hc} exceeds capacity of {symbol} at position {pos}"
                            )));
                        }
                        let eff = q.min(d.free(prev)).min(base_cap - hc);
                        if eff == 0 {
                            return Err(MolGraphError::Grammar(format!(
                                "saturated atom cannot extend at position {pos}"
                            )));
                        }
                        let new = d.place(pos, symbol, *h, *charge)?;
                        d.add_bond(prev, new, eff)?;
                        cur = Some(new);
                    }
                }
                first = false;
                i += 1;
            }
            TokenKind::Branch { order } => {
                let prev = cur.ok_or_else(|| {
                    MolGraphError::Grammar(format!("branch with no prior atom at position {pos}"))
                })?;
                if d.free(prev) == 0 {
                    return Err(MolGraphError::Grammar(format!(
                        "branch from saturated atom at position {pos}"
                    )));
                }
                if i + 1 >= end {
                    return Err(MolGraphError::Grammar("dangling branch operand".into()));
                }
                let n = index_of(raw[i + 1]) + 1;
                if i + 2 + n > end {
                    return Err(MolGraphError::Grammar(format!(
                        "branch length {n} overruns string at position {pos}"
                    )));
                }
                if !matches!(kinds[i + 2], TokenKind::Atom { .. }) {
                    return Err(MolGraphError::Grammar(format!(
                        "branch at position {pos} must start with an atom"
                    )));
                }
                derive_with_raw(d, raw, kinds, i + 2, i + 2 + n, Some(prev), Some(*order))?;
                first = false;
                i += 2 + n;
            }
            TokenKind::Ring { order } => {
                let anchor = match cur {
                    Some(a) if a + 1 == d.atoms.len() => a,
                    _ => {
                        return Err(MolGraphError::Grammar(format!(
                            "ring at position {pos} not anchored at last atom"
                        )))
                    }
                };
                if i + 1 >= end {
                    return Err(MolGraphError::Grammar("dangling ring operand".into()));
                }
                let gap = index_of(raw[i + 1]) + 1;
                if gap > anchor {
                    return Err(MolGraphError::Grammar(format!(
                        "ring target out of range at position {pos}"
                    )));
                }
                d.rings.push((anchor, anchor - gap, *order));
                first = false;
                i += 2;
            }
            TokenKind::IndexOnly => {
                return Err(MolGraphError::UnsupportedToken(format!(
                    "index token {} outside operand position (position {pos})",
                    raw[i]
                )));
            }
        }
    }
    Ok(())
}

/// Verify that the SELFIES-derived atoms and the conformer describe the same
/// molecule and return phi as the list of 1-based atom-introducing positions.
pub fn align_phi(st: &StructuralTokens, c: &Conformer) -> Result<Vec<usize>, MolGraphError> {
    if st.n_heavy() != c.n_heavy() {
        return Err(MolGraphError::Mismatch(format!(
            "SELFIES introduces {} heavy atoms but conformer has {}",
            st.n_heavy(),
            c.n_heavy()
        )));
    }
    for (i, atom) in c.graph.atoms.iter().enumerate() {
        if st.atom_element(i) != atom.element {
            return Err(MolGraphError::Mismatch(format!(
                "element mismatch at atom {i}: SELFIES {} vs conformer {}",
                st.atom_element(i),
                atom.element
            )));
        }
    }
    Ok(st.atom_positions.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc_single_carbon() -> &'static str {
        r#"{"atoms":[{"z":6,"charge":0,"h":4,"ring":false}],"bonds":[],"coords":[[0.0,0.0,0.0]],"selfies":"[C]"}"#
    }

    #[test]
    fn parse_conformer_single_carbon() {
        let c = parse_conformer(doc_single_carbon().as_bytes()).unwrap();
        assert_eq!(c.n_heavy(), 1);
        assert!(c.graph.bonds.is_empty());
        assert_eq!(c.coords[0], [0.0, 0.0, 0.0]);
    }

    #[test]
    fn parse_conformer_is_pure() {
        let a = parse_conformer(doc_single_carbon().as_bytes()).unwrap();
        let b = parse_conformer(doc_single_carbon().as_bytes()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parse_conformer_bond_out_of_range() {
        let doc = r#"{"atoms":[{"z":6,"charge":0,"h":3,"ring":false},{"z":6,"charge":0,"h":3,"ring":false}],"bonds":[{"a":0,"b":2,"order":1}],"coords":[[0.0,0.0,0.0],[1.5,0.0,0.0]],"selfies":"[C][C]"}"#;
        assert!(matches!(
            parse_conformer(doc.as_bytes()),
            Err(MolGraphError::Index(_))
        ));
    }

    #[test]
    fn parse_conformer_coincident_atoms() {
        let doc = r#"{"atoms":[{"z":6,"charge":0,"h":3,"ring":false},{"z":6,"charge":0,"h":3,"ring":false}],"bonds":[{"a":0,"b":1,"order":1}],"coords":[[0.0,0.0,0.0],[0.0,0.0,0.0]],"selfies":"[C][C]"}"#;
        assert!(matches!(
            parse_conformer(doc.as_bytes()),
            Err(MolGraphError::Geometry(_))
        ));
    }

    #[test]
    fn parse_conformer_arity_mismatch() {
        let doc = r#"{"atoms":[{"z":6,"charge":0,"h":4,"ring":false}],"bonds":[],"coords":[],"selfies":"[C]"}"#;
        assert!(matches!(
            parse_conformer(doc.as_bytes()),
            Err(MolGraphError::Schema(_))
        ));
    }

    #[test]
    fn selfies_simple_chain() {
        let (st, g) = parse_selfies("[C][C][O]").unwrap();
        assert_eq!(st.len(), 3);
        assert_eq!(st.atom_positions(), &[1, 2, 3]);
        assert_eq!(g.n_heavy(), 3);
        assert_eq!(g.bonds.len(), 2);
        assert_eq!(g.atoms[2].element, 8);
        assert_eq!(g.atoms[0].h_count, 3);
        assert_eq!(g.atoms[1].h_count, 2);
        assert_eq!(g.atoms[2].h_count, 1);
    }

    #[test]
    fn selfies_branch_operand_is_not_an_atom() {
        // the token after [Branch1] is a length operand; it introduces no atom
        let (st, g) = parse_selfies("[C][Branch1][C][O]").unwrap();
        assert_eq!(st.len(), 4);
        assert_eq!(st.atom_positions(), &[1, 4]);
        assert_eq!(g.n_heavy(), 2);
        assert_eq!(g.bonds.len(), 1);
        assert_eq!(g.atoms[1].element, 8);
    }

    #[test]
    fn selfies_unbalanced_bracket() {
        assert!(matches!(
            parse_selfies("[C][C"),
            Err(MolGraphError::Grammar(_))
        ));
    }

    #[test]
    fn selfies_unknown_token() {
        assert!(matches!(
            parse_selfies("[C][Xe]"),
            Err(MolGraphError::UnsupportedToken(_))
        ));
        assert!(matches!(
            parse_selfies("[C][C@@H1]"),
            Err(MolGraphError::UnsupportedToken(_))
        ));
    }

    #[test]
    fn selfies_benzene_ring() {
        let (st, g) = parse_selfies("[C][=C][C][=C][C][=C][Ring1][=Branch1]").unwrap();
        assert_eq!(st.atom_positions(), &[1, 2, 3, 4, 5, 6]);
        assert_eq!(g.bonds.len(), 6);
        assert!(g.atoms.iter().all(|a| a.in_ring));
        assert_eq!(g.heavy_valence(0), 3);
    }

    #[test]
    fn selfies_roundtrip_tokens() {
        let s = "[C][C][=Branch1][C][=O][O]";
        let (st, _) = parse_selfies(s).unwrap();
        assert_eq!(st.to_selfies_string(), s);
        let (st2, _) = parse_selfies(&st.to_selfies_string()).unwrap();
        assert_eq!(st.tokens(), st2.tokens());
    }

    #[test]
    fn align_phi_identity_chain() {
        let (st, _) = parse_selfies("[C][C][O]").unwrap();
        let doc = r#"{"atoms":[{"z":6,"charge":0,"h":3,"ring":false},{"z":6,"charge":0,"h":2,"ring":false},{"z":8,"charge":0,"h":1,"ring":false}],"bonds":[{"a":0,"b":1,"order":1},{"a":1,"b":2,"order":1}],"coords":[[0.0,0.0,0.0],[1.52,0.0,0.0],[2.2,1.1,0.3]],"selfies":"[C][C][O]"}"#;
        let c = parse_conformer(doc.as_bytes()).unwrap();
        assert_eq!(align_phi(&st, &c).unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn align_phi_branch_string() {
        let (st, _) = parse_selfies("[C][Branch1][C][O]").unwrap();
        let doc = r#"{"atoms":[{"z":6,"charge":0,"h":3,"ring":false},{"z":8,"charge":0,"h":1,"ring":false}],"bonds":[{"a":0,"b":1,"order":1}],"coords":[[0.0,0.0,0.0],[1.4,0.0,0.0]],"selfies":"[C][Branch1][C][O]"}"#;
        let c = parse_conformer(doc.as_bytes()).unwrap();
        assert_eq!(align_phi(&st, &c).unwrap(), vec![1, 4]);
    }

    #[test]
    fn align_phi_count_mismatch() {
        let (st, _) = parse_selfies("[C][C][O]").unwrap();
        let doc = r#"{"atoms":[{"z":6,"charge":0,"h":3,"ring":false},{"z":6,"charge":0,"h":3,"ring":false}],"bonds":[{"a":0,"b":1,"order":1}],"coords":[[0.0,0.0,0.0],[1.5,0.0,0.0]],"selfies":"[C][C]"}"#;
        let c = parse_conformer(doc.as_bytes()).unwrap();
        assert!(matches!(
            align_phi(&st, &c),
            Err(MolGraphError::Mismatch(_))
        ));
    }

    #[test]
    fn phi_strictly_increasing() {
        for s in [
            "[C][Branch1][C][F][Branch1][C][Cl][Br]",
            "[C][C][=Branch1][C][=O][C]",
            "[C][C][C][Ring1][Ring1]",
        ] {
            let (st, _) = parse_selfies(s).unwrap();
            assert!(st.atom_positions().windows(2).all(|w| w[0] < w[1]));
        }
    }
}
