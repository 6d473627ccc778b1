//! Geometric shell fingerprints: atomic-invariant seeding, iterative
//! shell gathering and hashing over concentric radii, and vocabulary
//! folding into a discrete code table.
//!
//! Identifiers are 32-bit MurmurHash3 (x86 variant, seed 0) digests of
//! little-endian word serializations, so tables are bit-reproducible across
//! platforms. Fingerprints are invariant under proper rigid motions and
//! sensitive to chirality through an octant stereo code built from
//! content-selected reference axes; mirror images of genuinely planar
//! shells hash identically.

use crate::molgraph::{Conformer, MoleculeGraph};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct E3fpConfig {
    /// Iteration count; the table has k+1 levels.
    pub k: u32,
    /// Radius step in angstroms; level j gathers within r*j.
    pub r: f64,
    /// Fold target |F|; codes live in 0..vocab_size.
    pub vocab_size: u32,
    /// Squared-distance tolerance for shell boundaries and distance ties.
    pub dist_eps: f64,
    /// Cosine tolerance for collinearity and near-plane stereo decisions.
    pub stereo_cos_tol: f64,
}

impl Default for E3fpConfig {
    fn default() -> Self {
        E3fpConfig {
            k: 5,
            r: 1.718,
            vocab_size: 4096,
            dist_eps: 1e-6,
            stereo_cos_tol: 0.01,
        }
    }
}

impl E3fpConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.r <= 0.0 {
            return Err(format!("radius step must be positive, got {}", self.r));
        }
        if self.vocab_size < 2 {
            return Err(format!("vocab_size must be >= 2, got {}", self.vocab_size));
        }
        if self.dist_eps <= 0.0 {
            return Err(format!("dist_eps must be positive, got {}", self.dist_eps));
        }
        if !(0.0 < self.stereo_cos_tol && self.stereo_cos_tol < 1.0) {
            return Err(format!(
                "stereo_cos_tol must be in (0,1), got {}",
                self.stereo_cos_tol
            ));
        }
        Ok(())
    }
}

/// Canonical MurmurHash3 x86 32-bit.
pub fn murmur3_32(bytes: &[u8], seed: u32) -> u32 {
    const C1: u32 = 0xcc9e_2d51;
    const C2: u32 = 0x1b87_3593;
    let mut h = seed;
    let mut chunks = bytes.chunks_exact(4);
    for block in &mut chunks {
        let mut k = u32::from_le_bytes(block.try_into().unwrap());
        k = k.wrapping_mul(C1);
        k = k.rotate_left(15);
        k = k.wrapping_mul(C2);
        h ^= k;
        h = h.rotate_left(13);
        h = h.wrapping_mul(5).wrapping_add(0xe654_6b64);
    }
    let tail = chunks.remainder();
    if !tail.is_empty() {
        let mut k = 0u32;
        for (i, &b) in tail.iter().enumerate() {
            k |= (b as u32) << (8 * i);
        }
        k = k.wrapping_mul(C1);
        k = k.rotate_left(15);
        k = k.wrapping_mul(C2);
        h ^= k;
    }
    h ^= bytes.len() as u32;
    h ^= h >> 16;
    h = h.wrapping_mul(0x85eb_ca6b);
    h ^= h >> 13;
    h = h.wrapping_mul(0xc2b2_ae35);
    h ^= h >> 16;
    h
}

/// The seven ECFP-style invariants of a heavy atom: heavy-neighbor count,
/// heavy-bond valence, atomic number, mass code (fixed 0), formal charge,
/// attached hydrogens, ring flag.
pub fn atomic_invariants(g: &MoleculeGraph, i: usize) -> [u32; 7] {
    let atom = &g.atoms[i];
    [
        g.heavy_degree(i),
        g.heavy_valence(i),
        atom.element,
        0,
        atom.formal_charge as u32,
        atom.h_count,
        atom.in_ring as u32,
    ]
}

fn initial_identifier(g: &MoleculeGraph, i: usize) -> u32 {
    let inv = atomic_invariants(g, i);
    let mut bytes = [0u8; 28];
    for (w, v) in inv.iter().enumerate() {
        bytes[w * 4..w * 4 + 4].copy_from_slice(&v.to_le_bytes());
    }
    murmur3_32(&bytes, 0)
}

/// Bond order code between two atoms: 1/2/3, aromatic 4, non-bonded 0.
pub fn connectivity(g: &MoleculeGraph, a: usize, b: usize) -> u32 {
    g.bond_between(a, b).map(|bd| bd.order.code()).unwrap_or(0)
}

/// One annotated shell member: connectivity code to the center, the
/// member's previous-level identifier, and its octant stereo code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShellMember {
    pub connectivity: u32,
    pub prev_id: u32,
    pub stereo: i32,
}

/// A gathered shell: center atom, level, and members sorted ascending by
/// (connectivity, prev_id, stereo).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShellDescriptor {
    pub center: usize,
    pub level: u32,
    pub members: Vec<ShellMember>,
}

struct Vec3([f64; 3]);

impl Vec3 {
    fn sub(a: [f64; 3], b: [f64; 3]) -> Vec3 {
        Vec3([a[0] - b[0], a[1] - b[1], a[2] - b[2]])
    }

    fn dot(&self, o: &Vec3) -> f64 {
        self.0[0] * o.0[0] + self.0[1] * o.0[1] + self.0[2] * o.0[2]
    }

    fn cross(&self, o: &Vec3) -> Vec3 {
        Vec3([
            self.0[1] * o.0[2] - self.0[2] * o.0[1],
            self.0[2] * o.0[0] - self.0[0] * o.0[2],
            self.0[0] * o.0[1] - self.0[1] * o.0[0],
        ])
    }

    fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    fn unit(&self) -> Option<Vec3> {
        let n = self.norm();
        if n == 0.0 {
            return None;
        }
        Some(Vec3([self.0[0] / n, self.0[1] / n, self.0[2] / n]))
    }
}

/// Raw member info before stereo assignment.
struct Candidate {
    atom: usize,
    conn: u32,
    prev: u32,
    d2: f64,
    folded_l0: u32,
}

impl Candidate {
    /// Content-only ordering key for reference selection; distance is
    /// bucketed by dist_eps so storage order and float noise cannot leak.
    fn key(&self, eps: f64) -> (u32, u32, i64, u32) {
        (self.prev, self.conn, (self.d2 / eps).floor() as i64, self.folded_l0)
    }
}

/// Octant stereo codes for every member of one shell. Reference member r1
/// is the smallest by (prev_id, connectivity, distance, folded level-0);
/// r2 is the next-smallest not collinear with the r1 axis. Axes:
/// y = unit(center->r1), z = unit(y x unit(center->r2)), x = y x z.
/// sigma encodes the octant of each remaining member and is 0 for r1, r2,
/// members within the cosine tolerance of an axis plane, and whole shells
/// whose references are ambiguous or undefined.
fn stereo_codes(c: &Conformer, center: usize, cands: &[Candidate], cfg: &E3fpConfig) -> Vec<i32> {
    let n = cands.len();
    let zeros = vec![0i32; n];
    if n < 2 {
        return zeros;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| cands[i].key(cfg.dist_eps));
    let r1 = order[0];
    if cands[order[1]].key(cfg.dist_eps) == cands[r1].key(cfg.dist_eps) {
        return zeros; // ambiguous primary reference
    }
    let y = match Vec3::sub(c.coords[cands[r1].atom], c.coords[center]).unit() {
        Some(v) => v,
        None => return zeros,
    };
    let mut r2 = None;
    for (rank, &i) in order.iter().enumerate().skip(1) {
        let v = match Vec3::sub(c.coords[cands[i].atom], c.coords[center]).unit() {
            Some(v) => v,
            None => continue,
        };
        if y.dot(&v).abs() >= 1.0 - cfg.stereo_cos_tol {
            continue; // collinear with the primary axis
        }
        if let Some(&next) = order.get(rank + 1) {
            if cands[next].key(cfg.dist_eps) == cands[i].key(cfg.dist_eps) {
                let w = Vec3::sub(c.coords[cands[next].atom], c.coords[center]).unit();
                if w.map(|w| y.dot(&w).abs() < 1.0 - cfg.stereo_cos_tol) == Some(true) {
                    return zeros; // ambiguous secondary reference
                }
            }
        }
        r2 = Some((i, v));
        break;
    }
    let Some((r2, u2)) = r2 else {
        return zeros;
    };
    let z = match y.cross(&u2).unit() {
        Some(v) => v,
        None => return zeros,
    };
    let x = y.cross(&z);
    let mut out = vec![0i32; n];
    for i in 0..n {
        if i == r1 || i == r2 {
            continue;
        }
        let v = match Vec3::sub(c.coords[cands[i].atom], c.coords[center]).unit() {
            Some(v) => v,
            None => continue,
        };
        let cx = v.dot(&x);
        let cy = v.dot(&y);
        let cz = v.dot(&z);
        if cx.abs() <= cfg.stereo_cos_tol
            || cy.abs() <= cfg.stereo_cos_tol
            || cz.abs() <= cfg.stereo_cos_tol
        {
            continue; // near an axis plane
        }
        let mut base = 1i32;
        if cx < 0.0 {
            base += 2;
        }
        if cy < 0.0 {
            base += 1;
        }
        out[i] = if cz > 0.0 { base } else { -base };
    }
    out
}

/// Gather the level-`level` shell around atom `i`: all other atoms with
/// squared distance <= r_j^2 + dist_eps, annotated with connectivity,
/// previous-level identifiers, and stereo codes, sorted canonically.
pub fn gather_shell(
    c: &Conformer,
    prev_ids: &[u32],
    i: usize,
    r_j: f64,
    level: u32,
    cfg: &E3fpConfig,
) -> ShellDescriptor {
    assert_eq!(prev_ids.len(), c.n_heavy(), "one previous id per heavy atom");
    let folded_l0: Vec<u32> = (0..c.n_heavy())
        .map(|a| initial_identifier(&c.graph, a) % cfg.vocab_size)
        .collect();
    let limit = r_j * r_j + cfg.dist_eps;
    let mut cands = Vec::new();
    for k in 0..c.n_heavy() {
        if k == i {
            continue;
        }
        let d2 = c.squared_distance(i, k);
        if d2 <= limit {
            cands.push(Candidate {
                atom: k,
                conn: connectivity(&c.graph, k, i),
                prev: prev_ids[k],
                d2,
                folded_l0: folded_l0[k],
            });
        }
    }
    let stereo = stereo_codes(c, i, &cands, cfg);
    let mut members: Vec<ShellMember> = cands
        .iter()
        .zip(&stereo)
        .map(|(cand, &s)| ShellMember {
            connectivity: cand.conn,
            prev_id: cand.prev,
            stereo: s,
        })
        .collect();
    members.sort_by_key(|m| (m.connectivity, m.prev_id, m.stereo));
    ShellDescriptor {
        center: i,
        level,
        members,
    }
}

/// Hash a shell: serialize [level, previous center identifier] then each
/// sorted member triple as little-endian 32-bit words (stereo in two's
/// complement), and digest with murmur3 seed 0.
pub fn hash_shell(sd: &ShellDescriptor, prev_center: u32) -> u32 {
    let mut bytes = Vec::with_capacity(8 + sd.members.len() * 12);
    bytes.extend_from_slice(&sd.level.to_le_bytes());
    bytes.extend_from_slice(&prev_center.to_le_bytes());
    for m in &sd.members {
        bytes.extend_from_slice(&m.connectivity.to_le_bytes());
        bytes.extend_from_slice(&m.prev_id.to_le_bytes());
        bytes.extend_from_slice(&m.stereo.to_le_bytes());
    }
    murmur3_32(&bytes, 0)
}

/// Per-atom, per-level identifier table: raw 32-bit digests and their
/// vocabulary-folded codes (raw mod |F|, unsigned).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FingerprintTable {
    pub n_atoms: usize,
    pub k: u32,
    pub vocab_size: u32,
    /// n_atoms rows, k+1 columns.
    pub raw: Vec<Vec<u32>>,
    pub folded: Vec<Vec<u32>>,
}

impl FingerprintTable {
    pub fn levels(&self) -> usize {
        self.k as usize + 1
    }

    /// Folded codes for atom i (0-based), all k+1 levels.
    pub fn folded_row(&self, i: usize) -> &[u32] {
        &self.folded[i]
    }

    /// JSON export with raw identifiers as fixed-width hex.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Export<'a> {
            n_atoms: usize,
            k: u32,
            vocab: u32,
            folded: &'a [Vec<u32>],
            raw_hex: Vec<Vec<String>>,
        }
        let raw_hex = self
            .raw
            .iter()
            .map(|row| row.iter().map(|v| format!("{v:08x}")).collect())
            .collect();
        let export = Export {
            n_atoms: self.n_atoms,
            k: self.k,
            vocab: self.vocab_size,
            folded: &self.folded,
            raw_hex,
        };
        serde_json::to_string(&export).expect("table serializes")
    }
}

/// Run the full fingerprint: invariant seeding at level 0, then k rounds of
/// shell gathering and hashing at radii r*j, then vocabulary folding.
pub fn fingerprint(c: &Conformer, cfg: &E3fpConfig) -> FingerprintTable {
    let n = c.n_heavy();
    let levels = cfg.k as usize + 1;
    let mut raw = vec![vec![0u32; levels]; n];
    for i in 0..n {
        raw[i][0] = initial_identifier(&c.graph, i);
    }
    for j in 1..levels {
        let r_j = cfg.r * j as f64;
        let prev: Vec<u32> = raw.iter().map(|row| row[j - 1]).collect();
        for i in 0..n {
            let sd = gather_shell(c, &prev, i, r_j, j as u32, cfg);
            raw[i][j] = hash_shell(&sd, prev[i]);
        }
    }
    let folded = raw
        .iter()
        .map(|row| row.iter().map(|v| v % cfg.vocab_size).collect())
        .collect();
    FingerprintTable {
        n_atoms: n,
        k: cfg.k,
        vocab_size: cfg.vocab_size,
        raw,
        folded,
    }
}
