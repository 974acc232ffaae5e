//! Causal attention patterns: full, LogSparse, local and restart variants.
//!
//! Cells are 1-indexed throughout this module. Cell `l` under LogSparse attends
//! to itself and to `l - 2^m` for every `m` with `2^m < l`; candidates that fall
//! on cell 0 or below are dropped. The local variant attends densely to a left
//! window of `w` cells ending at `l` and resumes the LogSparse strategy from the
//! window's left edge. The restart variant repeats the pattern inside each
//! subsequence of length `L_sub`; earlier subsequences are seen through the
//! pattern anchored at their final cell.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::str::FromStr;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SparsityError {
    #[error("sequence length must be at least 1")]
    EmptySequence,
    #[error("cell {cell} is outside 1..={length}")]
    CellOutOfRange { cell: usize, length: usize },
    #[error("invalid pattern: {0}")]
    InvalidPattern(String),
    #[error("row {row} violates the mask invariants: {reason}")]
    InvalidRow { row: usize, reason: &'static str },
    #[error("layer count must be at least 1")]
    ZeroLayers,
    #[error("path count overflowed a 64-bit counter")]
    Overflow,
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, SparsityError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PatternKind {
    #[serde(rename = "full", alias = "full-causal")]
    FullCausal,
    #[serde(rename = "logsparse")]
    LogSparse,
    #[serde(rename = "logsparse-local")]
    LogSparseLocal,
    #[serde(rename = "logsparse-restart")]
    LogSparseRestart,
    #[serde(rename = "logsparse-restart-local")]
    LogSparseRestartLocal,
}

impl PatternKind {
    pub fn is_local(self) -> bool {
        matches!(self, Self::LogSparseLocal | Self::LogSparseRestartLocal)
    }

    pub fn is_restart(self) -> bool {
        matches!(self, Self::LogSparseRestart | Self::LogSparseRestartLocal)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::FullCausal => "full",
            Self::LogSparse => "logsparse",
            Self::LogSparseLocal => "logsparse-local",
            Self::LogSparseRestart => "logsparse-restart",
            Self::LogSparseRestartLocal => "logsparse-restart-local",
        }
    }
}

impl fmt::Display for PatternKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PatternKind {
    type Err = SparsityError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "full" | "full-causal" => Ok(Self::FullCausal),
            "logsparse" | "log-sparse" => Ok(Self::LogSparse),
            "logsparse-local" | "log-sparse-local" => Ok(Self::LogSparseLocal),
            "logsparse-restart" | "log-sparse-restart" => Ok(Self::LogSparseRestart),
            "logsparse-restart-local" | "log-sparse-restart-local" => {
                Ok(Self::LogSparseRestartLocal)
            }
            other => Err(SparsityError::InvalidPattern(format!(
                "unknown pattern kind `{other}`"
            ))),
        }
    }
}

fn default_true() -> bool {
    true
}

/// Which cells a query may attend to, independent of the sequence length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternSpec {
    pub kind: PatternKind,
    /// Dense left-window size for the `*Local` kinds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_window: Option<usize>,
    /// Subsequence length for the `*Restart` kinds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subseq_len: Option<usize>,
    /// Let every cell `l <= row_max` attend all of its past cells.
    #[serde(default = "default_true")]
    pub densify: bool,
    /// Restart kinds only: whether earlier subsequences remain visible.
    #[serde(default = "default_true")]
    pub cross_subsequence: bool,
}

impl PatternSpec {
    fn with_kind(kind: PatternKind) -> Self {
        Self {
            kind,
            local_window: None,
            subseq_len: None,
            densify: true,
            cross_subsequence: true,
        }
    }

    pub fn full() -> Self {
        Self::with_kind(PatternKind::FullCausal)
    }

    pub fn log_sparse() -> Self {
        Self::with_kind(PatternKind::LogSparse)
    }

    pub fn local(window: usize) -> Self {
        Self {
            local_window: Some(window),
            ..Self::with_kind(PatternKind::LogSparseLocal)
        }
    }

    pub fn restart(subseq_len: usize) -> Self {
        Self {
            subseq_len: Some(subseq_len),
            ..Self::with_kind(PatternKind::LogSparseRestart)
        }
    }

    pub fn restart_local(subseq_len: usize, window: usize) -> Self {
        Self {
            subseq_len: Some(subseq_len),
            local_window: Some(window),
            ..Self::with_kind(PatternKind::LogSparseRestartLocal)
        }
    }

    pub fn without_densify(mut self) -> Self {
        self.densify = false;
        self
    }

    /// Restart attention confined to each subsequence (no cross-subsequence edges).
    pub fn isolated_subsequences(mut self) -> Self {
        self.cross_subsequence = false;
        self
    }

    /// Checks the parameters against a concrete sequence length.
    pub fn validate(&self, length: usize) -> Result<()> {
        if length == 0 {
            return Err(SparsityError::EmptySequence);
        }
        if self.kind.is_local() {
            match self.local_window {
                None => {
                    return Err(SparsityError::InvalidPattern(format!(
                        "{} requires local_window",
                        self.kind
                    )))
                }
                Some(0) => {
                    return Err(SparsityError::InvalidPattern(
                        "local_window must be at least 1".into(),
                    ))
                }
                Some(_) => {}
            }
        }
        if self.kind.is_restart() {
            match self.subseq_len {
                None => {
                    return Err(SparsityError::InvalidPattern(format!(
                        "{} requires subseq_len",
                        self.kind
                    )))
                }
                Some(sub) if sub < 2 => {
                    return Err(SparsityError::InvalidPattern(
                        "subseq_len must be at least 2".into(),
                    ))
                }
                Some(sub) if sub > length => {
                    return Err(SparsityError::InvalidPattern(format!(
                        "subseq_len {sub} exceeds sequence length {length}"
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    fn window(&self) -> usize {
        if self.kind.is_local() {
            self.local_window.unwrap_or(1)
        } else {
            1
        }
    }

    fn block_len(&self, length: usize) -> usize {
        if self.kind.is_restart() {
            self.subseq_len.unwrap_or(length)
        } else {
            length
        }
    }
}

impl fmt::Display for PatternSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind)?;
        if let Some(sub) = self.subseq_len.filter(|_| self.kind.is_restart()) {
            write!(f, " sub={sub}")?;
        }
        if let Some(win) = self.local_window.filter(|_| self.kind.is_local()) {
            write!(f, " win={win}")?;
        }
        Ok(())
    }
}

/// `⌈log₂ n⌉`, the local window length derived from a subsequence length.
pub fn default_local_window(subseq_len: usize) -> usize {
    if subseq_len <= 1 {
        1
    } else {
        (usize::BITS - (subseq_len - 1).leading_zeros()) as usize
    }
}

pub(crate) fn floor_log2(n: usize) -> usize {
    debug_assert!(n > 0);
    (usize::BITS - 1 - n.leading_zeros()) as usize
}

/// `⌊log₂ L⌋ + 1`: layers after which a LogSparse stack of length `L` lets
/// every cell reach every earlier cell.
pub fn log_sparse_coverage_bound(length: usize) -> usize {
    if length == 0 {
        0
    } else {
        floor_log2(length) + 1
    }
}

/// Cells `e - 2^m` that stay at or above 1, ascending.
fn push_log_predecessors(e: usize, out: &mut Vec<usize>) {
    let start = out.len();
    let mut step = 1usize;
    while step < e {
        out.push(e - step);
        step <<= 1;
    }
    out[start..].reverse();
}

/// Pattern of a query at position `p` (1-indexed) inside one block, ascending.
fn push_block_row(p: usize, window: usize, offset: usize, out: &mut Vec<usize>) {
    if p <= window {
        out.extend((1..=p).map(|c| c + offset));
        return;
    }
    let edge = p - window + 1;
    let start = out.len();
    push_log_predecessors(edge, out);
    for c in &mut out[start..] {
        *c += offset;
    }
    out.extend((edge..=p).map(|c| c + offset));
}

/// The cells that cell `l` attends to, before densification.
pub fn index_set(l: usize, length: usize, spec: &PatternSpec) -> Result<Vec<usize>> {
    spec.validate(length)?;
    if l == 0 || l > length {
        return Err(SparsityError::CellOutOfRange { cell: l, length });
    }
    Ok(raw_row(l, length, spec))
}

fn raw_row(l: usize, length: usize, spec: &PatternSpec) -> Vec<usize> {
    if spec.kind == PatternKind::FullCausal {
        return (1..=l).collect();
    }
    let block = spec.block_len(length);
    let window = spec.window();
    let b = (l - 1) / block;
    let mut row = Vec::new();
    if spec.kind.is_restart() && spec.cross_subsequence {
        for earlier in 0..b {
            push_block_row(block, window, earlier * block, &mut row);
        }
    }
    push_block_row(l - b * block, window, b * block, &mut row);
    row
}

/// Boolean `L × L` attention table; `allowed(l, j)` means cell `l` may attend cell `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMatrix {
    length: usize,
    allowed: Vec<bool>,
}

impl MaskMatrix {
    /// Builds a mask from 1-indexed rows, checking causality and the diagonal.
    pub fn from_rows(length: usize, rows: &[Vec<usize>]) -> Result<Self> {
        if length == 0 {
            return Err(SparsityError::EmptySequence);
        }
        if rows.len() != length {
            return Err(SparsityError::InvalidPattern(format!(
                "expected {length} rows, got {}",
                rows.len()
            )));
        }
        let mut allowed = vec![false; length * length];
        for (i, row) in rows.iter().enumerate() {
            let l = i + 1;
            for &j in row {
                if j == 0 || j > l {
                    return Err(SparsityError::InvalidRow {
                        row: l,
                        reason: "attends a cell to its right or cell 0",
                    });
                }
                allowed[i * length + j - 1] = true;
            }
            if !allowed[i * length + i] {
                return Err(SparsityError::InvalidRow {
                    row: l,
                    reason: "missing self-attention",
                });
            }
        }
        Ok(Self { length, allowed })
    }

    pub fn full_causal(length: usize) -> Self {
        let mut allowed = vec![false; length * length];
        for i in 0..length {
            allowed[i * length..i * length + i + 1].fill(true);
        }
        Self { length, allowed }
    }

    pub fn len(&self) -> usize {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    /// 1-indexed lookup; out-of-range cells are reported as not allowed.
    pub fn is_allowed(&self, l: usize, j: usize) -> bool {
        l >= 1 && j >= 1 && l <= self.length && j <= self.length && self.allowed[(l - 1) * self.length + j - 1]
    }

    /// Row `i` (0-indexed) as a boolean slice of width `L`.
    pub fn row_flags(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.length..(i + 1) * self.length]
    }

    /// Allowed cells of row `l` (1-indexed), ascending.
    pub fn row(&self, l: usize) -> Vec<usize> {
        self.row_flags(l - 1)
            .iter()
            .enumerate()
            .filter_map(|(j, &a)| a.then_some(j + 1))
            .collect()
    }

    pub fn row_len(&self, l: usize) -> usize {
        self.row_flags(l - 1).iter().filter(|&&a| a).count()
    }

    pub fn nnz(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    /// The leading `n × n` block; causal masks stay consistent under truncation.
    pub fn truncate(&self, n: usize) -> Self {
        assert!(n >= 1 && n <= self.length, "truncation to {n} of a length-{} mask", self.length);
        let mut allowed = Vec::with_capacity(n * n);
        for i in 0..n {
            allowed.extend_from_slice(&self.row_flags(i)[..n]);
        }
        Self { length: n, allowed }
    }

    /// Dense 0/1 matrix, one row per line.
    pub fn to_dense_csv(&self) -> String {
        let mut out = String::with_capacity(self.length * self.length * 2);
        for i in 0..self.length {
            let line: Vec<&str> = self
                .row_flags(i)
                .iter()
                .map(|&a| if a { "1" } else { "0" })
                .collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    /// One `l,j` pair per allowed entry, 1-indexed, row-major.
    pub fn to_coordinate_list(&self) -> String {
        let mut out = String::new();
        for l in 1..=self.length {
            for j in self.row(l) {
                out.push_str(&format!("{l},{j}\n"));
            }
        }
        out
    }

    pub fn write_dense_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(fs::write(path, self.to_dense_csv())?)
    }

    pub fn write_coordinate_list(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(fs::write(path, self.to_coordinate_list())?)
    }
}

/// Builds the mask for `spec` at sequence length `length`.
pub fn build_mask(spec: &PatternSpec, length: usize) -> Result<MaskMatrix> {
    spec.validate(length)?;
    let mut rows: Vec<Vec<usize>> = (1..=length).map(|l| raw_row(l, length, spec)).collect();
    if spec.densify && spec.kind != PatternKind::FullCausal {
        let row_max = rows.iter().map(Vec::len).max().unwrap_or(0);
        for (i, row) in rows.iter_mut().enumerate().take(row_max.min(length)) {
            *row = (1..=i + 1).collect();
        }
    }
    MaskMatrix::from_rows(length, &rows)
}

/// Square bit matrix; bit `(l, j)` set when cell `j` reaches cell `l` (0-indexed).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReachSets {
    length: usize,
    words: usize,
    bits: Vec<u64>,
}

impl ReachSets {
    fn from_mask(mask: &MaskMatrix) -> Self {
        let length = mask.len();
        let words = length.div_ceil(64);
        let mut bits = vec![0u64; length * words];
        for i in 0..length {
            for (j, &a) in mask.row_flags(i).iter().enumerate() {
                if a {
                    bits[i * words + j / 64] |= 1 << (j % 64);
                }
            }
        }
        Self { length, words, bits }
    }

    fn row(&self, i: usize) -> &[u64] {
        &self.bits[i * self.words..(i + 1) * self.words]
    }

    /// One more layer: `S_l^{k+1} = ∪_{p ∈ I_l} S_p^k`.
    fn step(&self, mask: &MaskMatrix) -> Self {
        let mut bits = vec![0u64; self.bits.len()];
        for i in 0..self.length {
            let dst = &mut bits[i * self.words..(i + 1) * self.words];
            for (p, &a) in mask.row_flags(i).iter().enumerate() {
                if a {
                    for (d, s) in dst.iter_mut().zip(self.row(p)) {
                        *d |= *s;
                    }
                }
            }
        }
        Self {
            length: self.length,
            words: self.words,
            bits,
        }
    }

    /// Whether cell `j` has reached cell `l` (both 1-indexed).
    pub fn contains(&self, l: usize, j: usize) -> bool {
        let (i, k) = (l - 1, j - 1);
        self.bits[i * self.words + k / 64] >> (k % 64) & 1 == 1
    }

    pub fn len(&self) -> usize {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    fn covered(&self, l: usize) -> bool {
        (1..=l).all(|j| self.contains(l, j))
    }

    fn fully_covered(&self) -> bool {
        (1..=self.length).all(|l| self.covered(l))
    }
}

/// Cells whose information reaches each cell after `layers` stacked layers.
pub fn reachable_after(mask: &MaskMatrix, layers: usize) -> Result<ReachSets> {
    if layers == 0 {
        return Err(SparsityError::ZeroLayers);
    }
    let mut reach = ReachSets::from_mask(mask);
    for _ in 1..layers {
        reach = reach.step(mask);
    }
    Ok(reach)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReachabilityReport {
    pub layers_tested: usize,
    pub fully_covered: bool,
    /// `(j, l)` pairs with `j <= l` where `j` has not reached `l`.
    pub uncovered_pairs: Vec<(usize, usize)>,
}

pub fn reachability_report(mask: &MaskMatrix, layers: usize) -> Result<ReachabilityReport> {
    let reach = reachable_after(mask, layers)?;
    let mut uncovered_pairs = Vec::new();
    for l in 1..=mask.len() {
        for j in 1..=l {
            if !reach.contains(l, j) {
                uncovered_pairs.push((j, l));
            }
        }
    }
    Ok(ReachabilityReport {
        layers_tested: layers,
        fully_covered: uncovered_pairs.is_empty(),
        uncovered_pairs,
    })
}

/// Smallest layer count after which every `j <= l` reaches `l`; `None` when
/// the reachable sets saturate short of full coverage.
pub fn min_layers_full_coverage(mask: &MaskMatrix) -> Option<usize> {
    let mut reach = ReachSets::from_mask(mask);
    let mut layers = 1;
    loop {
        if reach.fully_covered() {
            return Some(layers);
        }
        let next = reach.step(mask);
        if next == reach {
            return None;
        }
        reach = next;
        layers += 1;
    }
}

fn walk_counts<T: Clone>(
    mask: &MaskMatrix,
    j: usize,
    l: usize,
    layers: usize,
    zero: T,
    one: T,
    add: impl Fn(&T, &T) -> Result<T>,
) -> Result<T> {
    let length = mask.len();
    for cell in [j, l] {
        if cell == 0 || cell > length {
            return Err(SparsityError::CellOutOfRange { cell, length });
        }
    }
    if j > l {
        return Err(SparsityError::InvalidPattern(format!(
            "path source {j} lies to the right of target {l}"
        )));
    }
    if layers == 0 {
        return Err(SparsityError::ZeroLayers);
    }
    // walks only move rightward or stay, so cells j..=l suffice
    let span = l - j + 1;
    let mut current = vec![zero.clone(); span];
    current[0] = one;
    for _ in 0..layers {
        let mut next = vec![zero.clone(); span];
        for (q, slot) in next.iter_mut().enumerate() {
            let flags = &mask.row_flags(j - 1 + q)[j - 1..j + q];
            for (p, &a) in flags.iter().enumerate() {
                if a {
                    *slot = add(slot, &current[p])?;
                }
            }
        }
        current = next;
    }
    Ok(current.pop().expect("span is non-empty"))
}

/// Number of walks `j → … → l` with exactly `layers` mask edges (self-loops included).
pub fn count_paths(mask: &MaskMatrix, j: usize, l: usize, layers: usize) -> Result<BigUint> {
    walk_counts(mask, j, l, layers, BigUint::ZERO, BigUint::from(1u8), |a, b| Ok(a + b))
}

/// Same as [`count_paths`] with a 64-bit counter that reports overflow.
pub fn count_paths_u64(mask: &MaskMatrix, j: usize, l: usize, layers: usize) -> Result<u64> {
    walk_counts(mask, j, l, layers, 0u64, 1u64, |a, b| {
        a.checked_add(*b).ok_or(SparsityError::Overflow)
    })
}

/// Per-layer attention memory of a mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryBudget {
    pub nnz: usize,
    pub dense_cells: usize,
    pub row_max: usize,
    /// `L × row_max`, the size of the attention buffer a row-padded layout needs.
    pub analytic_bound: usize,
    /// Dense length with the same cost: `√analytic_bound`, rounded to nearest.
    pub equivalent_full_length: usize,
}

impl MemoryBudget {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("budget serializes")
    }
}

fn isqrt_round(n: usize) -> usize {
    let mut r = (n as f64).sqrt() as usize;
    while r * r > n {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= n {
        r += 1;
    }
    // round half up: n >= (r + 1/2)^2  <=>  n > r^2 + r
    if n > r * r + r {
        r + 1
    } else {
        r
    }
}

pub fn attended_budget(mask: &MaskMatrix) -> MemoryBudget {
    let length = mask.len();
    let row_max = (1..=length).map(|l| mask.row_len(l)).max().unwrap_or(0);
    let analytic_bound = length * row_max;
    MemoryBudget {
        nnz: mask.nnz(),
        dense_cells: length * length,
        row_max,
        analytic_bound,
        equivalent_full_length: isqrt_round(analytic_bound),
    }
}
