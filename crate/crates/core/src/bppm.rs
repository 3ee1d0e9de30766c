//! Base-pair probability matrices under a per-pair Boltzmann model.
//!
//! Each allowed pair (AU, GC, GU in either orientation) contributes a fixed
//! free energy; a structure's weight is the product of its pair weights
//! `exp(-E/RT)`. The inside pass builds substring partition functions, the
//! outside pass turns them into pair probabilities by walking pairs from the
//! widest span inward. Everything is kept in log space so sequences of a few
//! hundred nucleotides do not overflow.
//!
//! [`enumerate_structures`] and [`oracle_bppm`] brute-force the same ensemble
//! for short sequences and exist only to check the dynamic programs.

use std::fmt::Write as _;

use thiserror::Error;

use crate::seqio::RnaSequence;

/// Longest sequence [`enumerate_structures`] accepts.
pub const MAX_ENUMERATION_LEN: usize = 22;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BppmError {
    #[error("sequence length {n} exceeds the enumeration limit of {max}")]
    TooLong { n: usize, max: usize },
    #[error("invalid energy model: {0}")]
    InvalidModel(String),
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
}

/// Per-pair energies (kcal/mol), thermal energy and minimum hairpin size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyModel {
    pub e_gc: f64,
    pub e_au: f64,
    pub e_gu: f64,
    /// RT in kcal/mol.
    pub rt: f64,
    /// Minimum number of unpaired residues enclosed by a pair.
    pub min_hairpin: usize,
}

impl Default for EnergyModel {
    fn default() -> Self {
        // 310.15 K
        Self {
            e_gc: -3.0,
            e_au: -2.0,
            e_gu: -1.0,
            rt: 0.6163,
            min_hairpin: 3,
        }
    }
}

impl EnergyModel {
    pub fn validate(&self) -> Result<(), BppmError> {
        if !(self.rt.is_finite() && self.rt > 0.0) {
            return Err(BppmError::InvalidModel(format!("rt must be positive, got {}", self.rt)));
        }
        for (name, e) in [("GC", self.e_gc), ("AU", self.e_au), ("GU", self.e_gu)] {
            if !e.is_finite() {
                return Err(BppmError::InvalidModel(format!("{name} energy is not finite")));
            }
        }
        Ok(())
    }

    /// Energy of an allowed pair, `None` for forbidden combinations.
    pub fn pair_energy(&self, a: u8, b: u8) -> Option<f64> {
        match (a, b) {
            (b'G', b'C') | (b'C', b'G') => Some(self.e_gc),
            (b'A', b'U') | (b'U', b'A') => Some(self.e_au),
            (b'G', b'U') | (b'U', b'G') => Some(self.e_gu),
            _ => None,
        }
    }

    /// `-E/RT` for allowed pairs, `-inf` otherwise.
    pub fn log_pair_weight(&self, a: u8, b: u8) -> f64 {
        self.pair_energy(a, b)
            .map_or(f64::NEG_INFINITY, |e| -e / self.rt)
    }

    /// Stable text identifying the model, stored alongside generated data.
    pub fn fingerprint(&self) -> String {
        format!(
            "pair-energy gc={:e} au={:e} gu={:e} rt={:e} h={}",
            self.e_gc, self.e_au, self.e_gu, self.rt, self.min_hairpin
        )
    }
}

/// Boltzmann weight of pairing residue `a` with `b`.
pub fn pair_weight(model: &EnergyModel, a: u8, b: u8) -> f64 {
    model.log_pair_weight(a, b).exp()
}

/// Numerically stable `ln(sum(exp(x)))`. Empty or all `-inf` input gives `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Log partition functions `ln Q(i, j)` for every substring, 1-based and
/// inclusive. Empty intervals (`j < i`) hold `ln 1 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct InsideTable {
    n: usize,
    stride: usize,
    log_q: Vec<f64>,
}

impl InsideTable {
    pub fn n(&self) -> usize {
        self.n
    }

    /// `ln Q(i, j)`; `i` may be `n + 1` and `j` may be `0` or `i - 1` for empty
    /// intervals.
    pub fn log_q(&self, i: usize, j: usize) -> f64 {
        if j < i {
            0.0
        } else {
            self.log_q[i * self.stride + j]
        }
    }

    /// Log partition function of the whole sequence.
    pub fn log_total(&self) -> f64 {
        self.log_q(1, self.n)
    }
}

/// Residue-level context shared by the inside and outside passes.
struct Ctx<'a> {
    seq: &'a [u8],
    model: &'a EnergyModel,
}

impl Ctx<'_> {
    /// `ln w(i, j)`, 1-based; `-inf` if the pair is forbidden or too short.
    fn log_w(&self, i: usize, j: usize) -> f64 {
        if j < i + self.model.min_hairpin + 1 {
            return f64::NEG_INFINITY;
        }
        self.model.log_pair_weight(self.seq[i - 1], self.seq[j - 1])
    }

    /// `ln Qb(i, j) = ln w(i, j) + ln Q(i+1, j-1)`.
    fn log_qb(&self, q: &InsideTable, i: usize, j: usize) -> f64 {
        let w = self.log_w(i, j);
        if w == f64::NEG_INFINITY {
            w
        } else {
            w + q.log_q(i + 1, j - 1)
        }
    }
}

/// Inside pass: `Q(i,j) = Q(i+1,j) + sum_k w(i,k) Q(i+1,k-1) Q(k+1,j)`.
pub fn inside(seq: &RnaSequence, model: &EnergyModel) -> InsideTable {
    inside_bytes(seq.as_bytes(), model)
}

fn inside_bytes(seq: &[u8], model: &EnergyModel) -> InsideTable {
    let n = seq.len();
    let stride = n + 2;
    let mut table = InsideTable {
        n,
        stride,
        log_q: vec![0.0; stride * stride],
    };
    let ctx = Ctx { seq, model };
    let h = model.min_hairpin;
    let mut terms = Vec::with_capacity(n + 1);
    for i in (1..=n).rev() {
        for j in i..=n {
            terms.clear();
            terms.push(table.log_q(i + 1, j));
            for k in (i + h + 1)..=j {
                let w = ctx.log_w(i, k);
                if w > f64::NEG_INFINITY {
                    terms.push(w + table.log_q(i + 1, k - 1) + table.log_q(k + 1, j));
                }
            }
            table.log_q[i * stride + j] = log_sum_exp(&terms);
        }
    }
    table
}

/// Pair probabilities `P(i, j)` for `1 <= i < j <= n`, packed upper triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct Bppm {
    n: usize,
    p: Vec<f64>,
}

impl Bppm {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            p: vec![0.0; n * n.saturating_sub(1) / 2],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    fn index(&self, i: usize, j: usize) -> usize {
        let (a, b) = (i - 1, j - 1);
        a * (2 * self.n - a - 1) / 2 + (b - a - 1)
    }

    /// `P(min(i,j), max(i,j))`, 1-based. The diagonal is 0.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        assert!(i >= 1 && j <= self.n, "index ({i}, {j}) out of range for n = {}", self.n);
        if i == j {
            0.0
        } else {
            self.p[self.index(i, j)]
        }
    }

    /// Sets `P(i, j)` for `i < j`.
    pub fn set(&mut self, i: usize, j: usize, p: f64) {
        assert!(1 <= i && i < j && j <= self.n, "index ({i}, {j}) out of range for n = {}", self.n);
        let idx = self.index(i, j);
        self.p[idx] = p;
    }

    /// All `(i, j, p)` with `i < j`, in `(i, j)` order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (1..=self.n).flat_map(move |i| ((i + 1)..=self.n).map(move |j| (i, j, self.get(i, j))))
    }

    /// Probability that position `i` is paired with anything.
    pub fn pairing_probability(&self, i: usize) -> f64 {
        (1..=self.n).filter(|&j| j != i).map(|j| self.get(i, j)).sum()
    }

    /// Largest elementwise absolute difference; panics on size mismatch.
    pub fn max_abs_diff(&self, other: &Bppm) -> f64 {
        assert_eq!(self.n, other.n, "comparing matrices of different size");
        self.p
            .iter()
            .zip(&other.p)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Text form: `BPPM <n>` then one `i j p` line per nonzero entry, `p` with
    /// 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut out = format!("BPPM {}\n", self.n);
        for (i, j, p) in self.entries().filter(|e| e.2 != 0.0) {
            writeln!(out, "{i} {j} {p:.16e}").unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, BppmError> {
        let err = |line: usize, msg: &str| BppmError::Format {
            line,
            msg: msg.to_string(),
        };
        let mut lines = text
            .split('\n')
            .map(|l| l.strip_suffix('\r').unwrap_or(l))
            .enumerate()
            .map(|(i, l)| (i + 1, l))
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| err(1, "empty input"))?;
        let n = header
            .strip_prefix("BPPM ")
            .and_then(|s| s.trim().parse::<usize>().ok())
            .ok_or_else(|| err(1, "expected header \"BPPM <n>\""))?;
        let mut out = Bppm::zeros(n);
        let mut last = (0, 0);
        for (line_no, line) in lines {
            let mut parts = line.split_whitespace();
            let (Some(i), Some(j), Some(p), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
                return Err(err(line_no, "expected \"i j p\""));
            };
            let i: usize = i.parse().map_err(|_| err(line_no, "bad row index"))?;
            let j: usize = j.parse().map_err(|_| err(line_no, "bad column index"))?;
            let p: f64 = p.parse().map_err(|_| err(line_no, "bad probability"))?;
            if !(1 <= i && i < j && j <= n) {
                return Err(err(line_no, "index outside 1 <= i < j <= n"));
            }
            if (i, j) <= last {
                return Err(err(line_no, "entries not sorted by (i, j)"));
            }
            if !(0.0..=1.0).contains(&p) {
                return Err(err(line_no, "probability outside [0, 1]"));
            }
            last = (i, j);
            out.set(i, j, p);
        }
        Ok(out)
    }
}

/// Default pruning threshold for the outside pass.
pub fn default_prune_threshold(n: usize) -> f64 {
    if n <= 64 {
        0.0
    } else {
        1e-6
    }
}

/// Outside pass over enclosing pairs.
///
/// `P(i,j)` is the exterior term `Q(1,i-1) Qb(i,j) Q(j+1,n) / Q(1,n)` plus, for
/// every pair `(k,l)` directly enclosing `(i,j)`,
/// `P(k,l) Q(k+1,i-1) Qb(i,j) Q(j+1,l-1) / Q(k+1,l-1)`. Pairs are visited by
/// strictly decreasing span so every enclosing probability is final when read.
/// Enclosing pairs with `P(k,l) < prune_threshold` are skipped.
pub fn outside_pair_probs(
    seq: &RnaSequence,
    model: &EnergyModel,
    q: &InsideTable,
    prune_threshold: f64,
) -> Bppm {
    outside_bytes(seq.as_bytes(), model, q, prune_threshold)
}

fn outside_bytes(seq: &[u8], model: &EnergyModel, q: &InsideTable, prune_threshold: f64) -> Bppm {
    let n = seq.len();
    assert_eq!(q.n(), n, "inside table built for a different sequence");
    let ctx = Ctx { seq, model };
    let mut out = Bppm::zeros(n);
    let log_z = q.log_total();
    // (k, l, ln P(k,l)) for finished pairs that survive pruning.
    let mut enclosing: Vec<(usize, usize, f64)> = Vec::new();
    let mut terms = Vec::new();
    for span in (model.min_hairpin + 1..n).rev() {
        for i in 1..=(n - span) {
            let j = i + span;
            let log_qb = ctx.log_qb(q, i, j);
            if log_qb == f64::NEG_INFINITY {
                continue;
            }
            terms.clear();
            terms.push(q.log_q(1, i - 1) + log_qb + q.log_q(j + 1, n) - log_z);
            for &(k, l, log_p) in &enclosing {
                if k < i && l > j {
                    terms.push(
                        log_p + q.log_q(k + 1, i - 1) + log_qb + q.log_q(j + 1, l - 1)
                            - q.log_q(k + 1, l - 1),
                    );
                }
            }
            let log_p = log_sum_exp(&terms);
            let p = log_p.exp().clamp(0.0, 1.0);
            out.set(i, j, p);
            if p >= prune_threshold {
                enclosing.push((i, j, log_p));
            }
        }
    }
    out
}

/// Inside followed by outside.
pub fn compute_bppm(seq: &RnaSequence, model: &EnergyModel, prune_threshold: f64) -> Bppm {
    let q = inside(seq, model);
    outside_pair_probs(seq, model, &q, prune_threshold)
}

/// One secondary structure and its Boltzmann weight.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedStructure {
    /// 1-based `(i, j)` pairs with `i < j`, sorted.
    pub pairs: Vec<(usize, usize)>,
    pub weight: f64,
}

/// Every pseudoknot-free structure of `seq`, by depth-first search over the
/// list of candidate pairs. Only usable for short sequences.
pub fn enumerate_structures(
    seq: &RnaSequence,
    model: &EnergyModel,
) -> Result<Vec<WeightedStructure>, BppmError> {
    let s = seq.as_bytes();
    let n = s.len();
    if n > MAX_ENUMERATION_LEN {
        return Err(BppmError::TooLong {
            n,
            max: MAX_ENUMERATION_LEN,
        });
    }
    let mut candidates = Vec::new();
    for i in 1..=n {
        for j in (i + model.min_hairpin + 1)..=n {
            if let Some(e) = model.pair_energy(s[i - 1], s[j - 1]) {
                candidates.push((i, j, (-e / model.rt).exp()));
            }
        }
    }

    fn compatible(chosen: &[(usize, usize)], (i, j): (usize, usize)) -> bool {
        chosen.iter().all(|&(k, l)| {
            let shares_end = k == i || k == j || l == i || l == j;
            let crosses = (k < i && i < l && l < j) || (i < k && k < j && j < l);
            !shares_end && !crosses
        })
    }

    fn dfs(
        candidates: &[(usize, usize, f64)],
        next: usize,
        chosen: &mut Vec<(usize, usize)>,
        weight: f64,
        out: &mut Vec<WeightedStructure>,
    ) {
        if next == candidates.len() {
            let mut pairs = chosen.clone();
            pairs.sort_unstable();
            out.push(WeightedStructure { pairs, weight });
            return;
        }
        dfs(candidates, next + 1, chosen, weight, out);
        let (i, j, w) = candidates[next];
        if compatible(chosen, (i, j)) {
            chosen.push((i, j));
            dfs(candidates, next + 1, chosen, weight * w, out);
            chosen.pop();
        }
    }

    let mut out = Vec::new();
    dfs(&candidates, 0, &mut Vec::new(), 1.0, &mut out);
    Ok(out)
}

/// Pair probabilities by direct summation over [`enumerate_structures`].
pub fn oracle_bppm(seq: &RnaSequence, model: &EnergyModel) -> Result<Bppm, BppmError> {
    let structures = enumerate_structures(seq, model)?;
    let n = seq.len();
    let z: f64 = structures.iter().map(|s| s.weight).sum();
    let mut mass = vec![0.0; n * n];
    for s in &structures {
        for &(i, j) in &s.pairs {
            mass[(i - 1) * n + (j - 1)] += s.weight;
        }
    }
    let mut out = Bppm::zeros(n);
    for i in 1..=n {
        for j in (i + 1)..=n {
            out.set(i, j, mass[(i - 1) * n + (j - 1)] / z);
        }
    }
    Ok(out)
}
