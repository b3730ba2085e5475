//! Concrete Cantor systems: odometers, primitive substitution subshifts,
//! products (Z² actions) and partial Z-actions with finitely many undefined
//! points.
//!
//! Each system owns a [`PartitionTree`] describing its unit space. Odometer
//! cells are digit prefixes, least significant digit first. Subshift cells are
//! centered windows: a cell of depth `d` fixes the coordinates `-(d-1)..=d-1`,
//! so depth 1 fixes `x_0` and each further level fixes the pair
//! `(x_{-k}, x_k)`.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::ops::{Add, Neg, Sub};
use std::sync::{Arc, Mutex};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::cantor::{CantorError, Cell, ClopenSet, PartitionTree};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SystemError {
    #[error(transparent)]
    Cantor(#[from] CantorError),
    #[error("invalid system description: {0}")]
    Spec(String),
    #[error("substitution is not primitive")]
    NotPrimitive,
    #[error("substitution has no two-sided periodic seed")]
    NoSeed,
    #[error("group element {g} has rank {got}, system has rank {want}")]
    Rank { g: GroupElement, got: usize, want: usize },
    #[error("{g} is undefined at {point}")]
    Undefined { g: GroupElement, point: String },
    #[error("point code {0} does not fit this system")]
    BadPoint(String),
    #[error("window {0} does not occur within the searched prefix of the seed")]
    NoOccurrence(String),
    #[error("{g} fixes a point of cell {cell}")]
    Periodic { g: GroupElement, cell: String },
}

/// An element of Z or Z².
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupElement {
    rank: u8,
    coords: [i64; 2],
}

impl GroupElement {
    pub fn z(n: i64) -> Self {
        Self { rank: 1, coords: [n, 0] }
    }

    pub fn z2(a: i64, b: i64) -> Self {
        Self { rank: 2, coords: [a, b] }
    }

    pub fn zero(rank: usize) -> Self {
        Self { rank: rank as u8, coords: [0, 0] }
    }

    pub fn from_coords(coords: &[i64]) -> Option<Self> {
        match coords {
            [a] => Some(Self::z(*a)),
            [a, b] => Some(Self::z2(*a, *b)),
            _ => None,
        }
    }

    pub fn rank(&self) -> usize {
        self.rank as usize
    }

    pub fn coords(&self) -> &[i64] {
        &self.coords[..self.rank as usize]
    }

    pub fn coord(&self, k: usize) -> i64 {
        self.coords[k]
    }

    pub fn is_zero(&self) -> bool {
        self.coords == [0, 0]
    }

    /// Word length in the generators `±e_k`.
    pub fn length(&self) -> u64 {
        self.coords().iter().map(|c| c.unsigned_abs()).sum()
    }

    pub fn generators(rank: usize) -> Vec<GroupElement> {
        match rank {
            1 => vec![Self::z(1), Self::z(-1)],
            _ => vec![Self::z2(1, 0), Self::z2(-1, 0), Self::z2(0, 1), Self::z2(0, -1)],
        }
    }

    /// All elements of length at most `radius`, sorted.
    pub fn ball(rank: usize, radius: u64) -> Vec<GroupElement> {
        let r = radius as i64;
        let mut out = Vec::new();
        if rank == 1 {
            out.extend((-r..=r).map(Self::z));
        } else {
            for a in -r..=r {
                let rest = r - a.abs();
                for b in -rest..=rest {
                    out.push(Self::z2(a, b));
                }
            }
        }
        out.sort();
        out
    }
}

impl Add for GroupElement {
    type Output = GroupElement;
    fn add(self, o: Self) -> Self {
        Self { rank: self.rank.max(o.rank), coords: [self.coords[0] + o.coords[0], self.coords[1] + o.coords[1]] }
    }
}

impl Sub for GroupElement {
    type Output = GroupElement;
    fn sub(self, o: Self) -> Self {
        self + (-o)
    }
}

impl Neg for GroupElement {
    type Output = GroupElement;
    fn neg(self) -> Self {
        Self { rank: self.rank, coords: [-self.coords[0], -self.coords[1]] }
    }
}

impl fmt::Display for GroupElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.rank == 1 {
            write!(f, "{:+}", self.coords[0])
        } else {
            write!(f, "({},{})", self.coords[0], self.coords[1])
        }
    }
}

impl fmt::Debug for GroupElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl Serialize for GroupElement {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.coords().serialize(s)
    }
}

impl<'de> Deserialize<'de> for GroupElement {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Vec::<i64>::deserialize(d)?;
        GroupElement::from_coords(&v).ok_or_else(|| serde::de::Error::custom("group element needs 1 or 2 coordinates"))
    }
}

/// JSON description of a system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SystemSpec {
    Odometer {
        base: u8,
    },
    Substitution {
        rules: BTreeMap<char, String>,
    },
    Product {
        factors: Vec<SystemSpec>,
    },
    Partial {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        base: Option<u8>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rules: Option<BTreeMap<char, String>>,
        removed: Vec<PointCode>,
    },
}

impl SystemSpec {
    pub fn odometer(base: u8) -> Self {
        SystemSpec::Odometer { base }
    }

    pub fn fibonacci() -> Self {
        let mut rules = BTreeMap::new();
        rules.insert('a', "ab".to_string());
        rules.insert('b', "a".to_string());
        SystemSpec::Substitution { rules }
    }

    pub fn build(&self) -> Result<System, SystemError> {
        System::new(self.clone())
    }
}

/// An exactly computable point of a system.
///
/// `Digits` is an eventually periodic odometer point, least significant digit
/// first. `Config` is the shift by `offset` of the two-sided substitution fixed
/// point whose letters at positions -1 and 0 are `seed`. `Pair` is a point of a
/// product.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PointCode {
    Digits { preperiod: Vec<u8>, period: Vec<u8> },
    Config { seed: [u8; 2], offset: i64 },
    Pair { x: Box<PointCode>, y: Box<PointCode> },
}

impl PointCode {
    pub fn digits(preperiod: Vec<u8>, period: Vec<u8>) -> Self {
        let (p, q) = normalize_digits(preperiod, period);
        PointCode::Digits { preperiod: p, period: q }
    }

    pub fn pair(x: PointCode, y: PointCode) -> Self {
        PointCode::Pair { x: Box::new(x), y: Box::new(y) }
    }
}

impl fmt::Display for PointCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PointCode::Digits { preperiod, period } => {
                let pre: String = preperiod.iter().map(|d| char::from_digit(*d as u32, 36).unwrap_or('?')).collect();
                let per: String = period.iter().map(|d| char::from_digit(*d as u32, 36).unwrap_or('?')).collect();
                write!(f, "{pre}({per})^∞")
            }
            PointCode::Config { seed, offset } => write!(f, "T^{offset}x[{}.{}]", seed[0], seed[1]),
            PointCode::Pair { x, y } => write!(f, "({x}, {y})"),
        }
    }
}

fn normalize_digits(mut pre: Vec<u8>, mut per: Vec<u8>) -> (Vec<u8>, Vec<u8>) {
    if per.is_empty() {
        per.push(0);
    }
    let n = per.len();
    for d in 1..=n {
        if n.is_multiple_of(d) && (0..n).all(|i| per[i] == per[i % d]) {
            per.truncate(d);
            break;
        }
    }
    while let Some(&last) = pre.last() {
        if last != *per.last().unwrap() {
            break;
        }
        pre.pop();
        per.rotate_right(1);
    }
    (pre, per)
}

fn add_digits(base: u8, pre: &[u8], per: &[u8], g: i64) -> (Vec<u8>, Vec<u8>) {
    let b = base as i128;
    let mut carry = g as i128;
    let mut out = Vec::with_capacity(pre.len() + per.len());
    for &d in pre {
        let t = d as i128 + carry;
        out.push(t.rem_euclid(b) as u8);
        carry = t.div_euclid(b);
    }
    loop {
        let start = carry;
        let mut block = Vec::with_capacity(per.len());
        for &d in per {
            let t = d as i128 + carry;
            block.push(t.rem_euclid(b) as u8);
            carry = t.div_euclid(b);
        }
        if carry == start {
            return normalize_digits(out, block);
        }
        out.extend(block);
    }
}

fn digit_at(pre: &[u8], per: &[u8], i: usize) -> u8 {
    if i < pre.len() {
        pre[i]
    } else {
        per[(i - pre.len()) % per.len()]
    }
}

/// Suffix automaton over generator words, answering factor membership for
/// words up to `max_len`.
struct FactorIndex {
    max_len: usize,
    next: Vec<[u32; 8]>,
    link: Vec<u32>,
    len: Vec<usize>,
}

const NONE: u32 = u32::MAX;

impl FactorIndex {
    fn build(words: &[Vec<u8>], arity: usize, max_len: usize) -> Self {
        let sep = arity as u8;
        let mut ix = Self { max_len, next: vec![[NONE; 8]], link: vec![NONE], len: vec![0] };
        let mut last = 0u32;
        for w in words {
            for &c in w.iter().chain(std::iter::once(&sep)) {
                last = ix.extend(last, c);
            }
        }
        ix
    }

    fn extend(&mut self, last: u32, c: u8) -> u32 {
        let c = c as usize;
        let cur = self.next.len() as u32;
        self.next.push([NONE; 8]);
        self.len.push(self.len[last as usize] + 1);
        self.link.push(0);
        let mut p = last;
        while p != NONE && self.next[p as usize][c] == NONE {
            self.next[p as usize][c] = cur;
            p = self.link[p as usize];
        }
        if p == NONE {
            self.link[cur as usize] = 0;
        } else {
            let q = self.next[p as usize][c];
            if self.len[p as usize] + 1 == self.len[q as usize] {
                self.link[cur as usize] = q;
            } else {
                let clone = self.next.len() as u32;
                self.next.push(self.next[q as usize]);
                self.len.push(self.len[p as usize] + 1);
                self.link.push(self.link[q as usize]);
                while p != NONE && self.next[p as usize][c] == q {
                    self.next[p as usize][c] = clone;
                    p = self.link[p as usize];
                }
                self.link[q as usize] = clone;
                self.link[cur as usize] = clone;
            }
        }
        cur
    }

    fn contains(&self, word: &[u8]) -> bool {
        let mut state = 0usize;
        for &c in word {
            let t = self.next[state][c as usize];
            if t == NONE {
                return false;
            }
            state = t as usize;
        }
        true
    }
}

/// A primitive substitution with cached language, seed letters and block
/// frequencies.
pub struct Substitution {
    letters: Vec<char>,
    images: Vec<Vec<u8>>,
    seeds: Vec<[u8; 2]>,
    seed_power: usize,
    lengths: Vec<Vec<u64>>,
    generators: Mutex<Vec<Vec<u8>>>,
    generator_level: Mutex<usize>,
    factors: Mutex<Option<Arc<FactorIndex>>>,
    language: Mutex<HashMap<usize, Arc<HashSet<Vec<u8>>>>>,
    frequencies: Mutex<HashMap<usize, Arc<HashMap<Vec<u8>, f64>>>>,
    occurrences: Mutex<HashMap<(usize, i64), Arc<HashMap<Vec<u8>, i64>>>>,
}

impl fmt::Debug for Substitution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Substitution").field("letters", &self.letters).field("images", &self.images).finish()
    }
}

const LENGTH_CEILING: u64 = 1 << 50;

impl Substitution {
    pub fn new(rules: &BTreeMap<char, String>) -> Result<Self, SystemError> {
        let letters: Vec<char> = rules.keys().copied().collect();
        let n = letters.len();
        if !(2..=7).contains(&n) {
            return Err(SystemError::Spec(format!("substitution needs 2..=7 letters, got {n}")));
        }
        let mut images = Vec::with_capacity(n);
        for img in rules.values() {
            if img.is_empty() {
                return Err(SystemError::Spec("empty substitution image".into()));
            }
            let word = img
                .chars()
                .map(|c| letters.iter().position(|&l| l == c).map(|p| p as u8))
                .collect::<Option<Vec<u8>>>()
                .ok_or_else(|| SystemError::Spec(format!("image {img:?} uses an unknown letter")))?;
            images.push(word);
        }
        if !is_primitive(&images) {
            return Err(SystemError::NotPrimitive);
        }
        let mut lengths = vec![vec![1u64; n]];
        while lengths.last().unwrap().iter().any(|&l| l < LENGTH_CEILING) {
            let prev = lengths.last().unwrap();
            let next: Vec<u64> = images
                .iter()
                .map(|img| img.iter().fold(0u64, |acc, &c| acc.saturating_add(prev[c as usize]).min(LENGTH_CEILING)))
                .collect();
            lengths.push(next);
            if lengths.len() > 200 {
                break;
            }
        }
        let mut sub = Self {
            letters,
            images,
            seeds: Vec::new(),
            seed_power: 1,
            lengths,
            generators: Mutex::new(Vec::new()),
            generator_level: Mutex::new(0),
            factors: Mutex::new(None),
            language: Mutex::new(HashMap::new()),
            frequencies: Mutex::new(HashMap::new()),
            occurrences: Mutex::new(HashMap::new()),
        };
        let pairs = sub.pair_language();
        for p in 1..=(2 * n).max(2) {
            let seeds: Vec<[u8; 2]> = pairs
                .iter()
                .filter(|[l, r]| {
                    let right = sub.power_image(&[*r], p);
                    let left = sub.power_image(&[*l], p);
                    right[0] == *r && *left.last().unwrap() == *l
                })
                .copied()
                .collect();
            if !seeds.is_empty() {
                sub.seeds = seeds;
                sub.seed_power = p;
                break;
            }
        }
        if sub.seeds.is_empty() {
            return Err(SystemError::NoSeed);
        }
        *sub.generators.lock().unwrap() = pairs.iter().map(|p| p.to_vec()).collect();
        Ok(sub)
    }

    pub fn alphabet_size(&self) -> usize {
        self.letters.len()
    }

    pub fn letters(&self) -> &[char] {
        &self.letters
    }

    pub fn images(&self) -> &[Vec<u8>] {
        &self.images
    }

    /// Seeds of the two-sided periodic points, first one is the canonical unit.
    pub fn seeds(&self) -> &[[u8; 2]] {
        &self.seeds
    }

    pub fn seed_power(&self) -> usize {
        self.seed_power
    }

    fn apply(&self, word: &[u8]) -> Vec<u8> {
        word.iter().flat_map(|&c| self.images[c as usize].iter().copied()).collect()
    }

    fn power_image(&self, word: &[u8], k: usize) -> Vec<u8> {
        let mut w = word.to_vec();
        for _ in 0..k {
            w = self.apply(&w);
        }
        w
    }

    /// Two-letter words of the language.
    pub fn pair_language(&self) -> BTreeSet<[u8; 2]> {
        let mut set = BTreeSet::new();
        for img in &self.images {
            for w in img.windows(2) {
                set.insert([w[0], w[1]]);
            }
        }
        loop {
            let mut added = false;
            for p in set.clone() {
                for w in self.apply(&p).windows(2) {
                    added |= set.insert([w[0], w[1]]);
                }
            }
            if !added {
                break;
            }
        }
        set
    }

    fn min_length(&self, level: usize) -> u64 {
        self.lengths.get(level).map_or(u64::MAX, |v| *v.iter().min().unwrap())
    }

    /// Generator words `σ^k(ab)` at the first level whose images have length at least `m`.
    fn generators_for(&self, m: usize) -> Vec<Vec<u8>> {
        let mut gens = self.generators.lock().unwrap();
        let mut level = self.generator_level.lock().unwrap();
        while self.min_length(*level) < m as u64 {
            *gens = gens.iter().map(|w| self.apply(w)).collect();
            *level += 1;
        }
        gens.clone()
    }

    /// Factors of length `m` of the language.
    pub fn language(&self, m: usize) -> Arc<HashSet<Vec<u8>>> {
        if let Some(l) = self.language.lock().unwrap().get(&m) {
            return l.clone();
        }
        let set: HashSet<Vec<u8>> = if m == 0 {
            std::iter::once(Vec::new()).collect()
        } else if m == 1 {
            (0..self.letters.len() as u8).map(|c| vec![c]).collect()
        } else {
            let mut set = HashSet::new();
            for w in self.generators_for(m) {
                for f in w.windows(m) {
                    set.insert(f.to_vec());
                }
            }
            set
        };
        let set = Arc::new(set);
        self.language.lock().unwrap().insert(m, set.clone());
        set
    }

    fn factor_index(&self, m: usize) -> Arc<FactorIndex> {
        let mut slot = self.factors.lock().unwrap();
        if let Some(ix) = slot.as_ref() {
            if ix.max_len >= m {
                return ix.clone();
            }
        }
        let want = m.max(64).next_power_of_two();
        let gens = self.generators_for(want);
        let ix = Arc::new(FactorIndex::build(&gens, self.letters.len(), want));
        *slot = Some(ix.clone());
        ix
    }

    pub fn is_factor(&self, word: &[u8]) -> bool {
        if word.len() <= 1 {
            return word.iter().all(|&c| (c as usize) < self.letters.len());
        }
        self.factor_index(word.len()).contains(word)
    }

    /// All factors extending `word` by `extra` letters on the right (or left).
    pub fn extensions(&self, word: &[u8], extra: usize, to_right: bool) -> Vec<Vec<u8>> {
        let k = self.letters.len() as u8;
        let mut frontier = vec![word.to_vec()];
        for _ in 0..extra {
            let mut next = Vec::new();
            for w in &frontier {
                for c in 0..k {
                    let mut v = Vec::with_capacity(w.len() + 1);
                    if to_right {
                        v.extend_from_slice(w);
                        v.push(c);
                    } else {
                        v.push(c);
                        v.extend_from_slice(w);
                    }
                    if self.is_factor(&v) {
                        next.push(v);
                    }
                }
            }
            frontier = next;
        }
        frontier
    }

    /// Letter `n` of σ^j(c).
    fn nth_letter(&self, mut c: u8, mut j: usize, mut n: u64) -> u8 {
        while j > 0 {
            let mut found = false;
            for &d in &self.images[c as usize] {
                let len = self.lengths[j - 1][d as usize];
                if n < len {
                    c = d;
                    j -= 1;
                    found = true;
                    break;
                }
                n -= len;
            }
            if !found {
                unreachable!("letter index beyond image length");
            }
        }
        c
    }

    /// Letter at position `n` of the two-sided fixed point with `seed`.
    pub fn letter(&self, seed: [u8; 2], n: i64) -> u8 {
        let p = self.seed_power;
        if n >= 0 {
            let n = n as u64;
            let mut j = p;
            while self.lengths[j.min(self.lengths.len() - 1)][seed[1] as usize] <= n {
                j += p;
            }
            self.nth_letter(seed[1], j, n)
        } else {
            let m = n.unsigned_abs();
            let mut j = p;
            while self.lengths[j.min(self.lengths.len() - 1)][seed[0] as usize] < m {
                j += p;
            }
            let len = self.lengths[j][seed[0] as usize];
            self.nth_letter(seed[0], j, len - m)
        }
    }

    pub fn window(&self, seed: [u8; 2], center: i64, radius: usize) -> Vec<u8> {
        let r = radius as i64;
        (center - r..=center + r).map(|n| self.letter(seed, n)).collect()
    }

    fn letter_frequencies(&self) -> Vec<f64> {
        let n = self.letters.len();
        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for (j, img) in self.images.iter().enumerate() {
            let mut counts = vec![0.0; n];
            for &c in img {
                counts[c as usize] += 1.0;
            }
            cols[j] = counts.into_iter().enumerate().filter(|(_, v)| *v > 0.0).collect();
        }
        perron(&cols, n)
    }

    /// Frequencies of all factors of length `m`.
    pub fn block_frequencies(&self, m: usize) -> Arc<HashMap<Vec<u8>, f64>> {
        if let Some(f) = self.frequencies.lock().unwrap().get(&m) {
            return f.clone();
        }
        let table: HashMap<Vec<u8>, f64> = if m == 0 {
            std::iter::once((Vec::new(), 1.0)).collect()
        } else if m == 1 {
            self.letter_frequencies().into_iter().enumerate().map(|(c, f)| (vec![c as u8], f)).collect()
        } else {
            let lang = self.language(m);
            let mut blocks: Vec<Vec<u8>> = lang.iter().cloned().collect();
            blocks.sort();
            let index: HashMap<&[u8], usize> = blocks.iter().enumerate().map(|(i, b)| (&b[..], i)).collect();
            let mut cols: Vec<Vec<(usize, f64)>> = Vec::with_capacity(blocks.len());
            for v in &blocks {
                let image = self.apply(v);
                let first = self.images[v[0] as usize].len();
                let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
                for q in 0..first {
                    let idx = index[&image[q..q + m]];
                    *counts.entry(idx).or_insert(0.0) += 1.0;
                }
                cols.push(counts.into_iter().collect());
            }
            let vec = perron(&cols, blocks.len());
            blocks.into_iter().zip(vec).collect()
        };
        let table = Arc::new(table);
        self.frequencies.lock().unwrap().insert(m, table.clone());
        table
    }

    /// First centers `>= start` at which each factor of length `2·radius+1`
    /// occurs in the canonical seed configuration.
    fn occurrence_index(&self, radius: usize, start: i64) -> Result<Arc<HashMap<Vec<u8>, i64>>, SystemError> {
        if let Some(ix) = self.occurrences.lock().unwrap().get(&(radius, start)) {
            return Ok(ix.clone());
        }
        let m = 2 * radius + 1;
        let want = self.language(m).len();
        let seed = self.seeds[0];
        let mut len: i64 = 4096.max(8 * m as i64);
        loop {
            let buf: Vec<u8> = (start..start + len).map(|n| self.letter(seed, n)).collect();
            let mut ix = HashMap::new();
            for (q, w) in buf.windows(m).enumerate() {
                ix.entry(w.to_vec()).or_insert(start + q as i64 + radius as i64);
            }
            if ix.len() >= want {
                let ix = Arc::new(ix);
                self.occurrences.lock().unwrap().insert((radius, start), ix.clone());
                return Ok(ix);
            }
            if len > 1 << 22 {
                return Err(SystemError::NoOccurrence(format!("length {m}")));
            }
            len *= 4;
        }
    }
}

fn is_primitive(images: &[Vec<u8>]) -> bool {
    let n = images.len();
    let mut m = vec![vec![false; n]; n];
    for (j, img) in images.iter().enumerate() {
        for &c in img {
            m[c as usize][j] = true;
        }
    }
    let mut p = m.clone();
    for _ in 0..(n - 1) * (n - 1) + 1 {
        if p.iter().all(|row| row.iter().all(|&x| x)) {
            return true;
        }
        let mut q = vec![vec![false; n]; n];
        for i in 0..n {
            for j in 0..n {
                q[i][j] = (0..n).any(|k| p[i][k] && m[k][j]);
            }
        }
        p = q;
    }
    p.iter().all(|row| row.iter().all(|&x| x))
}

/// Normalized Perron vector of the nonnegative matrix given by columns.
fn perron(cols: &[Vec<(usize, f64)>], n: usize) -> Vec<f64> {
    let mut x = vec![1.0 / n as f64; n];
    for _ in 0..20_000 {
        let mut y = vec![0.0; n];
        for (j, col) in cols.iter().enumerate() {
            for &(i, v) in col {
                y[i] += v * x[j];
            }
        }
        let s: f64 = y.iter().sum();
        for v in &mut y {
            *v /= s;
        }
        let diff: f64 = y.iter().zip(&x).map(|(a, b)| (a - b).abs()).sum();
        x = y;
        if diff < 1e-15 {
            break;
        }
    }
    x
}

#[derive(Debug, Clone)]
enum Kind {
    Odometer { base: u8 },
    Substitution(Arc<Substitution>),
    Product(System, System),
    Partial { inner: System, removed: Vec<PointCode> },
}

#[derive(Debug)]
struct Inner {
    spec: SystemSpec,
    tree: PartitionTree,
    kind: Kind,
}

/// A Cantor system with its partition tree, exact point arithmetic and
/// invariant measure.
#[derive(Clone, Debug)]
pub struct System {
    inner: Arc<Inner>,
}

/// Image of a cell under a group element.
#[derive(Debug, Clone, PartialEq)]
pub struct CellImage {
    pub image: ClopenSet,
    pub depth: usize,
    /// Set when the element is undefined at some point of the cell.
    pub partial: bool,
}

/// A point at which a "for every unit" claim is checked.
#[derive(Debug, Clone, PartialEq)]
pub struct TestPoint {
    pub point: PointCode,
    /// The cell this point stands for, or `None` for an exceptional point of
    /// a partial system.
    pub cell: Option<Cell>,
}

impl System {
    pub fn new(spec: SystemSpec) -> Result<Self, SystemError> {
        let (tree, kind) = match &spec {
            SystemSpec::Odometer { base } => {
                if *base < 2 || *base as usize > crate::cantor::SYMBOL_CHARS.len() {
                    return Err(SystemError::Spec(format!("odometer base {base} out of range")));
                }
                let tree = PartitionTree::full(*base as usize)?.relabel(&format!("odometer-{base}"));
                (tree, Kind::Odometer { base: *base })
            }
            SystemSpec::Substitution { rules } => {
                let sub = Arc::new(Substitution::new(rules)?);
                let label: Vec<String> = rules.iter().map(|(k, v)| format!("{k}->{v}")).collect();
                let label = format!("substitution[{}]", label.join(","));
                let n = sub.alphabet_size();
                let arity = n * n;
                let probe = sub.clone();
                let tree = PartitionTree::with_language(&label, arity, move |w: &[u8]| {
                    if w.is_empty() {
                        return true;
                    }
                    if w[0] as usize >= n {
                        return false;
                    }
                    probe.is_factor(&tree_word_to_window(w, n))
                })?;
                (tree, Kind::Substitution(sub))
            }
            SystemSpec::Product { factors } => {
                if factors.len() != 2 {
                    return Err(SystemError::Spec("a product needs exactly two factors".into()));
                }
                let a = factors[0].build()?;
                let b = factors[1].build()?;
                if a.rank() != 1 || b.rank() != 1 || a.is_partial() || b.is_partial() {
                    return Err(SystemError::Spec("product factors must be total Z-systems".into()));
                }
                let a2 = b.tree().arity();
                let arity = a.tree().arity() * a2;
                if arity > crate::cantor::SYMBOL_CHARS.len() {
                    return Err(SystemError::Spec("product alphabet too large".into()));
                }
                let (ta, tb) = (a.tree().clone(), b.tree().clone());
                let label = format!("product({},{})", ta.label(), tb.label());
                let tree = PartitionTree::with_language(&label, arity, move |w: &[u8]| {
                    let (x, y) = split_pair_word(w, a2);
                    ta.is_admissible(&x) && tb.is_admissible(&y)
                })?;
                (tree, Kind::Product(a, b))
            }
            SystemSpec::Partial { base, rules, removed } => {
                let inner = match (base, rules) {
                    (Some(b), None) => SystemSpec::Odometer { base: *b }.build()?,
                    (None, Some(r)) => SystemSpec::Substitution { rules: r.clone() }.build()?,
                    _ => return Err(SystemError::Spec("partial system needs exactly one of base or rules".into())),
                };
                let mut norm = Vec::new();
                for p in removed {
                    let p = inner.normalize_point(p)?;
                    if !norm.contains(&p) {
                        norm.push(p);
                    }
                }
                (inner.tree().clone(), Kind::Partial { inner, removed: norm })
            }
        };
        Ok(Self { inner: Arc::new(Inner { spec, tree, kind }) })
    }

    pub fn spec(&self) -> &SystemSpec {
        &self.inner.spec
    }

    pub fn tree(&self) -> &PartitionTree {
        &self.inner.tree
    }

    pub fn name(&self) -> &str {
        self.inner.tree.label()
    }

    pub fn rank(&self) -> usize {
        match &self.inner.kind {
            Kind::Product(..) => 2,
            _ => 1,
        }
    }

    pub fn is_partial(&self) -> bool {
        matches!(self.inner.kind, Kind::Partial { .. })
    }

    pub fn substitution(&self) -> Option<&Substitution> {
        match &self.inner.kind {
            Kind::Substitution(s) => Some(s),
            Kind::Partial { inner, .. } => inner.substitution(),
            _ => None,
        }
    }

    pub fn odometer_base(&self) -> Option<u8> {
        match &self.inner.kind {
            Kind::Odometer { base } => Some(*base),
            Kind::Partial { inner, .. } => inner.odometer_base(),
            _ => None,
        }
    }

    /// Points at which the generator `+1` is undefined.
    pub fn removed_points(&self) -> &[PointCode] {
        match &self.inner.kind {
            Kind::Partial { removed, .. } => removed,
            _ => &[],
        }
    }

    /// The completed (total) system underlying a partial one.
    pub fn completion(&self) -> &System {
        match &self.inner.kind {
            Kind::Partial { inner, .. } => inner,
            _ => self,
        }
    }

    fn check_rank(&self, g: GroupElement) -> Result<(), SystemError> {
        if g.rank() != self.rank() {
            return Err(SystemError::Rank { g, got: g.rank(), want: self.rank() });
        }
        Ok(())
    }

    pub fn normalize_point(&self, p: &PointCode) -> Result<PointCode, SystemError> {
        match (&self.inner.kind, p) {
            (Kind::Odometer { base }, PointCode::Digits { preperiod, period }) => {
                if preperiod.iter().chain(period).any(|d| d >= base) {
                    return Err(SystemError::BadPoint(p.to_string()));
                }
                Ok(PointCode::digits(preperiod.clone(), period.clone()))
            }
            (Kind::Substitution(s), PointCode::Config { seed, .. }) => {
                if !s.seeds.contains(seed) {
                    return Err(SystemError::BadPoint(p.to_string()));
                }
                Ok(p.clone())
            }
            (Kind::Product(a, b), PointCode::Pair { x, y }) => {
                Ok(PointCode::pair(a.normalize_point(x)?, b.normalize_point(y)?))
            }
            (Kind::Partial { inner, .. }, _) => inner.normalize_point(p),
            _ => Err(SystemError::BadPoint(p.to_string())),
        }
    }

    /// The canonical free unit: the all-zero odometer point, the canonical
    /// substitution fixed point, or their pair. Partial systems avoid their
    /// removed points.
    pub fn free_unit(&self) -> PointCode {
        match &self.inner.kind {
            Kind::Odometer { .. } => PointCode::digits(vec![], vec![0]),
            Kind::Substitution(s) => PointCode::Config { seed: s.seeds[0], offset: 0 },
            Kind::Product(a, b) => PointCode::pair(a.free_unit(), b.free_unit()),
            Kind::Partial { inner, removed } => {
                let u = inner.free_unit();
                if removed.contains(&u) {
                    self.generic_point(&Cell::root(), 0).unwrap_or(u)
                } else {
                    u
                }
            }
        }
    }

    /// Tree word of length `depth` describing the point.
    pub fn word(&self, p: &PointCode, depth: usize) -> Result<Vec<u8>, SystemError> {
        match (&self.inner.kind, p) {
            (Kind::Odometer { .. }, PointCode::Digits { preperiod, period }) => {
                Ok((0..depth).map(|i| digit_at(preperiod, period, i)).collect())
            }
            (Kind::Substitution(s), PointCode::Config { seed, offset }) => {
                if depth == 0 {
                    return Ok(Vec::new());
                }
                let w = s.window(*seed, *offset, depth - 1);
                Ok(window_to_tree_word(&w, s.alphabet_size()))
            }
            (Kind::Product(a, b), PointCode::Pair { x, y }) => {
                let wx = a.word(x, depth)?;
                let wy = b.word(y, depth)?;
                let a2 = b.tree().arity() as u8;
                Ok(wx.iter().zip(&wy).map(|(s, t)| s * a2 + t).collect())
            }
            (Kind::Partial { inner, .. }, _) => inner.word(p, depth),
            _ => Err(SystemError::BadPoint(p.to_string())),
        }
    }

    pub fn cell_of(&self, p: &PointCode, depth: usize) -> Result<Cell, SystemError> {
        Ok(Cell::from_word(self.word(p, depth)?))
    }

    /// Whether `g` is defined at `p`.
    pub fn is_defined(&self, g: GroupElement, p: &PointCode) -> Result<bool, SystemError> {
        self.check_rank(g)?;
        match &self.inner.kind {
            Kind::Partial { inner, removed } => {
                let n = g.coord(0);
                let steps: Vec<i64> = if n > 0 { (0..n).collect() } else { (n..0).collect() };
                for j in steps {
                    let y = inner.act(GroupElement::z(j), p)?;
                    if removed.contains(&y) {
                        return Ok(false);
                    }
                }
                Ok(true)
            }
            _ => Ok(true),
        }
    }

    /// Exact action on point codes; `None` when a partial action is undefined.
    pub fn try_act(&self, g: GroupElement, p: &PointCode) -> Result<Option<PointCode>, SystemError> {
        self.check_rank(g)?;
        match (&self.inner.kind, p) {
            (Kind::Odometer { base }, PointCode::Digits { preperiod, period }) => {
                let (a, b) = add_digits(*base, preperiod, period, g.coord(0));
                Ok(Some(PointCode::Digits { preperiod: a, period: b }))
            }
            (Kind::Substitution(_), PointCode::Config { seed, offset }) => {
                Ok(Some(PointCode::Config { seed: *seed, offset: offset + g.coord(0) }))
            }
            (Kind::Product(a, b), PointCode::Pair { x, y }) => {
                let x2 = a.act(GroupElement::z(g.coord(0)), x)?;
                let y2 = b.act(GroupElement::z(g.coord(1)), y)?;
                Ok(Some(PointCode::pair(x2, y2)))
            }
            (Kind::Partial { inner, .. }, _) => {
                if self.is_defined(g, p)? {
                    Ok(Some(inner.act(g, p)?))
                } else {
                    Ok(None)
                }
            }
            _ => Err(SystemError::BadPoint(p.to_string())),
        }
    }

    /// Exact action on point codes, erroring where undefined.
    pub fn act(&self, g: GroupElement, p: &PointCode) -> Result<PointCode, SystemError> {
        self.try_act(g, p)?.ok_or_else(|| SystemError::Undefined { g, point: p.to_string() })
    }

    /// Points where `g` is undefined (empty for total systems).
    pub fn undefined_points(&self, g: GroupElement) -> Result<Vec<PointCode>, SystemError> {
        match &self.inner.kind {
            Kind::Partial { inner, removed } => {
                let n = g.coord(0);
                let mut out = Vec::new();
                for r in removed {
                    let shifts: Vec<i64> = if n > 0 { (0..n).map(|j| -j).collect() } else { (1..=-n).collect() };
                    for j in shifts {
                        let x = inner.act(GroupElement::z(j), r)?;
                        if !out.contains(&x) {
                            out.push(x);
                        }
                    }
                }
                out.sort();
                Ok(out)
            }
            _ => Ok(Vec::new()),
        }
    }

    /// Image of a cell, together with the depth it is expressed at.
    pub fn act_on_cell(&self, g: GroupElement, cell: &Cell) -> Result<CellImage, SystemError> {
        self.check_rank(g)?;
        let tree = self.tree();
        if !tree.is_admissible(cell.word()) {
            return Err(CantorError::Inadmissible { word: cell.to_string() }.into());
        }
        match &self.inner.kind {
            Kind::Odometer { base } => {
                let d = cell.depth();
                if d == 0 {
                    return Ok(CellImage { image: tree.whole(), depth: 0, partial: false });
                }
                let b = *base as i128;
                let modulus = (b).checked_pow(d as u32);
                let word = match modulus {
                    Some(m) => {
                        let v: i128 = cell.word().iter().rev().fold(0i128, |acc, &s| acc * b + s as i128);
                        let mut w = (v + g.coord(0) as i128).rem_euclid(m);
                        (0..d)
                            .map(|_| {
                                let s = (w % b) as u8;
                                w /= b;
                                s
                            })
                            .collect()
                    }
                    None => {
                        let (pre, per) = add_digits(*base, cell.word(), &[0], g.coord(0));
                        (0..d).map(|i| digit_at(&pre, &per, i)).collect()
                    }
                };
                let image = tree.set(vec![Cell::from_word(word)])?;
                Ok(CellImage { image, depth: d, partial: false })
            }
            Kind::Substitution(s) => {
                let d = cell.depth();
                let n = g.coord(0);
                if d == 0 || n == 0 {
                    return Ok(CellImage { image: tree.set(vec![cell.clone()])?, depth: d, partial: false });
                }
                let k = s.alphabet_size();
                let window = tree_word_to_window(cell.word(), k);
                let new_depth = d + n.unsigned_abs() as usize;
                tree.check_depth(new_depth)?;
                let cells: Vec<Cell> = s
                    .extensions(&window, 2 * n.unsigned_abs() as usize, n > 0)
                    .into_iter()
                    .map(|v| Cell::from_word(window_to_tree_word(&v, k)))
                    .collect();
                Ok(CellImage { image: tree.set(cells)?, depth: new_depth, partial: false })
            }
            Kind::Product(a, b) => {
                let a2 = b.tree().arity();
                let (wx, wy) = split_pair_word(cell.word(), a2);
                let ix = a.act_on_cell(GroupElement::z(g.coord(0)), &Cell::from_word(wx))?;
                let iy = b.act_on_cell(GroupElement::z(g.coord(1)), &Cell::from_word(wy))?;
                let depth = ix.depth.max(iy.depth);
                tree.check_depth(depth)?;
                let cx = a.tree().refine(&ix.image, depth)?;
                let cy = b.tree().refine(&iy.image, depth)?;
                let mut cells = Vec::with_capacity(cx.len() * cy.len());
                for x in &cx {
                    for y in &cy {
                        let w = x.word().iter().zip(y.word()).map(|(s, t)| s * a2 as u8 + t).collect();
                        cells.push(Cell::from_word(w));
                    }
                }
                Ok(CellImage { image: tree.set(cells)?, depth, partial: false })
            }
            Kind::Partial { inner, .. } => {
                let mut img = inner.act_on_cell(g, cell)?;
                let bad = self.undefined_points(g)?;
                for x in bad {
                    if cell.is_prefix_of(&inner.word(&x, cell.depth())?) {
                        img.partial = true;
                    }
                }
                Ok(img)
            }
        }
    }

    /// The depth-`depth` cell of `g·x` for every `x` in `cell`, when the
    /// cell is deep enough to determine it. Definedness is not checked.
    pub fn translate_cell(&self, g: GroupElement, cell: &Cell, depth: usize) -> Result<Option<Cell>, SystemError> {
        self.check_rank(g)?;
        if depth == 0 {
            return Ok(Some(Cell::root()));
        }
        match &self.inner.kind {
            Kind::Odometer { base } => {
                if depth > cell.depth() {
                    return Ok(None);
                }
                let (pre, per) = add_digits(*base, &cell.word()[..depth], &[0], g.coord(0));
                Ok(Some(Cell::from_word((0..depth).map(|i| digit_at(&pre, &per, i)).collect())))
            }
            Kind::Substitution(s) => {
                let n = g.coord(0);
                let (r, m) = (cell.depth() as i64 - 1, depth as i64 - 1);
                if r < 0 || n.abs() + m > r {
                    return Ok(None);
                }
                let k = s.alphabet_size();
                let window = tree_word_to_window(cell.word(), k);
                let lo = (r + n - m) as usize;
                let hi = (r + n + m) as usize;
                Ok(Some(Cell::from_word(window_to_tree_word(&window[lo..=hi], k))))
            }
            Kind::Product(a, b) => {
                let a2 = b.tree().arity();
                let (wx, wy) = split_pair_word(cell.word(), a2);
                let cx = a.translate_cell(GroupElement::z(g.coord(0)), &Cell::from_word(wx), depth)?;
                let cy = b.translate_cell(GroupElement::z(g.coord(1)), &Cell::from_word(wy), depth)?;
                Ok(match (cx, cy) {
                    (Some(x), Some(y)) => {
                        Some(Cell::from_word(x.word().iter().zip(y.word()).map(|(s, t)| s * a2 as u8 + t).collect()))
                    }
                    _ => None,
                })
            }
            Kind::Partial { inner, .. } => inner.translate_cell(g, cell, depth),
        }
    }

    /// All cells of depth `depth` inside `cell`, in word order. Deep
    /// refinements of substitution cells are read off the factors of length
    /// `2·depth − 1` instead of growing the tree level by level.
    pub fn extensions(&self, cell: &Cell, depth: usize) -> Result<Vec<Cell>, SystemError> {
        let tree = self.tree();
        let s = match &self.inner.kind {
            Kind::Substitution(s) if depth >= cell.depth() + 8 => s,
            _ => return Ok(tree.extensions(cell, depth)?),
        };
        tree.check_depth(depth)?;
        let k = s.alphabet_size();
        let m = 2 * depth - 1;
        let mut words: BTreeSet<Vec<u8>> = BTreeSet::new();
        for g in s.generators_for(m) {
            for f in g.windows(m) {
                let w = window_to_tree_word(f, k);
                if cell.is_prefix_of(&w) {
                    words.insert(w);
                }
            }
        }
        Ok(words.into_iter().map(Cell::from_word).collect())
    }

    /// [`System::translate_cell`] for several elements, reading the cell's
    /// window once on substitution systems.
    pub fn translate_cell_many(
        &self,
        gs: &[GroupElement],
        cell: &Cell,
        depth: usize,
    ) -> Result<Vec<Option<Cell>>, SystemError> {
        let s = match &self.inner.kind {
            Kind::Substitution(s) => s,
            Kind::Partial { inner, .. } => return inner.translate_cell_many(gs, cell, depth),
            _ => return gs.iter().map(|g| self.translate_cell(*g, cell, depth)).collect(),
        };
        if depth == 0 {
            return Ok(vec![Some(Cell::root()); gs.len()]);
        }
        let k = s.alphabet_size();
        let (r, m) = (cell.depth() as i64 - 1, depth as i64 - 1);
        let window = tree_word_to_window(cell.word(), k);
        gs.iter()
            .map(|g| {
                self.check_rank(*g)?;
                let n = g.coord(0);
                if r < 0 || n.abs() + m > r {
                    return Ok(None);
                }
                let (lo, hi) = ((r + n - m) as usize, (r + n + m) as usize);
                Ok(Some(Cell::from_word(window_to_tree_word(&window[lo..=hi], k))))
            })
            .collect()
    }

    /// The same system with a different partition-tree depth cap.
    pub fn with_depth_cap(&self, cap: usize) -> System {
        let kind = match &self.inner.kind {
            Kind::Product(a, b) => Kind::Product(a.with_depth_cap(cap), b.with_depth_cap(cap)),
            Kind::Partial { inner, removed } => Kind::Partial { inner: inner.with_depth_cap(cap), removed: removed.clone() },
            k => k.clone(),
        };
        let tree = self.inner.tree.clone().with_depth_cap(cap);
        System { inner: Arc::new(Inner { spec: self.inner.spec.clone(), tree, kind }) }
    }

    /// Image of a clopen set under `g` (closure of the defined part).
    pub fn act_on_set(&self, g: GroupElement, set: &ClopenSet) -> Result<ClopenSet, SystemError> {
        let mut parts = Vec::with_capacity(set.len());
        for c in set.cells() {
            parts.push(self.act_on_cell(g, c)?.image);
        }
        Ok(self.tree().union_all(parts.iter())?)
    }

    /// Depth `D` such that the depth-`D` cell of a unit determines the
    /// depth-`set_depth` cell of its translate by any element of length at
    /// most `radius`.
    pub fn locality_depth(&self, set_depth: usize, radius: u64) -> usize {
        match &self.inner.kind {
            Kind::Odometer { .. } => set_depth,
            Kind::Substitution(_) => {
                if set_depth == 0 {
                    0
                } else {
                    set_depth + radius as usize
                }
            }
            Kind::Product(a, b) => a.locality_depth(set_depth, radius).max(b.locality_depth(set_depth, radius)),
            Kind::Partial { inner, .. } => inner.locality_depth(set_depth, radius),
        }
    }

    /// A point of `cell` whose orbit stays away from the removed points for
    /// at least `radius` steps.
    pub fn generic_point(&self, cell: &Cell, radius: u64) -> Result<PointCode, SystemError> {
        match &self.inner.kind {
            Kind::Odometer { .. } => Ok(PointCode::digits(cell.word().to_vec(), vec![0])),
            Kind::Substitution(s) => {
                if cell.depth() == 0 {
                    return Ok(PointCode::Config { seed: s.seeds[0], offset: 0 });
                }
                let window = tree_word_to_window(cell.word(), s.alphabet_size());
                let ix = s.occurrence_index(cell.depth() - 1, 0)?;
                let offset = *ix.get(&window).ok_or_else(|| SystemError::NoOccurrence(cell.to_string()))?;
                Ok(PointCode::Config { seed: s.seeds[0], offset })
            }
            Kind::Product(a, b) => {
                let (wx, wy) = split_pair_word(cell.word(), b.tree().arity());
                Ok(PointCode::pair(
                    a.generic_point(&Cell::from_word(wx), radius)?,
                    b.generic_point(&Cell::from_word(wy), radius)?,
                ))
            }
            Kind::Partial { inner, removed } => match inner.odometer_base() {
                Some(base) => {
                    let tail = generic_tail(base, removed);
                    Ok(PointCode::digits(cell.word().to_vec(), tail))
                }
                None => {
                    let s = inner.substitution().expect("partial systems wrap odometers or substitutions");
                    if cell.depth() == 0 {
                        let far = removed.iter().filter_map(config_offset).map(i64::abs).max().unwrap_or(0);
                        return Ok(PointCode::Config { seed: s.seeds[0], offset: far + radius as i64 + 1 });
                    }
                    let far = removed.iter().filter_map(config_offset).map(i64::abs).max().unwrap_or(0);
                    let start = far + radius as i64 + cell.depth() as i64 + 1;
                    let window = tree_word_to_window(cell.word(), s.alphabet_size());
                    let ix = s.occurrence_index(cell.depth() - 1, start)?;
                    let offset = *ix.get(&window).ok_or_else(|| SystemError::NoOccurrence(cell.to_string()))?;
                    Ok(PointCode::Config { seed: s.seeds[0], offset })
                }
            },
        }
    }

    /// Representatives for a "for every unit" check: one generic point per
    /// cell of depth `depth`, plus, for partial systems, every point within
    /// `radius` of a removed point.
    pub fn test_points(&self, depth: usize, radius: u64) -> Result<Vec<TestPoint>, SystemError> {
        let mut out = Vec::new();
        for cell in self.tree().cells_at_depth(depth)? {
            let point = self.generic_point(&cell, radius)?;
            out.push(TestPoint { point, cell: Some(cell) });
        }
        for point in self.exceptional_points(radius)? {
            out.push(TestPoint { point, cell: None });
        }
        Ok(out)
    }

    /// Points within `radius` steps of a removed point, via the completion.
    pub fn exceptional_points(&self, radius: u64) -> Result<Vec<PointCode>, SystemError> {
        let mut out = BTreeSet::new();
        if let Kind::Partial { inner, removed } = &self.inner.kind {
            let r = radius as i64 + 1;
            for x in removed {
                for j in -r..=r {
                    out.insert(inner.act(GroupElement::z(j), x)?);
                }
            }
        }
        Ok(out.into_iter().collect())
    }

    /// Invariant probability of a cell.
    pub fn cell_mass(&self, cell: &Cell) -> f64 {
        match &self.inner.kind {
            Kind::Odometer { base } => (*base as f64).powi(-(cell.depth() as i32)),
            Kind::Substitution(s) => {
                if cell.depth() == 0 {
                    return 1.0;
                }
                let w = tree_word_to_window(cell.word(), s.alphabet_size());
                s.block_frequencies(w.len()).get(&w).copied().unwrap_or(0.0)
            }
            Kind::Product(a, b) => {
                let (wx, wy) = split_pair_word(cell.word(), b.tree().arity());
                a.cell_mass(&Cell::from_word(wx)) * b.cell_mass(&Cell::from_word(wy))
            }
            Kind::Partial { inner, .. } => inner.cell_mass(cell),
        }
    }

    /// Exact invariant probability of a cell when it is rational and known.
    pub fn cell_mass_exact(&self, cell: &Cell) -> Option<BigRational> {
        match &self.inner.kind {
            Kind::Odometer { base } => {
                Some(BigRational::new(BigInt::one(), num_traits::pow(BigInt::from(*base), cell.depth())))
            }
            Kind::Substitution(_) => None,
            Kind::Product(a, b) => {
                let (wx, wy) = split_pair_word(cell.word(), b.tree().arity());
                Some(a.cell_mass_exact(&Cell::from_word(wx))? * b.cell_mass_exact(&Cell::from_word(wy))?)
            }
            Kind::Partial { inner, .. } => inner.cell_mass_exact(cell),
        }
    }

    pub fn measure(&self, set: &ClopenSet) -> f64 {
        set.cells().iter().map(|c| self.cell_mass(c)).fold(0.0, |a, b| a + b)
    }

    pub fn measure_exact(&self, set: &ClopenSet) -> Option<BigRational> {
        let mut total = BigRational::zero();
        for c in set.cells() {
            total += self.cell_mass_exact(c)?;
        }
        Some(total)
    }

    /// Checks that no element of length `1..=radius` fixes a point; returns
    /// the depth at which this is certified.
    pub fn freeness_depth(&self, radius: u64) -> Result<usize, SystemError> {
        match &self.inner.kind {
            Kind::Odometer { base } => {
                let mut d = 0usize;
                let mut m: u128 = 1;
                while m <= radius as u128 {
                    m *= *base as u128;
                    d += 1;
                }
                Ok(d.max(1))
            }
            Kind::Substitution(s) => {
                let mut depth = 1;
                for p in 1..=radius as usize {
                    let mut found = None;
                    let mut m = p + 1;
                    while m < 2 * self.tree().depth_cap() {
                        let periodic = s.language(m).iter().any(|w| (p..w.len()).all(|i| w[i] == w[i - p]));
                        if !periodic {
                            found = Some(m);
                            break;
                        }
                        m += 1;
                    }
                    match found {
                        Some(m) => depth = depth.max(m.div_ceil(2) + 1),
                        None => {
                            return Err(SystemError::Periodic { g: GroupElement::z(p as i64), cell: "language".into() })
                        }
                    }
                }
                Ok(depth)
            }
            Kind::Product(a, b) => Ok(a.freeness_depth(radius)?.min(b.freeness_depth(radius)?)),
            Kind::Partial { inner, .. } => inner.freeness_depth(radius),
        }
    }
}

fn config_offset(p: &PointCode) -> Option<i64> {
    match p {
        PointCode::Config { offset, .. } => Some(*offset),
        _ => None,
    }
}

/// A periodic digit tail whose eventual behavior differs from every removed
/// point, so small translates of points with this tail are never removed.
fn generic_tail(base: u8, removed: &[PointCode]) -> Vec<u8> {
    let classes: Vec<Vec<u8>> = removed
        .iter()
        .filter_map(|p| match p {
            PointCode::Digits { period, .. } => Some(period.clone()),
            _ => None,
        })
        .collect();
    let same_class = |a: &[u8], b: &[u8]| a.len() == b.len() && (0..a.len()).any(|r| (0..a.len()).all(|i| a[(i + r) % a.len()] == b[i]));
    for len in 2..8usize {
        for ones in 1..len {
            let mut t = vec![0u8; len];
            for v in t.iter_mut().skip(len - ones) {
                *v = (base - 1).min(1);
            }
            let (_, t) = normalize_digits(vec![], t);
            if t.len() > 1 && !classes.iter().any(|c| same_class(c, &t)) {
                return t;
            }
        }
    }
    vec![0, 1]
}

/// Centered window (positions `-(d-1)..=d-1`) to tree word of depth `d`.
pub fn window_to_tree_word(window: &[u8], alphabet: usize) -> Vec<u8> {
    let d = window.len().div_ceil(2);
    let c = d - 1;
    let mut w = Vec::with_capacity(d);
    w.push(window[c]);
    for k in 1..d {
        w.push(window[c - k] * alphabet as u8 + window[c + k]);
    }
    w
}

/// Tree word of depth `d` to its centered window of length `2d-1`.
pub fn tree_word_to_window(word: &[u8], alphabet: usize) -> Vec<u8> {
    let d = word.len();
    if d == 0 {
        return Vec::new();
    }
    let mut win = vec![0u8; 2 * d - 1];
    let c = d - 1;
    win[c] = word[0];
    for k in 1..d {
        win[c - k] = word[k] / alphabet as u8;
        win[c + k] = word[k] % alphabet as u8;
    }
    win
}

fn split_pair_word(word: &[u8], second_arity: usize) -> (Vec<u8>, Vec<u8>) {
    let a = second_arity as u8;
    (word.iter().map(|s| s / a).collect(), word.iter().map(|s| s % a).collect())
}

/// Invariant measure of a system, or an explicit empirical table.
#[derive(Debug, Clone)]
pub enum MeasureTable {
    Invariant(System),
    Empirical { tree: PartitionTree, depth: usize, masses: BTreeMap<Cell, f64> },
}

impl MeasureTable {
    pub fn mass(&self, cell: &Cell) -> f64 {
        match self {
            MeasureTable::Invariant(s) => s.cell_mass(cell),
            MeasureTable::Empirical { masses, depth, .. } => {
                if cell.depth() <= *depth {
                    masses.iter().filter(|(c, _)| cell.is_prefix_of(c.word())).map(|(_, m)| m).fold(0.0, |a, b| a + b)
                } else {
                    f64::NAN
                }
            }
        }
    }

    pub fn exact_mass(&self, cell: &Cell) -> Option<BigRational> {
        match self {
            MeasureTable::Invariant(s) => s.cell_mass_exact(cell),
            MeasureTable::Empirical { .. } => None,
        }
    }

    pub fn measure(&self, set: &ClopenSet) -> f64 {
        set.cells().iter().map(|c| self.mass(c)).fold(0.0, |a, b| a + b)
    }

    pub fn exact_measure(&self, set: &ClopenSet) -> Option<BigRational> {
        let mut t = BigRational::zero();
        for c in set.cells() {
            t += self.exact_mass(c)?;
        }
        Some(t)
    }

    /// Masses of all cells of depth `depth`.
    pub fn tabulate(&self, depth: usize) -> Result<BTreeMap<Cell, f64>, SystemError> {
        let tree = match self {
            MeasureTable::Invariant(s) => s.tree().clone(),
            MeasureTable::Empirical { tree, .. } => tree.clone(),
        };
        Ok(tree.cells_at_depth(depth)?.into_iter().map(|c| {
            let m = self.mass(&c);
            (c, m)
        }).collect())
    }
}

pub fn invariant_measure(system: &System) -> MeasureTable {
    MeasureTable::Invariant(system.clone())
}

pub fn rational_to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn odo() -> System {
        SystemSpec::odometer(2).build().unwrap()
    }

    fn fib() -> System {
        SystemSpec::fibonacci().build().unwrap()
    }

    fn w(s: &str) -> Cell {
        Cell::from_word(crate::cantor::parse_word(s).unwrap())
    }

    #[test]
    fn odometer_adds_with_carry() {
        let o = odo();
        let img = o.act_on_cell(GroupElement::z(1), &w("110")).unwrap();
        assert_eq!(img.image.words(), vec!["001"]);
        assert_eq!(o.act_on_cell(GroupElement::z(0), &w("101")).unwrap().image.words(), vec!["101"]);
        let zero = o.free_unit();
        assert_eq!(o.act(GroupElement::z(1), &zero).unwrap(), PointCode::digits(vec![1], vec![0]));
        let minus = o.act(GroupElement::z(-1), &zero).unwrap();
        assert_eq!(minus, PointCode::digits(vec![], vec![1]));
        assert_eq!(o.act(GroupElement::z(1), &minus).unwrap(), zero);
    }

    #[test]
    fn digit_codes_normalize() {
        assert_eq!(PointCode::digits(vec![0, 1], vec![0, 1, 0, 1]), PointCode::digits(vec![], vec![0, 1]));
        assert_eq!(PointCode::digits(vec![1, 0, 0], vec![0]), PointCode::digits(vec![1], vec![0]));
    }

    #[test]
    fn fibonacci_seeds_and_letters() {
        let f = fib();
        let s = f.substitution().unwrap();
        assert_eq!(s.seed_power(), 2);
        assert_eq!(s.seeds(), &[[0, 0], [1, 0]]);
        // right half is the fixed point abaababaabaab...
        let right: Vec<u8> = (0..13).map(|n| s.letter([0, 0], n)).collect();
        assert_eq!(right, vec![0, 1, 0, 0, 1, 0, 1, 0, 0, 1, 0, 0, 1]);
        // σ²(a) = aba ends with a, and σ²ᵏ(a) are nested suffixes
        let left: Vec<u8> = (1..6).map(|m| s.letter([0, 0], -m)).collect();
        let long = s.power_image(&[0], 10);
        let expect: Vec<u8> = (1..6).map(|m| long[long.len() - m]).collect();
        assert_eq!(left, expect);
    }

    #[test]
    fn fibonacci_language_and_frequencies() {
        let f = fib();
        let s = f.substitution().unwrap();
        let mut l2: Vec<Vec<u8>> = s.language(2).iter().cloned().collect();
        l2.sort();
        assert_eq!(l2, vec![vec![0, 0], vec![0, 1], vec![1, 0]]);
        for m in 1..30 {
            assert_eq!(s.language(m).len(), m + 1, "Sturmian complexity at {m}");
        }
        // membership agrees with brute enumeration over every binary word
        for m in 2..=10usize {
            let lang = s.language(m);
            for bits in 0u32..(1 << m) {
                let w: Vec<u8> = (0..m).map(|i| ((bits >> i) & 1) as u8).collect();
                assert_eq!(s.is_factor(&w), lang.contains(&w), "{w:?}");
            }
        }
        let long = s.window(s.seeds()[0], 977, 300);
        assert!(s.is_factor(&long));
        let mut bad = long.clone();
        bad[300] = 1 - bad[300];
        assert!(!s.is_factor(&bad));
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        let fa = s.block_frequencies(1)[&vec![0]];
        assert!((fa - 1.0 / phi).abs() < 1e-12);
        assert!((fa - 0.61803).abs() < 1e-5);
        for m in 2..12 {
            let total: f64 = s.block_frequencies(m).values().sum();
            assert!((total - 1.0).abs() < 1e-12);
            // additivity: each block's mass is the sum of its right extensions
            let next = s.block_frequencies(m + 1);
            for (block, mass) in s.block_frequencies(m).iter() {
                let ext: f64 = next.iter().filter(|(b, _)| b[..m] == block[..]).map(|(_, v)| v).sum();
                assert!((ext - mass).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fibonacci_shift_of_letter_cylinder() {
        let f = fib();
        let tree = f.tree();
        let cyl_a = tree.cell(&[0]).unwrap();
        let img = f.act_on_cell(GroupElement::z(1), &cyl_a).unwrap();
        assert_eq!(img.depth, 2);
        // oracle: admissible 3-windows x_{-1}x_0x_1 with x_{-1} = a
        let s = f.substitution().unwrap();
        let mut expect: Vec<Cell> = s
            .language(3)
            .iter()
            .filter(|v| v[0] == 0)
            .map(|v| Cell::from_word(window_to_tree_word(v, 2)))
            .collect();
        expect.sort();
        assert_eq!(img.image, tree.set(expect).unwrap());
        assert!((f.measure(&img.image) - f.cell_mass(&cyl_a)).abs() < 1e-12);
    }

    #[test]
    fn product_measures_and_actions() {
        let p = SystemSpec::Product { factors: vec![SystemSpec::odometer(2), SystemSpec::odometer(2)] }.build().unwrap();
        assert_eq!(p.rank(), 2);
        let cells = p.tree().cells_at_depth(2).unwrap();
        assert_eq!(cells.len(), 16);
        assert_eq!(p.cell_mass_exact(&cells[3]), Some(BigRational::new(1.into(), 16.into())));
        let g = GroupElement::z2(1, -1);
        for c in &cells {
            let img = p.act_on_cell(g, c).unwrap();
            let back = p.act_on_set(-g, &img.image).unwrap();
            assert_eq!(back, p.tree().set(vec![c.clone()]).unwrap());
        }
        let u = p.free_unit();
        let v = p.act(g, &u).unwrap();
        assert_eq!(p.word(&v, 2).unwrap(), vec![3, 1]);
    }

    #[test]
    fn partial_odometer_undefined_at_removed_point() {
        let spec = SystemSpec::Partial {
            base: Some(2),
            rules: None,
            removed: vec![PointCode::digits(vec![], vec![0])],
        };
        let p = spec.build().unwrap();
        let zero = PointCode::digits(vec![], vec![0]);
        assert_eq!(p.try_act(GroupElement::z(1), &zero).unwrap(), None);
        assert!(p.try_act(GroupElement::z(-1), &zero).unwrap().is_some());
        let one = PointCode::digits(vec![1], vec![0]);
        assert_eq!(p.try_act(GroupElement::z(-1), &one).unwrap(), None);
        assert_eq!(p.try_act(GroupElement::z(-2), &one).unwrap(), None);
        let img = p.act_on_cell(GroupElement::z(1), &w("00")).unwrap();
        assert!(img.partial);
        assert!(!p.act_on_cell(GroupElement::z(1), &w("01")).unwrap().partial);
        assert_eq!(p.undefined_points(GroupElement::z(2)).unwrap().len(), 2);
        let g = p.generic_point(&w("00"), 4).unwrap();
        for j in -4..=4 {
            assert!(p.try_act(GroupElement::z(j), &g).unwrap().is_some());
        }
    }

    #[test]
    fn freeness_certificates() {
        assert_eq!(odo().freeness_depth(5).unwrap(), 3);
        let d = fib().freeness_depth(3).unwrap();
        assert!(d >= 2);
        let periodic = BTreeMap::from([('a', "ab".to_string()), ('b', "ab".to_string())]);
        let s = SystemSpec::Substitution { rules: periodic }.build().unwrap();
        assert!(matches!(s.freeness_depth(2), Err(SystemError::Periodic { .. })));
    }

    #[test]
    fn non_primitive_substitution_is_rejected() {
        let rules = BTreeMap::from([('a', "aa".to_string()), ('b', "ab".to_string())]);
        assert_eq!(SystemSpec::Substitution { rules }.build().unwrap_err(), SystemError::NotPrimitive);
    }

    #[test]
    fn spec_json_round_trip() {
        let json = r#"{"kind":"substitution","rules":{"a":"ab","b":"a"}}"#;
        let spec: SystemSpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec, SystemSpec::fibonacci());
        let json = r#"{"kind":"partial","base":2,"removed":[{"preperiod":[],"period":[0]}]}"#;
        let spec: SystemSpec = serde_json::from_str(json).unwrap();
        assert!(spec.build().unwrap().is_partial());
        let json = r#"{"kind":"product","factors":[{"kind":"odometer","base":2},{"kind":"odometer","base":3}]}"#;
        let spec: SystemSpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec.build().unwrap().tree().arity(), 6);
    }

    #[test]
    fn generic_points_lie_in_their_cells() {
        let f = fib();
        for d in 0..8 {
            for c in f.tree().cells_at_depth(d).unwrap() {
                let p = f.generic_point(&c, 0).unwrap();
                assert_eq!(f.cell_of(&p, d).unwrap(), c);
            }
        }
    }

    #[test]
    fn balls_have_expected_sizes() {
        assert_eq!(GroupElement::ball(1, 2).len(), 5);
        assert_eq!(GroupElement::ball(2, 1).len(), 5);
        assert_eq!(GroupElement::ball(2, 2).len(), 13);
    }

    #[test]
    fn deep_extensions_match_the_tree() {
        let sys = fib().with_depth_cap(40);
        for word in [&[][..], &[0][..], &[1, 2][..]] {
            let cell = Cell::from_word(word.to_vec());
            for depth in [word.len() + 8, 20, 33] {
                assert_eq!(sys.extensions(&cell, depth).unwrap(), sys.tree().extensions(&cell, depth).unwrap());
            }
        }
    }

    proptest! {
        #[test]
        fn odometer_point_actions_compose(pre in prop::collection::vec(0u8..3, 0..6), per in prop::collection::vec(0u8..3, 1..4), g in -500i64..500, h in -500i64..500) {
            let o = SystemSpec::odometer(3).build().unwrap();
            let p = PointCode::digits(pre, per);
            let a = o.act(GroupElement::z(g), &o.act(GroupElement::z(h), &p).unwrap()).unwrap();
            let b = o.act(GroupElement::z(g + h), &p).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(o.act(GroupElement::z(-g), &o.act(GroupElement::z(g), &p).unwrap()).unwrap(), p);
        }

        #[test]
        fn cell_actions_compose(depth in 0usize..5, g in -3i64..4, h in -3i64..4, pick in 0usize..1000) {
            for sys in [odo(), fib()] {
                let cells = sys.tree().cells_at_depth(depth).unwrap();
                let c = &cells[pick % cells.len()];
                let once = sys.act_on_cell(GroupElement::z(g + h), c).unwrap().image;
                let first = sys.act_on_cell(GroupElement::z(h), c).unwrap().image;
                let twice = sys.act_on_set(GroupElement::z(g), &first).unwrap();
                prop_assert_eq!(once, twice);
            }
        }

        #[test]
        fn measures_are_generator_invariant(depth in 1usize..7, pick in 0usize..1000) {
            for sys in [odo(), fib()] {
                let cells = sys.tree().cells_at_depth(depth).unwrap();
                let c = &cells[pick % cells.len()];
                for g in [GroupElement::z(1), GroupElement::z(-1)] {
                    let img = sys.act_on_cell(g, c).unwrap().image;
                    prop_assert!((sys.measure(&img) - sys.cell_mass(c)).abs() <= 1e-9);
                }
            }
        }

        #[test]
        fn point_windows_track_cell_images(depth in 1usize..6, g in -4i64..5, pick in 0usize..1000) {
            let f = fib();
            let cells = f.tree().cells_at_depth(depth).unwrap();
            let c = &cells[pick % cells.len()];
            let p = f.generic_point(c, 0).unwrap();
            let q = f.act(GroupElement::z(g), &p).unwrap();
            let img = f.act_on_cell(GroupElement::z(g), c).unwrap();
            prop_assert!(img.image.contains_word(&f.word(&q, img.depth).unwrap()));
        }
    
        #[test]
        fn translated_cells_match_points(depth in 3usize..9, g in -3i64..4, pick in 0usize..1000) {
            for sys in [odo(), fib()] {
                let cells = sys.tree().cells_at_depth(depth).unwrap();
                let c = &cells[pick % cells.len()];
                let p = sys.generic_point(c, 0).unwrap();
                let q = sys.act(GroupElement::z(g), &p).unwrap();
                let target = sys.word(&q, 2).unwrap();
                match sys.translate_cell(GroupElement::z(g), c, 2).unwrap() {
                    Some(t) => prop_assert_eq!(t.word(), &target[..]),
                    None => prop_assert!(sys.substitution().is_some() && g.abs() + 1 > depth as i64 - 1),
                }
            }
        }
    }
}
