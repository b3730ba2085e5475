//! Cylinder cells over a depth-indexed partition tree and the Boolean algebra
//! of clopen sets they generate.
//!
//! A [`PartitionTree`] fixes an alphabet size and a language of admissible
//! words. Every admissible word names a nonempty cylinder [`Cell`], and every
//! clopen subset of the Cantor space is a finite union of cells. [`ClopenSet`]
//! keeps that union in its unique minimal form: an antichain with no complete
//! sibling family, sorted by `(depth, word)`. Equality of clopen sets is then
//! structural equality.

use std::cmp::Ordering;
use std::fmt;
use std::sync::Arc;

use serde::{Serialize, Serializer};
use thiserror::Error;

pub const DEFAULT_DEPTH_CAP: usize = 64;
pub const DEPTH_CAP_ENV: &str = "GROUPOID_TILER_DEPTH_CAP";

/// Symbols used when a word is printed or serialized, one character each.
pub const SYMBOL_CHARS: &[u8] = b"0123456789abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ";

/// Reads the depth cap from the environment, falling back to the default.
pub fn depth_cap_from_env() -> usize {
    std::env::var(DEPTH_CAP_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&v| v > 0)
        .unwrap_or(DEFAULT_DEPTH_CAP)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CantorError {
    #[error("clopen sets live on different partition trees ({left} vs {right})")]
    TreeMismatch { left: String, right: String },
    #[error("depth {requested} exceeds the depth cap {cap}")]
    Capacity { requested: usize, cap: usize },
    #[error("cannot refine to depth {requested}: the set has a cell of depth {present}")]
    ShallowRefinement { requested: usize, present: usize },
    #[error("word {word} is not admissible")]
    Inadmissible { word: String },
    #[error("arity {0} is outside 1..=62")]
    Arity(usize),
    #[error("cannot parse word {0:?}")]
    Parse(String),
}

type Language = dyn Fn(&[u8]) -> bool + Send + Sync;

/// The shape of the unit space: alphabet size, admissible words, depth cap.
#[derive(Clone)]
pub struct PartitionTree {
    label: Arc<str>,
    arity: u8,
    language: Option<Arc<Language>>,
    depth_cap: usize,
}

impl fmt::Debug for PartitionTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PartitionTree")
            .field("label", &self.label)
            .field("arity", &self.arity)
            .field("depth_cap", &self.depth_cap)
            .finish()
    }
}

impl PartitionTree {
    /// The full shift on `arity` symbols.
    pub fn full(arity: usize) -> Result<Self, CantorError> {
        if arity == 0 || arity > SYMBOL_CHARS.len() {
            return Err(CantorError::Arity(arity));
        }
        Ok(Self {
            label: Arc::from(format!("full-{arity}")),
            arity: arity as u8,
            language: None,
            depth_cap: depth_cap_from_env(),
        })
    }

    /// A tree whose admissible words are those accepted by `language`.
    ///
    /// The predicate must accept the empty word and be prefix-closed.
    pub fn with_language<F>(label: &str, arity: usize, language: F) -> Result<Self, CantorError>
    where
        F: Fn(&[u8]) -> bool + Send + Sync + 'static,
    {
        if arity == 0 || arity > SYMBOL_CHARS.len() {
            return Err(CantorError::Arity(arity));
        }
        Ok(Self {
            label: Arc::from(label),
            arity: arity as u8,
            language: Some(Arc::new(language)),
            depth_cap: depth_cap_from_env(),
        })
    }

    pub fn relabel(mut self, label: &str) -> Self {
        self.label = Arc::from(label);
        self
    }

    pub fn with_depth_cap(mut self, cap: usize) -> Self {
        self.depth_cap = cap.max(1);
        self
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn arity(&self) -> usize {
        self.arity as usize
    }

    pub fn depth_cap(&self) -> usize {
        self.depth_cap
    }

    pub fn is_admissible(&self, word: &[u8]) -> bool {
        if word.iter().any(|&s| s >= self.arity) {
            return false;
        }
        match &self.language {
            None => true,
            Some(lang) => lang(word),
        }
    }

    pub fn check_depth(&self, depth: usize) -> Result<(), CantorError> {
        if depth > self.depth_cap {
            return Err(CantorError::Capacity { requested: depth, cap: self.depth_cap });
        }
        Ok(())
    }

    /// Admissible one-symbol extensions of `word`.
    pub fn children(&self, word: &[u8]) -> Vec<Cell> {
        let mut out = Vec::new();
        let mut w = word.to_vec();
        for s in 0..self.arity {
            w.push(s);
            if self.is_admissible(&w) {
                out.push(Cell { word: w.clone() });
            }
            w.pop();
        }
        out
    }

    /// All admissible cells of depth exactly `depth`, in word order.
    pub fn cells_at_depth(&self, depth: usize) -> Result<Vec<Cell>, CantorError> {
        self.check_depth(depth)?;
        let mut layer = vec![Cell::root()];
        for _ in 0..depth {
            layer = layer.iter().flat_map(|c| self.children(&c.word)).collect();
        }
        Ok(layer)
    }

    /// All admissible extensions of `cell` at depth `depth`.
    pub fn extensions(&self, cell: &Cell, depth: usize) -> Result<Vec<Cell>, CantorError> {
        self.check_depth(depth)?;
        if depth < cell.depth() {
            return Err(CantorError::ShallowRefinement { requested: depth, present: cell.depth() });
        }
        let mut layer = vec![cell.clone()];
        for _ in cell.depth()..depth {
            layer = layer.iter().flat_map(|c| self.children(&c.word)).collect();
        }
        Ok(layer)
    }

    /// Returns the first admissible cell up to `depth` with no admissible child.
    pub fn find_dead_end(&self, depth: usize) -> Option<Cell> {
        let mut layer = vec![Cell::root()];
        for _ in 0..depth {
            let mut next = Vec::new();
            for c in &layer {
                let kids = self.children(&c.word);
                if kids.is_empty() {
                    return Some(c.clone());
                }
                next.extend(kids);
            }
            layer = next;
        }
        None
    }

    pub fn cell(&self, word: &[u8]) -> Result<Cell, CantorError> {
        if !self.is_admissible(word) {
            return Err(CantorError::Inadmissible { word: render_word(word) });
        }
        self.check_depth(word.len())?;
        Ok(Cell { word: word.to_vec() })
    }

    pub fn parse_cell(&self, text: &str) -> Result<Cell, CantorError> {
        let word = parse_word(text)?;
        self.cell(&word)
    }

    pub fn empty(&self) -> ClopenSet {
        ClopenSet { tree: self.label.clone(), cells: Vec::new(), depths: Vec::new() }
    }

    pub fn whole(&self) -> ClopenSet {
        ClopenSet { tree: self.label.clone(), cells: vec![Cell::root()], depths: vec![0] }
    }

    /// The clopen set covered by `cells`, in canonical form.
    pub fn set<I>(&self, cells: I) -> Result<ClopenSet, CantorError>
    where
        I: IntoIterator<Item = Cell>,
    {
        let mut node = Node::Empty;
        for c in cells {
            if !self.is_admissible(&c.word) {
                return Err(CantorError::Inadmissible { word: c.to_string() });
            }
            self.check_depth(c.depth())?;
            node.insert(&c.word, self.arity());
        }
        let mut prefix = Vec::new();
        let node = normalize(self, node, &mut prefix);
        Ok(self.from_node(&node))
    }

    pub fn set_from_words(&self, words: &[&str]) -> Result<ClopenSet, CantorError> {
        let cells = words.iter().map(|w| self.parse_cell(w)).collect::<Result<Vec<_>, _>>()?;
        self.set(cells)
    }

    fn from_node(&self, node: &Node) -> ClopenSet {
        let mut cells = Vec::new();
        let mut prefix = Vec::new();
        node.collect(&mut prefix, &mut cells);
        ClopenSet::from_sorted(self.label.clone(), cells)
    }

    fn node_of(&self, set: &ClopenSet) -> Result<Node, CantorError> {
        self.same_tree(set)?;
        let mut node = Node::Empty;
        for c in &set.cells {
            node.insert(&c.word, self.arity());
        }
        Ok(node)
    }

    fn same_tree(&self, set: &ClopenSet) -> Result<(), CantorError> {
        if set.tree != self.label {
            return Err(CantorError::TreeMismatch {
                left: self.label.to_string(),
                right: set.tree.to_string(),
            });
        }
        Ok(())
    }

    pub fn union(&self, a: &ClopenSet, b: &ClopenSet) -> Result<ClopenSet, CantorError> {
        self.combine(a, b, Op::Union)
    }

    pub fn intersect(&self, a: &ClopenSet, b: &ClopenSet) -> Result<ClopenSet, CantorError> {
        self.combine(a, b, Op::Intersect)
    }

    pub fn difference(&self, a: &ClopenSet, b: &ClopenSet) -> Result<ClopenSet, CantorError> {
        self.combine(a, b, Op::Difference)
    }

    pub fn complement(&self, a: &ClopenSet) -> Result<ClopenSet, CantorError> {
        let whole = self.whole();
        self.combine(&whole, a, Op::Difference)
    }

    pub fn union_all<'a, I>(&self, sets: I) -> Result<ClopenSet, CantorError>
    where
        I: IntoIterator<Item = &'a ClopenSet>,
    {
        let mut node = Node::Empty;
        for s in sets {
            self.same_tree(s)?;
            for c in &s.cells {
                node.insert(&c.word, self.arity());
            }
        }
        let mut prefix = Vec::new();
        let node = normalize(self, node, &mut prefix);
        Ok(self.from_node(&node))
    }

    fn combine(&self, a: &ClopenSet, b: &ClopenSet, op: Op) -> Result<ClopenSet, CantorError> {
        let na = self.node_of(a)?;
        let nb = self.node_of(b)?;
        let mut prefix = Vec::new();
        let out = merge(self, &na, &nb, &mut prefix, op);
        Ok(self.from_node(&out))
    }

    pub fn is_subset(&self, a: &ClopenSet, b: &ClopenSet) -> Result<bool, CantorError> {
        Ok(self.difference(a, b)?.is_empty())
    }

    pub fn is_disjoint(&self, a: &ClopenSet, b: &ClopenSet) -> Result<bool, CantorError> {
        Ok(self.intersect(a, b)?.is_empty())
    }

    /// The same set written with every cell at depth exactly `depth`.
    pub fn refine(&self, a: &ClopenSet, depth: usize) -> Result<Vec<Cell>, CantorError> {
        self.same_tree(a)?;
        self.check_depth(depth)?;
        let mut out = Vec::new();
        for c in &a.cells {
            out.extend(self.extensions(c, depth)?);
        }
        out.sort();
        Ok(out)
    }

    /// Checks that `parts` are pairwise disjoint and cover the whole space.
    pub fn is_partition(&self, parts: &[ClopenSet]) -> Result<PartitionVerdict, CantorError> {
        let mut covered = self.empty();
        for (j, p) in parts.iter().enumerate() {
            let overlap = self.intersect(&covered, p)?;
            if let Some(cell) = overlap.cells.first() {
                let earlier = parts[..j]
                    .iter()
                    .position(|q| q.contains_cell(cell))
                    .unwrap_or(0);
                return Ok(PartitionVerdict::Overlap { cell: cell.clone(), first: earlier, second: j });
            }
            covered = self.union(&covered, p)?;
        }
        let missing = self.complement(&covered)?;
        match missing.cells.first() {
            Some(cell) => Ok(PartitionVerdict::Uncovered { cell: cell.clone() }),
            None => Ok(PartitionVerdict::Partition),
        }
    }
}

/// Outcome of [`PartitionTree::is_partition`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum PartitionVerdict {
    Partition,
    Overlap { cell: Cell, first: usize, second: usize },
    Uncovered { cell: Cell },
}

impl PartitionVerdict {
    pub fn holds(&self) -> bool {
        matches!(self, PartitionVerdict::Partition)
    }

    pub fn witness(&self) -> Option<&Cell> {
        match self {
            PartitionVerdict::Partition => None,
            PartitionVerdict::Overlap { cell, .. } | PartitionVerdict::Uncovered { cell } => Some(cell),
        }
    }
}

/// A cylinder: all points whose first `depth` symbols spell `word`.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Cell {
    word: Vec<u8>,
}

impl Cell {
    pub fn root() -> Self {
        Self { word: Vec::new() }
    }

    /// Builds a cell without consulting any tree.
    pub fn from_word(word: Vec<u8>) -> Self {
        Self { word }
    }

    pub fn depth(&self) -> usize {
        self.word.len()
    }

    pub fn word(&self) -> &[u8] {
        &self.word
    }

    pub fn is_prefix_of(&self, other: &[u8]) -> bool {
        other.len() >= self.word.len() && other[..self.word.len()] == self.word[..]
    }

    pub fn child(&self, symbol: u8) -> Cell {
        let mut w = self.word.clone();
        w.push(symbol);
        Cell { word: w }
    }

    pub fn truncate(&self, depth: usize) -> Cell {
        Cell { word: self.word[..depth.min(self.word.len())].to_vec() }
    }
}

impl Ord for Cell {
    fn cmp(&self, other: &Self) -> Ordering {
        self.word.len().cmp(&other.word.len()).then_with(|| self.word.cmp(&other.word))
    }
}

impl PartialOrd for Cell {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}]", render_word(&self.word))
    }
}

impl fmt::Debug for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl Serialize for Cell {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&render_word(&self.word))
    }
}

pub fn render_word(word: &[u8]) -> String {
    word.iter().map(|&s| SYMBOL_CHARS.get(s as usize).map_or('?', |&c| c as char)).collect()
}

/// Parses a word written with [`SYMBOL_CHARS`], with or without brackets.
pub fn parse_word(text: &str) -> Result<Vec<u8>, CantorError> {
    let t = text.trim();
    let t = t.strip_prefix('[').and_then(|x| x.strip_suffix(']')).unwrap_or(t);
    t.bytes()
        .map(|b| {
            SYMBOL_CHARS
                .iter()
                .position(|&c| c == b)
                .map(|p| p as u8)
                .ok_or_else(|| CantorError::Parse(text.to_string()))
        })
        .collect()
}

/// A clopen subset of the unit space in canonical antichain form.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct ClopenSet {
    tree: Arc<str>,
    cells: Vec<Cell>,
    depths: Vec<usize>,
}

impl ClopenSet {
    fn from_sorted(tree: Arc<str>, mut cells: Vec<Cell>) -> Self {
        cells.sort();
        let mut depths: Vec<usize> = cells.iter().map(Cell::depth).collect();
        depths.dedup();
        Self { tree, cells, depths }
    }

    pub fn tree_label(&self) -> &str {
        &self.tree
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn is_whole(&self) -> bool {
        self.cells.len() == 1 && self.cells[0].depth() == 0
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    /// Deepest cell depth, or 0 for the empty set.
    pub fn max_depth(&self) -> usize {
        self.depths.last().copied().unwrap_or(0)
    }

    /// Whether the point whose expansion starts with `word` lies in the set.
    ///
    /// `word` must be at least [`ClopenSet::max_depth`] long.
    pub fn contains_word(&self, word: &[u8]) -> bool {
        for &d in &self.depths {
            if d > word.len() {
                break;
            }
            let probe = &word[..d];
            let lo = self.cells.partition_point(|c| c.depth() < d);
            let hi = self.cells.partition_point(|c| c.depth() <= d);
            if self.cells[lo..hi].binary_search_by(|c| c.word[..].cmp(probe)).is_ok() {
                return true;
            }
        }
        false
    }

    /// Whether `cell` is contained in the set.
    pub fn contains_cell(&self, cell: &Cell) -> bool {
        self.cells.iter().any(|c| c.is_prefix_of(&cell.word))
    }

    /// Whether `cell` meets the set.
    pub fn meets_cell(&self, cell: &Cell) -> bool {
        self.cells.iter().any(|c| c.is_prefix_of(&cell.word) || cell.is_prefix_of(&c.word))
    }

    pub fn words(&self) -> Vec<String> {
        self.cells.iter().map(|c| render_word(&c.word)).collect()
    }
}

impl fmt::Display for ClopenSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.cells.is_empty() {
            return write!(f, "∅");
        }
        let parts: Vec<String> = self.cells.iter().map(|c| c.to_string()).collect();
        write!(f, "{}", parts.join("∪"))
    }
}

impl fmt::Debug for ClopenSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl Serialize for ClopenSet {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.words().serialize(s)
    }
}

#[derive(Clone, Copy)]
enum Op {
    Union,
    Intersect,
    Difference,
}

#[derive(Clone, Debug)]
enum Node {
    Empty,
    Full,
    Split(Vec<Node>),
}

impl Node {
    fn insert(&mut self, word: &[u8], arity: usize) {
        match self {
            Node::Full => {}
            _ if word.is_empty() => *self = Node::Full,
            Node::Empty => {
                let mut kids = vec![Node::Empty; arity];
                kids[word[0] as usize].insert(&word[1..], arity);
                *self = Node::Split(kids);
            }
            Node::Split(kids) => kids[word[0] as usize].insert(&word[1..], arity),
        }
    }

    fn collect(&self, prefix: &mut Vec<u8>, out: &mut Vec<Cell>) {
        match self {
            Node::Empty => {}
            Node::Full => out.push(Cell { word: prefix.clone() }),
            Node::Split(kids) => {
                for (s, k) in kids.iter().enumerate() {
                    prefix.push(s as u8);
                    k.collect(prefix, out);
                    prefix.pop();
                }
            }
        }
    }
}

fn collapse(tree: &PartitionTree, kids: Vec<Node>, prefix: &mut Vec<u8>) -> Node {
    let mut all_full = true;
    let mut all_empty = true;
    for (s, k) in kids.iter().enumerate() {
        prefix.push(s as u8);
        let admissible = tree.is_admissible(prefix);
        prefix.pop();
        if !admissible {
            continue;
        }
        match k {
            Node::Full => all_empty = false,
            Node::Empty => all_full = false,
            Node::Split(_) => {
                all_full = false;
                all_empty = false;
            }
        }
    }
    if all_empty {
        Node::Empty
    } else if all_full {
        Node::Full
    } else {
        Node::Split(kids)
    }
}

fn normalize(tree: &PartitionTree, node: Node, prefix: &mut Vec<u8>) -> Node {
    match node {
        Node::Split(kids) => {
            let kids: Vec<Node> = kids
                .into_iter()
                .enumerate()
                .map(|(s, k)| {
                    prefix.push(s as u8);
                    let out = if tree.is_admissible(prefix) { normalize(tree, k, prefix) } else { Node::Empty };
                    prefix.pop();
                    out
                })
                .collect();
            collapse(tree, kids, prefix)
        }
        other => other,
    }
}

fn complement(tree: &PartitionTree, node: &Node, prefix: &mut Vec<u8>) -> Node {
    match node {
        Node::Empty => Node::Full,
        Node::Full => Node::Empty,
        Node::Split(kids) => {
            let kids: Vec<Node> = kids
                .iter()
                .enumerate()
                .map(|(s, k)| {
                    prefix.push(s as u8);
                    let out = if tree.is_admissible(prefix) { complement(tree, k, prefix) } else { Node::Empty };
                    prefix.pop();
                    out
                })
                .collect();
            collapse(tree, kids, prefix)
        }
    }
}

fn merge(tree: &PartitionTree, a: &Node, b: &Node, prefix: &mut Vec<u8>, op: Op) -> Node {
    use Node::*;
    match (op, a, b) {
        (Op::Union, Full, _) | (Op::Union, _, Full) => Full,
        (Op::Union, Empty, x) | (Op::Union, x, Empty) => x.clone(),
        (Op::Intersect, Empty, _) | (Op::Intersect, _, Empty) => Empty,
        (Op::Intersect, Full, x) | (Op::Intersect, x, Full) => x.clone(),
        (Op::Difference, Empty, _) | (Op::Difference, _, Full) => Empty,
        (Op::Difference, x, Empty) => x.clone(),
        (Op::Difference, Full, x) => complement(tree, x, prefix),
        (_, Split(ka), Split(kb)) => {
            let kids: Vec<Node> = ka
                .iter()
                .zip(kb)
                .enumerate()
                .map(|(s, (x, y))| {
                    prefix.push(s as u8);
                    let out = merge(tree, x, y, prefix, op);
                    prefix.pop();
                    out
                })
                .collect();
            collapse(tree, kids, prefix)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn binary() -> PartitionTree {
        PartitionTree::full(2).unwrap()
    }

    fn set(t: &PartitionTree, words: &[&str]) -> ClopenSet {
        t.set_from_words(words).unwrap()
    }

    #[test]
    fn sibling_cells_merge_into_parent() {
        let t = binary();
        let u = t.union(&set(&t, &["0"]), &set(&t, &["1"])).unwrap();
        assert!(u.is_whole());
        assert_eq!(u.words(), vec![String::new()]);
    }

    #[test]
    fn union_identities() {
        let t = binary();
        let a = set(&t, &["01", "110"]);
        assert_eq!(t.union(&a, &t.empty()).unwrap(), a);
        assert_eq!(t.union(&set(&t, &["00"]), &set(&t, &["0"])).unwrap(), set(&t, &["0"]));
    }

    #[test]
    fn intersect_complement_refine() {
        let t = binary();
        assert_eq!(t.intersect(&set(&t, &["01"]), &set(&t, &["0"])).unwrap(), set(&t, &["01"]));
        assert_eq!(t.complement(&set(&t, &["0"])).unwrap(), set(&t, &["1"]));
        let r = t.refine(&set(&t, &["0"]), 2).unwrap();
        assert_eq!(r, vec![Cell::from_word(vec![0, 0]), Cell::from_word(vec![0, 1])]);
    }

    #[test]
    fn refine_past_cap_is_a_capacity_error() {
        let t = binary().with_depth_cap(4);
        let err = t.refine(&t.whole(), 5).unwrap_err();
        assert_eq!(err, CantorError::Capacity { requested: 5, cap: 4 });
    }

    #[test]
    fn partition_checks() {
        let t = binary();
        assert!(t.is_partition(&[set(&t, &["0"]), set(&t, &["1"])]).unwrap().holds());
        let bad = t.is_partition(&[set(&t, &["0"]), set(&t, &["01"])]).unwrap();
        assert_eq!(bad.witness(), Some(&Cell::from_word(vec![0, 1])));
        assert!(t
            .is_partition(&[set(&t, &["00"]), set(&t, &["01"]), set(&t, &["1"])])
            .unwrap()
            .holds());
        let gap = t.is_partition(&[set(&t, &["00"]), set(&t, &["1"])]).unwrap();
        assert_eq!(gap, PartitionVerdict::Uncovered { cell: Cell::from_word(vec![0, 1]) });
    }

    #[test]
    fn three_part_partition_matches_exhaustive_depth_two_check() {
        let t = binary();
        let parts = [set(&t, &["00"]), set(&t, &["01"]), set(&t, &["1"])];
        for cell in t.cells_at_depth(2).unwrap() {
            let hits = parts.iter().filter(|p| p.contains_word(cell.word())).count();
            assert_eq!(hits, 1, "{cell}");
        }
    }

    #[test]
    fn mismatched_trees_are_rejected() {
        let t = binary();
        let u = PartitionTree::full(3).unwrap();
        let err = t.union(&t.whole(), &u.whole()).unwrap_err();
        assert!(matches!(err, CantorError::TreeMismatch { .. }));
    }

    #[test]
    fn restricted_language_merges_over_admissible_children() {
        // golden mean shift: no two consecutive 1s
        let t = PartitionTree::with_language("golden", 2, |w: &[u8]| !w.windows(2).any(|p| p == [1, 1])).unwrap();
        let s = t.set_from_words(&["10"]).unwrap();
        assert_eq!(s, t.set_from_words(&["1"]).unwrap());
        assert_eq!(t.complement(&t.set_from_words(&["0"]).unwrap()).unwrap().words(), vec!["1"]);
        assert!(t.find_dead_end(10).is_none());
        assert_eq!(t.cells_at_depth(4).unwrap().len(), 8);
    }

    #[test]
    fn contains_word_agrees_with_cell_scan() {
        let t = binary();
        let a = set(&t, &["1", "001", "0101"]);
        for cell in t.cells_at_depth(5).unwrap() {
            let expect = a.cells().iter().any(|c| c.is_prefix_of(cell.word()));
            assert_eq!(a.contains_word(cell.word()), expect);
        }
    }

    #[test]
    fn words_round_trip_through_text() {
        let t = PartitionTree::full(16).unwrap();
        let c = t.parse_cell("[0af]").unwrap();
        assert_eq!(c.word(), &[0, 10, 15]);
        assert_eq!(c.to_string(), "[0af]");
        assert!(t.parse_cell("0g").is_err());
        assert_eq!(serde_json::to_string(&t.set(vec![c]).unwrap()).unwrap(), r#"["0af"]"#);
    }

    fn arb_set(max_depth: usize) -> impl Strategy<Value = Vec<Vec<u8>>> {
        prop::collection::vec(prop::collection::vec(0u8..2, 0..=max_depth), 0..6)
    }

    fn build(t: &PartitionTree, words: Vec<Vec<u8>>) -> ClopenSet {
        t.set(words.into_iter().map(Cell::from_word)).unwrap()
    }

    fn is_canonical(t: &PartitionTree, s: &ClopenSet) -> bool {
        let cells = s.cells();
        let sorted = cells.windows(2).all(|w| w[0] < w[1]);
        let antichain = cells.iter().enumerate().all(|(i, a)| {
            cells.iter().enumerate().all(|(j, b)| i == j || !a.is_prefix_of(b.word()))
        });
        let no_siblings = cells.iter().all(|c| {
            if c.depth() == 0 {
                return true;
            }
            let parent = c.truncate(c.depth() - 1);
            !t.children(parent.word()).iter().all(|k| cells.contains(k))
        });
        sorted && antichain && no_siblings
    }

    proptest! {
        #[test]
        fn de_morgan_and_double_complement(a in arb_set(8), b in arb_set(8)) {
            let t = binary();
            let a = build(&t, a);
            let b = build(&t, b);
            let lhs = t.complement(&t.union(&a, &b).unwrap()).unwrap();
            let rhs = t.intersect(&t.complement(&a).unwrap(), &t.complement(&b).unwrap()).unwrap();
            prop_assert_eq!(&lhs, &rhs);
            let lhs = t.complement(&t.intersect(&a, &b).unwrap()).unwrap();
            let rhs = t.union(&t.complement(&a).unwrap(), &t.complement(&b).unwrap()).unwrap();
            prop_assert_eq!(&lhs, &rhs);
            prop_assert_eq!(t.complement(&t.complement(&a).unwrap()).unwrap(), a.clone());
            for cell in t.cells_at_depth(8).unwrap() {
                let w = cell.word();
                let u = t.union(&a, &b).unwrap();
                let i = t.intersect(&a, &b).unwrap();
                prop_assert_eq!(u.contains_word(w), a.contains_word(w) || b.contains_word(w));
                prop_assert_eq!(i.contains_word(w), a.contains_word(w) && b.contains_word(w));
            }
        }

        #[test]
        fn operations_stay_canonical(a in arb_set(8), b in arb_set(8)) {
            let t = binary();
            let a = build(&t, a);
            let b = build(&t, b);
            prop_assert!(is_canonical(&t, &a));
            prop_assert_eq!(t.set(a.cells().to_vec()).unwrap(), a.clone());
            prop_assert!(is_canonical(&t, &t.union(&a, &b).unwrap()));
            prop_assert!(is_canonical(&t, &t.intersect(&a, &b).unwrap()));
            prop_assert!(is_canonical(&t, &t.difference(&a, &b).unwrap()));
        }
    }
}
