//! ATC-style drug hierarchy and cocktail definitions.
//!
//! The tree is loaded from a `code,label` CSV where a node's parent is its
//! longest proper code prefix of valid ATC length (1/3/4/5/7 characters).
//! Nodes are numbered by a depth-first preorder traversal with children
//! visited in lexicographic code order, so every subtree is a half-open id
//! interval and descendant tests are O(1).

use std::collections::HashMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use thiserror::Error;

/// DFS preorder index of a tree node.
pub type NodeId = usize;

/// Valid ATC code lengths, one per hierarchy level.
pub const ATC_CODE_LENGTHS: [usize; 5] = [1, 3, 4, 5, 7];

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("i/o error reading tree: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error reading tree: {0}")]
    Csv(#[from] csv::Error),
    #[error("duplicate code in tree file: {0}")]
    DuplicateCode(String),
    #[error("orphan code (no parent prefix present): {0}")]
    OrphanCode(String),
    #[error("invalid code length for ATC convention: {0}")]
    InvalidCodeLength(String),
    #[error("tree file contains no nodes")]
    Empty,
}

#[derive(Debug, Clone)]
pub struct AtcNode {
    pub code: String,
    pub label: String,
    /// Level in the hierarchy; roots sit at depth 1, the implicit
    /// super-root joining multiple roots at depth 0 is not a node.
    pub depth: u32,
    pub parent: Option<NodeId>,
    /// Half-open DFS interval: descendants d satisfy enter < id(d) < exit.
    pub enter: usize,
    pub exit: usize,
}

impl AtcNode {
    pub fn is_leaf(&self) -> bool {
        self.enter + 1 == self.exit
    }
}

#[derive(Debug, Clone)]
pub struct AtcTree {
    nodes: Vec<AtcNode>,
    children: Vec<Vec<NodeId>>,
    roots: Vec<NodeId>,
    code_index: HashMap<String, NodeId>,
    max_depth: u32,
    depth_t: u32,
}

impl AtcTree {
    /// Load a tree from `code,label` CSV rows.
    pub fn load<R: Read>(reader: R) -> Result<Self, TreeError> {
        let mut csv_reader = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let mut rows: Vec<(String, String)> = Vec::new();
        for record in csv_reader.records() {
            let record = record?;
            let code = record.get(0).unwrap_or("").trim().to_string();
            let label = record.get(1).unwrap_or("").trim().to_string();
            if code.is_empty() {
                continue;
            }
            rows.push((code, label));
        }
        Self::from_rows(rows)
    }

    pub fn load_file<P: AsRef<Path>>(path: P) -> Result<Self, TreeError> {
        Self::load(File::open(path)?)
    }

    /// Build a tree from `(code, label)` pairs; order of rows is irrelevant.
    pub fn from_rows(rows: Vec<(String, String)>) -> Result<Self, TreeError> {
        if rows.is_empty() {
            return Err(TreeError::Empty);
        }
        let mut labels: HashMap<&str, &str> = HashMap::new();
        for (code, label) in &rows {
            if !code.is_ascii() || !ATC_CODE_LENGTHS.contains(&code.len()) {
                return Err(TreeError::InvalidCodeLength(code.clone()));
            }
            if labels.insert(code.as_str(), label.as_str()).is_some() {
                return Err(TreeError::DuplicateCode(code.clone()));
            }
        }

        // Parent of a code is its longest proper prefix of valid length
        // present in the file.
        let parent_code = |code: &str| -> Result<Option<&str>, TreeError> {
            let len = code.len();
            for &plen in ATC_CODE_LENGTHS.iter().rev() {
                if plen >= len {
                    continue;
                }
                let prefix = &code[..plen];
                if let Some((key, _)) = labels.get_key_value(prefix) {
                    return Ok(Some(key));
                }
            }
            if len == 1 {
                Ok(None)
            } else {
                Err(TreeError::OrphanCode(code.to_string()))
            }
        };

        let mut kids: HashMap<&str, Vec<&str>> = HashMap::new();
        let mut root_codes: Vec<&str> = Vec::new();
        let mut codes: Vec<&str> = rows.iter().map(|(c, _)| c.as_str()).collect();
        codes.sort_unstable();
        for code in &codes {
            match parent_code(code)? {
                Some(parent) => kids.entry(parent).or_default().push(code),
                None => root_codes.push(code),
            }
        }

        // Iterative preorder DFS; `codes` is sorted so children lists are
        // already lexicographic.
        let mut nodes: Vec<AtcNode> = Vec::with_capacity(rows.len());
        let mut children: Vec<Vec<NodeId>> = Vec::with_capacity(rows.len());
        let mut code_index: HashMap<String, NodeId> = HashMap::with_capacity(rows.len());
        let mut stack: Vec<(&str, Option<NodeId>, u32)> = Vec::new();
        for root in root_codes.iter().rev() {
            stack.push((root, None, 1));
        }
        while let Some((code, parent, depth)) = stack.pop() {
            let id = nodes.len();
            nodes.push(AtcNode {
                code: code.to_string(),
                label: labels[code].to_string(),
                depth,
                parent,
                enter: id,
                exit: 0,
            });
            children.push(Vec::new());
            code_index.insert(code.to_string(), id);
            if let Some(p) = parent {
                children[p].push(id);
            }
            if let Some(kid_codes) = kids.get(code) {
                for kid in kid_codes.iter().rev() {
                    stack.push((kid, Some(id), depth + 1));
                }
            }
        }

        // exit(v) = 1 + max id in subtree(v); scan ids in reverse.
        for id in (0..nodes.len()).rev() {
            let exit = children[id].last().map_or(id + 1, |&c| nodes[c].exit);
            nodes[id].exit = exit;
        }

        let roots: Vec<NodeId> = nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.parent.is_none())
            .map(|(id, _)| id)
            .collect();
        let max_depth = nodes.iter().map(|n| n.depth).max().unwrap_or(0);
        // Largest achievable substitution cost: a cross-root pair costs
        // max_depth, while under a single shared root no pair can diverge
        // by more than max_depth - 1 levels. Floored at 1 so indel costs
        // stay positive on degenerate trees.
        let depth_t = if roots.len() > 1 {
            max_depth
        } else {
            (max_depth.saturating_sub(1)).max(1)
        };

        Ok(AtcTree { nodes, children, roots, code_index, max_depth, depth_t })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &AtcNode {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[AtcNode] {
        &self.nodes
    }

    pub fn code(&self, id: NodeId) -> &str {
        &self.nodes[id].code
    }

    pub fn depth(&self, id: NodeId) -> u32 {
        self.nodes[id].depth
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.nodes[id].parent
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        &self.children[id]
    }

    pub fn roots(&self) -> &[NodeId] {
        &self.roots
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.nodes[id].is_leaf()
    }

    pub fn id_of(&self, code: &str) -> Option<NodeId> {
        self.code_index.get(code).copied()
    }

    /// Maximum node depth in the loaded tree.
    pub fn max_depth(&self) -> u32 {
        self.max_depth
    }

    /// depth(T): the tree's substitution-cost diameter, used for indel
    /// costs and similarity normalization.
    pub fn depth_t(&self) -> u32 {
        self.depth_t
    }

    /// Half-open DFS interval of `id`'s subtree (inclusive of `id`).
    pub fn subtree_interval(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id].enter, self.nodes[id].exit)
    }

    /// True when `candidate` lies in `ancestor`'s subtree (inclusive).
    pub fn is_descendant(&self, candidate: NodeId, ancestor: NodeId) -> bool {
        let n = &self.nodes[ancestor];
        n.enter <= candidate && candidate < n.exit
    }

    pub fn leaves(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.nodes.len()).filter(|&id| self.is_leaf(id))
    }

    pub fn internal_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.nodes.len()).filter(|&id| !self.is_leaf(id))
    }

    /// Substitution cost between two nodes: the larger of their distances
    /// to the lowest common ancestor. Nodes under different roots fall back
    /// to the implicit super-root at depth 0.
    pub fn lca_cost(&self, a: NodeId, b: NodeId) -> u32 {
        if a == b {
            return 0;
        }
        let (da, db) = (self.nodes[a].depth, self.nodes[b].depth);
        let mut anc = Some(a);
        while let Some(v) = anc {
            if self.is_descendant(b, v) {
                let dl = self.nodes[v].depth;
                return (da - dl).max(db - dl);
            }
            anc = self.nodes[v].parent;
        }
        da.max(db)
    }

    /// Free neighbors of `at` relative to `cocktail`: its parent and
    /// children minus nodes already in the cocktail.
    pub fn free_neighbors(&self, cocktail: &Cocktail, at: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        if let Some(p) = self.nodes[at].parent {
            if !cocktail.contains(p) {
                out.push(p);
            }
        }
        for &c in &self.children[at] {
            if !cocktail.contains(c) {
                out.push(c);
            }
        }
        out
    }
}

/// A duplicate-free set of tree node ids; the search-space element.
///
/// Node ids are kept sorted, so equality is set equality.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cocktail(Vec<NodeId>);

impl Cocktail {
    /// Build from any collection of node ids; sorts and deduplicates.
    ///
    /// Panics when the collection is empty: cocktails have size >= 1 by
    /// construction everywhere in the pipeline.
    pub fn new(nodes: impl IntoIterator<Item = NodeId>) -> Self {
        let mut v: Vec<NodeId> = nodes.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        assert!(!v.is_empty(), "cocktail must contain at least one node");
        Cocktail(v)
    }

    pub fn try_new(nodes: impl IntoIterator<Item = NodeId>) -> Option<Self> {
        let mut v: Vec<NodeId> = nodes.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        if v.is_empty() {
            None
        } else {
            Some(Cocktail(v))
        }
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.0.binary_search(&id).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.0.iter().copied()
    }

    /// Cocktail with `old` swapped for `new`; `old` must be a member.
    pub fn with_replaced(&self, old: NodeId, new: NodeId) -> Cocktail {
        Cocktail::new(self.iter().map(|n| if n == old { new } else { n }))
    }

    pub fn with_added(&self, id: NodeId) -> Cocktail {
        let mut v = self.0.clone();
        v.push(id);
        Cocktail::new(v)
    }

    /// Cocktail with `id` removed, or `None` when that would empty it.
    pub fn with_removed(&self, id: NodeId) -> Option<Cocktail> {
        Cocktail::try_new(self.iter().filter(|&n| n != id))
    }

    /// `;`-joined codes sorted lexicographically, the report key format.
    pub fn codes(&self, tree: &AtcTree) -> String {
        let mut codes: Vec<&str> = self.iter().map(|id| tree.code(id)).collect();
        codes.sort_unstable();
        codes.join(";")
    }
}
