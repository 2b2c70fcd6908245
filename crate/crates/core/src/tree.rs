//! Tree drafts: construction from stream logits, flattening, the additive
//! tree attention mask, and early-exit pruning.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{topk, Precision, Tensor};

/// Upper bound on flattened tree size.
pub const MAX_TREE_NODES: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeNode {
    pub token: u32,
    pub parent: Option<usize>,
    pub depth: usize,
    /// Stream whose logits proposed this token; 0 for the root (main stream).
    pub stream: usize,
}

/// A flattened (preorder) speculative tree. `origin[i]` is the index node
/// `i` had in the unpruned tree it came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeDraft {
    nodes: Vec<TreeNode>,
    origin: Vec<usize>,
}

/// `1 + Σ_{g=1..γ} k^g`.
pub fn tree_size(streams: usize, k: usize) -> usize {
    let mut total = 1usize;
    let mut layer = 1usize;
    for _ in 0..streams {
        layer = layer.saturating_mul(k);
        total = total.saturating_add(layer);
    }
    total
}

/// Rows processed by the multi-stream layers for a full tree:
/// `(1 + γ) · (1 + Σ_{g=1..γ} k^g)`.
pub fn msa_batch_size(streams: usize, k: usize) -> usize {
    (1 + streams).saturating_mul(tree_size(streams, k))
}

impl TreeDraft {
    /// A tree holding only `root`.
    pub fn root_only(root: u32) -> Self {
        TreeDraft { nodes: vec![TreeNode { token: root, parent: None, depth: 0, stream: 0 }], origin: vec![0] }
    }

    /// A single path: the prompt shape (`tokens[0]` is the root).
    pub fn chain(tokens: &[u32]) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::param("chain needs at least one token"));
        }
        let nodes = tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| TreeNode { token: t, parent: i.checked_sub(1), depth: i, stream: 0 })
            .collect();
        Ok(TreeDraft { nodes, origin: (0..tokens.len()).collect() })
    }

    /// Builds the tree from explicit nodes, validating flattening order.
    pub fn from_nodes(nodes: Vec<TreeNode>) -> Result<Self> {
        for (i, n) in nodes.iter().enumerate() {
            match n.parent {
                None if i == 0 && n.depth == 0 => {}
                Some(p) if p < i && nodes[p].depth + 1 == n.depth => {}
                _ => return Err(Error::logic(format!("node {i} breaks tree flattening invariants"))),
            }
        }
        if nodes.is_empty() {
            return Err(Error::logic("a tree needs a root"));
        }
        let n = nodes.len();
        Ok(TreeDraft { nodes, origin: (0..n).collect() })
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> u32 {
        self.nodes[0].token
    }

    pub fn origin(&self) -> &[usize] {
        &self.origin
    }

    pub fn parents(&self) -> Vec<Option<usize>> {
        self.nodes.iter().map(|n| n.parent).collect()
    }

    pub fn tokens(&self) -> Vec<u32> {
        self.nodes.iter().map(|n| n.token).collect()
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    pub fn children(&self, p: usize) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().enumerate().filter(move |(_, n)| n.parent == Some(p)).map(|(i, _)| i)
    }

    /// Number of root-to-leaf paths.
    pub fn leaf_count(&self) -> usize {
        let mut has_child = vec![false; self.len()];
        for n in &self.nodes {
            if let Some(p) = n.parent {
                has_child[p] = true;
            }
        }
        has_child.iter().filter(|&&c| !c).count()
    }

    /// Node indices from the root down to `node`, inclusive.
    pub fn path_to(&self, node: usize) -> Vec<usize> {
        let mut path = vec![node];
        let mut cur = node;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// Serializable dump of the nodes.
    pub fn to_document(&self) -> serde_json::Value {
        serde_json::json!({ "nodes": self.nodes })
    }
}

/// Builds the full k-ary draft: the top-`k` tokens of stream `g` hang under
/// every node of depth `g−1`. One top-k set per stream is shared by all
/// parents at that depth.
pub fn build_tree(correction: u32, stream_logits: &[&[f64]], k: usize) -> Result<TreeDraft> {
    if k == 0 {
        return Err(Error::param("k must be at least 1"));
    }
    let size = tree_size(stream_logits.len(), k);
    if size > MAX_TREE_NODES {
        return Err(Error::capacity(format!("tree of {size} nodes exceeds {MAX_TREE_NODES}")));
    }
    let picks = stream_logits
        .iter()
        .map(|l| topk(l, k).map(|v| v.into_iter().map(|(t, _)| t).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;

    fn grow(nodes: &mut Vec<TreeNode>, picks: &[Vec<u32>], parent: usize, depth: usize) {
        if depth == picks.len() {
            return;
        }
        for &tok in &picks[depth] {
            nodes.push(TreeNode { token: tok, parent: Some(parent), depth: depth + 1, stream: depth + 1 });
            let me = nodes.len() - 1;
            grow(nodes, picks, me, depth + 1);
        }
    }

    let mut nodes = Vec::with_capacity(size);
    nodes.push(TreeNode { token: correction, parent: None, depth: 0, stream: 0 });
    grow(&mut nodes, &picks, 0, 0);
    Ok(TreeDraft { nodes, origin: (0..size).collect() })
}

/// Additive mask of shape `nodes × (committed + nodes)`: each node sees all
/// committed positions, its ancestors back to the root, and itself.
pub fn build_mask(tree: &TreeDraft, committed: usize) -> Tensor {
    let n = tree.len();
    let cols = committed + n;
    let mut data = vec![f64::NEG_INFINITY; n * cols];
    for i in 0..n {
        let row = &mut data[i * cols..(i + 1) * cols];
        row[..committed].iter_mut().for_each(|x| *x = 0.0);
        let mut cur = Some(i);
        while let Some(c) = cur {
            row[committed + c] = 0.0;
            cur = tree.nodes[c].parent;
        }
    }
    Tensor::matrix(n, cols, data, Precision::F64).expect("mask shape is consistent")
}

/// Drops every child whose token has early-exit probability below `tau`
/// under its parent's distribution, along with its subtree. `probs` holds
/// one row per node of `tree`.
pub fn prune(tree: &TreeDraft, probs: &Tensor, tau: f64) -> Result<TreeDraft> {
    if !(0.0..=f64::INFINITY).contains(&tau) {
        return Err(Error::param(format!("threshold {tau} must be non-negative")));
    }
    if probs.rows() != tree.len() {
        return Err(Error::shape(format!("{} probability rows for {} nodes", probs.rows(), tree.len())));
    }
    let mut new_index: Vec<Option<usize>> = vec![None; tree.len()];
    let mut nodes = Vec::new();
    let mut origin = Vec::new();
    for (i, n) in tree.nodes.iter().enumerate() {
        let parent = match n.parent {
            None => None,
            Some(p) => match new_index[p] {
                None => continue,
                Some(np) => {
                    if probs.row(p)[n.token as usize] < tau {
                        continue;
                    }
                    Some(np)
                }
            },
        };
        new_index[i] = Some(nodes.len());
        nodes.push(TreeNode { parent, ..*n });
        origin.push(tree.origin[i]);
    }
    Ok(TreeDraft { nodes, origin })
}
