//! Committed main-stream key/value history with lazy tree backtracking.
//!
//! A forward pass over a flattened tree appends every node's K/V rows as
//! speculative rows, tagged by the node's flattened index. Layers below the
//! pruning point hold rows for the whole tree, layers above hold rows only
//! for nodes that survived pruning. Nothing is trimmed until [`KvCache::commit`]
//! copies the accepted root-to-node path into consecutive committed positions
//! and drops everything else. Stream K/V rows never enter the cache.

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
struct LayerKv {
    keys: Vec<f64>,
    values: Vec<f64>,
}

#[derive(Clone, Debug)]
struct SpecRows {
    node_ids: Vec<usize>,
    keys: Vec<f64>,
    values: Vec<f64>,
}

#[derive(Clone, Debug)]
struct PendingPass {
    parents: Vec<Option<usize>>,
    rows: Vec<Option<SpecRows>>,
}

#[derive(Clone, Debug)]
pub struct KvCache {
    hidden: usize,
    max_len: usize,
    committed: usize,
    layers: Vec<LayerKv>,
    pending: Option<PendingPass>,
}

impl KvCache {
    pub fn new(num_layers: usize, hidden: usize, max_len: usize) -> Self {
        KvCache { hidden, max_len, committed: 0, layers: vec![LayerKv::default(); num_layers], pending: None }
    }

    pub fn committed_len(&self) -> usize {
        self.committed
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Node count of the uncommitted tree pass, 0 when none is pending.
    pub fn speculative_extent(&self) -> usize {
        self.pending.as_ref().map_or(0, |p| p.parents.len())
    }

    /// Committed keys of one layer, `committed_len × hidden`, row-major.
    pub fn keys(&self, layer: usize) -> &[f64] {
        &self.layers[layer].keys
    }

    pub fn values(&self, layer: usize) -> &[f64] {
        &self.layers[layer].values
    }

    /// Stored rows, counting committed and speculative ones.
    pub fn stored_rows(&self) -> usize {
        let spec: usize = self.pending.iter().flat_map(|p| p.rows.iter().flatten()).map(|r| r.node_ids.len()).sum();
        self.committed * self.layers.len() + spec
    }

    /// Opens a speculative pass over a flattened tree given by parent links.
    pub fn begin_pass(&mut self, parents: Vec<Option<usize>>) -> Result<()> {
        if self.pending.is_some() {
            return Err(Error::logic("a speculative pass is already pending; commit or discard it first"));
        }
        let mut depth = vec![0usize; parents.len()];
        for (i, p) in parents.iter().enumerate() {
            match *p {
                None if i == 0 => {}
                None => return Err(Error::logic(format!("node {i} is a second root"))),
                Some(p) if p >= i => return Err(Error::logic(format!("node {i} has parent {p} that is not earlier"))),
                Some(p) => depth[i] = depth[p] + 1,
            }
        }
        let max_depth = depth.iter().copied().max();
        if let Some(d) = max_depth {
            if self.committed + d + 1 > self.max_len {
                return Err(Error::capacity(format!(
                    "positions up to {} exceed max length {}",
                    self.committed + d,
                    self.max_len
                )));
            }
        }
        self.pending = Some(PendingPass { parents, rows: vec![None; self.layers.len()] });
        Ok(())
    }

    /// Stores one layer's speculative K/V rows for the listed tree nodes.
    pub fn append_speculative(&mut self, layer: usize, keys: &[f64], values: &[f64], node_ids: &[usize]) -> Result<()> {
        let h = self.hidden;
        let pending = self.pending.as_mut().ok_or_else(|| Error::logic("append_speculative without an open pass"))?;
        if layer >= pending.rows.len() {
            return Err(Error::shape(format!("layer {layer} out of range")));
        }
        if keys.len() != node_ids.len() * h || values.len() != keys.len() {
            return Err(Error::shape(format!(
                "{} node ids but {} key and {} value entries at width {h}",
                node_ids.len(),
                keys.len(),
                values.len()
            )));
        }
        if let Some(&bad) = node_ids.iter().find(|&&n| n >= pending.parents.len()) {
            return Err(Error::logic(format!("node id {bad} is outside the pending tree")));
        }
        if pending.rows[layer].is_some() {
            return Err(Error::logic(format!("layer {layer} already holds rows for this pass")));
        }
        pending.rows[layer] =
            Some(SpecRows { node_ids: node_ids.to_vec(), keys: keys.to_vec(), values: values.to_vec() });
        Ok(())
    }

    /// Speculative key/value row of `node` at `layer`, if stored.
    pub fn speculative_row(&self, layer: usize, node: usize) -> Option<(&[f64], &[f64])> {
        let rows = self.pending.as_ref()?.rows.get(layer)?.as_ref()?;
        let i = rows.node_ids.iter().position(|&n| n == node)?;
        let h = self.hidden;
        Some((&rows.keys[i * h..(i + 1) * h], &rows.values[i * h..(i + 1) * h]))
    }

    /// Keeps the rows of `path` (root first), in path order, and drops the
    /// rest of the pending pass.
    pub fn commit(&mut self, path: &[usize]) -> Result<()> {
        let pending = self.pending.as_ref().ok_or_else(|| Error::logic("commit without a pending pass"))?;
        if path.first() != Some(&0) {
            return Err(Error::logic("accepted path must start at the root"));
        }
        for w in path.windows(2) {
            if pending.parents.get(w[1]).copied().flatten() != Some(w[0]) {
                return Err(Error::logic(format!("node {} is not a child of {}", w[1], w[0])));
            }
        }
        if self.committed + path.len() > self.max_len {
            return Err(Error::capacity("commit exceeds max length"));
        }
        let h = self.hidden;
        let mut picked = Vec::with_capacity(self.layers.len());
        for (l, rows) in pending.rows.iter().enumerate() {
            let rows = rows.as_ref().ok_or_else(|| Error::logic(format!("layer {l} has no rows for this pass")))?;
            let mut idx = Vec::with_capacity(path.len());
            for &node in path {
                let i = rows
                    .node_ids
                    .iter()
                    .position(|&n| n == node)
                    .ok_or_else(|| Error::logic(format!("node {node} has no rows at layer {l} (pruned?)")))?;
                idx.push(i);
            }
            picked.push(idx);
        }
        let pending = self.pending.take().expect("checked above");
        for ((layer, rows), idx) in self.layers.iter_mut().zip(pending.rows).zip(picked) {
            let rows = rows.expect("checked above");
            for i in idx {
                layer.keys.extend_from_slice(&rows.keys[i * h..(i + 1) * h]);
                layer.values.extend_from_slice(&rows.values[i * h..(i + 1) * h]);
            }
        }
        self.committed += path.len();
        Ok(())
    }

    /// Drops the pending pass without committing anything.
    pub fn discard(&mut self) {
        self.pending = None;
    }
}
