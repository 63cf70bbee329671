use std::ops::Range;

use crate::error::{Error, Result};

/// Append-only store of raw (un-positioned) keys and values for one head,
/// with the absolute token index of every entry.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HeadCache {
    dim: usize,
    keys: Vec<f64>,
    values: Vec<f64>,
    indices: Vec<usize>,
}

/// Borrowed slice of a [`HeadCache`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KvView<'a> {
    pub dim: usize,
    pub keys: &'a [f64],
    pub values: &'a [f64],
    pub indices: &'a [usize],
}

impl KvView<'_> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn key(&self, n: usize) -> &[f64] {
        &self.keys[n * self.dim..(n + 1) * self.dim]
    }

    pub fn value(&self, n: usize) -> &[f64] {
        &self.values[n * self.dim..(n + 1) * self.dim]
    }
}

impl HeadCache {
    pub fn new(dim: usize) -> Self {
        HeadCache {
            dim,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Appends `indices.len()` rows. Indices must be strictly increasing and
    /// follow everything already stored.
    pub fn append(&mut self, keys: &[f64], values: &[f64], indices: &[usize]) -> Result<()> {
        let n = indices.len();
        if keys.len() != n * self.dim || values.len() != n * self.dim {
            return Err(Error::DimensionMismatch(format!(
                "appending {n} rows of dim {} but got {} keys / {} values",
                self.dim,
                keys.len(),
                values.len()
            )));
        }
        let mut last = self.indices.last().copied();
        for &next in indices {
            if let Some(prev) = last {
                if next <= prev {
                    return Err(Error::NonMonotonicIndex { last: prev, next });
                }
            }
            last = Some(next);
        }
        self.keys.extend_from_slice(keys);
        self.values.extend_from_slice(values);
        self.indices.extend_from_slice(indices);
        Ok(())
    }

    /// Entries whose absolute index lies in `span`.
    pub fn view(&self, span: Range<usize>) -> KvView<'_> {
        let lo = self.indices.partition_point(|&i| i < span.start);
        let hi = self.indices.partition_point(|&i| i < span.end);
        KvView {
            dim: self.dim,
            keys: &self.keys[lo * self.dim..hi * self.dim],
            values: &self.values[lo * self.dim..hi * self.dim],
            indices: &self.indices[lo..hi],
        }
    }

    pub fn full(&self) -> KvView<'_> {
        self.view(0..usize::MAX)
    }
}

/// Keys and values produced by one processed segment, `[layer][head]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SegmentKv {
    pub indices: Vec<usize>,
    pub layers: Vec<Vec<(Vec<f64>, Vec<f64>)>>,
}

/// Per-layer, per-head caches.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KvCache {
    layers: Vec<Vec<HeadCache>>,
}

impl KvCache {
    pub fn new(num_layers: usize, num_heads: usize, head_dim: usize) -> Self {
        KvCache {
            layers: (0..num_layers)
                .map(|_| (0..num_heads).map(|_| HeadCache::new(head_dim)).collect())
                .collect(),
        }
    }

    /// Empty cache shaped after a model's layers.
    pub fn for_model(weights: &super::ModelWeights) -> Self {
        KvCache {
            layers: weights
                .layers
                .iter()
                .map(|l| l.heads.iter().map(|h| HeadCache::new(h.head_dim())).collect())
                .collect(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn head(&self, layer: usize, head: usize) -> &HeadCache {
        &self.layers[layer][head]
    }

    /// Token count, read from the first head (all heads hold the same tokens).
    pub fn len(&self) -> usize {
        self.layers.first().and_then(|l| l.first()).map_or(0, HeadCache::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn indices(&self) -> &[usize] {
        self.layers
            .first()
            .and_then(|l| l.first())
            .map_or(&[], |h| h.indices())
    }

    pub fn next_index(&self) -> usize {
        self.indices().last().map_or(0, |i| i + 1)
    }

    pub fn append(&mut self, layer: usize, head: usize, keys: &[f64], values: &[f64], indices: &[usize]) -> Result<()> {
        self.layers[layer][head].append(keys, values, indices)
    }

    /// Publishes a processed segment to every layer and head.
    pub fn append_segment(&mut self, kv: &SegmentKv) -> Result<()> {
        if kv.layers.len() != self.layers.len() {
            return Err(Error::DimensionMismatch(format!(
                "segment has {} layers, cache has {}",
                kv.layers.len(),
                self.layers.len()
            )));
        }
        for (store, produced) in self.layers.iter_mut().zip(&kv.layers) {
            for (cache, (keys, values)) in store.iter_mut().zip(produced) {
                cache.append(keys, values, &kv.indices)?;
            }
        }
        Ok(())
    }

    pub fn view(&self, layer: usize, head: usize, span: Range<usize>) -> KvView<'_> {
        self.layers[layer][head].view(span)
    }

    /// Bytes held by keys and values.
    pub fn bytes(&self) -> usize {
        self.layers
            .iter()
            .flatten()
            .map(|h| (h.keys.len() + h.values.len()) * std::mem::size_of::<f64>())
            .sum()
    }
}

/// Cached context visible to a segment: every head's entries inside `span`.
#[derive(Debug, Clone, Copy)]
pub struct CacheSpan<'a> {
    pub cache: &'a KvCache,
    pub span: (usize, usize),
}

impl<'a> CacheSpan<'a> {
    pub fn view(&self, layer: usize, head: usize) -> KvView<'a> {
        self.cache.view(layer, head, self.span.0..self.span.1)
    }
}
