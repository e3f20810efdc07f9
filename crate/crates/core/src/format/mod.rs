//! The blocked linearized coordinate tensor.
//!
//! Construction linearizes every element, stable-sorts by the full interleaved
//! index, groups runs of equal block key into blocks, chunks blocks that
//! exceed the element limit and finally tiles the blocks into work-group
//! spans for batched launches.

mod io;

use std::time::{Duration, Instant};

pub use io::{
    deserialize_blco, serialize_blco, BlcoHeader, BlcoReader, BlockRecordHeader, FORMAT_VERSION,
    MAGIC,
};

use crate::error::{Error, Result};
use crate::exec::ExecConfig;
use crate::linearize::{BitLayout, DEFAULT_TARGET_BITS};
use crate::par::{self, Backend};
use crate::tensor::SparseTensorCoo;

/// Default element limit per block, 2^27.
pub const DEFAULT_MAX_NNZ_PER_BLOCK: u64 = 1 << 27;

/// Bytes of one stored element: a `u64` index and an `f64` value.
pub const ELEMENT_BYTES: u64 = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct BlcoBlock {
    key: u64,
    key_per_mode: Vec<u64>,
    upper: Vec<u64>,
    indices: Vec<u64>,
    values: Vec<f64>,
}

impl BlcoBlock {
    pub(crate) fn new(layout: &BitLayout, key: u64, indices: Vec<u64>, values: Vec<f64>) -> Self {
        debug_assert_eq!(indices.len(), values.len());
        BlcoBlock {
            key,
            key_per_mode: layout.key_per_mode(key),
            upper: layout.key_upper_coords(key),
            indices,
            values,
        }
    }

    /// Packed block key (the stripped top bits of the interleaved index).
    pub fn key(&self) -> u64 {
        self.key
    }

    /// Stripped bits of each mode as small integers.
    pub fn key_per_mode(&self) -> &[u64] {
        &self.key_per_mode
    }

    /// Stripped bits of each mode shifted into coordinate position, ready to
    /// be OR-ed with the decoded field.
    pub fn upper_coords(&self) -> &[u64] {
        &self.upper
    }

    pub fn linear_indices(&self) -> &[u64] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn size_bytes(&self) -> u64 {
        self.nnz() as u64 * ELEMENT_BYTES
    }
}

/// One work-group span: a slice of one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchEntry {
    pub block: usize,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchTable {
    span: usize,
    entries: Vec<BatchEntry>,
}

impl BatchTable {
    /// Elements per work-group the table was built for.
    pub fn span(&self) -> usize {
        self.span
    }

    pub fn entries(&self) -> &[BatchEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Tiles block lengths into spans of at most `span` elements. Spans never
/// cross a block boundary.
pub fn tile_blocks<I>(block_lens: I, span: usize) -> Vec<BatchEntry>
where
    I: IntoIterator<Item = usize>,
{
    assert!(span >= 1, "work-group span must be at least 1");
    let mut entries = Vec::new();
    for (block, len) in block_lens.into_iter().enumerate() {
        let mut offset = 0;
        while offset < len {
            let n = span.min(len - offset);
            entries.push(BatchEntry { block, offset, len: n });
            offset += n;
        }
    }
    entries
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlcoTensor {
    layout: BitLayout,
    max_nnz_per_block: u64,
    blocks: Vec<BlcoBlock>,
    total_nnz: u64,
    batch: BatchTable,
}

/// Options for [`build_blco`].
#[derive(Debug, Clone, Copy)]
pub struct BuildOptions {
    pub target_bits: u32,
    pub max_nnz_per_block: u64,
    /// Elements per work-group used for the precomputed batch table.
    pub batch_span: usize,
    pub backend: Backend,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            target_bits: DEFAULT_TARGET_BITS,
            max_nnz_per_block: DEFAULT_MAX_NNZ_PER_BLOCK,
            batch_span: ExecConfig::default().elements_per_workgroup(),
            backend: Backend::default(),
        }
    }
}

impl BuildOptions {
    pub fn new(target_bits: u32, max_nnz_per_block: u64) -> Self {
        BuildOptions {
            target_bits,
            max_nnz_per_block,
            ..Self::default()
        }
    }
}

/// Wall time of each construction stage.
#[derive(Debug, Clone, Copy, Default)]
pub struct BuildTimings {
    pub sort: Duration,
    pub block: Duration,
    pub reencode: Duration,
    pub batch: Duration,
}

/// Builds a BLCO tensor from COO input.
pub fn build_blco(coo: &SparseTensorCoo, target_bits: u32, max_nnz_per_block: u64) -> Result<BlcoTensor> {
    build_blco_with(coo, &BuildOptions::new(target_bits, max_nnz_per_block)).map(|(t, _)| t)
}

/// [`build_blco`] with every knob exposed, returning stage timings.
pub fn build_blco_with(
    coo: &SparseTensorCoo,
    opts: &BuildOptions,
) -> Result<(BlcoTensor, BuildTimings)> {
    if opts.max_nnz_per_block == 0 {
        return Err(Error::Config("max_nnz_per_block must be at least 1".into()));
    }
    let layout = BitLayout::new(coo.dims(), opts.target_bits)?;
    let order = coo.order();
    let nnz = coo.nnz();
    let mut timings = BuildTimings::default();
    if nnz > u32::MAX as usize {
        return Err(Error::Config("more than 2^32 elements per build".into()));
    }

    // Linearize and stable-sort by the full interleaved index.
    let start = Instant::now();
    let mut elements: Vec<(u128, u32)> = par::map_range(opts.backend, nnz, |e| {
        let mut coord = [0u64; 16];
        let alto = if order <= coord.len() {
            for m in 0..order {
                coord[m] = coo.indices(m)[e];
            }
            layout.linearize_unchecked(&coord[..order])
        } else {
            layout.linearize_unchecked(&coo.coord(e))
        };
        (alto, e as u32)
    });
    par::sort_by_key(opts.backend, &mut elements, |&(alto, _)| alto);
    timings.sort = start.elapsed();

    // Group into key runs, chunk oversized runs.
    let start = Instant::now();
    let encoded = layout.encoded_bits();
    let key_of = |alto: u128| -> u64 {
        if layout.stripped_bits() == 0 {
            0
        } else {
            (alto >> encoded) as u64
        }
    };
    let max = opts.max_nnz_per_block.min(usize::MAX as u64) as usize;
    let mut ranges: Vec<(u64, usize, usize)> = Vec::new();
    let mut begin = 0;
    while begin < nnz {
        let key = key_of(elements[begin].0);
        let mut end = begin + 1;
        while end < nnz && key_of(elements[end].0) == key {
            end += 1;
        }
        let mut chunk = begin;
        while chunk < end {
            let stop = chunk.saturating_add(max).min(end);
            ranges.push((key, chunk, stop));
            chunk = stop;
        }
        begin = end;
    }
    timings.block = start.elapsed();

    // Re-encode each block's elements into contiguous fields.
    let start = Instant::now();
    let values = coo.values();
    let reencoded: Vec<u64> = par::map_range(opts.backend, nnz, |i| {
        layout.split_block_key(elements[i].0).1
    });
    let blocks: Vec<BlcoBlock> = ranges
        .iter()
        .map(|&(key, lo, hi)| {
            let vals = elements[lo..hi].iter().map(|&(_, e)| values[e as usize]).collect();
            BlcoBlock::new(&layout, key, reencoded[lo..hi].to_vec(), vals)
        })
        .collect();
    timings.reencode = start.elapsed();

    let start = Instant::now();
    let tensor = BlcoTensor::from_parts(layout, opts.max_nnz_per_block, blocks, opts.batch_span)?;
    timings.batch = start.elapsed();
    Ok((tensor, timings))
}

impl BlcoTensor {
    pub(crate) fn from_parts(
        layout: BitLayout,
        max_nnz_per_block: u64,
        blocks: Vec<BlcoBlock>,
        batch_span: usize,
    ) -> Result<Self> {
        if batch_span == 0 {
            return Err(Error::Config("work-group span must be at least 1".into()));
        }
        let total_nnz = blocks.iter().map(|b| b.nnz() as u64).sum();
        let batch = BatchTable {
            span: batch_span,
            entries: tile_blocks(blocks.iter().map(BlcoBlock::nnz), batch_span),
        };
        Ok(BlcoTensor {
            layout,
            max_nnz_per_block,
            blocks,
            total_nnz,
            batch,
        })
    }

    pub fn layout(&self) -> &BitLayout {
        &self.layout
    }

    pub fn dims(&self) -> &[u64] {
        self.layout.dims()
    }

    pub fn order(&self) -> usize {
        self.layout.order()
    }

    pub fn max_nnz_per_block(&self) -> u64 {
        self.max_nnz_per_block
    }

    pub fn blocks(&self) -> &[BlcoBlock] {
        &self.blocks
    }

    pub fn total_nnz(&self) -> u64 {
        self.total_nnz
    }

    pub fn batch_table(&self) -> &BatchTable {
        &self.batch
    }

    /// Size of all stored elements in bytes.
    pub fn element_bytes(&self) -> u64 {
        self.total_nnz * ELEMENT_BYTES
    }

    /// Recomputes the batch table for a different work-group span.
    pub fn with_batch_span(mut self, span: usize) -> Self {
        self.batch = compute_batch_table(&self, span);
        self
    }

    /// Decodes every element back to coordinate form, in storage order.
    pub fn to_coo(&self) -> Result<SparseTensorCoo> {
        let order = self.order();
        let mut indices = vec![Vec::with_capacity(self.total_nnz as usize); order];
        let mut values = Vec::with_capacity(self.total_nnz as usize);
        let mut coord = vec![0u64; order];
        for block in &self.blocks {
            for (&idx, &v) in block.indices.iter().zip(&block.values) {
                self.layout.delinearize_into(idx, &block.upper, &mut coord);
                for (m, &c) in coord.iter().enumerate() {
                    indices[m].push(c);
                }
                values.push(v);
            }
        }
        SparseTensorCoo::new(self.dims().to_vec(), indices, values)
    }

    /// Checks every structural invariant of the format.
    pub fn validate(&self) -> Result<()> {
        let layout = &self.layout;
        let encoded = layout.encoded_bits();
        let stripped = layout.stripped_bits();
        let mut prev: Option<u128> = None;
        let mut coord = vec![0u64; self.order()];
        let mut sum = 0u64;
        for (b, block) in self.blocks.iter().enumerate() {
            if block.nnz() == 0 {
                return Err(Error::Corrupt(format!("block {b} is empty")));
            }
            if block.nnz() as u64 > self.max_nnz_per_block {
                return Err(Error::Corrupt(format!(
                    "block {b} holds {} elements, limit is {}",
                    block.nnz(),
                    self.max_nnz_per_block
                )));
            }
            if stripped < 64 && block.key >> stripped != 0 {
                return Err(Error::Corrupt(format!("block {b} key exceeds {stripped} bits")));
            }
            for &idx in &block.indices {
                if encoded < 64 && idx >> encoded != 0 {
                    return Err(Error::Corrupt(format!(
                        "block {b} index {idx} exceeds {encoded} bits"
                    )));
                }
                layout.delinearize_into(idx, &block.upper, &mut coord);
                layout
                    .check_coords(&coord)
                    .map_err(|e| Error::Corrupt(format!("block {b}: {e}")))?;
                let alto = layout.linearize_unchecked(&coord);
                if prev.is_some_and(|p| alto <= p) {
                    return Err(Error::Corrupt(format!(
                        "block {b} breaks ascending element order"
                    )));
                }
                prev = Some(alto);
            }
            sum += block.nnz() as u64;
        }
        if sum != self.total_nnz {
            return Err(Error::Corrupt("element count mismatch".into()));
        }
        Ok(())
    }
}

/// Tiles the tensor's blocks into work-group spans of `elements_per_workgroup`.
pub fn compute_batch_table(tensor: &BlcoTensor, elements_per_workgroup: usize) -> BatchTable {
    BatchTable {
        span: elements_per_workgroup,
        entries: tile_blocks(tensor.blocks.iter().map(BlcoBlock::nnz), elements_per_workgroup),
    }
}
