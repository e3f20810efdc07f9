//! MTTKRP over a BLCO tensor.
//!
//! Each work-group takes one span of one block and runs two phases. The
//! processing phase decodes the span tile by tile, stably reorders every tile
//! so equal target rows sit next to each other and flags the first element of
//! each run. The computing phase walks the segments, accumulates the scaled
//! Hadamard rows in registers and resolves conflicts either by atomically
//! adding each segment into the output (register strategy) or by merging
//! segments in a per-work-group stash that is flushed into one of several
//! output copies (hierarchical strategy).
//!
//! Modes are 0-based.

use crate::error::{Error, Result};
use crate::exec::{
    self, assignments_from, ConflictResolution, ExecConfig, ExecStats, GlobalOutput,
    OutputHandle, Scratch, WorkAssignment,
};
use crate::format::{compute_batch_table, BlcoTensor};
use crate::linearize::BitLayout;
use crate::tensor::{DenseMatrix, FactorMatrices};

/// One reordered tile. Lanes beyond [`len`](Self::len) are idle.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SegmentedTile {
    order: usize,
    rows: Vec<usize>,
    coords: Vec<u64>,
    values: Vec<f64>,
    flags: Vec<bool>,
}

impl SegmentedTile {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Target-mode row of every lane.
    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    /// Full coordinates of one lane.
    pub fn coords(&self, lane: usize) -> &[u64] {
        &self.coords[lane * self.order..(lane + 1) * self.order]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    /// `[start, end)` lane ranges of the segments, in lane order.
    pub fn segments(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.len();
        (0..n).filter(|&i| self.flags[i]).map(move |start| {
            let end = (start + 1..n).find(|&j| self.flags[j]).unwrap_or(n);
            (start, end)
        })
    }

    pub fn segment_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    fn clear(&mut self, order: usize) {
        self.order = order;
        self.rows.clear();
        self.coords.clear();
        self.values.clear();
        self.flags.clear();
    }
}

/// Destination lane of every lane under a stable sort by row: the number of
/// lanes holding a smaller row plus the number of earlier lanes holding the
/// same row. This is the per-lane histogram rank followed by the bucket
/// prefix sum, fused.
pub fn reorder_lanes(rows: &[usize]) -> Vec<usize> {
    let mut dest = Vec::with_capacity(rows.len());
    reorder_lanes_into(rows, &mut dest);
    dest
}

fn reorder_lanes_into(rows: &[usize], dest: &mut Vec<usize>) {
    dest.clear();
    for (i, &r) in rows.iter().enumerate() {
        let mut d = 0;
        for (j, &o) in rows.iter().enumerate() {
            d += usize::from(o < r || (o == r && j < i));
        }
        dest.push(d);
    }
}

/// Decode staging reused across tiles.
#[derive(Debug, Default)]
struct Staging {
    rows: Vec<usize>,
    coords: Vec<u64>,
    dest: Vec<usize>,
}

fn fill_tile(
    layout: &BitLayout,
    upper: &[u64],
    indices: &[u64],
    values: &[f64],
    mode: usize,
    tile: &mut SegmentedTile,
    staging: &mut Staging,
) {
    let order = layout.order();
    let n = indices.len();
    staging.rows.clear();
    staging.coords.resize(n * order, 0);
    for (lane, &idx) in indices.iter().enumerate() {
        let c = &mut staging.coords[lane * order..(lane + 1) * order];
        layout.delinearize_into(idx, upper, c);
        staging.rows.push(c[mode] as usize);
    }
    reorder_lanes_into(&staging.rows, &mut staging.dest);

    tile.clear(order);
    tile.rows.resize(n, 0);
    tile.coords.resize(n * order, 0);
    tile.values.resize(n, 0.0);
    for lane in 0..n {
        let d = staging.dest[lane];
        tile.rows[d] = staging.rows[lane];
        tile.values[d] = values[lane];
        tile.coords[d * order..(d + 1) * order]
            .copy_from_slice(&staging.coords[lane * order..(lane + 1) * order]);
    }
    tile.flags
        .extend((0..n).map(|i| i == 0 || tile.rows[i] != tile.rows[i - 1]));
}

/// Splits a work-group span of one block into tiles of `tile_size` elements
/// and reorders each one.
pub fn processing_phase(
    layout: &BitLayout,
    upper: &[u64],
    indices: &[u64],
    values: &[f64],
    mode: usize,
    tile_size: usize,
) -> Vec<SegmentedTile> {
    assert!(tile_size >= 1, "tile size must be at least 1");
    assert_eq!(indices.len(), values.len());
    let mut staging = Staging::default();
    indices
        .chunks(tile_size)
        .zip(values.chunks(tile_size))
        .map(|(idx, vals)| {
            let mut tile = SegmentedTile::default();
            fill_tile(layout, upper, idx, vals, mode, &mut tile, &mut staging);
            tile
        })
        .collect()
}

/// Per-segment register state for the computing phase.
#[derive(Debug, Default)]
struct Registers {
    acc: Vec<f64>,
    prod: Vec<f64>,
}

impl Registers {
    /// Sums `value · Π_{m≠mode} A_m[coord_m]` over the lanes of one segment.
    fn accumulate(&mut self, tile: &SegmentedTile, (start, end): (usize, usize), factors: &FactorMatrices, mode: usize) {
        let rank = factors.rank();
        self.acc.clear();
        self.acc.resize(rank, 0.0);
        self.prod.resize(rank, 0.0);
        for lane in start..end {
            self.prod.fill(tile.values[lane]);
            for (m, &c) in tile.coords(lane).iter().enumerate() {
                if m == mode {
                    continue;
                }
                let row = factors.get(m).row(c as usize);
                for (p, &f) in self.prod.iter_mut().zip(row) {
                    *p *= f;
                }
            }
            for (a, &p) in self.acc.iter_mut().zip(&self.prod) {
                *a += p;
            }
        }
    }
}

/// Columns owned by one rank lane: `⌈R / tile_size⌉`.
pub fn columns_per_lane(rank: usize, tile_size: usize) -> usize {
    rank.div_ceil(tile_size.max(1)).max(1)
}

/// One atomic add per rank lane holding at least one column.
fn commit_row(out: &mut OutputHandle<'_>, copy: usize, row: usize, sums: &[f64], cols_per_lane: usize) {
    for (lane, chunk) in sums.chunks(cols_per_lane).enumerate() {
        out.atomic_add(copy, row, lane * cols_per_lane, chunk);
    }
}

/// Adds every segment straight into the single output copy.
pub fn computing_phase_register(
    tiles: &[SegmentedTile],
    factors: &FactorMatrices,
    mode: usize,
    tile_size: usize,
    out: &mut OutputHandle<'_>,
) {
    let mut regs = Registers::default();
    register_inner(tiles, factors, mode, tile_size, out, &mut regs);
}

fn register_inner(
    tiles: &[SegmentedTile],
    factors: &FactorMatrices,
    mode: usize,
    tile_size: usize,
    out: &mut OutputHandle<'_>,
    regs: &mut Registers,
) {
    let cpl = columns_per_lane(factors.rank(), tile_size);
    for tile in tiles {
        for seg in tile.segments() {
            regs.accumulate(tile, seg, factors, mode);
            commit_row(out, 0, tile.rows[seg.0], &regs.acc, cpl);
        }
    }
}

const EMPTY_SLOT: usize = usize::MAX;

/// Direct-mapped row cache in work-group local memory. A row lives in slot
/// `row mod slots`; a different row claiming an occupied slot evicts it.
#[derive(Debug, Clone)]
pub struct Stash {
    rank: usize,
    rows: Vec<usize>,
    sums: Vec<f64>,
    flushes: u64,
}

impl Stash {
    pub fn new(slots: usize, rank: usize) -> Self {
        assert!(slots >= 1, "stash needs at least one slot");
        Stash {
            rank,
            rows: vec![EMPTY_SLOT; slots],
            sums: vec![0.0; slots * rank],
            flushes: 0,
        }
    }

    pub fn slots(&self) -> usize {
        self.rows.len()
    }

    /// Rows evicted or drained so far.
    pub fn flushes(&self) -> u64 {
        self.flushes
    }

    pub fn occupied(&self) -> usize {
        self.rows.iter().filter(|&&r| r != EMPTY_SLOT).count()
    }

    /// Merges a segment result into the stash.
    pub fn accumulate<F>(&mut self, row: usize, partial: &[f64], flush: &mut F)
    where
        F: FnMut(usize, &[f64]),
    {
        debug_assert_eq!(partial.len(), self.rank);
        let slot = row % self.rows.len();
        if self.rows[slot] != row {
            if self.rows[slot] != EMPTY_SLOT {
                self.evict(slot, flush);
            }
            self.rows[slot] = row;
        }
        let sums = &mut self.sums[slot * self.rank..(slot + 1) * self.rank];
        for (s, &p) in sums.iter_mut().zip(partial) {
            *s += p;
        }
    }

    /// Flushes every occupied slot in slot order.
    pub fn drain<F>(&mut self, flush: &mut F)
    where
        F: FnMut(usize, &[f64]),
    {
        for slot in 0..self.rows.len() {
            if self.rows[slot] != EMPTY_SLOT {
                self.evict(slot, flush);
            }
        }
    }

    fn evict<F>(&mut self, slot: usize, flush: &mut F)
    where
        F: FnMut(usize, &[f64]),
    {
        let sums = &mut self.sums[slot * self.rank..(slot + 1) * self.rank];
        flush(self.rows[slot], sums);
        sums.fill(0.0);
        self.rows[slot] = EMPTY_SLOT;
        self.flushes += 1;
    }

    fn clear(&mut self) {
        self.rows.fill(EMPTY_SLOT);
        self.sums.fill(0.0);
        self.flushes = 0;
    }
}

/// Merges segments through `stash`, then drains it into output `copy`.
pub fn computing_phase_hierarchical(
    tiles: &[SegmentedTile],
    factors: &FactorMatrices,
    mode: usize,
    tile_size: usize,
    stash: &mut Stash,
    copy: usize,
    out: &mut OutputHandle<'_>,
) {
    let mut regs = Registers::default();
    hierarchical_inner(tiles, factors, mode, tile_size, stash, copy, out, &mut regs);
}

#[allow(clippy::too_many_arguments)]
fn hierarchical_inner(
    tiles: &[SegmentedTile],
    factors: &FactorMatrices,
    mode: usize,
    tile_size: usize,
    stash: &mut Stash,
    copy: usize,
    out: &mut OutputHandle<'_>,
    regs: &mut Registers,
) {
    let cpl = columns_per_lane(factors.rank(), tile_size);
    let mut flush = |row: usize, sums: &[f64]| commit_row(out, copy, row, sums, cpl);
    for tile in tiles {
        for seg in tile.segments() {
            regs.accumulate(tile, seg, factors, mode);
            stash.accumulate(tile.rows[seg.0], &regs.acc, &mut flush);
        }
    }
    stash.drain(&mut flush);
}

/// Element-wise sum of the output copies, in copy order.
pub fn merge_copies(copies: &[DenseMatrix]) -> Result<DenseMatrix> {
    let first = copies
        .first()
        .ok_or_else(|| Error::Shape("no copies to merge".into()))?;
    let mut out = first.clone();
    for c in &copies[1..] {
        if c.shape() != first.shape() {
            return Err(Error::Shape(format!(
                "copy shape {:?} differs from {:?}",
                c.shape(),
                first.shape()
            )));
        }
        out.add_assign(c);
    }
    Ok(out)
}

/// Hierarchical iff the target mode is shorter than the compute-unit count.
pub fn choose_strategy(target_mode_length: u64, config: &ExecConfig) -> ConflictResolution {
    if target_mode_length < config.num_compute_units as u64 {
        ConflictResolution::Hierarchical
    } else {
        ConflictResolution::Register
    }
}

/// The configured strategy, with `Auto` resolved for this mode length.
pub fn resolve_strategy(target_mode_length: u64, config: &ExecConfig) -> ConflictResolution {
    match config.strategy {
        ConflictResolution::Auto => choose_strategy(target_mode_length, config),
        s => s,
    }
}

/// Work-group local memory of the kernel.
#[derive(Debug)]
pub(crate) struct KernelScratch {
    tiles: Vec<SegmentedTile>,
    used: usize,
    staging: Staging,
    regs: Registers,
    stash: Option<Stash>,
}

impl Scratch for KernelScratch {
    fn reset(&mut self) {
        self.used = 0;
        if let Some(s) = &mut self.stash {
            s.clear();
        }
    }
}

/// A configured MTTKRP launch for one mode, independent of where the block
/// data lives.
pub(crate) struct Kernel<'a> {
    layout: &'a BitLayout,
    factors: &'a FactorMatrices,
    mode: usize,
    strategy: ConflictResolution,
    tile_size: usize,
    copies: usize,
    stash_slots: usize,
}

impl<'a> Kernel<'a> {
    pub(crate) fn new(
        layout: &'a BitLayout,
        factors: &'a FactorMatrices,
        mode: usize,
        config: &ExecConfig,
    ) -> Result<Self> {
        config.validate()?;
        if mode >= layout.order() {
            return Err(Error::Shape(format!(
                "mode {mode} out of range for an order-{} tensor",
                layout.order()
            )));
        }
        factors.check_conforms(layout.dims())?;
        let strategy = resolve_strategy(layout.dims()[mode], config);
        Ok(Kernel {
            layout,
            factors,
            mode,
            strategy,
            tile_size: config.tile_size,
            copies: match strategy {
                ConflictResolution::Hierarchical => config.num_factor_copies,
                _ => 1,
            },
            stash_slots: config.stash_slots,
        })
    }

    pub(crate) fn strategy(&self) -> ConflictResolution {
        self.strategy
    }

    pub(crate) fn output(&self) -> GlobalOutput {
        GlobalOutput::new(
            self.copies,
            self.layout.dims()[self.mode] as usize,
            self.factors.rank(),
        )
    }

    pub(crate) fn output_bytes(&self) -> u64 {
        self.copies as u64 * self.layout.dims()[self.mode] * self.factors.rank() as u64 * 8
    }

    pub(crate) fn scratch(&self) -> KernelScratch {
        KernelScratch {
            tiles: Vec::new(),
            used: 0,
            staging: Staging::default(),
            regs: Registers::default(),
            stash: (self.strategy == ConflictResolution::Hierarchical)
                .then(|| Stash::new(self.stash_slots, self.factors.rank())),
        }
    }

    /// Runs one work-group over `indices`/`values`, a span of a block whose
    /// upper coordinate bits are `upper`.
    pub(crate) fn run(
        &self,
        workgroup: usize,
        upper: &[u64],
        indices: &[u64],
        values: &[f64],
        s: &mut KernelScratch,
        out: &mut OutputHandle<'_>,
    ) {
        for (idx, vals) in indices.chunks(self.tile_size).zip(values.chunks(self.tile_size)) {
            if s.used == s.tiles.len() {
                s.tiles.push(SegmentedTile::default());
            }
            fill_tile(self.layout, upper, idx, vals, self.mode, &mut s.tiles[s.used], &mut s.staging);
            s.used += 1;
        }
        let tiles = &s.tiles[..s.used];
        match &mut s.stash {
            Some(stash) => hierarchical_inner(
                tiles,
                self.factors,
                self.mode,
                self.tile_size,
                stash,
                workgroup % self.copies,
                out,
                &mut s.regs,
            ),
            None => register_inner(tiles, self.factors, self.mode, self.tile_size, out, &mut s.regs),
        }
    }

    /// Collapses the output copies into `M`.
    pub(crate) fn finish(&self, output: GlobalOutput) -> Result<DenseMatrix> {
        merge_copies(&output.into_copies())
    }
}

/// Result of an instrumented run.
#[derive(Debug, Clone)]
pub struct MttkrpRun {
    pub output: DenseMatrix,
    pub strategy: ConflictResolution,
    pub stats: ExecStats,
}

/// `M = X_(n) · (⊙_{m≠n} A_m)` for a 0-based `mode`.
pub fn mttkrp(
    tensor: &BlcoTensor,
    factors: &FactorMatrices,
    mode: usize,
    config: &ExecConfig,
) -> Result<DenseMatrix> {
    mttkrp_with_stats(tensor, factors, mode, config).map(|r| r.output)
}

pub fn mttkrp_with_stats(
    tensor: &BlcoTensor,
    factors: &FactorMatrices,
    mode: usize,
    config: &ExecConfig,
) -> Result<MttkrpRun> {
    let kernel = Kernel::new(tensor.layout(), factors, mode, config)?;
    let span = config.elements_per_workgroup();
    let owned;
    let table = if tensor.batch_table().span() == span {
        tensor.batch_table()
    } else {
        owned = compute_batch_table(tensor, span);
        &owned
    };
    let assignments = assignments_from(table.entries(), 0);
    let output = kernel.output();
    let blocks = tensor.blocks();
    let stats = exec::run_workgroups(
        &assignments,
        config,
        &output,
        || kernel.scratch(),
        |a: &WorkAssignment, s, h| {
            let b = &blocks[a.block];
            let range = a.offset..a.offset + a.len;
            kernel.run(a.id, b.upper_coords(), &b.linear_indices()[range.clone()], &b.values()[range], s, h);
        },
    )?;
    Ok(MttkrpRun {
        output: kernel.finish(output)?,
        strategy: kernel.strategy(),
        stats,
    })
}
