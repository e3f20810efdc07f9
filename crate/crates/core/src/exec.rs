//! Simulated work-group execution.
//!
//! A kernel is a function over one work-group. Work-groups are independent:
//! each gets private scratch (the model of local memory) and talks to other
//! work-groups only through commutative atomic adds on a [`GlobalOutput`].
//! Inside a work-group the kernel runs its threads as plain loops in phase
//! order, which is what a barrier between phases guarantees on hardware.
//!
//! Work-groups are spread over the host pool. In deterministic mode every
//! work-group records its atomic updates and the logs are committed in
//! ascending work-group id, so results are bit-identical for any thread count.

use std::any::Any;
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::BatchEntry;
use crate::par::{self, Backend};
use crate::tensor::DenseMatrix;

/// Largest tile the emulated sub-group exchange supports.
pub const MAX_TILE_SIZE: usize = 64;

/// Work-groups recorded before a deterministic commit.
pub(crate) const COMMIT_WINDOW: usize = 1024;

/// How segment results reach global memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConflictResolution {
    /// Pick per mode with [`crate::mttkrp::choose_strategy`].
    Auto,
    Register,
    Hierarchical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecConfig {
    /// Threads per work-group.
    pub workgroup_size: usize,
    /// Threads per tile; divides `workgroup_size`.
    pub tile_size: usize,
    /// Non-zero elements per thread.
    pub coarsening: usize,
    /// Simulated subslice / SM count.
    pub num_compute_units: usize,
    /// Global output copies used by hierarchical conflict resolution.
    pub num_factor_copies: usize,
    /// Local-memory stash rows per work-group.
    pub stash_slots: usize,
    pub deterministic: bool,
    pub strategy: ConflictResolution,
    pub backend: Backend,
}

impl Default for ExecConfig {
    fn default() -> Self {
        ExecConfig {
            workgroup_size: 128,
            tile_size: 32,
            coarsening: 4,
            num_compute_units: 108,
            num_factor_copies: 4,
            stash_slots: 32,
            deterministic: false,
            strategy: ConflictResolution::Auto,
            backend: Backend::default(),
        }
    }
}

impl ExecConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("workgroup_size", self.workgroup_size),
            ("tile_size", self.tile_size),
            ("coarsening", self.coarsening),
            ("num_compute_units", self.num_compute_units),
            ("num_factor_copies", self.num_factor_copies),
            ("stash_slots", self.stash_slots),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.tile_size > self.workgroup_size || !self.workgroup_size.is_multiple_of(self.tile_size) {
            return Err(Error::Config(format!(
                "tile size {} must divide work-group size {}",
                self.tile_size, self.workgroup_size
            )));
        }
        if self.tile_size > MAX_TILE_SIZE {
            return Err(Error::Config(format!(
                "tile size {} exceeds sub-group width {MAX_TILE_SIZE}",
                self.tile_size
            )));
        }
        Ok(())
    }

    /// Elements covered by one work-group: `workgroup_size × coarsening`.
    pub fn elements_per_workgroup(&self) -> usize {
        self.workgroup_size * self.coarsening
    }
}

/// The slice of one block handled by one work-group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkAssignment {
    /// Global work-group id.
    pub id: usize,
    pub block: usize,
    pub offset: usize,
    pub len: usize,
}

/// Numbers batch-table spans as work-groups starting at `first_id`.
pub fn assignments_from(entries: &[BatchEntry], first_id: usize) -> Vec<WorkAssignment> {
    entries
        .iter()
        .enumerate()
        .map(|(i, e)| WorkAssignment {
            id: first_id + i,
            block: e.block,
            offset: e.offset,
            len: e.len,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutputShape {
    pub copies: usize,
    pub rows: usize,
    pub cols: usize,
}

impl OutputShape {
    fn check(&self, copy: usize, row: usize, col: usize, len: usize) {
        assert!(
            copy < self.copies && row < self.rows && col + len <= self.cols,
            "atomic add out of bounds: copy {copy} row {row} cols {col}..{} of {self:?}",
            col + len
        );
    }
}

/// `copies` dense matrices in global memory, updated with atomic adds.
pub struct GlobalOutput {
    shape: OutputShape,
    cells: Vec<AtomicU64>,
}

fn atomic_add_f64(cell: &AtomicU64, v: f64) {
    let mut cur = cell.load(Ordering::Relaxed);
    loop {
        let next = (f64::from_bits(cur) + v).to_bits();
        match cell.compare_exchange_weak(cur, next, Ordering::Relaxed, Ordering::Relaxed) {
            Ok(_) => return,
            Err(seen) => cur = seen,
        }
    }
}

impl GlobalOutput {
    pub fn new(copies: usize, rows: usize, cols: usize) -> Self {
        let n = copies * rows * cols;
        GlobalOutput {
            shape: OutputShape { copies, rows, cols },
            cells: (0..n).map(|_| AtomicU64::new(0f64.to_bits())).collect(),
        }
    }

    pub fn shape(&self) -> OutputShape {
        self.shape
    }

    pub fn size_bytes(&self) -> u64 {
        self.cells.len() as u64 * 8
    }

    fn base(&self, copy: usize, row: usize) -> usize {
        (copy * self.shape.rows + row) * self.shape.cols
    }

    /// Adds `values` into `copy[row, col..col + values.len()]`.
    pub fn atomic_add(&self, copy: usize, row: usize, col: usize, values: &[f64]) {
        self.shape.check(copy, row, col, values.len());
        let base = self.base(copy, row) + col;
        for (cell, &v) in self.cells[base..base + values.len()].iter().zip(values) {
            atomic_add_f64(cell, v);
        }
    }

    /// Replays a recorded log in order.
    pub fn apply(&self, log: &CommitLog) {
        let mut at = 0;
        for rec in &log.records {
            let len = rec.len as usize;
            self.atomic_add(
                rec.copy as usize,
                rec.row as usize,
                rec.col as usize,
                &log.values[at..at + len],
            );
            at += len;
        }
    }

    pub fn copy_matrix(&self, copy: usize) -> DenseMatrix {
        let (rows, cols) = (self.shape.rows, self.shape.cols);
        let base = self.base(copy, 0);
        let data = self.cells[base..base + rows * cols]
            .iter()
            .map(|c| f64::from_bits(c.load(Ordering::Relaxed)))
            .collect();
        DenseMatrix::from_raw(rows, cols, data)
    }

    pub fn into_copies(self) -> Vec<DenseMatrix> {
        (0..self.shape.copies).map(|c| self.copy_matrix(c)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct CommitRecord {
    copy: u32,
    row: u64,
    col: u32,
    len: u32,
}

/// Atomic updates recorded by one work-group, in issue order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CommitLog {
    records: Vec<CommitRecord>,
    values: Vec<f64>,
}

impl CommitLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

enum Target<'a> {
    Direct(&'a GlobalOutput),
    Record(&'a mut CommitLog),
}

/// A work-group's view of global memory. Every call to
/// [`atomic_add`](Self::atomic_add) counts as one atomic commit.
pub struct OutputHandle<'a> {
    shape: OutputShape,
    target: Target<'a>,
    commits: u64,
}

impl<'a> OutputHandle<'a> {
    pub fn direct(output: &'a GlobalOutput) -> Self {
        OutputHandle {
            shape: output.shape,
            target: Target::Direct(output),
            commits: 0,
        }
    }

    pub fn recording(shape: OutputShape, log: &'a mut CommitLog) -> Self {
        OutputHandle {
            shape,
            target: Target::Record(log),
            commits: 0,
        }
    }

    pub fn shape(&self) -> OutputShape {
        self.shape
    }

    pub fn atomic_add(&mut self, copy: usize, row: usize, col: usize, values: &[f64]) {
        self.commits += 1;
        match &mut self.target {
            Target::Direct(out) => out.atomic_add(copy, row, col, values),
            Target::Record(log) => {
                self.shape.check(copy, row, col, values.len());
                log.records.push(CommitRecord {
                    copy: copy as u32,
                    row: row as u64,
                    col: col as u32,
                    len: values.len() as u32,
                });
                log.values.extend_from_slice(values);
            }
        }
    }

    pub fn commits(&self) -> u64 {
        self.commits
    }
}

/// Per-work-group local memory. Reset before each work-group runs.
pub trait Scratch: Send {
    fn reset(&mut self);
}

impl Scratch for () {
    fn reset(&mut self) {}
}

impl<T: Send> Scratch for Vec<T> {
    fn reset(&mut self) {
        self.clear();
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExecStats {
    pub workgroups: usize,
    pub atomic_commits: u64,
}

impl ExecStats {
    pub fn merge(&mut self, other: ExecStats) {
        self.workgroups += other.workgroups;
        self.atomic_commits += other.atomic_commits;
    }
}

fn panic_message(payload: Box<dyn Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "non-string panic payload".to_string()
    }
}

fn run_one<S, F>(
    body: &F,
    asg: &WorkAssignment,
    scratch: &mut S,
    handle: &mut OutputHandle<'_>,
) -> Result<()>
where
    S: Scratch,
    F: Fn(&WorkAssignment, &mut S, &mut OutputHandle<'_>) + Sync,
{
    scratch.reset();
    panic::catch_unwind(AssertUnwindSafe(|| body(asg, scratch, handle))).map_err(|payload| {
        Error::KernelPanic {
            workgroup: asg.id,
            message: panic_message(payload),
        }
    })
}

/// Runs `body` once per assignment.
///
/// Without `deterministic`, work-groups add straight into `output` in
/// whatever order the pool runs them. With it, updates are recorded and
/// committed in ascending assignment order.
pub fn run_workgroups<S, I, F>(
    assignments: &[WorkAssignment],
    config: &ExecConfig,
    output: &GlobalOutput,
    init: I,
    body: F,
) -> Result<ExecStats>
where
    S: Scratch,
    I: Fn() -> S + Sync + Send,
    F: Fn(&WorkAssignment, &mut S, &mut OutputHandle<'_>) + Sync + Send,
{
    config.validate()?;
    let mut stats = ExecStats::default();
    if config.deterministic {
        for window in assignments.chunks(COMMIT_WINDOW) {
            let (logs, st) = record_workgroups(window, config, output.shape, &init, &body)?;
            for log in &logs {
                output.apply(log);
            }
            stats.merge(st);
        }
        return Ok(stats);
    }
    let commits = AtomicU64::new(0);
    par::try_for_each_init(config.backend, assignments, &init, |scratch, asg| {
        let mut handle = OutputHandle::direct(output);
        run_one(&body, asg, scratch, &mut handle)?;
        commits.fetch_add(handle.commits, Ordering::Relaxed);
        Ok::<_, Error>(())
    })?;
    stats.workgroups = assignments.len();
    stats.atomic_commits = commits.into_inner();
    Ok(stats)
}

/// Runs every work-group against a private log instead of global memory.
/// Logs come back in assignment order.
pub fn record_workgroups<S, I, F>(
    assignments: &[WorkAssignment],
    config: &ExecConfig,
    shape: OutputShape,
    init: I,
    body: F,
) -> Result<(Vec<CommitLog>, ExecStats)>
where
    S: Scratch,
    I: Fn() -> S + Sync + Send,
    F: Fn(&WorkAssignment, &mut S, &mut OutputHandle<'_>) + Sync + Send,
{
    config.validate()?;
    let results = par::try_map_init(config.backend, assignments, &init, |scratch, asg| {
        let mut log = CommitLog::default();
        let mut handle = OutputHandle::recording(shape, &mut log);
        run_one(&body, asg, scratch, &mut handle)?;
        let commits = handle.commits;
        Ok::<_, Error>((log, commits))
    })?;
    let stats = ExecStats {
        workgroups: assignments.len(),
        atomic_commits: results.iter().map(|r| r.1).sum(),
    };
    Ok((results.into_iter().map(|r| r.0).collect(), stats))
}

/// Lane `i` reads lane `i - delta`; lanes below `delta` keep their value.
pub fn shuffle_up<T: Copy>(values: &[T], delta: usize) -> Vec<T> {
    (0..values.len())
        .map(|i| if i >= delta { values[i - delta] } else { values[i] })
        .collect()
}

/// Every lane reads lane `src`.
pub fn broadcast<T: Copy>(values: &[T], src: usize) -> Result<T> {
    values.get(src).copied().ok_or(Error::LaneOutOfRange {
        lane: src,
        tile: values.len(),
    })
}

/// Moves `values[i]` to lane `target_lanes[i]`.
pub fn tile_exchange<T: Copy>(values: &[T], target_lanes: &[usize]) -> Result<Vec<T>> {
    let n = values.len();
    if target_lanes.len() != n {
        return Err(Error::Shape(format!(
            "{} target lanes for {n} values",
            target_lanes.len()
        )));
    }
    let mut out: Vec<Option<T>> = vec![None; n];
    for (&v, &t) in values.iter().zip(target_lanes) {
        let slot = out
            .get_mut(t)
            .ok_or(Error::LaneOutOfRange { lane: t, tile: n })?;
        if slot.is_some() {
            return Err(Error::LaneConflict { lane: t });
        }
        *slot = Some(v);
    }
    Ok(out.into_iter().map(|v| v.expect("permutation fills every lane")).collect())
}

/// Exclusive scan across a tile, computed with log-step `shuffle_up` adds.
pub fn tile_prefix_sum(counts: &[u32]) -> Vec<u32> {
    let n = counts.len();
    let mut inclusive = counts.to_vec();
    let mut delta = 1;
    while delta < n {
        let up = shuffle_up(&inclusive, delta);
        for lane in delta..n {
            inclusive[lane] += up[lane];
        }
        delta *= 2;
    }
    let mut exclusive = shuffle_up(&inclusive, 1);
    if let Some(first) = exclusive.first_mut() {
        *first = 0;
    }
    exclusive
}
