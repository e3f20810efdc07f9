//! MTTKRP under a device memory budget.
//!
//! Factor matrices and the output stay resident for the whole run. Blocks are
//! packed in order into batches that fit one queue reservation, and batch `i`
//! goes to queue `i mod Q`. Every queue owns one staging buffer, allocated
//! once at reservation size, plus a staging worker that fills it (the
//! simulated host-to-device transfer) and a compute worker that runs the
//! batch's work-groups. While one queue computes, the others stage.
//!
//! Work-group ids are global, so in deterministic mode the recorded updates
//! are applied in exactly the order the in-memory path applies them and the
//! two results are bit-identical.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::exec::{self, CommitLog, ConflictResolution, ExecConfig, ExecStats, OutputHandle, WorkAssignment, COMMIT_WINDOW};
use crate::format::{tile_blocks, BlcoReader, BlcoTensor, ELEMENT_BYTES};
use crate::linearize::BitLayout;
use crate::mttkrp::{self, Kernel, KernelScratch};
use crate::tensor::{DenseMatrix, FactorMatrices};

pub const MAX_QUEUES: usize = 8;

/// A simulated device: total memory and its division into queue
/// reservations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeviceBudget {
    pub capacity_bytes: u64,
    pub num_queues: usize,
    /// Staging memory owned by each queue.
    pub reservation_bytes: u64,
}

impl DeviceBudget {
    pub fn new(capacity_bytes: u64, num_queues: usize, reservation_bytes: u64) -> Result<Self> {
        if num_queues == 0 || num_queues > MAX_QUEUES {
            return Err(Error::Budget(format!(
                "{num_queues} queues, expected 1..={MAX_QUEUES}"
            )));
        }
        if reservation_bytes < ELEMENT_BYTES {
            return Err(Error::Budget(format!(
                "reservation of {reservation_bytes} bytes holds no element"
            )));
        }
        Ok(DeviceBudget {
            capacity_bytes,
            num_queues,
            reservation_bytes,
        })
    }

    /// Splits whatever `pinned_bytes` leaves of `capacity_bytes` evenly over
    /// the queues, rounded down to whole elements.
    pub fn split(capacity_bytes: u64, num_queues: usize, pinned_bytes: u64) -> Result<Self> {
        let free = capacity_bytes.checked_sub(pinned_bytes).ok_or_else(|| {
            Error::Budget(format!(
                "resident factors and output need {pinned_bytes} bytes, capacity is {capacity_bytes}"
            ))
        })?;
        let per_queue = free / num_queues.max(1) as u64;
        Self::new(capacity_bytes, num_queues, per_queue / ELEMENT_BYTES * ELEMENT_BYTES)
    }

    pub fn staging_bytes(&self) -> u64 {
        self.num_queues as u64 * self.reservation_bytes
    }
}

/// Where blocks come from.
#[derive(Debug, Clone, Copy)]
pub enum BlockSource<'a> {
    Memory(&'a BlcoTensor),
    /// A `.blco` container, read block by block.
    File(&'a Path),
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StreamOptions {
    /// Extra delay added to every batch transfer.
    pub transfer_latency: Duration,
}

/// One staged transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchRecord {
    pub queue: usize,
    pub first_block: usize,
    pub block_count: usize,
    pub bytes: u64,
}

#[derive(Debug, Clone, Default)]
pub struct StreamReport {
    /// Everything fit one reservation and the in-memory path ran.
    pub in_memory: bool,
    pub batches: Vec<BatchRecord>,
    pub capacity_bytes: u64,
    pub peak_resident_bytes: u64,
    pub bytes_processed: u64,
    pub wall: Duration,
    /// Union of the intervals during which some queue was computing.
    pub compute: Duration,
    /// Times a staging buffer had to grow past its initial reservation.
    pub staging_reallocations: u64,
    pub stats: ExecStats,
}

impl StreamReport {
    /// Batch loads performed.
    pub fn swaps(&self) -> usize {
        self.batches.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Throughput {
    pub overall_gbps: f64,
    pub compute_only_gbps: f64,
}

/// Element bytes over wall time, and over compute time only.
pub fn throughput_report(report: &StreamReport) -> Throughput {
    let gbps = |d: Duration| {
        let s = d.as_secs_f64();
        if s > 0.0 {
            report.bytes_processed as f64 / s / 1e9
        } else {
            0.0
        }
    };
    Throughput {
        overall_gbps: gbps(report.wall),
        compute_only_gbps: gbps(report.compute),
    }
}

#[derive(Debug, Clone)]
pub struct StreamRun {
    pub output: DenseMatrix,
    pub strategy: ConflictResolution,
    pub report: StreamReport,
}

/// Block metadata known before any payload is read.
struct Plan {
    layout: BitLayout,
    lens: Vec<usize>,
    /// Record start of every block in the file source.
    offsets: Vec<u64>,
}

impl Plan {
    fn new(source: BlockSource<'_>) -> Result<Self> {
        match source {
            BlockSource::Memory(t) => Ok(Plan {
                layout: t.layout().clone(),
                lens: t.blocks().iter().map(|b| b.nnz()).collect(),
                offsets: Vec::new(),
            }),
            BlockSource::File(path) => {
                let mut reader = BlcoReader::new(BufReader::new(File::open(path)?))?;
                let headers = reader.scan_block_headers()?;
                let mut at = reader.header().encoded_len();
                let mut offsets = Vec::with_capacity(headers.len());
                for h in &headers {
                    offsets.push(at);
                    at += h.record_len();
                }
                Ok(Plan {
                    layout: reader.header().layout.clone(),
                    lens: headers.iter().map(|h| h.nnz as usize).collect(),
                    offsets,
                })
            }
        }
    }
}

fn plan_batches(lens: &[usize], budget: &DeviceBudget) -> Result<Vec<BatchRecord>> {
    let mut batches: Vec<BatchRecord> = Vec::new();
    for (b, &n) in lens.iter().enumerate() {
        let bytes = n as u64 * ELEMENT_BYTES;
        if bytes > budget.reservation_bytes {
            return Err(Error::BlockExceedsReservation {
                block: b,
                bytes,
                reservation: budget.reservation_bytes,
            });
        }
        match batches.last_mut() {
            Some(last) if last.bytes + bytes <= budget.reservation_bytes => {
                last.block_count += 1;
                last.bytes += bytes;
            }
            _ => batches.push(BatchRecord {
                queue: batches.len() % budget.num_queues,
                first_block: b,
                block_count: 1,
                bytes,
            }),
        }
    }
    Ok(batches)
}

#[derive(Default)]
struct Tracker {
    current: AtomicU64,
    peak: AtomicU64,
}

impl Tracker {
    fn alloc(&self, bytes: u64) {
        let now = self.current.fetch_add(bytes, Ordering::SeqCst) + bytes;
        self.peak.fetch_max(now, Ordering::SeqCst);
    }

    fn free(&self, bytes: u64) {
        self.current.fetch_sub(bytes, Ordering::SeqCst);
    }
}

/// A queue's staging buffer: the batch's blocks back to back.
struct Staged {
    upper: Vec<u64>,
    starts: Vec<usize>,
    indices: Vec<u64>,
    values: Vec<f64>,
}

impl Staged {
    fn with_capacity(elements: usize, blocks: usize, order: usize) -> Self {
        Staged {
            upper: Vec::with_capacity(blocks * order),
            starts: Vec::with_capacity(blocks + 1),
            indices: Vec::with_capacity(elements),
            values: Vec::with_capacity(elements),
        }
    }

    fn capacities(&self) -> [usize; 4] {
        [
            self.upper.capacity(),
            self.starts.capacity(),
            self.indices.capacity(),
            self.values.capacity(),
        ]
    }

    fn clear(&mut self) {
        self.upper.clear();
        self.starts.clear();
        self.indices.clear();
        self.values.clear();
    }
}

enum Feed<'a> {
    Memory(&'a BlcoTensor),
    File(Box<BlcoReader<BufReader<File>>>),
}

impl Feed<'_> {
    fn fill(&mut self, plan: &Plan, batch: &BatchRecord, buf: &mut Staged) -> Result<()> {
        buf.clear();
        let range = batch.first_block..batch.first_block + batch.block_count;
        match self {
            Feed::Memory(t) => {
                for block in &t.blocks()[range] {
                    buf.starts.push(buf.indices.len());
                    buf.upper.extend_from_slice(block.upper_coords());
                    buf.indices.extend_from_slice(block.linear_indices());
                    buf.values.extend_from_slice(block.values());
                }
            }
            Feed::File(reader) => {
                reader.seek_block(batch.first_block as u64, plan.offsets[batch.first_block])?;
                for b in range {
                    buf.starts.push(buf.indices.len());
                    let h = reader
                        .read_block_extend(&mut buf.indices, &mut buf.values)?
                        .ok_or(Error::Truncated)?;
                    if h.nnz as usize != plan.lens[b] {
                        return Err(Error::Corrupt(format!("block {b} changed size during the run")));
                    }
                    buf.upper.extend(plan.layout.key_upper_coords(h.key));
                }
            }
        }
        buf.starts.push(buf.indices.len());
        Ok(())
    }
}

enum Msg {
    Logs {
        batch: usize,
        window: usize,
        logs: Vec<CommitLog>,
        stats: ExecStats,
    },
    Done {
        stats: ExecStats,
        interval: (Instant, Instant),
    },
}

/// Streams `source` through `budget` and returns `M` for a 0-based `mode`.
pub fn stream_mttkrp(
    source: BlockSource<'_>,
    factors: &FactorMatrices,
    mode: usize,
    budget: &DeviceBudget,
    config: &ExecConfig,
) -> Result<DenseMatrix> {
    stream_mttkrp_with(source, factors, mode, budget, config, &StreamOptions::default()).map(|r| r.output)
}

pub fn stream_mttkrp_with(
    source: BlockSource<'_>,
    factors: &FactorMatrices,
    mode: usize,
    budget: &DeviceBudget,
    config: &ExecConfig,
    opts: &StreamOptions,
) -> Result<StreamRun> {
    let start = Instant::now();
    let plan = Plan::new(source)?;
    let kernel = Kernel::new(&plan.layout, factors, mode, config)?;

    let factor_bytes = factors.footprint_bytes();
    if factor_bytes > budget.capacity_bytes {
        return Err(Error::Budget(format!(
            "factor matrices need {factor_bytes} bytes, capacity is {}",
            budget.capacity_bytes
        )));
    }
    let pinned = factor_bytes + kernel.output_bytes();
    if pinned + budget.staging_bytes() > budget.capacity_bytes {
        return Err(Error::Budget(format!(
            "{pinned} resident bytes plus {} of queue reservations exceed capacity {}",
            budget.staging_bytes(),
            budget.capacity_bytes
        )));
    }
    let batches = plan_batches(&plan.lens, budget)?;

    let tracker = Tracker::default();
    tracker.alloc(pinned);
    let bytes_processed = plan.lens.iter().map(|&n| n as u64 * ELEMENT_BYTES).sum();
    let mut report = StreamReport {
        capacity_bytes: budget.capacity_bytes,
        bytes_processed,
        ..Default::default()
    };

    if let (BlockSource::Memory(tensor), true) = (source, batches.len() <= 1) {
        tracker.alloc(bytes_processed);
        let run = mttkrp::mttkrp_with_stats(tensor, factors, mode, config)?;
        report.in_memory = true;
        report.stats = run.stats;
        report.peak_resident_bytes = tracker.peak.into_inner();
        report.wall = start.elapsed();
        report.compute = report.wall;
        return Ok(StreamRun {
            output: run.output,
            strategy: run.strategy,
            report,
        });
    }

    // Global work-group numbering, identical to the in-memory launch.
    let span = config.elements_per_workgroup();
    let entries = tile_blocks(plan.lens.iter().copied(), span);
    let mut first_entry = vec![entries.len(); plan.lens.len() + 1];
    for (i, e) in entries.iter().enumerate().rev() {
        first_entry[e.block] = i;
    }
    for b in (0..plan.lens.len()).rev() {
        first_entry[b] = first_entry[b].min(first_entry[b + 1]);
    }
    let assignments: Vec<Vec<WorkAssignment>> = batches
        .iter()
        .map(|batch| {
            let lo = first_entry[batch.first_block];
            let hi = first_entry[batch.first_block + batch.block_count];
            (lo..hi)
                .map(|id| WorkAssignment {
                    id,
                    block: entries[id].block - batch.first_block,
                    offset: entries[id].offset,
                    len: entries[id].len,
                })
                .collect()
        })
        .collect();
    let windows: Vec<usize> = assignments.iter().map(|a| a.len().div_ceil(COMMIT_WINDOW)).collect();

    let output = kernel.output();
    let order = plan.layout.order();
    let elements = (budget.reservation_bytes / ELEMENT_BYTES) as usize;
    let max_blocks = batches.iter().map(|b| b.block_count).max().unwrap_or(0);
    let reallocations = AtomicU64::new(0);
    let mut intervals: Vec<(Instant, Instant)> = Vec::new();
    let mut failure: Option<Error> = None;

    thread::scope(|scope| {
        let (result_tx, result_rx) = mpsc::channel::<Result<Msg>>();
        for q in 0..budget.num_queues {
            let mine: Vec<usize> = (0..batches.len()).filter(|&b| batches[b].queue == q).collect();
            if mine.is_empty() {
                continue;
            }
            let (full_tx, full_rx) = mpsc::sync_channel::<Result<Staged>>(1);
            let (free_tx, free_rx) = mpsc::sync_channel::<Staged>(1);
            let (plan, batches, tracker, reallocations) = (&plan, &batches, &tracker, &reallocations);
            let staging_batches = mine.clone();

            scope.spawn(move || {
                let mut feed = match source {
                    BlockSource::Memory(t) => Feed::Memory(t),
                    BlockSource::File(path) => {
                        match File::open(path).map_err(Error::from).and_then(|f| BlcoReader::new(BufReader::new(f))) {
                            Ok(r) => Feed::File(Box::new(r)),
                            Err(e) => {
                                let _ = full_tx.send(Err(e));
                                return;
                            }
                        }
                    }
                };
                let mut buf = Some(Staged::with_capacity(elements, max_blocks, order));
                for b in staging_batches {
                    let mut staged = match buf.take() {
                        Some(s) => s,
                        None => match free_rx.recv() {
                            Ok(s) => s,
                            Err(_) => return,
                        },
                    };
                    let before = staged.capacities();
                    tracker.alloc(batches[b].bytes);
                    let res = feed.fill(plan, &batches[b], &mut staged);
                    if staged.capacities() != before {
                        reallocations.fetch_add(1, Ordering::Relaxed);
                    }
                    if !opts.transfer_latency.is_zero() {
                        thread::sleep(opts.transfer_latency);
                    }
                    if full_tx.send(res.map(|()| staged)).is_err() {
                        return;
                    }
                }
            });

            let (kernel, output, assignments, result_tx) = (&kernel, &output, &assignments, result_tx.clone());
            scope.spawn(move || {
                for b in mine {
                    let staged = match full_rx.recv() {
                        Ok(Ok(s)) => s,
                        Ok(Err(e)) => {
                            let _ = result_tx.send(Err(e));
                            return;
                        }
                        Err(_) => return,
                    };
                    let began = Instant::now();
                    let body = |a: &WorkAssignment, s: &mut KernelScratch, h: &mut OutputHandle<'_>| {
                        let lo = staged.starts[a.block] + a.offset;
                        let upper = &staged.upper[a.block * order..(a.block + 1) * order];
                        Kernel::run(kernel, a.id, upper, &staged.indices[lo..lo + a.len], &staged.values[lo..lo + a.len], s, h);
                    };
                    let mut stats = ExecStats::default();
                    let outcome: Result<()> = if config.deterministic {
                        assignments[b]
                            .chunks(COMMIT_WINDOW)
                            .enumerate()
                            .try_for_each(|(window, chunk)| {
                                let (logs, st) =
                                    exec::record_workgroups(chunk, config, output.shape(), || kernel.scratch(), body)?;
                                let _ = result_tx.send(Ok(Msg::Logs { batch: b, window, logs, stats: st }));
                                Ok(())
                            })
                    } else {
                        exec::run_workgroups(&assignments[b], config, output, || kernel.scratch(), body).map(|st| {
                            stats = st;
                        })
                    };
                    let interval = (began, Instant::now());
                    tracker.free(batches[b].bytes);
                    if let Err(e) = outcome {
                        let _ = result_tx.send(Err(e));
                        return;
                    }
                    let _ = result_tx.send(Ok(Msg::Done { stats, interval }));
                    let _ = free_tx.send(staged);
                }
            });
        }
        drop(result_tx);

        // Deterministic logs are committed in (batch, window) order.
        let mut pending: BTreeMap<(usize, usize), Vec<CommitLog>> = BTreeMap::new();
        let mut next = (0usize, 0usize);
        for msg in result_rx {
            match msg {
                Err(e) => {
                    failure.get_or_insert(e);
                }
                Ok(Msg::Done { stats, interval }) => {
                    report.stats.merge(stats);
                    intervals.push(interval);
                }
                Ok(Msg::Logs { batch, window, logs, stats }) => {
                    report.stats.merge(stats);
                    pending.insert((batch, window), logs);
                    while let Some(logs) = pending.remove(&next) {
                        for log in &logs {
                            output.apply(log);
                        }
                        next.1 += 1;
                        while next.0 < windows.len() && next.1 >= windows[next.0] {
                            next = (next.0 + 1, 0);
                        }
                    }
                }
            }
        }
    });

    if let Some(e) = failure {
        return Err(e);
    }
    report.batches = batches;
    report.peak_resident_bytes = tracker.peak.into_inner();
    report.staging_reallocations = reallocations.into_inner();
    report.compute = union_length(&mut intervals);
    report.wall = start.elapsed();
    Ok(StreamRun {
        output: kernel.finish(output)?,
        strategy: kernel.strategy(),
        report,
    })
}

fn union_length(intervals: &mut [(Instant, Instant)]) -> Duration {
    intervals.sort_by_key(|i| i.0);
    let mut total = Duration::ZERO;
    let mut current: Option<(Instant, Instant)> = None;
    for &(s, e) in intervals.iter() {
        match &mut current {
            Some((_, end)) if s <= *end => *end = (*end).max(e),
            _ => {
                if let Some((a, b)) = current {
                    total += b - a;
                }
                current = Some((s, e));
            }
        }
    }
    if let Some((a, b)) = current {
        total += b - a;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{example_tensor, random_tensor};
    use crate::format::{build_blco, serialize_blco};
    use crate::mttkrp::mttkrp;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn budget_for(t: &BlcoTensor, f: &FactorMatrices, cfg: &ExecConfig, mode: usize, queues: usize, reservation: u64) -> DeviceBudget {
        let copies = match mttkrp::resolve_strategy(t.dims()[mode], cfg) {
            ConflictResolution::Hierarchical => cfg.num_factor_copies as u64,
            _ => 1,
        };
        let out = copies * t.dims()[mode] * f.rank() as u64 * 8;
        DeviceBudget::new(f.footprint_bytes() + out + queues as u64 * reservation, queues, reservation).unwrap()
    }

    #[test]
    fn batches_pack_in_order_round_robin() {
        let budget = DeviceBudget::new(1 << 20, 2, 64).unwrap();
        let b = plan_batches(&[2, 2, 3, 4, 1], &budget).unwrap();
        let got: Vec<(usize, usize, usize)> = b.iter().map(|r| (r.queue, r.first_block, r.block_count)).collect();
        assert_eq!(got, vec![(0, 0, 2), (1, 2, 1), (0, 3, 1), (1, 4, 1)]);
        assert!(matches!(
            plan_batches(&[2, 5], &budget),
            Err(Error::BlockExceedsReservation { block: 1, bytes: 80, reservation: 64 })
        ));
    }

    #[test]
    fn four_block_example_streams_one_block_at_a_time() {
        let coo = example_tensor();
        let t = build_blco(&coo, 5, 3).unwrap();
        assert_eq!(t.blocks().len(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = FactorMatrices::random(t.dims(), 3, &mut rng);
        for deterministic in [false, true] {
            let cfg = ExecConfig { deterministic, workgroup_size: 2, tile_size: 2, coarsening: 1, ..Default::default() };
            for mode in 0..3 {
                let budget = budget_for(&t, &f, &cfg, mode, 2, 3 * ELEMENT_BYTES);
                let run = stream_mttkrp_with(BlockSource::Memory(&t), &f, mode, &budget, &cfg, &StreamOptions::default()).unwrap();
                assert_eq!(run.report.swaps(), 4);
                assert!(run.report.peak_resident_bytes <= budget.capacity_bytes);
                assert_eq!(run.report.staging_reallocations, 0);
                let want = mttkrp(&t, &f, mode, &cfg).unwrap();
                if deterministic {
                    assert_eq!(run.output, want);
                } else {
                    assert!(run.output.relative_error(&want) <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn everything_fits_runs_in_memory() {
        let t = build_blco(&example_tensor(), 5, 6).unwrap();
        let f = FactorMatrices::filled(t.dims(), 2, 1.0);
        let cfg = ExecConfig::default();
        let budget = budget_for(&t, &f, &cfg, 0, 1, 1 << 10);
        let run = stream_mttkrp_with(BlockSource::Memory(&t), &f, 0, &budget, &cfg, &StreamOptions::default()).unwrap();
        assert!(run.report.in_memory);
        assert_eq!(run.output.as_slice(), &[6.0, 6.0, 9.0, 9.0, 13.0, 13.0, 50.0, 50.0]);
        let tp = throughput_report(&run.report);
        assert_eq!(tp.overall_gbps, tp.compute_only_gbps);
    }

    #[test]
    fn oversized_block_fails_before_compute() {
        let t = build_blco(&example_tensor(), 5, 6).unwrap();
        let f = FactorMatrices::filled(t.dims(), 2, 1.0);
        let budget = DeviceBudget::new(1 << 20, 2, 5 * ELEMENT_BYTES).unwrap();
        let err = stream_mttkrp(BlockSource::Memory(&t), &f, 0, &budget, &ExecConfig::default()).unwrap_err();
        assert!(matches!(err, Error::BlockExceedsReservation { block: 0, .. }));
    }

    #[test]
    fn budget_errors() {
        let t = build_blco(&example_tensor(), 5, 6).unwrap();
        let f = FactorMatrices::filled(t.dims(), 2, 1.0);
        let cfg = ExecConfig::default();
        let small = DeviceBudget::new(100, 1, 96).unwrap();
        assert!(matches!(stream_mttkrp(BlockSource::Memory(&t), &f, 0, &small, &cfg), Err(Error::Budget(_))));
        let budget = DeviceBudget::new(f.footprint_bytes() + 64, 1, 96).unwrap();
        assert!(matches!(stream_mttkrp(BlockSource::Memory(&t), &f, 0, &budget, &cfg), Err(Error::Budget(_))));
        assert!(DeviceBudget::new(1 << 20, 0, 64).is_err());
        assert!(DeviceBudget::new(1 << 20, 9, 64).is_err());
        assert!(DeviceBudget::split(10, 2, 64).is_err());
        assert_eq!(DeviceBudget::split(1000, 2, 200).unwrap().reservation_bytes, 400);
    }

    #[test]
    fn file_source_matches_memory() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let coo = random_tensor(&mut rng, &[20, 30, 10], 2000);
        let t = build_blco(&coo, 64, 300).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.blco");
        serialize_blco(&t, std::fs::File::create(&path).unwrap()).unwrap();
        let f = FactorMatrices::random(t.dims(), 4, &mut rng);
        let cfg = ExecConfig { deterministic: true, ..Default::default() };
        for mode in 0..3 {
            let budget = budget_for(&t, &f, &cfg, mode, 3, 700 * ELEMENT_BYTES);
            let opts = StreamOptions { transfer_latency: Duration::from_millis(1) };
            let run = stream_mttkrp_with(BlockSource::File(&path), &f, mode, &budget, &cfg, &opts).unwrap();
            assert_eq!(run.report.swaps(), 4);
            let queues: Vec<usize> = run.report.batches.iter().map(|b| b.queue).collect();
            assert_eq!(queues, vec![0, 1, 2, 0]);
            let blocks: usize = run.report.batches.iter().map(|b| b.block_count).sum();
            assert_eq!(blocks, t.blocks().len());
            assert_eq!(run.output, mttkrp(&t, &f, mode, &cfg).unwrap());
            let tp = throughput_report(&run.report);
            assert!(tp.overall_gbps > 0.0 && tp.compute_only_gbps > 0.0);
            assert!(tp.overall_gbps <= tp.compute_only_gbps);
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let f = FactorMatrices::filled(&[2], 1, 1.0);
        let budget = DeviceBudget::new(1 << 20, 1, 64).unwrap();
        let err = stream_mttkrp(BlockSource::File(Path::new("/nonexistent/x.blco")), &f, 0, &budget, &ExecConfig::default());
        assert!(matches!(err, Err(Error::Io(_))));
    }

    #[test]
    fn interval_union() {
        let t0 = Instant::now();
        let ms = |n| t0 + Duration::from_millis(n);
        let mut v = vec![(ms(5), ms(8)), (ms(0), ms(2)), (ms(1), ms(3)), (ms(8), ms(9))];
        assert_eq!(union_length(&mut v), Duration::from_millis(7));
        assert_eq!(union_length(&mut []), Duration::ZERO);
    }
}
