//! CP-ALS over the blocked MTTKRP.
//!
//! Each sweep updates every factor in mode order from the normal equations
//! `A_n · V_n = M_n` with `V_n` the Hadamard product of the other factors'
//! Gram matrices, then moves the column norms into `λ`. The fit
//! `1 − ‖X − X̂‖ / ‖X‖` is evaluated from Gram matrices and the last MTTKRP,
//! never from a materialized `X̂`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::ExecConfig;
use crate::format::BlcoTensor;
use crate::mttkrp::mttkrp;
use crate::tensor::{gram, hadamard_accumulate, solve_normal, DenseMatrix, FactorMatrices};

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CpAlsOptions {
    pub rank: usize,
    pub max_iters: usize,
    /// Stop once the fit moves by less than this between sweeps.
    pub tol: f64,
    pub seed: u64,
    pub config: ExecConfig,
}

impl Default for CpAlsOptions {
    fn default() -> Self {
        CpAlsOptions {
            rank: 32,
            max_iters: 50,
            tol: 1e-5,
            seed: 0,
            config: ExecConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpModel {
    /// Columns have unit 2-norm once at least one sweep has run.
    pub factors: FactorMatrices,
    pub lambda: Vec<f64>,
    pub fit_history: Vec<f64>,
    pub seed: u64,
}

impl CpModel {
    /// Factors drawn uniformly from `[0, 1)` with a ChaCha8 stream seeded by
    /// `seed`, and unit weights.
    pub fn random(dims: &[u64], rank: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CpModel {
            factors: FactorMatrices::random(dims, rank, &mut rng),
            lambda: vec![1.0; rank],
            fit_history: Vec::new(),
            seed,
        }
    }

    pub fn final_fit(&self) -> Option<f64> {
        self.fit_history.last().copied()
    }

    /// Writes `factor_mode{n}.tsv` (1-based `n`), `lambda.tsv` and
    /// `manifest.json` into `dir`.
    pub fn export(&self, dir: &Path, opts: &CpAlsOptions) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (n, f) in self.factors.iter().enumerate() {
            write_tsv(&dir.join(format!("factor_mode{}.tsv", n + 1)), f)?;
        }
        let lambda = DenseMatrix::from_raw(self.lambda.len(), 1, self.lambda.clone());
        write_tsv(&dir.join("lambda.tsv"), &lambda)?;
        let manifest = Manifest {
            seed: self.seed,
            rank: self.factors.rank(),
            iterations: self.fit_history.len(),
            final_fit: self.final_fit(),
            fit_history: &self.fit_history,
            options: opts,
        };
        let mut json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Config(format!("manifest: {e}")))?;
        json.push('\n');
        fs::write(dir.join("manifest.json"), json)?;
        Ok(())
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    seed: u64,
    rank: usize,
    iterations: usize,
    final_fit: Option<f64>,
    fit_history: &'a [f64],
    options: &'a CpAlsOptions,
}

/// Tab-separated rows, shortest round-trip float formatting.
pub fn write_tsv(path: &Path, m: &DenseMatrix) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", row.join("\t"))?;
    }
    out.flush()?;
    Ok(())
}

fn tensor_norm_sq(tensor: &BlcoTensor) -> f64 {
    tensor
        .blocks()
        .iter()
        .flat_map(|b| b.values())
        .map(|v| v * v)
        .sum()
}

/// Hadamard product of every Gram matrix except `skip`.
fn gram_product(grams: &[DenseMatrix], skip: Option<usize>, rank: usize) -> Result<DenseMatrix> {
    let mut v = DenseMatrix::filled(rank, rank, 1.0);
    for (m, g) in grams.iter().enumerate() {
        if Some(m) != skip {
            v = hadamard_accumulate(v, g)?;
        }
    }
    Ok(v)
}

/// Fit from `‖X‖²`, all Gram matrices, and `M_last = mttkrp(X, last mode)`.
fn fit_from_parts(
    norm_sq: f64,
    grams: &[DenseMatrix],
    lambda: &[f64],
    last_factor: &DenseMatrix,
    m_last: &DenseMatrix,
) -> Result<f64> {
    let r = lambda.len();
    let v = gram_product(grams, None, r)?;
    let mut model_sq = 0.0;
    for p in 0..r {
        for q in 0..r {
            model_sq += v[(p, q)] * lambda[p] * lambda[q];
        }
    }
    let mut inner = 0.0;
    for i in 0..m_last.rows() {
        for (c, (&m, &a)) in m_last.row(i).iter().zip(last_factor.row(i)).enumerate() {
            inner += m * lambda[c] * a;
        }
    }
    let residual_sq = (norm_sq + model_sq - 2.0 * inner).max(0.0);
    Ok(1.0 - residual_sq.sqrt() / norm_sq.sqrt())
}

/// Fit of `model` against `tensor`. Runs one MTTKRP for the last mode.
pub fn fit(tensor: &BlcoTensor, model: &CpModel, config: &ExecConfig) -> Result<f64> {
    let norm_sq = tensor_norm_sq(tensor);
    if norm_sq == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let grams = model.factors.iter().map(gram).collect::<Result<Vec<_>>>()?;
    let last = tensor.order() - 1;
    let m = mttkrp(tensor, &model.factors, last, config)?;
    fit_from_parts(norm_sq, &grams, &model.lambda, model.factors.get(last), &m)
}

/// Moves column 2-norms into the returned weights. Zero columns keep weight 0.
fn normalize_columns(a: &mut DenseMatrix) -> Vec<f64> {
    let (rows, r) = a.shape();
    let mut norms = vec![0.0; r];
    for i in 0..rows {
        for (n, v) in norms.iter_mut().zip(a.row(i)) {
            *n += v * v;
        }
    }
    norms.iter_mut().for_each(|n| *n = n.sqrt());
    for i in 0..rows {
        for (v, &n) in a.row_mut(i).iter_mut().zip(&norms) {
            if n > 0.0 {
                *v /= n;
            }
        }
    }
    norms
}

pub fn cp_als(tensor: &BlcoTensor, opts: &CpAlsOptions) -> Result<CpModel> {
    if opts.rank == 0 {
        return Err(Error::Config("rank must be at least 1".into()));
    }
    let mut model = CpModel::random(tensor.dims(), opts.rank, opts.seed);
    if opts.max_iters == 0 {
        return Ok(model);
    }
    let norm_sq = tensor_norm_sq(tensor);
    if norm_sq == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let order = tensor.order();
    let mut grams = model.factors.iter().map(gram).collect::<Result<Vec<_>>>()?;

    for iteration in 0..opts.max_iters {
        let mut m = DenseMatrix::zeros(0, 0);
        for n in 0..order {
            let v = gram_product(&grams, Some(n), opts.rank)?;
            m = mttkrp(tensor, &model.factors, n, &opts.config)?;
            let mut a = solve_normal(&m, &v)?;
            model.lambda = normalize_columns(&mut a);
            grams[n] = gram(&a)?;
            model.factors.set(n, a);
        }
        let f = fit_from_parts(norm_sq, &grams, &model.lambda, model.factors.get(order - 1), &m)?;
        model.fit_history.push(f);
        if !f.is_finite() {
            return Err(Error::Diverged {
                iteration,
                history: model.fit_history,
            });
        }
        if iteration > 0 {
            let prev = model.fit_history[iteration - 1];
            if (f - prev).abs() < opts.tol {
                break;
            }
        }
    }
    Ok(model)
}
