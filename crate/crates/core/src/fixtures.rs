//! Test and benchmark inputs: the twelve-element worked example, random
//! sparse instances and synthetic low-rank tensors.

use rand::seq::index::sample;
use rand::Rng;

use crate::tensor::{DenseMatrix, FactorMatrices, SparseTensorCoo};

/// The 4×4×4 worked example in `.tns` form (1-based).
pub const EXAMPLE_TNS: &str = "\
1 1 1 1.0
1 1 2 2.0
1 3 3 3.0
2 1 2 4.0
2 1 3 5.0
3 1 2 6.0
3 4 4 7.0
4 2 1 8.0
4 2 2 9.0
4 3 3 10.0
4 3 4 11.0
4 4 4 12.0
";

pub fn example_tensor() -> SparseTensorCoo {
    crate::tensor::load_tns(EXAMPLE_TNS.as_bytes(), None).expect("example parses")
}

/// Random tensor with dims in `1..=max_dim` per mode and up to `nnz`
/// distinct coordinates (fewer if the space is smaller). Values are drawn
/// from `[-1, 1)`.
pub fn random_tensor<R: Rng + ?Sized>(rng: &mut R, dims: &[u64], nnz: usize) -> SparseTensorCoo {
    let cells: u128 = dims.iter().map(|&d| d as u128).product();
    let order = dims.len();
    let mut indices = vec![Vec::with_capacity(nnz); order];
    let mut values = Vec::with_capacity(nnz);
    if cells <= (4 * nnz as u128).max(1 << 16) {
        let cells = cells as usize;
        for cell in sample(rng, cells, nnz.min(cells)).into_iter() {
            let mut rest = cell as u64;
            for (m, &d) in dims.iter().enumerate() {
                indices[m].push(rest % d);
                rest /= d;
            }
            values.push(rng.gen_range(-1.0..1.0));
        }
    } else {
        // Sparse enough that collisions are rare; duplicates merge.
        for _ in 0..nnz {
            for (m, &d) in dims.iter().enumerate() {
                indices[m].push(rng.gen_range(0..d));
            }
            values.push(rng.gen_range(-1.0..1.0));
        }
    }
    SparseTensorCoo::new(dims.to_vec(), indices, values).expect("random tensor is valid")
}

/// Random dims with `1 <= d <= max_dim`.
pub fn random_dims<R: Rng + ?Sized>(rng: &mut R, order: usize, max_dim: u64) -> Vec<u64> {
    (0..order).map(|_| rng.gen_range(1..=max_dim)).collect()
}

/// Dense factors with entries zero with probability `zero_fraction`,
/// otherwise uniform in `[0.5, 1.5)`.
pub fn sparse_factors<R: Rng + ?Sized>(
    rng: &mut R,
    dims: &[u64],
    rank: usize,
    zero_fraction: f64,
) -> FactorMatrices {
    let factors = dims
        .iter()
        .map(|&d| {
            let data = (0..d as usize * rank)
                .map(|_| {
                    if rng.gen::<f64>() < zero_fraction {
                        0.0
                    } else {
                        rng.gen_range(0.5..1.5)
                    }
                })
                .collect();
            DenseMatrix::from_vec(d as usize, rank, data).expect("finite entries")
        })
        .collect();
    FactorMatrices::new(factors).expect("conforming factors")
}

/// Materializes `Σ_r Π_n A_n[i_n, r]` over the full index space and keeps the
/// non-zero cells. Intended for small dims only.
pub fn reconstruct_sparse(dims: &[u64], factors: &FactorMatrices, weights: Option<&[f64]>) -> SparseTensorCoo {
    let order = dims.len();
    let rank = factors.rank();
    let cells: u64 = dims.iter().product();
    let mut indices = vec![Vec::new(); order];
    let mut values = Vec::new();
    let mut coord = vec![0u64; order];
    for cell in 0..cells {
        let mut rest = cell;
        for m in 0..order {
            coord[m] = rest % dims[m];
            rest /= dims[m];
        }
        let mut v = 0.0;
        for r in 0..rank {
            let mut p = weights.map_or(1.0, |w| w[r]);
            for (m, &c) in coord.iter().enumerate() {
                p *= factors.get(m)[(c as usize, r)];
            }
            v += p;
        }
        if v != 0.0 {
            for m in 0..order {
                indices[m].push(coord[m]);
            }
            values.push(v);
        }
    }
    SparseTensorCoo::new(dims.to_vec(), indices, values).expect("reconstruction is valid")
}
