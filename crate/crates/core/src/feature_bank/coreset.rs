use super::{CoarseFeatureBank, GlobalFeatureSpace};
use crate::error::{Error, Result};

/// Rule for the first selected row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CoresetInit {
    /// Row with the largest L2 norm (lowest index on ties).
    #[default]
    MaxNorm,
    Index(usize),
}

/// Emitted when more rows were requested than the space holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClampWarning {
    pub requested: usize,
    pub available: usize,
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum()
}

/// Greedy farthest-point selection of `xi` rows.
///
/// After the first row, each step takes the row whose distance to its
/// nearest selected row is largest; ties go to the lowest index. Requests
/// beyond the row count are clamped.
pub fn coreset_compress(
    space: &GlobalFeatureSpace,
    xi: usize,
    init: CoresetInit,
) -> Result<(CoarseFeatureBank, Option<ClampWarning>)> {
    if xi == 0 {
        return Err(Error::param("xi", "must select at least one row"));
    }
    let m = space.rows();
    if m == 0 {
        return Err(Error::param("space", "no rows to select from"));
    }
    let warning = (xi > m).then(|| {
        log::warn!("coreset size {xi} exceeds {m} available rows; clamping");
        ClampWarning {
            requested: xi,
            available: m,
        }
    });
    let k = xi.min(m);

    let first = match init {
        CoresetInit::Index(i) if i < m => i,
        CoresetInit::Index(i) => return Err(Error::param("init", format!("row {i} out of range ({m} rows)"))),
        CoresetInit::MaxNorm => {
            let mut best = 0;
            let mut best_norm = f64::NEG_INFINITY;
            for i in 0..m {
                let n: f64 = space.row(i).iter().map(|v| (*v as f64) * (*v as f64)).sum();
                if n > best_norm {
                    best_norm = n;
                    best = i;
                }
            }
            best
        }
    };

    let mut selected = Vec::with_capacity(k);
    let mut nearest = vec![f64::INFINITY; m];
    let mut next = first;
    loop {
        selected.push(next);
        nearest[next] = f64::NEG_INFINITY;
        if selected.len() == k {
            break;
        }
        let c = space.row(next);
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, slot) in nearest.iter_mut().enumerate() {
            if *slot == f64::NEG_INFINITY {
                continue;
            }
            let d = sq_dist(space.row(i), c);
            if d < *slot {
                *slot = d;
            }
            if *slot > best_d {
                best_d = *slot;
                best = i;
            }
        }
        next = best;
    }

    let mut vectors = Vec::with_capacity(k * space.d);
    for &i in &selected {
        vectors.extend_from_slice(space.row(i));
    }
    Ok((
        CoarseFeatureBank {
            vectors,
            xi: k,
            d: space.d,
            source_ids: selected.iter().map(|&i| i as u64).collect(),
            source_rows: m as u64,
            extractor_fingerprint: space.fingerprint.clone(),
        },
        warning,
    ))
}

/// Largest distance from any row of `space` to its nearest row in `centers`.
pub fn coverage_radius(space: &GlobalFeatureSpace, centers: &[usize]) -> f64 {
    (0..space.rows())
        .map(|i| {
            centers
                .iter()
                .map(|&c| sq_dist(space.row(i), space.row(c)))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
        .sqrt()
}
