//! Singular-value analysis of attention maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::Model;

/// Energy thresholds reported in every [`SpectrumReport`].
pub const REPORTED_THRESHOLDS: [f64; 4] = [0.5, 0.9, 0.95, 0.99];

const JACOBI_TOL: f64 = 1e-15;
const MAX_SWEEPS: usize = 80;

/// Thin SVD `M = U·diag(s)·Vᵀ` with `s` descending.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `[rows, p]`, `p = min(rows, cols)`.
    pub u: Tensor,
    pub s: Vec<f64>,
    /// `[cols, p]`.
    pub v: Tensor,
}

/// One-sided (Hestenes) Jacobi SVD.
pub fn jacobi_svd(m: &Tensor) -> Result<Svd> {
    let (rows, cols) = m.dims2()?;
    if !m.all_finite() {
        return Err(Error::Numeric {
            name: "spectrum input".into(),
            detail: "matrix has non-finite entries".into(),
        });
    }
    if rows < cols {
        let t = crate::ops::transpose2d(m)?;
        let Svd { u, s, v } = jacobi_svd(&t)?;
        return Ok(Svd { u: v, s, v: u });
    }

    // column-major working copies: a[j] is column j
    let mut a: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| m.at2(i, j)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..cols).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha: f64 = a[p].iter().map(|x| x * x).sum();
                let beta: f64 = a[q].iter().map(|x| x * x).sum();
                let gamma: f64 = a[p].iter().zip(&a[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = a
        .iter()
        .map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let mut u = vec![0.0; rows * cols];
    let mut vt = vec![0.0; cols * cols];
    let mut s = Vec::with_capacity(cols);
    for (k, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        s.push(sigma);
        for i in 0..rows {
            u[i * cols + k] = if sigma > 0.0 { a[j][i] / sigma } else { 0.0 };
        }
        for i in 0..cols {
            vt[i * cols + k] = v[j][i];
        }
    }
    Ok(Svd {
        u: Tensor::new(&[rows, cols], u)?,
        s,
        v: Tensor::new(&[cols, cols], vt)?,
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankAt {
    pub threshold: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub singular_values: Vec<f64>,
    /// Entry `m − 1` is the energy fraction kept by the top `m` components.
    pub energy_cdf: Vec<f64>,
    /// Set when the matrix is identically zero (the CDF is then all zeros).
    pub zero_matrix: bool,
    pub rank_at: Vec<RankAt>,
}

/// Minimal `m` with `cdf[m − 1] ≥ tau`; 0 for an empty or all-zero CDF.
pub fn rank_for_energy(cdf: &[f64], tau: f64) -> usize {
    cdf.iter().position(|&c| c >= tau - 1e-12).map_or(0, |i| i + 1)
}

/// Energy CDF from descending singular values.
pub fn energy_cdf(singular_values: &[f64]) -> Vec<f64> {
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return vec![0.0; singular_values.len()];
    }
    let mut acc = 0.0;
    let mut cdf: Vec<f64> = singular_values
        .iter()
        .map(|s| {
            acc += s * s;
            acc / total
        })
        .collect();
    if let Some(last) = cdf.last_mut() {
        *last = 1.0;
    }
    cdf
}

fn report_from_cdf(singular_values: Vec<f64>, energy_cdf: Vec<f64>, zero_matrix: bool) -> SpectrumReport {
    let rank_at = REPORTED_THRESHOLDS
        .iter()
        .map(|&threshold| RankAt {
            threshold,
            rank: rank_for_energy(&energy_cdf, threshold),
        })
        .collect();
    SpectrumReport {
        singular_values,
        energy_cdf,
        zero_matrix,
        rank_at,
    }
}

pub fn spectrum(m: &Tensor) -> Result<SpectrumReport> {
    let svd = jacobi_svd(m)?;
    let cdf = energy_cdf(&svd.s);
    let zero = svd.s.iter().all(|&s| s == 0.0);
    Ok(report_from_cdf(svd.s, cdf, zero))
}

impl SpectrumReport {
    pub fn rank_at(&self, tau: f64) -> usize {
        rank_for_energy(&self.energy_cdf, tau)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LowRankError {
    /// `‖M − M_m‖_F` for the best rank-`m` approximation `M_m`.
    pub frobenius: f64,
    /// `frobenius / ‖M‖_F` (0 for the zero matrix).
    pub relative: f64,
}

/// Eckart–Young error of the best rank-`m` approximation.
pub fn best_rank_m_error(m: &Tensor, rank: usize) -> Result<LowRankError> {
    let (r, c) = m.dims2()?;
    if rank > r.min(c) {
        return Err(Error::domain(
            "best_rank_m_error",
            format!("rank {rank} exceeds min dimension {}", r.min(c)),
        ));
    }
    let svd = jacobi_svd(m)?;
    let tail: f64 = svd.s[rank..].iter().map(|s| s * s).sum();
    let total: f64 = svd.s.iter().map(|s| s * s).sum();
    let frobenius = tail.sqrt();
    let relative = if total > 0.0 { frobenius / total.sqrt() } else { 0.0 };
    Ok(LowRankError { frobenius, relative })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerSelector {
    All,
    Layers(Vec<usize>),
}

impl LayerSelector {
    fn matches(&self, layer: usize) -> bool {
        match self {
            LayerSelector::All => true,
            LayerSelector::Layers(ls) => ls.contains(&layer),
        }
    }
}

/// Average spectrum of one layer's attention maps over heads and instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpectrum {
    pub layer: usize,
    pub variant: String,
    pub matrices: usize,
    pub map_shape: (usize, usize),
    /// Mean of the per-matrix singular values.
    pub mean_singular_values: Vec<f64>,
    /// Mean of the per-matrix energy CDFs (averaged before thresholding).
    pub mean_energy_cdf: Vec<f64>,
    pub rank_at: Vec<RankAt>,
}

/// How the attention spectra are produced; echoed into every summary.
pub const SWEEP_METHOD: &str =
    "post-softmax attention map per head; singular values via one-sided Jacobi; energy CDFs averaged over heads and instances before thresholding";

/// Runs the model on each input, decomposes every head's post-softmax
/// attention map in the selected layers and averages the energy CDFs.
pub fn attn_spectrum_sweep(model: &Model, inputs: &[Tensor], selector: &LayerSelector) -> Result<Vec<LayerSpectrum>> {
    if inputs.is_empty() {
        return Err(Error::Config("spectrum sweep needs at least one input".into()));
    }
    let layers: Vec<usize> = (0..model.depth()).filter(|&l| selector.matches(l)).collect();
    if layers.is_empty() {
        return Err(Error::Config(format!(
            "layer selector {selector:?} matches none of {} layers",
            model.depth()
        )));
    }

    // per layer: summed singular values, summed CDFs, matrix count, map shape
    type Acc = (Vec<f64>, Vec<f64>, usize, (usize, usize));
    let mut acc: Vec<Option<Acc>> = vec![None; model.depth()];
    for x in inputs {
        let maps = model.attention_maps(x)?;
        for &l in &layers {
            for map in &maps[l] {
                let svd = jacobi_svd(map)?;
                let cdf = energy_cdf(&svd.s);
                let entry = acc[l].get_or_insert_with(|| {
                    (
                        vec![0.0; cdf.len()],
                        vec![0.0; cdf.len()],
                        0,
                        (map.shape()[0], map.shape()[1]),
                    )
                });
                for (a, s) in entry.0.iter_mut().zip(&svd.s) {
                    *a += s;
                }
                for (a, c) in entry.1.iter_mut().zip(&cdf) {
                    *a += c;
                }
                entry.2 += 1;
            }
        }
    }

    Ok(layers
        .into_iter()
        .map(|l| {
            let (sv, cdf, count, shape) = acc[l].take().expect("every selected layer has maps");
            let k = count as f64;
            let mean_sv: Vec<f64> = sv.into_iter().map(|v| v / k).collect();
            let mean_cdf: Vec<f64> = cdf.into_iter().map(|v| v / k).collect();
            let rank_at = REPORTED_THRESHOLDS
                .iter()
                .map(|&threshold| RankAt {
                    threshold,
                    rank: rank_for_energy(&mean_cdf, threshold),
                })
                .collect();
            LayerSpectrum {
                layer: l,
                variant: model.blocks[l].variant().to_string(),
                matrices: count,
                map_shape: shape,
                mean_singular_values: mean_sv,
                mean_energy_cdf: mean_cdf,
                rank_at,
            }
        })
        .collect())
}

/// `layer,m,cdf_value` rows, `m` counted from 1.
pub fn spectra_csv(layers: &[LayerSpectrum]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["layer", "m", "cdf_value"])?;
    for ls in layers {
        for (i, c) in ls.mean_energy_cdf.iter().enumerate() {
            w.write_record([ls.layer.to_string(), (i + 1).to_string(), format!("{c:.12}")])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
