//! Dynamic prompt weighting: InfoNCE lower-bound estimates of pairwise
//! mutual information between pooled cross-modal streams, softmax-normalized
//! into per-modality prompt weights.
//!
//! The estimates are computed on detached values and applied as constants:
//! the weight path carries no gradient back into the streams, and the
//! backbone losses stay untouched.

use crate::error::{Error, Result};
use crate::missing::Modality;
use crate::tensor::Tensor;

pub const DEFAULT_TAU: f64 = 0.1;

/// Pairwise MI lower bounds and the batch-level weight distribution.
#[derive(Clone, Debug)]
pub struct MiEstimate {
    /// Symmetrized estimates; diagonal unused. `i_sym[i][j] == i_sym[j][i]`
    /// exactly (stored as the mean of both directions).
    pub i_sym: [[f64; 3]; 3],
    /// Softmax of the per-modality scores (mean symmetric MI with the two
    /// partners).
    pub w: [f64; 3],
    pub tau: f64,
    /// Number of in-batch negatives (batch size − 1).
    pub k: usize,
}

fn cosine_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (b, d) = (t.rows(), t.cols());
    (0..b)
        .map(|i| {
            let row = t.row(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            (0..d).map(|j| row[j] / norm).collect()
        })
        .collect()
}

/// InfoNCE lower bound log(K) − L for per-sample embeddings of two
/// modalities; rows are matched pairs, the remaining B−1 rows serve as
/// negatives, scores are cosine similarity over `tau`.
pub fn infonce_mi(emb_i: &Tensor, emb_j: &Tensor, tau: f64) -> Result<f64> {
    let b = emb_i.rows();
    if b < 2 {
        return Err(Error::Contract(format!(
            "InfoNCE needs a batch of at least 2 (got {b}); no negatives exist"
        )));
    }
    if emb_i.shape() != emb_j.shape() {
        return Err(Error::Contract(format!(
            "embedding shape mismatch: {:?} vs {:?}",
            emb_i.shape(),
            emb_j.shape()
        )));
    }
    let ni = cosine_rows(emb_i);
    let nj = cosine_rows(emb_j);
    let k = (b - 1) as f64;
    let mut loss = 0.0;
    for a in 0..b {
        let scores: Vec<f64> = (0..b)
            .map(|c| ni[a].iter().zip(&nj[c]).map(|(x, y)| x * y).sum::<f64>() / tau)
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        loss += lse - scores[a];
    }
    loss /= b as f64;
    Ok(k.ln() - loss)
}

fn softmax3(s: [f64; 3]) -> [f64; 3] {
    let max = s[0].max(s[1]).max(s[2]);
    let e = [(s[0] - max).exp(), (s[1] - max).exp(), (s[2] - max).exp()];
    let sum = e[0] + e[1] + e[2];
    [e[0] / sum, e[1] / sum, e[2] / sum]
}

/// Symmetrized pairwise MI over the three pooled streams plus the default
/// (all-partners) weight distribution.
pub fn pairwise_weights(embs: &[Tensor; 3], tau: f64) -> Result<MiEstimate> {
    let b = embs[0].rows();
    if b < 2 {
        return Err(Error::Contract(format!("pairwise weights need a batch of at least 2, got {b}")));
    }
    let mut i_sym = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in (i + 1)..3 {
            let fwd = infonce_mi(&embs[i], &embs[j], tau)?;
            let bwd = infonce_mi(&embs[j], &embs[i], tau)?;
            let sym = 0.5 * (fwd + bwd);
            i_sym[i][j] = sym;
            i_sym[j][i] = sym;
        }
    }
    let scores = modality_scores(&i_sym, [true; 3]);
    Ok(MiEstimate { i_sym, w: softmax3(scores), tau, k: b - 1 })
}

/// Per-modality score: mean symmetric MI with the allowed partners. For a
/// generated (not originally present) modality only originally-present
/// partners count; present modalities always use both others.
fn modality_scores(i_sym: &[[f64; 3]; 3], original_present: [bool; 3]) -> [f64; 3] {
    Modality::ALL.map(|m| {
        let others = m.others();
        let partners: Vec<usize> = if original_present[m.index()] {
            others.iter().map(|o| o.index()).collect()
        } else {
            let present: Vec<usize> = others
                .iter()
                .filter(|o| original_present[o.index()])
                .map(|o| o.index())
                .collect();
            if present.is_empty() {
                others.iter().map(|o| o.index()).collect()
            } else {
                present
            }
        };
        partners.iter().map(|&p| i_sym[m.index()][p]).sum::<f64>() / partners.len() as f64
    })
}

/// Weight distribution for one sample given which modalities were originally
/// present before generation.
pub fn sample_weights(est: &MiEstimate, original_present: [bool; 3]) -> [f64; 3] {
    softmax3(modality_scores(&est.i_sym, original_present))
}
