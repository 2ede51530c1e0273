//! Cross-layer accumulation of keypoint→visual attention and the resulting
//! patch relevance ranking.

use std::fmt::Write;

use crate::config::n_high;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// EMA of keypoint attention slices, `[heads × M × N_c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLedger {
    ema: Option<Tensor>,
    pub beta: f64,
    pub layers_seen: usize,
}

impl AttentionLedger {
    pub fn new(beta: f64) -> Self {
        Self {
            ema: None,
            beta,
            layers_seen: 0,
        }
    }

    /// Ledger resumed from an explicit accumulator state.
    pub fn with_state(ema: Tensor, beta: f64, layers_seen: usize) -> Self {
        Self {
            ema: Some(ema),
            beta,
            layers_seen,
        }
    }

    pub fn ema(&self) -> Option<&Tensor> {
        self.ema.as_ref()
    }

    /// `Ā ← β·Ā + (1−β)·Â`. The first slice seeds the accumulator directly.
    pub fn ema_update(&mut self, slice: &Tensor) -> Result<()> {
        match &mut self.ema {
            None => self.ema = Some(slice.clone()),
            Some(acc) => {
                if acc.shape() != slice.shape() {
                    return Err(shape_err(
                        "ema_update",
                        format!("{:?} vs {:?}", acc.shape(), slice.shape()),
                    ));
                }
                // a + (1-β)(s-a): same recurrence, and exact when s == a
                let w = 1.0 - self.beta;
                for (a, s) in acc.data_mut().iter_mut().zip(slice.data()) {
                    *a += w * (s - *a);
                }
            }
        }
        self.layers_seen += 1;
        Ok(())
    }

    /// Mean over heads and keypoints of the accumulator, one score per visual token.
    pub fn correlation_scores(&self) -> Result<Vec<f64>> {
        let ema = self.ema.as_ref().ok_or(Error::EmptyLedger)?;
        let [h, m, n] = ema.shape() else {
            return Err(shape_err(
                "correlation_scores",
                format!("{:?}", ema.shape()),
            ));
        };
        let (h, m, n) = (*h, *m, *n);
        let mut s = vec![0.0; n];
        for row in ema.data().chunks(n) {
            for (acc, v) in s.iter_mut().zip(row) {
                *acc += v;
            }
        }
        let denom = (h * m) as f64;
        s.iter_mut().for_each(|v| *v /= denom);
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub scores: Vec<f64>,
    /// Promoted coarse indices, ascending.
    pub high_idx: Vec<usize>,
    /// Every other coarse index, ascending.
    pub low_idx: Vec<usize>,
}

impl SelectionResult {
    pub fn n_high(&self) -> usize {
        self.high_idx.len()
    }

    pub fn is_selected(&self, i: usize) -> bool {
        self.high_idx.binary_search(&i).is_ok()
    }

    /// `index,score,selected` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,score,selected\n");
        for (i, s) in self.scores.iter().enumerate() {
            let _ = writeln!(out, "{i},{s:.17e},{}", u8::from(self.is_selected(i)));
        }
        out
    }
}

/// Keeps the `floor(alpha · N_c)` highest-scoring patches. Ties go to the lower index.
pub fn select_patches(scores: &[f64], alpha: f64) -> Result<SelectionResult> {
    let n = scores.len();
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!("alpha {alpha} outside (0, 1]")));
    }
    let k = n_high(alpha, n);
    if k == 0 {
        return Err(Error::DegenerateSelection { alpha, n_coarse: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut high_idx = order[..k].to_vec();
    let mut low_idx = order[k..].to_vec();
    high_idx.sort_unstable();
    low_idx.sort_unstable();
    Ok(SelectionResult {
        scores: scores.to_vec(),
        high_idx,
        low_idx,
    })
}

/// Feeds every layer's keypoint slice through a fresh ledger and ranks the patches.
pub fn accumulate_and_select(
    slices: &[Tensor],
    beta: f64,
    alpha: f64,
) -> Result<(AttentionLedger, SelectionResult)> {
    let mut ledger = AttentionLedger::new(beta);
    for s in slices {
        ledger.ema_update(s)?;
    }
    let scores = ledger.correlation_scores()?;
    let sel = select_patches(&scores, alpha)?;
    Ok((ledger, sel))
}
