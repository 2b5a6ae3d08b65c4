use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Tensor;
use crate::seqmodel::PolicyModel;

pub const DEFAULT_R: f64 = 20.0;
pub const DEFAULT_EPS: f64 = 1e-8;

/// Diagonal-dominance statistics of one square matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkovStats {
    /// Every diagonal entry is strictly positive.
    pub r1_pass: bool,
    /// `mean|A_ii| / (mean|A_ij| + eps)` over `i != j`.
    pub ratio: f64,
    pub is_markov: bool,
    pub mean_abs_diag: f64,
    pub mean_abs_off: f64,
    pub min_diag: f64,
}

pub fn markov_stats(a: &Tensor, r: f64, eps: f64) -> Result<MarkovStats> {
    if a.shape().len() != 2 || !a.is_square() {
        return Err(Error::InvalidShape {
            op: "markov_stats",
            msg: format!("expected a square matrix, got {:?}", a.shape()),
        });
    }
    let d = a.rows();
    if d < 2 {
        return Err(Error::InvalidShape {
            op: "markov_stats",
            msg: "matrix must be at least 2 x 2".into(),
        });
    }
    let mut diag_sum = 0.0;
    let mut off_sum = 0.0;
    let mut min_diag = f64::INFINITY;
    for i in 0..d {
        for (j, v) in a.row(i).iter().enumerate() {
            if i == j {
                diag_sum += v.abs();
                min_diag = min_diag.min(*v);
            } else {
                off_sum += v.abs();
            }
        }
    }
    let mean_abs_diag = diag_sum / d as f64;
    let mean_abs_off = off_sum / (d * (d - 1)) as f64;
    let ratio = mean_abs_diag / (mean_abs_off + eps);
    let r1_pass = min_diag > 0.0;
    Ok(MarkovStats {
        r1_pass,
        ratio,
        is_markov: r1_pass && ratio > r,
        mean_abs_diag,
        mean_abs_off,
        min_diag,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadVerdict {
    pub layer: usize,
    pub head: usize,
    pub r1_pass: bool,
    pub r2_ratio: f64,
    pub is_markov: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovReport {
    pub r: f64,
    pub eps: f64,
    pub heads: Vec<HeadVerdict>,
}

impl MarkovReport {
    /// Builds a report from `(layer, head, W_q W_kᵀ)` triples.
    pub fn from_products<I>(products: I, r: f64, eps: f64) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize, Tensor)>,
    {
        let heads = products
            .into_iter()
            .map(|(layer, head, a)| {
                let s = markov_stats(&a, r, eps)?;
                Ok(HeadVerdict {
                    layer,
                    head,
                    r1_pass: s.r1_pass,
                    r2_ratio: s.ratio,
                    is_markov: s.is_markov,
                })
            })
            .collect::<Result<_>>()?;
        Ok(MarkovReport { r, eps, heads })
    }

    pub fn for_model(model: &PolicyModel, r: f64, eps: f64) -> Result<Self> {
        let cfg = model.config();
        let mut products = Vec::with_capacity(cfg.n_layers * cfg.n_heads);
        for l in 0..cfg.n_layers {
            for h in 0..cfg.n_heads {
                products.push((l, h, model.qk_product(l, h)?));
            }
        }
        Self::from_products(products, r, eps)
    }

    /// Heads judged Markov in `layer`.
    pub fn markov_heads(&self, layer: usize) -> Vec<usize> {
        self.heads
            .iter()
            .filter(|h| h.layer == layer && h.is_markov)
            .map(|h| h.head)
            .collect()
    }

    /// One row per head: layer, head, diagonal test, ratio, verdict.
    pub fn render_table(&self) -> String {
        let mut out = format!("# r = {}, eps = {:e}\n", self.r, self.eps);
        out.push_str("layer | head | diag | ratio | markov\n");
        for h in &self.heads {
            out.push_str(&format!(
                "{:>5} | {:>4} | {:>4} | {:>9.2} | {}\n",
                h.layer,
                h.head,
                if h.r1_pass { "yes" } else { "no" },
                h.r2_ratio,
                if h.is_markov { "yes" } else { "no" }
            ));
        }
        out
    }
}
