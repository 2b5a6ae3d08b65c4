use crate::error::{Error, Result};
use crate::numkernel::{Tape, Tensor, Var};

/// Per-head projections, each `d_model x d_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHeadParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

impl AttentionHeadParams {
    pub fn d_model(&self) -> usize {
        self.wq.rows()
    }

    pub fn d_k(&self) -> usize {
        self.wq.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.wq.shape().len() != 2 {
            return Err(Error::InvalidShape {
                op: "attention head",
                msg: format!("W_q must be a matrix, got {:?}", self.wq.shape()),
            });
        }
        for (name, w) in [("W_k", &self.wk), ("W_v", &self.wv)] {
            if w.shape() != self.wq.shape() {
                return Err(Error::InvalidShape {
                    op: "attention head",
                    msg: format!("{name} has shape {:?}, W_q has {:?}", w.shape(), self.wq.shape()),
                });
            }
        }
        Ok(())
    }

    /// `W_q · W_kᵀ`, `d_model x d_model`.
    pub fn qk_product(&self) -> Result<Tensor> {
        self.validate()?;
        self.wq.matmul(&self.wk.transpose())
    }

    /// Unscaled scores `(E W_q)(E W_k)ᵀ`.
    pub fn factored_scores(&self, e: &Tensor) -> Result<Tensor> {
        let q = e.matmul(&self.wq)?;
        let k = e.matmul(&self.wk)?;
        q.matmul(&k.transpose())
    }
}

/// Unscaled scores `E A Eᵀ` for a bilinear form `A`.
pub fn bilinear_scores(e: &Tensor, a: &Tensor) -> Result<Tensor> {
    e.matmul(a)?.matmul(&e.transpose())
}

/// Records one causal head on the tape. Returns the head output and the
/// attention probabilities.
pub(crate) fn head_on_tape(tape: &mut Tape, x: Var, wq: Var, wk: Var, wv: Var) -> Result<(Var, Var)> {
    let d_k = tape.value(wq).cols();
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let raw = tape.matmul_nt(q, k)?;
    let scores = tape.scale(raw, 1.0 / (d_k as f64).sqrt());
    let probs = tape.causal_softmax(scores)?;
    Ok((tape.matmul(probs, v)?, probs))
}

/// Causal single-head attention over the rows of `e`.
///
/// Scores are scaled by `1/sqrt(d_k)`. `capacity` is the largest accepted
/// number of tokens.
pub fn attention_head_forward(e: &Tensor, head: &AttentionHeadParams, capacity: usize) -> Result<Tensor> {
    head.validate()?;
    if e.rows() > capacity {
        return Err(Error::invalid(format!(
            "sequence of {} tokens exceeds capacity {capacity}",
            e.rows()
        )));
    }
    if e.cols() != head.d_model() {
        return Err(Error::shape("attention_head_forward", e.shape(), head.wq.shape()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(e.clone());
    let wq = tape.constant(head.wq.clone());
    let wk = tape.constant(head.wk.clone());
    let wv = tape.constant(head.wv.clone());
    let (out, _) = head_on_tape(&mut tape, x, wq, wk, wv)?;
    Ok(tape.value(out).clone())
}
