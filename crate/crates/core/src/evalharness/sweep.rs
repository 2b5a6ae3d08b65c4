use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One evaluation of a model family at a given context length and seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    /// Task metric: mean return, or mean episode length for mazes.
    pub metric: f64,
    pub g_markov: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    /// Means over seeds.
    pub metric: f64,
    pub g_markov: f64,
    /// `100 · G_Markov(k) / G_Markov(smallest k)`.
    pub r_markov: f64,
    pub per_seed: Vec<SweepPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub metric_name: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn row(&self, k: usize) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.k == k)
    }

    pub fn render(&self) -> String {
        let mut s = format!("{:>5} | {:>12} | {:>9} | {:>9}\n", "k", self.metric_name, "G_Markov", "R_Markov");
        s.push_str(&format!("{}\n", "-".repeat(45)));
        for r in &self.rows {
            s.push_str(&format!(
                "{:>5} | {:>12.4} | {:>9.4} | {:>8.1}%\n",
                r.k, r.metric, r.g_markov, r.r_markov
            ));
        }
        s
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.rows {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }
}

/// Evaluates `eval(k, seed)` over the grid and normalizes `G_Markov` to the
/// smallest `k`. `ks` must be strictly ascending with at least two entries.
pub fn context_sweep<F>(ks: &[usize], seeds: &[u64], metric_name: &str, mut eval: F) -> Result<SweepTable>
where
    F: FnMut(usize, u64) -> Result<SweepPoint>,
{
    if ks.len() < 2 {
        return Err(Error::invalid("a context sweep needs at least two values of k"));
    }
    if ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("context sweep ks must be strictly ascending"));
    }
    if seeds.is_empty() {
        return Err(Error::invalid("a context sweep needs at least one seed"));
    }
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let per_seed = seeds.iter().map(|&s| eval(k, s)).collect::<Result<Vec<_>>>()?;
        let n = per_seed.len() as f64;
        rows.push(SweepRow {
            k,
            metric: per_seed.iter().map(|p| p.metric).sum::<f64>() / n,
            g_markov: per_seed.iter().map(|p| p.g_markov).sum::<f64>() / n,
            r_markov: 0.0,
            per_seed,
        });
    }
    let base = rows[0].g_markov;
    for r in rows.iter_mut() {
        r.r_markov = if base > 0.0 { 100.0 * r.g_markov / base } else { f64::NAN };
    }
    Ok(SweepTable {
        metric_name: metric_name.into(),
        seeds: seeds.to_vec(),
        rows,
    })
}
