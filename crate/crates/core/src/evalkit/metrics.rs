use crate::error::{Error, Result};

fn check(golds: &[usize], preds: &[usize], c: usize) -> Result<()> {
    if golds.len() != preds.len() {
        return Err(Error::contract(format!(
            "{} gold labels but {} predictions",
            golds.len(),
            preds.len()
        )));
    }
    if golds.is_empty() {
        return Err(Error::contract("no labels to compare"));
    }
    if c < 2 {
        return Err(Error::contract("need at least two classes"));
    }
    if let Some(bad) = golds.iter().chain(preds).find(|&&l| l >= c) {
        return Err(Error::contract(format!("label {bad} outside [0, {c})")));
    }
    Ok(())
}

/// `C × C` counts, rows indexed by gold label, columns by prediction.
pub fn confusion_matrix(golds: &[usize], preds: &[usize], c: usize) -> Result<Vec<Vec<usize>>> {
    check(golds, preds, c)?;
    let mut m = vec![vec![0; c]; c];
    for (&g, &p) in golds.iter().zip(preds) {
        m[g][p] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kappa {
    pub value: f64,
    /// Both lists use one and the same class, so expected disagreement is
    /// zero; `value` is then 1.0 by convention.
    pub degenerate: bool,
}

/// Quadratic weighted kappa with its degeneracy flag.
pub fn qwk_detailed(golds: &[usize], preds: &[usize], c: usize) -> Result<Kappa> {
    let observed = confusion_matrix(golds, preds, c)?;
    // With integer weights (i − j)² the common 1/(C−1)² factor cancels and
    // both sums stay exact integers: κ = 1 − N·Σ w·O / Σ w·g_i·p_j.
    let mut hist_g = vec![0u64; c];
    let mut hist_p = vec![0u64; c];
    for (&g, &p) in golds.iter().zip(preds) {
        hist_g[g] += 1;
        hist_p[p] += 1;
    }
    let n = golds.len() as u64;
    let (mut num, mut den) = (0u64, 0u64);
    for i in 0..c {
        for j in 0..c {
            let w = (i.abs_diff(j) * i.abs_diff(j)) as u64;
            num += w * observed[i][j] as u64;
            den += w * hist_g[i] * hist_p[j];
        }
    }
    let (num, den) = ((n * num) as f64, den as f64);
    if den == 0.0 {
        return Ok(Kappa {
            value: 1.0,
            degenerate: true,
        });
    }
    Ok(Kappa {
        value: 1.0 - num / den,
        degenerate: false,
    })
}

pub fn qwk(golds: &[usize], preds: &[usize], c: usize) -> Result<f64> {
    qwk_detailed(golds, preds, c).map(|k| k.value)
}

pub fn accuracy(golds: &[usize], preds: &[usize]) -> Result<f64> {
    let c = golds.iter().chain(preds).max().map_or(2, |m| (m + 1).max(2));
    check(golds, preds, c)?;
    let hits = golds.iter().zip(preds).filter(|(g, p)| g == p).count();
    Ok(hits as f64 / golds.len() as f64)
}

/// Mean per-class F1 over the classes that occur in `golds` or `preds`.
pub fn macro_f1(golds: &[usize], preds: &[usize], c: usize) -> Result<f64> {
    let m = confusion_matrix(golds, preds, c)?;
    let mut sum = 0.0;
    let mut present = 0;
    for k in 0..c {
        let tp = m[k][k] as f64;
        let gold_k: usize = m[k].iter().sum();
        let pred_k: usize = m.iter().map(|row| row[k]).sum();
        if gold_k == 0 && pred_k == 0 {
            continue;
        }
        present += 1;
        if tp > 0.0 {
            let precision = tp / pred_k as f64;
            let recall = tp / gold_k as f64;
            sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    Ok(sum / present as f64)
}
