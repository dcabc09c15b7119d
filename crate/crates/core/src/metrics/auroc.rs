use crate::error::{Error, Result};
use crate::gradcore::Tensor;

/// Area under the ROC curve via the Mann–Whitney statistic; tied scores
/// count one half.
pub fn auroc_binary(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Metric("scores and labels differ in length".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric("AUROC needs both positive and negative samples".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Binary AUROC on the second probability column, or the macro average of
/// one-vs-rest AUROCs for more classes.
pub fn auroc(probabilities: &Tensor, labels: &[usize]) -> Result<f64> {
    let k = probabilities.cols();
    if probabilities.rows() != labels.len() {
        return Err(Error::Metric("probabilities and labels differ in length".into()));
    }
    let column = |c: usize| -> Vec<f64> { (0..labels.len()).map(|i| probabilities.get(i, c)).collect() };
    if k == 2 {
        let pos: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
        return auroc_binary(&column(1), &pos);
    }
    let mut total = 0.0;
    for c in 0..k {
        let pos: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        total += auroc_binary(&column(c), &pos)?;
    }
    Ok(total / k as f64)
}
