use crate::error::{Error, Result};

/// Cohen's kappa from a square contingency table (`table[i][j]` = rater A said
/// `i`, rater B said `j`).
pub fn kappa_from_table(table: &[Vec<u64>]) -> Result<f64> {
    let k = table.len();
    if k == 0 || table.iter().any(|r| r.len() != k) {
        return Err(Error::dim("kappa", "contingency table must be square and non-empty"));
    }
    let n: u64 = table.iter().flatten().sum();
    if n == 0 {
        return Err(Error::Domain("kappa needs at least one rated item".into()));
    }
    let n = n as f64;
    let observed = (0..k).map(|i| table[i][i] as f64).sum::<f64>() / n;
    let expected: f64 = (0..k)
        .map(|i| {
            let row: u64 = table[i].iter().sum();
            let col: u64 = table.iter().map(|r| r[i]).sum();
            (row as f64 / n) * (col as f64 / n)
        })
        .sum();
    if expected == 1.0 {
        return if observed == 1.0 { Ok(1.0) } else { Err(Error::DegenerateMarginals { observed }) };
    }
    Ok((observed - expected) / (1.0 - expected))
}

/// Cohen's kappa between two label sequences over the alphabet `0..=max label`.
pub fn cohens_kappa(a: &[u32], b: &[u32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("kappa", format!("{} vs {} labels", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Domain("kappa needs at least one rated item".into()));
    }
    let k = a.iter().chain(b).copied().max().unwrap_or(0) as usize + 1;
    let mut table = vec![vec![0u64; k]; k];
    for (&x, &y) in a.iter().zip(b) {
        table[x as usize][y as usize] += 1;
    }
    kappa_from_table(&table)
}
