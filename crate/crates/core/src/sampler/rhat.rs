use crate::error::{Error, Result};
use crate::math::{mean, sample_variance};

/// Potential scale reduction factor `√((n−1)/n + B/(nW))` over equal-length
/// chains (the shortest length is used when they differ).
pub fn gelman_rubin(chains: &[Vec<f64>]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::domain("R-hat needs at least two chains"));
    }
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    if n < 10 {
        return Err(Error::domain("R-hat needs at least 10 draws per chain"));
    }
    let trimmed: Vec<&[f64]> = chains.iter().map(|c| &c[..n]).collect();
    let means: Vec<f64> = trimmed.iter().map(|c| mean(c)).collect();
    let w = mean(&trimmed.iter().map(|c| sample_variance(c)).collect::<Vec<_>>());
    if !(w > 0.0) {
        return Err(Error::Degenerate("zero within-chain variance".into()));
    }
    let nf = n as f64;
    let b = nf * sample_variance(&means);
    Ok(((nf - 1.0) / nf + b / (nf * w)).sqrt())
}
