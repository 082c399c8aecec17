//! Forward-only attention kernels for cost measurement: no tape, no
//! allocation proportional to N^2. Used by the `bench` subcommand and the
//! complexity acceptance check.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::grid;

pub const BENCH_CHANNELS: usize = 16;

#[derive(Debug, Clone, Copy)]
pub struct BenchResult {
    pub n: usize,
    pub g: usize,
    /// Query-key pairs evaluated (the abstract cost model).
    pub token_pairs: u128,
    pub wall_ns: u128,
    /// Checksum of the output so the kernel cannot be optimized away.
    pub checksum: f64,
}

fn random_tokens(n: usize, c: usize, seed: u64) -> Vec<f64> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * c).map(|_| rng.gen::<f64>() - 0.5).collect()
}

/// Single-head scaled dot-product attention within `[start, end)`, writing
/// output rows in place. Q = K = V = the raw tokens (projections are constant
/// cost per token and irrelevant to the pair count being measured).
fn attend_span(tokens: &[f64], out: &mut [f64], start: usize, end: usize, c: usize) -> u128 {
    let len = end - start;
    let scale = 1.0 / (c as f64).sqrt();
    let mut scores = vec![0.0f64; len];
    for q in start..end {
        let qrow = &tokens[q * c..(q + 1) * c];
        let mut max = f64::NEG_INFINITY;
        for (j, k) in (start..end).enumerate() {
            let krow = &tokens[k * c..(k + 1) * c];
            let dot: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum();
            scores[j] = dot * scale;
            max = max.max(scores[j]);
        }
        let mut denom = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            denom += *s;
        }
        let orow = &mut out[q * c..(q + 1) * c];
        orow.fill(0.0);
        for (j, k) in (start..end).enumerate() {
            let w = scores[j] / denom;
            for (o, v) in orow.iter_mut().zip(&tokens[k * c..(k + 1) * c]) {
                *o += w * v;
            }
        }
    }
    (len as u128) * (len as u128)
}

/// Grouped attention over `ceil(n/g)` contiguous groups.
pub fn bench_grouped(n: usize, g: usize, seed: u64) -> crate::error::Result<BenchResult> {
    let c = BENCH_CHANNELS;
    let tokens = random_tokens(n, c, seed);
    let partition = grid::partition_len(n, g)?;
    let mut out = vec![0.0f64; n * c];
    let start_t = Instant::now();
    let mut pairs = 0u128;
    for &(s, e) in &partition.boundaries {
        pairs += attend_span(&tokens, &mut out, s, e, c);
    }
    let wall_ns = start_t.elapsed().as_nanos();
    Ok(BenchResult { n, g, token_pairs: pairs, wall_ns, checksum: out.iter().sum() })
}

/// Full attention over all n tokens, streamed row by row (O(n) memory).
pub fn bench_full(n: usize, g: usize, seed: u64) -> crate::error::Result<BenchResult> {
    let c = BENCH_CHANNELS;
    let tokens = random_tokens(n, c, seed);
    let mut out = vec![0.0f64; n * c];
    let start_t = Instant::now();
    let pairs = attend_span(&tokens, &mut out, 0, n, c);
    let wall_ns = start_t.elapsed().as_nanos();
    Ok(BenchResult { n, g, token_pairs: pairs, wall_ns, checksum: out.iter().sum() })
}

/// Least-squares slope of `y = m x` through the origin, plus R^2.
pub fn fit_through_origin(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let slope = sxy / sxx;
    let mean_y: f64 = ys.iter().sum::<f64>() / ys.len() as f64;
    let ss_tot: f64 = ys.iter().map(|y| (y - mean_y) * (y - mean_y)).sum();
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| {
        let r = y - slope * x;
        r * r
    }).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    (slope, r2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_counts_match_cost_model() {
        let r = bench_grouped(4096, 64, 1).unwrap();
        assert_eq!(r.token_pairs, 4096 * 64);
        let r = bench_grouped(10, 4, 1).unwrap();
        assert_eq!(r.token_pairs, 36);
        let r = bench_full(100, 4, 1).unwrap();
        assert_eq!(r.token_pairs, 10_000);
    }

    #[test]
    fn grouped_equals_full_when_one_group() {
        let a = bench_grouped(64, 64, 9).unwrap();
        let b = bench_full(64, 64, 9).unwrap();
        assert_eq!(a.token_pairs, b.token_pairs);
        assert!((a.checksum - b.checksum).abs() < 1e-9);
    }

    #[test]
    fn origin_fit_recovers_exact_line() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x| 64.0 * x).collect();
        let (slope, r2) = fit_through_origin(&xs, &ys);
        assert!((slope - 64.0).abs() < 1e-12);
        assert!(r2 > 0.999999);
    }
}
