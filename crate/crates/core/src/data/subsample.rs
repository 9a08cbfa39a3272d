use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Deterministic fraction of `ds`, stratified by label when labels exist.
///
/// The result keeps the original sample order. Class quotas are
/// proportional with largest-remainder rounding to `⌊ratio·N⌋` total, and
/// every present class gets at least one sample when the total allows.
pub fn subsample(ds: &Dataset, ratio: f64, seed: u64) -> Result<Dataset> {
    const OP: &str = "subsample";
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Range {
            op: OP,
            msg: format!("ratio {ratio} outside (0, 1]"),
        });
    }
    let n = ds.len();
    let total = (ratio * n as f64 + 1e-9).floor() as usize;
    if total == 0 {
        return Err(Error::Range {
            op: OP,
            msg: format!("ratio {ratio} of {n} samples selects nothing"),
        });
    }
    if total == n {
        let mut out = ds.clone();
        out.lineage.push(format!("subsample(ratio {ratio}, seed {seed})"));
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = match &ds.labels {
        None => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            idx.truncate(total);
            idx
        }
        Some(labels) => {
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
            for (i, &y) in labels.iter().enumerate() {
                by_class[y].push(i);
            }
            let quotas = quotas(&by_class.iter().map(Vec::len).collect::<Vec<_>>(), total);
            let mut idx = Vec::with_capacity(total);
            for (members, q) in by_class.iter_mut().zip(quotas) {
                members.shuffle(&mut rng);
                idx.extend_from_slice(&members[..q]);
            }
            idx
        }
    };
    chosen.sort_unstable();
    let mut out = ds.select(&chosen)?;
    out.lineage.push(format!("subsample(ratio {ratio}, seed {seed})"));
    Ok(out)
}

/// Largest-remainder apportionment of `total` over class sizes, then a
/// floor of one per non-empty class taken from the largest quotas.
fn quotas(sizes: &[usize], total: usize) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    let exact: Vec<f64> = sizes.iter().map(|&s| s as f64 * total as f64 / n as f64).collect();
    let mut q: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = total - q.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).expect("finite").then(a.cmp(&b))
    });
    for &c in &order {
        if left == 0 {
            break;
        }
        if q[c] < sizes[c] {
            q[c] += 1;
            left -= 1;
        }
    }
    let present = sizes.iter().filter(|&&s| s > 0).count();
    if total >= present {
        for c in 0..sizes.len() {
            if sizes[c] > 0 && q[c] == 0 {
                let donor = (0..sizes.len()).max_by_key(|&d| (q[d], std::cmp::Reverse(d))).expect("classes");
                q[donor] -= 1;
                q[c] = 1;
            }
        }
    }
    q
}

/// Random partition into `(first, rest)` with `⌊fraction·N⌋` samples first.
/// Both parts keep original order.
pub fn split(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let n = ds.len();
    let k = (fraction * n as f64).floor() as usize;
    if k == 0 || k >= n {
        return Err(Error::Range {
            op: "split",
            msg: format!("fraction {fraction} of {n} samples leaves an empty part"),
        });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (a, b) = idx.split_at_mut(k);
    a.sort_unstable();
    b.sort_unstable();
    let mut first = ds.select(a)?;
    let mut rest = ds.select(b)?;
    first.lineage.push(format!("split(first {fraction}, seed {seed})"));
    rest.lineage.push(format!("split(rest {fraction}, seed {seed})"));
    Ok((first, rest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quotas_sum_to_total_and_cover_classes() {
        let q = quotas(&[1000; 10], 100);
        assert_eq!(q, vec![10; 10]);
        let q = quotas(&[5, 1, 994], 10);
        assert_eq!(q.iter().sum::<usize>(), 10);
        assert!(q.iter().all(|&v| v >= 1));
    }
}
