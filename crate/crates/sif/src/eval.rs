//! Ranking metrics (AUC, group-weighted AUC), the analytical cost model for
//! the factored/flat/pooled attention variants, and the sweep runner.

use crate::error::{Result, SifError};

#[derive(Clone, Debug)]
pub struct MetricReport {
    pub auc: f64,
    pub gauc: f64,
    pub logloss: f64,
    pub n_scored: usize,
    pub n_groups_used: usize,
    pub n_groups_skipped: usize,
    pub flops_per_example: u64,
}

impl MetricReport {
    pub fn csv_header() -> &'static str {
        "auc,gauc,logloss,n_scored,n_groups_used,n_groups_skipped,flops_per_example"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{},{},{},{}",
            self.auc,
            self.gauc,
            self.logloss,
            self.n_scored,
            self.n_groups_used,
            self.n_groups_skipped,
            self.flops_per_example
        )
    }
}

/// Probability that a uniformly random positive outranks a uniformly random
/// negative, ties counted 0.5. Computed via the rank statistic.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(SifError::Metric(
            "AUC needs at least one positive and one negative".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("NaN score"));
    // average ranks over tie runs (1-based ranks)
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Clone, Copy, Debug)]
pub struct GaucResult {
    pub value: f64,
    pub groups_used: usize,
    pub groups_skipped: usize,
    pub impressions_used: usize,
}

/// Impression-weighted mean of per-group AUC over groups containing both
/// classes; single-class groups are skipped and counted.
pub fn gauc(scores: &[f64], labels: &[bool], group_ids: &[u64]) -> Result<GaucResult> {
    assert_eq!(scores.len(), labels.len());
    assert_eq!(scores.len(), group_ids.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by_key(|&i| group_ids[i]);
    let mut weighted = 0.0;
    let mut used_impressions = 0usize;
    let mut used = 0usize;
    let mut skipped = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && group_ids[order[j + 1]] == group_ids[order[i]] {
            j += 1;
        }
        let idx = &order[i..=j];
        let g_scores: Vec<f64> = idx.iter().map(|&k| scores[k]).collect();
        let g_labels: Vec<bool> = idx.iter().map(|&k| labels[k]).collect();
        match auc(&g_scores, &g_labels) {
            Ok(a) => {
                weighted += a * idx.len() as f64;
                used_impressions += idx.len();
                used += 1;
            }
            Err(_) => skipped += 1,
        }
        i = j + 1;
    }
    if used == 0 {
        return Err(SifError::Metric("no group contains both classes".into()));
    }
    Ok(GaucResult {
        value: weighted / used_impressions as f64,
        groups_used: used,
        groups_skipped: skipped,
        impressions_used: used_impressions,
    })
}

/// Mean binary cross-entropy of probability scores.
pub fn logloss(probs: &[f64], labels: &[bool]) -> f64 {
    let n = probs.len().max(1) as f64;
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(1e-12, 1.0 - 1e-12);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / n
}

// --- analytical cost model -----------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionVariant {
    Factored,
    Flat,
    Pooled,
}

/// Per-example multiply-accumulate estimate, N blocks. Constants:
/// - every QKV/output projection is d0 x d0 applied per entry (4 per
///   attention, so 8 per factored block, 4 per flat/pooled block);
/// - attention score + value matmuls cost 2 * keys * queries * d0;
/// - the FFN is d0 -> 4*d0 -> d0, i.e. 8 * d0^2 per entry.
/// Softmax, layer-norm and bias adds are excluded. One MAC = 2 FLOPs.
#[derive(Clone, Copy, Debug)]
pub struct MacBreakdown {
    pub proj: u64,
    pub attn: u64,
    pub ffn: u64,
}

impl MacBreakdown {
    pub fn total(&self) -> u64 {
        self.proj + self.attn + self.ffn
    }
    pub fn flops(&self) -> u64 {
        2 * self.total()
    }
}

/// `heads` partitions the width but does not change the MAC count; it is
/// kept so callers state the configuration they run.
pub fn mac_estimate(
    l: usize,
    t: usize,
    d0: usize,
    n_blocks: usize,
    _heads: usize,
    variant: AttentionVariant,
) -> MacBreakdown {
    let (l1, t, d0, n) = (l as u64 + 1, t as u64, d0 as u64, n_blocks as u64);
    let per_block = match variant {
        AttentionVariant::Factored => MacBreakdown {
            proj: 8 * l1 * t * d0 * d0,
            attn: 2 * l1 * t * t * d0 + 2 * t * l1 * l1 * d0,
            ffn: 8 * l1 * t * d0 * d0,
        },
        AttentionVariant::Flat => MacBreakdown {
            proj: 4 * l1 * t * d0 * d0,
            attn: 2 * (l1 * t) * (l1 * t) * d0,
            ffn: 8 * l1 * t * d0 * d0,
        },
        AttentionVariant::Pooled => MacBreakdown {
            proj: 4 * l1 * d0 * d0,
            attn: 2 * l1 * l1 * d0,
            ffn: 8 * l1 * d0 * d0,
        },
    };
    MacBreakdown {
        proj: n * per_block.proj,
        attn: n * per_block.attn,
        ffn: n * per_block.ffn,
    }
}

pub fn flops_estimate(
    l: usize,
    t: usize,
    d0: usize,
    n_blocks: usize,
    heads: usize,
    variant: AttentionVariant,
) -> u64 {
    mac_estimate(l, t, d0, n_blocks, heads, variant).flops()
}

/// Closed-form ratio of flat to factored attention cost,
/// ((L+1)T)^2 / ((L+1)^2 T + (L+1) T^2); d0 cancels.
pub fn flat_factored_attn_ratio(l: usize, t: usize) -> f64 {
    let (l1, t) = (l as f64 + 1.0, t as f64);
    (l1 * t) * (l1 * t) / (l1 * l1 * t + l1 * t * t)
}

// --- sweeps ---------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    B,
    N,
    L,
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SweepAxis::B => write!(f, "B"),
            SweepAxis::N => write!(f, "N"),
            SweepAxis::L => write!(f, "L"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: u64,
    pub auc: f64,
    pub gauc: f64,
    pub flops_per_example: u64,
    pub error: Option<String>,
}

pub fn sweep_csv_header() -> &'static str {
    "axis,value,auc,gauc,flops_per_example,error"
}

pub fn sweep_csv_row(r: &SweepRow) -> String {
    format!(
        "{},{},{:.6},{:.6},{},{}",
        r.axis,
        r.value,
        r.auc,
        r.gauc,
        r.flops_per_example,
        r.error.clone().unwrap_or_default()
    )
}

/// Runs one training/eval per value; per-run failures are recorded and the
/// sweep continues.
pub fn sweep<F>(axis: SweepAxis, values: &[u64], mut run: F) -> Vec<SweepRow>
where
    F: FnMut(SweepAxis, u64) -> Result<(f64, f64, u64)>,
{
    values
        .iter()
        .map(|&v| match run(axis, v) {
            Ok((auc, gauc, flops)) => SweepRow {
                axis,
                value: v,
                auc,
                gauc,
                flops_per_example: flops,
                error: None,
            },
            Err(e) => SweepRow {
                axis,
                value: v,
                auc: f64::NAN,
                gauc: f64::NAN,
                flops_per_example: 0,
                error: Some(e.to_string()),
            },
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn worked_auc_example() {
        let scores = [0.1, 0.4, 0.35, 0.8];
        let labels = [false, false, true, true];
        assert!((auc(&scores, &labels).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_all_tied() {
        let labels = [true, false, true, false];
        let scores: Vec<f64> = labels.iter().map(|&l| l as u8 as f64).collect();
        assert!((auc(&scores, &labels).unwrap() - 1.0).abs() < 1e-12);
        let flat = [0.3; 4];
        assert!((auc(&flat, &labels).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn auc_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let n = rng.gen_range(2..200);
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.gen_range(0..20) as f64) / 20.0) // force ties
                .collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            labels[0] = true;
            labels[1] = false;
            let fast = auc(&scores, &labels).unwrap();
            let slow = brute_force_auc(&scores, &labels);
            assert!((fast - slow).abs() < 1e-12, "{} vs {}", fast, slow);
        }
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let scores: Vec<f64> = (0..100).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut labels: Vec<bool> = (0..100).map(|_| rng.gen_bool(0.3)).collect();
        labels[0] = true;
        labels[1] = false;
        let a = auc(&scores, &labels).unwrap();
        let warped: Vec<f64> = scores.iter().map(|&s| (2.0 * s).exp() + 7.0).collect();
        let b = auc(&warped, &labels).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn gauc_weighted_mean_and_skip() {
        // two groups with AUC 1.0 (10 impressions) and 0.5 (30 impressions)
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        let mut groups = Vec::new();
        for i in 0..10 {
            scores.push(i as f64);
            labels.push(i >= 5);
            groups.push(1u64);
        }
        for i in 0..30 {
            scores.push(0.0);
            labels.push(i % 2 == 0);
            groups.push(2u64);
        }
        // plus one single-class group that must be skipped
        scores.push(0.9);
        labels.push(true);
        groups.push(3u64);
        let r = gauc(&scores, &labels, &groups).unwrap();
        assert!((r.value - 0.625).abs() < 1e-12);
        assert_eq!(r.groups_used, 2);
        assert_eq!(r.groups_skipped, 1);
    }

    #[test]
    fn gauc_single_group_equals_auc() {
        let scores = [0.1, 0.4, 0.35, 0.8];
        let labels = [false, false, true, true];
        let groups = [7u64; 4];
        let r = gauc(&scores, &labels, &groups).unwrap();
        assert!((r.value - auc(&scores, &labels).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn gauc_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for _ in 0..100 {
            let n = rng.gen_range(4..200);
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..10) as f64)).collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            let groups: Vec<u64> = (0..n).map(|_| rng.gen_range(0..5)).collect();
            let fast = gauc(&scores, &labels, &groups);
            // oracle
            let mut weighted = 0.0;
            let mut used = 0.0;
            for g in 0..5u64 {
                let idx: Vec<usize> = (0..n).filter(|&i| groups[i] == g).collect();
                let has_pos = idx.iter().any(|&i| labels[i]);
                let has_neg = idx.iter().any(|&i| !labels[i]);
                if !(has_pos && has_neg) {
                    continue;
                }
                let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
                let l: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
                weighted += brute_force_auc(&s, &l) * idx.len() as f64;
                used += idx.len() as f64;
            }
            match fast {
                Ok(r) => assert!((r.value - weighted / used).abs() < 1e-12),
                Err(_) => assert_eq!(used, 0.0),
            }
        }
    }

    #[test]
    fn gauc_invariant_under_per_group_monotone_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let n = 120;
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let labels: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
        let groups: Vec<u64> = (0..n).map(|i| (i % 4) as u64).collect();
        let a = gauc(&scores, &labels, &groups).unwrap().value;
        let warped: Vec<f64> = scores
            .iter()
            .zip(&groups)
            .map(|(&s, &g)| match g {
                0 => s * 3.0 + 1.0,
                1 => s.exp(),
                2 => s.powi(3) + 0.1 * s,
                _ => s.atan() * 10.0,
            })
            .collect();
        let b = gauc(&warped, &labels, &groups).unwrap().value;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn mac_estimate_linear_in_n_and_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        for _ in 0..200 {
            let l = rng.gen_range(0..300);
            let t = rng.gen_range(1..40);
            let d0 = rng.gen_range(1..64);
            let n = rng.gen_range(1..8);
            for v in [
                AttentionVariant::Factored,
                AttentionVariant::Flat,
                AttentionVariant::Pooled,
            ] {
                let one = mac_estimate(l, t, d0, 1, 8, v).total();
                let many = mac_estimate(l, t, d0, n, 8, v).total();
                assert_eq!(many, one * n as u64, "not linear in N");
            }
            let est = mac_estimate(l, t, d0, 1, 8, AttentionVariant::Factored);
            let (l1, tt, dd) = (l as u64 + 1, t as u64, d0 as u64);
            assert_eq!(est.proj, 8 * l1 * tt * dd * dd);
            assert_eq!(est.attn, 2 * l1 * tt * tt * dd + 2 * tt * l1 * l1 * dd);
            assert_eq!(est.ffn, 8 * l1 * tt * dd * dd);
        }
    }

    #[test]
    fn sample_mixer_dominates_when_t_small() {
        // ratio of the two attention terms is (L+1)/T
        let l = 100;
        let t = 20;
        let d0 = 16;
        let tok = 2 * (l as u64 + 1) * (t as u64) * (t as u64) * d0 as u64;
        let smp = 2 * (t as u64) * (l as u64 + 1) * (l as u64 + 1) * d0 as u64;
        assert_eq!(smp / tok, (l as u64 + 1) / t as u64);
        // degenerate L=0 keeps only the token-mixer scale
        let est = mac_estimate(0, t, d0, 1, 8, AttentionVariant::Factored);
        assert_eq!(est.attn, 2 * t as u64 * t as u64 * d0 as u64 + 2 * t as u64 * d0 as u64);
    }

    #[test]
    fn flat_factored_ratio_value() {
        // ((L+1)T)^2 / ((L+1)^2 T + (L+1) T^2) at L=100, T=20 = 16.69...
        let r = flat_factored_attn_ratio(100, 20);
        assert!((r - 16.6942148760330578).abs() < 1e-9);
        let est_flat = mac_estimate(100, 20, 16, 1, 8, AttentionVariant::Flat).attn;
        let est_fac = mac_estimate(100, 20, 16, 1, 8, AttentionVariant::Factored).attn;
        assert!((est_flat as f64 / est_fac as f64 - r).abs() < 1e-9);
    }

    #[test]
    fn sweep_records_failures_and_continues() {
        let rows = sweep(SweepAxis::L, &[8, 16, 32], |_, v| {
            if v == 16 {
                Err(SifError::Metric("boom".into()))
            } else {
                Ok((0.7, 0.6, 100))
            }
        });
        assert_eq!(rows.len(), 3);
        assert!(rows[0].error.is_none());
        assert!(rows[1].error.is_some());
        assert!(rows[2].error.is_none());
    }

    #[test]
    fn single_value_sweep_single_row() {
        let rows = sweep(SweepAxis::N, &[4], |_, _| Ok((0.8, 0.75, 42)));
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].value, 4);
    }
}
