//! Attention-distribution analyzer: threshold sparsity and head/tail sink
//! mass over captured per-layer, per-head attention rows.

use crate::error::{Error, Result};

/// Default threshold for the sparsity ratio.
pub const DEFAULT_EPSILON: f64 = 0.05;
/// Head and tail sink windows cover the first and last three positions.
pub const SINK_WINDOW: usize = 3;

/// Captured attention rows: `layers[l][h]` is the final query row's
/// distribution over that layer's cached positions.
#[derive(Debug, Clone, Default)]
pub struct AttentionTrace {
    pub layers: Vec<Vec<Vec<f32>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatRow {
    pub layer: usize,
    pub head: usize,
    pub sparsity: f64,
    pub sink_head: f64,
    pub sink_tail: f64,
}

/// Per-layer/head metrics plus early/latter layer aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStats {
    pub rows: Vec<StatRow>,
    pub sparsity_early: f64,
    /// `None` when no layer falls past the cutoff.
    pub sparsity_latter: Option<f64>,
    pub sink_head_mean: f64,
    pub sink_tail_mean: f64,
}

/// Fraction of entries strictly above `epsilon`.
pub fn sparsity(p: &[f32], epsilon: f64) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::contract("empty attention distribution"));
    }
    let hits = p.iter().filter(|&&v| v as f64 > epsilon).count();
    Ok(hits as f64 / p.len() as f64)
}

/// Total mass on the first three positions.
pub fn sink_head(p: &[f32]) -> Result<f64> {
    check_sink_len(p)?;
    Ok(p[..SINK_WINDOW].iter().map(|&v| v as f64).sum())
}

/// Total mass on the last three positions.
pub fn sink_tail(p: &[f32]) -> Result<f64> {
    check_sink_len(p)?;
    Ok(p[p.len() - SINK_WINDOW..].iter().map(|&v| v as f64).sum())
}

fn check_sink_len(p: &[f32]) -> Result<()> {
    if p.len() < 2 * SINK_WINDOW {
        return Err(Error::contract(format!(
            "sink windows need length >= {}, got {}",
            2 * SINK_WINDOW,
            p.len()
        )));
    }
    Ok(())
}

/// Per-layer/head metrics and the early-vs-latter sparsity split at
/// `early_cutoff` (layers are 1-based; a layer is "early" when
/// `layer <= early_cutoff`).
pub fn summarize(trace: &AttentionTrace, early_cutoff: usize, epsilon: f64) -> Result<AttentionStats> {
    if trace.layers.is_empty() {
        return Err(Error::contract("empty attention trace"));
    }
    let mut rows = Vec::new();
    for (l, heads) in trace.layers.iter().enumerate() {
        for (h, p) in heads.iter().enumerate() {
            rows.push(StatRow {
                layer: l + 1,
                head: h,
                sparsity: sparsity(p, epsilon)?,
                sink_head: sink_head(p)?,
                sink_tail: sink_tail(p)?,
            });
        }
    }
    let mean = |f: &dyn Fn(&StatRow) -> bool, g: &dyn Fn(&StatRow) -> f64| -> Option<f64> {
        let vals: Vec<f64> = rows.iter().filter(|r| f(r)).map(|r| g(r)).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    let sparsity_early = mean(&|r| r.layer <= early_cutoff, &|r| r.sparsity).unwrap_or(0.0);
    let sparsity_latter = mean(&|r| r.layer > early_cutoff, &|r| r.sparsity);
    let sink_head_mean = mean(&|_| true, &|r| r.sink_head).unwrap();
    let sink_tail_mean = mean(&|_| true, &|r| r.sink_tail).unwrap();
    Ok(AttentionStats {
        rows,
        sparsity_early,
        sparsity_latter,
        sink_head_mean,
        sink_tail_mean,
    })
}

/// CSV with one row per (layer, head) and aggregate footer rows. An absent
/// latter-layer aggregate is marked `NA`.
pub fn to_csv(stats: &AttentionStats) -> String {
    let mut out = String::from("layer,head,sparsity,sink_head,sink_tail\n");
    for r in &stats.rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6}\n",
            r.layer, r.head, r.sparsity, r.sink_head, r.sink_tail
        ));
    }
    out.push_str(&format!("early,mean,{:.6},,\n", stats.sparsity_early));
    match stats.sparsity_latter {
        Some(v) => out.push_str(&format!("latter,mean,{v:.6},,\n")),
        None => out.push_str("latter,mean,NA,,\n"),
    }
    out.push_str(&format!(
        "all,mean,,{:.6},{:.6}\n",
        stats.sink_head_mean, stats.sink_tail_mean
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sparsity_uniform_below_threshold() {
        let p = vec![0.01f32; 100];
        assert_eq!(sparsity(&p, 0.05).unwrap(), 0.0);
    }

    #[test]
    fn sparsity_one_hot() {
        for n in [6usize, 10, 50] {
            let mut p = vec![0.0f32; n];
            p[n / 2] = 1.0;
            assert_relative_eq!(sparsity(&p, 0.05).unwrap(), 1.0 / n as f64);
        }
    }

    #[test]
    fn sparsity_hand_case() {
        let p = [0.5f32, 0.3, 0.1, 0.06, 0.04];
        assert_eq!(sparsity(&p, 0.05).unwrap(), 0.8);
    }

    #[test]
    fn sparsity_empty_errors() {
        assert!(sparsity(&[], 0.05).is_err());
    }

    #[test]
    fn sinks_one_hot_at_first_position() {
        let mut p = vec![0.0f32; 10];
        p[0] = 1.0;
        assert_eq!(sink_head(&p).unwrap(), 1.0);
        assert_eq!(sink_tail(&p).unwrap(), 0.0);
    }

    #[test]
    fn sinks_uniform_ten() {
        let p = vec![0.1f32; 10];
        assert_relative_eq!(sink_head(&p).unwrap(), 0.3, epsilon = 1e-7);
        assert_relative_eq!(sink_tail(&p).unwrap(), 0.3, epsilon = 1e-7);
    }

    #[test]
    fn sinks_partition_unity() {
        let p = [0.3f32, 0.05, 0.05, 0.1, 0.1, 0.1, 0.05, 0.05, 0.1, 0.1];
        let head = sink_head(&p).unwrap();
        let tail = sink_tail(&p).unwrap();
        let middle: f64 = p[3..7].iter().map(|&v| v as f64).sum();
        assert_relative_eq!(head + middle + tail, 1.0, epsilon = 1e-5);
    }

    #[test]
    fn sinks_too_short_errors() {
        assert!(sink_head(&[0.2f32; 5]).is_err());
    }

    #[test]
    fn summarize_hand_built_trace() {
        let d1 = vec![0.5f32, 0.3, 0.1, 0.06, 0.04, 0.0];
        let d2 = vec![1.0f32 / 6.0; 6];
        let trace = AttentionTrace {
            layers: vec![vec![d1.clone()], vec![d2.clone()]],
        };
        let stats = summarize(&trace, 1, 0.05).unwrap();
        assert_eq!(stats.rows.len(), 2);
        assert_relative_eq!(stats.rows[0].sparsity, 4.0 / 6.0, epsilon = 1e-9);
        assert_relative_eq!(stats.rows[1].sparsity, 1.0, epsilon = 1e-9);
        assert_relative_eq!(stats.sparsity_early, 4.0 / 6.0, epsilon = 1e-9);
        assert_relative_eq!(stats.sparsity_latter.unwrap(), 1.0, epsilon = 1e-9);
        assert_relative_eq!(stats.rows[0].sink_head, 0.9, epsilon = 1e-6);
    }

    #[test]
    fn summarize_degenerate_split() {
        let trace = AttentionTrace {
            layers: vec![vec![vec![1.0 / 8.0; 8]]],
        };
        let stats = summarize(&trace, 1, 0.05).unwrap();
        assert!(stats.sparsity_latter.is_none());
        let csv = to_csv(&stats);
        assert!(csv.contains("latter,mean,NA"));
    }

    #[test]
    fn csv_row_count_is_layers_times_heads() {
        let dist = vec![1.0 / 7.0; 7];
        let trace = AttentionTrace {
            layers: vec![vec![dist.clone(); 3]; 4],
        };
        let stats = summarize(&trace, 2, 0.05).unwrap();
        assert_eq!(stats.rows.len(), 12);
        let csv = to_csv(&stats);
        assert_eq!(csv.trim().lines().count(), 1 + 12 + 3);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn distribution(n: usize) -> impl Strategy<Value = Vec<f32>> {
            proptest::collection::vec(0.01f32..1.0, n).prop_map(|raw| {
                let sum: f32 = raw.iter().sum();
                raw.into_iter().map(|v| v / sum).collect()
            })
        }

        proptest! {
            #[test]
            fn metrics_bounded(p in distribution(12)) {
                let s = sparsity(&p, 0.05).unwrap();
                let h = sink_head(&p).unwrap();
                let t = sink_tail(&p).unwrap();
                prop_assert!((0.0..=1.0).contains(&s));
                prop_assert!((0.0..=1.0).contains(&h));
                prop_assert!((0.0..=1.0).contains(&t));
                prop_assert!(h + t <= 1.0 + 1e-6);
            }

            #[test]
            fn middle_permutation_invariance(p in distribution(10), swap in 0usize..3) {
                let mut q = p.clone();
                q.swap(3 + swap, 6 - swap);
                prop_assert_eq!(sink_head(&p).unwrap(), sink_head(&q).unwrap());
                prop_assert_eq!(sink_tail(&p).unwrap(), sink_tail(&q).unwrap());
            }

            #[test]
            fn sparsity_monotone_in_epsilon(p in distribution(16)) {
                let mut prev = f64::INFINITY;
                for eps in [0.0, 0.01, 0.05, 0.1, 0.5] {
                    let s = sparsity(&p, eps).unwrap();
                    prop_assert!(s <= prev);
                    prev = s;
                }
            }
        }
    }
}
