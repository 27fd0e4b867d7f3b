//! Parameter counting and overhead reporting.
//!
//! Counts come from exhaustive enumeration of instantiated parameter
//! tensors; the closed form in [`crate::gnconv::gnconv_param_count`] is the
//! independent cross-check. Deltas compare against the same configuration
//! with the convolutional path disabled.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::Result;
use crate::esa::FusionMode;
use crate::gnconv::dimension_schedule;
use crate::model::{build_model, GncformerModel, ModelConfig};

#[derive(Debug, Clone)]
pub struct ParamReport {
    /// Named counts grouped by module path (layer granularity).
    pub groups: Vec<(String, usize)>,
    pub total: usize,
    /// Parameters added by one enhanced attention block, from enumeration.
    pub per_layer_esa_overhead: usize,
    /// Total minus the plain-attention baseline of the same configuration.
    pub delta_vs_plain: usize,
}

fn group_key(name: &str) -> String {
    let mut parts = name.split('.');
    match (parts.next(), parts.next(), parts.next()) {
        (Some(a), Some(b), Some(_)) => format!("{a}.{b}"),
        (Some(a), Some(_), None) => a.to_string(),
        (Some(a), None, _) => a.to_string(),
        _ => name.to_string(),
    }
}

/// Enumerate every parameter tensor of a built model.
pub fn count_parameters(model: &GncformerModel) -> Result<ParamReport> {
    let mut groups: BTreeMap<String, usize> = BTreeMap::new();
    let mut per_layer = 0usize;
    let overhead_prefix = if model.config().esa_in_encoder {
        Some("encoder.0.attn.gnconv.")
    } else if model.config().esa_in_decoder {
        Some("decoder.0.self_attn.gnconv.")
    } else {
        None
    };
    for e in model.store().entries() {
        *groups.entry(group_key(&e.name)).or_default() += e.numel();
        if let Some(prefix) = overhead_prefix {
            if e.name.starts_with(prefix) {
                per_layer += e.numel();
            }
        }
    }
    let total = model.store().total_params();
    let mut plain_cfg = model.config().clone();
    plain_cfg.fusion = FusionMode::None;
    let plain = build_model(&plain_cfg, 0)?;
    Ok(ParamReport {
        groups: groups.into_iter().collect(),
        total,
        per_layer_esa_overhead: per_layer,
        delta_vs_plain: total - plain.store().total_params(),
    })
}

#[derive(Debug, Clone)]
pub struct OverheadRow {
    pub order: usize,
    pub total_params: usize,
    pub delta_params: usize,
    pub schedule: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct OverheadTable {
    pub rows: Vec<OverheadRow>,
}

/// One row per interaction order: total size, delta against the
/// plain-attention baseline, and the split-width schedule.
pub fn overhead_table(base: &ModelConfig, orders: &[usize]) -> Result<OverheadTable> {
    let mut plain_cfg = base.clone();
    plain_cfg.fusion = FusionMode::None;
    let plain_total = build_model(&plain_cfg, 0)?.store().total_params();
    let mut rows = Vec::with_capacity(orders.len());
    for &order in orders {
        let mut cfg = base.clone();
        cfg.order = order;
        let schedule = dimension_schedule(cfg.model_dim, order)?;
        let total = build_model(&cfg, 0)?.store().total_params();
        rows.push(OverheadRow {
            order,
            total_params: total,
            delta_params: total - plain_total,
            schedule,
        });
    }
    Ok(OverheadTable { rows })
}

fn schedule_string(schedule: &[usize]) -> String {
    schedule
        .iter()
        .map(|w| w.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

impl OverheadTable {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>5}  {:>12}  {:>12}  schedule",
            "order", "total_params", "delta_params"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>5}  {:>12}  {:>12}  {}",
                r.order,
                r.total_params,
                r.delta_params,
                schedule_string(&r.schedule)
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("order,total_params,delta_params,schedule\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                r.order,
                r.total_params,
                r.delta_params,
                schedule_string(&r.schedule)
            );
        }
        s
    }
}

impl ParamReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (name, count) in &self.groups {
            let _ = writeln!(s, "{name:<24} {count:>12}");
        }
        let _ = writeln!(s, "{:<24} {:>12}", "total", self.total);
        let _ = writeln!(
            s,
            "{:<24} {:>12}",
            "per_layer_esa_overhead", self.per_layer_esa_overhead
        );
        let _ = writeln!(s, "{:<24} {:>12}", "delta_vs_plain", self.delta_vs_plain);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnconv::gnconv_param_count;
    use crate::params::{ParamBuilder, ParamStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn paper_like(order: usize) -> ModelConfig {
        ModelConfig {
            encoder_layers: 6,
            decoder_layers: 6,
            model_dim: 256,
            heads: 4,
            ffn_dim: 1024,
            order,
            kernel: 32,
            esa_in_encoder: true,
            esa_in_decoder: false,
            source_vocab: 64,
            target_vocab: 64,
            max_len: 32,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn affine_with_bias_counts_fifteen() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        pb.affine("map", 4, 3);
        assert_eq!(store.total_params(), 15);
    }

    #[test]
    fn groups_sum_to_total() {
        let model = build_model(&ModelConfig::default(), 0).unwrap();
        let report = count_parameters(&model).unwrap();
        let sum: usize = report.groups.iter().map(|(_, c)| c).sum();
        assert_eq!(sum, report.total);
    }

    #[test]
    fn per_layer_overhead_matches_closed_form_at_paper_scale() {
        let model = build_model(&paper_like(5), 0).unwrap();
        let report = count_parameters(&model).unwrap();
        assert_eq!(report.per_layer_esa_overhead, 257_744);
        assert_eq!(
            report.per_layer_esa_overhead,
            gnconv_param_count(256, 5, 32, true).unwrap()
        );
        assert_eq!(report.delta_vs_plain, 6 * 257_744);
    }

    #[test]
    fn six_layer_delta_sits_within_ten_percent_of_reported_gap() {
        let model = build_model(&paper_like(5), 0).unwrap();
        let report = count_parameters(&model).unwrap();
        let reported = 1_460_000.0;
        let delta = report.delta_vs_plain as f64;
        assert_eq!(report.delta_vs_plain, 1_546_464);
        assert!((delta - reported).abs() <= 0.10 * reported);
    }

    #[test]
    fn order_spread_consistent_with_near_constant_sizes() {
        let t = overhead_table(&paper_like(5), &[3, 9]).unwrap();
        let spread = t.rows[1].delta_params - t.rows[0].delta_params;
        assert!(spread < 30_000, "spread {spread}");
    }

    #[test]
    fn overhead_table_reproduces_published_schedules() {
        let t = overhead_table(&paper_like(5), &[3, 5, 7, 9]).unwrap();
        assert_eq!(t.rows[0].schedule, vec![64, 64, 128, 256]);
        assert_eq!(t.rows[1].schedule, vec![16, 16, 32, 64, 128, 256]);
        assert_eq!(t.rows[2].schedule, vec![4, 4, 8, 16, 32, 64, 128, 256]);
        assert_eq!(t.rows[3].schedule, vec![1, 1, 2, 4, 8, 16, 32, 64, 128, 256]);
        let csv = t.to_csv();
        assert!(csv.starts_with("order,total_params,delta_params,schedule\n"));
        assert!(csv.contains("16 16 32 64 128 256"), "{csv}");
    }

    #[test]
    fn order_one_delta_is_layers_times_gconv_cost() {
        let t = overhead_table(&paper_like(5), &[1]).unwrap();
        assert_eq!(
            t.rows[0].delta_params,
            6 * gnconv_param_count(256, 1, 32, true).unwrap()
        );
    }

    #[test]
    fn overhead_monotone_in_kernel_and_order() {
        for dim in [16usize, 64, 256] {
            let mut prev = 0;
            for order in 1..=5 {
                let c = gnconv_param_count(dim, order, 7, true).unwrap();
                assert!(c >= prev, "dim {dim} order {order}");
                prev = c;
            }
            let mut prev = 0;
            for kernel in [1usize, 7, 32] {
                let c = gnconv_param_count(dim, 3, kernel, true).unwrap();
                assert!(c >= prev, "dim {dim} kernel {kernel}");
                prev = c;
            }
        }
    }
}
