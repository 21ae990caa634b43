//! Generalization matrix over network scales × traffic demands, with the
//! per-cell min-max normalization of average delay across methods, and the
//! switch-rate analysis over the same grid.

use serde::{Deserialize, Serialize};

use super::config::{Method, NetworkSource, RunConfig, ScenarioSpec};
use super::eval::{evaluate, Checkpoints, EvalRecord};
use super::HarnessError;

/// One (scale, demand, method) cell of the generalization matrix.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MatrixCell {
    pub scale: u32,
    pub demand: f64,
    pub method: Method,
    /// Average delay per step, averaged over seeds.
    pub mean_delay: f64,
    /// Min-max normalized delay across the cell's method pool, in
    /// [0, 10000]; 0 for every method when the cell is degenerate.
    pub normalized: f64,
    /// All methods tied exactly (max = min) in this cell.
    pub degenerate: bool,
    /// Number of methods pooled for normalization.
    pub pool: usize,
}

/// Switch-rate summary for one cell, reported ×1000.
#[derive(Debug, Clone, Serialize)]
pub struct SwitchRateRow {
    pub scenario: String,
    pub method: Method,
    pub requested_x1000: f64,
    pub executed_x1000: f64,
}

/// Runs the full scale × demand grid for every method and normalizes each
/// cell across methods: `x' = (x − min)/(max − min) × 10000`.
///
/// Returns the normalized cells plus the underlying evaluation records
/// (which also carry the per-step action statistics for the switch-rate
/// report).
pub fn generalization_matrix(
    config: &RunConfig,
    scales: &[u32],
    demands: &[f64],
    methods: &[Method],
    checkpoints: &Checkpoints,
    horizon: u64,
    seeds: &[u64],
) -> Result<(Vec<MatrixCell>, Vec<EvalRecord>), HarnessError> {
    if methods.len() < 2 {
        return Err(HarnessError::Config(
            "normalization needs at least two methods".into(),
        ));
    }
    let mut scenarios = Vec::new();
    for &scale in scales {
        for &demand in demands {
            scenarios.push(ScenarioSpec::new(
                NetworkSource::Grid { rows: scale, cols: scale, lanes: 1 },
                demand,
                0.0,
                horizon,
                seeds.to_vec(),
            )?);
        }
    }
    let records = evaluate(config, &scenarios, methods, checkpoints)?;

    let mut cells = Vec::with_capacity(scales.len() * demands.len() * methods.len());
    for (cell_idx, _) in scenarios.iter().enumerate() {
        let scale = scales[cell_idx / demands.len()];
        let demand = demands[cell_idx % demands.len()];
        let cell_records: Vec<&EvalRecord> = records
            [cell_idx * methods.len()..(cell_idx + 1) * methods.len()]
            .iter()
            .collect();
        let values: Vec<f64> = cell_records.iter().map(|r| r.mean_step_delay()).collect();
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let degenerate = max == min;
        for (record, &value) in cell_records.iter().zip(values.iter()) {
            let normalized =
                if degenerate { 0.0 } else { (value - min) / (max - min) * 10_000.0 };
            cells.push(MatrixCell {
                scale,
                demand,
                method: record.method,
                mean_delay: value,
                normalized,
                degenerate,
                pool: methods.len(),
            });
        }
    }
    Ok((cells, records))
}

/// Mean per-step switch rates (requested and executed) ×1000 per record.
pub fn switch_rate_report(records: &[EvalRecord]) -> Vec<SwitchRateRow> {
    records
        .iter()
        .map(|r| SwitchRateRow {
            scenario: r.scenario.clone(),
            method: r.method,
            requested_x1000: r.switch_rate_requested() * 1000.0,
            executed_x1000: r.switch_rate_executed() * 1000.0,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_arithmetic_matches_spec_examples() {
        // Cell values {100, 200, 300}: the middle one maps to 5000 and the
        // endpoints to 0 and 10000.
        let values = [100.0, 200.0, 300.0];
        let min = 100.0;
        let max = 300.0;
        let normalized: Vec<f64> =
            values.iter().map(|v| (v - min) / (max - min) * 10_000.0).collect();
        assert_eq!(normalized, vec![0.0, 5_000.0, 10_000.0]);
    }

    #[test]
    fn matrix_requires_two_methods() {
        let config = RunConfig::default();
        let err = generalization_matrix(
            &config,
            &[2],
            &[4.0],
            &[Method::Fixed],
            &Checkpoints::default(),
            10,
            &[1],
        );
        assert!(matches!(err, Err(HarnessError::Config(_))));
    }

    #[test]
    fn small_matrix_runs_with_baselines_only() {
        let mut config = RunConfig::default();
        config.workers = 1;
        let (cells, records) = generalization_matrix(
            &config,
            &[2],
            &[2.0, 4.0],
            &[Method::Fixed, Method::Greedy],
            &Checkpoints::default(),
            60,
            &[1, 2],
        )
        .unwrap();
        assert_eq!(cells.len(), 4);
        assert_eq!(records.len(), 4);
        for cell in &cells {
            assert!((0.0..=10_000.0).contains(&cell.normalized));
            assert_eq!(cell.pool, 2);
        }
        // Each two-method cell has endpoints 0 and 10000 unless degenerate.
        for pair in cells.chunks(2) {
            if !pair[0].degenerate {
                let mut norms: Vec<f64> = pair.iter().map(|c| c.normalized).collect();
                norms.sort_by(|a, b| a.partial_cmp(b).unwrap());
                assert_eq!(norms, vec![0.0, 10_000.0]);
            }
        }
        let rates = switch_rate_report(&records);
        assert_eq!(rates.len(), 4);
        for r in &rates {
            assert!(r.requested_x1000 >= 0.0 && r.requested_x1000 <= 1000.0);
            assert!(r.executed_x1000 <= r.requested_x1000 + 1e-9);
        }
    }
}
