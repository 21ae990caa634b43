//! Report emission: CSV tables and static SVG plots.
//!
//! All rows are written in sorted order and floats use Rust's shortest
//! round-trip formatting, so identical records produce byte-identical
//! files and the matrix CSV parses back losslessly.

use std::fmt::Write as _;
use std::path::Path;

use super::config::Method;
use super::eval::EvalRecord;
use super::matrix::{MatrixCell, SwitchRateRow};
use super::HarnessError;
use crate::simcore::MetricsFrame;

fn ensure_parent(path: &Path) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

/// Per-(scenario, method) aggregate table. With `paper_scale`, the three
/// sum metrics are divided by 100 as in the reference tables.
pub fn write_summary_csv(
    records: &[EvalRecord],
    path: &Path,
    paper_scale: bool,
) -> Result<(), HarnessError> {
    if records.is_empty() {
        return Err(HarnessError::EmptyRecords);
    }
    ensure_parent(path)?;
    let scale = if paper_scale { 0.01 } else { 1.0 };
    let mut out = String::from(
        "scenario,method,missing_probability,seeds,mean_delay,std_delay,mean_queue,std_queue,\
         mean_travel_time,std_travel_time,mean_arrived,switch_rate_requested_x1000,\
         switch_rate_executed_x1000\n",
    );
    let mut sorted: Vec<&EvalRecord> = records.iter().collect();
    sorted.sort_by(|a, b| (&a.scenario, a.method).cmp(&(&b.scenario, b.method)));
    for r in sorted {
        let arrived = r.rows.iter().map(|x| f64::from(x.arrived)).sum::<f64>()
            / r.rows.len().max(1) as f64;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.scenario,
            r.method.name(),
            r.missing_probability,
            r.rows.len(),
            r.mean_delay_sum() * scale,
            r.std_delay_sum() * scale,
            r.mean_queue_sum() * scale,
            r.std_queue_sum() * scale,
            r.mean_travel_time_sum() * scale,
            r.std_travel_time_sum() * scale,
            arrived,
            r.switch_rate_requested() * 1000.0,
            r.switch_rate_executed() * 1000.0,
        )
        .expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Raw per-seed rows, from which every summary aggregate is recomputable.
pub fn write_per_seed_csv(records: &[EvalRecord], path: &Path) -> Result<(), HarnessError> {
    if records.is_empty() {
        return Err(HarnessError::EmptyRecords);
    }
    ensure_parent(path)?;
    let mut out = String::from(
        "scenario,method,missing_probability,seed,steps,tsc_count,delay_sum,queue_sum,\
         travel_time_sum,arrived,departed,switches_requested,switches_executed\n",
    );
    let mut sorted: Vec<&EvalRecord> = records.iter().collect();
    sorted.sort_by(|a, b| (&a.scenario, a.method).cmp(&(&b.scenario, b.method)));
    for r in sorted {
        for row in &r.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.scenario,
                r.method.name(),
                r.missing_probability,
                row.seed,
                row.steps,
                row.tsc_count,
                row.delay_sum,
                row.queue_sum,
                row.travel_time_sum,
                row.arrived,
                row.departed,
                row.switches_requested,
                row.switches_executed,
            )
            .expect("string write");
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// The per-step metrics stream of a single run.
pub fn write_step_stream_csv(frames: &[MetricsFrame], path: &Path) -> Result<(), HarnessError> {
    ensure_parent(path)?;
    let mut out = String::from("step,sum_delay,sum_queue,switches,arrivals\n");
    for f in frames {
        writeln!(
            out,
            "{},{},{},{},{}",
            f.step, f.delay, f.queue_sum, f.switches_executed, f.arrivals
        )
        .expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Seed-averaged delay evolution per method (one column per record).
pub fn write_delay_evolution_csv(
    records: &[EvalRecord],
    path: &Path,
) -> Result<(), HarnessError> {
    if records.is_empty() {
        return Err(HarnessError::EmptyRecords);
    }
    ensure_parent(path)?;
    let steps = records.iter().map(|r| r.delay_per_step.len()).max().unwrap_or(0);
    let mut sorted: Vec<&EvalRecord> = records.iter().collect();
    sorted.sort_by(|a, b| (&a.scenario, a.method).cmp(&(&b.scenario, b.method)));
    let mut out = String::from("step");
    for r in &sorted {
        write!(out, ",{}:{}", r.scenario, r.method.name()).expect("string write");
    }
    out.push('\n');
    for step in 0..steps {
        write!(out, "{step}").expect("string write");
        for r in &sorted {
            match r.delay_per_step.get(step) {
                Some(d) => write!(out, ",{d}").expect("string write"),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Matrix table: one row per (scale, demand, method) cell.
pub fn write_matrix_csv(cells: &[MatrixCell], path: &Path) -> Result<(), HarnessError> {
    if cells.is_empty() {
        return Err(HarnessError::EmptyRecords);
    }
    ensure_parent(path)?;
    let mut out = String::from("scale,demand,method,mean_delay,normalized,degenerate,pool\n");
    let mut sorted: Vec<&MatrixCell> = cells.iter().collect();
    sorted.sort_by(|a, b| {
        (a.scale, a.demand, a.method)
            .partial_cmp(&(b.scale, b.demand, b.method))
            .expect("finite keys")
    });
    for c in sorted {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            c.scale, c.demand, c.method.name(), c.mean_delay, c.normalized, c.degenerate, c.pool
        )
        .expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Parses a matrix CSV back into cells (the lossless round-trip path).
pub fn read_matrix_csv(path: &Path) -> Result<Vec<MatrixCell>, HarnessError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| HarnessError::Csv(e.to_string()))?;
    let mut cells = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| HarnessError::Csv(e.to_string()))?;
        let field = |idx: usize| -> Result<&str, HarnessError> {
            record
                .get(idx)
                .ok_or_else(|| HarnessError::Csv(format!("missing column {idx}")))
        };
        cells.push(MatrixCell {
            scale: field(0)?.parse().map_err(|e| HarnessError::Csv(format!("scale: {e}")))?,
            demand: field(1)?.parse().map_err(|e| HarnessError::Csv(format!("demand: {e}")))?,
            method: field(2)?.parse()?,
            mean_delay: field(3)?
                .parse()
                .map_err(|e| HarnessError::Csv(format!("mean_delay: {e}")))?,
            normalized: field(4)?
                .parse()
                .map_err(|e| HarnessError::Csv(format!("normalized: {e}")))?,
            degenerate: field(5)?
                .parse()
                .map_err(|e| HarnessError::Csv(format!("degenerate: {e}")))?,
            pool: field(6)?.parse().map_err(|e| HarnessError::Csv(format!("pool: {e}")))?,
        });
    }
    Ok(cells)
}

/// Switch-rate table over the matrix grid.
pub fn write_switch_rate_csv(rows: &[SwitchRateRow], path: &Path) -> Result<(), HarnessError> {
    if rows.is_empty() {
        return Err(HarnessError::EmptyRecords);
    }
    ensure_parent(path)?;
    let mut out = String::from("scenario,method,switch_rate_requested_x1000,switch_rate_executed_x1000\n");
    let mut sorted: Vec<&SwitchRateRow> = rows.iter().collect();
    sorted.sort_by(|a, b| (&a.scenario, a.method).cmp(&(&b.scenario, b.method)));
    for r in sorted {
        writeln!(
            out,
            "{},{},{},{}",
            r.scenario, r.method.name(), r.requested_x1000, r.executed_x1000
        )
        .expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Line chart of seed-averaged delay per step, one polyline per record.
pub fn delay_evolution_svg(records: &[EvalRecord], title: &str) -> String {
    let width = 860.0;
    let height = 420.0;
    let margin = 60.0;
    let steps = records.iter().map(|r| r.delay_per_step.len()).max().unwrap_or(1).max(2);
    let max_delay = records
        .iter()
        .flat_map(|r| r.delay_per_step.iter())
        .cloned()
        .fold(1e-9, f64::max);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
        width / 2.0,
        xml_escape(title)
    );
    // Axes.
    let x0 = margin;
    let y0 = height - margin;
    let x1 = width - margin / 2.0;
    let y1 = margin / 2.0;
    write!(
        svg,
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">step</text>\n\
         <text x=\"14\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" \
         transform=\"rotate(-90 14 {})\" text-anchor=\"middle\">delay</text>\n\
         <text x=\"{x0}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\">0</text>\n\
         <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\">{max_delay:.1}</text>\n",
        (x0 + x1) / 2.0,
        y0 + 32.0,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        y0 + 14.0,
        x0 - 46.0,
        y1 + 4.0,
    )
    .expect("string write");

    for (idx, record) in records.iter().enumerate() {
        let color = PALETTE[idx % PALETTE.len()];
        let mut points = String::new();
        for (step, &d) in record.delay_per_step.iter().enumerate() {
            let x = x0 + (x1 - x0) * step as f64 / (steps - 1) as f64;
            let y = y0 - (y0 - y1) * (d / max_delay);
            write!(points, "{x:.2},{y:.2} ").expect("string write");
        }
        write!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{points}\"/>\n\
             <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"{color}\">{}</text>\n",
            x1 - 160.0,
            y1 + 16.0 * (idx as f64 + 1.0),
            xml_escape(&format!("{} {}", record.scenario, record.method.name()))
        )
        .expect("string write");
    }
    svg.push_str("</svg>\n");
    svg
}

/// Heatmap grids per method: rows = scales, columns = demands, shading by
/// the given per-cell value (already in [0, lo..hi]).
pub fn matrix_heatmap_svg(
    cells: &[MatrixCell],
    value: impl Fn(&MatrixCell) -> f64,
    value_max: f64,
    title: &str,
) -> String {
    let mut scales: Vec<u32> = cells.iter().map(|c| c.scale).collect();
    scales.sort_unstable();
    scales.dedup();
    let mut demands: Vec<f64> = cells.iter().map(|c| c.demand).collect();
    demands.sort_by(|a, b| a.partial_cmp(b).unwrap());
    demands.dedup();
    let mut methods: Vec<Method> = cells.iter().map(|c| c.method).collect();
    methods.sort();
    methods.dedup();

    let cell_px = 44.0;
    let grid_w = demands.len() as f64 * cell_px;
    let grid_h = scales.len() as f64 * cell_px;
    let pad = 56.0;
    let width = pad + methods.len() as f64 * (grid_w + pad);
    let height = grid_h + 120.0;

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"22\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
        width / 2.0,
        xml_escape(title)
    );
    for (m_idx, method) in methods.iter().enumerate() {
        let gx = pad + m_idx as f64 * (grid_w + pad);
        let gy = 56.0;
        writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">{}</text>",
            gx + grid_w / 2.0,
            gy - 8.0,
            method.name()
        )
        .expect("string write");
        for (s_idx, &scale) in scales.iter().enumerate() {
            for (d_idx, &demand) in demands.iter().enumerate() {
                let cell = cells
                    .iter()
                    .find(|c| c.method == *method && c.scale == scale && c.demand == demand);
                let v = cell.map(&value).unwrap_or(0.0);
                let t = (v / value_max).clamp(0.0, 1.0);
                // White → dark blue ramp.
                let channel = (255.0 * (1.0 - t * 0.85)) as u8;
                let x = gx + d_idx as f64 * cell_px;
                let y = gy + s_idx as f64 * cell_px;
                write!(
                    svg,
                    "<rect x=\"{x}\" y=\"{y}\" width=\"{cell_px}\" height=\"{cell_px}\" \
                     fill=\"rgb({channel},{channel},255)\" stroke=\"#999\"/>\n\
                     <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"9\" \
                     text-anchor=\"middle\">{:.0}</text>\n",
                    x + cell_px / 2.0,
                    y + cell_px / 2.0 + 3.0,
                    v
                )
                .expect("string write");
            }
        }
        // Axis labels.
        for (d_idx, demand) in demands.iter().enumerate() {
            writeln!(
                svg,
                "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{demand}</text>",
                gx + d_idx as f64 * cell_px + cell_px / 2.0,
                gy + grid_h + 14.0
            )
            .expect("string write");
        }
        for (s_idx, scale) in scales.iter().enumerate() {
            writeln!(
                svg,
                "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{scale}</text>",
                gx - 6.0,
                gy + s_idx as f64 * cell_px + cell_px / 2.0 + 3.0
            )
            .expect("string write");
        }
    }
    writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">demand (columns) × network scale (rows)</text>",
        width / 2.0,
        height - 12.0
    )
    .expect("string write");
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Convenience for tests: a summary CSV as an in-memory string.
#[cfg(test)]
pub(crate) fn summary_csv_string(
    records: &[EvalRecord],
    paper_scale: bool,
) -> Result<String, HarnessError> {
    let dir = std::env::temp_dir().join(format!("rglight-sum-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("summary.csv");
    write_summary_csv(records, &path, paper_scale)?;
    let text = std::fs::read_to_string(&path)?;
    let _ = std::fs::remove_file(&path);
    Ok(text)
}
