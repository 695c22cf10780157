//! Trace, certificate and plot files of a run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{GridError, Result};
use crate::sim::{RunCertificate, SimTrace};

pub const TRACE_FILE: &str = "trace.csv";
pub const CERTIFICATE_FILE: &str = "certificate.txt";

/// CSV text of a trace: one header line, then one line per sample.
pub fn trace_csv(trace: &SimTrace) -> Result<String> {
    if trace.samples.is_empty() {
        return Err(GridError::Data("trace has no samples".into()));
    }
    let (n, m) = (trace.layout.n, trace.layout.m);
    let mut out = String::from("t");
    for (prefix, count) in [("V", n), ("Is", n), ("ul", n), ("I", m)] {
        for k in 1..=count {
            write!(out, ",{prefix}_{k}").unwrap();
        }
    }
    out.push_str(",S,S_c,S_cl,kkt_residual\n");
    for s in &trace.samples {
        write!(out, "{:e}", s.t).unwrap();
        let applied = s.controller.u_l.map(|u| u.clamp(0.0, 1.0));
        for block in [&s.grid.v, &s.grid.i_s, &applied, &s.grid.i] {
            for x in block.iter() {
                write!(out, ",{x:e}").unwrap();
            }
        }
        writeln!(
            out,
            ",{:e},{:e},{:e},{:e}",
            s.plant_storage, s.controller_storage, s.total_storage, s.kkt_residual
        )
        .unwrap();
    }
    Ok(out)
}

pub fn certificate_text(name: &str, cert: &RunCertificate) -> String {
    let mut out = String::new();
    let w = &mut out;
    writeln!(w, "scenario: {name}").unwrap();
    writeln!(w, "converged: {}", if cert.converged { "yes" } else { "no" }).unwrap();
    match cert.convergence_time {
        Some(t) => writeln!(w, "convergence time: {t:.6e}").unwrap(),
        None => writeln!(w, "convergence time: none").unwrap(),
    }
    writeln!(w, "steps: {}", cert.steps).unwrap();
    writeln!(w, "final rate norm: {:.3e}", cert.final_rate_norm).unwrap();
    writeln!(w, "flexibility level: {:.6}", cert.lambda).unwrap();
    writeln!(w, "total demand: {:.6} A", cert.total_demand).unwrap();
    writeln!(
        w,
        "consumption reduction: {:.6} A ({:.4} %)",
        cert.reduction_amps, cert.reduction_percent
    )
    .unwrap();
    writeln!(w, "unconstrained optimum reduction: {:.4} %", cert.analytic_reduction_percent).unwrap();
    writeln!(w, "average voltage: {:.6} V", cert.average_voltage).unwrap();
    writeln!(
        w,
        "voltage range: [{:.6}, {:.6}] V",
        cert.v_min_observed, cert.v_max_observed
    )
    .unwrap();
    writeln!(w, "voltage band compliant: {}", if cert.band_compliant { "yes" } else { "no" }).unwrap();
    writeln!(w, "kkt residual: {:.3e}", cert.kkt.max).unwrap();
    for (part, value) in cert.kkt.breakdown() {
        writeln!(w, "  {part}: {value:.3e}").unwrap();
    }
    writeln!(w, "complementary slackness: {:.3e}", cert.complementarity).unwrap();
    writeln!(w, "plant steady-state residual: {:.3e}", cert.plant_residual).unwrap();
    writeln!(w, "loss identity gap: {:.3e}", cert.loss_identity_gap).unwrap();
    writeln!(w, "lyapunov violations: {}", cert.lyapunov_violations).unwrap();
    writeln!(w, "steady state:").unwrap();
    writeln!(w, "  node  V [V]  I_s [A]  u_l").unwrap();
    for i in 0..cert.steady.v.len() {
        writeln!(
            w,
            "  {:>4}  {:.6}  {:.6}  {:.6}",
            i + 1,
            cert.steady.v[i],
            cert.steady.i_s[i],
            cert.controller.u_l[i].clamp(0.0, 1.0)
        )
        .unwrap();
    }
    out
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

/// Line chart against `log10 t`; samples at `t <= 0` are skipped.
pub fn svg_chart(title: &str, y_label: &str, times: &[f64], series: &[Vec<f64>]) -> String {
    let (width, height) = (800.0, 420.0);
    let (left, right, top, bottom) = (70.0, 20.0, 40.0, 50.0);
    let keep: Vec<usize> = (0..times.len()).filter(|&k| times[k] > 0.0).collect();
    let xs: Vec<f64> = keep.iter().map(|&k| times[k].log10()).collect();
    let (mut x0, mut x1) = min_max(xs.iter().copied());
    let (mut y0, mut y1) = min_max(series.iter().flat_map(|s| keep.iter().map(move |&k| s[k])));
    if x1 <= x0 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 <= y0 {
        let pad = y0.abs().max(1.0) * 1e-3;
        y0 -= pad;
        y1 += pad;
    }
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (width - left - right);
    let py = |y: f64| height - bottom - (y - y0) / (y1 - y0) * (height - top - bottom);

    let mut out = String::new();
    let w = &mut out;
    writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    )
    .unwrap();
    writeln!(w, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(
        w,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        width / 2.0,
        escape(title)
    )
    .unwrap();
    writeln!(
        w,
        r#"<line x1="{left}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{left}" y1="{top}" x2="{left}" y2="{b}" stroke="black"/>"#,
        b = height - bottom,
        r = width - right
    )
    .unwrap();
    for k in 0..=4 {
        let fx = x0 + (x1 - x0) * k as f64 / 4.0;
        let fy = y0 + (y1 - y0) * k as f64 / 4.0;
        writeln!(
            w,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle">{fx:.2}</text>"#,
            px(fx),
            height - bottom + 16.0
        )
        .unwrap();
        writeln!(
            w,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="end">{}</text>"#,
            left - 6.0,
            py(fy) + 4.0,
            tick(fy, y1 - y0)
        )
        .unwrap();
    }
    writeln!(
        w,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">log10 t</text>"#,
        (left + width - right) / 2.0,
        height - 12.0
    )
    .unwrap();
    writeln!(
        w,
        r#"<text x="16" y="{y}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {y})">{}</text>"#,
        escape(y_label),
        y = (top + height - bottom) / 2.0
    )
    .unwrap();
    for (s, values) in series.iter().enumerate() {
        let points: Vec<String> = keep
            .iter()
            .zip(&xs)
            .map(|(&k, &x)| format!("{:.2},{:.2}", px(x), py(values[k])))
            .collect();
        writeln!(
            w,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.2" points="{}"/>"#,
            PALETTE[s % PALETTE.len()],
            points.join(" ")
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    out
}

fn min_max(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn tick(value: f64, span: f64) -> String {
    let digits = (2.0 - span.log10().floor()).clamp(0.0, 8.0) as usize;
    format!("{value:.digits$}")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// The three panels: node voltages, generated currents and load inputs.
pub fn trace_plots(trace: &SimTrace) -> Vec<(&'static str, String)> {
    let times: Vec<f64> = trace.times().collect();
    let n = trace.layout.n;
    let column = |f: &dyn Fn(&crate::sim::TraceSample, usize) -> f64| -> Vec<Vec<f64>> {
        (0..n).map(|i| trace.samples.iter().map(|s| f(s, i)).collect()).collect()
    };
    vec![
        (
            "voltage.svg",
            svg_chart("Node voltages", "V [V]", &times, &column(&|s, i| s.grid.v[i])),
        ),
        (
            "current.svg",
            svg_chart("Generated currents", "I_s [A]", &times, &column(&|s, i| s.grid.i_s[i])),
        ),
        (
            "ul.svg",
            svg_chart(
                "Load control inputs",
                "u_l",
                &times,
                &column(&|s, i| s.controller.u_l[i].clamp(0.0, 1.0)),
            ),
        ),
    ]
}

/// Writes `trace.csv`, `certificate.txt` and, with `plot`, the three SVG
/// panels into `dir`. Every file is rendered before the first write, and
/// each lands through a rename, so a failure leaves no partial file behind.
pub fn export_trace(
    name: &str,
    trace: &SimTrace,
    cert: &RunCertificate,
    dir: &Path,
    plot: bool,
) -> Result<Vec<PathBuf>> {
    let mut files = vec![
        (TRACE_FILE, trace_csv(trace)?),
        (CERTIFICATE_FILE, certificate_text(name, cert)),
    ];
    if plot {
        files.extend(trace_plots(trace));
    }
    std::fs::create_dir_all(dir).map_err(|source| GridError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut written = Vec::new();
    for (file, body) in files {
        let path = dir.join(file);
        let tmp = dir.join(format!(".{file}.tmp"));
        let io = |source| GridError::Io {
            path: path.clone(),
            source,
        };
        std::fs::write(&tmp, body).map_err(io)?;
        std::fs::rename(&tmp, &path).map_err(io)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{reference_config, run_config};

    fn short_run() -> crate::sim::ScenarioRun {
        let mut cfg = reference_config(2);
        cfg.topology = crate::network::GridTopology::ring(3).unwrap();
        cfg.flexibility.adopters = vec![true; 3];
        cfg.integration.decimation = 50;
        run_config(&cfg, None).unwrap()
    }

    #[test]
    fn csv_layout() {
        let run = short_run();
        let csv = trace_csv(&run.trace).unwrap();
        let lines: Vec<&str> = csv.split('\n').collect();
        assert_eq!(lines.last(), Some(&""));
        assert_eq!(lines.len() - 1, run.trace.samples.len() + 1);
        assert_eq!(
            lines[0],
            "t,V_1,V_2,V_3,Is_1,Is_2,Is_3,ul_1,ul_2,ul_3,I_1,I_2,I_3,S,S_c,S_cl,kkt_residual"
        );
        assert!(!csv.contains('\r'));
        for line in &lines[1..lines.len() - 1] {
            let cells: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
            assert_eq!(cells.len(), 17);
        }
        let first: Vec<f64> = lines[1].split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(first[0], 0.0);
        assert_eq!(first[1], 380.0);
    }

    #[test]
    fn certificate_lists_the_headline_numbers() {
        let run = short_run();
        let text = certificate_text("probe", &run.certificate);
        for key in ["converged: yes", "consumption reduction:", "average voltage:", "convergence time:", " %)"] {
            assert!(text.contains(key), "missing {key}:\n{text}");
        }
    }

    #[test]
    fn empty_trace_writes_nothing() {
        let run = short_run();
        let mut trace = run.trace.clone();
        trace.samples.clear();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        assert!(export_trace("x", &trace, &run.certificate, &out, true).is_err());
        assert!(!out.exists());
    }

    #[test]
    fn export_writes_all_files() {
        let run = short_run();
        let dir = tempfile::tempdir().unwrap();
        let files = export_trace("x", &run.trace, &run.certificate, dir.path(), true).unwrap();
        assert_eq!(files.len(), 5);
        let svg = std::fs::read_to_string(dir.path().join("voltage.svg")).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 3);
        let leftovers = std::fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".tmp"))
            .count();
        assert_eq!(leftovers, 0);
    }
}
