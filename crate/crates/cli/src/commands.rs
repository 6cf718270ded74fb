//! The `run`, `bench`, `diagnose` and `oracle` subcommands.

use std::fmt::Write as _;

use more_core::bench::{complexity_table, measure_scaling, ScalingReport, MIN_SCALING_STEPS};
use more_core::diagnostics::{diagnose, DiagnosticsReport};
use more_core::numerics::RngSeed;
use more_core::oracle::{run_suite, Suite};
use more_core::plot::{Chart, Series, Style};
use more_core::stream::{generate_stream, run_experiment, stream_checksum, EditRequest, MetricsReport};

use crate::config::Experiment;
use crate::error::CliError;
use crate::output::{sha256_hex, EffectiveRank, Manifest, OutputDir};

fn manifest(exp: &Experiment, command: &str, stream: &[EditRequest], content: &str, out: &OutputDir) -> Manifest {
    Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        seed: exp.seed,
        stream_checksum: format!("{:016x}", stream_checksum(stream)),
        content_sha256: sha256_hex(content.as_bytes()),
        nominal_rank: exp.preset.nominal_rank(),
        effective_rank: EffectiveRank {
            text: exp.hps.text.rank,
            projector: exp.hps.projector.rank,
        },
        files: out.files().clone(),
        sources: exp.sources.clone(),
        config: exp.echo.clone(),
    }
}

fn metrics_chart(report: &MetricsReport) -> Chart {
    let col = |f: fn(&more_core::stream::StepMetrics) -> f64| {
        report.steps.iter().map(|s| (s.t as f64, f(&s.metrics))).collect::<Vec<_>>()
    };
    Chart::new(&format!("{} per-step metrics", report.editor), "edit t", "score", Style::Line)
        .with_series(Series::new("avg", col(|m| m.avg())))
        .with_series(Series::new("t-loc", col(|m| m.tloc)))
        .with_series(Series::new("m-loc", col(|m| m.mloc)))
}

fn prepare(exp: &Experiment) -> Result<(OutputDir, more_core::experiment::Setup, Vec<EditRequest>), CliError> {
    // Fail on configuration before touching the filesystem.
    let setup = exp.setup()?;
    let stream = generate_stream(&exp.stream, &setup.model)?;
    let out = OutputDir::prepare(&exp.out)?;
    Ok((out, setup, stream))
}

pub fn run(exp: &Experiment) -> Result<String, CliError> {
    let (mut out, setup, stream) = prepare(exp)?;
    let mut editor = setup.editor(exp.editor)?;
    let report = run_experiment(editor.as_mut(), &setup.model, &stream, &exp.options)?;
    let summary = report.summary();
    out.write("metrics.csv", &report.to_csv())?;
    out.write("summary.txt", &summary)?;
    out.write("metrics.svg", &metrics_chart(&report).to_svg())?;
    let content = format!("{}\n{summary}", report.to_csv_without_timing());
    let m = manifest(exp, "run", &stream, &content, &out);
    out.finish(&m)?;
    Ok(summary)
}

pub fn bench(exp: &Experiment, editors: &[more_core::experiment::EditorKind]) -> Result<String, CliError> {
    if exp.stream.edits < MIN_SCALING_STEPS {
        return Err(CliError::Config(format!(
            "stream.edits: bench needs at least {MIN_SCALING_STEPS} edits, got {}",
            exp.stream.edits
        )));
    }
    let (mut out, setup, stream) = prepare(exp)?;
    let mut reports: Vec<ScalingReport> = Vec::new();
    let mut content = String::new();
    for &kind in editors {
        let mut editor = setup.editor(kind)?;
        let report = measure_scaling(editor.as_mut(), &setup.model, &stream)?;
        out.write(&format!("scaling_{kind}.csv"), &report.to_csv())?;
        for r in &report.records {
            let _ = writeln!(content, "{kind},{},{}", r.t, r.state_bytes);
        }
        reports.push(report);
    }

    let mut text = String::new();
    for r in &reports {
        let g = r.growth()?;
        let _ = writeln!(
            text,
            "{}: median ns {:.0} -> {:.0}, growth {:.2}, state bytes {}",
            r.editor,
            g.first_half_median_ns,
            g.second_half_median_ns,
            g.ratio(),
            if r.state_bytes_constant() { "constant" } else { "varying" }
        );
    }
    if reports.len() >= 2 {
        let table = complexity_table(&reports)?;
        out.write("complexity.md", &table)?;
        text.push('\n');
        text.push_str(&table);
    }

    let latency = reports.iter().fold(
        Chart::new("edit latency (rolling mean)", "edit t", "ns", Style::Line),
        |c, r| {
            let pts = r.rolling_mean_ns().into_iter().enumerate().map(|(i, v)| ((i + 1) as f64, v));
            c.with_series(Series::new(r.editor.clone(), pts.collect()))
        },
    );
    let memory = reports.iter().fold(Chart::new("editor state", "edit t", "bytes", Style::Line), |c, r| {
        let pts = r.records.iter().map(|x| (x.t as f64, x.state_bytes as f64));
        c.with_series(Series::new(r.editor.clone(), pts.collect()))
    });
    out.write("latency.svg", &latency.to_svg())?;
    out.write("memory.svg", &memory.to_svg())?;

    let m = manifest(exp, "bench", &stream, &content, &out);
    out.finish(&m)?;
    Ok(text)
}

fn lag_chart(report: &DiagnosticsReport) -> Chart {
    report.modules.iter().fold(
        Chart::new(&format!("{} update coupling by lag", report.editor), "lag", "mean cosine", Style::Line),
        |c, m| {
            let pts = m.lags.iter().filter_map(|p| p.mean_cosine.map(|v| (p.lag as f64, v)));
            c.with_series(Series::new(m.module.to_string(), pts.collect()))
        },
    )
}

fn drift_chart(report: &DiagnosticsReport) -> Chart {
    let pts = |v: &[[f64; 2]]| v.iter().map(|p| (p[0], p[1])).collect();
    Chart::new("final hidden state, reference axes", "pc1", "pc2", Style::Scatter)
        .with_series(Series::new("unedited", pts(&report.drift.reference_2d)))
        .with_series(Series::new(report.editor.clone(), pts(&report.drift.edited_2d)))
}

pub fn diagnose_cmd(exp: &Experiment) -> Result<String, CliError> {
    let (mut out, setup, stream) = prepare(exp)?;
    let mut editor = setup.editor(exp.editor)?;
    let report = diagnose(editor.as_mut(), &setup.model, &stream, &exp.diagnose)?;

    let files = [
        ("diag_lags.csv", report.lags_csv()),
        ("diag_pairwise.csv", report.pairwise_csv()),
        ("diag_modality.csv", report.modality_csv()),
        ("diag_drift.csv", report.drift_csv()),
        ("summary.txt", report.metrics.summary()),
    ];
    let mut content = String::new();
    for (name, text) in &files {
        out.write(name, text)?;
        content.push_str(text);
    }
    content.push_str(&report.metrics.to_csv_without_timing());
    out.write("diag_lags.svg", &lag_chart(&report).to_svg())?;
    out.write("diag_drift.svg", &drift_chart(&report).to_svg())?;

    let mut text = String::new();
    let _ = writeln!(text, "editor: {}  steps: {}", report.editor, report.steps);
    match report.lag1_cosine() {
        Some(c) => {
            let _ = writeln!(text, "lag-1 mean cosine: {c:.4}");
        }
        None => text.push_str("insufficient steps for lag curves\n"),
    }
    let _ = writeln!(
        text,
        "hidden drift vs unedited: mean {:.4}, max {:.4}",
        report.drift.mean, report.drift.max
    );
    for m in &report.modality {
        let _ = writeln!(
            text,
            "{}: mean output magnitude {:.4}",
            m.module, m.mean_output_magnitude
        );
    }

    let m = manifest(exp, "diagnose", &stream, &content, &out);
    out.finish(&m)?;
    Ok(text)
}

pub fn oracle(suite: &str, seed: u64) -> Result<String, CliError> {
    let suite: Suite = suite.parse()?;
    let checks = run_suite(suite, RngSeed(seed))?;
    let mut text = String::new();
    for c in &checks {
        let _ = writeln!(text, "{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    print!("{text}");
    if failed > 0 {
        return Err(CliError::OracleFailed { failed });
    }
    Ok(format!("{} of {} checks passed\n", checks.len(), checks.len()))
}
