//! Per-edit cost along a stream: editor-only wall time with a phase
//! breakdown, editor state bytes, rolling means and half-vs-half growth.

use std::fmt::Write as _;

use crate::editor::OnlineEditor;
use crate::error::{Error, Result};
use crate::stream::EditRequest;
use crate::toymodel::ToyModel;

/// Leading steps excluded from growth statistics.
pub const WARMUP_STEPS: usize = 3;
pub const ROLLING_WINDOW: usize = 10;
/// Shortest stream accepted by [`measure_scaling`].
pub const MIN_SCALING_STEPS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScalingRecord {
    pub t: usize,
    pub editor_time_ns: u64,
    pub state_bytes: usize,
    pub write_ns: u64,
    pub pool_ns: u64,
    pub absorb_ns: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Growth {
    /// Median over `WARMUP_STEPS < t ≤ T/2`.
    pub first_half_median_ns: f64,
    /// Median over `T/2 < t ≤ T`.
    pub second_half_median_ns: f64,
}

impl Growth {
    pub fn ratio(&self) -> f64 {
        self.second_half_median_ns / self.first_half_median_ns
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingReport {
    pub editor: String,
    pub records: Vec<ScalingRecord>,
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Trailing mean over up to `window` values ending at each position.
pub fn rolling_mean(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for i in 0..values.len() {
        sum += values[i];
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

impl ScalingReport {
    pub fn horizon(&self) -> usize {
        self.records.len()
    }

    pub fn times_ns(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.editor_time_ns as f64).collect()
    }

    pub fn rolling_mean_ns(&self) -> Vec<f64> {
        rolling_mean(&self.times_ns(), ROLLING_WINDOW)
    }

    /// Median time over the 1-based step range `lo..=hi`.
    pub fn median_time_ns(&self, lo: usize, hi: usize) -> Option<f64> {
        let mut v: Vec<f64> = self
            .records
            .iter()
            .filter(|r| (lo..=hi).contains(&r.t))
            .map(|r| r.editor_time_ns as f64)
            .collect();
        median(&mut v)
    }

    pub fn growth(&self) -> Result<Growth> {
        let t = self.horizon();
        let half = t / 2;
        if half <= WARMUP_STEPS {
            return Err(Error::Contract(format!("growth needs more than {} steps", 2 * WARMUP_STEPS)));
        }
        Ok(Growth {
            first_half_median_ns: self.median_time_ns(WARMUP_STEPS + 1, half).expect("non-empty range"),
            second_half_median_ns: self.median_time_ns(half + 1, t).expect("non-empty range"),
        })
    }

    pub fn state_bytes_constant(&self) -> bool {
        self.records.windows(2).all(|w| w[0].state_bytes == w[1].state_bytes)
    }

    pub fn state_bytes_strictly_increasing(&self) -> bool {
        self.records.windows(2).all(|w| w[0].state_bytes < w[1].state_bytes)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,time_ns,rolling_mean_ns,state_bytes,write_ns,pool_ns,absorb_ns\n");
        for (r, m) in self.records.iter().zip(self.rolling_mean_ns()) {
            let _ = writeln!(
                out,
                "{},{},{:.1},{},{},{},{}",
                r.t, r.editor_time_ns, m, r.state_bytes, r.write_ns, r.pool_ns, r.absorb_ns
            );
        }
        out
    }
}

/// Feed the stream to the editor, timing only its own work per step.
pub fn measure_scaling(
    editor: &mut dyn OnlineEditor,
    model: &ToyModel,
    stream: &[EditRequest],
) -> Result<ScalingReport> {
    if stream.len() < MIN_SCALING_STEPS {
        return Err(Error::Config(format!(
            "scaling needs at least {MIN_SCALING_STEPS} edits, got {}",
            stream.len()
        )));
    }
    let ns = |d: std::time::Duration| u64::try_from(d.as_nanos()).unwrap_or(u64::MAX);
    let mut records = Vec::with_capacity(stream.len());
    for (i, request) in stream.iter().enumerate() {
        let outcome = editor.edit(model, request)?;
        records.push(ScalingRecord {
            t: i + 1,
            editor_time_ns: ns(outcome.editor_time),
            state_bytes: editor.state_bytes(),
            write_ns: ns(outcome.phases.write),
            pool_ns: ns(outcome.phases.pool),
            absorb_ns: ns(outcome.phases.absorb),
        });
    }
    Ok(ScalingReport {
        editor: editor.label().to_string(),
        records,
    })
}

/// Asymptotic per-edit classes (time, memory, t-dependence) by editor label.
pub fn predicted_class(editor: &str) -> (&'static str, &'static str, &'static str) {
    match editor {
        "more" => ("O(|L| d_out r^2)", "O(|L| d_out r)", "O(1)"),
        "finetune" => ("O(|L| d_out r)", "O(|L| d_out r)", "O(1)"),
        "unfrozen-a" => ("O(|L| (d_out r^2 + d r))", "O(|L| (d_out + d) r)", "O(1)"),
        "target-match" | "prox" => ("O(d^3)", "O(d^2)", "O(1)"),
        "nullspace" => ("O(d t^2)", "O(d t)", "grows"),
        _ => ("?", "?", "?"),
    }
}

/// Markdown-style comparison of measured medians against predicted classes.
pub fn complexity_table(reports: &[ScalingReport]) -> Result<String> {
    if reports.len() < 2 {
        return Err(Error::Contract("complexity table needs at least two reports".into()));
    }
    let mut out = String::from(
        "| editor | predicted time | predicted memory | predicted t-dep | median ns (first half) | median ns (second half) | growth | state bytes (first/last) | t-independent |\n\
         |---|---|---|---|---|---|---|---|---|\n",
    );
    for r in reports {
        let (time, mem, dep) = predicted_class(&r.editor);
        let g = r.growth()?;
        let first = r.records.first().map(|x| x.state_bytes).unwrap_or(0);
        let last = r.records.last().map(|x| x.state_bytes).unwrap_or(0);
        let _ = writeln!(
            out,
            "| {} | {time} | {mem} | {dep} | {:.0} | {:.0} | {:.2} | {first}/{last} | {} |",
            r.editor,
            g.first_half_median_ns,
            g.second_half_median_ns,
            g.ratio(),
            if r.state_bytes_constant() { "yes" } else { "no" }
        );
    }
    Ok(out)
}
