//! Synthetic online edit streams and the five evaluation metrics.
//!
//! After each edit `t` the harness scores request `t` on reliability, text and
//! visual generality, and on text/multimodal locality against the model as it
//! stood right before the step.

use std::fmt::Write as _;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::editor::{EditOutcome, OnlineEditor};
use crate::error::{Error, Result};
use crate::numerics::{RngSeed, SeededRng};
use crate::toymodel::{sample_generator, Sample, ToyModel, WeightEdits, PROB_FLOOR};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    /// Number of edits `T`.
    pub edits: usize,
    /// Probes generated per kind.
    pub probes: usize,
    /// Query noise of text-generality probes; `None` means `0.1 σ_t`.
    pub eps_q: Option<f64>,
    /// Visual noise of multimodal-generality probes; `None` means `0.1 σ_v`.
    pub eps_v: Option<f64>,
    pub seed: RngSeed,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            edits: 100,
            probes: 4,
            eps_q: None,
            eps_v: None,
            seed: RngSeed(1),
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.edits == 0 {
            return Err(Error::Config("stream.edits must be at least 1".into()));
        }
        if self.probes == 0 {
            return Err(Error::Config("stream.probes must be at least 1".into()));
        }
        for (name, eps) in [("eps_q", self.eps_q), ("eps_v", self.eps_v)] {
            if let Some(e) = eps {
                if !(e >= 0.0 && e.is_finite()) {
                    return Err(Error::Config(format!("stream.{name} must be non-negative")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditRequest {
    /// Edit input; its label equals `target`.
    pub sample: Sample,
    pub target: usize,
    pub text_probes: Vec<Sample>,
    pub visual_probes: Vec<Sample>,
    pub text_locality_probes: Vec<Sample>,
    pub mm_locality_probes: Vec<Sample>,
}

/// Draw `T` requests whose targets all differ from the pre-edit prediction.
pub fn generate_stream(config: &StreamConfig, model: &ToyModel) -> Result<Vec<EditRequest>> {
    config.validate()?;
    let mc = model.config();
    if mc.vocab < 2 {
        return Err(Error::Config("vocab of 1 leaves no target different from the prediction".into()));
    }
    let eps_q = config.eps_q.unwrap_or(0.1 * mc.sigma_t);
    let eps_v = config.eps_v.unwrap_or(0.1 * mc.sigma_v);
    let mut base = sample_generator(mc, config.seed.derive(0));
    let mut unrelated = sample_generator(mc, config.seed.derive(1));
    let mut noise = SeededRng::new(config.seed.derive(2));
    let no_edits = crate::toymodel::NoEdits;

    let mut out = Vec::with_capacity(config.edits);
    for _ in 0..config.edits {
        let mut sample = base.next().expect("endless stream");
        let current = model.forward(&no_edits, &sample)?.argmax();
        let mut target = sample.y;
        while target == current {
            target = base.rng().below(mc.vocab);
        }
        sample.y = target;
        let text_probes = (0..config.probes)
            .map(|_| {
                let mut p = sample.clone();
                for x in &mut p.x_q {
                    *x += eps_q * noise.normal();
                }
                p
            })
            .collect();
        let visual_probes = (0..config.probes)
            .map(|_| {
                let mut p = sample.clone();
                for x in &mut p.x_v {
                    *x += eps_v * noise.normal();
                }
                p
            })
            .collect();
        let text_locality_probes = (0..config.probes)
            .map(|_| unrelated.next().expect("endless stream").text_only())
            .collect();
        let mm_locality_probes = (0..config.probes)
            .map(|_| unrelated.next().expect("endless stream"))
            .collect();
        out.push(EditRequest {
            sample,
            target,
            text_probes,
            visual_probes,
            text_locality_probes,
            mm_locality_probes,
        });
    }
    Ok(out)
}

/// Order-sensitive FNV-1a digest of every value in the stream.
pub fn stream_checksum(stream: &[EditRequest]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for b in bytes {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for r in stream {
        eat(&(r.target as u64).to_le_bytes());
        let groups = [
            std::slice::from_ref(&r.sample),
            &r.text_probes[..],
            &r.visual_probes[..],
            &r.text_locality_probes[..],
            &r.mm_locality_probes[..],
        ];
        for s in groups.into_iter().flatten() {
            for x in s.x_v.iter().chain(&s.x_q) {
                eat(&x.to_bits().to_le_bytes());
            }
            eat(&(s.y as u64).to_le_bytes());
        }
    }
    h
}

/// `KL(p ‖ q)` in nats with both sides floored at [`PROB_FLOOR`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.max(PROB_FLOOR).ln() - qi.max(PROB_FLOOR).ln()))
        .sum::<f64>()
        .max(0.0)
}

/// `exp(−KL(p_t ‖ p_prev))`.
pub fn locality_score(p_t: &[f64], p_prev: &[f64]) -> f64 {
    (-kl_divergence(p_t, p_prev)).exp()
}

fn hits<E: WeightEdits + ?Sized>(model: &ToyModel, edits: &E, probes: &[Sample], target: usize) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::Contract("no probes to evaluate".into()));
    }
    let mut n = 0usize;
    for p in probes {
        if model.forward(edits, p)?.argmax() == target {
            n += 1;
        }
    }
    Ok(n as f64 / probes.len() as f64)
}

/// 1 when the edited prediction on the request equals its target.
pub fn reliability<E: WeightEdits + ?Sized>(model: &ToyModel, edits: &E, request: &EditRequest) -> Result<f64> {
    hits(model, edits, std::slice::from_ref(&request.sample), request.target)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeKind {
    Text,
    Visual,
}

pub fn generality<E: WeightEdits + ?Sized>(
    model: &ToyModel,
    edits: &E,
    request: &EditRequest,
    kind: ProbeKind,
) -> Result<f64> {
    let probes = match kind {
        ProbeKind::Text => &request.text_probes,
        ProbeKind::Visual => &request.visual_probes,
    };
    hits(model, edits, probes, request.target)
}

fn probe_probs<E: WeightEdits + ?Sized>(model: &ToyModel, edits: &E, probes: &[Sample]) -> Result<Vec<Vec<f64>>> {
    probes.iter().map(|p| Ok(model.forward(edits, p)?.probs)).collect()
}

fn mean_locality(now: &[Vec<f64>], prev: &[Vec<f64>]) -> f64 {
    let total: f64 = now.iter().zip(prev).map(|(a, b)| locality_score(a, b)).sum();
    total / now.len() as f64
}

/// Mean `exp(−KL)` between two edit states over the probes.
pub fn locality<E1, E2>(model: &ToyModel, edits_t: &E1, edits_prev: &E2, probes: &[Sample]) -> Result<f64>
where
    E1: WeightEdits + ?Sized,
    E2: WeightEdits + ?Sized,
{
    if probes.is_empty() {
        return Err(Error::Contract("no locality probes".into()));
    }
    let now = probe_probs(model, edits_t, probes)?;
    let prev = probe_probs(model, edits_prev, probes)?;
    Ok(mean_locality(&now, &prev))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub rel: f64,
    pub tgen: f64,
    pub mgen: f64,
    pub tloc: f64,
    pub mloc: f64,
}

impl StepMetrics {
    pub fn avg(&self) -> f64 {
        (self.rel + self.tgen + self.mgen + self.tloc + self.mloc) / 5.0
    }

    pub fn mean(items: &[StepMetrics]) -> StepMetrics {
        let n = items.len().max(1) as f64;
        let mut m = StepMetrics::default();
        for s in items {
            m.rel += s.rel;
            m.tgen += s.tgen;
            m.mgen += s.mgen;
            m.tloc += s.tloc;
            m.mloc += s.mloc;
        }
        m.rel /= n;
        m.tgen /= n;
        m.mgen /= n;
        m.tloc /= n;
        m.mloc /= n;
        m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based edit index.
    pub t: usize,
    pub metrics: StepMetrics,
    pub editor_time: Duration,
    pub state_bytes: usize,
    pub write_norm: f64,
    /// `(T-Loc, M-Loc)` of the step's locality probes against the pre-edit model.
    pub loc_vs_initial: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub editor: String,
    pub steps: Vec<StepRecord>,
    /// Rel/T-Gen/M-Gen of every request re-checked under the final state;
    /// locality columns stay step-local.
    pub reeval_final: Option<StepMetrics>,
}

impl MetricsReport {
    pub fn horizon(&self) -> StepMetrics {
        let all: Vec<StepMetrics> = self.steps.iter().map(|s| s.metrics).collect();
        StepMetrics::mean(&all)
    }

    /// Per-step table: `t,rel,tgen,mgen,tloc,mloc,avg,editor_time_ns,state_bytes`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,rel,tgen,mgen,tloc,mloc,avg,editor_time_ns,state_bytes\n");
        for s in &self.steps {
            let m = &s.metrics;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                s.t,
                m.rel,
                m.tgen,
                m.mgen,
                m.tloc,
                m.mloc,
                m.avg(),
                s.editor_time.as_nanos(),
                s.state_bytes
            );
        }
        out
    }

    /// Same table with the timing column dropped, for reproducibility digests.
    pub fn to_csv_without_timing(&self) -> String {
        self.to_csv()
            .lines()
            .map(|line| {
                let mut cols: Vec<&str> = line.split(',').collect();
                cols.remove(7);
                cols.join(",")
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Horizon averages ×100 with two decimals.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let row = |label: &str, m: &StepMetrics| {
            format!(
                "{label:<14}{:>8.2}{:>8.2}{:>8.2}{:>8.2}{:>8.2}{:>8.2}\n",
                100.0 * m.rel,
                100.0 * m.tgen,
                100.0 * m.mgen,
                100.0 * m.tloc,
                100.0 * m.mloc,
                100.0 * m.avg()
            )
        };
        let _ = writeln!(out, "editor: {}", self.editor);
        let _ = writeln!(out, "edits: {}", self.steps.len());
        let _ = writeln!(
            out,
            "{:<14}{:>8}{:>8}{:>8}{:>8}{:>8}{:>8}",
            "", "Rel.", "T-Gen.", "M-Gen.", "T-Loc.", "M-Loc.", "Avg."
        );
        out.push_str(&row("immediate", &self.horizon()));
        if let Some(m) = &self.reeval_final {
            out.push_str(&row("reeval-final", m));
        }
        let drift: Vec<(f64, f64)> = self.steps.iter().filter_map(|s| s.loc_vs_initial).collect();
        if !drift.is_empty() {
            let n = drift.len() as f64;
            let (t, m) = drift.iter().fold((0.0, 0.0), |acc, d| (acc.0 + d.0, acc.1 + d.1));
            let _ = writeln!(
                out,
                "locality vs pre-edit model (not a step-local metric): T-Loc {:.2}  M-Loc {:.2}",
                100.0 * t / n,
                100.0 * m / n
            );
        }
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentOptions {
    /// Re-score every request's efficacy under the final state.
    pub reeval_final: bool,
    /// Also score locality against the pre-edit model.
    pub drift_vs_initial: bool,
}

/// Run the editor over the stream, scoring each request right after its own step.
pub fn run_experiment(
    editor: &mut dyn OnlineEditor,
    model: &ToyModel,
    stream: &[EditRequest],
    opts: &ExperimentOptions,
) -> Result<MetricsReport> {
    run_experiment_with(editor, model, stream, opts, |_, _| Ok(()))
}

/// [`run_experiment`] with a hook called after every step with the 1-based
/// step index and the edit outcome, while the editor is in its post-step state.
pub fn run_experiment_with<F>(
    editor: &mut dyn OnlineEditor,
    model: &ToyModel,
    stream: &[EditRequest],
    opts: &ExperimentOptions,
    mut after_step: F,
) -> Result<MetricsReport>
where
    F: FnMut(&dyn OnlineEditor, &EditOutcome) -> Result<()>,
{
    if stream.is_empty() {
        return Err(Error::Config("stream is empty".into()));
    }
    let no_edits = crate::toymodel::NoEdits;
    let mut steps = Vec::with_capacity(stream.len());
    for (i, request) in stream.iter().enumerate() {
        let prev_t = probe_probs(model, editor.weights(), &request.text_locality_probes)?;
        let prev_m = probe_probs(model, editor.weights(), &request.mm_locality_probes)?;

        let outcome = editor.edit(model, request)?;

        let w = editor.weights();
        let now_t = probe_probs(model, w, &request.text_locality_probes)?;
        let now_m = probe_probs(model, w, &request.mm_locality_probes)?;
        let metrics = StepMetrics {
            rel: reliability(model, w, request)?,
            tgen: generality(model, w, request, ProbeKind::Text)?,
            mgen: generality(model, w, request, ProbeKind::Visual)?,
            tloc: mean_locality(&now_t, &prev_t),
            mloc: mean_locality(&now_m, &prev_m),
        };
        let loc_vs_initial = if opts.drift_vs_initial {
            let base_t = probe_probs(model, &no_edits, &request.text_locality_probes)?;
            let base_m = probe_probs(model, &no_edits, &request.mm_locality_probes)?;
            Some((mean_locality(&now_t, &base_t), mean_locality(&now_m, &base_m)))
        } else {
            None
        };
        if !metrics.avg().is_finite() {
            return Err(Error::NonFinite("step metrics"));
        }
        steps.push(StepRecord {
            t: i + 1,
            metrics,
            editor_time: outcome.editor_time,
            state_bytes: editor.state_bytes(),
            write_norm: outcome.write_norms.values().map(|n| n * n).sum::<f64>().sqrt(),
            loc_vs_initial,
        });
        after_step(&*editor, &outcome)?;
    }

    let reeval_final = if opts.reeval_final {
        let w = editor.weights();
        let mut all = Vec::with_capacity(stream.len());
        for (request, step) in stream.iter().zip(&steps) {
            all.push(StepMetrics {
                rel: reliability(model, w, request)?,
                tgen: generality(model, w, request, ProbeKind::Text)?,
                mgen: generality(model, w, request, ProbeKind::Visual)?,
                tloc: step.metrics.tloc,
                mloc: step.metrics.mloc,
            });
        }
        Some(StepMetrics::mean(&all))
    } else {
        None
    };

    Ok(MetricsReport {
        editor: editor.label().to_string(),
        steps,
        reeval_final,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toymodel::{NoEdits, ToyModelConfig};

    fn small() -> ToyModel {
        ToyModel::new(ToyModelConfig {
            d: 8,
            d_v: 4,
            d_ff: 12,
            vocab: 6,
            blocks: 2,
            sigma_v: 2.0,
            sigma_t: 1.0,
            seed: RngSeed(2),
        })
        .unwrap()
    }

    #[test]
    fn kl_hand_example() {
        let s = locality_score(&[1.0, 0.0], &[0.5, 0.5]);
        assert!((s - 0.5).abs() < 1e-12);
        assert_eq!(locality_score(&[0.3, 0.7], &[0.3, 0.7]), 1.0);
    }

    #[test]
    fn targets_never_presatisfied() {
        let model = small();
        let cfg = StreamConfig {
            edits: 300,
            ..Default::default()
        };
        for r in generate_stream(&cfg, &model).unwrap() {
            assert_ne!(model.forward(&NoEdits, &r.sample).unwrap().argmax(), r.target);
            assert_eq!(reliability(&model, &NoEdits, &r).unwrap(), 0.0);
        }
    }

    #[test]
    fn zero_noise_probes_equal_base() {
        let model = small();
        let cfg = StreamConfig {
            edits: 3,
            eps_q: Some(0.0),
            eps_v: Some(0.0),
            ..Default::default()
        };
        for r in generate_stream(&cfg, &model).unwrap() {
            assert!(r.text_probes.iter().chain(&r.visual_probes).all(|p| *p == r.sample));
        }
    }

    #[test]
    fn stream_is_deterministic_and_rejects_bad_configs() {
        let model = small();
        let cfg = StreamConfig {
            edits: 5,
            ..Default::default()
        };
        let a = generate_stream(&cfg, &model).unwrap();
        let b = generate_stream(&cfg, &model).unwrap();
        assert_eq!(a, b);
        assert_eq!(stream_checksum(&a), stream_checksum(&b));
        assert!(generate_stream(&StreamConfig { edits: 0, ..cfg.clone() }, &model).is_err());
        let mut one = model.config().clone();
        one.vocab = 1;
        let m1 = ToyModel::new(one).unwrap();
        assert!(matches!(generate_stream(&cfg, &m1), Err(Error::Config(_))));
    }

    #[test]
    fn locality_of_unchanged_model_is_one() {
        let model = small();
        let r = &generate_stream(&StreamConfig { edits: 1, ..Default::default() }, &model).unwrap()[0];
        assert_eq!(locality(&model, &NoEdits, &NoEdits, &r.mm_locality_probes).unwrap(), 1.0);
    }

    #[test]
    fn timing_column_dropped() {
        let report = MetricsReport {
            editor: "x".into(),
            steps: vec![StepRecord {
                t: 1,
                metrics: StepMetrics::default(),
                editor_time: Duration::from_nanos(123),
                state_bytes: 8,
                write_norm: 0.0,
                loc_vs_initial: None,
            }],
            reeval_final: None,
        };
        let csv = report.to_csv_without_timing();
        assert!(!csv.contains("editor_time_ns"));
        assert!(!csv.contains("123"));
        assert!(report.summary().contains("0.00"));
    }
}
