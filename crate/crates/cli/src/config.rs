//! Experiment configuration.
//!
//! Three layers feed every key: command-line flags, an optional TOML file and
//! the preset (or built-in defaults). The resolved values are written back as a
//! fully populated [`FileConfig`], which is what the manifest echoes; feeding
//! that echo back in as a file reproduces the same experiment.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use more_core::diagnostics::DiagnoseOptions;
use more_core::editor::{
    ContextOptions, EditTargets, GroupHyperparams, ModuleHyperparams, Preset, DEFAULT_RANK_SCALE,
};
use more_core::experiment::{EditorKind, Setup};
use more_core::numerics::RngSeed;
use more_core::stream::{ExperimentOptions, StreamConfig};
use more_core::toymodel::ToyModelConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const DEFAULT_OUT: &str = "more-out";
pub const DEFAULT_BENCH_EDITORS: [&str; 2] = ["more", "nullspace"];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub editor: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank_scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reeval_final: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub stream: StreamSection,
    #[serde(default)]
    pub hyperparams: HyperparamsSection,
    #[serde(default)]
    pub targets: TargetsSection,
    #[serde(default)]
    pub context: ContextSection,
    #[serde(default)]
    pub diagnostics: DiagnosticsSection,
    #[serde(default)]
    pub bench: BenchSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_v: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_ff: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blocks: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_v: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_t: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edits: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_q: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_v: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperparamsSection {
    #[serde(default)]
    pub text: GroupSection,
    #[serde(default)]
    pub projector: GroupSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_over_r: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetsSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub projector: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub last_blocks: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub include_locality_sample: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSection {
    /// Absent means the per-module default `max(10, entries/100)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drift_vs_initial: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub modality_samples: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub editors: Option<Vec<String>>,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

/// Values given on the command line; `None` means "not given".
#[derive(Clone, Debug, Default)]
pub struct Flags {
    pub preset: Option<String>,
    pub editor: Option<String>,
    pub edits: Option<usize>,
    pub seed: Option<u64>,
    pub rank_scale: Option<f64>,
    pub reeval_final: bool,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Flag,
    File,
    Preset,
    Default,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Flag => "flag",
            Source::File => "file",
            Source::Preset => "preset",
            Source::Default => "default",
        }
    }
}

#[derive(Default)]
struct Sources(BTreeMap<String, String>);

impl Sources {
    /// First present layer wins; records where the value came from.
    fn pick<T>(&mut self, key: &str, flag: Option<T>, file: Option<T>, fallback: T, fallback_src: Source) -> T {
        let (v, src) = match (flag, file) {
            (Some(v), _) => (v, Source::Flag),
            (None, Some(v)) => (v, Source::File),
            (None, None) => (fallback, fallback_src),
        };
        self.0.insert(key.to_string(), src.as_str().to_string());
        v
    }
}

/// Fully resolved experiment.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub preset: Preset,
    pub editor: EditorKind,
    pub seed: u64,
    pub out: PathBuf,
    pub model: ToyModelConfig,
    pub stream: StreamConfig,
    pub hps: GroupHyperparams,
    pub targets: EditTargets,
    pub context: ContextOptions,
    pub options: ExperimentOptions,
    pub diagnose: DiagnoseOptions,
    pub bench_editors: Vec<EditorKind>,
    /// Resolved values in file form.
    pub echo: FileConfig,
    /// Winning layer per key.
    pub sources: BTreeMap<String, String>,
}

fn keyed<T, E: std::fmt::Display>(key: &str, r: Result<T, E>) -> Result<T, CliError> {
    r.map_err(|e| CliError::Config(format!("{key}: {e}")))
}

fn group(
    sources: &mut Sources,
    name: &str,
    file: &GroupSection,
    base: ModuleHyperparams,
) -> Result<ModuleHyperparams, CliError> {
    let key = |f: &str| format!("hyperparams.{name}.{f}");
    let hp = ModuleHyperparams {
        rank: sources.pick(&key("rank"), None, file.rank, base.rank, Source::Preset),
        eta: sources.pick(&key("eta"), None, file.eta, base.eta, Source::Preset),
        lambda: sources.pick(&key("lambda"), None, file.lambda, base.lambda, Source::Preset),
        alpha_over_r: sources.pick(&key("alpha_over_r"), None, file.alpha_over_r, base.alpha_over_r, Source::Preset),
        group: base.group,
    };
    keyed(&format!("hyperparams.{name}"), hp.validate())?;
    Ok(hp)
}

impl Experiment {
    pub fn resolve(flags: &Flags, file: &FileConfig) -> Result<Self, CliError> {
        let mut s = Sources::default();

        let preset_name = s.pick("preset", flags.preset.clone(), file.preset.clone(), "desk".into(), Source::Default);
        let preset: Preset = keyed("preset", preset_name.parse())?;
        let rank_scale = s.pick("rank_scale", flags.rank_scale, file.rank_scale, DEFAULT_RANK_SCALE, Source::Default);
        let base = keyed("rank_scale", preset.hyperparams(rank_scale))?;
        let editor_name = s.pick("editor", flags.editor.clone(), file.editor.clone(), "more".into(), Source::Default);
        let editor: EditorKind = keyed("editor", editor_name.parse())?;
        let seed = s.pick("seed", flags.seed, file.seed, 0, Source::Default);
        let reeval_final = s.pick(
            "reeval_final",
            flags.reeval_final.then_some(true),
            file.reeval_final,
            false,
            Source::Default,
        );
        let out = s.pick("out", flags.out.clone(), file.out.clone(), PathBuf::from(DEFAULT_OUT), Source::Default);

        let dm = ToyModelConfig::default();
        let fm = &file.model;
        let model = ToyModelConfig {
            d: s.pick("model.d", None, fm.d, dm.d, Source::Default),
            d_v: s.pick("model.d_v", None, fm.d_v, dm.d_v, Source::Default),
            d_ff: s.pick("model.d_ff", None, fm.d_ff, dm.d_ff, Source::Default),
            vocab: s.pick("model.vocab", None, fm.vocab, dm.vocab, Source::Default),
            blocks: s.pick("model.blocks", None, fm.blocks, dm.blocks, Source::Default),
            sigma_v: s.pick("model.sigma_v", None, fm.sigma_v, dm.sigma_v, Source::Default),
            sigma_t: s.pick("model.sigma_t", None, fm.sigma_t, dm.sigma_t, Source::Default),
            seed: RngSeed(seed),
        };

        let ds = StreamConfig::default();
        let fs = &file.stream;
        let stream = StreamConfig {
            edits: s.pick("stream.edits", flags.edits, fs.edits, ds.edits, Source::Default),
            probes: s.pick("stream.probes", None, fs.probes, ds.probes, Source::Default),
            eps_q: fs.eps_q,
            eps_v: fs.eps_v,
            seed: RngSeed(seed),
        };
        for (key, v) in [("stream.eps_q", fs.eps_q), ("stream.eps_v", fs.eps_v)] {
            let src = if v.is_some() { Source::File } else { Source::Default };
            s.0.insert(key.into(), src.as_str().into());
        }
        stream.validate()?;

        let hps = GroupHyperparams {
            text: group(&mut s, "text", &file.hyperparams.text, base.text)?,
            projector: group(&mut s, "projector", &file.hyperparams.projector, base.projector)?,
        };

        let dt = EditTargets::default();
        let targets = EditTargets {
            projector: s.pick("targets.projector", None, file.targets.projector, dt.projector, Source::Default),
            last_blocks: s.pick("targets.last_blocks", None, file.targets.last_blocks, dt.last_blocks, Source::Default),
        };
        keyed("targets", targets.module_ids(&model))?;
        let context = ContextOptions {
            include_locality_sample: s.pick(
                "context.include_locality_sample",
                None,
                file.context.include_locality_sample,
                false,
                Source::Default,
            ),
        };

        let dd = DiagnoseOptions::default();
        let fd = &file.diagnostics;
        s.0.insert(
            "diagnostics.top_k".into(),
            if fd.top_k.is_some() { Source::File } else { Source::Default }.as_str().into(),
        );
        if fd.top_k == Some(0) {
            return Err(CliError::Config("diagnostics.top_k must be at least 1".into()));
        }
        let drift_vs_initial = s.pick("diagnostics.drift_vs_initial", None, fd.drift_vs_initial, false, Source::Default);
        let modality_samples = s.pick(
            "diagnostics.modality_samples",
            None,
            fd.modality_samples,
            dd.modality_samples,
            Source::Default,
        );
        if modality_samples < 2 {
            return Err(CliError::Config("diagnostics.modality_samples must be at least 2".into()));
        }

        let bench_names = s.pick(
            "bench.editors",
            None,
            file.bench.editors.clone(),
            DEFAULT_BENCH_EDITORS.iter().map(|e| e.to_string()).collect(),
            Source::Default,
        );
        if bench_names.is_empty() {
            return Err(CliError::Config("bench.editors must name at least one editor".into()));
        }
        let bench_editors = bench_names
            .iter()
            .map(|n| keyed("bench.editors", n.parse()))
            .collect::<Result<Vec<EditorKind>, _>>()?;

        let echo = FileConfig {
            preset: Some(preset.to_string()),
            editor: Some(editor.to_string()),
            seed: Some(seed),
            rank_scale: Some(rank_scale),
            reeval_final: Some(reeval_final),
            out: Some(out.clone()),
            model: ModelSection {
                d: Some(model.d),
                d_v: Some(model.d_v),
                d_ff: Some(model.d_ff),
                vocab: Some(model.vocab),
                blocks: Some(model.blocks),
                sigma_v: Some(model.sigma_v),
                sigma_t: Some(model.sigma_t),
            },
            stream: StreamSection {
                edits: Some(stream.edits),
                probes: Some(stream.probes),
                eps_q: stream.eps_q,
                eps_v: stream.eps_v,
            },
            hyperparams: HyperparamsSection {
                text: echo_group(&hps.text),
                projector: echo_group(&hps.projector),
            },
            targets: TargetsSection {
                projector: Some(targets.projector),
                last_blocks: Some(targets.last_blocks),
            },
            context: ContextSection {
                include_locality_sample: Some(context.include_locality_sample),
            },
            diagnostics: DiagnosticsSection {
                top_k: fd.top_k,
                drift_vs_initial: Some(drift_vs_initial),
                modality_samples: Some(modality_samples),
            },
            bench: BenchSection {
                editors: Some(bench_editors.iter().map(|e| e.to_string()).collect()),
            },
        };

        Ok(Self {
            preset,
            editor,
            seed,
            out,
            model,
            stream,
            hps,
            targets,
            context,
            options: ExperimentOptions {
                reeval_final,
                drift_vs_initial,
            },
            diagnose: DiagnoseOptions {
                k: fd.top_k,
                modality_samples,
                ..dd
            },
            bench_editors,
            echo,
            sources: s.0,
        })
    }

    pub fn setup(&self) -> more_core::Result<Setup> {
        Setup::new(
            self.model.clone(),
            self.hps,
            self.targets,
            self.context,
            RngSeed(self.seed).derive(7),
        )
    }
}

fn echo_group(hp: &ModuleHyperparams) -> GroupSection {
    GroupSection {
        rank: Some(hp.rank),
        eta: Some(hp.eta),
        lambda: Some(hp.lambda),
        alpha_over_r: Some(hp.alpha_over_r),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beat_preset() {
        let file = FileConfig::parse(
            "preset = \"blip2\"\nseed = 3\n[stream]\nedits = 7\n[hyperparams.text]\neta = 0.5\n",
        )
        .unwrap();
        let flags = Flags {
            edits: Some(2),
            ..Default::default()
        };
        let e = Experiment::resolve(&flags, &file).unwrap();
        assert_eq!(e.stream.edits, 2);
        assert_eq!(e.sources["stream.edits"], "flag");
        assert_eq!(e.seed, 3);
        assert_eq!(e.sources["seed"], "file");
        assert_eq!(e.hps.text.eta, 0.5);
        assert_eq!(e.sources["hyperparams.text.eta"], "file");
        assert_eq!(e.hps.text.lambda, 5000.0);
        assert_eq!(e.sources["hyperparams.text.lambda"], "preset");
        assert_eq!(e.hps.text.rank, 4);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = FileConfig::parse("[stream]\nedit = 3\n").unwrap_err();
        assert!(err.to_string().contains("edit"), "{err}");
        assert!(matches!(err, CliError::Config(_)));
    }

    #[test]
    fn echo_round_trips_to_same_experiment() {
        let file = FileConfig::parse("preset = \"llava\"\n[diagnostics]\ntop_k = 12\n").unwrap();
        let a = Experiment::resolve(&Flags::default(), &file).unwrap();
        let text = toml::to_string(&a.echo).unwrap();
        let b = Experiment::resolve(&Flags::default(), &FileConfig::parse(&text).unwrap()).unwrap();
        assert_eq!(a.echo, b.echo);
    }

    #[test]
    fn bad_values_name_their_key() {
        let zero = Flags {
            edits: Some(0),
            ..Default::default()
        };
        let err = Experiment::resolve(&zero, &FileConfig::default()).unwrap_err();
        assert!(err.to_string().contains("stream.edits"), "{err}");
        let file = FileConfig::parse("[hyperparams.projector]\nlambda = -1.0\n").unwrap();
        let err = Experiment::resolve(&Flags::default(), &file).unwrap_err();
        assert!(err.to_string().contains("hyperparams.projector"), "{err}");
    }
}
