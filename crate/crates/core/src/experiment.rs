//! Wiring of model, hyperparameters and editor choice into a runnable experiment.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{BaselineKind, DenseEditor, FinetuneEditor, UnfrozenAEditor};
use crate::editor::{init_states, ContextOptions, EditTargets, GroupHyperparams, MoreEditor, OnlineEditor, Preset};
use crate::error::{Error, Result};
use crate::numerics::RngSeed;
use crate::stream::{generate_stream, EditRequest, StreamConfig};
use crate::toymodel::{ToyModel, ToyModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EditorKind {
    More,
    Baseline(BaselineKind),
}

impl EditorKind {
    pub fn name(self) -> &'static str {
        match self {
            EditorKind::More => "more",
            EditorKind::Baseline(b) => b.cli_name(),
        }
    }
}

impl fmt::Display for EditorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EditorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "more" {
            return Ok(EditorKind::More);
        }
        s.parse().map(EditorKind::Baseline).map_err(|_| {
            Error::Config(format!(
                "unknown editor {s:?} (expected more, target-match, prox, nullspace, finetune or unfrozen-a)"
            ))
        })
    }
}

/// Everything an editor needs besides the stream.
#[derive(Clone, Debug)]
pub struct Setup {
    pub model: ToyModel,
    pub hps: GroupHyperparams,
    pub targets: EditTargets,
    pub context: ContextOptions,
    /// Seed of the write bases; shared by every low-rank editor so they start identical.
    pub basis_seed: RngSeed,
}

impl Setup {
    pub fn new(
        model_config: ToyModelConfig,
        hps: GroupHyperparams,
        targets: EditTargets,
        context: ContextOptions,
        basis_seed: RngSeed,
    ) -> Result<Self> {
        hps.text.validate()?;
        hps.projector.validate()?;
        let model = ToyModel::new(model_config)?;
        targets.module_ids(model.config())?;
        Ok(Self {
            model,
            hps,
            targets,
            context,
            basis_seed,
        })
    }

    /// Desk defaults: default toy model, desk preset, last two blocks plus projector.
    pub fn desk(seed: u64) -> Result<Self> {
        let model_config = ToyModelConfig {
            seed: RngSeed(seed),
            ..Default::default()
        };
        Self::new(
            model_config,
            Preset::Desk.hyperparams(1.0)?,
            EditTargets::default(),
            ContextOptions::default(),
            RngSeed(seed).derive(7),
        )
    }

    /// Stream of `edits` requests drawn against this setup's unedited model.
    pub fn stream(&self, edits: usize, seed: RngSeed) -> Result<Vec<EditRequest>> {
        generate_stream(
            &StreamConfig {
                edits,
                seed,
                ..Default::default()
            },
            &self.model,
        )
    }

    pub fn editor(&self, kind: EditorKind) -> Result<Box<dyn OnlineEditor>> {
        let fresh = || init_states(self.model.config(), &self.targets, &self.hps, self.basis_seed);
        Ok(match kind {
            EditorKind::More => Box::new(MoreEditor::new(fresh()?, self.context)),
            EditorKind::Baseline(BaselineKind::NaiveFinetune) => Box::new(FinetuneEditor::new(fresh()?)),
            EditorKind::Baseline(BaselineKind::UnfrozenA) => Box::new(UnfrozenAEditor::new(fresh()?, self.context)),
            EditorKind::Baseline(b) => {
                let ids = self.targets.module_ids(self.model.config())?;
                Box::new(DenseEditor::new(b, &self.model, &ids, &self.hps)?)
            }
        })
    }
}
