//! The online recursive editor.
//!
//! Each edited module `l` carries a frozen orthonormal basis `A` (`r × d`),
//! an online write `B` (`d_out × r`) and a preconditioner
//! `P = (I + S)⁻¹`, `S = λI + Σ z̄ z̄ᵀ`. One edit step is, per module:
//!
//! 1. `ΔB = −η G P` using the preconditioner from the previous step;
//! 2. `z̄ = A · mean(masked keys)` over the step-only context;
//! 3. `P ← P − P z̄ z̄ᵀ P / (1 + z̄ᵀ P z̄)`.
//!
//! The forward pass sees `W + (α/r) B A`. Text blocks and the projector keep
//! fully separate `A`, `P` and statistics.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Section};
use crate::error::{dim_err, Error, Result};
use crate::numerics::{random_orthonormal_rows, sherman_morrison_rank1, Matrix, RngSeed};
use crate::stream::EditRequest;
use crate::toymodel::{edit_loss, ModuleId, Sensitivity, ToyModel, ToyModelConfig, WeightEdits};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModuleGroup {
    TextLayer,
    VisualProjector,
}

impl ModuleGroup {
    pub fn of(id: ModuleId) -> ModuleGroup {
        match id {
            ModuleId::Projector => ModuleGroup::VisualProjector,
            ModuleId::Block(_) => ModuleGroup::TextLayer,
        }
    }
}

impl std::str::FromStr for ModuleGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "TextLayer" => Ok(ModuleGroup::TextLayer),
            "VisualProjector" => Ok(ModuleGroup::VisualProjector),
            _ => Err(Error::Parse(format!("unknown module group {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleHyperparams {
    pub rank: usize,
    /// Step size η.
    pub eta: f64,
    /// Ridge λ of the initial statistic `S₀ = λI`.
    pub lambda: f64,
    /// Low-rank scale α/r applied in the forward pass.
    pub alpha_over_r: f64,
    pub group: ModuleGroup,
}

impl ModuleHyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("rank must be at least 1".into()));
        }
        for (name, v) in [
            ("eta", self.eta),
            ("lambda", self.lambda),
            ("alpha_over_r", self.alpha_over_r),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }
}

/// Step-only context of one module: candidate keys and their inclusion mask.
#[derive(Clone, Debug, PartialEq)]
pub struct StepContext {
    pub module_id: ModuleId,
    pub keys: Vec<Vec<f64>>,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModuleEditState {
    module_id: ModuleId,
    basis: Matrix,
    write: Matrix,
    precond: Matrix,
    hp: ModuleHyperparams,
    step_count: u64,
}

/// Fresh state: orthonormal `A`, `B = 0`, `P = I / (1 + λ)`.
pub fn init_state(
    module_id: ModuleId,
    d: usize,
    d_out: usize,
    hp: ModuleHyperparams,
    seed: RngSeed,
) -> Result<ModuleEditState> {
    hp.validate()?;
    if d_out == 0 {
        return Err(dim_err("init_state", "d_out >= 1", d_out));
    }
    let basis = random_orthonormal_rows(hp.rank, d, seed)?;
    Ok(ModuleEditState {
        module_id,
        basis,
        write: Matrix::zeros(d_out, hp.rank),
        precond: Matrix::scaled_identity(hp.rank, 1.0 / (1.0 + hp.lambda)),
        hp,
        step_count: 0,
    })
}

impl ModuleEditState {
    /// Reassemble a state from stored parts, checking every shape.
    pub fn from_parts(
        module_id: ModuleId,
        basis: Matrix,
        write: Matrix,
        precond: Matrix,
        hp: ModuleHyperparams,
        step_count: u64,
    ) -> Result<Self> {
        hp.validate()?;
        let r = hp.rank;
        if basis.rows() != r {
            return Err(dim_err("ModuleEditState A rows", r, basis.rows()));
        }
        if write.cols() != r {
            return Err(dim_err("ModuleEditState B cols", r, write.cols()));
        }
        if precond.shape() != (r, r) {
            return Err(dim_err("ModuleEditState P", format!("{r}x{r}"), format!("{:?}", precond.shape())));
        }
        for (name, m) in [("A", &basis), ("B", &write), ("P", &precond)] {
            if !m.is_finite() {
                return Err(Error::Contract(format!("{module_id}: non-finite {name}")));
            }
        }
        Ok(Self {
            module_id,
            basis,
            write,
            precond,
            hp,
            step_count,
        })
    }

    pub fn module_id(&self) -> ModuleId {
        self.module_id
    }

    pub fn basis(&self) -> &Matrix {
        &self.basis
    }

    pub fn write(&self) -> &Matrix {
        &self.write
    }

    pub fn preconditioner(&self) -> &Matrix {
        &self.precond
    }

    pub fn hyperparams(&self) -> &ModuleHyperparams {
        &self.hp
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn rank(&self) -> usize {
        self.hp.rank
    }

    /// Key width `d`.
    pub fn d_in(&self) -> usize {
        self.basis.cols()
    }

    pub fn d_out(&self) -> usize {
        self.write.rows()
    }

    /// Reals held by this module: `r·d + d_out·r + r²`.
    pub fn stored_reals(&self) -> usize {
        let r = self.rank();
        r * self.d_in() + self.d_out() * r + r * r
    }

    /// `ΔB = −η G P` with the preconditioner accumulated so far. Leaves the state untouched.
    pub fn compute_write(&self, g: &Matrix) -> Result<Matrix> {
        if g.shape() != self.write.shape() {
            return Err(dim_err(
                "compute_write",
                format!("{:?}", self.write.shape()),
                format!("{:?}", g.shape()),
            ));
        }
        g.ensure_finite("compute_write")?;
        Ok(g.matmul(&self.precond)?.scale(-self.hp.eta))
    }

    /// `B ← B + ΔB`.
    pub fn apply_write(&mut self, delta_b: &Matrix) -> Result<()> {
        delta_b.ensure_finite("apply_write")?;
        self.write.add_assign(delta_b)
    }

    /// `z̄ = A · mean(included keys)`.
    pub fn pool_context(&self, ctx: &StepContext) -> Result<Vec<f64>> {
        if ctx.module_id != self.module_id {
            return Err(Error::Contract(format!(
                "context for {} handed to {}",
                ctx.module_id, self.module_id
            )));
        }
        if ctx.mask.len() != ctx.keys.len() {
            return Err(dim_err("pool_context mask", ctx.keys.len(), ctx.mask.len()));
        }
        let d = self.d_in();
        let mut mean = vec![0.0; d];
        let mut count = 0usize;
        for (key, &keep) in ctx.keys.iter().zip(&ctx.mask) {
            if key.len() != d {
                return Err(dim_err("pool_context key", d, key.len()));
            }
            if keep {
                count += 1;
                for (m, k) in mean.iter_mut().zip(key) {
                    *m += k;
                }
            }
        }
        if count == 0 {
            return Err(Error::Contract(format!("{}: empty context mask", self.module_id)));
        }
        let inv = 1.0 / count as f64;
        for m in &mut mean {
            *m *= inv;
        }
        self.basis.matvec(&mean)
    }

    /// Fold `z̄` into the statistic: `P ← SM(P, z̄)`, one call per edit step.
    pub fn absorb_context(&mut self, zbar: &[f64]) -> Result<()> {
        if zbar.len() != self.rank() {
            return Err(dim_err("absorb_context", self.rank(), zbar.len()));
        }
        if zbar.iter().any(|z| !z.is_finite()) {
            return Err(Error::NonFinite("absorb_context"));
        }
        self.precond = sherman_morrison_rank1(&self.precond, zbar)?;
        self.step_count += 1;
        Ok(())
    }

    /// `(α/r) · B · A`
    pub fn effective_delta(&self) -> Matrix {
        self.write
            .matmul(&self.basis)
            .expect("B and A shapes agree")
            .scale(self.hp.alpha_over_r)
    }

    /// `∂L/∂B = (α/r) · δ (A k)ᵀ`.
    pub fn write_gradient(&self, sens: &Sensitivity) -> Result<Matrix> {
        if sens.upstream.len() != self.d_out() {
            return Err(dim_err("write_gradient upstream", self.d_out(), sens.upstream.len()));
        }
        let z = self.basis.matvec(&sens.key)?;
        Ok(Matrix::outer(&sens.upstream, &z).scale(self.hp.alpha_over_r))
    }

    /// `∂L/∂A = (α/r) · Bᵀ δ kᵀ`; only the unfrozen-basis variant uses it.
    pub fn basis_gradient(&self, sens: &Sensitivity) -> Result<Matrix> {
        let bt_delta = self.write.tr_matvec(&sens.upstream)?;
        if sens.key.len() != self.d_in() {
            return Err(dim_err("basis_gradient key", self.d_in(), sens.key.len()));
        }
        Ok(Matrix::outer(&bt_delta, &sens.key).scale(self.hp.alpha_over_r))
    }

    pub(crate) fn basis_mut(&mut self) -> &mut Matrix {
        &mut self.basis
    }

    fn to_section(&self) -> Section {
        let mut s = Section::new("module");
        s.set("id", self.module_id)
            .set("r", self.rank())
            .set("d", self.d_in())
            .set("d_out", self.d_out())
            .set("step_count", self.step_count)
            .set_f64("eta", self.hp.eta)
            .set_f64("lambda", self.hp.lambda)
            .set_f64("alpha_over_r", self.hp.alpha_over_r)
            .set("group", format!("{:?}", self.hp.group))
            .push_matrix("A", self.basis.clone())
            .push_matrix("B", self.write.clone())
            .push_matrix("P", self.precond.clone());
        s
    }

    fn from_section(s: &Section) -> Result<Self> {
        let hp = ModuleHyperparams {
            rank: s.get("r")?,
            eta: s.get("eta")?,
            lambda: s.get("lambda")?,
            alpha_over_r: s.get("alpha_over_r")?,
            group: s.get("group")?,
        };
        let st = Self::from_parts(
            s.get("id")?,
            s.matrix("A")?.clone(),
            s.matrix("B")?.clone(),
            s.matrix("P")?.clone(),
            hp,
            s.get("step_count")?,
        )?;
        if st.d_in() != s.get::<usize>("d")? || st.d_out() != s.get::<usize>("d_out")? {
            return Err(Error::Parse(format!("{}: header dims disagree with blocks", st.module_id)));
        }
        Ok(st)
    }
}

/// All per-module editor states, ordered by module id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EditStates(BTreeMap<ModuleId, ModuleEditState>);

impl EditStates {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, state: ModuleEditState) {
        self.0.insert(state.module_id, state);
    }

    pub fn get(&self, id: ModuleId) -> Option<&ModuleEditState> {
        self.0.get(&id)
    }

    pub fn get_mut(&mut self, id: ModuleId) -> Option<&mut ModuleEditState> {
        self.0.get_mut(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ModuleId, &ModuleEditState)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&ModuleId, &mut ModuleEditState)> {
        self.0.iter_mut()
    }

    pub fn ids(&self) -> Vec<ModuleId> {
        self.0.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn stored_reals(&self) -> usize {
        self.0.values().map(ModuleEditState::stored_reals).sum()
    }

    pub fn effective_deltas(&self) -> BTreeMap<ModuleId, Matrix> {
        self.0.iter().map(|(id, s)| (*id, s.effective_delta())).collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            sections: self.0.values().map(ModuleEditState::to_section).collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut out = EditStates::new();
        for sec in ckpt.sections.iter().filter(|s| s.name == "module") {
            out.insert(ModuleEditState::from_section(sec)?);
        }
        Ok(out)
    }
}

impl WeightEdits for EditStates {
    fn delta_apply(&self, id: ModuleId, key: &[f64]) -> Option<Vec<f64>> {
        let st = self.0.get(&id)?;
        let z = st.basis.matvec(key).expect("key width matches basis");
        let mut out = st.write.matvec(&z).expect("B cols equal rank");
        for v in &mut out {
            *v *= st.hp.alpha_over_r;
        }
        Some(out)
    }

    fn delta_apply_transpose(&self, id: ModuleId, v: &[f64]) -> Option<Vec<f64>> {
        let st = self.0.get(&id)?;
        let bt = st.write.tr_matvec(v).expect("upstream width matches B");
        let mut out = st.basis.tr_matvec(&bt).expect("rank matches");
        for x in &mut out {
            *x *= st.hp.alpha_over_r;
        }
        Some(out)
    }
}

/// Which modules receive edits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditTargets {
    pub projector: bool,
    /// Number of trailing blocks edited.
    pub last_blocks: usize,
}

impl Default for EditTargets {
    fn default() -> Self {
        Self {
            projector: true,
            last_blocks: 2,
        }
    }
}

impl EditTargets {
    pub fn module_ids(&self, config: &ToyModelConfig) -> Result<Vec<ModuleId>> {
        if self.last_blocks > config.blocks {
            return Err(Error::Config(format!(
                "cannot edit the last {} of {} blocks",
                self.last_blocks, config.blocks
            )));
        }
        let mut ids = Vec::new();
        if self.projector {
            ids.push(ModuleId::Projector);
        }
        ids.extend((config.blocks - self.last_blocks..config.blocks).map(ModuleId::Block));
        if ids.is_empty() {
            return Err(Error::Config("no module selected for editing".into()));
        }
        Ok(ids)
    }
}

/// Hyperparameters split by module group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupHyperparams {
    pub text: ModuleHyperparams,
    pub projector: ModuleHyperparams,
}

impl GroupHyperparams {
    pub fn for_module(&self, id: ModuleId) -> ModuleHyperparams {
        match ModuleGroup::of(id) {
            ModuleGroup::TextLayer => self.text,
            ModuleGroup::VisualProjector => self.projector,
        }
    }
}

/// Fresh states for every target module. Each basis gets its own derived seed.
pub fn init_states(
    config: &ToyModelConfig,
    targets: &EditTargets,
    hps: &GroupHyperparams,
    seed: RngSeed,
) -> Result<EditStates> {
    let mut states = EditStates::new();
    for id in targets.module_ids(config)? {
        let (d, d_out) = config.module_dims(id)?;
        let tag = match id {
            ModuleId::Projector => 0,
            ModuleId::Block(l) => 1 + l as u64,
        };
        let hp = hps.for_module(id);
        if hp.rank > d {
            return Err(Error::Config(format!("rank {} exceeds key width {d} of {id}", hp.rank)));
        }
        states.insert(init_state(id, d, d_out, hp, seed.derive(tag))?);
    }
    Ok(states)
}

/// Composition of the step-only context.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextOptions {
    /// Add the keys of the request's first multimodal locality probe.
    pub include_locality_sample: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PhaseTimes {
    pub write: Duration,
    pub pool: Duration,
    pub absorb: Duration,
}

impl PhaseTimes {
    pub fn total(&self) -> Duration {
        self.write + self.pool + self.absorb
    }
}

#[derive(Clone, Debug, Default)]
pub struct EditOutcome {
    /// `‖ΔB‖_F` (or `‖ΔW‖_F` for full-space editors) per module.
    pub write_norms: BTreeMap<ModuleId, f64>,
    pub loss_before: f64,
    pub loss_after: f64,
    /// Pooled steady-space feature per module (empty for editors without one).
    pub pooled: BTreeMap<ModuleId, Vec<f64>>,
    /// Editor-specific work only; excludes forward and backward passes.
    pub editor_time: Duration,
    pub phases: PhaseTimes,
}

/// Build every module's step context from path-separated forward passes.
///
/// The projector sees the visual input; text blocks see their key on the
/// text-only pass (included) and on the visual-only pass (masked out).
pub fn collect_step_contexts<E: WeightEdits + ?Sized>(
    model: &ToyModel,
    edits: &E,
    ids: &[ModuleId],
    request: &EditRequest,
    opts: &ContextOptions,
) -> Result<BTreeMap<ModuleId, StepContext>> {
    let mut samples = vec![&request.sample];
    if opts.include_locality_sample {
        let probe = request
            .mm_locality_probes
            .first()
            .ok_or_else(|| Error::Contract("locality sample requested but request has none".into()))?;
        samples.push(probe);
    }
    let mut contexts: BTreeMap<ModuleId, StepContext> = ids
        .iter()
        .map(|&id| {
            (
                id,
                StepContext {
                    module_id: id,
                    keys: Vec::new(),
                    mask: Vec::new(),
                },
            )
        })
        .collect();
    for s in samples {
        let text = model.forward(edits, &s.text_only())?;
        let visual = model.forward(edits, &s.visual_only())?;
        for (&id, ctx) in contexts.iter_mut() {
            match id {
                ModuleId::Projector => {
                    ctx.keys.push(s.x_v.clone());
                    ctx.mask.push(true);
                }
                ModuleId::Block(l) => {
                    ctx.keys.push(text.keys[l].clone());
                    ctx.mask.push(true);
                    ctx.keys.push(visual.keys[l].clone());
                    ctx.mask.push(false);
                }
            }
        }
    }
    Ok(contexts)
}

/// One online edit: gradient, preconditioned write, then absorb (strictly in that order).
pub fn edit_step(
    states: &mut EditStates,
    model: &ToyModel,
    request: &EditRequest,
    opts: &ContextOptions,
) -> Result<EditOutcome> {
    let target = request.target;
    let mut sample = request.sample.clone();
    sample.y = target;

    let trace = model.forward(states, &sample)?;
    let loss_before = edit_loss(&trace, target)?;
    let sens = model.backward(states, &trace, target)?;
    let ids = states.ids();
    let grads: Vec<Matrix> = ids
        .iter()
        .map(|id| states.get(*id).expect("id from states").write_gradient(&sens[id]))
        .collect::<Result<_>>()?;
    let contexts = collect_step_contexts(model, states, &ids, request, opts)?;

    let mut outcome = EditOutcome {
        loss_before,
        ..Default::default()
    };

    let start = Instant::now();
    for (id, g) in ids.iter().zip(&grads) {
        let st = states.get_mut(*id).expect("id from states");
        let delta_b = st.compute_write(g)?;
        st.apply_write(&delta_b)?;
        outcome.write_norms.insert(*id, delta_b.frobenius_norm());
    }
    let t_write = Instant::now();
    let mut pooled = Vec::with_capacity(ids.len());
    for id in &ids {
        pooled.push(states.get(*id).expect("id from states").pool_context(&contexts[id])?);
    }
    let t_pool = Instant::now();
    for (id, z) in ids.iter().zip(&pooled) {
        states.get_mut(*id).expect("id from states").absorb_context(z)?;
    }
    let t_absorb = Instant::now();

    outcome.phases = PhaseTimes {
        write: t_write - start,
        pool: t_pool - t_write,
        absorb: t_absorb - t_pool,
    };
    outcome.editor_time = t_absorb - start;
    outcome.pooled = ids.into_iter().zip(pooled).collect();
    outcome.loss_after = edit_loss(&model.forward(states, &sample)?, target)?;
    Ok(outcome)
}

/// Shared interface of every online editor run by the harness.
pub trait OnlineEditor {
    fn label(&self) -> &'static str;
    /// Process one edit request; mutates the editor state.
    fn edit(&mut self, model: &ToyModel, request: &EditRequest) -> Result<EditOutcome>;
    /// Current weight edits, for read-only evaluation between steps.
    fn weights(&self) -> &dyn WeightEdits;
    /// Materialized full-space update per edited module.
    fn effective_deltas(&self) -> BTreeMap<ModuleId, Matrix>;
    /// Bytes of editor-specific state.
    fn state_bytes(&self) -> usize;
}

pub struct MoreEditor {
    states: EditStates,
    context: ContextOptions,
}

impl MoreEditor {
    pub fn new(states: EditStates, context: ContextOptions) -> Self {
        Self { states, context }
    }

    pub fn states(&self) -> &EditStates {
        &self.states
    }

    pub fn into_states(self) -> EditStates {
        self.states
    }
}

impl OnlineEditor for MoreEditor {
    fn label(&self) -> &'static str {
        "more"
    }

    fn edit(&mut self, model: &ToyModel, request: &EditRequest) -> Result<EditOutcome> {
        edit_step(&mut self.states, model, request, &self.context)
    }

    fn weights(&self) -> &dyn WeightEdits {
        &self.states
    }

    fn effective_deltas(&self) -> BTreeMap<ModuleId, Matrix> {
        self.states.effective_deltas()
    }

    fn state_bytes(&self) -> usize {
        8 * self.states.stored_reals()
    }
}

/// Named hyperparameter presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Llava,
    Blip2,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "llava" => Ok(Preset::Llava),
            "blip2" => Ok(Preset::Blip2),
            _ => Err(Error::Config(format!("unknown preset {s:?} (expected desk, llava or blip2)"))),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::Llava => "llava",
            Preset::Blip2 => "blip2",
        })
    }
}

impl Preset {
    /// Rank as published, before any scaling.
    pub fn nominal_rank(self) -> usize {
        match self {
            Preset::Desk => 16,
            Preset::Llava => 512,
            Preset::Blip2 => 128,
        }
    }

    /// Rank used at desk scale. Only the published presets are scaled.
    pub fn effective_rank(self, rank_scale: f64) -> Result<usize> {
        if !(rank_scale > 0.0 && rank_scale.is_finite()) {
            return Err(Error::Config(format!("rank_scale must be positive, got {rank_scale}")));
        }
        let r = match self {
            Preset::Desk => self.nominal_rank(),
            _ => (self.nominal_rank() as f64 * rank_scale).round() as usize,
        };
        if r == 0 {
            return Err(Error::Config(format!("rank_scale {rank_scale} leaves {self} with rank 0")));
        }
        Ok(r)
    }

    pub fn hyperparams(self, rank_scale: f64) -> Result<GroupHyperparams> {
        let rank = self.effective_rank(rank_scale)?;
        let (text, proj) = match self {
            Preset::Desk => ((0.1, 100.0), (0.1, 100.0)),
            Preset::Llava => ((0.1, 2000.0), (0.1, 2000.0)),
            Preset::Blip2 => ((0.06, 5000.0), (0.03, 20000.0)),
        };
        let mk = |(eta, lambda): (f64, f64), group| ModuleHyperparams {
            rank,
            eta,
            lambda,
            alpha_over_r: 2.0,
            group,
        };
        Ok(GroupHyperparams {
            text: mk(text, ModuleGroup::TextLayer),
            projector: mk(proj, ModuleGroup::VisualProjector),
        })
    }
}

pub const DEFAULT_RANK_SCALE: f64 = 1.0 / 32.0;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{inverse_spd, SeededRng};

    fn hp(rank: usize, lambda: f64) -> ModuleHyperparams {
        ModuleHyperparams {
            rank,
            eta: 0.1,
            lambda,
            alpha_over_r: 2.0,
            group: ModuleGroup::TextLayer,
        }
    }

    #[test]
    fn fresh_preconditioner_is_scaled_identity() {
        let st = init_state(ModuleId::Block(0), 10, 4, hp(3, 1.0), RngSeed(1)).unwrap();
        assert_eq!(st.preconditioner(), &Matrix::scaled_identity(3, 0.5));
        assert_eq!(st.effective_delta().max_abs(), 0.0);
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn init_rejects_rank_above_width() {
        assert!(init_state(ModuleId::Block(0), 2, 4, hp(3, 1.0), RngSeed(1)).is_err());
    }

    #[test]
    fn zero_gradient_zero_write() {
        let st = init_state(ModuleId::Block(0), 10, 4, hp(3, 1.0), RngSeed(1)).unwrap();
        assert_eq!(st.compute_write(&Matrix::zeros(4, 3)).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn fresh_write_is_scaled_gradient() {
        let st = init_state(ModuleId::Block(0), 10, 4, hp(3, 4.0), RngSeed(1)).unwrap();
        let g = SeededRng::new(RngSeed(2)).normal_matrix(4, 3, 1.0);
        let dw = st.compute_write(&g).unwrap();
        let expected = g.scale(-0.1 / 5.0);
        assert!(dw.max_abs_diff(&expected).unwrap() < 1e-15);
        assert!(st.compute_write(&Matrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn pooling_single_and_symmetric_keys() {
        let st = init_state(ModuleId::Block(0), 5, 2, hp(2, 1.0), RngSeed(3)).unwrap();
        let k = vec![1.0, -2.0, 0.5, 3.0, 0.0];
        let ctx = StepContext {
            module_id: ModuleId::Block(0),
            keys: vec![k.clone()],
            mask: vec![true],
        };
        assert_eq!(st.pool_context(&ctx).unwrap(), st.basis().matvec(&k).unwrap());
        let neg: Vec<f64> = k.iter().map(|x| -x).collect();
        let ctx = StepContext {
            module_id: ModuleId::Block(0),
            keys: vec![k, neg],
            mask: vec![true, true],
        };
        assert!(st.pool_context(&ctx).unwrap().iter().all(|z| z.abs() < 1e-15));
    }

    #[test]
    fn pooling_masked_matches_mean_then_project() {
        let st = init_state(ModuleId::Block(0), 6, 2, hp(3, 1.0), RngSeed(3)).unwrap();
        let mut rng = SeededRng::new(RngSeed(4));
        let keys: Vec<Vec<f64>> = (0..4).map(|_| rng.normal_vec(6, 1.0)).collect();
        let mask = vec![true, false, true, false];
        let ctx = StepContext {
            module_id: ModuleId::Block(0),
            keys: keys.clone(),
            mask,
        };
        let got = st.pool_context(&ctx).unwrap();
        let mean: Vec<f64> = (0..6).map(|i| 0.5 * (keys[0][i] + keys[2][i])).collect();
        let expected = st.basis().matvec(&mean).unwrap();
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn pooling_errors() {
        let st = init_state(ModuleId::Block(0), 4, 2, hp(2, 1.0), RngSeed(3)).unwrap();
        let empty = StepContext {
            module_id: ModuleId::Block(0),
            keys: vec![vec![1.0; 4]],
            mask: vec![false],
        };
        assert!(matches!(st.pool_context(&empty), Err(Error::Contract(_))));
        let wrong = StepContext {
            module_id: ModuleId::Projector,
            keys: vec![vec![1.0; 4]],
            mask: vec![true],
        };
        assert!(matches!(st.pool_context(&wrong), Err(Error::Contract(_))));
    }

    #[test]
    fn absorb_zero_and_unit() {
        let mut st = init_state(ModuleId::Block(0), 5, 2, hp(3, 1.0), RngSeed(3)).unwrap();
        let p0 = st.preconditioner().clone();
        st.absorb_context(&[0.0; 3]).unwrap();
        assert_eq!(st.preconditioner(), &p0);
        assert_eq!(st.step_count(), 1);
        st.absorb_context(&[1.0, 0.0, 0.0]).unwrap();
        let expected = Matrix::diag(&[1.0 / 3.0, 0.5, 0.5]);
        assert!(st.preconditioner().max_abs_diff(&expected).unwrap() < 1e-15);
        assert!(st.absorb_context(&[f64::INFINITY, 0.0, 0.0]).is_err());
    }

    #[test]
    fn absorb_chain_matches_direct_inverse() {
        let lambda = 3.0;
        let r = 6;
        let mut st = init_state(ModuleId::Block(0), 8, 2, hp(r, lambda), RngSeed(5)).unwrap();
        let mut rng = SeededRng::new(RngSeed(6));
        let mut acc = Matrix::scaled_identity(r, 1.0 + lambda);
        for _ in 0..1000 {
            let z = rng.normal_vec(r, 1.0);
            st.absorb_context(&z).unwrap();
            acc.add_assign(&Matrix::outer(&z, &z)).unwrap();
        }
        let direct = inverse_spd(&acc).unwrap();
        assert!(st.preconditioner().rel_frobenius_diff(&direct).unwrap() < 1e-6);
    }

    #[test]
    fn effective_delta_rank_one() {
        let mut st = init_state(ModuleId::Block(0), 4, 3, hp(2, 1.0), RngSeed(7)).unwrap();
        let mut b = Matrix::zeros(3, 2);
        b[(0, 0)] = 1.0;
        st.apply_write(&b).unwrap();
        let expected = Matrix::outer(&b.col(0), st.basis().row(0)).scale(2.0);
        assert!(st.effective_delta().max_abs_diff(&expected).unwrap() < 1e-15);
    }

    #[test]
    fn state_checkpoint_round_trips() {
        let mut states = EditStates::new();
        let mut st = init_state(ModuleId::Block(1), 6, 3, hp(2, 7.5), RngSeed(8)).unwrap();
        st.apply_write(&SeededRng::new(RngSeed(9)).normal_matrix(3, 2, 1.0)).unwrap();
        st.absorb_context(&[0.3, -1.1]).unwrap();
        states.insert(st);
        let mut proj_hp = hp(3, 20000.0);
        proj_hp.group = ModuleGroup::VisualProjector;
        states.insert(init_state(ModuleId::Projector, 5, 3, proj_hp, RngSeed(10)).unwrap());
        let text = states.to_checkpoint().to_text();
        let back = EditStates::from_checkpoint(&Checkpoint::parse(&text).unwrap()).unwrap();
        assert_eq!(back, states);
    }

    #[test]
    fn targets_select_trailing_blocks() {
        let cfg = ToyModelConfig::default();
        let ids = EditTargets::default().module_ids(&cfg).unwrap();
        assert_eq!(ids, vec![ModuleId::Projector, ModuleId::Block(2), ModuleId::Block(3)]);
        let bad = EditTargets {
            projector: false,
            last_blocks: 0,
        };
        assert!(bad.module_ids(&cfg).is_err());
    }
}
