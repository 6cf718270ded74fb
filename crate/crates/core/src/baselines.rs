//! Reference editors for head-to-head comparison.
//!
//! The update rules are pure functions; the `*Editor` types wrap them into
//! [`OnlineEditor`]s that run on the same streams as the recursive editor.
//! Full-space editors keep a dense `ΔW` per module.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::editor::{
    collect_step_contexts, ContextOptions, EditOutcome, EditStates, GroupHyperparams, ModuleEditState,
    OnlineEditor, PhaseTimes,
};
use crate::error::{dim_err, Error, Result};
use crate::numerics::{solve_spd, thin_svd, Matrix};
use crate::stream::EditRequest;
use crate::toymodel::{edit_loss, DenseDeltas, ModuleId, ToyModel, WeightEdits};

/// Relative singular-value cutoff of the null-space projector.
pub const NULLSPACE_RANK_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BaselineKind {
    TargetMatching,
    ProximalIsotropic,
    Nullspace,
    NaiveFinetune,
    UnfrozenA,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 5] = [
        BaselineKind::TargetMatching,
        BaselineKind::ProximalIsotropic,
        BaselineKind::Nullspace,
        BaselineKind::NaiveFinetune,
        BaselineKind::UnfrozenA,
    ];

    pub fn cli_name(self) -> &'static str {
        match self {
            BaselineKind::TargetMatching => "target-match",
            BaselineKind::ProximalIsotropic => "prox",
            BaselineKind::Nullspace => "nullspace",
            BaselineKind::NaiveFinetune => "finetune",
            BaselineKind::UnfrozenA => "unfrozen-a",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.cli_name() == s)
            .ok_or_else(|| Error::Config(format!("unknown baseline {s:?}")))
    }
}

/// `ΔW = (V − W K) Kᵀ (K Kᵀ + I)⁻¹`, the ridge-regularized target-matching minimizer.
pub fn target_matching_update(w: &Matrix, k: &Matrix, v_target: &Matrix) -> Result<Matrix> {
    let (d_out, d) = w.shape();
    if k.rows() != d {
        return Err(dim_err("target_matching_update K rows", d, k.rows()));
    }
    if v_target.shape() != (d_out, k.cols()) {
        return Err(dim_err(
            "target_matching_update V",
            format!("{:?}", (d_out, k.cols())),
            format!("{:?}", v_target.shape()),
        ));
    }
    let residual = v_target.sub(&w.matmul(k)?)?;
    let rhs = residual.matmul(&k.transpose())?;
    let mut gram = k.matmul(&k.transpose())?;
    for i in 0..d {
        gram.data_mut()[i * d + i] += 1.0;
    }
    // ΔW M = R with M symmetric, so ΔWᵀ = M⁻¹ Rᵀ.
    Ok(solve_spd(&gram, &rhs.transpose())?.transpose())
}

/// `ΔW = −(η/2) g`.
pub fn proximal_isotropic_update(g: &Matrix, eta: f64) -> Result<Matrix> {
    g.ensure_finite("proximal_isotropic_update")?;
    Ok(g.scale(-0.5 * eta))
}

/// `ΔB = −η G`.
pub fn naive_finetune_update(g: &Matrix, eta: f64) -> Result<Matrix> {
    g.ensure_finite("naive_finetune_update")?;
    Ok(g.scale(-eta))
}

/// Keys of past edits for one module.
#[derive(Clone, Debug, PartialEq)]
pub struct NullspaceState {
    d: usize,
    keys: Vec<Vec<f64>>,
    pub eta: f64,
}

impl NullspaceState {
    pub fn new(d: usize, eta: f64) -> Self {
        Self {
            d,
            keys: Vec::new(),
            eta,
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Number of stored keys `t`.
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn push_key(&mut self, key: &[f64]) -> Result<()> {
        if key.len() != self.d {
            return Err(dim_err("NullspaceState::push_key", self.d, key.len()));
        }
        self.keys.push(key.to_vec());
        Ok(())
    }

    /// `K_t`, one key per column.
    pub fn key_matrix(&self) -> Option<Matrix> {
        if self.keys.is_empty() {
            return None;
        }
        Some(Matrix::from_fn(self.d, self.keys.len(), |i, j| self.keys[j][i]))
    }

    pub fn stored_reals(&self) -> usize {
        self.d * self.keys.len()
    }

    /// Orthonormal basis of the key span, one basis vector per row.
    pub fn range_basis(&self) -> Result<Vec<Vec<f64>>> {
        let Some(k) = self.key_matrix() else {
            return Ok(Vec::new());
        };
        let (vectors, s) = if k.rows() >= k.cols() {
            let svd = thin_svd(&k)?;
            let cols = (0..svd.u.cols()).map(|j| svd.u.col(j)).collect::<Vec<_>>();
            (cols, svd.s)
        } else {
            // More keys than dimensions: left vectors of K are right vectors of Kᵀ.
            let svd = thin_svd(&k.transpose())?;
            let rows = (0..svd.vt.rows()).map(|i| svd.vt.row(i).to_vec()).collect::<Vec<_>>();
            (rows, svd.s)
        };
        let s_max = s.first().copied().unwrap_or(0.0);
        if s_max <= 0.0 {
            return Ok(Vec::new());
        }
        Ok(vectors
            .into_iter()
            .zip(&s)
            .filter(|(_, sv)| **sv > NULLSPACE_RANK_TOL * s_max)
            .map(|(v, _)| v)
            .collect())
    }
}

/// `ΔW = −η g (I − U Uᵀ)` where `U` spans the stored keys. The caller appends
/// the current key afterwards.
pub fn nullspace_update(state: &NullspaceState, g: &Matrix) -> Result<Matrix> {
    if g.cols() != state.d {
        return Err(dim_err("nullspace_update", state.d, g.cols()));
    }
    g.ensure_finite("nullspace_update")?;
    let mut projected = g.clone();
    for u in state.range_basis()? {
        let gu = g.matvec(&u)?;
        for (i, gui) in gu.iter().enumerate() {
            for (j, uj) in u.iter().enumerate() {
                projected.data_mut()[i * state.d + j] -= gui * uj;
            }
        }
    }
    Ok(projected.scale(-state.eta))
}

/// One joint step of the unfrozen-basis variant: `A ← A − η_A G_A` with no
/// re-orthonormalization, and the usual preconditioned write `B ← B − η G_B P`.
pub fn unfrozen_a_step(state: &ModuleEditState, g_a: &Matrix, g_b: &Matrix, eta_a: f64) -> Result<(Matrix, Matrix)> {
    if g_a.shape() != state.basis().shape() {
        return Err(dim_err(
            "unfrozen_a_step G_A",
            format!("{:?}", state.basis().shape()),
            format!("{:?}", g_a.shape()),
        ));
    }
    if g_b.shape() != state.write().shape() {
        return Err(dim_err(
            "unfrozen_a_step G_B",
            format!("{:?}", state.write().shape()),
            format!("{:?}", g_b.shape()),
        ));
    }
    g_a.ensure_finite("unfrozen_a_step")?;
    g_b.ensure_finite("unfrozen_a_step")?;
    let a = state.basis().sub(&g_a.scale(eta_a))?;
    let b = state.write().add(&state.compute_write(g_b)?)?;
    Ok((a, b))
}

/// Full-space editors: target matching, isotropic proximal and null-space.
pub struct DenseEditor {
    kind: BaselineKind,
    deltas: DenseDeltas,
    etas: BTreeMap<ModuleId, f64>,
    nullspace: BTreeMap<ModuleId, NullspaceState>,
}

impl DenseEditor {
    pub fn new(kind: BaselineKind, model: &ToyModel, ids: &[ModuleId], hps: &GroupHyperparams) -> Result<Self> {
        if !matches!(
            kind,
            BaselineKind::TargetMatching | BaselineKind::ProximalIsotropic | BaselineKind::Nullspace
        ) {
            return Err(Error::Config(format!("{kind} is not a full-space editor")));
        }
        let mut deltas = BTreeMap::new();
        let mut etas = BTreeMap::new();
        let mut nullspace = BTreeMap::new();
        for &id in ids {
            let (d, d_out) = model.config().module_dims(id)?;
            let hp = hps.for_module(id);
            let eta = hp.eta / (1.0 + hp.lambda);
            deltas.insert(id, Matrix::zeros(d_out, d));
            etas.insert(id, eta);
            if kind == BaselineKind::Nullspace {
                nullspace.insert(id, NullspaceState::new(d, eta));
            }
        }
        Ok(Self {
            kind,
            deltas: DenseDeltas(deltas),
            etas,
            nullspace,
        })
    }

    pub fn nullspace_state(&self, id: ModuleId) -> Option<&NullspaceState> {
        self.nullspace.get(&id)
    }
}

impl OnlineEditor for DenseEditor {
    fn label(&self) -> &'static str {
        self.kind.cli_name()
    }

    fn edit(&mut self, model: &ToyModel, request: &EditRequest) -> Result<EditOutcome> {
        let target = request.target;
        let trace = model.forward(&self.deltas, &request.sample)?;
        let loss_before = edit_loss(&trace, target)?;
        let sens = model.backward(&self.deltas, &trace, target)?;
        let mut outcome = EditOutcome {
            loss_before,
            ..Default::default()
        };

        let start = Instant::now();
        let ids: Vec<ModuleId> = self.deltas.0.keys().copied().collect();
        for id in ids {
            let s = &sens[&id];
            let eta = self.etas[&id];
            let update = match self.kind {
                BaselineKind::TargetMatching => {
                    // Target value: one gradient step on the module output.
                    let w = model.module_weight(id)?.add(&self.deltas.0[&id])?;
                    let k = Matrix::column(&s.key)?;
                    let current = w.matvec(&s.key)?;
                    let v: Vec<f64> = current.iter().zip(&s.upstream).map(|(c, g)| c - eta * g).collect();
                    target_matching_update(&w, &k, &Matrix::column(&v)?)?
                }
                BaselineKind::ProximalIsotropic => proximal_isotropic_update(&s.full_gradient(), eta)?,
                BaselineKind::Nullspace => {
                    let st = self.nullspace.get_mut(&id).expect("state per module");
                    let dw = nullspace_update(st, &s.full_gradient())?;
                    st.push_key(&s.key)?;
                    dw
                }
                _ => unreachable!("checked in new"),
            };
            outcome.write_norms.insert(id, update.frobenius_norm());
            self.deltas.0.get_mut(&id).expect("delta per module").add_assign(&update)?;
        }
        outcome.editor_time = start.elapsed();
        outcome.phases = PhaseTimes {
            write: outcome.editor_time,
            ..Default::default()
        };
        outcome.loss_after = edit_loss(&model.forward(&self.deltas, &request.sample)?, target)?;
        Ok(outcome)
    }

    fn weights(&self) -> &dyn WeightEdits {
        &self.deltas
    }

    fn effective_deltas(&self) -> BTreeMap<ModuleId, Matrix> {
        self.deltas.0.clone()
    }

    fn state_bytes(&self) -> usize {
        let dense: usize = self.deltas.0.values().map(|m| m.rows() * m.cols()).sum();
        let keys: usize = self.nullspace.values().map(NullspaceState::stored_reals).sum();
        8 * (dense + keys)
    }
}

/// Plain low-rank finetuning: `B ← B − η G` with `A` frozen and no statistic.
pub struct FinetuneEditor {
    states: EditStates,
}

impl FinetuneEditor {
    pub fn new(states: EditStates) -> Self {
        Self { states }
    }

    pub fn states(&self) -> &EditStates {
        &self.states
    }
}

impl OnlineEditor for FinetuneEditor {
    fn label(&self) -> &'static str {
        BaselineKind::NaiveFinetune.cli_name()
    }

    fn edit(&mut self, model: &ToyModel, request: &EditRequest) -> Result<EditOutcome> {
        let target = request.target;
        let trace = model.forward(&self.states, &request.sample)?;
        let loss_before = edit_loss(&trace, target)?;
        let sens = model.backward(&self.states, &trace, target)?;
        let ids = self.states.ids();
        let grads = ids
            .iter()
            .map(|id| self.states.get(*id).expect("id from states").write_gradient(&sens[id]))
            .collect::<Result<Vec<_>>>()?;
        let mut outcome = EditOutcome {
            loss_before,
            ..Default::default()
        };
        let start = Instant::now();
        for (id, g) in ids.iter().zip(&grads) {
            let st = self.states.get_mut(*id).expect("id from states");
            let hp = st.hyperparams();
            let delta_b = naive_finetune_update(g, hp.eta / (1.0 + hp.lambda))?;
            st.apply_write(&delta_b)?;
            outcome.write_norms.insert(*id, delta_b.frobenius_norm());
        }
        outcome.editor_time = start.elapsed();
        outcome.phases = PhaseTimes {
            write: outcome.editor_time,
            ..Default::default()
        };
        outcome.loss_after = edit_loss(&model.forward(&self.states, &request.sample)?, target)?;
        Ok(outcome)
    }

    fn weights(&self) -> &dyn WeightEdits {
        &self.states
    }

    fn effective_deltas(&self) -> BTreeMap<ModuleId, Matrix> {
        self.states.effective_deltas()
    }

    fn state_bytes(&self) -> usize {
        // A and B only; the preconditioner slot is never used.
        8 * self
            .states
            .iter()
            .map(|(_, s)| s.rank() * s.d_in() + s.d_out() * s.rank())
            .sum::<usize>()
    }
}

/// The recursive editor with its write basis learned online instead of frozen.
pub struct UnfrozenAEditor {
    states: EditStates,
    context: ContextOptions,
}

impl UnfrozenAEditor {
    pub fn new(states: EditStates, context: ContextOptions) -> Self {
        Self { states, context }
    }

    pub fn states(&self) -> &EditStates {
        &self.states
    }

    /// Worst `‖A Aᵀ − I‖_max` over modules.
    pub fn max_orthonormality_error(&self) -> f64 {
        self.states
            .iter()
            .map(|(_, s)| {
                let a = s.basis();
                let gram = a.matmul(&a.transpose()).expect("A Aᵀ");
                gram.max_abs_diff(&Matrix::identity(a.rows())).expect("square")
            })
            .fold(0.0, f64::max)
    }
}

impl OnlineEditor for UnfrozenAEditor {
    fn label(&self) -> &'static str {
        BaselineKind::UnfrozenA.cli_name()
    }

    fn edit(&mut self, model: &ToyModel, request: &EditRequest) -> Result<EditOutcome> {
        let target = request.target;
        let trace = model.forward(&self.states, &request.sample)?;
        let loss_before = edit_loss(&trace, target)?;
        let sens = model.backward(&self.states, &trace, target)?;
        let ids = self.states.ids();
        let mut grads = Vec::with_capacity(ids.len());
        for id in &ids {
            let st = self.states.get(*id).expect("id from states");
            grads.push((st.basis_gradient(&sens[id])?, st.write_gradient(&sens[id])?));
        }
        let mut outcome = EditOutcome {
            loss_before,
            ..Default::default()
        };

        let start = Instant::now();
        for (id, (g_a, g_b)) in ids.iter().zip(&grads) {
            let st = self.states.get_mut(*id).expect("id from states");
            let hp = st.hyperparams();
            let (a, b) = unfrozen_a_step(st, g_a, g_b, hp.eta / (1.0 + hp.lambda))?;
            let delta_b = b.sub(st.write())?;
            outcome.write_norms.insert(*id, delta_b.frobenius_norm());
            *st.basis_mut() = a;
            st.apply_write(&delta_b)?;
        }
        let t_write = Instant::now();
        // Pool with the drifted basis, as the frozen editor would with its own.
        let contexts = collect_step_contexts(model, &self.states, &ids, request, &self.context)?;
        let t_ctx = Instant::now();
        let mut pooled = Vec::with_capacity(ids.len());
        for id in &ids {
            pooled.push(self.states.get(*id).expect("id from states").pool_context(&contexts[id])?);
        }
        let t_pool = Instant::now();
        for (id, z) in ids.iter().zip(&pooled) {
            self.states.get_mut(*id).expect("id from states").absorb_context(z)?;
        }
        let t_absorb = Instant::now();
        outcome.phases = PhaseTimes {
            write: t_write - start,
            pool: t_pool - t_ctx,
            absorb: t_absorb - t_pool,
        };
        outcome.editor_time = outcome.phases.total();
        outcome.pooled = ids.into_iter().zip(pooled).collect();
        outcome.loss_after = edit_loss(&model.forward(&self.states, &request.sample)?, target)?;
        Ok(outcome)
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
