//! Small residual key-value network with a visual projector.
//!
//! `h⁰ = (W_proj + Δ_proj) x_v + x_q`, then for every block
//! `k = ReLU(W_in h)`, `h ← h + (W_out + Δ) k`, and finally
//! `logits = U h^L`. Attention and LayerNorm are absent on purpose: only the
//! projector and the block output matrices are ever edited.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Section};
use crate::editor::EditStates;
use crate::error::{dim_err, Error, Result};
use crate::numerics::{dot, Matrix, RngSeed, SeededRng};

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-300;

// Init gains relative to fan-in scaling. With the default sample scales the
// projector output stays above every block's residual contribution.
const PROJ_GAIN: f64 = 1.25;
const IN_GAIN: f64 = 1.1;
const OUT_GAIN: f64 = 0.5;
const LOGIT_GAIN: f64 = 12.0;

/// Editable location inside the toy model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModuleId {
    Projector,
    Block(usize),
}

impl fmt::Display for ModuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModuleId::Projector => write!(f, "projector"),
            ModuleId::Block(l) => write!(f, "block{l}"),
        }
    }
}

impl FromStr for ModuleId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "projector" {
            return Ok(ModuleId::Projector);
        }
        s.strip_prefix("block")
            .and_then(|n| n.parse().ok())
            .map(ModuleId::Block)
            .ok_or_else(|| Error::Parse(format!("unknown module id {s:?}")))
    }
}

/// Additive weight edits layered on top of the frozen model.
pub trait WeightEdits {
    /// `Δ · key` for module `id`, or `None` when the module is not edited.
    fn delta_apply(&self, id: ModuleId, key: &[f64]) -> Option<Vec<f64>>;
    /// `Δᵀ · v` for module `id`, or `None` when the module is not edited.
    fn delta_apply_transpose(&self, id: ModuleId, v: &[f64]) -> Option<Vec<f64>>;
}

/// The unedited model.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoEdits;

impl WeightEdits for NoEdits {
    fn delta_apply(&self, _: ModuleId, _: &[f64]) -> Option<Vec<f64>> {
        None
    }

    fn delta_apply_transpose(&self, _: ModuleId, _: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

/// Materialized full-space updates per module.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DenseDeltas(pub BTreeMap<ModuleId, Matrix>);

impl WeightEdits for DenseDeltas {
    fn delta_apply(&self, id: ModuleId, key: &[f64]) -> Option<Vec<f64>> {
        self.0.get(&id).map(|m| m.matvec(key).expect("delta shape checked at insert"))
    }

    fn delta_apply_transpose(&self, id: ModuleId, v: &[f64]) -> Option<Vec<f64>> {
        self.0.get(&id).map(|m| m.tr_matvec(v).expect("delta shape checked at insert"))
    }
}

impl<T: WeightEdits + ?Sized> WeightEdits for &T {
    fn delta_apply(&self, id: ModuleId, key: &[f64]) -> Option<Vec<f64>> {
        (**self).delta_apply(id, key)
    }

    fn delta_apply_transpose(&self, id: ModuleId, v: &[f64]) -> Option<Vec<f64>> {
        (**self).delta_apply_transpose(id, v)
    }
}

impl<T: WeightEdits + ?Sized> WeightEdits for Box<T> {
    fn delta_apply(&self, id: ModuleId, key: &[f64]) -> Option<Vec<f64>> {
        (**self).delta_apply(id, key)
    }

    fn delta_apply_transpose(&self, id: ModuleId, v: &[f64]) -> Option<Vec<f64>> {
        (**self).delta_apply_transpose(id, v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    /// Hidden width.
    pub d: usize,
    /// Visual feature width.
    pub d_v: usize,
    /// FFN inner width (key dimension of every block).
    pub d_ff: usize,
    pub vocab: usize,
    pub blocks: usize,
    /// Std-dev multiplier of visual features.
    pub sigma_v: f64,
    /// Std-dev multiplier of query embeddings.
    pub sigma_t: f64,
    pub seed: RngSeed,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            d_v: 32,
            d_ff: 128,
            vocab: 32,
            blocks: 4,
            sigma_v: 1.0,
            sigma_t: 0.25,
            seed: RngSeed(0),
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d", self.d),
            ("d_v", self.d_v),
            ("d_ff", self.d_ff),
            ("vocab", self.vocab),
            ("blocks", self.blocks),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be at least 1")));
            }
        }
        if !(self.sigma_v > 0.0 && self.sigma_v.is_finite()) {
            return Err(Error::Config("model.sigma_v must be positive".into()));
        }
        if !(self.sigma_t > 0.0 && self.sigma_t.is_finite()) {
            return Err(Error::Config("model.sigma_t must be positive".into()));
        }
        Ok(())
    }

    /// Input and output widths of an editable module, `(d_in, d_out)`.
    pub fn module_dims(&self, id: ModuleId) -> Result<(usize, usize)> {
        match id {
            ModuleId::Projector => Ok((self.d_v, self.d)),
            ModuleId::Block(l) if l < self.blocks => Ok((self.d_ff, self.d)),
            ModuleId::Block(l) => Err(dim_err("module_dims", format!("block < {}", self.blocks), l)),
        }
    }
}

/// One multimodal input with its token label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x_v: Vec<f64>,
    pub x_q: Vec<f64>,
    pub y: usize,
}

impl Sample {
    /// Same query, visual path zeroed.
    pub fn text_only(&self) -> Sample {
        Sample {
            x_v: vec![0.0; self.x_v.len()],
            ..self.clone()
        }
    }

    /// Same visual input, query path zeroed.
    pub fn visual_only(&self) -> Sample {
        Sample {
            x_q: vec![0.0; self.x_q.len()],
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    /// Projector input (its key).
    pub visual_input: Vec<f64>,
    pub projector_output: Vec<f64>,
    /// Per block FFN key `k^l`.
    pub keys: Vec<Vec<f64>>,
    /// Per block FFN output `v^l`.
    pub block_outputs: Vec<Vec<f64>>,
    /// `h⁰ … h^L`.
    pub hidden: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn final_hidden(&self) -> &[f64] {
        self.hidden.last().expect("at least h0")
    }

    /// Arg-max token with lowest-index tie-break.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    /// Key seen by module `id` in this pass.
    pub fn module_key(&self, id: ModuleId) -> &[f64] {
        match id {
            ModuleId::Projector => &self.visual_input,
            ModuleId::Block(l) => &self.keys[l],
        }
    }

    pub fn module_output(&self, id: ModuleId) -> &[f64] {
        match id {
            ModuleId::Projector => &self.projector_output,
            ModuleId::Block(l) => &self.block_outputs[l],
        }
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Negative log-likelihood of token `y`, with the probability floored at [`PROB_FLOOR`].
pub fn edit_loss(trace: &ForwardTrace, y: usize) -> Result<f64> {
    let p = trace
        .probs
        .get(y)
        .ok_or_else(|| dim_err("edit_loss", format!("token < {}", trace.probs.len()), y))?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// Gradient of the loss at one module's output together with its input key.
#[derive(Clone, Debug)]
pub struct Sensitivity {
    /// `∂L/∂(module output)`, length `d_out`.
    pub upstream: Vec<f64>,
    /// Module input, length `d_in`.
    pub key: Vec<f64>,
}

impl Sensitivity {
    /// `∂L/∂W = upstream · keyᵀ` for a full-space edit of this module.
    pub fn full_gradient(&self) -> Matrix {
        Matrix::outer(&self.upstream, &self.key)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    config: ToyModelConfig,
    w_proj: Matrix,
    w_in: Vec<Matrix>,
    w_out: Vec<Matrix>,
    unembed: Matrix,
}

impl ToyModel {
    pub fn new(config: ToyModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(config.seed);
        let c = &config;
        let w_proj = rng.normal_matrix(c.d, c.d_v, PROJ_GAIN / (c.d_v as f64).sqrt());
        let mut w_in = Vec::with_capacity(c.blocks);
        let mut w_out = Vec::with_capacity(c.blocks);
        for _ in 0..c.blocks {
            w_in.push(rng.normal_matrix(c.d_ff, c.d, IN_GAIN * (2.0 / c.d as f64).sqrt()));
            w_out.push(rng.normal_matrix(c.d, c.d_ff, OUT_GAIN / (c.d_ff as f64).sqrt()));
        }
        let unembed = rng.normal_matrix(c.vocab, c.d, LOGIT_GAIN / (c.d as f64).sqrt());
        Ok(Self {
            config,
            w_proj,
            w_in,
            w_out,
            unembed,
        })
    }

    /// Build from explicit weights (checkpoint restore, hand-built test models).
    pub fn from_parts(
        config: ToyModelConfig,
        w_proj: Matrix,
        w_in: Vec<Matrix>,
        w_out: Vec<Matrix>,
        unembed: Matrix,
    ) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let check = |name: &'static str, m: &Matrix, shape: (usize, usize)| {
            if m.shape() != shape {
                Err(dim_err(name, format!("{shape:?}"), format!("{:?}", m.shape())))
            } else {
                m.ensure_finite(name)
            }
        };
        check("w_proj", &w_proj, (c.d, c.d_v))?;
        check("unembed", &unembed, (c.vocab, c.d))?;
        if w_in.len() != c.blocks || w_out.len() != c.blocks {
            return Err(dim_err("blocks", c.blocks, w_in.len().min(w_out.len())));
        }
        for (wi, wo) in w_in.iter().zip(&w_out) {
            check("w_in", wi, (c.d_ff, c.d))?;
            check("w_out", wo, (c.d, c.d_ff))?;
        }
        Ok(Self {
            config,
            w_proj,
            w_in,
            w_out,
            unembed,
        })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.config
    }

    /// Frozen base weight of an editable module.
    pub fn module_weight(&self, id: ModuleId) -> Result<&Matrix> {
        match id {
            ModuleId::Projector => Ok(&self.w_proj),
            ModuleId::Block(l) => self
                .w_out
                .get(l)
                .ok_or_else(|| dim_err("module_weight", format!("block < {}", self.config.blocks), l)),
        }
    }

    pub fn w_in(&self, block: usize) -> &Matrix {
        &self.w_in[block]
    }

    pub fn unembed(&self) -> &Matrix {
        &self.unembed
    }

    pub fn module_ids(&self) -> impl Iterator<Item = ModuleId> + '_ {
        std::iter::once(ModuleId::Projector).chain((0..self.config.blocks).map(ModuleId::Block))
    }

    fn check_sample(&self, sample: &Sample) -> Result<()> {
        if sample.x_v.len() != self.config.d_v {
            return Err(dim_err("forward x_v", self.config.d_v, sample.x_v.len()));
        }
        if sample.x_q.len() != self.config.d {
            return Err(dim_err("forward x_q", self.config.d, sample.x_q.len()));
        }
        Ok(())
    }

    pub fn forward<E: WeightEdits + ?Sized>(&self, edits: &E, sample: &Sample) -> Result<ForwardTrace> {
        self.check_sample(sample)?;
        let apply = |id: ModuleId, w: &Matrix, key: &[f64]| -> Vec<f64> {
            let mut out = w.matvec(key).expect("shape checked");
            if let Some(delta) = edits.delta_apply(id, key) {
                for (o, d) in out.iter_mut().zip(delta) {
                    *o += d;
                }
            }
            out
        };

        let projector_output = apply(ModuleId::Projector, &self.w_proj, &sample.x_v);
        let h0: Vec<f64> = projector_output.iter().zip(&sample.x_q).map(|(p, q)| p + q).collect();

        let mut hidden = Vec::with_capacity(self.config.blocks + 1);
        let mut keys = Vec::with_capacity(self.config.blocks);
        let mut block_outputs = Vec::with_capacity(self.config.blocks);
        hidden.push(h0);
        for l in 0..self.config.blocks {
            let h = hidden.last().expect("h0 pushed");
            let key: Vec<f64> = self.w_in[l]
                .matvec(h)
                .expect("shape checked")
                .into_iter()
                .map(|x| x.max(0.0))
                .collect();
            let out = apply(ModuleId::Block(l), &self.w_out[l], &key);
            let next: Vec<f64> = h.iter().zip(&out).map(|(a, b)| a + b).collect();
            keys.push(key);
            block_outputs.push(out);
            hidden.push(next);
        }
        let logits = self.unembed.matvec(hidden.last().expect("h^L")).expect("shape checked");
        let probs = softmax(&logits);
        Ok(ForwardTrace {
            logits,
            probs,
            visual_input: sample.x_v.clone(),
            projector_output,
            keys,
            block_outputs,
            hidden,
        })
    }

    /// Reverse accumulation of `∂L/∂(module output)` for every module.
    pub fn backward<E: WeightEdits + ?Sized>(
        &self,
        edits: &E,
        trace: &ForwardTrace,
        y: usize,
    ) -> Result<BTreeMap<ModuleId, Sensitivity>> {
        if y >= self.config.vocab {
            return Err(dim_err("backward", format!("token < {}", self.config.vocab), y));
        }
        let mut dlogits = trace.probs.clone();
        dlogits[y] -= 1.0;
        let mut delta = self.unembed.tr_matvec(&dlogits)?;
        let mut out = BTreeMap::new();
        for l in (0..self.config.blocks).rev() {
            let id = ModuleId::Block(l);
            let key = &trace.keys[l];
            out.insert(
                id,
                Sensitivity {
                    upstream: delta.clone(),
                    key: key.clone(),
                },
            );
            let mut g_key = self.w_out[l].tr_matvec(&delta)?;
            if let Some(extra) = edits.delta_apply_transpose(id, &delta) {
                for (g, e) in g_key.iter_mut().zip(extra) {
                    *g += e;
                }
            }
            for (g, k) in g_key.iter_mut().zip(key) {
                if *k <= 0.0 {
                    *g = 0.0;
                }
            }
            let g_hidden = self.w_in[l].tr_matvec(&g_key)?;
            for (d, g) in delta.iter_mut().zip(g_hidden) {
                *d += g;
            }
        }
        out.insert(
            ModuleId::Projector,
            Sensitivity {
                upstream: delta,
                key: trace.visual_input.clone(),
            },
        );
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let mut header = Section::new("model");
        header
            .set("d", c.d)
            .set("d_v", c.d_v)
            .set("d_ff", c.d_ff)
            .set("vocab", c.vocab)
            .set("blocks", c.blocks)
            .set_f64("sigma_v", c.sigma_v)
            .set_f64("sigma_t", c.sigma_t)
            .set("seed", c.seed.0);
        header.push_matrix("w_proj", self.w_proj.clone());
        for l in 0..c.blocks {
            header.push_matrix(&format!("w_in{l}"), self.w_in[l].clone());
            header.push_matrix(&format!("w_out{l}"), self.w_out[l].clone());
        }
        header.push_matrix("unembed", self.unembed.clone());
        Checkpoint {
            sections: vec![header],
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let sec = ckpt.section("model")?;
        let config = ToyModelConfig {
            d: sec.get("d")?,
            d_v: sec.get("d_v")?,
            d_ff: sec.get("d_ff")?,
            vocab: sec.get("vocab")?,
            blocks: sec.get("blocks")?,
            sigma_v: sec.get("sigma_v")?,
            sigma_t: sec.get("sigma_t")?,
            seed: RngSeed(sec.get("seed")?),
        };
        let blocks = config.blocks;
        let w_in = (0..blocks)
            .map(|l| sec.matrix(&format!("w_in{l}")).cloned())
            .collect::<Result<Vec<_>>>()?;
        let w_out = (0..blocks)
            .map(|l| sec.matrix(&format!("w_out{l}")).cloned())
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(
            config,
            sec.matrix("w_proj")?.clone(),
            w_in,
            w_out,
            sec.matrix("unembed")?.clone(),
        )
    }
}

/// Exact gradient of the edit loss with respect to every low-rank write `B`.
///
/// For a module with basis `A`, scale `s = α/r` and key `k`, the gradient is
/// `s · δ (A k)ᵀ` where `δ` is the loss gradient at the module output.
pub fn grads_wrt_writes(
    model: &ToyModel,
    states: &EditStates,
    sample: &Sample,
    y: usize,
) -> Result<BTreeMap<ModuleId, Matrix>> {
    let trace = model.forward(states, sample)?;
    let sens = model.backward(states, &trace, y)?;
    states
        .iter()
        .map(|(id, st)| {
            let s = sens
                .get(id)
                .ok_or_else(|| Error::Contract(format!("module {id} not in model")))?;
            Ok((*id, st.write_gradient(s)?))
        })
        .collect()
}

/// Endless stream of samples with `x_v ~ σ_v N(0, I)`, `x_q ~ σ_t N(0, I)`
/// and a uniform label.
pub struct SampleStream {
    rng: SeededRng,
    d: usize,
    d_v: usize,
    vocab: usize,
    sigma_v: f64,
    sigma_t: f64,
}

impl SampleStream {
    /// Stream with explicit scales (zero scales give all-zero features).
    pub fn with_scales(config: &ToyModelConfig, sigma_v: f64, sigma_t: f64, seed: RngSeed) -> Self {
        Self {
            rng: SeededRng::new(seed),
            d: config.d,
            d_v: config.d_v,
            vocab: config.vocab,
            sigma_v,
            sigma_t,
        }
    }

    pub fn rng(&mut self) -> &mut SeededRng {
        &mut self.rng
    }
}

impl Iterator for SampleStream {
    type Item = Sample;

    fn next(&mut self) -> Option<Sample> {
        let x_v = self.rng.normal_vec(self.d_v, self.sigma_v);
        let x_q = self.rng.normal_vec(self.d, self.sigma_t);
        let y = self.rng.below(self.vocab);
        Some(Sample { x_v, x_q, y })
    }
}

pub fn sample_generator(config: &ToyModelConfig, seed: RngSeed) -> SampleStream {
    SampleStream::with_scales(config, config.sigma_v, config.sigma_t, seed)
}

/// Squared Euclidean norm helper for statistics.
pub(crate) fn sq_norm(v: &[f64]) -> f64 {
    dot(v, v)
}
