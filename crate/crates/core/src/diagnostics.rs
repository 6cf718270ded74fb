//! Interference diagnostics over an editor's update sequence: top-k support
//! overlap, directional coupling, lag curves, modality scale statistics and
//! hidden-state drift on unrelated probes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::editor::OnlineEditor;
use crate::error::{dim_err, Error, Result};
use crate::numerics::{dot, thin_svd, Matrix, RngSeed};
use crate::stream::{run_experiment_with, EditRequest, ExperimentOptions, MetricsReport};
use crate::toymodel::{sample_generator, sq_norm, ModuleId, NoEdits, Sample, ToyModel, WeightEdits};

/// Per-step updates `ΔW_t` of every edited module.
#[derive(Clone, Debug, Default)]
pub struct DeltaLog {
    updates: BTreeMap<ModuleId, Vec<Matrix>>,
    last: BTreeMap<ModuleId, Matrix>,
    steps: usize,
}

impl DeltaLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record one step from the editor's cumulative effective deltas.
    pub fn record(&mut self, cumulative: BTreeMap<ModuleId, Matrix>) -> Result<()> {
        if self.steps > 0 && cumulative.len() != self.last.len() {
            return Err(Error::Contract("edited module set changed between steps".into()));
        }
        for (id, now) in &cumulative {
            let step = match self.last.get(id) {
                Some(prev) => now.sub(prev)?,
                None if self.steps == 0 => now.clone(),
                None => return Err(Error::Contract(format!("module {id} appeared mid-stream"))),
            };
            self.updates.entry(*id).or_default().push(step);
        }
        self.last = cumulative;
        self.steps += 1;
        Ok(())
    }

    /// Build a log directly from per-step updates of one module.
    pub fn from_updates(id: ModuleId, updates: Vec<Matrix>) -> Result<Self> {
        if let Some(first) = updates.first() {
            if let Some(bad) = updates.iter().find(|m| m.shape() != first.shape()) {
                return Err(dim_err("DeltaLog", format!("{:?}", first.shape()), format!("{:?}", bad.shape())));
            }
        }
        let steps = updates.len();
        Ok(Self {
            updates: BTreeMap::from([(id, updates)]),
            last: BTreeMap::new(),
            steps,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn modules(&self) -> impl Iterator<Item = ModuleId> + '_ {
        self.updates.keys().copied()
    }

    pub fn updates(&self, id: ModuleId) -> Option<&[Matrix]> {
        self.updates.get(&id).map(Vec::as_slice)
    }
}

/// Default top-k: 1% of entries, at least 10, never more than the entry count.
pub fn default_topk(entries: usize) -> usize {
    (entries / 100).max(10).min(entries)
}

/// Flat indices of the `k` largest-magnitude entries; ties go to the lower index.
pub fn topk_indices(m: &Matrix, k: usize) -> Vec<usize> {
    let d = m.data();
    let mut idx: Vec<usize> = (0..d.len()).collect();
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| d[b].abs().total_cmp(&d[a].abs()).then(a.cmp(&b)));
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}

fn sorted_intersection(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut common) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                common += 1;
                i += 1;
                j += 1;
            }
        }
    }
    common
}

pub fn topk_overlap(a: &Matrix, b: &Matrix, k: usize) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(dim_err("topk_overlap", format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    if k == 0 || k > a.data().len() {
        return Err(Error::Contract(format!("top-k with k={k} over {} entries", a.data().len())));
    }
    let common = sorted_intersection(&topk_indices(a, k), &topk_indices(b, k));
    Ok(common as f64 / k as f64)
}

/// Cosine of the flattened updates; `None` when either is zero.
pub fn cosine_coupling(a: &Matrix, b: &Matrix) -> Result<Option<f64>> {
    let inner = a.frobenius_inner(b)?;
    let (na, nb) = (a.frobenius_norm(), b.frobenius_norm());
    if na == 0.0 || nb == 0.0 {
        return Ok(None);
    }
    Ok(Some((inner / (na * nb)).clamp(-1.0, 1.0)))
}

/// All-pairs statistics over one module's update sequence.
#[derive(Clone, Debug)]
pub struct PairwiseStats {
    pub k: usize,
    pub overlap: Matrix,
    pub cosine: Vec<Vec<Option<f64>>>,
}

pub fn pairwise(updates: &[Matrix], k: usize) -> Result<PairwiseStats> {
    let n = updates.len();
    if let Some(first) = updates.first() {
        if k == 0 || k > first.data().len() {
            return Err(Error::Contract(format!("top-k with k={k} over {} entries", first.data().len())));
        }
    }
    let tops: Vec<Vec<usize>> = updates.iter().map(|m| topk_indices(m, k)).collect();
    let mut overlap = Matrix::zeros(n, n);
    let mut cosine = vec![vec![None; n]; n];
    for i in 0..n {
        for j in i..n {
            let o = sorted_intersection(&tops[i], &tops[j]) as f64 / k as f64;
            let c = cosine_coupling(&updates[i], &updates[j])?;
            overlap[(i, j)] = o;
            overlap[(j, i)] = o;
            cosine[i][j] = c;
            cosine[j][i] = c;
        }
    }
    Ok(PairwiseStats { k, overlap, cosine })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LagPoint {
    pub lag: usize,
    pub pairs: usize,
    pub mean_overlap: f64,
    /// Mean over pairs where the cosine is defined.
    pub mean_cosine: Option<f64>,
}

fn lag_point(lag: usize, stats: impl Iterator<Item = (f64, Option<f64>)>) -> LagPoint {
    let (mut pairs, mut o_sum, mut c_sum, mut c_n) = (0usize, 0.0, 0.0, 0usize);
    for (o, c) in stats {
        pairs += 1;
        o_sum += o;
        if let Some(c) = c {
            c_sum += c;
            c_n += 1;
        }
    }
    LagPoint {
        lag,
        pairs,
        mean_overlap: o_sum / pairs as f64,
        mean_cosine: (c_n > 0).then(|| c_sum / c_n as f64),
    }
}

/// Lag curves for `1 ≤ τ ≤ T−1`; empty when fewer than two steps were logged.
pub fn entanglement_horizon(updates: &[Matrix], k: usize) -> Result<Vec<LagPoint>> {
    let n = updates.len();
    let mut out = Vec::new();
    for lag in 1..n {
        let mut stats = Vec::with_capacity(n - lag);
        for i in 0..n - lag {
            stats.push((
                topk_overlap(&updates[i], &updates[i + lag], k)?,
                cosine_coupling(&updates[i], &updates[i + lag])?,
            ));
        }
        out.push(lag_point(lag, stats.into_iter()));
    }
    Ok(out)
}

/// Lag curves read off precomputed pairwise matrices.
pub fn lag_curves_from_pairwise(stats: &PairwiseStats) -> Vec<LagPoint> {
    let n = stats.cosine.len();
    (1..n)
        .map(|lag| lag_point(lag, (0..n - lag).map(|i| (stats.overlap[(i, i + lag)], stats.cosine[i][i + lag]))))
        .collect()
}

/// Key scale and output energy of one module over a sample set.
#[derive(Clone, Debug, PartialEq)]
pub struct ModuleStats {
    pub module: ModuleId,
    /// Per key coordinate `ln Var`; `None` for zero-variance coordinates.
    pub key_log_variance: Vec<Option<f64>>,
    pub mean_output_magnitude: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogVarianceSummary {
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub mean: f64,
    pub zero_dims: usize,
}

impl ModuleStats {
    /// `None` when every coordinate has zero variance.
    pub fn summary(&self) -> Option<LogVarianceSummary> {
        let mut v: Vec<f64> = self.key_log_variance.iter().flatten().copied().collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        Some(LogVarianceSummary {
            min: v[0],
            median,
            max: v[n - 1],
            mean: v.iter().sum::<f64>() / n as f64,
            zero_dims: self.key_log_variance.len() - n,
        })
    }
}

/// Population variance of keys and mean output norm for every module of the model.
pub fn modality_stats<E: WeightEdits + ?Sized>(
    model: &ToyModel,
    edits: &E,
    samples: &[Sample],
) -> Result<Vec<ModuleStats>> {
    if samples.len() < 2 {
        return Err(Error::Contract("modality_stats needs at least two samples".into()));
    }
    let traces = samples
        .iter()
        .map(|s| model.forward(edits, s))
        .collect::<Result<Vec<_>>>()?;
    let n = samples.len() as f64;
    let mut out = Vec::new();
    for id in model.module_ids() {
        // Welford: identical samples give exactly zero variance.
        let dim = traces[0].module_key(id).len();
        let mut mean = vec![0.0; dim];
        let mut var = vec![0.0; dim];
        for (i, t) in traces.iter().enumerate() {
            let w = (i + 1) as f64;
            for ((m, v), &x) in mean.iter_mut().zip(var.iter_mut()).zip(t.module_key(id)) {
                let before = x - *m;
                *m += before / w;
                *v += before * (x - *m);
            }
        }
        let key_log_variance = var
            .into_iter()
            .map(|v| {
                let v = v / n;
                (v > 0.0).then(|| v.ln())
            })
            .collect();
        let mean_output_magnitude =
            traces.iter().map(|t| sq_norm(t.module_output(id)).sqrt()).sum::<f64>() / n;
        out.push(ModuleStats {
            module: id,
            key_log_variance,
            mean_output_magnitude,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DriftSummary {
    /// `‖h^L(edited) − h^L(reference)‖₂` per probe.
    pub per_probe: Vec<f64>,
    pub mean: f64,
    pub max: f64,
    /// Reference and edited final states in the first two principal axes of
    /// the reference states.
    pub reference_2d: Vec<[f64; 2]>,
    pub edited_2d: Vec<[f64; 2]>,
}

pub fn hidden_drift<E1, E2>(model: &ToyModel, edits: &E1, reference: &E2, probes: &[Sample]) -> Result<DriftSummary>
where
    E1: WeightEdits + ?Sized,
    E2: WeightEdits + ?Sized,
{
    if probes.is_empty() {
        return Err(Error::Contract("hidden_drift needs probes".into()));
    }
    let mut refs = Vec::with_capacity(probes.len());
    let mut eds = Vec::with_capacity(probes.len());
    for p in probes {
        refs.push(model.forward(reference, p)?.final_hidden().to_vec());
        eds.push(model.forward(edits, p)?.final_hidden().to_vec());
    }
    let per_probe: Vec<f64> = refs
        .iter()
        .zip(&eds)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
        .collect();
    let mean = per_probe.iter().sum::<f64>() / per_probe.len() as f64;
    let max = per_probe.iter().copied().fold(0.0, f64::max);

    let (center, axes) = principal_axes(&refs)?;
    let project = |h: &Vec<f64>| {
        let c: Vec<f64> = h.iter().zip(&center).map(|(x, m)| x - m).collect();
        [dot(&c, &axes[0]), dot(&c, &axes[1])]
    };
    Ok(DriftSummary {
        reference_2d: refs.iter().map(project).collect(),
        edited_2d: eds.iter().map(project).collect(),
        per_probe,
        mean,
        max,
    })
}

/// Mean and top-two principal directions of a point cloud.
fn principal_axes(points: &[Vec<f64>]) -> Result<(Vec<f64>, [Vec<f64>; 2])> {
    let d = points[0].len();
    let n = points.len() as f64;
    let mut center = vec![0.0; d];
    for p in points {
        for (c, x) in center.iter_mut().zip(p) {
            *c += x / n;
        }
    }
    let mut cov = Matrix::zeros(d, d);
    for p in points {
        let c: Vec<f64> = p.iter().zip(&center).map(|(x, m)| x - m).collect();
        cov.add_assign(&Matrix::outer(&c, &c))?;
    }
    let svd = thin_svd(&cov)?;
    let axis = |j: usize| {
        if j < d {
            svd.u.col(j)
        } else {
            vec![0.0; d]
        }
    };
    let mut a0 = axis(0);
    let mut a1 = axis(1);
    // Deterministic sign: largest-magnitude coordinate positive.
    for a in [&mut a0, &mut a1] {
        let lead = a.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            a.iter_mut().for_each(|x| *x = -*x);
        }
    }
    Ok((center, [a0, a1]))
}

#[derive(Clone, Debug)]
pub struct ModuleInterference {
    pub module: ModuleId,
    pub pairwise: PairwiseStats,
    pub lags: Vec<LagPoint>,
}

#[derive(Clone, Debug)]
pub struct DiagnosticsReport {
    pub editor: String,
    pub steps: usize,
    pub modules: Vec<ModuleInterference>,
    pub modality: Vec<ModuleStats>,
    /// Final-state drift against the unedited model on every locality probe.
    pub drift: DriftSummary,
    pub metrics: MetricsReport,
}

#[derive(Clone, Copy, Debug)]
pub struct DiagnoseOptions {
    /// Top-k override; defaults to [`default_topk`] per module.
    pub k: Option<usize>,
    /// Fresh samples used for the modality statistics.
    pub modality_samples: usize,
    pub sample_seed: RngSeed,
}

impl Default for DiagnoseOptions {
    fn default() -> Self {
        Self {
            k: None,
            modality_samples: 256,
            sample_seed: RngSeed(0x6d6f),
        }
    }
}

/// Run `editor` over `stream`, logging each step's updates, then analyse them.
pub fn diagnose(
    editor: &mut dyn OnlineEditor,
    model: &ToyModel,
    stream: &[EditRequest],
    opts: &DiagnoseOptions,
) -> Result<DiagnosticsReport> {
    let mut log = DeltaLog::new();
    let metrics = run_experiment_with(editor, model, stream, &ExperimentOptions::default(), |ed, _| {
        log.record(ed.effective_deltas())
    })?;

    let mut modules = Vec::new();
    for id in log.modules().collect::<Vec<_>>() {
        let updates = log.updates(id).expect("logged module");
        let entries = updates[0].data().len();
        let k = opts.k.unwrap_or_else(|| default_topk(entries)).min(entries);
        let pairwise = pairwise(updates, k)?;
        let lags = lag_curves_from_pairwise(&pairwise);
        modules.push(ModuleInterference { module: id, pairwise, lags });
    }

    let samples: Vec<Sample> = sample_generator(model.config(), opts.sample_seed)
        .take(opts.modality_samples)
        .collect();
    let modality = modality_stats(model, editor.weights(), &samples)?;
    let probes: Vec<Sample> = stream
        .iter()
        .flat_map(|r| r.text_locality_probes.iter().chain(&r.mm_locality_probes).cloned())
        .collect();
    let drift = hidden_drift(model, editor.weights(), &NoEdits, &probes)?;

    Ok(DiagnosticsReport {
        editor: editor.label().to_string(),
        steps: log.steps(),
        modules,
        modality,
        drift,
        metrics,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl DiagnosticsReport {
    pub fn module(&self, id: ModuleId) -> Option<&ModuleInterference> {
        self.modules.iter().find(|m| m.module == id)
    }

    /// Mean lag-1 cosine over edited modules, skipping undefined entries.
    pub fn lag1_cosine(&self) -> Option<f64> {
        let vals: Vec<f64> = self
            .modules
            .iter()
            .filter_map(|m| m.lags.first().and_then(|p| p.mean_cosine))
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn lags_csv(&self) -> String {
        let mut out = String::from("module,lag,pairs,mean_overlap,mean_cosine\n");
        for m in &self.modules {
            for p in &m.lags {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    m.module,
                    p.lag,
                    p.pairs,
                    p.mean_overlap,
                    opt(p.mean_cosine)
                );
            }
        }
        out
    }

    /// Long-form pairwise table: `module,i,j,overlap,cosine` with 1-based steps.
    pub fn pairwise_csv(&self) -> String {
        let mut out = String::from("module,i,j,overlap,cosine\n");
        for m in &self.modules {
            let n = m.pairwise.cosine.len();
            for i in 0..n {
                for j in 0..n {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{}",
                        m.module,
                        i + 1,
                        j + 1,
                        m.pairwise.overlap[(i, j)],
                        opt(m.pairwise.cosine[i][j])
                    );
                }
            }
        }
        out
    }

    pub fn modality_csv(&self) -> String {
        let mut out = String::from(
            "module,key_logvar_min,key_logvar_median,key_logvar_max,key_logvar_mean,zero_variance_dims,mean_output_magnitude\n",
        );
        for m in &self.modality {
            let s = m.summary();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                m.module,
                opt(s.map(|s| s.min)),
                opt(s.map(|s| s.median)),
                opt(s.map(|s| s.max)),
                opt(s.map(|s| s.mean)),
                s.map(|s| s.zero_dims).unwrap_or(m.key_log_variance.len()),
                m.mean_output_magnitude
            );
        }
        out
    }

    pub fn drift_csv(&self) -> String {
        let mut out = String::from("probe,drift,ref_pc1,ref_pc2,edited_pc1,edited_pc2\n");
        let d = &self.drift;
        for (i, ((x, r), e)) in d.per_probe.iter().zip(&d.reference_2d).zip(&d.edited_2d).enumerate() {
            let _ = writeln!(out, "{i},{x},{},{},{},{}", r[0], r[1], e[0], e[1]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{norm2, SeededRng};
    use crate::toymodel::{DenseDeltas, ToyModelConfig};

    fn rand_matrix(rng: &mut SeededRng, r: usize, c: usize) -> Matrix {
        rng.normal_matrix(r, c, 1.0)
    }

    #[test]
    fn overlap_identity_and_disjoint() {
        let mut rng = SeededRng::new(RngSeed(1));
        let a = rand_matrix(&mut rng, 6, 6);
        assert_eq!(topk_overlap(&a, &a, 10).unwrap(), 1.0);
        let left = Matrix::from_fn(6, 6, |_, j| if j < 3 { 1.0 + j as f64 } else { 0.0 });
        let right = Matrix::from_fn(6, 6, |_, j| if j >= 3 { 1.0 + j as f64 } else { 0.0 });
        assert_eq!(topk_overlap(&left, &right, 10).unwrap(), 0.0);
    }

    #[test]
    fn overlap_matches_brute_force_sets() {
        let mut rng = SeededRng::new(RngSeed(2));
        for _ in 0..50 {
            let a = rand_matrix(&mut rng, 6, 6);
            let b = rand_matrix(&mut rng, 6, 6);
            // Brute force: an index is in top-k iff fewer than k entries beat it.
            let top = |m: &Matrix| -> Vec<usize> {
                let d = m.data();
                (0..d.len())
                    .filter(|&i| {
                        (0..d.len())
                            .filter(|&j| d[j].abs() > d[i].abs() || (d[j].abs() == d[i].abs() && j < i))
                            .count()
                            < 10
                    })
                    .collect()
            };
            let (ta, tb) = (top(&a), top(&b));
            let common = ta.iter().filter(|i| tb.contains(i)).count();
            assert_eq!(topk_overlap(&a, &b, 10).unwrap(), common as f64 / 10.0);
        }
    }

    #[test]
    fn ties_break_to_lower_index() {
        let m = Matrix::from_vec(1, 4, vec![1.0, -1.0, 1.0, 0.5]).unwrap();
        assert_eq!(topk_indices(&m, 2), vec![0, 1]);
    }

    #[test]
    fn overlap_rejects_bad_input() {
        let a = Matrix::zeros(2, 2);
        assert!(topk_overlap(&a, &Matrix::zeros(2, 3), 1).is_err());
        assert!(topk_overlap(&a, &a, 5).is_err());
    }

    #[test]
    fn cosine_cases() {
        let mut rng = SeededRng::new(RngSeed(3));
        let a = rand_matrix(&mut rng, 4, 5);
        assert!((cosine_coupling(&a, &a.scale(2.0)).unwrap().unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_coupling(&a, &a.scale(-1.0)).unwrap().unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine_coupling(&a, &Matrix::zeros(4, 5)).unwrap(), None);
        let b = rand_matrix(&mut rng, 4, 5);
        let flat = dot(a.data(), b.data()) / (norm2(a.data()) * norm2(b.data()));
        assert!((cosine_coupling(&a, &b).unwrap().unwrap() - flat).abs() < 1e-12);
    }

    #[test]
    fn lag_curves_match_enumeration() {
        let mut rng = SeededRng::new(RngSeed(4));
        let log: Vec<Matrix> = (0..10).map(|_| rand_matrix(&mut rng, 5, 6)).collect();
        let direct = entanglement_horizon(&log, 10).unwrap();
        let via = lag_curves_from_pairwise(&pairwise(&log, 10).unwrap());
        assert_eq!(direct.len(), 9);
        for (lag, (a, b)) in direct.iter().zip(&via).enumerate() {
            let lag = lag + 1;
            let mut o = 0.0;
            let mut c = 0.0;
            for i in 0..10 - lag {
                o += topk_overlap(&log[i], &log[i + lag], 10).unwrap();
                c += cosine_coupling(&log[i], &log[i + lag]).unwrap().unwrap();
            }
            let n = (10 - lag) as f64;
            assert_eq!(a.pairs, 10 - lag);
            assert!((a.mean_overlap - o / n).abs() < 1e-12);
            assert!((a.mean_cosine.unwrap() - c / n).abs() < 1e-12);
            assert!((a.mean_overlap - b.mean_overlap).abs() < 1e-12);
            assert!((a.mean_cosine.unwrap() - b.mean_cosine.unwrap()).abs() < 1e-12);
        }
        let last = direct.last().unwrap();
        assert_eq!(last.mean_overlap, topk_overlap(&log[0], &log[9], 10).unwrap());
    }

    #[test]
    fn constant_updates_give_flat_overlap() {
        let m = Matrix::from_fn(4, 4, |i, j| (i * 4 + j) as f64 + 1.0);
        let curve = entanglement_horizon(&vec![m; 6], 10).unwrap();
        assert!(curve.iter().all(|p| p.mean_overlap == 1.0));
        assert!(entanglement_horizon(&[Matrix::zeros(2, 2)], 1).unwrap().is_empty());
    }

    #[test]
    fn delta_log_differences_cumulative_states() {
        let id = ModuleId::Block(0);
        let mut log = DeltaLog::new();
        let a = Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Matrix::from_vec(1, 2, vec![1.5, 1.0]).unwrap();
        log.record(BTreeMap::from([(id, a.clone())])).unwrap();
        log.record(BTreeMap::from([(id, b)])).unwrap();
        let u = log.updates(id).unwrap();
        assert_eq!(u[0], a);
        assert_eq!(u[1].data(), &[0.5, -1.0]);
        assert_eq!(log.steps(), 2);
    }

    fn small_model() -> ToyModel {
        ToyModel::new(ToyModelConfig {
            d: 12,
            d_v: 6,
            d_ff: 16,
            vocab: 8,
            blocks: 3,
            ..Default::default()
        })
        .unwrap()
    }

    fn samples(model: &ToyModel, n: usize, seed: u64) -> Vec<Sample> {
        crate::toymodel::sample_generator(model.config(), RngSeed(seed)).take(n).collect()
    }

    #[test]
    fn modality_stats_scale_and_degenerate_cases() {
        let model = small_model();
        let s = samples(&model, 20, 5);
        let base = modality_stats(&model, &NoEdits, &s).unwrap();
        // The network has no biases and only ReLU, so doubling inputs doubles keys.
        let doubled: Vec<Sample> = s
            .iter()
            .map(|x| Sample {
                x_v: x.x_v.iter().map(|v| 2.0 * v).collect(),
                x_q: x.x_q.iter().map(|v| 2.0 * v).collect(),
                y: x.y,
            })
            .collect();
        let twice = modality_stats(&model, &NoEdits, &doubled).unwrap();
        for (a, b) in base.iter().zip(&twice) {
            for (x, y) in a.key_log_variance.iter().zip(&b.key_log_variance) {
                match (x, y) {
                    (Some(x), Some(y)) => assert!((y - x - 4f64.ln()).abs() < 1e-9),
                    (None, None) => {}
                    _ => panic!("zero-variance pattern changed under scaling"),
                }
            }
        }
        let same = vec![s[0].clone(); 5];
        let flat = modality_stats(&model, &NoEdits, &same).unwrap();
        assert!(flat.iter().all(|m| m.key_log_variance.iter().all(Option::is_none)));
        assert!(flat[0].summary().is_none());
        assert!(modality_stats(&model, &NoEdits, &s[..1]).is_err());
    }

    #[test]
    fn drift_zero_without_edits() {
        let model = small_model();
        let probes = samples(&model, 6, 6);
        let d = hidden_drift(&model, &NoEdits, &NoEdits, &probes).unwrap();
        assert!(d.per_probe.iter().all(|&x| x == 0.0));
        assert_eq!(d.reference_2d, d.edited_2d);
    }

    #[test]
    fn last_block_drift_is_delta_times_key() {
        let model = small_model();
        let mut rng = SeededRng::new(RngSeed(8));
        let u = rng.normal_vec(12, 1.0);
        let v = rng.normal_vec(16, 1.0);
        let delta = Matrix::outer(&u, &v);
        let edits = DenseDeltas(BTreeMap::from([(ModuleId::Block(2), delta.clone())]));
        let probes = samples(&model, 5, 9);
        let d = hidden_drift(&model, &edits, &NoEdits, &probes).unwrap();
        for (p, got) in probes.iter().zip(&d.per_probe) {
            let k = model.forward(&NoEdits, p).unwrap().keys[2].clone();
            let want = norm2(&delta.matvec(&k).unwrap());
            assert!((got - want).abs() <= 1e-10 * want.max(1.0));
        }
    }
}
