//! Self-checks of the numerical kernels against independent references:
//! direct inverses, dense solves, finite differences and reconstruction.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{nullspace_update, NullspaceState};
use crate::editor::{init_state, init_states, EditTargets, GroupHyperparams, ModuleGroup, ModuleHyperparams};
use crate::error::{Error, Result};
use crate::numerics::{inverse_spd, norm2, solve_spd, thin_svd, Matrix, RngSeed, SeededRng};
use crate::toymodel::{edit_loss, grads_wrt_writes, ModuleId, Sample, ToyModel, ToyModelConfig};

pub const SM_TOL: f64 = 1e-6;
pub const CLOSED_FORM_TOL: f64 = 1e-8;
pub const GRADIENT_TOL: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-5;
pub const SVD_TOL: f64 = 1e-10;
pub const NULLSPACE_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Sm,
    ClosedForm,
    Gradients,
    Svd,
    Nullspace,
    All,
}

impl Suite {
    pub const EACH: [Suite; 5] = [Suite::Sm, Suite::ClosedForm, Suite::Gradients, Suite::Svd, Suite::Nullspace];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Sm => "sm",
            Suite::ClosedForm => "closedform",
            Suite::Gradients => "gradients",
            Suite::Svd => "svd",
            Suite::Nullspace => "nullspace",
            Suite::All => "all",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::EACH
            .into_iter()
            .chain([Suite::All])
            .find(|x| x.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown oracle suite {s:?} (expected sm, closedform, gradients, svd, nullspace or all)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleCheck {
    pub suite: Suite,
    pub name: &'static str,
    /// Worst observed error over all instances.
    pub observed: f64,
    pub tolerance: f64,
}

impl OracleCheck {
    pub fn passed(&self) -> bool {
        self.observed.is_finite() && self.observed < self.tolerance
    }
}

impl fmt::Display for OracleCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}/{}: observed {:.3e} (tolerance {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.observed,
            self.tolerance
        )
    }
}

pub fn run_suite(suite: Suite, seed: RngSeed) -> Result<Vec<OracleCheck>> {
    let check = |s: Suite, name, observed, tolerance| OracleCheck {
        suite: s,
        name,
        observed,
        tolerance,
    };
    Ok(match suite {
        Suite::Sm => vec![check(suite, "recursion_vs_direct_inverse", sm_recursion_error(1000, 16, 100.0, seed)?, SM_TOL)],
        Suite::ClosedForm => vec![check(suite, "write_vs_dense_solve", closed_form_error(50, seed)?, CLOSED_FORM_TOL)],
        Suite::Gradients => {
            let (gb, ga) = gradient_error(20, seed)?;
            vec![
                check(suite, "write_gradient_vs_fd", gb, GRADIENT_TOL),
                check(suite, "basis_gradient_vs_fd", ga, GRADIENT_TOL),
            ]
        }
        Suite::Svd => vec![check(suite, "reconstruction_orthogonality", svd_error(40, seed)?, SVD_TOL)],
        Suite::Nullspace => vec![check(suite, "stored_keys_preserved", nullspace_error(30, seed)?, NULLSPACE_TOL)],
        Suite::All => {
            let mut all = Vec::new();
            for s in Suite::EACH {
                all.extend(run_suite(s, seed)?);
            }
            all
        }
    })
}

fn text_hp(rank: usize, lambda: f64) -> ModuleHyperparams {
    ModuleHyperparams {
        rank,
        eta: 0.1,
        lambda,
        alpha_over_r: 2.0,
        group: ModuleGroup::TextLayer,
    }
}

/// Relative Frobenius gap between the recursive preconditioner after `steps`
/// rank-one absorbs and `(I + λI + Σ z zᵀ)⁻¹` inverted directly.
pub fn sm_recursion_error(steps: usize, rank: usize, lambda: f64, seed: RngSeed) -> Result<f64> {
    let mut rng = SeededRng::new(seed.derive(0x5e));
    let mut state = init_state(ModuleId::Block(0), rank, 1, text_hp(rank, lambda), seed)?;
    let mut s = Matrix::scaled_identity(rank, 1.0 + lambda);
    for _ in 0..steps {
        let z = rng.normal_vec(rank, 1.0);
        state.absorb_context(&z)?;
        s.add_assign(&Matrix::outer(&z, &z))?;
    }
    let direct = inverse_spd(&s)?;
    state.preconditioner().rel_frobenius_diff(&direct)
}

/// Worst relative gap between the preconditioned write and the minimizer of
/// `‖ΔB + ηG‖² + tr(ΔB S ΔBᵀ)` obtained from `(I + S) ΔBᵀ = −η Gᵀ`.
pub fn closed_form_error(instances: usize, seed: RngSeed) -> Result<f64> {
    let mut rng = SeededRng::new(seed.derive(0xcf));
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let r = 1 + rng.below(16);
        let d_out = 1 + rng.below(12);
        let lambda = [1.0, 10.0, 100.0][rng.below(3)];
        let mut state = init_state(ModuleId::Block(0), r, d_out, text_hp(r, lambda), seed.derive(i as u64))?;
        let mut s = Matrix::scaled_identity(r, lambda);
        for _ in 0..rng.below(3 * r + 1) {
            let z = rng.normal_vec(r, 2.0);
            state.absorb_context(&z)?;
            s.add_assign(&Matrix::outer(&z, &z))?;
        }
        let g = rng.normal_matrix(d_out, r, 1.0);
        let got = state.compute_write(&g)?;
        let lhs = Matrix::identity(r).add(&s)?;
        let want = solve_spd(&lhs, &g.transpose().scale(-state.hyperparams().eta))?.transpose();
        worst = worst.max(got.rel_frobenius_diff(&want)?);
    }
    Ok(worst)
}

fn random_small_model(rng: &mut SeededRng, seed: RngSeed) -> Result<ToyModel> {
    let d = 4 + rng.below(13);
    ToyModel::new(ToyModelConfig {
        d,
        d_v: 2 + rng.below(d - 1),
        d_ff: 4 + rng.below(13),
        vocab: 3 + rng.below(6),
        blocks: 2 + rng.below(2),
        sigma_v: 1.0,
        sigma_t: 1.0,
        seed,
    })
}

/// Worst relative error of the analytic write and basis gradients against
/// central finite differences on random small models with non-zero writes.
pub fn gradient_error(instances: usize, seed: RngSeed) -> Result<(f64, f64)> {
    let mut rng = SeededRng::new(seed.derive(0x9d));
    let (mut worst_b, mut worst_a): (f64, f64) = (0.0, 0.0);
    for i in 0..instances {
        let model = random_small_model(&mut rng, seed.derive(100 + i as u64))?;
        let c = model.config().clone();
        let rank = 1 + rng.below(c.d_v.min(c.d_ff).min(4));
        let hps = GroupHyperparams {
            text: text_hp(rank, 1.0),
            projector: ModuleHyperparams {
                group: ModuleGroup::VisualProjector,
                ..text_hp(rank, 1.0)
            },
        };
        let mut states = init_states(&c, &EditTargets::default(), &hps, seed.derive(200 + i as u64))?;
        for (_, st) in states.iter_mut() {
            let b = rng.normal_matrix(st.d_out(), st.rank(), 0.3);
            st.apply_write(&b)?;
        }
        let mut sample = Sample {
            x_v: rng.normal_vec(c.d_v, 1.0),
            x_q: rng.normal_vec(c.d, 1.0),
            y: 0,
        };
        // A non-argmax label keeps the loss away from softmax saturation.
        let top = model.forward(&states, &sample)?.argmax();
        sample.y = (top + 1 + rng.below(c.vocab - 1)) % c.vocab;
        let loss = |s: &crate::editor::EditStates| -> Result<f64> { edit_loss(&model.forward(s, &sample)?, sample.y) };

        let grads_b = grads_wrt_writes(&model, &states, &sample, sample.y)?;
        let trace = model.forward(&states, &sample)?;
        let sens = model.backward(&states, &trace, sample.y)?;
        for id in states.ids() {
            let st = states.get(id).expect("listed id");
            let gb = &grads_b[&id];
            let ga = st.basis_gradient(&sens[&id])?;

            let mut fd_b = Matrix::zeros(gb.rows(), gb.cols());
            for p in 0..gb.rows() {
                for q in 0..gb.cols() {
                    let bump = |h: f64| -> Result<f64> {
                        let mut s = states.clone();
                        let mut e = Matrix::zeros(gb.rows(), gb.cols());
                        e[(p, q)] = h;
                        s.get_mut(id).expect("listed id").apply_write(&e)?;
                        loss(&s)
                    };
                    fd_b[(p, q)] = (bump(FD_STEP)? - bump(-FD_STEP)?) / (2.0 * FD_STEP);
                }
            }
            worst_b = worst_b.max(gb.rel_frobenius_diff(&fd_b)?);

            let mut fd_a = Matrix::zeros(ga.rows(), ga.cols());
            for p in 0..ga.rows() {
                for q in 0..ga.cols() {
                    let bump = |h: f64| -> Result<f64> {
                        let mut s = states.clone();
                        s.get_mut(id).expect("listed id").basis_mut()[(p, q)] += h;
                        loss(&s)
                    };
                    fd_a[(p, q)] = (bump(FD_STEP)? - bump(-FD_STEP)?) / (2.0 * FD_STEP);
                }
            }
            worst_a = worst_a.max(ga.rel_frobenius_diff(&fd_a)?);
        }
    }
    Ok((worst_b, worst_a))
}

/// Worst of: relative reconstruction error, `‖VᵀV − I‖_max`, `‖UᵀU − I‖_max`
/// over columns with non-negligible singular value, and any ordering violation.
pub fn svd_error(instances: usize, seed: RngSeed) -> Result<f64> {
    let mut rng = SeededRng::new(seed.derive(0x5d));
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let d = 2 + rng.below(19);
        let t = 1 + rng.below(d);
        // Every third instance is rank deficient.
        let m = if i % 3 == 2 && t > 1 {
            let k = 1 + rng.below(t - 1);
            rng.normal_matrix(d, k, 1.0).matmul(&rng.normal_matrix(k, t, 1.0))?
        } else {
            rng.normal_matrix(d, t, 1.0)
        };
        let svd = thin_svd(&m)?;
        let rebuilt = svd.u.matmul(&Matrix::diag(&svd.s))?.matmul(&svd.vt)?;
        worst = worst.max(rebuilt.rel_frobenius_diff(&m)?);
        let vtv = svd.vt.matmul(&svd.vt.transpose())?;
        worst = worst.max(vtv.max_abs_diff(&Matrix::identity(t))?);
        let keep: Vec<usize> = (0..t).filter(|&j| svd.s[j] > 1e-8 * svd.s[0]).collect();
        for &a in &keep {
            for &b in &keep {
                let ua = svd.u.col(a);
                let ub = svd.u.col(b);
                let want = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((crate::numerics::dot(&ua, &ub) - want).abs());
            }
        }
        if svd.s.windows(2).any(|w| w[1] > w[0]) || svd.s.iter().any(|&x| x < 0.0) {
            worst = f64::INFINITY;
        }
    }
    Ok(worst)
}

/// Worst `‖ΔW k_i‖ / (η ‖g‖ ‖k_i‖)` over stored keys, plus the gap to the
/// plain step when no key is stored.
pub fn nullspace_error(instances: usize, seed: RngSeed) -> Result<f64> {
    let mut rng = SeededRng::new(seed.derive(0x75));
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let d = 3 + rng.below(10);
        let d_out = 1 + rng.below(6);
        let mut state = NullspaceState::new(d, 0.5);
        let g0 = rng.normal_matrix(d_out, d, 1.0);
        let plain = nullspace_update(&state, &g0)?;
        worst = worst.max(plain.rel_frobenius_diff(&g0.scale(-0.5))?);
        let mut keys = Vec::new();
        for _ in 0..1 + rng.below(d + 3) {
            let k = rng.normal_vec(d, 1.0);
            state.push_key(&k)?;
            keys.push(k);
        }
        let g = rng.normal_matrix(d_out, d, 1.0);
        let dw = nullspace_update(&state, &g)?;
        let scale = 0.5 * g.frobenius_norm();
        for k in &keys {
            worst = worst.max(norm2(&dw.matvec(k)?) / (scale * norm2(k)));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::EACH.into_iter().chain([Suite::All]) {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!(matches!("bogus".parse::<Suite>(), Err(Error::Config(_))));
    }

    #[test]
    fn every_suite_passes() {
        for check in run_suite(Suite::All, RngSeed(3)).unwrap() {
            assert!(check.passed(), "{check}");
        }
    }

    #[test]
    fn failing_check_reports_fail() {
        let c = OracleCheck {
            suite: Suite::Sm,
            name: "x",
            observed: f64::NAN,
            tolerance: 1.0,
        };
        assert!(!c.passed());
        assert!(c.to_string().starts_with("FAIL"));
    }
}
