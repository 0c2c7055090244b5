//! Central finite-difference verification of tape gradients.
//!
//! The numeric side is computed purely from loss *values* at perturbed
//! points, so it stays independent of the reverse-mode code it checks.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{ChoiceInstance, EncoderConfig, PolicyNet, PolicyNetConfig, PolicyState, ScoringModel};
use crate::params::{ParamLayout, ParameterVector};
use crate::tape::{evaluate_loss, evaluate_with_gradients, Objective, Tape, Val};

/// A coordinate whose analytic and numeric derivatives disagree.
#[derive(Debug, Clone)]
pub struct FdIssue {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    /// Largest relative error over all coordinates.
    pub max_rel_err: f64,
    pub worst_index: usize,
    /// Coordinates exceeding the tolerance.
    pub issues: Vec<FdIssue>,
    pub checked: usize,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Relative error with a unit floor: tiny gradients are compared absolutely,
/// which is the regime where finite differences are themselves unreliable.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1.0);
    (analytic - numeric).abs() / scale
}

/// Checks the tape gradient of `obj` at `params` against central finite
/// differences with step `h`, flagging coordinates whose relative error
/// exceeds `tol`. Also verifies the objective is deterministic by evaluating
/// the base point twice and comparing bits.
pub fn finite_diff_check<O: Objective + ?Sized>(
    params: &ParameterVector,
    obj: &O,
    h: f64,
    tol: f64,
) -> Result<FdReport> {
    let l1 = evaluate_loss(params, obj)?;
    let l2 = evaluate_loss(params, obj)?;
    if l1.to_bits() != l2.to_bits() {
        return Err(Error::NondeterministicLoss(l1, l2));
    }
    let (_, analytic) = evaluate_with_gradients(params, obj)?;
    finite_diff_check_against(params, obj, &analytic, h, tol)
}

/// Same check, but against a caller-supplied gradient. This is the building
/// block: it lets tests verify that a deliberately corrupted gradient is
/// flagged.
pub fn finite_diff_check_against<O: Objective + ?Sized>(
    params: &ParameterVector,
    obj: &O,
    analytic: &[f64],
    h: f64,
    tol: f64,
) -> Result<FdReport> {
    if analytic.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "gradient of {} entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    if h <= 0.0 || tol <= 0.0 {
        return Err(Error::ConfigError("h and tol must be positive".into()));
    }
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_index: 0,
        issues: Vec::new(),
        checked: analytic.len(),
    };
    let mut work = params.clone();
    for i in 0..analytic.len() {
        let base = params.values()[i];
        work.values_mut()[i] = base + h;
        let up = evaluate_loss(&work, obj)?;
        work.values_mut()[i] = base - h;
        let down = evaluate_loss(&work, obj)?;
        work.values_mut()[i] = base;
        let numeric = (up - down) / (2.0 * h);
        let e = rel_err(analytic[i], numeric);
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst_index = i;
        }
        if e > tol {
            report.issues.push(FdIssue {
                index: i,
                analytic: analytic[i],
                numeric,
                rel_err: e,
            });
        }
    }
    Ok(report)
}

/// Summary of one battery section.
#[derive(Debug, Clone)]
pub struct BatterySection {
    pub name: &'static str,
    pub points: usize,
    pub max_rel_err: f64,
    pub flagged: usize,
}

/// Default step and tolerance for the battery: h = 1e-5, tol = 1e-4.
pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Runs the standard gradient-check battery: a kitchen-sink graph touching
/// every primitive, the encoder + scoring head on random batches, and a
/// three-step chained policy rollout (recurrent credit assignment). Each
/// section draws `points` random parameter/data settings and checks every
/// coordinate at each.
pub fn standard_battery(points: usize, seed: u64) -> Result<Vec<BatterySection>> {
    let mut out = Vec::new();
    out.push(check_primitives(points, seed)?);
    out.push(check_encoder_head(points, seed ^ 0x9e37_79b9)?);
    out.push(check_policy_chain(points, seed ^ 0x517c_c1b7, 3)?);
    Ok(out)
}

fn section(
    name: &'static str,
    points: usize,
    reports: Vec<FdReport>,
) -> BatterySection {
    let mut max_rel = 0.0;
    let mut flagged = 0;
    for r in reports {
        if r.max_rel_err > max_rel {
            max_rel = r.max_rel_err;
        }
        flagged += r.issues.len();
    }
    BatterySection {
        name,
        points,
        max_rel_err: max_rel,
        flagged,
    }
}

/// One scalar graph that exercises every registered primitive.
fn primitives_objective(tape: &mut Tape, p: Val) -> Result<Val> {
    let w = tape.slice(p, 0, 4)?; // 2x2 matrix
    let x = tape.slice(p, 4, 2)?;
    let rest = tape.slice(p, 6, 2)?;

    let y = tape.matvec(w, x, 2, 2)?; // matmul
    let t = tape.tanh(y); // tanh
    let s = tape.sigmoid(y); // sigmoid
    let m = tape.mul(t, s)?; // mul
    let shifted = tape.add_const(s, 1.5); // add_const (keeps denominator > 1.5)
    let d = tape.div(t, shifted)?; // div
    let sm = tape.softmax(rest); // softmax
    let lsm = tape.ln(sm); // ln of positive values
    let cat = tape.concat(&[m, d, lsm])?; // concat
    let quad = tape.dot(cat, cat)?; // dot
    let nll = tape.softmax_nll(y, 0)?; // fused softmax log-loss
    let diff = tape.sub(t, s)?; // sub
    let neg = tape.neg(diff); // neg
    let scaled = tape.scale(neg, 0.75); // scale
    let sum1 = tape.sum(scaled); // sum
    let mean1 = tape.mean(cat)?; // mean
    let s0 = tape.slice(sm, 0, 1)?;
    let ms = tape.mul_scalar(s0, y)?; // scalar-vector product
    let sum2 = tape.sum(ms);
    let a = tape.add(quad, nll)?; // add
    let b = tape.add(sum1, mean1)?;
    let c = tape.add(a, b)?;
    tape.add(c, sum2)
}

fn check_primitives(points: usize, seed: u64) -> Result<BatterySection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = ParamLayout::build(&[("p", 8)])?;
    let mut reports = Vec::with_capacity(points);
    for _ in 0..points {
        let values: Vec<f64> = (0..8).map(|_| rng.gen_range(-0.9..0.9)).collect();
        let params = ParameterVector::from_values(layout.clone(), values)?;
        reports.push(finite_diff_check(
            &params,
            &primitives_objective,
            FD_STEP,
            FD_TOL,
        )?);
    }
    Ok(section("primitives", points, reports))
}

fn check_encoder_head(points: usize, seed: u64) -> Result<BatterySection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = ScoringModel::new(EncoderConfig {
        input_dim: 5,
        hidden_dim: 6,
        layers: 2,
    })?;
    let mut reports = Vec::with_capacity(points);
    for _ in 0..points {
        let values: Vec<f64> = (0..model.layout().total_len())
            .map(|_| rng.gen_range(-0.5..0.5))
            .collect();
        let params = ParameterVector::from_values(model.layout().clone(), values)?;
        let batch: Vec<ChoiceInstance> = (0..2)
            .map(|_| {
                let n = 3;
                let features = (0..n)
                    .map(|_| (0..5).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
                    .collect();
                ChoiceInstance::new(features, rng.gen_range(0..n)).unwrap()
            })
            .collect();
        reports.push(finite_diff_check(
            &params,
            &model.objective(&batch),
            FD_STEP,
            FD_TOL,
        )?);
    }
    Ok(section("encoder_head", points, reports))
}

/// Objective: chain `steps` policy steps on one tape and take
/// `sum_t sum_m log P^t_m`, so gradients must flow through the recurrence.
struct PolicyChainObjective<'a> {
    net: &'a PolicyNet,
    state: &'a PolicyState,
    rewards: &'a [Vec<f64>],
    steps: usize,
}

impl Objective for PolicyChainObjective<'_> {
    fn loss(&self, tape: &mut Tape, phi: Val) -> Result<Val> {
        let mut sv = self.net.state_to_vals(tape, self.state)?;
        let mut total: Option<Val> = None;
        for step in 0..self.steps {
            let (probs, mut next) = self.net.step_tape(tape, phi, &sv)?;
            let lp = tape.ln(probs);
            let s = tape.sum(lp);
            total = Some(match total {
                None => s,
                Some(acc) => tape.add(acc, s)?,
            });
            next.prev_rewards = tape.leaf(&self.rewards[step]);
            sv = next;
        }
        Ok(total.expect("at least one step"))
    }
}

fn check_policy_chain(points: usize, seed: u64, steps: usize) -> Result<BatterySection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = PolicyNet::new(PolicyNetConfig {
        num_tasks: 3,
        hidden_dim: 4,
        window: 2,
        ffn_hidden: 4,
    })?;
    let mut reports = Vec::with_capacity(points);
    for _ in 0..points {
        let values: Vec<f64> = (0..net.layout().total_len())
            .map(|_| rng.gen_range(-0.4..0.4))
            .collect();
        let phi = ParameterVector::from_values(net.layout().clone(), values)?;
        let state = PolicyState::initial(net.config());
        let rewards: Vec<Vec<f64>> = (0..steps)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let obj = PolicyChainObjective {
            net: &net,
            state: &state,
            rewards: &rewards,
            steps,
        };
        reports.push(finite_diff_check(&phi, &obj, FD_STEP, FD_TOL)?);
    }
    Ok(section("policy_3step", points, reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(values: Vec<f64>) -> ParameterVector {
        let layout = ParamLayout::build(&[("w", values.len())]).unwrap();
        ParameterVector::from_values(layout, values).unwrap()
    }

    fn quadratic(tape: &mut Tape, p: Val) -> Result<Val> {
        let sq = tape.mul(p, p)?;
        let s = tape.sum(sq);
        Ok(tape.scale(s, 0.5))
    }

    #[test]
    fn quadratic_passes_cleanly() {
        let params = pv(vec![1.0, -2.0, 0.5]);
        let report = finite_diff_check(&params, &quadratic, FD_STEP, FD_TOL).unwrap();
        assert!(report.passed());
        assert!(report.max_rel_err < 1e-8, "max {}", report.max_rel_err);
    }

    #[test]
    fn constant_loss_passes_with_zero_gradients() {
        let params = pv(vec![0.3, 0.4]);
        let report = finite_diff_check(
            &params,
            &|tape: &mut Tape, _p: Val| Ok(tape.scalar(2.5)),
            FD_STEP,
            FD_TOL,
        )
        .unwrap();
        assert!(report.passed());
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn corrupted_coordinate_is_flagged() {
        let params = pv(vec![1.0, -2.0, 0.5]);
        let (_, mut grad) = evaluate_with_gradients(&params, &quadratic).unwrap();
        grad[1] *= 2.0;
        let report =
            finite_diff_check_against(&params, &quadratic, &grad, FD_STEP, FD_TOL).unwrap();
        assert_eq!(report.issues.len(), 1);
        assert_eq!(report.issues[0].index, 1);
    }

    #[test]
    fn battery_smoke() {
        let sections = standard_battery(3, 99).unwrap();
        assert_eq!(sections.len(), 3);
        for s in &sections {
            assert_eq!(s.flagged, 0, "{} flagged {}", s.name, s.flagged);
            assert!(s.max_rel_err < FD_TOL, "{}: {}", s.name, s.max_rel_err);
        }
    }
}
