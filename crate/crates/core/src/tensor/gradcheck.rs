//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Largest relative error between analytic and central-difference gradients
/// over every coordinate of every parameter.
///
/// The relative error of one coordinate is
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
/// `f` receives a fresh tape and the parameter handles, and must return a
/// scalar loss.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let coords: Vec<Vec<usize>> = params.iter().map(|p| (0..p.numel()).collect()).collect();
    check_coords(&f, params, step, &coords)
}

/// Like [`grad_check`] but only probes up to `per_tensor` randomly chosen
/// coordinates of each parameter, so large models stay tractable.
pub fn grad_check_sampled<F>(
    f: F,
    params: &[Tensor<f64>],
    step: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<Vec<usize>> = params
        .iter()
        .map(|p| {
            let n = p.numel();
            let mut picked = sample(&mut rng, n, per_tensor.min(n)).into_vec();
            picked.sort_unstable();
            picked
        })
        .collect();
    check_coords(&f, params, step, &coords)
}

fn check_coords<F>(f: &F, params: &[Tensor<f64>], step: f64, coords: &[Vec<usize>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    finite(tape.scalar(loss)?)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| grads.get(v).expect("parameters require grad").to_vec())
        .collect();
    drop(tape);

    let mut worst: f64 = 0.0;
    let mut probe = params.to_vec();
    for (pi, indices) in coords.iter().enumerate() {
        for &i in indices {
            let orig = probe[pi].data()[i];
            probe[pi].data_mut()[i] = orig + step;
            let up = evaluate(f, &probe)?;
            probe[pi].data_mut()[i] = orig - step;
            let down = evaluate(f, &probe)?;
            probe[pi].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[pi][i];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn evaluate<F>(f: &F, params: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    evaluate_with_signature(f, params).map(|(v, _)| v)
}

fn evaluate_with_signature<F>(f: &F, params: &[Tensor<f64>]) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    Ok((finite(tape.scalar(loss)?)?, tape.branch_signature()))
}

/// Outcome of [`grad_check_report`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// Coordinates probed.
    pub probes: usize,
    /// Largest central-difference relative error over probes whose `±step`
    /// evaluations stayed on the same smooth piece as the base point.
    pub max_error: f64,
    /// Probes where a ReLU, max-pool or clamp decision flipped inside
    /// `[x - step, x + step]`.
    pub kink_probes: usize,
    /// Largest one-sided-difference relative error over kink probes, taken on
    /// the side that kept the base point's branches.
    pub max_one_sided_error: f64,
    /// Kink probes where both sides changed branches; these are not checked.
    pub unverified: usize,
    /// Largest central-difference error over every probe, kinks included.
    pub max_raw_error: f64,
}

impl GradCheckReport {
    /// Worst error over every verified probe.
    pub fn worst(&self) -> f64 {
        self.max_error.max(self.max_one_sided_error)
    }
}

/// Kink-aware gradient check over up to `per_tensor` random coordinates of
/// each parameter (all coordinates when `None`).
///
/// Central differences are meaningless across a point where the function is
/// not differentiable, so each probe compares branch signatures (see
/// [`Tape::branch_signature`]) of the base and perturbed evaluations. A probe
/// that crosses a kink on one side only is checked with a one-sided
/// difference on the other side.
pub fn grad_check_report<F>(
    f: F,
    params: &[Tensor<f64>],
    step: f64,
    per_tensor: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<Vec<usize>> = params
        .iter()
        .map(|p| match per_tensor {
            Some(k) => {
                let mut picked = sample(&mut rng, p.numel(), k.min(p.numel())).into_vec();
                picked.sort_unstable();
                picked
            }
            None => (0..p.numel()).collect(),
        })
        .collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let base = finite(tape.scalar(loss)?)?;
    let base_sig = tape.branch_signature();
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| grads.get(v).expect("parameters require grad").to_vec())
        .collect();
    drop(tape);

    let rel = |a: f64, n: f64| (a - n).abs() / 1f64.max(a.abs()).max(n.abs());
    let mut report = GradCheckReport::default();
    let mut probe = params.to_vec();
    for (pi, indices) in coords.iter().enumerate() {
        for &i in indices {
            let orig = probe[pi].data()[i];
            probe[pi].data_mut()[i] = orig + step;
            let (up, up_sig) = evaluate_with_signature(&f, &probe)?;
            probe[pi].data_mut()[i] = orig - step;
            let (down, down_sig) = evaluate_with_signature(&f, &probe)?;
            probe[pi].data_mut()[i] = orig;
            let a = analytic[pi][i];
            let central = rel(a, (up - down) / (2.0 * step));
            report.probes += 1;
            report.max_raw_error = report.max_raw_error.max(central);
            if up_sig == base_sig && down_sig == base_sig {
                report.max_error = report.max_error.max(central);
                continue;
            }
            report.kink_probes += 1;
            let one_sided = if up_sig == base_sig {
                Some((up - base) / step)
            } else if down_sig == base_sig {
                Some((base - down) / step)
            } else {
                None
            };
            match one_sided {
                Some(n) => report.max_one_sided_error = report.max_one_sided_error.max(rel(a, n)),
                None => report.unverified += 1,
            }
        }
    }
    Ok(report)
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!(
            "grad_check objective evaluated to {v}"
        )))
    }
}
