//! Central-difference verification of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{first_argmax, Graph, Var};
use crate::error::{Error, Result};
use crate::mil::{image_label_loss, mil_loss_from_scores, LabelBag};
use crate::net::{build_network, Network, NetworkConfig};
use crate::tensor::Tensor;

/// Location of one scalar inside a parameter list.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamIndex {
    pub param: usize,
    pub element: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error seen in each parameter tensor.
    pub max_rel_error: Vec<f64>,
    /// Element with the largest relative error overall.
    pub worst: Option<ParamIndex>,
    pub step: f64,
    pub tolerance: f64,
    pub pass: bool,
    /// Set when the function produced a non-finite value.
    pub non_finite: Option<ParamIndex>,
}

impl GradCheckReport {
    pub fn overall_max(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

/// `|a - b| / max(|a|, |b|, 1e-12)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Evaluates `build` once with backward to get analytic gradients, then
/// compares every parameter element against `(f(p + h) - f(p - h)) / 2h`.
///
/// `build` must record a scalar-valued computation over the given parameter
/// vars and return its output.
pub fn finite_diff_check<F>(
    build: F,
    params: &[Tensor],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| graph.leaf(p.clone())).collect();
    let out = build(&mut graph, &vars)?;
    let grads = graph.backward_scalar(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();
    compare_with_finite_differences(build, params, &analytic, step, tolerance)
}

/// Same comparison as [`finite_diff_check`] against caller-supplied gradients.
pub fn compare_with_finite_differences<F>(
    build: F,
    params: &[Tensor],
    analytic: &[Tensor],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |_: usize, ps: &[Tensor]| -> Result<f64> {
        let mut graph = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| graph.leaf(p.clone())).collect();
        let out = build(&mut graph, &vars)?;
        Ok(graph.value(out).sum())
    };
    compare_with(eval, params, analytic, step, tolerance)
}

/// Central differences of `eval`, which is told which parameter tensor is
/// perturbed and may skip work that does not depend on it.
fn compare_with<E>(
    eval: E,
    params: &[Tensor],
    analytic: &[Tensor],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    E: Fn(usize, &[Tensor]) -> Result<f64>,
{
    let mut report = GradCheckReport {
        max_rel_error: vec![0.0; params.len()],
        worst: None,
        step,
        tolerance,
        pass: true,
        non_finite: None,
    };
    let mut worst_err = -1.0;
    let mut work = params.to_vec();

    for (pi, param) in params.iter().enumerate() {
        for ei in 0..param.numel() {
            let here = ParamIndex {
                param: pi,
                element: ei,
            };
            let orig = param.data()[ei];
            let (hi, lo) = (orig + step, orig - step);
            work[pi].data_mut()[ei] = hi;
            let plus = eval(pi, &work)?;
            work[pi].data_mut()[ei] = lo;
            let minus = eval(pi, &work)?;
            work[pi].data_mut()[ei] = orig;

            if !plus.is_finite() || !minus.is_finite() {
                report.pass = false;
                report.non_finite = Some(here);
                report.worst = Some(here);
                return Ok(report);
            }
            // Divide by the perturbation actually represented, not 2h.
            let numeric = (plus - minus) / (hi - lo);
            let err = relative_error(analytic[pi].data()[ei], numeric);
            let slot = &mut report.max_rel_error[pi];
            *slot = slot.max(err);
            if err > worst_err {
                worst_err = err;
                report.worst = Some(here);
            }
        }
    }
    report.pass = report.overall_max() <= tolerance;
    Ok(report)
}

/// Loss used when checking a whole network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Mil,
    ImageLabel,
}

/// Nonzero gradient elements smaller than this are below what a central
/// difference with step ~1e-4 can resolve in f64 at 1e-5 relative error.
pub const MIN_RESOLVABLE_GRADIENT: f64 = 1e-7;

/// A network, an input and a bag at which every kink is at least `margin`
/// away: ReLU preactivations, max-pool and channel-max runner-ups, and the
/// per-label probability arg-max selected by the MIL loss. Every nonzero
/// gradient element of both losses is at least [`MIN_RESOLVABLE_GRADIENT`].
pub struct CheckInstance {
    pub net: Network,
    pub image: Tensor,
    pub bag: LabelBag,
    pub margin: f64,
    /// Candidates drawn before this one was accepted.
    pub attempts: usize,
}

/// Smallest gap between each bag label's peak probability and the runner-up
/// in the same channel.
pub fn selection_margin(probs: &Tensor, bag: &LabelBag) -> Result<f64> {
    let (_, h, w) = probs.dims3()?;
    let plane = h * w;
    let mut margin = f64::INFINITY;
    for l in bag.labels() {
        let ch = &probs.data()[l * plane..(l + 1) * plane];
        let best = first_argmax(ch);
        for (i, &v) in ch.iter().enumerate() {
            if i != best {
                margin = margin.min(ch[best] - v);
            }
        }
    }
    Ok(margin)
}

fn record(net: &Network, g: &mut Graph, image: &Tensor, params: &[Var], bag: &LabelBag, kind: LossKind) -> Result<Var> {
    let x = g.leaf(image.clone());
    let scores = net.forward_with(g, x, params)?;
    match kind {
        LossKind::Mil => Ok(mil_loss_from_scores(g, scores, bag)?.loss),
        LossKind::ImageLabel => image_label_loss(g, scores, bag),
    }
}

/// Smallest nonzero gradient magnitude of `kind` over all parameters.
fn smallest_gradient(net: &Network, image: &Tensor, bag: &LabelBag, kind: LossKind) -> Result<f64> {
    let mut g = Graph::new();
    let params: Vec<Var> = net.params().iter().map(|p| g.leaf(p.value.clone())).collect();
    let loss = record(net, &mut g, image, &params, bag, kind)?;
    let grads = g.backward_scalar(loss)?;
    Ok(params
        .iter()
        .flat_map(|&p| grads.get(p).into_data())
        .filter(|v| *v != 0.0)
        .fold(f64::INFINITY, |m, v| m.min(v.abs())))
}

/// Rejection-samples a default-config network with random biases, an
/// `size x size` uniform image and a random bag until all kinks clear `margin`
/// and no gradient element is too small to check.
pub fn sample_instance(seed: u64, size: usize, margin: f64, max_attempts: usize) -> Result<CheckInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = NetworkConfig::default();
    for attempt in 1..=max_attempts {
        let mut net = build_network(config.clone(), rng.gen())?;
        // Random biases move preactivations off the zero-bias symmetry.
        for p in net.params_mut().iter_mut().filter(|p| p.name.ends_with("bias")) {
            p.value = Tensor::uniform(p.value.shape(), -0.5, 0.5, &mut rng);
        }
        let image = Tensor::uniform(&[config.input_channels, size, size], 0.0, 1.0, &mut rng);
        let fg: Vec<usize> = (1..=config.num_fg_classes).filter(|_| rng.gen_bool(0.5)).collect();
        let bag = LabelBag::with_foreground(fg, config.num_fg_classes)?;

        let mut g = Graph::new();
        let x = g.leaf(image.clone());
        let pass = net.forward(&mut g, x)?;
        let probs = g.softmax_channels(pass.scores)?;
        g.channel_max(pass.scores)?;
        let found = g.kink_margin().min(selection_margin(g.value(probs), &bag)?);
        if found <= margin {
            continue;
        }
        let resolvable = [LossKind::Mil, LossKind::ImageLabel]
            .into_iter()
            .map(|kind| smallest_gradient(&net, &image, &bag, kind))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .all(|m| m >= MIN_RESOLVABLE_GRADIENT);
        if resolvable {
            return Ok(CheckInstance { net, image, bag, margin: found, attempts: attempt });
        }
    }
    Err(Error::Invalid(format!(
        "no instance with kink margin > {margin} and resolvable gradients in {max_attempts} attempts"
    )))
}

/// Finite-difference check of `kind` over every network parameter.
///
/// Perturbing a parameter leaves every earlier stage unchanged, so each
/// evaluation resumes from the cached input of the perturbed parameter's stage.
pub fn check_network(inst: &CheckInstance, kind: LossKind, step: f64, tolerance: f64) -> Result<GradCheckReport> {
    let net = &inst.net;
    let params = net.param_tensors();
    let mut graph = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| graph.leaf(p.clone())).collect();
    let loss = record(net, &mut graph, &inst.image, &vars, &inst.bag, kind)?;
    let grads = graph.backward_scalar(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();

    let mut inputs = Vec::with_capacity(net.num_stages());
    let mut g = Graph::new();
    let image = g.leaf(inst.image.clone());
    let mut x = net.center(&mut g, image)?;
    for stage in 0..net.num_stages() {
        inputs.push(g.value(x).clone());
        let k = g.leaf(params[2 * stage].clone());
        let b = g.leaf(params[2 * stage + 1].clone());
        x = net.stage(&mut g, x, stage, k, b)?;
    }
    let eval = |pi: usize, ps: &[Tensor]| -> Result<f64> {
        let first = pi / 2;
        let mut g = Graph::new();
        let mut x = g.leaf(inputs[first].clone());
        for stage in first..net.num_stages() {
            let k = g.leaf(ps[2 * stage].clone());
            let b = g.leaf(ps[2 * stage + 1].clone());
            x = net.stage(&mut g, x, stage, k, b)?;
        }
        let out = match kind {
            LossKind::Mil => mil_loss_from_scores(&mut g, x, &inst.bag)?.loss,
            LossKind::ImageLabel => image_label_loss(&mut g, x, &inst.bag)?,
        };
        Ok(g.value(out).sum())
    };
    compare_with(eval, &params, &analytic, step, tolerance)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dot(g: &mut Graph, p: &[Var]) -> Result<Var> {
        let m = g.mul(p[0], p[1])?;
        Ok(g.sum(m))
    }

    #[test]
    fn linear_function_agrees_exactly() {
        let w = Tensor::new(&[4], vec![0.5, -1.25, 2.0, 0.75]).unwrap();
        let x = Tensor::new(&[4], vec![1.5, 0.25, -0.5, 3.0]).unwrap();
        // Dyadic values and a power-of-two step keep every operation exact.
        let report = finite_diff_check(dot, &[w, x], 2f64.powi(-20), 1e-10).unwrap();
        assert!(report.pass, "{report:?}");
        assert!(report.overall_max() < 1e-10);
    }

    #[test]
    fn corrupted_gradient_is_caught_and_located() {
        let w = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut analytic = vec![x.clone(), w.clone()];
        analytic[1].data_mut()[2] += 0.1;
        let report =
            compare_with_finite_differences(dot, &[w, x], &analytic, 1e-6, 1e-5).unwrap();
        assert!(!report.pass);
        assert_eq!(
            report.worst,
            Some(ParamIndex {
                param: 1,
                element: 2
            })
        );
    }

    #[test]
    fn non_finite_value_fails_with_index() {
        // ln(max(x, 0)) is -inf once the step pushes the second entry below 0.
        let build = |g: &mut Graph, p: &[Var]| -> Result<Var> {
            let l = g.ln_floor(p[0], 0.0);
            Ok(g.sum(l))
        };
        let x = Tensor::new(&[2], vec![1.0, 1e-7]).unwrap();
        let report = finite_diff_check(build, &[x], 1e-6, 1e-5).unwrap();
        assert!(!report.pass);
        assert_eq!(
            report.non_finite,
            Some(ParamIndex {
                param: 0,
                element: 1
            })
        );
    }

    #[test]
    fn staged_network_check_matches_full_recompute() {
        let inst = sample_instance(1, 4, 1e-3, 500).unwrap();
        let build = |g: &mut Graph, p: &[Var]| {
            record(&inst.net, g, &inst.image, p, &inst.bag, LossKind::ImageLabel)
        };
        let full = finite_diff_check(build, &inst.net.param_tensors(), 1e-4, 1e-5).unwrap();
        let staged = check_network(&inst, LossKind::ImageLabel, 1e-4, 1e-5).unwrap();
        assert_eq!(full.max_rel_error, staged.max_rel_error);
        assert_eq!(full.worst, staged.worst);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }
}
