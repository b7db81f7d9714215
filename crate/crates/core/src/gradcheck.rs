//! Central finite differences and the gradient/invariant suite behind the
//! `gradcheck` command and the acceptance tests.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::datagen::View;
use crate::losses::{self, LossOutput, NegativeSet};
use crate::model::{EncoderStack, ModelSpec};
use crate::numerics::{axpy, dot, RealMatrix};
use crate::seed::{rng_from_seed, Rng};

/// Numerical gradient of `f` at `x` by central differences with step `eps`.
pub fn central_difference(x: &RealMatrix, eps: f64, f: impl Fn(&RealMatrix) -> f64) -> RealMatrix {
    let mut probe = x.clone();
    let mut out = RealMatrix::zeros(x.rows(), x.cols());
    for k in 0..x.as_slice().len() {
        let orig = probe.as_slice()[k];
        probe.as_mut_slice()[k] = orig + eps;
        let up = f(&probe);
        probe.as_mut_slice()[k] = orig - eps;
        let down = f(&probe);
        probe.as_mut_slice()[k] = orig;
        out.as_mut_slice()[k] = (up - down) / (2.0 * eps);
    }
    out
}

/// Same as [`central_difference`] over a flat parameter vector.
pub fn central_difference_flat(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            let orig = probe[k];
            probe[k] = orig + eps;
            let up = f(&probe);
            probe[k] = orig - eps;
            let down = f(&probe);
            probe[k] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Largest entrywise deviation, relative to the larger of the two gradients'
/// max-magnitude entries. Zero when both gradients vanish.
pub fn max_relative_error_flat(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, x| m.max(x.abs()));
    let worst = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    if scale < 1e-300 {
        0.0
    } else {
        worst / scale
    }
}

pub fn max_relative_error(analytic: &RealMatrix, numeric: &RealMatrix) -> f64 {
    max_relative_error_flat(analytic.as_slice(), numeric.as_slice())
}

pub const FD_EPS: f64 = 1e-5;
pub const LOSS_GRAD_TOL: f64 = 1e-5;
pub const MODEL_GRAD_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn random_unit_rows(rng: &mut Rng, n: usize, d: usize) -> RealMatrix {
    let mut m = RealMatrix::from_fn(n, d, |_, _| rng.sample(StandardNormal));
    for r in 0..n {
        let row = m.row_mut(r);
        let norm = dot(row, row).sqrt();
        row.iter_mut().for_each(|x| *x /= norm);
    }
    m
}

fn check_inputs<F>(inputs: &[RealMatrix], analytic: &LossOutput, f: F) -> f64
where
    F: Fn(&[RealMatrix]) -> f64,
{
    let mut worst = 0.0f64;
    for k in 0..inputs.len() {
        let numeric = central_difference(&inputs[k], FD_EPS, |m| {
            let mut probe = inputs.to_vec();
            probe[k] = m.clone();
            f(&probe)
        });
        worst = worst.max(max_relative_error(&analytic.grads[k], &numeric));
    }
    worst
}

/// Triplet instances whose hinge slack and hardest-negative gap both exceed
/// `1e-3`, so finite differences never straddle a kink.
fn triplet_instance(rng: &mut Rng, n: usize, d: usize, margin: f64) -> (RealMatrix, RealMatrix) {
    let sq = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum() };
    loop {
        let zf = random_unit_rows(rng, n, d);
        let zt = random_unit_rows(rng, n, d);
        let ok = (0..n).all(|i| {
            let pos = sq(zf.row(i), zt.row(i));
            let mut negs: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| sq(zf.row(i), zt.row(j))).collect();
            negs.sort_by(f64::total_cmp);
            let slack = pos - negs[0] + margin;
            let gap = if negs.len() > 1 { negs[1] - negs[0] } else { f64::INFINITY };
            slack.abs() > 1e-3 && gap > 1e-3
        });
        if ok {
            return (zf, zt);
        }
    }
}

/// Analytic-vs-numerical gradient checks for every loss over `instances`
/// random inputs each.
pub fn loss_gradient_suite(instances: usize, seed: u64) -> Vec<CheckResult> {
    let mut rng = rng_from_seed(seed);
    type Case = (&'static str, Box<dyn Fn(&mut Rng) -> f64>);
    let dims = |rng: &mut Rng| (rng.random_range(2..8usize), rng.random_range(2..7usize), rng.random_range(0.05..1.0f64));
    let cases: Vec<Case> = vec![
        ("info_nce_direction", Box::new(move |rng: &mut Rng| {
            let (n, d, tau) = dims(rng);
            let z = [random_unit_rows(rng, n, d), random_unit_rows(rng, n, d)];
            let out = losses::info_nce_direction(&z[0], &z[1], tau).unwrap();
            check_inputs(&z, &out, |m| losses::info_nce_direction(&m[0], &m[1], tau).unwrap().value)
        })),
        ("info_nce_symmetric", Box::new(move |rng: &mut Rng| {
            let (n, d, tau) = dims(rng);
            let z = [random_unit_rows(rng, n, d), random_unit_rows(rng, n, d)];
            let out = losses::info_nce_symmetric(&z[0], &z[1], tau).unwrap();
            check_inputs(&z, &out, |m| losses::info_nce_symmetric(&m[0], &m[1], tau).unwrap().value)
        })),
        ("dcl_direction", Box::new(move |rng: &mut Rng| {
            let (n, d, tau) = dims(rng);
            let z = [random_unit_rows(rng, n, d), random_unit_rows(rng, n, d)];
            let out = losses::dcl_direction(&z[0], &z[1], tau).unwrap();
            check_inputs(&z, &out, |m| losses::dcl_direction(&m[0], &m[1], tau).unwrap().value)
        })),
        ("alignment_loss_unweighted", Box::new(move |rng: &mut Rng| {
            let (n, d, tau) = dims(rng);
            let z = [random_unit_rows(rng, n, d), random_unit_rows(rng, n, d)];
            let out = losses::alignment_loss_unweighted(&z[0], &z[1], tau).unwrap();
            check_inputs(&z, &out, |m| losses::alignment_loss_unweighted(&m[0], &m[1], tau).unwrap().value)
        })),
        ("weighted_alignment_loss", Box::new(move |rng: &mut Rng| {
            let (n, d, tau) = dims(rng);
            let sigma = rng.random_range(0.1..2.0);
            let td = rng.random_range(2..6);
            let z = [random_unit_rows(rng, n, d), random_unit_rows(rng, n, d)];
            let (df, dt) = (random_unit_rows(rng, n, td), random_unit_rows(rng, n, td));
            let out = losses::weighted_alignment_loss(&z[0], &z[1], &df, &dt, tau, sigma).unwrap();
            check_inputs(&z, &out, |m| {
                losses::weighted_alignment_loss(&m[0], &m[1], &df, &dt, tau, sigma).unwrap().value
            })
        })),
        ("multimodal_loss", Box::new(move |rng: &mut Rng| {
            let (n, d, tau) = dims(rng);
            let z = [random_unit_rows(rng, n, d), random_unit_rows(rng, n, d)];
            let (df, dt) = (random_unit_rows(rng, n, d), random_unit_rows(rng, n, d));
            let out = losses::multimodal_loss(&z[0], &df, &z[1], &dt, tau).unwrap();
            check_inputs(&z, &out, |m| losses::multimodal_loss(&m[0], &df, &m[1], &dt, tau).unwrap().value)
        })),
        ("cross_entropy", Box::new(move |rng: &mut Rng| {
            let n = rng.random_range(1..8);
            let c = rng.random_range(2..10);
            let logits = [RealMatrix::from_fn(n, c, |_, _| 3.0 * rng.sample::<f64, _>(StandardNormal))];
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let out = losses::cross_entropy(&logits[0], &labels).unwrap();
            check_inputs(&logits, &out, |m| losses::cross_entropy(&m[0], &labels).unwrap().value)
        })),
        ("triplet_loss", Box::new(move |rng: &mut Rng| {
            let (n, d, _) = dims(rng);
            let margin = rng.random_range(0.0..1.0);
            let (zf, zt) = triplet_instance(rng, n, d, margin);
            let z = [zf, zt];
            let out = losses::triplet_loss(&z[0], &z[1], margin).unwrap();
            check_inputs(&z, &out, |m| losses::triplet_loss(&m[0], &m[1], margin).unwrap().value)
        })),
    ];
    cases
        .into_iter()
        .map(|(name, case)| {
            let max = (0..instances).map(|_| case(&mut rng)).fold(0.0f64, f64::max);
            CheckResult {
                name: name.to_string(),
                instances,
                max_rel_error: max,
                tolerance: LOSS_GRAD_TOL,
                passed: max <= LOSS_GRAD_TOL,
            }
        })
        .collect()
}

/// Composite objective on two small stacks: task cross-entropy on both
/// views, weighted alignment and video-text alignment. Returns the value and,
/// when `grads` is set, the parameter gradients of both stacks flattened in
/// [`EncoderStack::tensors`] order.
fn composite(
    stacks: [&EncoderStack; 2],
    clips: [&[RealMatrix]; 2],
    labels: [&[usize]; 2],
    text: [&RealMatrix; 2],
    weights: &[f64],
    tau: f64,
    grads: bool,
) -> (f64, Vec<f64>) {
    let n = clips[0].len();
    let mut value = 0.0;
    let mut enc = Vec::new();
    let mut z = Vec::new();
    let mut ce = Vec::new();
    for v in 0..2 {
        let e: Vec<_> = clips[v].iter().map(|c| stacks[v].encode(c).unwrap()).collect();
        let logits = RealMatrix::from_rows(
            &e.iter().map(|x| stacks[v].classify(&x.hidden).unwrap()).collect::<Vec<_>>(),
        )
        .unwrap();
        let out = losses::cross_entropy(&logits, labels[v]).unwrap();
        value += out.value;
        z.push(RealMatrix::from_rows(&e.iter().map(|x| x.z.clone()).collect::<Vec<_>>()).unwrap());
        ce.push(out);
        enc.push(e);
    }
    let all: Vec<usize> = (0..n).collect();
    let aw = losses::alignment_loss(&z[0], &z[1], &all, Some(weights), NegativeSet::SelectedSubset, tau).unwrap();
    let m = losses::multimodal_loss(&z[0], text[0], &z[1], text[1], tau).unwrap();
    value += aw.value + m.value;
    if !grads {
        return (value, Vec::new());
    }
    let mut flat = Vec::new();
    for v in 0..2 {
        let mut gz = aw.grads[v].clone();
        axpy(1.0, m.grads[v].as_slice(), gz.as_mut_slice());
        let mut g = stacks[v].zero_grads();
        for (i, e) in enc[v].iter().enumerate() {
            stacks[v].backward(&e.cache, gz.row(i), ce[v].grads[0].row(i), &mut g).unwrap();
        }
        flat.extend(g.tensors().flatten().copied());
    }
    (value, flat)
}

fn stack_from_flat(template: &EncoderStack, flat: &[f64]) -> EncoderStack {
    let mut s = template.clone();
    let mut k = 0;
    for t in s.tensors_mut() {
        t.copy_from_slice(&flat[k..k + t.len()]);
        k += t.len();
    }
    s
}

/// Parameter gradients of two encoder stacks under the composite objective
/// against central differences, over `instances` random small models.
pub fn model_gradient_suite(instances: usize, seed: u64) -> Vec<CheckResult> {
    let mut rng = rng_from_seed(seed ^ 0x5eed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (feat, proj, classes) = (rng.random_range(2..5), rng.random_range(2..4), rng.random_range(2..5));
        let spec = ModelSpec {
            hidden_dim: rng.random_range(2..5),
        };
        let n = rng.random_range(2..5);
        let frames = rng.random_range(1..3);
        let tau = rng.random_range(0.2..1.0);
        let stacks = [
            EncoderStack::init(View::Fpv, &spec, feat, proj, classes, rng.random()),
            EncoderStack::init(View::Tpv, &spec, feat, proj, classes, rng.random()),
        ];
        let clips: Vec<Vec<RealMatrix>> = (0..2)
            .map(|_| {
                (0..n)
                    .map(|_| RealMatrix::from_fn(frames, feat, |_, _| rng.sample(StandardNormal)))
                    .collect()
            })
            .collect();
        let labels: Vec<Vec<usize>> = (0..2).map(|_| (0..n).map(|_| rng.random_range(0..classes)).collect()).collect();
        let text = [random_unit_rows(&mut rng, n, proj), random_unit_rows(&mut rng, n, proj)];
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();

        let eval = |flat: &[f64], grads: bool| {
            let split = stacks[0].tensors().map(<[f64]>::len).sum::<usize>();
            let a = stack_from_flat(&stacks[0], &flat[..split]);
            let b = stack_from_flat(&stacks[1], &flat[split..]);
            composite(
                [&a, &b],
                [&clips[0], &clips[1]],
                [&labels[0], &labels[1]],
                [&text[0], &text[1]],
                &weights,
                tau,
                grads,
            )
        };
        let x: Vec<f64> = stacks.iter().flat_map(|s| s.tensors().flatten().copied().collect::<Vec<_>>()).collect();
        let analytic = eval(&x, true).1;
        let numeric = central_difference_flat(&x, FD_EPS, |p| eval(p, false).0);
        worst = worst.max(max_relative_error_flat(&analytic, &numeric));
    }
    vec![CheckResult {
        name: "model_parameters".to_string(),
        instances,
        max_rel_error: worst,
        tolerance: MODEL_GRAD_TOL,
        passed: worst <= MODEL_GRAD_TOL,
    }]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_of_quadratic() {
        let x = RealMatrix::from_rows(&[[1.0, -2.0]]).unwrap();
        let g = central_difference(&x, 1e-5, |m| m.as_slice().iter().map(|v| v * v).sum());
        assert!((g.get(0, 0) - 2.0).abs() < 1e-9);
        assert!((g.get(0, 1) + 4.0).abs() < 1e-9);
    }

    #[test]
    fn relative_error_scale() {
        assert_eq!(max_relative_error_flat(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((max_relative_error_flat(&[1.0, 2.0], &[1.0, 2.2]) - 0.2 / 2.2).abs() < 1e-12);
    }

    #[test]
    fn small_suite_passes() {
        for r in loss_gradient_suite(5, 1) {
            assert!(r.passed, "{} max rel error {}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn small_model_suite_passes() {
        let r = &model_gradient_suite(3, 2)[0];
        assert!(r.passed, "max rel error {}", r.max_rel_error);
    }
}
