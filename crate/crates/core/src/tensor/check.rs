//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tape, Tensor};

fn relative_error<S: Scalar>(analytic: S, numeric: S) -> S {
    let floor = S::from_f64_lossy(1e-8);
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Compare the analytic gradient of a scalar-valued `f` against central
/// finite differences at the given flat coordinates of `x`. Returns the
/// maximum relative error, `|analytic - fd| / max(|analytic|, |fd|, 1e-8)`.
///
/// `f` must be deterministic; the graphs passed to it never enable train
/// mode, so dropout is inactive.
pub fn finite_diff_check<S, F>(f: F, x: &Tensor<S>, coords: &[usize], h: S) -> Result<S>
where
    S: Scalar,
    F: Fn(&Graph<S>, &Tensor<S>) -> Result<Tensor<S>>,
{
    let tracked = x.detached_copy();
    tracked.set_requires_grad(true);
    let tape = Tape::new();
    let out = f(&Graph::recording(&tape), &tracked)?;
    tape.backward(&out)?;
    let analytic = tracked.grad().unwrap_or_else(|| vec![S::zero(); x.len()]);

    let eval = |probe: &Tensor<S>| -> Result<S> {
        let g = Graph::inference();
        Ok(f(&g, probe)?.item())
    };

    let mut max_err = S::zero();
    for &coord in coords {
        let plus = x.detached_copy();
        plus.update_data(|d| d[coord] += h);
        let minus = x.detached_copy();
        minus.update_data(|d| d[coord] -= h);
        let fd = (eval(&plus)? - eval(&minus)?) / (S::from_f64_lossy(2.0) * h);
        let err = relative_error(analytic[coord], fd);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}

/// Pick `count` random (parameter, coordinate) pairs whose analytic
/// gradient magnitude is at least `min_magnitude`. Central differences at
/// vanishing-gradient coordinates measure only rounding noise, so checks
/// sample among coordinates that carry signal.
pub fn sample_active_coordinates<S, F>(
    loss: F,
    params: &[(String, Tensor<S>)],
    count: usize,
    min_magnitude: f64,
    seed: u64,
) -> Result<Vec<(usize, usize)>>
where
    S: Scalar,
    F: Fn(&Graph<S>) -> Result<Tensor<S>>,
{
    use rand::seq::SliceRandom;
    for (_, p) in params {
        p.zero_grad();
    }
    let tape = Tape::new();
    let out = loss(&Graph::recording(&tape))?;
    tape.backward(&out)?;
    let mut active = Vec::new();
    for (pi, (_, p)) in params.iter().enumerate() {
        if let Some(grad) = p.grad() {
            for (coord, g) in grad.iter().enumerate() {
                if g.to_f64_lossy().abs() >= min_magnitude {
                    active.push((pi, coord));
                }
            }
        }
        p.zero_grad();
    }
    if active.len() < count {
        return Err(crate::error::Error::Config(format!(
            "only {} coordinates carry gradient magnitude >= {min_magnitude}, need {count}",
            active.len()
        )));
    }
    let mut rng = crate::rng::stream(seed, crate::rng::Domain::DataGen, 0xc0de, 0);
    active.shuffle(&mut rng);
    active.truncate(count);
    Ok(active)
}

/// Gradient check for losses that close over a set of parameters rather
/// than a single input tensor (full models). `samples` index into
/// `params` and a flat coordinate within each. Parameters are perturbed in
/// place and restored.
pub fn finite_diff_check_params<S, F>(
    loss: F,
    params: &[(String, Tensor<S>)],
    samples: &[(usize, usize)],
    h: S,
) -> Result<S>
where
    S: Scalar,
    F: Fn(&Graph<S>) -> Result<Tensor<S>>,
{
    for (_, p) in params {
        p.zero_grad();
    }
    let tape = Tape::new();
    let out = loss(&Graph::recording(&tape))?;
    tape.backward(&out)?;

    let mut max_err = S::zero();
    for &(pi, coord) in samples {
        let (_, param) = &params[pi];
        let analytic = param
            .grad()
            .map(|g| g[coord])
            .unwrap_or_else(S::zero);
        let original = param.data()[coord];

        param.update_data(|d| d[coord] = original + h);
        let plus = loss(&Graph::inference())?.item();
        param.update_data(|d| d[coord] = original - h);
        let minus = loss(&Graph::inference())?.item();
        param.update_data(|d| d[coord] = original);

        let fd = (plus - minus) / (S::from_f64_lossy(2.0) * h);
        let err = relative_error(analytic, fd);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}
