//! Central finite-difference verification of analytic gradients.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{make_windows, synthesize, ScalerParams, SynthConfig};
use crate::error::{invalid, Error, Result};
use crate::gat::{Gatv2Layer, Graph};
use crate::layers::{Bound, Conv1dLayer, LayerNormLayer, LinearLayer, LstmLayer, ParamStore};
use crate::model::{FusionModel, ModelConfig, Regressor};
use crate::tape::{Primitive, Tape, Var};
use crate::tensor::Tensor;
use crate::train::mse_loss;

/// Largest relative error a gradient check may report and still pass.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Which coordinates of each input get perturbed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Coverage {
    All,
    /// At most `per_tensor` coordinates per input, drawn from `seed`.
    Sample { per_tensor: usize, seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckOptions {
    pub eps: f64,
    pub coverage: Coverage,
    /// Corrupts the backward rule of one primitive on the analytic tape.
    pub fault: Option<Primitive>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            coverage: Coverage::All,
            fault: None,
        }
    }
}

/// Largest `|analytic - numeric| / max(1, |analytic|)` over every coordinate
/// of every input, where `numeric` is the central difference
/// `(f(x + eps e) - f(x - eps e)) / 2 eps`.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    finite_diff_check_with(
        f,
        inputs,
        &CheckOptions {
            eps,
            ..CheckOptions::default()
        },
    )
}

pub fn finite_diff_check_with<F>(f: F, inputs: &[Tensor], opts: &CheckOptions) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(opts.eps > 0.0) {
        return Err(invalid("finite_diff_check", "eps must be positive"));
    }
    let mut tape = match opts.fault {
        Some(p) => Tape::with_fault(p),
        None => Tape::new(),
    };
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::NonScalarLoss(tape.shape(out).to_vec()));
    }
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("every input requires grad"))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut rng = match opts.coverage {
        Coverage::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Coverage::All => None,
    };
    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        let n = inputs[which].numel();
        let coords: Vec<usize> = match (opts.coverage, rng.as_mut()) {
            (Coverage::Sample { per_tensor, .. }, Some(rng)) if per_tensor < n => {
                let mut picked = rand::seq::index::sample(rng, n, per_tensor).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..n).collect(),
        };
        for j in coords {
            let original = inputs[which].data()[j];
            work[which].data_mut()[j] = original + opts.eps;
            let plus = eval(&work)?;
            work[which].data_mut()[j] = original - opts.eps;
            let minus = eval(&work)?;
            work[which].data_mut()[j] = original;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = grad.data()[j];
            let err = libm::fabs(a - numeric) / libm::fabs(a).max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Outcome of one named check in [`gradient_suite`].
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_err: f64,
    /// Coordinates compared.
    pub coordinates: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRADCHECK_TOLERANCE
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect())
}

/// Checks a layer with respect to its input and every parameter. The loss
/// is a fixed random projection of the output plus half its squared norm,
/// so that every output coordinate gets a distinct, non-trivial weight.
fn check_layer<L>(
    name: &'static str,
    store: &ParamStore,
    input: Tensor,
    rng: &mut ChaCha8Rng,
    opts: &CheckOptions,
    layer: L,
) -> Result<CheckResult>
where
    L: Fn(&mut Tape, &Bound, Var) -> Result<Var>,
{
    let mut probe = Tape::new();
    let params = store.bind(&mut probe, false);
    let x = probe.constant(input.clone());
    let y = layer(&mut probe, &params, x)?;
    let projection = random_tensor(rng, probe.shape(y), 1.0);

    let mut inputs = vec![input];
    inputs.extend(store.tensors().iter().cloned());
    let coordinates = count(&inputs, opts.coverage);
    let max_rel_err = finite_diff_check_with(
        |tape, vars| {
            let params = Bound::from_vars(vars[1..].to_vec());
            let y = layer(tape, &params, vars[0])?;
            let r = tape.constant(projection.clone());
            let proj = tape.mul(y, r)?;
            let sq = tape.mul(y, y)?;
            let sq = tape.scale(sq, 0.5)?;
            let total = tape.add(proj, sq)?;
            tape.sum_all(total)
        },
        &inputs,
        opts,
    )?;
    Ok(CheckResult {
        name,
        max_rel_err,
        coordinates,
    })
}

fn count(inputs: &[Tensor], coverage: Coverage) -> usize {
    inputs
        .iter()
        .map(|t| match coverage {
            Coverage::All => t.numel(),
            Coverage::Sample { per_tensor, .. } => t.numel().min(per_tensor),
        })
        .sum()
}

/// Runs the finite-difference check on every layer type and on the full
/// model's MSE loss.
///
/// Layer checks cover every coordinate of small random instances. The
/// full-model check covers every input coordinate and a seeded sample of
/// each parameter tensor. `fault` corrupts the backward rule of one
/// primitive on the analytic side, which must make the checks that use
/// that primitive fail.
pub fn gradient_suite(config: &ModelConfig, seed: u64, fault: Option<Primitive>) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all = CheckOptions {
        fault,
        ..CheckOptions::default()
    };
    let slope = config.leaky_slope;
    let mut results = Vec::new();

    let mut store = ParamStore::new();
    let linear = LinearLayer::new(&mut store, "linear", 5, 3, &mut rng);
    let x = random_tensor(&mut rng, &[2, 5], 1.0);
    results.push(check_layer("linear", &store, x, &mut rng, &all, |t, p, x| linear.forward(t, p, x))?);

    let mut store = ParamStore::new();
    let conv = Conv1dLayer::new(&mut store, "conv", 3, 4, 3, 1, &mut rng)?;
    let x = random_tensor(&mut rng, &[2, 3, 5], 1.0);
    results.push(check_layer("conv1d", &store, x, &mut rng, &all, |t, p, x| conv.forward(t, p, x))?);

    let mut store = ParamStore::new();
    let ln = LayerNormLayer::new(&mut store, "ln", 6);
    // Non-trivial gain and offset.
    let gain = random_tensor(&mut rng, &[6], 1.0);
    let offset = random_tensor(&mut rng, &[6], 1.0);
    let mut ln_store = ParamStore::new();
    let ln = LayerNormLayer::from_tensors(&mut ln_store, "ln", gain, offset, ln.epsilon)?;
    let x = random_tensor(&mut rng, &[2, 3, 6], 2.0);
    results.push(check_layer("layer_norm", &ln_store, x, &mut rng, &all, |t, p, x| ln.forward(t, p, x))?);

    let mut store = ParamStore::new();
    let lstm = LstmLayer::new(&mut store, "lstm", 3, 4, &mut rng);
    let x = random_tensor(&mut rng, &[2, 3, 3], 1.0);
    results.push(check_layer("lstm", &store, x, &mut rng, &all, |t, p, x| {
        let out = lstm.forward(t, p, x, None)?;
        // Route the loss through the sequence and both final states.
        let h = t.reshape(out.h, &[2, 1, 4])?;
        let c = t.reshape(out.c, &[2, 1, 4])?;
        t.concat(&[out.outputs, h, c], 1)
    })?);

    let mut store = ParamStore::new();
    let gat = Gatv2Layer::new(&mut store, "gat", 3, 4, 2, slope, &mut rng);
    let graph = Graph::complete(4, true)?;
    let x = random_tensor(&mut rng, &[2, 4, 3], 1.0);
    results.push(check_layer("gatv2", &store, x, &mut rng, &all, |t, p, x| {
        let (out, _) = gat.forward(t, p, x, &graph)?;
        Ok(out)
    })?);

    results.push(full_model_check(config, seed, &mut rng, fault)?);
    Ok(results)
}

fn full_model_check(
    config: &ModelConfig,
    seed: u64,
    rng: &mut ChaCha8Rng,
    fault: Option<Primitive>,
) -> Result<CheckResult> {
    let model = FusionModel::new(&ModelConfig { seed, ..config.clone() })?;
    let series = synthesize(&SynthConfig {
        len: config.window_len + 10,
        seed,
        window_len: config.window_len,
        ..SynthConfig::default()
    })?;
    let scaled = ScalerParams::fit(&series)?.apply(&series)?;
    let mut windows = make_windows(&scaled, config.window_len, 1)?;
    if windows.num_channels() != config.num_channels {
        // Synthetic corpora have a fixed channel count; other widths get
        // random readings in the scaled range instead.
        let n = windows.len();
        windows.windows = random_tensor(rng, &[n, config.window_len, config.num_channels], 0.5);
    }
    let (x, y) = windows.batch(&[0, 3, 7])?;

    let mut inputs = vec![x];
    inputs.extend(model.params().tensors().iter().cloned());
    let opts = CheckOptions {
        eps: 1e-5,
        coverage: Coverage::Sample { per_tensor: 12, seed },
        fault,
    };
    // Every window coordinate is checked; parameters are sampled.
    let input_coords = inputs[0].numel();
    let coordinates = input_coords + count(&inputs[1..], opts.coverage);
    let loss = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let params = Bound::from_vars(vars[1..].to_vec());
        let pred = model.forward(tape, &params, vars[0])?;
        let target = tape.constant(y.clone());
        mse_loss(tape, pred, target)
    };
    let input_err = finite_diff_check_with(
        |tape, vars| {
            let mut all = vec![vars[0]];
            all.extend(model.params().tensors().iter().map(|p| tape.constant(p.clone())));
            loss(tape, &all)
        },
        &inputs[..1],
        &CheckOptions {
            coverage: Coverage::All,
            ..opts
        },
    )?;
    let param_err = finite_diff_check_with(loss, &inputs, &opts)?;
    Ok(CheckResult {
        name: "stgat_fuser",
        max_rel_err: input_err.max(param_err),
        coordinates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_exact_unit_gradient() {
        let x = Tensor::new(alloc::vec![4], alloc::vec![0.3, -2.0, 5.5, 1.0]).unwrap();
        let err = finite_diff_check(|t, v| t.sum_all(v[0]), &[x], 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn leaky_relu_away_from_kink() {
        let x = Tensor::new(alloc::vec![5], alloc::vec![-1.5, -0.2, 0.1, 0.7, 3.0]).unwrap();
        let err = finite_diff_check(
            |t, v| {
                let y = t.leaky_relu(v[0], 0.2)?;
                t.sum_all(y)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn rejects_non_scalar_output_and_bad_eps() {
        let x = Tensor::ones(&[2]);
        assert!(matches!(
            finite_diff_check(|t, v| t.scale(v[0], 2.0), &[x.clone()], 1e-5),
            Err(Error::NonScalarLoss(_))
        ));
        assert!(finite_diff_check(|t, v| t.sum_all(v[0]), &[x], 0.0).is_err());
    }

    #[test]
    fn injected_fault_is_detected() {
        let x = Tensor::new(alloc::vec![3], alloc::vec![0.1, -0.4, 0.9]).unwrap();
        let f = |t: &mut Tape, v: &[Var]| {
            let y = t.tanh(v[0])?;
            t.sum_all(y)
        };
        let clean = finite_diff_check(f, &[x.clone()], 1e-5).unwrap();
        let opts = CheckOptions {
            fault: Some(Primitive::Tanh),
            ..CheckOptions::default()
        };
        let faulty = finite_diff_check_with(f, &[x], &opts).unwrap();
        assert!(clean < 1e-8);
        assert!(faulty > 1e-2);
    }
}
