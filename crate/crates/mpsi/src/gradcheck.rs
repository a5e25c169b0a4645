//! Finite-difference verification of the reverse-mode gradients.
//!
//! Every check builds a scalar loss (a fixed random weighting of the op's
//! output), takes the analytic gradient with one backward pass, and
//! compares selected coordinates against central differences. The
//! relative error uses a floor so near-zero gradients do not inflate it:
//!
//! ```text
//! rel = |analytic - numeric| / max(|analytic|, |numeric|, 1e-2)
//! ```
//!
//! All checks run in `f64`; `h = 1e-5` balances truncation against
//! cancellation there.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{Cmb, FeatureSeq, Mcrm, SambMixKind, Samg, SamgSpec, Stb, WindowSpec};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Mpsi};
use crate::param::{zero_grads, ParamVisit};
use crate::ssm::{selective_scan, Ddbm, MambaBlock, SsmConfig, SsmParams};
use crate::tensor::nn;
use crate::tensor::Tensor;
use crate::train::l1_loss;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Pass threshold for primitive tensor ops.
pub const OPS_TOL: f64 = 1e-4;
/// Pass threshold for composite blocks and the full model (longer chains
/// accumulate more roundoff).
pub const BLOCKS_TOL: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}

/// One verified coordinate.
#[derive(Debug, Clone)]
pub struct CoordCheck {
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

fn pick_coords(rng: &mut ChaCha8Rng, numel: usize, want: usize) -> Vec<usize> {
    if numel <= want {
        (0..numel).collect()
    } else {
        // Sample without replacement.
        let mut all: Vec<usize> = (0..numel).collect();
        for i in 0..want {
            let j = rng.gen_range(i..numel);
            all.swap(i, j);
        }
        all.truncate(want);
        all
    }
}

/// Verify d(loss)/d(input) for `f` at `coords` of the input.
pub fn check_input(
    f: &dyn Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
    x0: &[f64],
    shape: &[usize],
    coords: &[usize],
) -> Result<Vec<CoordCheck>> {
    let x = Tensor::from_vec(x0.to_vec(), shape)?.requiring_grad();
    let loss = f(&x)?;
    if loss.numel() != 1 {
        return Err(Error::contract("gradcheck", "loss must be scalar"));
    }
    loss.backward()?;
    let g = x
        .grad()
        .ok_or_else(|| Error::contract("gradcheck", "input received no gradient"))?;
    let mut out = Vec::with_capacity(coords.len());
    for &c in coords {
        let eval = |delta: f64| -> Result<f64> {
            let mut d = x0.to_vec();
            d[c] += delta;
            Ok(f(&Tensor::from_vec(d, shape)?)?.item())
        };
        let numeric = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
        let analytic = g[c];
        out.push(CoordCheck {
            coord: c,
            analytic,
            numeric,
            rel_err: rel_err(analytic, numeric),
        });
    }
    Ok(out)
}

fn param_data<M: ParamVisit<f64>>(model: &M) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    model.visit_params(&mut |p| out.push((p.name().to_string(), p.tensor().data().to_vec())));
    out
}

fn set_param<M: ParamVisit<f64>>(model: &mut M, name: &str, data: Vec<f64>) {
    let mut data = Some(data);
    model.visit_params_mut(&mut |p| {
        if p.name() == name {
            p.set_data(data.take().expect("parameter visited once"))
                .expect("same length");
        }
    });
}

/// Verify d(loss)/d(theta) for every parameter of `model`, probing
/// `coords_per_param` coordinates of each.
pub fn check_params<M: ParamVisit<f64>>(
    model: &mut M,
    loss_fn: &dyn Fn(&M) -> Result<Tensor<f64>>,
    coords_per_param: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(String, Vec<CoordCheck>)>> {
    zero_grads(model);
    let loss = loss_fn(model)?;
    if loss.numel() != 1 {
        return Err(Error::contract("gradcheck", "loss must be scalar"));
    }
    loss.backward()?;
    let mut grads = Vec::new();
    model.visit_params(&mut |p| {
        grads.push((
            p.name().to_string(),
            p.grad().unwrap_or_else(|| vec![0.0; p.numel()]),
        ))
    });
    let originals = param_data(model);

    let mut report = Vec::new();
    for ((name, grad), (_, original)) in grads.into_iter().zip(originals) {
        let coords = pick_coords(rng, original.len(), coords_per_param);
        let mut checks = Vec::with_capacity(coords.len());
        for &c in &coords {
            let mut eval = |delta: f64| -> Result<f64> {
                let mut d = original.clone();
                d[c] += delta;
                set_param(model, &name, d);
                Ok(loss_fn(model)?.item())
            };
            let plus = eval(FD_STEP)?;
            let minus = eval(-FD_STEP)?;
            set_param(model, &name, original.clone());
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let analytic = grad[c];
            checks.push(CoordCheck {
                coord: c,
                analytic,
                numeric,
                rel_err: rel_err(analytic, numeric),
            });
        }
        report.push((name, checks));
    }
    Ok(report)
}

fn summarize(name: &str, checks: &[CoordCheck], tolerance: f64) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        max_rel_err: checks.iter().map(|c| c.rel_err).fold(0.0, f64::max),
        coords_checked: checks.len(),
        tolerance,
    }
}

fn summarize_params(
    name: &str,
    report: &[(String, Vec<CoordCheck>)],
    tolerance: f64,
) -> CheckResult {
    let mut max = 0.0_f64;
    let mut n = 0;
    for (_, checks) in report {
        for c in checks {
            max = max.max(c.rel_err);
            n += 1;
        }
    }
    CheckResult {
        name: name.to_string(),
        max_rel_err: max,
        coords_checked: n,
        tolerance,
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn weight_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(rand_vec(rng, n, -1.0, 1.0), shape).expect("shape matches")
}

/// Weighted-sum scalarization: `sum(y * w)`.
fn scalarize(y: &Tensor<f64>, w: &Tensor<f64>) -> Result<Tensor<f64>> {
    Ok(y.mul(w)?.sum_all())
}

/// A boxed tensor-to-tensor map, as fed to [`check_input`].
type TensorFn = Box<dyn Fn(&Tensor<f64>) -> Result<Tensor<f64>>>;

/// Gradient checks for the primitive tensor ops (tolerance: [`OPS_TOL`]).
pub fn ops_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    let mut run = |name: &str, shape: &[usize], rng: &mut ChaCha8Rng, f: TensorFn| -> Result<()> {
        let x0 = rand_vec(rng, shape.iter().product(), -1.5, 1.5);
        let coords = pick_coords(rng, x0.len(), 12);
        let checks = check_input(f.as_ref(), &x0, shape, &coords)?;
        results.push(summarize(name, &checks, OPS_TOL));
        Ok(())
    };

    {
        let w = weight_tensor(&mut rng, &[2, 3, 4]);
        let other = weight_tensor(&mut rng, &[3, 1]); // broadcasts
        let (w2, o2) = (w.clone(), other.clone());
        run(
            "add_broadcast",
            &[2, 3, 4],
            &mut rng,
            Box::new(move |x| scalarize(&x.add(&o2)?, &w2)),
        )?;
        let (w3, o3) = (w, other);
        run(
            "mul_broadcast",
            &[2, 3, 4],
            &mut rng,
            Box::new(move |x| scalarize(&x.mul(&o3)?, &w3)),
        )?;
    }
    {
        let b = weight_tensor(&mut rng, &[2, 4, 3]);
        let w = weight_tensor(&mut rng, &[2, 2, 3]);
        run(
            "matmul_lhs",
            &[2, 2, 4],
            &mut rng,
            Box::new(move |x| scalarize(&x.matmul(&b)?, &w)),
        )?;
        let a = weight_tensor(&mut rng, &[2, 2, 4]);
        let w = weight_tensor(&mut rng, &[2, 2, 3]);
        run(
            "matmul_rhs",
            &[2, 4, 3],
            &mut rng,
            Box::new(move |x| scalarize(&a.matmul(x)?, &w)),
        )?;
    }
    {
        let wt = weight_tensor(&mut rng, &[5, 3]);
        let bias = weight_tensor(&mut rng, &[5]);
        let w = weight_tensor(&mut rng, &[2, 4, 5]);
        run(
            "linear_input",
            &[2, 4, 3],
            &mut rng,
            Box::new(move |x| scalarize(&nn::linear(x, &wt, Some(&bias))?, &w)),
        )?;
        let x = weight_tensor(&mut rng, &[2, 4, 3]);
        let bias = weight_tensor(&mut rng, &[5]);
        let w = weight_tensor(&mut rng, &[2, 4, 5]);
        run(
            "linear_weight",
            &[5, 3],
            &mut rng,
            Box::new(move |wt| scalarize(&nn::linear(&x, wt, Some(&bias))?, &w)),
        )?;
    }
    {
        let gamma = weight_tensor(&mut rng, &[6]);
        let beta = weight_tensor(&mut rng, &[6]);
        let w = weight_tensor(&mut rng, &[2, 3, 6]);
        run(
            "layer_norm_input",
            &[2, 3, 6],
            &mut rng,
            Box::new(move |x| scalarize(&nn::layer_norm(x, &gamma, &beta, 1e-6)?, &w)),
        )?;
        let x = weight_tensor(&mut rng, &[2, 3, 6]);
        let beta = weight_tensor(&mut rng, &[6]);
        let w = weight_tensor(&mut rng, &[2, 3, 6]);
        run(
            "layer_norm_gamma",
            &[6],
            &mut rng,
            Box::new(move |g| scalarize(&nn::layer_norm(&x, g, &beta, 1e-6)?, &w)),
        )?;
    }
    {
        // Grouped conv with asymmetric padding exercises every index path.
        let k = weight_tensor(&mut rng, &[4, 2, 2, 3]);
        let bias = weight_tensor(&mut rng, &[4]);
        let w = weight_tensor(&mut rng, &[1, 4, 4, 5]);
        run(
            "conv2d_input",
            &[1, 4, 3, 4],
            &mut rng,
            Box::new(move |x| scalarize(&nn::conv2d(x, &k, Some(&bias), (1, 1, 2, 1), 2)?, &w)),
        )?;
        let x = weight_tensor(&mut rng, &[1, 4, 3, 4]);
        let bias = weight_tensor(&mut rng, &[4]);
        let w = weight_tensor(&mut rng, &[1, 4, 4, 5]);
        run(
            "conv2d_kernel",
            &[4, 2, 2, 3],
            &mut rng,
            Box::new(move |k| scalarize(&nn::conv2d(&x, k, Some(&bias), (1, 1, 2, 1), 2)?, &w)),
        )?;
    }
    for (name, f) in [
        ("silu", Box::new(|x: &Tensor<f64>| Ok(x.silu())) as TensorFn),
        ("gelu", Box::new(|x: &Tensor<f64>| Ok(x.gelu()))),
        ("sigmoid", Box::new(|x: &Tensor<f64>| Ok(x.sigmoid()))),
        ("softplus", Box::new(|x: &Tensor<f64>| Ok(x.softplus()))),
        ("softmax_last", Box::new(|x: &Tensor<f64>| x.softmax_last())),
    ] {
        let w = weight_tensor(&mut rng, &[3, 7]);
        run(
            name,
            &[3, 7],
            &mut rng,
            Box::new(move |x| scalarize(&f(x)?, &w)),
        )?;
    }
    {
        // Movement chain: reshape -> permute -> narrow -> reverse -> concat.
        let w = weight_tensor(&mut rng, &[4, 2, 2]);
        run(
            "movement_chain",
            &[2, 3, 4],
            &mut rng,
            Box::new(move |x| {
                let y = x.reshape(&[6, 4])?.permute(&[1, 0])?; // [4, 6]
                let a = y.narrow(1, 0, 2)?;
                let b = y.narrow(1, 3, 2)?.reverse(1)?;
                let cat = Tensor::concat(&[a, b], 1)?.reshape(&[4, 2, 2])?;
                scalarize(&cat, &w)
            }),
        )?;
    }
    {
        let w = weight_tensor(&mut rng, &[1, 5, 6, 2]);
        run(
            "reflect_pad",
            &[1, 3, 4, 2],
            &mut rng,
            Box::new(move |x| scalarize(&nn::reflect_pad_bhwc(x, 2, 2)?, &w)),
        )?;
        let w = weight_tensor(&mut rng, &[1, 2, 4, 6]);
        run(
            "pixel_shuffle",
            &[1, 8, 2, 3],
            &mut rng,
            Box::new(move |x| scalarize(&nn::pixel_shuffle(x, 2)?, &w)),
        )?;
        let w = weight_tensor(&mut rng, &[2, 3, 1]);
        run(
            "adaptive_avg_pool",
            &[2, 3, 4, 5],
            &mut rng,
            Box::new(move |x| scalarize(&nn::adaptive_avg_pool_to_1(x)?, &w)),
        )?;
    }
    {
        // Selective scan: gradient w.r.t. the input sequence.
        let pb = crate::param::ParamBuilder::new(seed ^ 0x5eed);
        let params: SsmParams<f64> = SsmParams::new(&pb.scope("ssm"), 3, 2);
        let w = weight_tensor(&mut rng, &[2, 5, 3]);
        run(
            "selective_scan_input",
            &[2, 5, 3],
            &mut rng,
            Box::new(move |x| scalarize(&selective_scan(x, &params)?, &w)),
        )?;
    }
    {
        // abs away from the kink (inputs in +-[0.5, 1.5]).
        let w = weight_tensor(&mut rng, &[10]);
        let signs: Vec<f64> = (0..10)
            .map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
            .collect();
        let x0: Vec<f64> = signs.iter().map(|s| s * rng.gen_range(0.5..1.5)).collect();
        let coords: Vec<usize> = (0..10).collect();
        let checks = check_input(&move |x| scalarize(&x.abs_t(), &w), &x0, &[10], &coords)?;
        results.push(summarize("abs_away_from_zero", &checks, OPS_TOL));
    }
    Ok(results)
}

/// Parameter-gradient checks for the composite blocks
/// (tolerance: [`BLOCKS_TOL`]).
pub fn blocks_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    let ssm = SsmConfig {
        state_dim: 2,
        conv_width: 2,
        expansion: 2,
    };
    let window = WindowSpec {
        win_h: 2,
        win_w: 2,
        heads: 2,
    };
    let c = 4;
    let (h, w) = (3, 4); // not window multiples: exercises the padding path
    let x = Tensor::from_vec(rand_vec(&mut rng, h * w * c, -1.0, 1.0), &[1, h * w, c])?;
    let wt = weight_tensor(&mut rng, &[1, h * w, c]);

    {
        let pb = crate::param::ParamBuilder::new(seed);
        let mut stb: Stb<f64> = Stb::new(&pb.scope("stb"), c, window, 2)?;
        let (x, wt) = (x.clone(), wt.clone());
        let report = check_params(
            &mut stb,
            &move |m: &Stb<f64>| {
                let seq = FeatureSeq::new(x.clone(), h, w)?;
                scalarize(&m.forward(&seq)?.values, &wt)
            },
            3,
            &mut rng,
        )?;
        results.push(summarize_params("stb", &report, BLOCKS_TOL));
    }
    {
        let pb = crate::param::ParamBuilder::new(seed + 1);
        let mut cmb: Cmb<f64> = Cmb::new(&pb.scope("cmb"), c, ssm, 2, None)?;
        let (x, wt) = (x.clone(), wt.clone());
        let report = check_params(
            &mut cmb,
            &move |m: &Cmb<f64>| {
                let seq = FeatureSeq::new(x.clone(), h, w)?;
                scalarize(&m.forward(&seq)?.values, &wt)
            },
            3,
            &mut rng,
        )?;
        results.push(summarize_params("cmb_ddbm", &report, BLOCKS_TOL));
    }
    {
        let pb = crate::param::ParamBuilder::new(seed + 2);
        let mut cmb: Cmb<f64> = Cmb::new(&pb.scope("cmb"), c, ssm, 2, Some(2))?;
        let (x, wt) = (x.clone(), wt.clone());
        let report = check_params(
            &mut cmb,
            &move |m: &Cmb<f64>| {
                let seq = FeatureSeq::new(x.clone(), h, w)?;
                scalarize(&m.forward(&seq)?.values, &wt)
            },
            3,
            &mut rng,
        )?;
        results.push(summarize_params(
            "cmb_channel_attention",
            &report,
            BLOCKS_TOL,
        ));
    }
    {
        let pb = crate::param::ParamBuilder::new(seed + 3);
        let mut mamba: MambaBlock<f64> = MambaBlock::new(&pb.scope("mamba"), c, ssm);
        let (x, wt) = (x.clone(), wt.clone());
        let report = check_params(
            &mut mamba,
            &move |m: &MambaBlock<f64>| scalarize(&m.forward(&x)?, &wt),
            3,
            &mut rng,
        )?;
        results.push(summarize_params("mamba_block", &report, BLOCKS_TOL));
    }
    {
        let pb = crate::param::ParamBuilder::new(seed + 4);
        let mut ddbm: Ddbm<f64> = Ddbm::new(&pb.scope("ddbm"), c, ssm);
        let (x, wt) = (x.clone(), wt.clone());
        let report = check_params(
            &mut ddbm,
            &move |m: &Ddbm<f64>| scalarize(&m.forward(&x)?, &wt),
            2,
            &mut rng,
        )?;
        results.push(summarize_params("ddbm", &report, BLOCKS_TOL));
    }
    {
        let pb = crate::param::ParamBuilder::new(seed + 5);
        let mut mcrm: Mcrm<f64> = Mcrm::new(&pb.scope("mcrm"), c, ssm, true)?;
        let taps: Vec<Tensor<f64>> = (0..3)
            .map(|_| {
                Tensor::from_vec(rand_vec(&mut rng, c * h * w, -1.0, 1.0), &[1, c, h, w])
                    .expect("shape matches")
            })
            .collect();
        let wt = weight_tensor(&mut rng, &[1, c, h, w]);
        let report = check_params(
            &mut mcrm,
            &move |m: &Mcrm<f64>| scalarize(&m.forward(&taps)?, &wt),
            3,
            &mut rng,
        )?;
        results.push(summarize_params("mcrm", &report, BLOCKS_TOL));
    }
    {
        let pb = crate::param::ParamBuilder::new(seed + 6);
        let spec = SamgSpec {
            channels: c,
            blocks: 1,
            window,
            sgfn_expansion: 2,
            cmb_ssm: ssm,
            mcrm_ssm: ssm,
            mix_kind: SambMixKind::Cmb,
            mcrm_recursive: Some(true),
        };
        let mut samg: Samg<f64> = Samg::new(&pb.scope("samg"), spec)?;
        let (x, wt) = (x.clone(), wt.clone());
        let report = check_params(
            &mut samg,
            &move |m: &Samg<f64>| {
                let seq = FeatureSeq::new(x.clone(), h, w)?;
                scalarize(&m.forward(&seq)?.values, &wt)
            },
            2,
            &mut rng,
        )?;
        results.push(summarize_params("samg", &report, BLOCKS_TOL));
    }
    Ok(results)
}

/// End-to-end check: the L1 training loss of a miniature model against a
/// fixed target, probed at a couple of coordinates of every parameter.
pub fn model_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        channels: 4,
        groups: 1,
        blocks_per_group: 1,
        heads: 2,
        window_h: 2,
        window_w: 2,
        sgfn_expansion: 2,
        cmb_state_dim: 2,
        cmb_conv_width: 2,
        cmb_expansion: 2,
        mcrm_state_dim: 2,
        mcrm_conv_width: 2,
        mcrm_expansion: 2,
        scale: 2,
        ..ModelConfig::default()
    };
    let mut model: Mpsi<f64> = Mpsi::new(&cfg, seed)?;
    let x = Tensor::from_vec(rand_vec(&mut rng, 3 * 4 * 4, 0.0, 1.0), &[1, 3, 4, 4])?;
    let target = Tensor::from_vec(rand_vec(&mut rng, 3 * 8 * 8, 0.0, 1.0), &[1, 3, 8, 8])?;
    let report = check_params(
        &mut model,
        &move |m: &Mpsi<f64>| l1_loss(&m.forward(&x)?, &target),
        2,
        &mut rng,
    )?;
    Ok(vec![summarize_params("mpsi_l1", &report, BLOCKS_TOL)])
}

/// The harness must reject a deliberately wrong gradient. Returns the
/// check result for an op whose VJP reports 3x when the forward computes
/// 2x; a healthy harness sees a large relative error.
pub fn negative_control() -> Result<CheckResult> {
    let x0 = vec![0.4, -0.7, 1.2];
    let coords = [0, 1, 2];
    let checks = check_input(
        &|x: &Tensor<f64>| {
            let doubled: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
            let bad = Tensor::from_op(doubled, x.shape().to_vec(), vec![x.clone()], |ctx| {
                // Deliberately wrong: claims dy/dx = 3.
                vec![Some(ctx.grad.iter().map(|g| 3.0 * g).collect())]
            });
            Ok(bad.sum_all())
        },
        &x0,
        &[3],
        &coords,
    )?;
    Ok(summarize("negative_control", &checks, OPS_TOL))
}
