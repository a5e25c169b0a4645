//! Acceptance gate: one test per criterion, each printing a single
//! `ACCEPTANCE <n> <name>: PASS|FAIL` verdict line (visible with
//! `cargo test --test acceptance -- --nocapture`). A FAIL also fails the
//! test, so `cargo test` enforces the gate.

use std::f64::consts::TAU;
use std::path::Path;
use std::time::Instant;

use mpsi::blocks::{
    window_merge, window_partition, Cmb, FeatureSeq, Mcrm, SambMixKind, Samg, SamgSpec, Stb,
    WindowSpec,
};
use mpsi::data::{
    bicubic_resize, degrade, dihedral_apply, dihedral_inverse, load_image, save_image,
    PatchSampler, DIHEDRAL_CODES,
};
use mpsi::gradcheck::{blocks_suite, model_suite, negative_control, ops_suite, CheckResult};
use mpsi::metrics::{psnr, ssim, EvalProtocol};
use mpsi::model::{tiny_config, ModelConfig};
use mpsi::param::{ParamBuilder, ParamVisit};
use mpsi::ssm::{lti_kernel, lti_kernel_apply, MambaBlock, SsmConfig, SsmParams};
use mpsi::tensor::nn::{pixel_shuffle, pixel_unshuffle};
use mpsi::train::{
    clamp01, render_ablation_report, run_ablation, train_loop, RunConfig, TrainConfig,
    TrainLogEntry, TrainState,
};
use mpsi::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(n: u32, what: &str, pass: bool, detail: &str) {
    println!(
        "ACCEPTANCE {n} {what}: {}",
        if pass { "PASS" } else { "FAIL" }
    );
    if !detail.is_empty() {
        println!("  [{n}] {detail}");
    }
    assert!(pass, "ACCEPTANCE {n} {what}: FAIL — {detail}");
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(data, shape).unwrap()
}

fn zero_all(m: &mut dyn ParamVisit<f64>) {
    m.visit_params_mut(&mut |p| {
        let n = p.numel();
        p.set_data(vec![0.0; n]).unwrap();
    });
}

fn randomize_all(m: &mut dyn ParamVisit<f64>, seed: u64, lo: f64, hi: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    m.visit_params_mut(&mut |p| {
        let n = p.numel();
        let vals: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        p.set_data(vals).unwrap();
    });
}

fn bits_equal(a: &Tensor<f64>, b: &Tensor<f64>) -> bool {
    a.shape() == b.shape()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

/// A patch with smooth color gradients plus hard-edged rectangles, most of
/// them filled with fine stripes. Stripes near the Nyquist rate of the
/// downsampled grid alias badly under bicubic upsampling, while an
/// overfitting model can simply memorize them — so the patch leaves a
/// clear gap for a trained model to close.
fn textured_image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0f64; 3 * h * w];
    for c in 0..3 {
        let fy: f64 = rng.gen_range(2.0..5.0);
        let fx: f64 = rng.gen_range(2.0..5.0);
        let phase: f64 = rng.gen_range(0.0..TAU);
        for i in 0..h {
            for j in 0..w {
                let v = 0.5
                    + 0.2
                        * (TAU * fy * i as f64 / h as f64 + phase).sin()
                        * (TAU * fx * j as f64 / w as f64).cos();
                data[(c * h + i) * w + j] = v;
            }
        }
    }
    for _ in 0..12 {
        let top = rng.gen_range(0..h.saturating_sub(3).max(1));
        let left = rng.gen_range(0..w.saturating_sub(3).max(1));
        let rh = rng.gen_range(3..=(h / 2).max(3));
        let rw = rng.gen_range(3..=(w / 2).max(3));
        let ca: [f64; 3] = [
            rng.gen_range(0.05..0.95),
            rng.gen_range(0.05..0.95),
            rng.gen_range(0.05..0.95),
        ];
        let cb: [f64; 3] = [
            rng.gen_range(0.05..0.95),
            rng.gen_range(0.05..0.95),
            rng.gen_range(0.05..0.95),
        ];
        // 0 = flat fill, 1..=3 = horizontal/vertical/diagonal stripes.
        let kind = rng.gen_range(0..4);
        let period = rng.gen_range(2..=3);
        for i in top..(top + rh).min(h) {
            for j in left..(left + rw).min(w) {
                let color = match kind {
                    0 => &ca,
                    1 => {
                        if (i / period) % 2 == 0 {
                            &ca
                        } else {
                            &cb
                        }
                    }
                    2 => {
                        if (j / period) % 2 == 0 {
                            &ca
                        } else {
                            &cb
                        }
                    }
                    _ => {
                        if ((i + j) / period) % 2 == 0 {
                            &ca
                        } else {
                            &cb
                        }
                    }
                };
                for c in 0..3 {
                    data[(c * h + i) * w + j] = color[c];
                }
            }
        }
    }
    for v in &mut data {
        *v = (*v + rng.gen_range(-0.02..0.02)).clamp(0.0, 1.0);
    }
    Tensor::from_vec(data, &[1, 3, h, w]).unwrap()
}

fn worst(results: &[CheckResult]) -> String {
    results
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .map(|r| {
            format!(
                "worst {}: rel err {:.3e} (tol {:.0e})",
                r.name, r.max_rel_err, r.tolerance
            )
        })
        .unwrap_or_default()
}

// ---------------------------------------------------------------------------
// 1. Finite-difference gradient checks

#[test]
fn a1_finite_difference_gradients() {
    let t0 = Instant::now();
    let ops = ops_suite(101).unwrap();
    let blocks = blocks_suite(102).unwrap();
    let model = model_suite(103).unwrap();
    let control = negative_control().unwrap();
    let elapsed = t0.elapsed().as_secs_f64();

    let mut fails: Vec<String> = Vec::new();
    for r in ops.iter().chain(&blocks).chain(&model) {
        if !r.passed() {
            fails.push(format!(
                "{}: {:.3e} > {:.0e}",
                r.name, r.max_rel_err, r.tolerance
            ));
        }
    }
    if control.passed() {
        fails.push("negative control (deliberately wrong gradient) was not flagged".into());
    }
    if elapsed > 300.0 {
        fails.push(format!("took {elapsed:.1}s > 300s"));
    }
    let detail = if fails.is_empty() {
        format!(
            "{} checks in {elapsed:.1}s; {}; {}; {}",
            ops.len() + blocks.len() + model.len(),
            worst(&ops),
            worst(&blocks),
            worst(&model)
        )
    } else {
        fails.join("; ")
    };
    verdict(1, "finite-difference gradients", fails.is_empty(), &detail);
}

// ---------------------------------------------------------------------------
// 2. Scan equivalences: frozen LTI kernel and selective per-step loop

#[test]
fn a2_scan_equivalences() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut fails: Vec<String> = Vec::new();

    // (a) Frozen (time-invariant) scan against the closed-form kernel,
    // 100 randomized systems, kernel length <= 64 taps, state <= 8.
    let mut max_kernel_err = 0.0f64;
    for trial in 0..100 {
        let ch = rng.gen_range(1..=4);
        let st = rng.gen_range(1..=8);
        let len = rng.gen_range(2..=64);
        let bsz = rng.gen_range(1..=2);
        let pb = ParamBuilder::new(300 + trial);
        let mut p: SsmParams<f64> = SsmParams::new(&pb.scope("ssm"), ch, st);
        let dt: Vec<f64> = (0..ch).map(|_| rng.gen_range(0.05..0.8)).collect();
        let b: Vec<f64> = (0..st).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..st).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a_cont: Vec<f64> = (0..ch * st).map(|_| -rng.gen_range(0.1..3.0)).collect();
        p.set_time_invariant(&dt, &b, &c).unwrap();
        p.set_a_cont(&a_cont).unwrap();

        let x = rand_tensor(&mut rng, &[bsz, len, ch]);
        let y = p.scan(&x).unwrap();

        let taps = len - 1;
        let mut a_bar = vec![0.0; ch * st];
        let mut b_bar = vec![0.0; ch * st];
        let mut c_full = vec![0.0; ch * st];
        for d in 0..ch {
            for s in 0..st {
                a_bar[d * st + s] = (dt[d] * a_cont[d * st + s]).exp();
                b_bar[d * st + s] = dt[d] * b[s];
                c_full[d * st + s] = c[s];
            }
        }
        let kernel = lti_kernel(&a_bar, &b_bar, &c_full, ch, st, taps);
        let want = lti_kernel_apply(
            x.data(),
            &kernel,
            p.d_skip.tensor().data(),
            bsz,
            len,
            ch,
            taps,
        );
        for (g, w) in y.data().iter().zip(&want) {
            max_kernel_err = max_kernel_err.max((g - w).abs());
        }
    }
    if max_kernel_err > 1e-10 {
        fails.push(format!(
            "frozen scan vs kernel: max err {max_kernel_err:.3e} > 1e-10"
        ));
    }

    // (b) Selective scan (input-dependent dt/B/C) against a per-step loop
    // written here from the recurrence definition.
    let softplus = |v: f64| v.max(0.0) + (1.0 + (-v.abs()).exp()).ln();
    let mut max_step_err = 0.0f64;
    for trial in 0..20 {
        let ch = rng.gen_range(1..=4);
        let st = rng.gen_range(1..=4);
        let len = rng.gen_range(2..=16);
        let bsz = rng.gen_range(1..=2);
        let pb = ParamBuilder::new(900 + trial);
        let p: SsmParams<f64> = SsmParams::new(&pb.scope("ssm"), ch, st);
        let x = rand_tensor(&mut rng, &[bsz, len, ch]);
        let y = p.scan(&x).unwrap();

        let delta_lin = p.delta_proj.forward(&x).unwrap();
        let bc = p.b_proj.forward(&x).unwrap();
        let cc = p.c_proj.forward(&x).unwrap();
        let a_log = p.a_log.tensor().data();
        let skip = p.d_skip.tensor().data();
        for bi in 0..bsz {
            let mut h = vec![0.0; ch * st];
            for t in 0..len {
                for d in 0..ch {
                    let dt = softplus(delta_lin.data()[(bi * len + t) * ch + d]);
                    let uv = x.data()[(bi * len + t) * ch + d];
                    let mut acc = skip[d] * uv;
                    for s in 0..st {
                        let a = -a_log[d * st + s].exp();
                        let abar = (dt * a).exp();
                        h[d * st + s] =
                            abar * h[d * st + s] + dt * bc.data()[(bi * len + t) * st + s] * uv;
                        acc += cc.data()[(bi * len + t) * st + s] * h[d * st + s];
                    }
                    let got = y.data()[(bi * len + t) * ch + d];
                    max_step_err = max_step_err.max((got - acc).abs());
                }
            }
        }
    }
    if max_step_err > 1e-12 {
        fails.push(format!(
            "selective scan vs step loop: max err {max_step_err:.3e} > 1e-12"
        ));
    }

    let detail = if fails.is_empty() {
        format!(
            "100 frozen systems (max err {max_kernel_err:.3e}), 20 selective systems (max err {max_step_err:.3e})"
        )
    } else {
        fails.join("; ")
    };
    verdict(2, "scan equivalences", fails.is_empty(), &detail);
}

// ---------------------------------------------------------------------------
// 3. Structural invariants

#[test]
fn a3_structural_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut fails: Vec<String> = Vec::new();

    // Window partition/merge round-trips bit-exactly, divisible and padded.
    for (h, w, win) in [(12, 16, (4, 8)), (10, 13, (4, 8)), (7, 7, (4, 4))] {
        let c = 5;
        let seq = FeatureSeq::new(rand_tensor(&mut rng, &[2, h * w, c]), h, w).unwrap();
        let windows = window_partition(&seq, win).unwrap();
        let back = window_merge(&windows, win, 2, h, w).unwrap();
        if !bits_equal(&seq.values, &back.values) {
            fails.push(format!(
                "window round-trip not bit-exact at {h}x{w} win {win:?}"
            ));
        }
    }

    // Pixel shuffle/unshuffle round-trips bit-exactly.
    for r in [2usize, 3] {
        let x = rand_tensor(&mut rng, &[2, 3 * r * r, 4, 5]);
        let up = pixel_shuffle(&x, r).unwrap();
        let back = pixel_unshuffle(&up, r).unwrap();
        if !bits_equal(&x, &back) {
            fails.push(format!("pixel shuffle round-trip not bit-exact at r={r}"));
        }
    }

    // Dihedral augmentation: each code inverts bit-exactly and the eight
    // codes are pairwise distinct on a generic image.
    let img = rand_tensor(&mut rng, &[1, 3, 5, 7]);
    let mut seen: Vec<Tensor<f64>> = Vec::new();
    for code in 0..DIHEDRAL_CODES {
        let fwd = dihedral_apply(&img, code).unwrap();
        let back = dihedral_apply(&fwd, dihedral_inverse(code)).unwrap();
        if !bits_equal(&img, &back) {
            fails.push(format!("dihedral code {code} does not invert bit-exactly"));
        }
        if seen.iter().any(|s| bits_equal(s, &fwd)) {
            fails.push(format!(
                "dihedral code {code} duplicates an earlier element"
            ));
        }
        seen.push(fwd);
    }

    // With every parameter at zero, STB / CMB / SAMG are exact identities:
    // all branch outputs die in the zeroed projections and only the
    // residual paths remain.
    let ssm = SsmConfig {
        state_dim: 2,
        conv_width: 2,
        expansion: 2,
    };
    let win = WindowSpec {
        win_h: 4,
        win_w: 4,
        heads: 2,
    };
    let (h, w, c) = (6, 9, 6);
    let x = FeatureSeq::new(rand_tensor(&mut rng, &[2, h * w, c]), h, w).unwrap();

    let pb = ParamBuilder::new(31);
    let mut stb: Stb<f64> = Stb::new(&pb.scope("stb"), c, win, 2).unwrap();
    zero_all(&mut stb);
    if !bits_equal(&x.values, &stb.forward(&x).unwrap().values) {
        fails.push("zeroed STB is not the identity".into());
    }

    let mut cmb: Cmb<f64> = Cmb::new(&pb.scope("cmb"), c, ssm, 2, None).unwrap();
    zero_all(&mut cmb);
    if !bits_equal(&x.values, &cmb.forward(&x).unwrap().values) {
        fails.push("zeroed CMB is not the identity".into());
    }

    let spec = SamgSpec {
        channels: c,
        blocks: 2,
        window: win,
        sgfn_expansion: 2,
        cmb_ssm: ssm,
        mcrm_ssm: ssm,
        mix_kind: SambMixKind::Cmb,
        mcrm_recursive: Some(true),
    };
    let mut samg: Samg<f64> = Samg::new(&pb.scope("samg"), spec).unwrap();
    zero_all(&mut samg);
    if !bits_equal(&x.values, &samg.forward(&x).unwrap().values) {
        fails.push("zeroed SAMG is not the identity".into());
    }

    let detail = if fails.is_empty() {
        "window/pixel-shuffle/dihedral round-trips bit-exact; zeroed STB/CMB/SAMG are identities"
            .to_string()
    } else {
        fails.join("; ")
    };
    verdict(3, "structural invariants", fails.is_empty(), &detail);
}

// ---------------------------------------------------------------------------
// 4. DDBM reversal symmetry with tied twins

#[test]
fn a4_ddbm_tied_reversal() {
    let mut fails: Vec<String> = Vec::new();
    let mut max_err = 0.0f64;
    for (seed, bsz, len, ch) in [(41u64, 2usize, 7usize, 3usize), (42, 1, 12, 5)] {
        let cfg = SsmConfig {
            state_dim: 2,
            conv_width: 2,
            expansion: 2,
        };
        let pb = ParamBuilder::new(seed);
        let mut ddbm: mpsi::ssm::Ddbm<f64> = mpsi::ssm::Ddbm::new(&pb.scope("ddbm"), ch, cfg);
        // Tie the backward branch to the forward branch; with shared
        // weights the module must commute with sequence reversal.
        let mut fwd_vals: Vec<Vec<f64>> = Vec::new();
        ddbm.fwd
            .visit_params(&mut |p| fwd_vals.push(p.tensor().data().to_vec()));
        let mut it = fwd_vals.into_iter();
        ddbm.bwd
            .visit_params_mut(&mut |p| p.set_data(it.next().expect("same structure")).unwrap());

        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let x = rand_tensor(&mut rng, &[bsz, len, ch]);
        let lhs = ddbm.forward(&x.reverse(1).unwrap()).unwrap();
        let rhs = ddbm.forward(&x).unwrap().reverse(1).unwrap();
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            max_err = max_err.max((a - b).abs());
        }
    }
    if max_err > 1e-10 {
        fails.push(format!("tied DDBM reversal: max err {max_err:.3e} > 1e-10"));
    }
    let detail = if fails.is_empty() {
        format!("max asymmetry {max_err:.3e} over two shapes")
    } else {
        fails.join("; ")
    };
    verdict(4, "ddbm tied reversal", fails.is_empty(), &detail);
}

// ---------------------------------------------------------------------------
// 5. MCRM gate behavior

#[test]
fn a5_mcrm_gate() {
    let mut fails: Vec<String> = Vec::new();
    let ssm = SsmConfig {
        state_dim: 2,
        conv_width: 2,
        expansion: 2,
    };
    let (bsz, ch, h, w) = (2, 6, 4, 4);
    // Trunc-normal init makes the gate's dependence on earlier taps
    // numerically invisible; widen the parameters so structure shows.
    let pb = ParamBuilder::new(55);
    let mut mcrm: Mcrm<f64> = Mcrm::new(&pb.scope("mcrm"), ch, ssm, true).unwrap();
    randomize_all(&mut mcrm, 550, -0.8, 0.8);

    let mut rng = ChaCha8Rng::seed_from_u64(551);
    let taps: Vec<Tensor<f64>> = (0..3)
        .map(|_| rand_tensor(&mut rng, &[bsz, ch, h, w]))
        .collect();
    let last = taps.last().unwrap().clone();
    let out = mcrm.forward(&taps).unwrap();

    // The gate is multiplicative and sigmoid-bounded: outputs shrink the
    // last tap, never flip or exceed it.
    let mut gate_ok = true;
    let mut shrink_ok = true;
    for (o, l) in out.data().iter().zip(last.data()) {
        if o.abs() > l.abs() {
            shrink_ok = false;
        }
        if l.abs() > 1e-6 {
            let r = o / l;
            if !(r > 0.0 && r < 1.0) {
                gate_ok = false;
            }
        }
    }
    if !gate_ok {
        fails.push("gate ratio outside the open interval (0, 1)".into());
    }
    if !shrink_ok {
        fails.push("output magnitude exceeds the last tap".into());
    }

    // Recursion: perturbing an *earlier* tap must steer the gate. The bump
    // has to be channel-asymmetric — a uniform shift of every channel is
    // removed by the layer norm in the descriptor path.
    let mut bumped = taps.clone();
    let mut v0 = bumped[0].data().to_vec();
    for b in 0..bsz {
        for (i, x) in v0[(b * ch + 1) * h * w..(b * ch + 2) * h * w]
            .iter_mut()
            .enumerate()
        {
            *x += 0.5 + 0.1 * i as f64;
        }
    }
    bumped[0] = Tensor::from_vec(v0, &[bsz, ch, h, w]).unwrap();
    let out_bumped = mcrm.forward(&bumped).unwrap();
    let moved = out
        .data()
        .iter()
        .zip(out_bumped.data())
        .any(|(a, b)| (a - b).abs() > 1e-9);
    if !moved {
        fails.push("recursive gate ignores earlier taps".into());
    }

    // Without recursion (same parameters), earlier taps are invisible.
    let pb2 = ParamBuilder::new(55);
    let mut flat: Mcrm<f64> = Mcrm::new(&pb2.scope("mcrm"), ch, ssm, false).unwrap();
    randomize_all(&mut flat, 550, -0.8, 0.8);
    let a = flat.forward(&taps).unwrap();
    let b = flat.forward(&bumped).unwrap();
    if !bits_equal(&a, &b) {
        fails.push("non-recursive gate depends on earlier taps".into());
    }

    // Causality of the underlying scan: perturbing token t only moves
    // outputs at positions >= t.
    let pbm = ParamBuilder::new(56);
    let mb: MambaBlock<f64> = MambaBlock::new(&pbm.scope("mb"), ch, ssm);
    let x = rand_tensor(&mut rng, &[1, 8, ch]);
    let y = mb.forward(&x).unwrap();
    let t0 = 4usize;
    let mut xv = x.data().to_vec();
    xv[t0 * ch + 1] += 0.25;
    let y2 = mb
        .forward(&Tensor::from_vec(xv, &[1, 8, ch]).unwrap())
        .unwrap();
    let before_same = (0..t0 * ch).all(|i| y.data()[i].to_bits() == y2.data()[i].to_bits());
    let after_moves = (t0 * ch..8 * ch).any(|i| (y.data()[i] - y2.data()[i]).abs() > 1e-9);
    if !before_same {
        fails.push("perturbation leaks backwards in time".into());
    }
    if !after_moves {
        fails.push("perturbation never reaches later positions".into());
    }

    let detail = if fails.is_empty() {
        "gate in (0,1), non-expansive, recursive over earlier taps, scan causal".to_string()
    } else {
        fails.join("; ")
    };
    verdict(5, "mcrm gate", fails.is_empty(), &detail);
}

// ---------------------------------------------------------------------------
// 6. Metric closed forms

#[test]
fn a6_metric_closed_forms() {
    let mut fails: Vec<String> = Vec::new();
    let constant =
        |v: f64, h: usize, w: usize| Tensor::from_vec(vec![v; 3 * h * w], &[1, 3, h, w]).unwrap();
    let protocol = EvalProtocol {
        border_crop: 0,
        on_luma: true,
        peak: 1.0,
    };

    let half = psnr(&constant(0.0, 8, 8), &constant(0.5, 8, 8), protocol).unwrap();
    if (half - 6.020599913279624).abs() > 1e-12 {
        fails.push(format!("psnr at offset 0.5: {half} != 6.020599913279624"));
    }
    let tenth = psnr(&constant(0.4, 6, 9), &constant(0.5, 6, 9), protocol).unwrap();
    if (tenth - 20.0).abs() > 1e-12 {
        fails.push(format!("psnr at offset 0.1: {tenth} != 20"));
    }

    let mut vals = vec![0.0; 3 * 16 * 16];
    for (i, v) in vals.iter_mut().enumerate() {
        *v = ((i * 37) % 101) as f64 / 101.0;
    }
    let pattern = Tensor::from_vec(vals, &[1, 3, 16, 16]).unwrap();
    let self_ssim = ssim(&pattern, &pattern, protocol).unwrap();
    if (self_ssim - 1.0).abs() > 1e-12 {
        fails.push(format!("self-ssim {self_ssim} != 1"));
    }

    let pair = ssim(&constant(0.3, 16, 16), &constant(0.7, 16, 16), protocol).unwrap();
    if (pair - 0.724185485261162).abs() > 1e-9 {
        fails.push(format!("constant-pair ssim {pair} != 0.724185485261162"));
    }

    let detail = if fails.is_empty() {
        format!("psnr {half:.12} / {tenth:.12}, ssim {self_ssim:.12} / {pair:.12}")
    } else {
        fails.join("; ")
    };
    verdict(6, "metric closed forms", fails.is_empty(), &detail);
}

// ---------------------------------------------------------------------------
// 7. Single-patch overfit beats bicubic

#[test]
fn a7_overfit_gate() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let train_dir = dir.path().join("train");
    std::fs::create_dir_all(&train_dir).unwrap();
    let hr_path = train_dir.join("patch.png");
    save_image(&textured_image(64, 64, 7001), &hr_path).unwrap();
    let hr: Tensor<f64> = load_image(&hr_path).unwrap();

    let run = RunConfig {
        model: tiny_config(),
        train: TrainConfig {
            iterations: 500,
            batch_size: 1,
            lr_patch: 32,
            base_lr: 1e-3,
            milestones: vec![],
            augment: false,
            checkpoint_every: 500,
            log_every: 50,
            seed: 7,
        },
    };
    let sampler: PatchSampler<f64> = PatchSampler::from_dir(&train_dir, 2, 32).unwrap();
    let mut state = TrainState::<f64>::init(&run).unwrap();
    let mut log: Vec<TrainLogEntry> = Vec::new();
    let out_dir = dir.path().join("out");
    train_loop(&mut state, &sampler, &run, &out_dir, &mut |e| {
        log.push(e.clone())
    })
    .unwrap();
    let elapsed = t0.elapsed().as_secs_f64();

    let initial = log.first().map(|e| e.loss).unwrap_or(f64::NAN);
    let final_loss = log.last().map(|e| e.loss).unwrap_or(f64::NAN);

    let (hr_ref, lr) = degrade(&hr, 2).unwrap();
    let sr = clamp01(&state.model.forward(&lr).unwrap());
    let proto = EvalProtocol::for_scale(2);
    let model_psnr = psnr(&sr, &hr_ref, proto).unwrap();
    let up = bicubic_resize(&lr, 64, 64).unwrap();
    let bicubic_psnr = psnr(&clamp01(&up), &hr_ref, proto).unwrap();

    let mut fails: Vec<String> = Vec::new();
    let halved = final_loss <= 0.5 * initial;
    if !halved {
        fails.push(format!(
            "loss only fell {initial:.5} -> {final_loss:.5} (need at least half)"
        ));
    }
    let beats_bicubic = model_psnr > bicubic_psnr;
    if !beats_bicubic {
        fails.push(format!(
            "model psnr {model_psnr:.3} does not beat bicubic {bicubic_psnr:.3}"
        ));
    }
    if elapsed > 600.0 {
        fails.push(format!("took {elapsed:.1}s > 600s"));
    }
    let detail = if fails.is_empty() {
        format!(
            "loss {initial:.5} -> {final_loss:.5}, psnr {model_psnr:.3} vs bicubic {bicubic_psnr:.3}, {elapsed:.1}s"
        )
    } else {
        fails.join("; ")
    };
    verdict(7, "single-patch overfit", fails.is_empty(), &detail);
}

// ---------------------------------------------------------------------------
// 8. Ablation driver mechanics

fn micro_model() -> ModelConfig {
    let mut m = tiny_config();
    m.channels = 8;
    m.blocks_per_group = 1;
    m.window_h = 2;
    m.window_w = 2;
    m.cmb_state_dim = 2;
    m.mcrm_state_dim = 2;
    m
}

#[test]
fn a8_ablation_driver() {
    let dir = tempfile::tempdir().unwrap();
    let train_dir = dir.path().join("train");
    let eval_a = dir.path().join("eval_a");
    let eval_b = dir.path().join("eval_b");
    for d in [&train_dir, &eval_a, &eval_b] {
        std::fs::create_dir_all(d).unwrap();
    }
    save_image(&textured_image(20, 20, 801), &train_dir.join("t.png")).unwrap();
    save_image(&textured_image(20, 20, 802), &eval_a.join("a.png")).unwrap();
    save_image(&textured_image(24, 20, 803), &eval_b.join("b.png")).unwrap();

    let base = RunConfig {
        model: micro_model(),
        train: TrainConfig {
            iterations: 2,
            batch_size: 1,
            lr_patch: 4,
            base_lr: 1e-4,
            milestones: vec![],
            augment: false,
            checkpoint_every: 100,
            log_every: 1,
            seed: 3,
        },
    };
    let out_dir = dir.path().join("ablation");
    let report = run_ablation::<f64>(
        &base,
        &train_dir,
        [&eval_a, &eval_b],
        &out_dir,
        &mut |_, _| {},
    )
    .unwrap();

    let mut fails: Vec<String> = Vec::new();
    let component_labels: Vec<&str> = report.components.iter().map(|r| r.label.as_str()).collect();
    if component_labels != ["base", "+cmb", "+mcrm", "+cmb+mcrm"] {
        fails.push(format!("component rows {component_labels:?}"));
    }
    let substitution_labels: Vec<&str> = report
        .substitutions
        .iter()
        .map(|r| r.label.as_str())
        .collect();
    if substitution_labels
        != [
            "channel-attention",
            "+cmb+mcrm",
            "non-recursive-gate",
            "+cmb+mcrm",
        ]
    {
        fails.push(format!("substitution rows {substitution_labels:?}"));
    }
    for row in report.components.iter().chain(&report.substitutions) {
        for cell in &row.cells {
            if !cell.psnr.is_finite() || !cell.ssim.is_finite() || cell.ssim.abs() > 1.0 + 1e-9 {
                fails.push(format!(
                    "row {}: psnr {} ssim {}",
                    row.label, cell.psnr, cell.ssim
                ));
            }
        }
    }
    for label in [
        "base",
        "+cmb",
        "+mcrm",
        "+cmb+mcrm",
        "channel-attention",
        "non-recursive-gate",
    ] {
        let vd = out_dir.join(label);
        if !vd.join("train_log.tsv").is_file() || !vd.join("checkpoint_2.ckpt").is_file() {
            fails.push(format!("variant {label} missing artifacts"));
        }
    }
    let rendered = render_ablation_report(&report, ["seta", "setb"]);
    for needle in [
        "== components ==",
        "== substitutions ==",
        "seta/psnr",
        "setb/psnr",
        "base",
        "channel-attention",
    ] {
        if !rendered.contains(needle) {
            fails.push(format!("rendered report lacks '{needle}'"));
        }
    }

    let detail = if fails.is_empty() {
        "6 variants trained, 4+4 rows with finite scores, artifacts and rendering intact"
            .to_string()
    } else {
        fails.join("; ")
    };
    verdict(8, "ablation driver", fails.is_empty(), &detail);
}

// ---------------------------------------------------------------------------
// 9. Determinism: same-seed identity and checkpoint-resume identity

fn final_params(state: &TrainState<f64>) -> Vec<(String, Vec<u64>)> {
    mpsi::param::named_params(&state.model)
        .into_iter()
        .map(|(name, t)| (name, t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn run_to(
    iterations: u64,
    out: &Path,
    train_dir: &Path,
    resume_from: Option<&Path>,
) -> TrainState<f64> {
    let mut run = RunConfig {
        model: micro_model(),
        train: TrainConfig {
            iterations,
            batch_size: 1,
            lr_patch: 4,
            base_lr: 1e-4,
            milestones: vec![],
            augment: true,
            checkpoint_every: 3,
            log_every: 2,
            seed: 11,
        },
    };
    run.model.use_cmb = true;
    run.model.use_mcrm = true;
    let sampler: PatchSampler<f64> = PatchSampler::from_dir(train_dir, 2, 4).unwrap();
    let mut state = match resume_from {
        None => TrainState::<f64>::init(&run).unwrap(),
        Some(ckpt) => TrainState::<f64>::resume(&run, ckpt).unwrap(),
    };
    train_loop(&mut state, &sampler, &run, out, &mut |_| {}).unwrap();
    state
}

#[test]
fn a9_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let train_dir = dir.path().join("train");
    std::fs::create_dir_all(&train_dir).unwrap();
    save_image(&textured_image(20, 20, 901), &train_dir.join("t.png")).unwrap();

    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let out_c = dir.path().join("c");

    let state_a = run_to(6, &out_a, &train_dir, None);
    let state_b = run_to(6, &out_b, &train_dir, None);
    let _ = run_to(3, &out_c, &train_dir, None);
    let state_c = run_to(
        6,
        &out_c,
        &train_dir,
        Some(&out_c.join("checkpoint_3.ckpt")),
    );

    let mut fails: Vec<String> = Vec::new();
    let pa = final_params(&state_a);
    if pa != final_params(&state_b) {
        fails.push("same seed, same data: parameters differ".into());
    }
    if pa != final_params(&state_c) {
        fails.push("resumed run drifts from the uninterrupted run".into());
    }
    if state_c.iteration != 6 {
        fails.push(format!(
            "resumed run stopped at iteration {}",
            state_c.iteration
        ));
    }
    let ck_a = std::fs::read(out_a.join("checkpoint_6.ckpt")).unwrap();
    let ck_c = std::fs::read(out_c.join("checkpoint_6.ckpt")).unwrap();
    if ck_a != ck_c {
        fails.push("final checkpoints differ byte-for-byte".into());
    }

    let detail = if fails.is_empty() {
        format!(
            "{} parameters bit-identical across reruns and across an interrupt/resume",
            pa.len()
        )
    } else {
        fails.join("; ")
    };
    verdict(9, "determinism", fails.is_empty(), &detail);
}
