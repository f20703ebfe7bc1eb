//! Acceptance gate: one pass/fail line per criterion, nonzero exit on any
//! failure. Oracles here are computed independently of the library paths
//! they check wherever that is possible.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dss_core::attention::{core_macs, linear_feature_maps, linear_rsa, quadratic_rsa, rel_logits, rope_apply, rope_softmax_quadratic, AttentionKind};
use dss_core::bench::{count_macs, count_params, scaling_curve, SCALING_LENGTHS};
use dss_core::dsp::{compress, decompress, ComplexSpectrogram, Stft, SAMPLE_RATE};
use dss_core::eval::{evaluate, si_sdr, MetricKind, Separator};
use dss_core::model::{spot_check_gradients, DssModel, ModelConfig, Variant};
use dss_core::scene::{
    compute_rir, fft_convolve, generate_corpus, image_arrivals, render_scene, sample_scene, sample_scene_with_counts, CorpusConfig, Environment,
    FarBand, SceneSpec, SourcePlacement, Split, KERNEL_TAPS, SNR_LEVELS, SPEED_OF_SOUND,
};
use dss_core::smoke::{run_smoke, SmokeConfig};
use dss_core::tensor::gradcheck::{gradient_error, probe, rand_tensor, rand_vec};
use dss_core::tensor::{BinaryKind, Conv2dSpec, Padding2d, Tensor, UnaryKind};
use dss_core::training::{example_loss, make_example, LossWeights};

fn noise(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

fn stft_round_trip() -> Result<String> {
    let st = Stft::default();
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let x = noise(3 * SAMPLE_RATE as usize, seed);
        let y = st.istft(&st.stft(&x)?, x.len())?;
        let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = x.iter().zip(&y).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / peak;
        worst = worst.max(err);
    }
    ensure!(worst < 1e-6, "max relative error {worst:e}");
    Ok(format!("max relative error {worst:.2e} over 100 signals"))
}

fn power_law() -> Result<String> {
    let mut spec = ComplexSpectrogram::zeros(1, 8, 4);
    spec.real[0] = 4.0;
    spec.real[1] = 3.0;
    spec.imag[1] = -4.0;
    let c = compress(&spec, 0.3);
    ensure!((c.real[0] - 1.5157).abs() < 1e-4, "4^0.3 gave {}", c.real[0]);
    let mag = (c.real[1].powi(2) + c.imag[1].powi(2)).sqrt();
    let phase = c.imag[1].atan2(c.real[1]);
    ensure!((mag - 5f64.powf(0.3)).abs() < 1e-4 && (phase - (-4f64).atan2(3.0)).abs() < 1e-4, "magnitude {mag} phase {phase}");

    let st = Stft::default();
    let s = st.stft(&noise(16_000, 3))?;
    let back = decompress(&compress(&s, 0.3), 0.3);
    let worst = s.real.iter().chain(&s.imag).zip(back.real.iter().chain(&back.imag)).fold(0.0f64, |m, (a, b)| m.max((a - b).abs() / a.abs().max(1e-3)));
    ensure!(worst < 1e-4, "round-trip error {worst:e}");
    Ok(format!("4^0.3 = {:.5}, round-trip error {worst:.1e}", c.real[0]))
}

fn free_field(d: f64) -> (SceneSpec, SourcePlacement) {
    let mic = [3.0, 3.0, 1.0];
    let src = SourcePlacement::new([3.0 + d, 3.0, 1.0], mic);
    let spec = SceneSpec {
        room_dims: [7.0, 7.0, 2.6],
        mic_pos: mic,
        rt60: 0.5,
        env: Environment::Outdoor,
        near_sources: vec![],
        far_sources: vec![src.clone()],
        snr_db: 10.0,
        seed: 0,
        far_band: FarBand::SR,
        floor_reflection: 0.0,
    };
    (spec, src)
}

/// T20 of the reverberant tail: Schroeder backward integral starting past
/// the direct-sound kernel, least-squares fit between -5 and -25 dB.
fn schroeder_rt60(h: &[f64]) -> Option<f64> {
    let peak = h.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))?.0;
    let tail = &h[(peak + KERNEL_TAPS / 2 + 1).min(h.len())..];
    let mut acc = 0.0;
    let mut edc = vec![0.0; tail.len()];
    for i in (0..tail.len()).rev() {
        acc += tail[i] * tail[i];
        edc[i] = acc;
    }
    let total = edc.first().copied().filter(|&t| t > 0.0)?;
    let pts: Vec<(f64, f64)> = edc
        .iter()
        .enumerate()
        .map(|(i, e)| (i as f64 / SAMPLE_RATE as f64, 10.0 * (e / total).log10()))
        .filter(|(_, v)| (-25.0..=-5.0).contains(v))
        .collect();
    if pts.len() < 10 {
        return None;
    }
    let n = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (sx / n, sy / n);
    let slope = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / pts.iter().map(|(x, _)| (x - mx).powi(2)).sum::<f64>();
    (slope < 0.0).then(|| -60.0 / slope)
}

fn ism_oracles() -> Result<String> {
    let (s1, p1) = free_field(1.0);
    let (s2, p2) = free_field(2.0);
    let area = |s: &SceneSpec, p: &SourcePlacement| -> Result<f64> { Ok(compute_rir(s, p)?.samples.iter().sum()) };
    let ratio = area(&s1, &p1)? / area(&s2, &p2)?;
    ensure!((ratio / 2.0 - 1.0).abs() < 0.01, "inverse-distance ratio {ratio}");

    let mut worst_delay = 0.0f64;
    for d in [0.3, 0.77, 1.234, 2.05] {
        let (s, p) = free_field(d);
        let h = compute_rir(&s, &p)?.samples;
        let peak = h.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).unwrap_or(0);
        worst_delay = worst_delay.max((peak as f64 - d / SPEED_OF_SOUND * SAMPLE_RATE as f64).abs());
    }
    ensure!(worst_delay <= 0.5, "direct-path delay off by {worst_delay} samples");

    let mut worst_rt = 0.0f64;
    for seed in 0..50 {
        let s = sample_scene(1000 + seed, Environment::Indoor, FarBand::SR)?;
        let src = s.sources().next().context("scene without sources")?;
        let h = compute_rir(&s, src)?.samples;
        let est = schroeder_rt60(&h).with_context(|| format!("no decay fit for scene {seed}"))?;
        let dev = (est / s.rt60 - 1.0).abs();
        ensure!(dev <= 0.2, "scene {seed}: rt60 {:.3} estimated {est:.3}", s.rt60);
        worst_rt = worst_rt.max(dev);
    }

    for seed in 0..20 {
        let s = sample_scene(2000 + seed, Environment::Outdoor, FarBand::SR)?;
        for src in s.sources() {
            let n = image_arrivals(&s, src)?.len();
            ensure!(n == 2, "outdoor scene {seed} has {n} arrivals");
        }
    }
    Ok(format!(
        "distance ratio {ratio:.4}, delay error {worst_delay:.2} samples, RT60 deviation {:.1}% max over 50 rooms",
        100.0 * worst_rt
    ))
}

fn snr_mixing() -> Result<String> {
    let mut worst = 0.0f64;
    for (k, &snr) in SNR_LEVELS.iter().enumerate() {
        for env in [Environment::Indoor, Environment::Outdoor] {
            // Near-only scene: the far target is exactly the scaled noise.
            let mut spec = sample_scene_with_counts(300 + k as u64, env, FarBand::SR, Some((2, 0)))?;
            spec.snr_db = snr;
            let dry = vec![noise(8_000, 1), noise(8_000, 2)];
            let m = render_scene(&spec, &dry, &noise(8_000, 3))?;
            worst = worst.max((10.0 * (power(&m.target_near) / power(&m.target_far)).log10() - snr).abs());

            // Mixed scene: recover the noise by removing the convolved far speech.
            let mut spec = sample_scene_with_counts(400 + k as u64, env, FarBand::SR, Some((1, 2)))?;
            spec.snr_db = snr;
            let dry = vec![noise(8_000, 4), noise(8_000, 5), noise(8_000, 6)];
            let m = render_scene(&spec, &dry, &noise(8_000, 7))?;
            let mut speech = vec![0.0; 8_000];
            let mut far_speech = vec![0.0; 8_000];
            for (i, (src, x)) in spec.sources().zip(&dry).enumerate() {
                let y = fft_convolve(x, &compute_rir(&spec, src)?.samples, 8_000);
                for j in 0..8_000 {
                    speech[j] += y[j];
                    if i >= 1 {
                        far_speech[j] += y[j];
                    }
                }
            }
            let n: Vec<f64> = m.target_far.iter().zip(&far_speech).map(|(a, b)| a - b).collect();
            worst = worst.max((10.0 * (power(&speech) / power(&n)).log10() - snr).abs());
        }
    }
    ensure!(worst <= 0.1, "SNR deviation {worst:.3} dB");
    Ok(format!("max deviation {worst:.4} dB over 5 levels, indoor and outdoor"))
}

fn micro(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        channels: 4,
        blocks: 2,
        heads: 2,
        fft: 16,
        hop: 4,
        compress_exp: 0.3,
        depthwise_kernel: 3,
        densenet_dilations: vec![1, 2],
        max_rel_distance: 4,
        rope_base: 10_000.0,
        ffn_mult: 2,
    }
}

fn autodiff() -> Result<String> {
    let mut checks: Vec<(String, f64)> = Vec::new();
    let mut run = |name: &str, inputs: &[Tensor<f64>], f: &dyn Fn(&[Tensor<f64>]) -> Tensor<f64>| {
        checks.push((name.to_string(), gradient_error(inputs, f)));
    };
    let x34 = rand_tensor(&[3, 4], 1);
    for kind in [UnaryKind::Sigmoid, UnaryKind::Tanh, UnaryKind::Swish, UnaryKind::Gelu, UnaryKind::Power(2.0), UnaryKind::Scale(-1.7), UnaryKind::AddScalar(0.4), UnaryKind::Abs] {
        run(&format!("{kind:?}"), &[x34.clone()], &|p| probe(&p[0].unary(kind)));
    }
    let pos = Tensor::new(rand_vec(6, 2).iter().map(|v| v + 1.5).collect(), &[6])?;
    run("powf(0.3)", &[pos.clone()], &|p| probe(&p[0].powf(0.3)));
    run("powf(-1.35)", &[pos], &|p| probe(&p[0].powf(-1.35)));
    for kind in [BinaryKind::Add, BinaryKind::Sub, BinaryKind::Mul, BinaryKind::Prelu] {
        run(&format!("{kind:?} broadcast"), &[rand_tensor(&[2, 1, 3], 3), rand_tensor(&[4, 1], 4)], &|p| probe(&p[0].binary(&p[1], kind).unwrap()));
    }
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = rand_tensor(if ta { &[2, 4, 3] } else { &[2, 3, 4] }, 5);
        let b = rand_tensor(if tb { &[2, 5, 4] } else { &[2, 4, 5] }, 6);
        run(&format!("matmul_t({ta},{tb})"), &[a, b], &|p| probe(&p[0].matmul_t(&p[1], ta, tb).unwrap()));
    }
    let x = rand_tensor(&[2, 3, 4], 7);
    for axis in 0..3 {
        run(&format!("sum({axis})"), &[x.clone()], &|p| probe(&p[0].sum(axis).unwrap()));
        run(&format!("mean({axis})"), &[x.clone()], &|p| probe(&p[0].mean(axis).unwrap()));
        run(&format!("variance({axis})"), &[x.clone()], &|p| probe(&p[0].variance(axis).unwrap()));
        run(&format!("softmax({axis})"), &[x.clone()], &|p| probe(&p[0].softmax(axis).unwrap()));
        let n = x.dim(axis);
        run(&format!("layer_norm({axis})"), &[x.clone(), rand_tensor(&[n], 8), rand_tensor(&[n], 9)], &|p| {
            probe(&p[0].layer_norm(axis, Some((&p[1], &p[2])), 1e-5).unwrap())
        });
    }
    run("sum_all", &[x.clone()], &|p| p[0].sum_all());
    run("mean_all", &[x.clone()], &|p| p[0].mean_all());
    run("permute", &[x.clone()], &|p| probe(&p[0].permute(&[1, 2, 0]).unwrap()));
    run("reshape", &[x.clone()], &|p| probe(&p[0].reshape(&[6, 4]).unwrap()));
    run("narrow", &[x.clone()], &|p| probe(&p[0].narrow(2, 1, 2).unwrap()));
    run("pad", &[x.clone()], &|p| probe(&p[0].pad(1, 2, 1).unwrap()));
    run("split", &[x.clone()], &|p| {
        let parts = p[0].split(2, &[1, 3]).unwrap();
        probe(&parts[1]).add(&probe(&parts[0]).scale(2.0)).unwrap()
    });
    run("pixel_shuffle_freq", &[x.clone()], &|p| probe(&p[0].pixel_shuffle_freq(2).unwrap()));
    run("pixel_unshuffle_freq", &[x.clone()], &|p| probe(&p[0].pixel_unshuffle_freq(2).unwrap()));
    run("concat", &[x.clone(), rand_tensor(&[2, 5, 4], 10)], &|p| probe(&Tensor::concat(&[&p[0], &p[1]], 1).unwrap()));
    let specs = [
        Conv2dSpec::default(),
        Conv2dSpec { stride: (1, 2), padding: Padding2d::symmetric(0, 1), ..Default::default() },
        Conv2dSpec { dilation: (2, 1), padding: Padding2d::causal_h(2, 1), ..Default::default() },
        Conv2dSpec { groups: 2, padding: Padding2d::symmetric(1, 1), ..Default::default() },
    ];
    for (i, spec) in specs.into_iter().enumerate() {
        let inputs = [rand_tensor(&[4, 5, 6], 11 + i as u64), rand_tensor(&[2, 4 / spec.groups, 2, 3], 21 + i as u64), rand_tensor(&[2], 31 + i as u64)];
        run(&format!("conv2d #{i}"), &inputs, &|p| probe(&p[0].conv2d(&p[1], Some(&p[2]), spec).unwrap()));
    }
    run("depthwise_conv1d", &[rand_tensor(&[2, 6, 3], 40), rand_tensor(&[3, 3], 41), rand_tensor(&[3], 42)], &|p| {
        probe(&p[0].depthwise_conv1d(&p[1], Some(&p[2])).unwrap())
    });
    let (q, k, v) = (rand_tensor(&[2, 5, 4], 50), rand_tensor(&[2, 5, 4], 51), rand_tensor(&[2, 5, 4], 52));
    run("rope", &[q.clone()], &|p| probe(&rope_apply(&p[0], &[0, 3, 1, 7, 2], 100.0).unwrap()));
    run("rel_logits", &[q.clone(), rand_tensor(&[7, 4], 53)], &|p| probe(&rel_logits(&p[0], &p[1], 3).unwrap()));
    run("quadratic_rsa", &[q.clone(), k.clone(), v.clone(), rand_tensor(&[7, 4], 54)], &|p| {
        probe(&quadratic_rsa(&p[0], &p[1], &p[2], Some((&p[3], 3))).unwrap())
    });
    run("linear_rsa", &[q.clone(), k.clone(), v.clone()], &|p| probe(&linear_rsa(&p[0], &p[1], &p[2], 10_000.0).unwrap()));
    run("rope_softmax_quadratic", &[q, k, v], &|p| probe(&rope_softmax_quadratic(&p[0], &p[1], &p[2], 10_000.0).unwrap()));
    let st = Stft::new(16, 4);
    run("istft", &[rand_tensor(&[5, 9], 60), rand_tensor(&[5, 9], 61)], &|p| probe(&st.istft_tensor(&p[0], &p[1], 20).unwrap()));

    let (worst_op, worst) = checks.iter().cloned().fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    ensure!(worst <= 1e-6, "{worst_op}: relative error {worst:e}");

    let mut model_worst = 0.0f64;
    for variant in Variant::ALL {
        let m = DssModel::<f64>::new(micro(variant), 3)?;
        let mix: Vec<f64> = rand_vec(64, 4).iter().map(|v| 0.3 * v).collect();
        let near: Vec<f64> = rand_vec(64, 5).iter().map(|v| 0.2 * v).collect();
        let far: Vec<f64> = mix.iter().zip(&near).map(|(a, b)| a - b).collect();
        let ex = make_example(&m, &mix, &near, &far)?;
        let w = LossWeights::default();
        let e = spot_check_gradients(&m, 20, 6, |m| Ok(example_loss(m, &ex, &w)?.total))?;
        ensure!(e < 1e-4, "{variant:?}: spot check {e:e}");
        model_worst = model_worst.max(e);
    }
    Ok(format!("{} op checks, worst {worst:.1e} ({worst_op}); model spot check worst {model_worst:.1e}", checks.len()))
}

fn attention_equivalences() -> Result<String> {
    let (b, n, d) = (3, 9, 6);
    let (q, k, v) = (rand_tensor(&[b, n, d], 1), rand_tensor(&[b, n, d], 2), rand_tensor(&[b, n, d], 3));
    let mut worst_q = 0.0f64;
    for rel in [None, Some(Tensor::<f64>::zeros(&[9, d]))] {
        let y = quadratic_rsa(&q, &k, &v, rel.as_ref().map(|t| (t, 4)))?;
        let (qd, kd, vd, yd) = (q.data(), k.data(), v.data(), y.data());
        for bi in 0..b {
            for i in 0..n {
                let s: Vec<f64> = (0..n)
                    .map(|j| (0..d).map(|x| qd[(bi * n + i) * d + x] * kd[(bi * n + j) * d + x]).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for x in 0..d {
                    let want: f64 = (0..n).map(|j| e[j] / z * vd[(bi * n + j) * d + x]).sum();
                    worst_q = worst_q.max((want - yd[(bi * n + i) * d + x]).abs());
                }
            }
        }
    }
    ensure!(worst_q < 1e-10, "quadratic vs brute force {worst_q:e}");

    let (sq, sk) = linear_feature_maps(&q, &k, 10_000.0)?;
    let scale = 1.0 / (d as f64).sqrt();
    let left = sq.matmul_t(&sk, false, true)?.matmul(&v)?.scale(scale);
    let right = linear_rsa(&q, &k, &v, 10_000.0)?;
    let worst_l = left.data().iter().zip(right.data()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    ensure!(worst_l < 1e-12, "association orders differ by {worst_l:e}");

    let qv = rand_vec(d, 7);
    let kv = rand_vec(d, 8);
    let dot_at = |m: usize, nn: usize| -> Result<f64> {
        let qr = rope_apply(&Tensor::new(qv.clone(), &[1, d])?, &[m], 10_000.0)?;
        let kr = rope_apply(&Tensor::new(kv.clone(), &[1, d])?, &[nn], 10_000.0)?;
        Ok(qr.data().iter().zip(kr.data()).map(|(a, b)| a * b).sum())
    };
    let mut worst_r = 0.0f64;
    for (m, nn) in [(5, 2), (17, 3), (40, 40), (2, 30)] {
        let base = dot_at(m, nn)?;
        for s in [1, 7, 100, 1000] {
            worst_r = worst_r.max((dot_at(m + s, nn + s)? - base).abs());
        }
    }
    ensure!(worst_r < 1e-10, "rope offset property {worst_r:e}");
    Ok(format!("brute force {worst_q:.1e}, association {worst_l:.1e}, rope offset {worst_r:.1e}"))
}

fn complexity_scaling() -> Result<String> {
    for n in [128usize, 256, 375, 512, 1024] {
        ensure!(core_macs(AttentionKind::LinearRsa, 4, 2 * n, 12) == 2 * core_macs(AttentionKind::LinearRsa, 4, n, 12), "linear MACs at {n}");
        ensure!(core_macs(AttentionKind::QuadraticRsa, 4, 2 * n, 12) == 4 * core_macs(AttentionKind::QuadraticRsa, 4, n, 12), "quadratic MACs at {n}");
    }
    let lin = scaling_curve(AttentionKind::LinearRsa, 4, 12, &SCALING_LENGTHS, 20)?.ratio(2048, 256).context("missing point")?;
    let quad = scaling_curve(AttentionKind::QuadraticRsa, 4, 12, &SCALING_LENGTHS, 20)?.ratio(2048, 256).context("missing point")?;
    ensure!(lin <= 12.0, "linear latency ratio {lin:.2}");
    ensure!(quad >= 40.0, "quadratic latency ratio {quad:.2}");
    Ok(format!("latency 2048/256: linear {lin:.2}, quadratic {quad:.1}; MAC ratios 2 and 4"))
}

fn model_accounting() -> Result<String> {
    let p = count_params(&ModelConfig::full(Variant::ProposedLinear));
    let b = count_params(&ModelConfig::full(Variant::BaselineQuadratic));
    let macs = count_macs(&ModelConfig::full(Variant::ProposedLinear), 3.0)? / 1e9;
    ensure!(p < b, "proposed {p} not below baseline {b}");
    ensure!((1_000_000..=1_700_000).contains(&p), "proposed has {p} params");
    ensure!((18.0..=33.0).contains(&macs), "proposed needs {macs:.2} G MAC/s");
    ensure!(DssModel::<f32>::new(ModelConfig::full(Variant::ProposedLinear), 0)?.num_params() as u64 == p, "analytic count disagrees with model");
    Ok(format!("proposed {:.3} M, baseline {:.3} M, {macs:.2} G MAC/s", p as f64 / 1e6, b as f64 / 1e6))
}

fn overfit_and_desk_model() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let t0 = Instant::now();
    let (report, _) = run_smoke(&SmokeConfig::default(), dir.path())?;
    let secs = t0.elapsed().as_secs_f64();
    let ratio = report.overfit.ratio();
    let (near, far) = report.eval.mean_si_sdri(|_| true);
    let (near, far) = (near.context("no near SI-SDRi cells")?, far.context("no far SI-SDRi cells")?);
    ensure!(report.overfit.steps <= 500 && report.overfit.scenes == 5, "overfit run shape");
    ensure!(ratio <= 0.5, "overfit loss ratio {ratio:.3}");
    ensure!(near > 0.0 && far > 0.0, "desk SI-SDRi near {near:.2} far {far:.2}");
    ensure!(secs < 1800.0, "took {secs:.0} s");
    Ok(format!(
        "overfit loss x{ratio:.3} in {} steps; desk SI-SDRi near {near:.2} dB, far {far:.2} dB; {secs:.0} s",
        report.overfit.steps
    ))
}

fn metric_identities() -> Result<String> {
    let t = noise(4096, 1);
    let e: Vec<f64> = t.iter().zip(noise(4096, 2)).map(|(a, b)| a + 0.3 * b).collect();
    let base = si_sdr(&e, &t)?;
    for c in [0.5, 2.0, 8.0, 1.0 / 1024.0] {
        let ec: Vec<f64> = e.iter().map(|v| c * v).collect();
        ensure!(si_sdr(&ec, &t)? == base, "scale {c} changed SI-SDR");
    }

    // Estimate = target + orthogonal noise at one tenth the target power.
    let r = noise(4096, 3);
    let a = r.iter().zip(&t).map(|(x, y)| x * y).sum::<f64>() / t.iter().map(|y| y * y).sum::<f64>();
    let n: Vec<f64> = r.iter().zip(&t).map(|(x, y)| x - a * y).collect();
    let g = (power(&t) / power(&n) / 10.0).sqrt();
    let est: Vec<f64> = t.iter().zip(&n).map(|(x, y)| x + g * y).collect();
    let ten = si_sdr(&est, &t)?;
    ensure!((ten - 10.0).abs() < 1e-6, "constructed example gave {ten}");

    let dir = tempfile::tempdir()?;
    let recs = generate_corpus(&CorpusConfig::new(6, Split::Eval, dir.path(), 11))?;
    let rep = evaluate(&recs, dir.path(), &[FarBand::SR], || Ok(Box::new(|x: &[f64]| Ok((x.to_vec(), x.to_vec()))) as Separator))?;
    for c in &rep.cells {
        for h in [&c.near, &c.far] {
            if h.kind == MetricKind::SiSdri {
                ensure!(h.value == 0.0, "identity separator SI-SDRi {}", h.value);
            }
        }
    }
    Ok(format!("scale invariance exact, constructed example {ten:.9} dB, identity SI-SDRi 0 in {} cells", rep.cells.len()))
}

fn dss(args: &[&str]) -> Result<()> {
    let out = Command::new(env!("CARGO_BIN_EXE_dss")).args(args).env("DSS_LOG", "warn").output()?;
    if !out.status.success() {
        bail!("dss {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr));
    }
    Ok(())
}

fn same_tree(a: &Path, b: &Path) -> Result<usize> {
    let list = |d: &Path| -> Result<Vec<String>> {
        let mut v: Vec<String> = std::fs::read_dir(d)?.map(|e| Ok(e?.file_name().to_string_lossy().into_owned())).collect::<Result<_>>()?;
        v.sort();
        Ok(v)
    };
    let (la, lb) = (list(a)?, list(b)?);
    ensure!(la == lb, "{} and {} hold different files", a.display(), b.display());
    let mut n = 0;
    for name in la {
        let (pa, pb) = (a.join(&name), b.join(&name));
        if pa.is_dir() {
            n += same_tree(&pa, &pb)?;
            continue;
        }
        ensure!(std::fs::read(&pa)? == std::fs::read(&pb)?, "{name} differs between runs");
        n += 1;
    }
    Ok(n)
}

fn determinism() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    let train_cfg = serde_json::json!({
        "model": ModelConfig::tiny(Variant::ProposedLinear),
        "train": {"steps": 4, "batch": 1, "crop_seconds": 0.25, "checkpoint_every": 2, "validate_every": 0},
        "init_seed": 3
    });
    std::fs::write(p("train.json"), train_cfg.to_string())?;
    for run in ["a", "b"] {
        dss(&["simulate", "--out", &p(&format!("{run}/train")), "--count", "4", "--split", "train", "--seed", "5"])?;
        dss(&["simulate", "--out", &p(&format!("{run}/eval")), "--count", "2", "--split", "eval", "--seed", "6"])?;
        dss(&["train", "--config", &p("train.json"), "--manifest", &p(&format!("{run}/train/manifest.jsonl")), "--out", &p(&format!("{run}/run")), "--seed", "9"])?;
        dss(&["evaluate", "--ckpt", &p(&format!("{run}/run/model.dssf")), "--manifest", &p(&format!("{run}/eval/manifest.jsonl")), "--out", &p(&format!("{run}/eval_out"))])?;
        // Wall-clock timings are the one artifact allowed to differ.
        std::fs::remove_file(p(&format!("{run}/run/timing.jsonl")))?;
    }
    let files = same_tree(&dir.path().join("a"), &dir.path().join("b"))?;
    Ok(format!("{files} artifacts byte-identical across reruns"))
}

type Check = fn() -> Result<String>;

fn main() {
    let criteria: [(&str, Check); 11] = [
        ("STFT round-trip", stft_round_trip),
        ("power-law compression", power_law),
        ("image-source oracles", ism_oracles),
        ("SNR mixing", snr_mixing),
        ("autodiff finite differences", autodiff),
        ("attention equivalences", attention_equivalences),
        ("complexity scaling", complexity_scaling),
        ("model accounting", model_accounting),
        ("overfit and desk model", overfit_and_desk_model),
        ("metric identities", metric_identities),
        ("determinism", determinism),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err(anyhow::anyhow!("panicked")));
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("[PASS] {id:>2} {name}: {detail} ({secs:.1} s)"),
            Err(e) => {
                failed += 1;
                println!("[FAIL] {id:>2} {name}: {e:#} ({secs:.1} s)");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}

