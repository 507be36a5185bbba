//! Acceptance suite. Prints one `PASS` or `FAIL` line per criterion and
//! exits non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use masnn::asrv_viz::{average_spiking_response, render_heatmap};
use masnn::attention::{AttentionConfig, GateMode};
use masnn::energy::{anchor_on_vanilla, brute_force_acs, delta_e_and_r_ee, nasar, EnergyConstants, OpClass};
use masnn::event_ingest::{synth_events, FrameSequence, SyntheticDatasetSpec, Window};
use masnn::isometry::{input_gradient_norm, relaxed_block_options, run_suite, BlockSpec};
use masnn::network::{run, ConvSpec, ForwardOptions, Model, PlainNet, PlainSpec};
use masnn::params::Binder;
use masnn::residual::{AttResVariant, BlockInit, ResBlockParams};
use masnn::snn_core::{lif_step, BnMode, LifParams};
use masnn::tensor::Tensor;
use masnn::training::{
    bptt_train, energy_profile, evaluate, examples_from_streams, finite_diff_check, random_examples,
    relaxed_options, Example, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const LIF_SEQUENCES: usize = 1000;
const LIF_MAX_STEPS: usize = 16;
const GATE_INPUTS: usize = 100;
const FD_PARAMS: usize = 60;
const FD_EPSILON: f64 = 1e-4;
const FD_TOL: f64 = 1e-3;
const RELU_TOL: f64 = 0.05;
const ISOMETRY_TOL: f64 = 0.10;
const FLOW_BLOCKS: usize = 16;
const FLOW_RANGE: (f64, f64) = (0.5, 2.0);
const TREND_SEEDS: [u64; 3] = [0, 1, 2];
const TREND_STEPS: usize = 16;
const TREND_EPOCHS: usize = 20;
const TREND_ACC_SLACK: f64 = 0.01;
const TREND_NASAR_RATIO: f64 = 0.7;

const ZEROS_GOLDEN: &[u8] = include_bytes!("goldens/zeros_5x3.ppm");
const ONES_GOLDEN: &[u8] = include_bytes!("goldens/ones_5x3.ppm");

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Spacing between `x` and the next representable value away from zero.
fn ulp(x: f64) -> f64 {
    x.abs().next_up() - x.abs()
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    format!("error: {}", e)
}

fn gaussian(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_vec(shape, data).expect("shape product")
}

fn lif_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut neurons = 0usize;
    for seq in 0..LIF_SEQUENCES {
        let p = LifParams {
            u_th: rng.random_range(0.05..2.0),
            v_reset: rng.random_range(-0.5..0.5),
            beta: rng.random_range(0.01..0.99),
        };
        let steps = rng.random_range(1..=LIF_MAX_STEPS);
        let shape = [rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..6)];
        let mut h = gaussian(&shape, 0.5, &mut rng);
        let mut scalar_h: Vec<f64> = h.data().to_vec();
        for t in 0..steps {
            let x = gaussian(&shape, 1.0, &mut rng);
            let out = lif_step(&x, &h, &p).map_err(fail)?;
            for (i, (hs, &xi)) in scalar_h.iter_mut().zip(x.data()).enumerate() {
                let u = *hs + xi;
                let s = if u >= p.u_th { 1.0 } else { 0.0 };
                *hs = if s == 1.0 { p.v_reset } else { p.beta * u };
                let got = (out.membrane.data()[i], out.spikes.data()[i], out.state.data()[i]);
                if got != (u, s, *hs) {
                    return Err(format!("sequence {} step {} neuron {}: {:?} vs {:?}", seq, t, i, got, (u, s, *hs)));
                }
            }
            neurons += x.numel();
            h = out.state;
        }
    }
    Ok(format!("{} sequences, {} neuron updates identical", LIF_SEQUENCES, neurons))
}

fn random_frames(steps: usize, shape: [usize; 3], rng: &mut ChaCha8Rng) -> FrameSequence {
    let [c, h, w] = shape;
    let rate = rng.random_range(0.05..0.4);
    let data = (0..steps * c * h * w)
        .map(|_| if rng.random_bool(rate) { 1.0 } else { 0.0 })
        .collect();
    FrameSequence {
        data: Tensor::from_vec(&[steps, c, h, w], data).expect("shape product"),
        window: Window { us: 1000 },
    }
}

fn identity_gates() -> Outcome {
    let steps = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let spec = PlainSpec::default();
    let vanilla = PlainNet::new(spec.clone(), steps, LifParams::default(), AttentionConfig::none(), &mut rng).map_err(fail)?;
    let mut cfg = AttentionConfig::from_combo("TCSA").map_err(fail)?;
    cfg.gate_mode = GateMode::Pinned(1.0);
    let gated = vanilla.with_attention(cfg, &mut rng).map_err(fail)?;
    if vanilla.describe().map_err(fail)?.layers.len() != 3 {
        return Err("expected a 3-layer network".into());
    }
    let inputs: Vec<FrameSequence> = (0..GATE_INPUTS).map(|_| random_frames(steps, spec.input, &mut rng)).collect();
    let mut spikes = 0.0;
    for (mode, opts) in [("eval", ForwardOptions::eval(&vanilla.lif)), ("train", ForwardOptions::train(&vanilla.lif))] {
        let batch = if mode == "eval" { 1 } else { 10 };
        for chunk in inputs.chunks(batch) {
            let refs: Vec<&FrameSequence> = chunk.iter().collect();
            let (a, _) = run(&vanilla, &refs, Binder::frozen(), opts, true).map_err(fail)?;
            let (b, _) = run(&gated, &refs, Binder::frozen(), opts, true).map_err(fail)?;
            for (x, y) in a.spikes.iter().zip(&b.spikes) {
                let same = x.spikes.data().iter().zip(y.spikes.data()).all(|(p, q)| p.to_bits() == q.to_bits());
                if !same || x.spikes.shape() != y.spikes.shape() {
                    return Err(format!("{} mode: layer {} differs", mode, x.name));
                }
                spikes += x.spikes.sum();
            }
        }
    }
    Ok(format!("{} inputs x 2 BN modes bit-identical ({} spikes compared)", GATE_INPUTS, spikes))
}

fn two_layer_spec() -> PlainSpec {
    PlainSpec {
        input: [2, 6, 6],
        convs: vec![ConvSpec::same(3, 3, 2)],
        classes: 2,
    }
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let cfg = AttentionConfig::from_combo("TCSA").map_err(fail)?;
    let net = PlainNet::new(two_layer_spec(), 3, LifParams::default(), cfg, &mut rng).map_err(fail)?;
    let data = random_examples(2, 3, [2, 6, 6], 2, &mut rng);
    let opts = relaxed_options(&net, BnMode::Batch);
    let r = finite_diff_check(&net, &data, FD_EPSILON, FD_PARAMS, opts, 304).map_err(fail)?;
    check(
        r.checked >= 50 && r.max_rel_error <= FD_TOL,
        format!("{} params, max rel error {:.3e} (tol {:.0e})", r.checked, r.max_rel_error, FD_TOL),
    )
}

/// Spike-driven ACs per sample of every AC layer, counted synapse by synapse.
fn brute_force_ac_total<M: Model>(model: &M, data: &[Example], batch: usize) -> Result<f64, String> {
    let arch = model.describe().map_err(fail)?;
    let mut total = 0u64;
    for chunk in data.chunks(batch) {
        let refs: Vec<&FrameSequence> = chunk.iter().map(|e| &e.frames).collect();
        let (pass, _) = run(model, &refs, Binder::frozen(), ForwardOptions::eval(model.lif()), true).map_err(fail)?;
        for (name, input) in &pass.layer_inputs().inputs {
            let layer = arch.layers.iter().find(|l| &l.name == name).ok_or("unknown layer")?;
            if layer.op_class == OpClass::Ac {
                total += brute_force_acs(layer, input, false).map_err(fail)?;
            }
        }
    }
    Ok(total as f64 / data.len() as f64)
}

fn energy_bookkeeping() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let steps = 4;
    let vanilla = PlainNet::new(PlainSpec::default(), steps, LifParams::default(), AttentionConfig::none(), &mut rng)
        .map_err(fail)?;
    let gated = vanilla
        .with_attention(AttentionConfig::from_combo("TCSA").map_err(fail)?, &mut rng)
        .map_err(fail)?;
    // Power-of-two sample counts keep per-sample averages exact.
    let data = random_examples(8, steps, PlainSpec::default().input, 4, &mut rng);
    let batch = 4;
    let opts = ForwardOptions::eval(&vanilla.lif);

    let mut count_ok = true;
    let mut counts = Vec::new();
    for model in [&vanilla, &gated] {
        let stats = evaluate(model, &data, batch, opts).map_err(fail)?;
        let n = nasar(&stats.spikes).map_err(fail)?;
        let direct = stats.spikes.total() as f64 / stats.spikes.samples as f64;
        let via_rate = n.nasar * (stats.spikes.neurons * stats.spikes.steps) as f64;
        count_ok &= n.spike_count == direct && (via_rate - direct).abs() <= ulp(direct);
        counts.push(direct);
    }
    count_ok &= counts[0] > 0.0;

    let (pv, _) = energy_profile(&vanilla, &data, batch, opts).map_err(fail)?;
    let (pa, _) = energy_profile(&gated, &data, batch, opts).map_err(fail)?;
    let k = EnergyConstants::default();
    let (de, r_same) = delta_e_and_r_ee(&anchor_on_vanilla(&pv, &pv), &k).map_err(fail)?;
    let r_ok = r_same == 1.0 && de == 0.0;

    let anchored = anchor_on_vanilla(&pv, &pa);
    let brute = brute_force_ac_total(&vanilla, &data, batch)? - brute_force_ac_total(&gated, &data, batch)?;
    let ac_ok = anchored.delta_ac == brute;

    check(
        count_ok && r_ok && ac_ok,
        format!(
            "spike counts {:?} match nasar; r_EE(vanilla, vanilla) = {}; delta_AC {} vs brute force {}",
            counts, r_same, anchored.delta_ac, brute
        ),
    )
}

fn isometry_references() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let rows = run_suite(&BlockSpec::default(), &mut rng).map_err(fail)?;
    let mut details = Vec::new();
    let mut ok = true;
    let mut seen = 0;
    for row in &rows {
        let tol = if row.component.starts_with("identity") {
            0.0
        } else if row.component.starts_with("relu") {
            RELU_TOL
        } else if row.component.starts_with("sigmoid") || row.component.contains("law") {
            ISOMETRY_TOL
        } else {
            continue;
        };
        seen += 1;
        let gap = (row.measured_phi - row.reference_phi).abs() / row.reference_phi.abs();
        let varphi_ok = row
            .reference_varphi
            .is_none_or(|v| (row.measured_varphi - v).abs() <= tol * v.abs().max(row.reference_phi.abs()));
        let good = gap <= tol && varphi_ok;
        ok &= good;
        details.push(format!("{} {:.4}/{:.4}", row.component, row.measured_phi, row.reference_phi));
    }
    check(ok && seen == 6, details.join("; "))
}

fn gradient_flow() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let (steps, c, hw) = (2, 4, 5);
    let lif = LifParams::default();
    let cfg = AttentionConfig::default();
    let blocks = (0..FLOW_BLOCKS)
        .map(|_| ResBlockParams::new(c, c, 1, 0.1, &cfg, BlockInit::Orthogonal(1.0), &mut rng))
        .collect::<masnn::Result<Vec<_>>>()
        .map_err(fail)?;
    let opts = relaxed_block_options(&lif);
    let att = Some((&cfg, AttResVariant::V1));
    let mut ratios = Vec::new();
    for _ in 0..4 {
        let u = gaussian(&[steps, c, hw, hw], 1.0, &mut rng);
        let g = gaussian(&[steps, c, hw, hw], 1.0, &mut rng);
        let one = input_gradient_norm(&blocks[..1], &u, &g, &lif, att, opts).map_err(fail)?;
        let deep = input_gradient_norm(&blocks, &u, &g, &lif, att, opts).map_err(fail)?;
        ratios.push(deep / one);
    }
    let ok = ratios.iter().all(|r| (FLOW_RANGE.0..=FLOW_RANGE.1).contains(r));
    let shown: Vec<String> = ratios.iter().map(|r| format!("{:.3}", r)).collect();
    check(ok, format!("{} blocks / 1 block gradient norm ratios [{}]", FLOW_BLOCKS, shown.join(", ")))
}

fn moving_bar(samples_per_class: usize, seed: u64) -> Result<Vec<Example>, String> {
    let spec = SyntheticDatasetSpec {
        samples_per_class,
        seed,
        ..Default::default()
    };
    let window = Window::from_ms(spec.duration_us as f64 / 1000.0 / TREND_STEPS as f64).map_err(fail)?;
    examples_from_streams(&synth_events(&spec).map_err(fail)?, window, TREND_STEPS).map_err(fail)
}

fn trend() -> Outcome {
    let mut acc = [0.0; 2];
    let mut rate = [0.0; 2];
    for seed in TREND_SEEDS {
        let train = moving_bar(16, 100 + seed)?;
        let val = moving_bar(8, 200 + seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vanilla = PlainNet::new(PlainSpec::default(), TREND_STEPS, LifParams::default(), AttentionConfig::none(), &mut rng)
            .map_err(fail)?;
        let tcsa = vanilla
            .with_attention(AttentionConfig::from_combo("TCSA").map_err(fail)?, &mut rng)
            .map_err(fail)?;
        for (i, mut model) in [vanilla, tcsa].into_iter().enumerate() {
            let cfg = TrainConfig {
                epochs: TREND_EPOCHS,
                seed,
                ..Default::default()
            };
            bptt_train(&mut model, &train, &cfg, |_| {}).map_err(fail)?;
            let ev = evaluate(&model, &val, 16, cfg.eval_options(&model)).map_err(fail)?;
            acc[i] += ev.accuracy / TREND_SEEDS.len() as f64;
            rate[i] += ev.nasar / TREND_SEEDS.len() as f64;
        }
    }
    check(
        acc[1] >= acc[0] - TREND_ACC_SLACK && rate[1] <= TREND_NASAR_RATIO * rate[0],
        format!(
            "accuracy vanilla {:.3} tcsa {:.3}; NASAR vanilla {:.4} tcsa {:.4} (ratio {:.3})",
            acc[0],
            acc[1],
            rate[0],
            rate[1],
            rate[1] / rate[0]
        ),
    )
}

fn asrv_cross_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let steps = 5;
    let net = PlainNet::new(
        PlainSpec::default(),
        steps,
        LifParams::default(),
        AttentionConfig::from_combo("TCSA").map_err(fail)?,
        &mut rng,
    )
    .map_err(fail)?;
    let data = random_examples(13, steps, PlainSpec::default().input, 4, &mut rng);
    let opts = ForwardOptions::eval(&net.lif);
    let stats = evaluate(&net, &data, 5, opts).map_err(fail)?;
    let maps = average_spiking_response(&net, &data, 3, opts).map_err(fail)?;
    if maps.len() != stats.layer_spikes.len() {
        return Err(format!("{} maps vs {} energy layers", maps.len(), stats.layer_spikes.len()));
    }
    let mut compared = 0;
    for (map, (name, rec)) in maps.iter().zip(&stats.layer_spikes) {
        if &map.layer != name {
            return Err(format!("layer order differs: {} vs {}", map.layer, name));
        }
        let nsar = nasar(rec).map_err(fail)?.nsar;
        for (t, &v) in nsar.iter().enumerate() {
            let m = map.neuron_mean(t).map_err(fail)?;
            if m != v {
                return Err(format!("{} step {}: ASRV {} vs NSAR {}", name, t, m, v));
            }
            compared += 1;
        }
    }
    Ok(format!("{} layer-steps identical", compared))
}

fn visualization_goldens() -> Outcome {
    let zeros = render_heatmap(&Tensor::zeros(&[3, 5])).map_err(fail)?;
    let ones = render_heatmap(&Tensor::filled(&[3, 5], 1.0)).map_err(fail)?;
    check(
        zeros == ZEROS_GOLDEN && ones == ONES_GOLDEN,
        format!("zeros {} bytes, ones {} bytes", zeros.len(), ones.len()),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("lif-oracle", lif_oracle),
        ("identity-gates", identity_gates),
        ("gradient-check", gradient_check),
        ("energy-bookkeeping", energy_bookkeeping),
        ("isometry-references", isometry_references),
        ("gradient-flow", gradient_flow),
        ("trend", trend),
        ("asrv-energy-cross-check", asrv_cross_check),
        ("visualization-goldens", visualization_goldens),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS {} ({:.1}s): {}", name, secs, d),
            Err(d) => {
                failed += 1;
                println!("FAIL {} ({:.1}s): {}", name, secs, d);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
