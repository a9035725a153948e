//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Always exits 0 so that a faithfully failing criterion is reported without
//! breaking `cargo test`; the summary line counts failures.

mod common;

use std::time::Instant;

use common::{
    brute_ntxent, encoder_check, op_checks, probe_check, random_frozen, spec_with, FD_TOLERANCE,
    TABLE1,
};
use keyscope::analysis::{aug_linearity_report, Augmentation};
use keyscope::audio::{synth_clip, MelConfig, SynthSpec};
use keyscope::contrastive::{
    ntxent_loss, pretrain, ContrastiveBatch, PretrainConfig, SynthCorpus,
};
use keyscope::encoder::{mask_tokens, EncoderConfig, FrozenEncoder};
use keyscope::keyeval::{classify_relation, parse_key, weighted_score, Key, Relation};
use keyscope::probe::{
    arch_grid, evaluate_probe, expand_with_shifts, optimizer_grid, split_track_ids, train_probe,
    LabeledFeature, Probe, ProbeArch, Track, TrackAudio, TrainConfig,
};
use keyscope::seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn table_weighted_scores() -> Outcome {
    let mut notes = Vec::new();
    let mut worst: f64 = 0.0;
    for &(name, printed, parts) in TABLE1.iter() {
        match parts {
            Some([c, f, r, p]) => {
                let w = weighted_score(c, f, r, p);
                let direct = c + 0.5 * f + 0.3 * r + 0.2 * p;
                if (w - direct).abs() > 1e-9 {
                    return Err(format!("{name}: library {w} vs direct {direct}"));
                }
                let d = (w - printed).abs();
                worst = worst.max(d);
                if d > 0.015 {
                    notes.push(format!("{name} computes {w:.2}, printed {printed:.2}"));
                }
            }
            None => notes.push(format!("{name} has no category breakdown")),
        }
    }
    check(
        notes.is_empty(),
        if notes.is_empty() {
            format!("12 rows within ±0.015 (max {worst:.4})")
        } else {
            notes.join("; ")
        },
    )
}

fn parameter_counts() -> Outcome {
    let closed = |dims: &[usize]| -> usize { dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum() };
    let cases = [
        (ProbeArch::linear(), 9_240, closed(&[384, 24])),
        (ProbeArch::bb_reference(), 837_656, closed(&[384, 2048, 24])),
        (ProbeArch::gs_reference(), 18_456_600, closed(&[384, 4096, 4096, 24])),
    ];
    let mut out = Vec::new();
    for (arch, want, formula) in cases {
        let built = Probe::<f32>::build(&arch, 0).map_err(|e| e.to_string())?.num_parameters();
        if formula != want || arch.param_count() != want || built != want {
            return Err(format!(
                "{}: want {want}, formula {formula}, arch {}, built {built}",
                arch.label(),
                arch.param_count()
            ));
        }
        out.push(format!("{}={want}", arch.label()));
    }
    Ok(out.join(", "))
}

fn gradient_checks() -> Outcome {
    let mut worst = (String::new(), 0.0f64);
    let mut note = |name: String, err: f64| {
        if err > worst.1 || worst.0.is_empty() {
            worst = (name, err);
        }
    };
    for s in 0..4 {
        for (name, err) in op_checks(s).map_err(|e| e.to_string())? {
            note(format!("{name}/seed{s}"), err);
        }
    }
    for s in [1, 2] {
        note(format!("encoder chain/seed{s}"), encoder_check(s).map_err(|e| e.to_string())?);
    }
    for (arch, batch, s) in [
        (ProbeArch::linear(), 4, 3),
        (ProbeArch::bb_reference(), 3, 4),
        (ProbeArch::gs_reference(), 2, 5),
    ] {
        let err = probe_check(&arch, batch, s).map_err(|e| e.to_string())?;
        note(arch.label(), err);
    }
    check(
        worst.1 < FD_TOLERANCE,
        format!("worst relative error {:.2e} ({})", worst.1, worst.0),
    )
}

fn ntxent_suite() -> Outcome {
    let loss = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        ntxent_loss(&ContrastiveBatch::from_views(a, b).unwrap(), 0.1).unwrap()
    };
    let single = loss(&[vec![1.0, -2.0, 0.5]], &[vec![0.3, 0.3, 3.0]]);
    if single.abs() > 1e-12 {
        return Err(format!("N=1 gives {single}"));
    }
    let v = vec![0.7, -0.1, 2.0, 1.0];
    let same = loss(&[v.clone(), v.clone()], &[v.clone(), v]);
    if (same - 3f64.ln()).abs() > 1e-6 {
        return Err(format!("identical embeddings give {same}, want ln 3"));
    }
    let mut worst: f64 = 0.0;
    for s in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let n = rng.random_range(1..=4usize);
        let d = rng.random_range(2..9usize);
        let mut draw =
            || -> Vec<Vec<f64>> { (0..n).map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()).collect() };
        let (a, b) = (draw(), draw());
        let base = loss(&a, &b);
        worst = worst.max((base - brute_ntxent(&a, &b, 0.1)).abs());
        let scale = |x: &[Vec<f64>], k: f64| -> Vec<Vec<f64>> {
            x.iter().map(|r| r.iter().map(|v| v * k).collect()).collect()
        };
        worst = worst.max((loss(&scale(&a, 3.7), &scale(&b, 0.2)) - base).abs());
        let mut order: Vec<usize> = (0..n).collect();
        order.reverse();
        let pa: Vec<_> = order.iter().map(|&i| a[i].clone()).collect();
        let pb: Vec<_> = order.iter().map(|&i| b[i].clone()).collect();
        worst = worst.max((loss(&pa, &pb) - base).abs());
    }
    check(
        worst < 1e-6,
        format!("brute force, scaling and permutation agree to {worst:.1e} over 100 seeds"),
    )
}

fn grid_enumeration() -> Outcome {
    let configs = optimizer_grid(10, 3, 0);
    let archs = arch_grid();
    let big_two_layer = archs
        .iter()
        .any(|a| a.hidden_layers == 2 && a.hidden_dim == 8192);
    check(
        configs.len() == 160 && archs.len() == 28 && !big_two_layer,
        format!(
            "{} optimiser settings, {} architectures, 2×8192 present: {big_two_layer}",
            configs.len(),
            archs.len()
        ),
    )
}

fn taxonomy() -> Outcome {
    for r in Key::all() {
        let mut counts = [0usize; 5];
        for e in Key::all() {
            let c = classify_relation(r, e);
            counts[Relation::ALL.iter().position(|&x| x == c).unwrap()] += 1;
            for n in 0..12 {
                if classify_relation(r.transpose(n), e.transpose(n)) != c {
                    return Err(format!("{r}/{e} changes under +{n}"));
                }
            }
        }
        if counts != [1, 1, 1, 1, 20] {
            return Err(format!("reference {r}: counts {counts:?}"));
        }
    }
    Ok("576 pairs, [1,1,1,1,20] per reference, 12 transpositions".into())
}

fn labeled_tracks(per_key: usize, root: u64, prefix: &str) -> Vec<Track> {
    let mut out = Vec::new();
    for key in Key::all() {
        for j in 0..per_key {
            let s = seed::mix(root, &[key.class_index() as u64, j as u64]);
            out.push(Track {
                id: format!("{prefix}-{:02}-{j:03}", key.class_index()),
                key,
                audio: TrackAudio::Synth(SynthSpec::new(key, 7.0, s)),
            });
        }
    }
    out
}

fn end_to_end(encoder_out: &mut Option<FrozenEncoder>) -> Outcome {
    let err = |e: keyscope::Error| e.to_string();
    let t = Instant::now();
    let corpus = SynthCorpus::new(2000, 7.0, seed::derive(7, "acceptance.corpus"));
    let cfg = PretrainConfig {
        steps: 2000,
        warmup_steps: 100,
        learning_rate: 5e-4,
        mask_ratio: 0.9,
        temperature: 0.1,
        seed: seed::derive(7, "acceptance.pretrain"),
        ..PretrainConfig::default()
    };
    let enc_cfg = EncoderConfig::with_depth(2);
    if enc_cfg.embed_dim != 384 {
        return Err(format!("encoder width {}", enc_cfg.embed_dim));
    }
    let run = pretrain(&corpus, &cfg, &enc_cfg, &MelConfig::default()).map_err(err)?;
    let pretrain_s = t.elapsed().as_secs();
    let n = run.curve.len();
    let first = run.curve[..100].iter().map(|p| p.loss).sum::<f64>() / 100.0;
    let last = run.curve[n - 100..].iter().map(|p| p.loss).sum::<f64>() / 100.0;
    eprintln!("  pretrain: {n} steps in {pretrain_s}s, loss {first:.3} → {last:.3}");

    let t = Instant::now();
    let train_tracks = labeled_tracks(40, seed::derive(7, "acceptance.train"), "train");
    let test_tracks = labeled_tracks(10, seed::derive(7, "acceptance.test"), "test");
    let ids: Vec<String> = train_tracks.iter().map(|t| t.id.clone()).collect();
    let (_, held) = split_track_ids(&ids, 0.1, seed::derive(7, "acceptance.split"));
    let shifts: Vec<i32> = (-6..=6).collect();
    let all = expand_with_shifts(&train_tracks, &shifts, &run.encoder, 100_000).map_err(err)?;
    let (val, train): (Vec<LabeledFeature>, Vec<LabeledFeature>) =
        all.into_iter().partition(|f| held.contains(&f.track_id));
    let val: Vec<LabeledFeature> = val.into_iter().filter(|f| f.shift == 0).collect();
    let test = expand_with_shifts(&test_tracks, &[0], &run.encoder, 100_000).map_err(err)?;
    eprintln!(
        "  features: {} train / {} val / {} test windows in {}s",
        train.len(),
        val.len(),
        test.len(),
        t.elapsed().as_secs()
    );

    let tcfg = TrainConfig {
        epochs: 100,
        patience: 15,
        seed: seed::derive(7, "acceptance.probe"),
        ..TrainConfig::default()
    };
    let mut scores = Vec::new();
    for arch in [ProbeArch::bb_reference(), ProbeArch::linear()] {
        let t = Instant::now();
        let trained = train_probe(&train, &val, &arch, &tcfg).map_err(err)?;
        let (report, _) = evaluate_probe(&trained.probe, &test).map_err(err)?;
        eprintln!(
            "  {}: best epoch {}, test correct {:.2} weighted {:.2} ({}s)",
            arch.label(),
            trained.best_epoch,
            report.percent(Relation::Correct),
            report.weighted,
            t.elapsed().as_secs()
        );
        scores.push((report.percent(Relation::Correct), report.weighted));
    }
    *encoder_out = Some(run.encoder);
    let (mlp_c, mlp_w) = scores[0];
    let (lin_c, lin_w) = scores[1];
    check(
        mlp_c >= 90.0 && mlp_w >= mlp_c && mlp_w >= lin_w,
        format!(
            "MLP correct {mlp_c:.2} weighted {mlp_w:.2}; linear correct {lin_c:.2} weighted {lin_w:.2}; \
             loss {first:.3} → {last:.3}"
        ),
    )
}

fn masking_and_determinism() -> Outcome {
    let enc = random_frozen(2, 2);
    let w = synth_clip(&spec_with(Key::minor(9), 7.0, 3)).map_err(|e| e.to_string())?;
    let ts = enc.tokens(&w.slice_padded(0, 100_000)).map_err(|e| e.to_string())?;
    let full = enc.encode(&ts).map_err(|e| e.to_string())?;
    let masked = enc
        .encode(&mask_tokens(&ts, 0.0, 5).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    if full != masked {
        return Err("mask ratio 0 changes the embedding".into());
    }
    let small = EncoderConfig {
        embed_dim: 64,
        depth: 1,
        heads: 4,
        mlp_dim: 128,
        n_mels: 128,
        patch_frames: 2,
    };
    let cfg = PretrainConfig {
        steps: 25,
        batch_size: 16,
        clip_length: 50_000,
        projector_dim: 32,
        warmup_steps: 5,
        norm_clips: 16,
        seed: 11,
        ..PretrainConfig::default()
    };
    let corpus = SynthCorpus::new(40, 4.0, 3);
    let a = pretrain(&corpus, &cfg, &small, &MelConfig::default()).map_err(|e| e.to_string())?;
    let b = pretrain(&corpus, &cfg, &small, &MelConfig::default()).map_err(|e| e.to_string())?;
    let worst = a
        .curve
        .iter()
        .zip(&b.curve)
        .map(|(x, y)| (x.loss - y.loss).abs() / x.loss.abs().max(1e-12))
        .fold(0.0, f64::max);
    check(
        worst <= 1e-4 && a.curve.len() == 25,
        format!("bit-exact at mask 0; repeated 25-step curves differ by ≤ {worst:.1e} relative"),
    )
}

fn augmentation_linearity(encoder: Option<&FrozenEncoder>) -> Outcome {
    let fallback;
    let enc = match encoder {
        Some(e) => e,
        None => {
            fallback = random_frozen(2, 4);
            &fallback
        }
    };
    let clips: Vec<_> = (0..120u64)
        .map(|i| {
            let key = Key::from_class_index((i % 24) as usize).unwrap();
            synth_clip(&SynthSpec::new(key, 7.0, seed::mix(91, &[i])))
        })
        .collect::<keyscope::Result<_>>()
        .map_err(|e| e.to_string())?;
    let augs: Vec<Augmentation> = ["pitch:+2", "pitch:-2", "gain:+6", "gain:-6", "lowpass:2000"]
        .iter()
        .map(|s| Augmentation::parse(s).unwrap())
        .collect();
    let rows =
        aug_linearity_report(&clips, enc, &augs, 100_000, None, 5).map_err(|e| e.to_string())?;
    let mut ok = true;
    let mut parts = Vec::new();
    for (r, a) in rows.iter().zip(&augs) {
        ok &= r.train_mse < r.identity_train_mse && r.n_train + r.n_test >= 100;
        parts.push(format!("{a}: {:.3e} < {:.3e}", r.train_mse, r.identity_train_mse));
    }
    check(ok && rows.len() == augs.len(), parts.join("; "))
}

fn parser_round_trip() -> Outcome {
    for key in Key::all() {
        let back = parse_key(&key.to_string()).map_err(|e| e.to_string())?;
        if back != key {
            return Err(format!("{key} parses back as {back}"));
        }
    }
    for (sharp, flat) in [("C#", "Db"), ("D#", "Eb"), ("F#", "Gb"), ("G#", "Ab"), ("A#", "Bb")] {
        for mode in ["major", "minor"] {
            let a = parse_key(&format!("{sharp} {mode}")).map_err(|e| e.to_string())?;
            let b = parse_key(&format!("{flat} {mode}")).map_err(|e| e.to_string())?;
            if a != b {
                return Err(format!("{sharp} {mode} ≠ {flat} {mode}"));
            }
        }
    }
    Ok("24 keys round-trip, 10 enharmonic spellings agree".into())
}

fn report(n: usize, name: &str, started: Instant, outcome: Outcome, failures: &mut usize) {
    let secs = started.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => println!("PASS {n:>2} {name} ({secs:.1}s): {detail}"),
        Err(detail) => {
            *failures += 1;
            println!("FAIL {n:>2} {name} ({secs:.1}s): {detail}");
        }
    }
}

fn main() {
    // `cargo test -- --list` and filtered runs probe test binaries; ignore them
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut failures = 0;
    macro_rules! run {
        ($n:expr, $name:expr, $body:expr) => {{
            let t = Instant::now();
            report($n, $name, t, $body, &mut failures);
        }};
    }
    run!(1, "table weighted scores", table_weighted_scores());
    run!(2, "parameter counts", parameter_counts());
    run!(3, "gradient checks", gradient_checks());
    run!(4, "nt-xent analytic suite", ntxent_suite());
    run!(5, "grid enumeration", grid_enumeration());
    run!(6, "relationship taxonomy", taxonomy());
    let mut encoder = None;
    run!(7, "end-to-end synthetic benchmark", end_to_end(&mut encoder));
    run!(8, "masking identity and determinism", masking_and_determinism());
    run!(9, "augmentation linearity", augmentation_linearity(encoder.as_ref()));
    run!(10, "key parser round trip", parser_round_trip());
    println!("acceptance: {} passed, {failures} failed", 10 - failures);
}
