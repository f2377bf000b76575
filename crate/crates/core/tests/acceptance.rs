//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails. Run with `cargo test -p g3d-core --test acceptance`.

mod common;

use std::time::{Duration, Instant};

use g3d_core::attention::{ffn_value, mhca_value, mhsa_value, FfnParams};
use g3d_core::autodiff::Tape;
use g3d_core::checks::{gradcheck_suite, iou_oracle, random_box_pair, GradScope};
use g3d_core::d2m::{
    coarse_decouple_value, d2m_forward_value, inverted_attention_value, D2MConfig, D2MParams,
    SimilarityMode,
};
use g3d_core::eval::{
    evaluate, render_json, render_scenario_table, render_text, render_uniqueness_table, Bucket,
    EvalSample, Occlusion,
};
use g3d_core::geometry::{iou_3d, Box3D};
use g3d_core::lexical::{
    kmeans_1d_k2, lca_pipeline, mask_caption, partition_certainty, CertaintyPartition, MaskPolicy,
    SplitOutcome,
};
use g3d_core::losses::{
    aggregate, focal_loss_value, laplacian_depth_loss, multibin_loss_value, FocalParams,
    LossComponents, LossWeights, OrientationBins,
};
use g3d_core::toy::{run_toy, ToyConfig};
use g3d_core::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_BUDGET: Duration = Duration::from_secs(60);
const ATTENTION_TOL: f64 = 1e-10;
const ATTENTION_CASES: u64 = 100;
const HAND_TOL: f64 = 1e-12;
const IOU_PAIRS: usize = 200;
const IOU_SAMPLES: usize = 1_000_000;
const IOU_INVARIANCE_TOL: f64 = 1e-9;
const IOU_BUDGET: Duration = Duration::from_secs(180);
const KMEANS_TRIALS: usize = 1000;
const KMEANS_MAX_N: usize = 16;
const LOSS_TOL: f64 = 1e-9;
const STATIONARITY_TOL: f64 = 1e-6;
const TOY_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const TOY_MIN_GAP: f64 = 0.2;
const TOY_MAX_UNTRAINED_GAP: f64 = 0.1;
const TOY_LOSS_RATIO: f64 = 0.5;
const TOY_BUDGET: Duration = Duration::from_secs(600);

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn gradient_integrity() -> Outcome {
    let t0 = Instant::now();
    let report = gradcheck_suite(GradScope::All, 0).map_err(|e| e.to_string())?;
    let elapsed = t0.elapsed();
    let worst = report
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .ok_or("empty report")?;
    let failed: Vec<&str> = report
        .iter()
        .filter(|c| !c.passed())
        .map(|c| c.op.as_str())
        .collect();
    ensure(failed.is_empty(), format!("failing ops: {failed:?}"))?;
    ensure(elapsed < GRAD_BUDGET, format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} checks, worst {:.2e} ({}), {:.1?}",
        report.len(),
        worst.max_rel_error,
        worst.op,
        elapsed
    ))
}

fn attention_oracle() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..ATTENTION_CASES {
        let (q, kv, p) = common::attention_case(seed);
        let e1 = mhca_value(&q, &kv, &p)
            .map_err(|e| e.to_string())?
            .max_abs_diff(&common::naive_mhca(&q, &kv, &p))
            .map_err(|e| e.to_string())?;
        let e2 = mhsa_value(&kv, &p)
            .map_err(|e| e.to_string())?
            .max_abs_diff(&common::naive_mhca(&kv, &kv, &p))
            .map_err(|e| e.to_string())?;
        worst = worst.max(e1).max(e2);
    }
    ensure(worst < ATTENTION_TOL, format!("max deviation {worst:.2e}"))?;
    Ok(format!(
        "{ATTENTION_CASES} cases, max deviation {worst:.2e}"
    ))
}

fn d2m_symmetry() -> Outcome {
    let err = |e: g3d_core::Error| e.to_string();
    for mode in [SimilarityMode::ScaledDot, SimilarityMode::Cosine] {
        for seed in 0..10 {
            let cfg = D2MConfig {
                queries: 3,
                width: 8,
                heads: 2,
                ffn_hidden: 12,
                similarity: mode,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = D2MParams::init(&cfg, &mut rng).map_err(err)?;
            let text = Tensor::uniform(vec![6, 8], 1.0, &mut rng);
            let (a2, a3) = d2m_forward_value(&text, &p).map_err(err)?;
            let (b2, b3) = d2m_forward_value(&text, &p.swap_branches()).map_err(err)?;
            ensure(
                a2 == b3 && a3 == b2,
                format!("swap not exact, {mode:?} seed {seed}"),
            )?;

            let p1 = D2MParams::init(&D2MConfig { queries: 1, ..cfg }, &mut rng).map_err(err)?;
            let c = coarse_decouple_value(&text, &p1).map_err(err)?;
            let (t2, t3) = d2m_forward_value(&text, &p1).map_err(err)?;
            let closed = |q: &Tensor<f64>, f: &FfnParams<Tensor<f64>>| {
                q.add(&ffn_value(q, f).map_err(err)?).map_err(err)
            };
            let d = t2
                .max_abs_diff(&closed(&c.coarse_2d, &p1.refine_ffn_2d)?)
                .map_err(err)?
                .max(
                    t3.max_abs_diff(&closed(&c.coarse_3d, &p1.refine_ffn_3d)?)
                        .map_err(err)?,
                );
            ensure(d < HAND_TOL, format!("m=1 deviates by {d:.2e}"))?;
        }
    }
    // q = [[1, 2], [0, 1]], k = [[1, 0], [1, 1]], scaled by 1/√2
    let q = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).map_err(err)?;
    let k = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0]]).map_err(err)?;
    let r2 = 2f64.sqrt();
    let softmax2 =
        |a: f64, b: f64| vec![a.exp() / (a.exp() + b.exp()), b.exp() / (a.exp() + b.exp())];
    let hand = Tensor::from_rows(&[
        softmax2(1.0 - 1.0 / r2, 1.0 - 3.0 / r2),
        softmax2(1.0, 1.0 - 1.0 / r2),
    ])
    .map_err(err)?;
    let w = inverted_attention_value(&q, &k, SimilarityMode::ScaledDot).map_err(err)?;
    let d = w.max_abs_diff(&hand).map_err(err)?;
    ensure(d < HAND_TOL, format!("2x2 case deviates by {d:.2e}"))?;
    Ok(format!(
        "swap exact on 20 cases, m=1 and 2x2 within {HAND_TOL:e} (2x2 {d:.1e})"
    ))
}

fn iou_criterion() -> Outcome {
    let t0 = Instant::now();
    let r = iou_oracle(IOU_PAIRS, IOU_SAMPLES, 1).map_err(|e| e.to_string())?;
    let mc_time = t0.elapsed();
    ensure(
        r.failures() == 0,
        format!("{} of {IOU_PAIRS} pairs outside tolerance", r.failures()),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for i in 0..2000 {
        let (a, b) = random_box_pair(&mut rng, i);
        let angle = rng.gen_range(-4.0..4.0);
        let t = [
            rng.gen_range(-30.0..30.0),
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-30.0..30.0),
        ];
        let ab = iou_3d(&a, &b);
        worst = worst
            .max((ab - iou_3d(&b, &a)).abs())
            .max((iou_3d(&a, &a) - 1.0).abs())
            .max((ab - iou_3d(&a.rigid_transform(angle, t), &b.rigid_transform(angle, t))).abs());
    }
    ensure(
        worst < IOU_INVARIANCE_TOL,
        format!("invariance error {worst:.2e}"),
    )?;
    let elapsed = t0.elapsed();
    ensure(elapsed < IOU_BUDGET, format!("took {elapsed:?}"))?;
    Ok(format!(
        "{IOU_PAIRS} pairs, max |exact - MC| {:.4}, invariance error {worst:.1e}, {:.1?}",
        r.max_deviation(),
        mc_time
    ))
}

fn kmeans_criterion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..KMEANS_TRIALS {
        let n = rng.gen_range(2..=KMEANS_MAX_N);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = kmeans_1d_k2(&scores).map_err(|e| e.to_string())?;
        let (_, best) = common::brute_force_split(&scores);
        ensure(
            common::split_mask(&p.high, &p.low) == best,
            format!("trial {trial}: split differs from exhaustive optimum on {scores:?}"),
        )?;
        let lo = p
            .low
            .iter()
            .map(|&i| scores[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let hi = p
            .high
            .iter()
            .map(|&i| scores[i])
            .fold(f64::INFINITY, f64::min);
        ensure(hi >= lo, format!("trial {trial}: clusters interleave"))?;
    }
    Ok(format!(
        "{KMEANS_TRIALS} trials with n <= {KMEANS_MAX_N} match the exhaustive split"
    ))
}

fn loss_closed_forms() -> Outcome {
    let err = |e: g3d_core::Error| e.to_string();
    let probs = Tensor::from_rows(&[vec![0.5, 0.5]]).map_err(err)?;
    let focal = focal_loss_value(&probs, &[0], FocalParams::default()).map_err(err)?;
    let focal_err = (focal - 0.25 * 0.25 * std::f64::consts::LN_2).abs();
    ensure(
        focal_err < LOSS_TOL,
        format!("focal off by {focal_err:.2e}"),
    )?;

    let bins = OrientationBins::new(12).map_err(err)?;
    let angles: Vec<f64> = (0..12).map(|i| bins.center(i)).collect();
    let zeros = Tensor::zeros(vec![12, 12]);
    let mb = multibin_loss_value(&zeros, &zeros, &angles, bins).map_err(err)?;
    let mb_err = (mb - 12f64.ln()).abs();
    ensure(mb_err < LOSS_TOL, format!("multibin off by {mb_err:.2e}"))?;

    let e = std::f64::consts::E;
    let tape = Tape::new();
    let depth = tape.constant(Tensor::scalar(30.0 + e));
    let target = tape.constant(Tensor::scalar(30.0));
    let sigma = tape.param(Tensor::scalar(std::f64::consts::SQRT_2 * e));
    let loss = laplacian_depth_loss(&tape, depth, sigma, target).map_err(err)?;
    let g = tape
        .backward(loss)
        .map_err(err)?
        .get(sigma)
        .item()
        .map_err(err)?;
    ensure(
        g.abs() < STATIONARITY_TOL,
        format!("dL/dsigma = {g:.2e} at sqrt(2)e"),
    )?;

    let ones = LossComponents {
        class: 1.0,
        lrtb: 1.0,
        giou: 1.0,
        xy3d: 1.0,
        size3d: 1.0,
        orien: 1.0,
        depth: 1.0,
        dmap: 1.0,
    };
    let agg = aggregate(ones, LossWeights::default()).map_err(err)?;
    ensure(agg.l2d == 19.0, format!("l2d = {}", agg.l2d))?;
    Ok(format!(
        "focal {focal_err:.1e}, multibin {mb_err:.1e}, laplacian grad {g:.1e}, l2d = {}",
        agg.l2d
    ))
}

fn eval_criterion() -> Outcome {
    let err = |e: g3d_core::Error| e.to_string();
    let samples = common::eval_fixture(false);
    let t = evaluate(&samples).map_err(err)?;
    let json = render_json(&t);
    let cells = (
        json["overall"]["acc_025"].clone(),
        json["overall"]["acc_050"].clone(),
    );
    ensure(
        cells == ("66.67".into(), "33.33".into()),
        format!("overall cells {cells:?}"),
    )?;

    let edge = EvalSample {
        sample_id: "edge".into(),
        image_id: "img".into(),
        category: "car".into(),
        object_id: None,
        gt: Box3D::new([0.0, 1.0, 20.0], [5.0, 2.0, 1.0], 0.0).map_err(err)?,
        pred: Box3D::new([3.0, 1.0, 20.0], [5.0, 2.0, 1.0], 0.0).map_err(err)?,
        depth_gt: 20.0,
        occlusion: Occlusion::None,
        truncation: 0.0,
    };
    let iou = iou_3d(&edge.gt, &edge.pred);
    let te = evaluate(&[edge]).map_err(err)?;
    ensure(
        iou == 0.25 && te.get(Bucket::Overall).hits_025 == 1,
        format!("boundary IoU {iou} not counted"),
    )?;

    let u = render_uniqueness_table(&t);
    let s = render_scenario_table(&t);
    let head = |x: &str| -> Vec<String> {
        x.lines()
            .next()
            .unwrap_or("")
            .split('|')
            .map(|g| g.trim().to_owned())
            .collect()
    };
    ensure(
        head(&u) == ["Unique", "Multiple", "Overall"],
        format!("header {:?}", head(&u)),
    )?;
    ensure(
        head(&s) == ["Near/Easy", "Medium/Moderate", "Far/Hard"],
        format!("header {:?}", head(&s)),
    )?;
    ensure(
        u.lines()
            .nth(1)
            .map_or(0, |l| l.matches("Acc@0.25").count())
            == 3,
        "missing threshold sub-headers",
    )?;

    let reference = (render_text(&t), json.to_string());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut shuffled = samples.clone();
    for _ in 0..10 {
        shuffled.shuffle(&mut rng);
        let ts = evaluate(&shuffled).map_err(err)?;
        ensure(
            (render_text(&ts), render_json(&ts).to_string()) == reference,
            "shuffled input changed the output",
        )?;
    }
    Ok("66.67/33.33, boundary counted, headers match, shuffle-stable".into())
}

fn lca_criterion() -> Outcome {
    let err = |e: g3d_core::Error| e.to_string();
    let records = common::lca_fixture();
    let expected = common::lca_expected_high();
    for rec in &records {
        let p = partition_certainty(rec).map_err(err)?;
        let high: Vec<&str> = p.high.iter().map(|&i| rec.tokens[i].as_str()).collect();
        ensure(
            high == expected[&rec.sample_id],
            format!("{}: high words {high:?}", rec.sample_id),
        )?;
    }
    let (masked, _) = lca_pipeline(&records, &MaskPolicy::default(), 0, 0).map_err(err)?;
    ensure(
        masked[0].tokens == ["the", "red", "***", "near", "left"],
        format!("fixture record masked as {:?}", masked[0].tokens),
    )?;

    let off = MaskPolicy {
        probability: 0.0,
        enabled: true,
    };
    let (same, _) = lca_pipeline(&records, &off, 9, 9).map_err(err)?;
    ensure(
        same.iter().zip(&records).all(|(o, r)| o.tokens == r.tokens),
        "p = 0 changed a caption",
    )?;

    for rec in &records {
        let p = partition_certainty(rec).map_err(err)?;
        let once = mask_caption(&rec.tokens, &p).map_err(err)?;
        ensure(
            mask_caption(&once, &p).map_err(err)? == once,
            "masking not idempotent",
        )?;
    }
    let all_high = CertaintyPartition {
        scores: vec![0.9, 0.8, 0.95],
        high: vec![0, 1, 2],
        low: vec![],
        centroids: None,
        outcome: SplitOutcome::Split,
    };
    let toks: Vec<String> = ["a", "red", "car"].map(String::from).to_vec();
    let guarded = mask_caption(&toks, &all_high).map_err(err)?;
    ensure(guarded.iter().any(|t| t != "***"), "every word masked")?;

    let half = MaskPolicy {
        probability: 0.5,
        enabled: true,
    };
    let run = || -> Result<String, String> {
        let (o, a) = lca_pipeline(&records, &half, 42, 3).map_err(err)?;
        Ok(format!(
            "{}{}",
            serde_json::to_string(&o).map_err(|e| e.to_string())?,
            serde_json::to_string(&a).map_err(|e| e.to_string())?
        ))
    };
    ensure(run()? == run()?, "fixed seed gave different outputs")?;
    Ok(format!(
        "{} fixture records as constructed, guards hold",
        records.len()
    ))
}

fn toy_decoupling() -> Outcome {
    let err = |e: g3d_core::Error| e.to_string();
    let t0 = Instant::now();
    let cfg = ToyConfig::default();
    let (mut trained, mut untrained) = (Vec::new(), Vec::new());
    let mut worst_ratio: f64 = 0.0;
    for &seed in &TOY_SEEDS {
        let (run, _) = run_toy(&cfg, seed).map_err(err)?;
        trained.push(run.trained.gap());
        untrained.push(run.untrained.gap());
        worst_ratio = worst_ratio.max(run.loss_ratio());
    }
    let elapsed = t0.elapsed();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (gap, null_gap) = (mean(&trained), mean(&untrained));
    let detail = format!(
        "trained gap {gap:.3}, untrained gap {null_gap:.3}, worst loss ratio {worst_ratio:.3}, {:.0?}",
        elapsed
    );
    ensure(
        gap >= TOY_MIN_GAP,
        format!("{detail}: gap below {TOY_MIN_GAP}"),
    )?;
    ensure(
        null_gap.abs() < TOY_MAX_UNTRAINED_GAP,
        format!("{detail}: untrained gap too large"),
    )?;
    ensure(
        worst_ratio < TOY_LOSS_RATIO,
        format!("{detail}: loss did not halve"),
    )?;
    ensure(elapsed < TOY_BUDGET, format!("{detail}: over budget"))?;
    Ok(detail)
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        ("gradient integrity", gradient_integrity),
        ("attention oracle", attention_oracle),
        ("d2m symmetry", d2m_symmetry),
        ("3d iou oracle", iou_criterion),
        ("k-means exactness", kmeans_criterion),
        ("loss closed forms", loss_closed_forms),
        ("eval harness", eval_criterion),
        ("lca pipeline", lca_criterion),
        ("toy decoupling", toy_decoupling),
    ];
    let only: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        match run() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
