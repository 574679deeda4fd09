//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use swinunetr::inference::SlidingWindowPlan;
use swinunetr::model::{ModelConfig, SwinUnetr};
use swinunetr::tensor::{Tape, Tensor};
use swinunetr::train::{evaluate_dice, TrainConfig, Trainer};
use swinunetr::verify::{self, CheckResult, Faults, MODEL_TOL_F32, MODEL_TOL_F64};
use swinunetr::volume::{write_synthetic_dataset, CaseEntry, SynthConfig};

struct Outcome {
    id: usize,
    title: &'static str,
    passed: bool,
    detail: String,
}

fn from_checks(id: usize, title: &'static str, checks: &[CheckResult], elapsed: Duration) -> Outcome {
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.to_string()).collect();
    let worst = checks.iter().filter(|c| c.value.is_finite()).map(|c| c.value).fold(0.0f64, f64::max);
    let detail = if failed.is_empty() {
        format!("{} checks, largest value {worst:.3e}, {:.1}s", checks.len(), elapsed.as_secs_f64())
    } else {
        format!("{} of {} failed: {}", failed.len(), checks.len(), failed.join("; "))
    };
    Outcome { id, title, passed: failed.is_empty(), detail }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed())
}

fn params() -> Outcome {
    let c = verify::param_count_check();
    Outcome { id: 1, title: "parameter count", passed: c.passed, detail: c.to_string() }
}

fn random_input(shape: [usize; 3], seed: u64) -> Tensor<f32> {
    let n: usize = 4 * shape.iter().product::<usize>();
    let mut state = seed;
    let data = (0..n)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
        })
        .collect();
    Tensor::new(vec![1, 4, shape[0], shape[1], shape[2]], data).unwrap()
}

fn shapes() -> Outcome {
    let mut problems = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = SwinUnetr::<f32>::new(ModelConfig::default(), &mut rng).unwrap();
    let x = random_input([128; 3], 1);
    let (levels, logits, full) = {
        let t = Instant::now();
        let tape = Tape::<f32>::no_grad();
        let st = model.encode(&tape.constant(x)).unwrap();
        let levels: Vec<Vec<usize>> = st.levels.iter().map(|v| v.shape().to_vec()).collect();
        let logits = model.decode(st).unwrap().shape().to_vec();
        (levels, logits, t.elapsed())
    };
    drop(model);
    let want: Vec<Vec<usize>> = [(4, 128), (48, 64), (96, 32), (192, 16), (384, 8), (768, 4)].iter().map(|&(c, s)| vec![1, c, s, s, s]).collect();
    if levels != want {
        problems.push(format!("levels {levels:?}"));
    }
    if logits != [1, 3, 128, 128, 128] {
        problems.push(format!("logits {logits:?}"));
    }
    if full > Duration::from_secs(120) {
        problems.push(format!("default forward took {:.1}s", full.as_secs_f64()));
    }

    let tiny_cfg = ModelConfig::tiny();
    let tiny = SwinUnetr::<f32>::new(tiny_cfg.clone(), &mut rng).unwrap();
    let (y, small) = timed(|| tiny.predict(&random_input(tiny_cfg.input_size, 2)).unwrap());
    let s = tiny_cfg.input_size;
    if y.shape() != [1, 3, s[0], s[1], s[2]] {
        problems.push(format!("tiny logits {:?}", y.shape()));
    }
    if small > Duration::from_secs(5) {
        problems.push(format!("tiny forward took {:.2}s", small.as_secs_f64()));
    }
    Outcome {
        id: 2,
        title: "shape contract",
        passed: problems.is_empty(),
        detail: if problems.is_empty() {
            format!("4x128^3 -> 3x128^3, levels exact; forward {:.1}s default, {:.2}s tiny", full.as_secs_f64(), small.as_secs_f64())
        } else {
            problems.join("; ")
        },
    }
}

fn gradients() -> Outcome {
    let (checks, elapsed) = timed(|| {
        let mut c = verify::op_gradchecks();
        c.push(verify::model_gradcheck::<f32>(MODEL_TOL_F32));
        c.push(verify::model_gradcheck::<f64>(MODEL_TOL_F64));
        c
    });
    let mut o = from_checks(5, "gradient suite", &checks, elapsed);
    let models: Vec<String> = checks.iter().filter(|c| c.name.starts_with("tiny_model")).map(|c| format!("{} {:.2e}", c.name, c.value)).collect();
    o.detail = format!("{}; {}", o.detail, models.join(", "));
    if elapsed > Duration::from_secs(600) {
        o.passed = false;
        o.detail = format!("runtime {:.0}s over 600s; {}", elapsed.as_secs_f64(), o.detail);
    }
    o
}

fn toy_run(manifest: &swinunetr::volume::DatasetManifest) -> (Vec<f64>, Vec<f32>, [f64; 3]) {
    let cfg = TrainConfig { steps: Some(200), seed: 3, ..TrainConfig::toy() };
    let plan: SlidingWindowPlan = cfg.val_plan.clone();
    let mut trainer = Trainer::new(ModelConfig::tiny(), cfg, manifest.clone(), None).unwrap();
    for _ in 0..200 {
        trainer.step().unwrap();
    }
    let cases: Vec<&CaseEntry> = manifest.cases.iter().collect();
    let dice = evaluate_dice(trainer.model(), manifest, &cases, &plan).unwrap().to_array();
    let weights = trainer.model().params().iter().flat_map(|p| p.value().data().to_vec()).collect();
    (trainer.losses().to_vec(), weights, dice)
}

fn toy() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_synthetic_dataset(&SynthConfig::default(), dir.path()).unwrap();
    let ((losses, weights, dice), elapsed) = timed(|| toy_run(&manifest));
    let (again, weights2, dice2) = toy_run(&manifest);
    let mut problems = Vec::new();
    if dice.iter().any(|&d| d < 0.9) {
        problems.push(format!("training Dice {dice:?}"));
    }
    let same = losses.iter().zip(&again).all(|(a, b)| a.to_bits() == b.to_bits())
        && weights.iter().zip(&weights2).all(|(a, b)| a.to_bits() == b.to_bits())
        && dice == dice2;
    if !same {
        problems.push("second run with the same seed differs".into());
    }
    let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = losses[180..].iter().sum::<f64>() / 20.0;
    if tail >= head {
        problems.push(format!("loss did not fall: {head:.4} -> {tail:.4}"));
    }
    if elapsed > Duration::from_secs(1800) {
        problems.push(format!("run took {:.0}s", elapsed.as_secs_f64()));
    }
    Outcome {
        id: 11,
        title: "toy end-to-end",
        passed: problems.is_empty(),
        detail: if problems.is_empty() {
            format!("Dice ET {:.4} WT {:.4} TC {:.4}; loss {head:.4} -> {tail:.4}; bit-identical rerun; {:.0}s per run", dice[0], dice[1], dice[2], elapsed.as_secs_f64())
        } else {
            problems.join("; ")
        },
    }
}

#[test]
fn acceptance_criteria() {
    let mut out = Vec::new();
    let mut report = |o: Outcome| {
        println!("criterion {:>2} {} {}: {}", o.id, if o.passed { "PASS" } else { "FAIL" }, o.title, o.detail);
        out.push(o);
    };

    report(params());
    report(shapes());
    let (c, t) = timed(|| verify::wmsa_oracle(20));
    report(from_checks(3, "window attention vs dense attention", &c, t));
    let (c, t) = timed(|| verify::swmsa_oracle(&Faults::default()));
    report(from_checks(4, "shifted windows vs region gather", &c, t));
    report(gradients());
    let (c, t) = timed(|| verify::dice_checks().into_iter().filter(|c| c.name.starts_with("soft_dice")).collect::<Vec<_>>());
    report(from_checks(6, "soft Dice hand values", &c, t));
    let (c, t) = timed(verify::roundtrip_checks);
    report(from_checks(7, "roundtrips", &c, t));
    let (c, t) = timed(verify::sliding_window_checks);
    report(from_checks(8, "sliding-window identities", &c, t));
    let (c, t) = timed(verify::ensemble_checks);
    report(from_checks(9, "ensemble identities", &c, t));
    let (c, t) = timed(verify::schedule_checks);
    report(from_checks(10, "learning-rate schedule", &c, t));
    report(toy());
    let (c, t) = timed(|| {
        let mut c = verify::hausdorff_checks();
        c.extend(verify::dice_checks().into_iter().filter(|c| c.name.starts_with("dice_score")));
        c
    });
    report(from_checks(12, "Hausdorff and Dice score oracles", &c, t));

    let failed: Vec<usize> = out.iter().filter(|o| !o.passed).map(|o| o.id).collect();
    println!("{} of {} criteria passed", out.len() - failed.len(), out.len());
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
