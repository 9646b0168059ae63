//! End-to-end acceptance suite.
//!
//! Runs every criterion, prints one `PASS`/`FAIL` line per criterion and
//! exits non-zero if any failed. Pass criterion numbers as arguments to run
//! a subset, e.g. `cargo test --test acceptance -- 1 3`.

use std::collections::VecDeque;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use umamba2::inference::{swap_laterality_channels, tta_predict, ProbMap, SlidingWindowConfig, TtaConfig};
use umamba2::metrics::{boundary, dice, hd95, mean_foreground_dice, percentile_linear, SurfaceDistance};
use umamba2::network::{ArchConfig, Model};
use umamba2::phantom::{generate_dataset, swap_laterality_labels, PhantomConfig};
use umamba2::postprocess::{compute_class_thresholds, connected_components, filter_small_components, Connectivity};
use umamba2::prompts::{sample_clicks, ClickPrompt};
use umamba2::schema::LabelSchema;
use umamba2::selftest::{network_loss_gradcheck, op_gradchecks};
use umamba2::ssd::{
    benchmark_ssd, random_inputs, ssd_chunked, ssd_quadratic, ssd_recurrent, BenchSpec, SsdConfig, SsdForm,
};
use umamba2::tensor::Tensor;
use umamba2::training::{axes_subsets, mirror_augment, smooth_target_row, train, EpochMetrics, Task, TrainConfig};
use umamba2::volume::{Image, LabelVolume, Volume};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 1

fn ssd_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_q, mut worst_c) = (0.0f64, 0.0f64);
    let mut non_divisor = 0;
    for _ in 0..100 {
        let t = rng.random_range(1..=64);
        let n = rng.random_range(1..=8);
        let p = rng.random_range(1..=8);
        let q = rng.random_range(1..=t.max(2));
        non_divisor += usize::from(t % q != 0);
        let inp = random_inputs(rng.random_range(1..=2), t, n, p, &mut rng);
        let r = ssd_recurrent(&inp).map_err(|e| e.to_string())?;
        worst_q = worst_q.max(ssd_quadratic(&inp).map_err(|e| e.to_string())?.max_abs_diff(&r));
        worst_c = worst_c.max(ssd_chunked(&inp, q).map_err(|e| e.to_string())?.max_abs_diff(&r));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(
        worst_q < 1e-10 && worst_c < 1e-8 && secs < 30.0 && non_divisor > 0,
        format!(
            "max |rec-quad| {worst_q:.1e}, max |rec-chunk| {worst_c:.1e}, {non_divisor}/100 ragged chunkings, {secs:.2}s"
        ),
    )
}

// ---------------------------------------------------------------- 2

fn gradients() -> Outcome {
    let start = Instant::now();
    let ops = op_gradchecks(1e-4);
    let failed: Vec<String> = ops.iter().filter(|c| !c.passed).map(|c| format!("{} ({})", c.name, c.detail)).collect();
    let net = network_loss_gradcheck(1e-3);
    let secs = start.elapsed().as_secs_f64();
    ensure(
        failed.is_empty() && net.passed && secs < 300.0,
        format!("{} ops at 1e-4, failures {failed:?}; network loss at 1e-3: {}; {secs:.1}s", ops.len(), net.detail),
    )
}

// ---------------------------------------------------------------- 3

fn time_ratio(form: SsdForm, t: usize, repeats: usize) -> Result<f64, String> {
    let spec = BenchSpec {
        lengths: vec![t, 2 * t],
        forms: vec![form],
        state_dim: 16,
        head_dim: 16,
        chunk_len: 64,
        repeats,
        seed: 3,
    };
    let r = benchmark_ssd(&spec).map_err(|e| e.to_string())?;
    Ok(r[1].seconds / r[0].seconds)
}

fn ssd_scaling() -> Outcome {
    // the chunked form is cheap, so it is timed at longer sequences where
    // per-call overheads vanish; the quadratic form needs T² memory
    let chunked = time_ratio(SsdForm::Chunked, 16384, 7)?;
    let quadratic = time_ratio(SsdForm::Quadratic, 2048, 3)?;
    ensure(
        (1.6..=2.6).contains(&chunked) && quadratic >= 3.4,
        format!("chunked T 16384→32768 ratio {chunked:.2}, quadratic T 2048→4096 ratio {quadratic:.2}"),
    )
}

// ---------------------------------------------------------------- 4

fn mirror_machinery() -> Outcome {
    let schema = LabelSchema::dental();
    let perm = schema.laterality_permutation();
    let perm_ok = (0..perm.len()).all(|k| perm[perm[k]] == k) && {
        let mut s = perm.clone();
        s.sort();
        s == (0..perm.len()).collect::<Vec<_>>()
    };
    let cases = generate_dataset(&PhantomConfig::default(), &schema, 3).map_err(|e| e.to_string())?;
    let mut involutions = 0;
    for (img, lab) in &cases {
        for axes in axes_subsets(&[0, 1, 2]) {
            let (i1, l1) = mirror_augment(img, lab, &axes, &schema).map_err(|e| e.to_string())?;
            let (i2, l2) = mirror_augment(&i1, &l1, &axes, &schema).map_err(|e| e.to_string())?;
            if (&i2, &l2) != (img, lab) {
                return Err(format!("mirror along {axes:?} is not an involution"));
            }
            let relabel = swap_laterality_labels(&swap_laterality_labels(lab, &schema), &schema);
            if &relabel != lab {
                return Err("label swap is not an involution".into());
            }
            involutions += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let probs = ProbMap {
        num_classes: 12,
        dims: [3, 4, 5],
        spacing_mm: [1.0; 3],
        data: (0..12 * 60).map(|_| rng.random()).collect(),
    };
    let twice = swap_laterality_channels(&swap_laterality_channels(&probs, &schema).unwrap(), &schema).unwrap();
    let clicks_ok = (0..20).all(|_| {
        let c = ClickPrompt {
            x: rng.random_range(0..7),
            y: rng.random_range(0..8),
            z: rng.random_range(0..9),
            class_id: rng.random_range(0..12),
        };
        axes_subsets(&[0, 1, 2]).iter().all(|a| c.mirrored(a, [7, 8, 9], &schema).mirrored(a, [7, 8, 9], &schema) == c)
    });
    let (n2, n3) = (axes_subsets(&[0, 1]).len(), axes_subsets(&[0, 1, 2]).len());
    ensure(
        perm_ok && twice == probs && clicks_ok && n2 == 3 && n3 == 7,
        format!(
            "{involutions} volume involutions exact, permutation {}, channel swap involution {}, click mirror involution {clicks_ok}, subsets {{0,1}}→{n2}, {{0,1,2}}→{n3}",
            perm_ok,
            twice == probs
        ),
    )
}

// ---------------------------------------------------------------- 5

fn label_smoothing() -> Outcome {
    let schema = LabelSchema::dental();
    let mut worst = 0.0f64;
    let mut split_ok = true;
    for k in 0..schema.num_classes() {
        let row = smooth_target_row(k, &schema, Some(0.9));
        worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        let related = schema.related(k);
        let want_self = if related.is_empty() { 1.0 } else { 0.9 };
        split_ok &= (row[k] - want_self).abs() < 1e-12;
        for &r in related {
            split_ok &= (row[r] - 0.1 / related.len() as f64).abs() < 1e-12;
        }
        let touched = 1 + related.len();
        split_ok &= row.iter().filter(|&&v| v != 0.0).count() == touched;
    }
    ensure(
        worst < 1e-12 && split_ok,
        format!("max |row sum − 1| {worst:.1e}; 0.9 own / 0.1 shared split holds: {split_ok}"),
    )
}

// ---------------------------------------------------------------- 6

fn postprocessing(run: &OverfitRun) -> Outcome {
    let schema = LabelSchema::dental();
    let gts: Vec<LabelVolume> = run.cases.iter().map(|(_, l)| l.clone()).collect();
    let table = compute_class_thresholds(&gts, &schema, Connectivity::TwentySix);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut injected = 0;
    for gt in &gts {
        let mut noisy = gt.clone();
        for _ in 0..300 {
            let c = rng.random_range(1..schema.num_classes());
            if table.thresholds[c] <= 1 {
                continue;
            }
            let p = [0, 1, 2].map(|a| rng.random_range(1..gt.dims[a] - 1));
            let clear = (0..27).all(|o| noisy.at([p[0] + o / 9 - 1, p[1] + (o / 3) % 3 - 1, p[2] + o % 3 - 1]) == 0);
            if clear {
                let i = noisy.index(p[0], p[1], p[2]);
                noisy.data[i] = c as u8;
                injected += 1;
            }
        }
        let cleaned = filter_small_components(&noisy, &table).map_err(|e| e.to_string())?;
        for c in 1..schema.num_classes() as u8 {
            if dice(&cleaned, gt, c).map_err(|e| e.to_string())? != 1.0 {
                return Err(format!("class {c} not restored after speckle filtering"));
            }
        }
    }
    let k = schema.num_classes();
    let (mut before, mut after) = (0.0, 0.0);
    let (mut hits, mut false_pos) = (0, 0);
    let mut class_loss = vec![0.0; k];
    for (pred, gt) in run.task1_preds.iter().zip(&gts) {
        let filtered = filter_small_components(pred, &table).map_err(|e| e.to_string())?;
        for i in 0..pred.data.len() {
            if filtered.data[i] != pred.data[i] {
                if pred.data[i] == gt.data[i] {
                    hits += 1;
                } else {
                    false_pos += 1;
                }
            }
        }
        for c in 1..k as u8 {
            let d0 = dice(pred, gt, c).map_err(|e| e.to_string())?;
            let d1 = dice(&filtered, gt, c).map_err(|e| e.to_string())?;
            class_loss[c as usize] += d0 - d1;
        }
        before += mean_foreground_dice(pred, gt, k).map_err(|e| e.to_string())?;
        after += mean_foreground_dice(&filtered, gt, k).map_err(|e| e.to_string())?;
    }
    let n = gts.len() as f64;
    let drops: Vec<String> = (1..k)
        .filter(|&c| class_loss[c] > 0.0)
        .map(|c| format!("{c}:-{:.3}@thr{}", class_loss[c] / n, table.thresholds[c]))
        .collect();
    ensure(
        injected > 0 && after >= before,
        format!(
            "{injected} speckles removed exactly; on trained predictions Dice {:.4} → {:.4}; relabelled {hits} correct and \
             {false_pos} wrong voxels; mean per-class Dice change [{}]",
            before / n,
            after / n,
            drops.join(" ")
        ),
    )
}

// ---------------------------------------------------------------- 7

fn flood_fill(mask: &Volume<bool>, conn: Connectivity) -> Vec<u32> {
    let offs = conn.offsets();
    let mut lab = vec![0u32; mask.len()];
    let mut next = 0;
    for start in 0..mask.len() {
        if !mask.data[start] || lab[start] != 0 {
            continue;
        }
        next += 1;
        lab[start] = next;
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            let c = mask.coord(v);
            for o in &offs {
                let n = [0, 1, 2].map(|a| c[a] as isize + o[a]);
                if (0..3).any(|a| n[a] < 0 || n[a] >= mask.dims[a] as isize) {
                    continue;
                }
                let ni = mask.index(n[0] as usize, n[1] as usize, n[2] as usize);
                if mask.data[ni] && lab[ni] == 0 {
                    lab[ni] = next;
                    queue.push_back(ni);
                }
            }
        }
    }
    lab
}

fn random_mask(dims: [usize; 3], density: f64, rng: &mut ChaCha8Rng) -> Volume<bool> {
    let mut m = Volume::filled(dims, false);
    for v in &mut m.data {
        *v = rng.random::<f64>() < density;
    }
    m
}

fn hd95_oracle(a: &Volume<bool>, b: &Volume<bool>) -> f64 {
    let pts =
        |m: &Volume<bool>| -> Vec<[usize; 3]> { (0..m.len()).filter(|&i| m.data[i]).map(|i| m.coord(i)).collect() };
    let (pa, pb) = (pts(&boundary(a)), pts(&boundary(b)));
    let dist = |p: &[usize; 3], set: &[[usize; 3]]| {
        set.iter()
            .map(|q| (0..3).map(|d| (p[d] as f64 - q[d] as f64).powi(2)).sum::<f64>().sqrt())
            .fold(f64::INFINITY, f64::min)
    };
    let mut all: Vec<f64> = pa.iter().map(|p| dist(p, &pb)).chain(pb.iter().map(|p| dist(p, &pa))).collect();
    all.sort_by(f64::total_cmp);
    percentile_linear(&all, 95.0)
}

fn component_and_distance_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..200 {
        let mask = random_mask([16, 16, 16], rng.random_range(0.05..0.6), &mut rng);
        for conn in [Connectivity::Six, Connectivity::Eighteen, Connectivity::TwentySix] {
            if connected_components(&mask, conn).labels.data != flood_fill(&mask, conn) {
                return Err(format!("mask {case}: partition differs from flood fill at {conn:?}"));
            }
        }
    }
    let mut pairs = 0;
    while pairs < 50 {
        let dims = [rng.random_range(3..9), rng.random_range(3..9), rng.random_range(3..9)];
        let a = random_mask(dims, rng.random_range(0.1..0.7), &mut rng);
        let b = random_mask(dims, rng.random_range(0.1..0.7), &mut rng);
        if !a.data.contains(&true) || !b.data.contains(&true) {
            continue;
        }
        let got = hd95(&a, &b, [1.0; 3]).map_err(|e| e.to_string())?;
        if got != SurfaceDistance::Mm(hd95_oracle(&a, &b)) {
            return Err(format!("pair {pairs}: hd95 {got:?} differs from the oracle"));
        }
        pairs += 1;
    }
    Ok("200 masks × 3 connectivities identical to flood fill; 50 HD95 pairs exact".into())
}

// ---------------------------------------------------------------- 8

const EPOCHS: usize = 100;
const WINDOW: usize = 10;

struct OverfitRun {
    cases: Vec<(Image, LabelVolume)>,
    task1_preds: Vec<LabelVolume>,
    task1_dice: f64,
    task1_nerve: f64,
    task2_nerve: f64,
    task1_history: Vec<EpochMetrics>,
    task2_history: Vec<EpochMetrics>,
    seconds: f64,
}

fn windows_decrease(h: &[EpochMetrics]) -> bool {
    let means: Vec<f64> = h.chunks(WINDOW).map(|w| w.iter().map(|m| m.loss).sum::<f64>() / w.len() as f64).collect();
    means.windows(2).all(|p| p[1] < p[0])
}

fn nerve_clicks(gt: &LabelVolume, schema: &LabelSchema, seed: u64) -> Vec<ClickPrompt> {
    let present: Vec<usize> = schema.nerve_classes().into_iter().filter(|&c| gt.data.contains(&(c as u8))).collect();
    sample_clicks(gt, &present, 1, seed).expect("classes are present")
}

fn fit_and_predict(
    task: Task,
    cases: &[(Image, LabelVolume)],
    schema: &LabelSchema,
) -> umamba2::Result<(Vec<EpochMetrics>, Vec<LabelVolume>)> {
    let arch = ArchConfig { click_branch: task == Task::Interactive, ..ArchConfig::default() };
    let mut model = Model::<f32>::build(&arch)?;
    let cfg = TrainConfig { epochs: EPOCHS, task, seed: 0, ..TrainConfig::default() };
    let history = train(&mut model, cases, schema, &cfg, |m| {
        if m.epoch % 10 == 9 {
            eprintln!(
                "  {task:?} epoch {:>3}: loss {:.4}, patch dice {:.3}",
                m.epoch + 1,
                m.loss,
                m.mean_dice.unwrap_or(0.0)
            );
        }
        Ok(())
    })?;
    let mut preds = Vec::new();
    for (i, (img, gt)) in cases.iter().enumerate() {
        let clicks = if task == Task::Interactive { nerve_clicks(gt, schema, 100 + i as u64) } else { Vec::new() };
        let (probs, _) =
            tta_predict(&model, img, &clicks, schema, &SlidingWindowConfig::default(), &TtaConfig::default())?;
        preds.push(probs.argmax());
    }
    Ok((history, preds))
}

fn nerve_dice(preds: &[LabelVolume], cases: &[(Image, LabelVolume)], schema: &LabelSchema) -> f64 {
    let nerves = schema.nerve_classes();
    let total: f64 = preds
        .iter()
        .zip(cases)
        .map(|(p, (_, g))| nerves.iter().map(|&c| dice(p, g, c as u8).unwrap()).sum::<f64>() / nerves.len() as f64)
        .sum();
    total / preds.len() as f64
}

fn overfit_run() -> Result<OverfitRun, String> {
    let start = Instant::now();
    let schema = LabelSchema::dental();
    let cases = generate_dataset(&PhantomConfig::default(), &schema, 8).map_err(|e| e.to_string())?;
    let (task1_history, task1_preds) =
        fit_and_predict(Task::Segmentation, &cases, &schema).map_err(|e| e.to_string())?;
    let (task2_history, task2_preds) =
        fit_and_predict(Task::Interactive, &cases, &schema).map_err(|e| e.to_string())?;
    let task1_dice =
        task1_preds.iter().zip(&cases).map(|(p, (_, g))| mean_foreground_dice(p, g, 12).unwrap()).sum::<f64>()
            / cases.len() as f64;
    Ok(OverfitRun {
        task1_nerve: nerve_dice(&task1_preds, &cases, &schema),
        task2_nerve: nerve_dice(&task2_preds, &cases, &schema),
        task1_dice,
        task1_preds,
        task1_history,
        task2_history,
        cases,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn overfit(run: &OverfitRun) -> Outcome {
    let mono1 = windows_decrease(&run.task1_history);
    let mono2 = windows_decrease(&run.task2_history);
    let last = run.task1_history.last().and_then(|m| m.mean_dice).unwrap_or(0.0);
    ensure(
        run.task1_dice >= 0.80 && mono1 && mono2 && run.task2_nerve >= run.task1_nerve && run.seconds < 1800.0,
        format!(
            "{EPOCHS} epochs on 8 phantoms: mean foreground Dice {:.4} (last-epoch patch Dice {last:.4}); \
             {WINDOW}-epoch loss windows decreasing: task 1 {mono1}, task 2 {mono2}; \
             nerve Dice task 2 {:.4} vs task 1 {:.4}; {:.0}s",
            run.task1_dice, run.task2_nerve, run.task1_nerve, run.seconds
        ),
    )
}

// ---------------------------------------------------------------- 9

fn click_contracts() -> Outcome {
    let arch = |click_branch| ArchConfig {
        num_stages: 2,
        base_channels: 4,
        channel_cap: 8,
        num_classes: 5,
        patch_extents: [8, 8, 8],
        encoder_blocks: 1,
        ssd: SsdConfig { state_dim: 4, num_heads: 2, chunk_len: 4, conv_width: 2, expansion: 1, gated: true },
        click_branch,
        fusion_heads: 2,
        ..ArchConfig::default()
    };
    let with = Model::<f64>::build(&arch(true)).map_err(|e| e.to_string())?;
    let without = Model::<f64>::build(&arch(false)).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::randn(vec![1, 1, 8, 8, 8], 1.0, &mut rng);
    let plain = without.logits(&x, None).map_err(|e| e.to_string())?;
    let bypass = with.logits(&x, Some(&[])).map_err(|e| e.to_string())? == plain;
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let clicks: Vec<ClickPrompt> = (0..rng.random_range(2..7))
            .map(|_| ClickPrompt {
                x: rng.random_range(0..8),
                y: rng.random_range(0..8),
                z: rng.random_range(0..8),
                class_id: rng.random_range(0..5),
            })
            .collect();
        let base = with.logits(&x, Some(&clicks)).map_err(|e| e.to_string())?;
        let mut shuffled = clicks.clone();
        shuffled.reverse();
        shuffled.rotate_left(1);
        worst = worst.max(base.max_abs_diff(&with.logits(&x, Some(&shuffled)).map_err(|e| e.to_string())?));
    }
    ensure(
        bypass && worst < 1e-12,
        format!("zero-click output bit-identical to unfused: {bypass}; max permutation deviation {worst:.1e}"),
    )
}

// ---------------------------------------------------------------- 10

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_umamba2"))
        .arg("--threads")
        .arg("1")
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

const SMALL_CONFIG: &str = r#"{
  "arch": {
    "num_stages": 2, "base_channels": 4, "channel_cap": 8, "patch_extents": [16, 16, 16], "encoder_blocks": 1,
    "ssd": { "state_dim": 4, "num_heads": 2, "chunk_len": 8, "conv_width": 2, "expansion": 1, "gated": true },
    "fusion_heads": 2
  },
  "train": { "epochs": 2, "iterations_per_epoch": 2 },
  "pretrain": { "epochs": 1, "iterations_per_epoch": 2 }
}"#;

/// Run every seeded subcommand in `dir`; outputs land in fixed file names.
fn pipeline(dir: &Path) -> Result<(), String> {
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    std::fs::write(dir.join("config.json"), SMALL_CONFIG).map_err(|e| e.to_string())?;
    cli(&["gen-phantoms", "--out", &p("data"), "--count", "2", "--seed", "5"])?;
    cli(&[
        "pretrain",
        "--data",
        &p("data"),
        "--out",
        &p("pre"),
        "--config",
        &p("config.json"),
        "--metrics",
        &p("pre.jsonl"),
    ])?;
    cli(&[
        "train",
        "--data",
        &p("data"),
        "--out",
        &p("seg"),
        "--config",
        &p("config.json"),
        "--init",
        &p("pre"),
        "--metrics",
        &p("seg.jsonl"),
        "--seed",
        "3",
    ])?;
    cli(&[
        "train",
        "--data",
        &p("data"),
        "--out",
        &p("int"),
        "--config",
        &p("config.json"),
        "--task",
        "interactive",
        "--metrics",
        &p("int.jsonl"),
    ])?;
    let image = p("data/case_000_image.json");
    cli(&["infer", "--model", &p("seg"), "--image", &image, "--out", &p("pred"), "--config", &p("config.json")])?;
    std::fs::write(dir.join("clicks.json"), r#"[{"x": 10, "y": 12, "z": 8, "class_id": 7}]"#)
        .map_err(|e| e.to_string())?;
    cli(&[
        "infer",
        "--model",
        &p("int"),
        "--image",
        &image,
        "--out",
        &p("pred_int"),
        "--clicks",
        &p("clicks.json"),
        "--config",
        &p("config.json"),
    ])?;
    cli(&["compute-thresholds", "--data", &p("data"), "--out", &p("thresholds.json")])?;
    cli(&["postprocess", "--pred", &p("pred"), "--thresholds", &p("thresholds.json"), "--out", &p("post")])?;
    cli(&["evaluate", "--pred", &p("post"), "--gt", &p("data/case_000_labels.json"), "--out", &p("eval.json")])?;
    Ok(())
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    pipeline(a.path())?;
    pipeline(b.path())?;
    let (fa, fb) = (files(a.path()), files(b.path()));
    let differing: Vec<&str> = fa.iter().zip(&fb).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
    let names_match = fa.iter().map(|f| &f.0).eq(fb.iter().map(|f| &f.0));
    ensure(
        names_match && differing.is_empty(),
        format!(
            "gen-phantoms, pretrain, train (both tasks), infer (with and without clicks), compute-thresholds, \
             postprocess and evaluate repeated: {} files, differing {differing:?}",
            fa.len()
        ),
    )
}

// ----------------------------------------------------------------

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let selected = |id: usize| wanted.is_empty() || wanted.contains(&id);
    let mut overfit_cache: Option<Result<OverfitRun, String>> = None;
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();

    let criteria: [(usize, &str); 10] = [
        (1, "SSD three-form equivalence"),
        (2, "gradient correctness"),
        (3, "SSD scaling"),
        (4, "mirror machinery"),
        (5, "label smoothing"),
        (6, "post-processing round trip"),
        (7, "connected components / HD95 oracles"),
        (8, "end-to-end overfit"),
        (9, "click-branch contracts"),
        (10, "determinism"),
    ];
    for (id, title) in criteria {
        if !selected(id) {
            continue;
        }
        eprintln!("criterion {id}: {title} ...");
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| match id {
            1 => ssd_equivalence(),
            2 => gradients(),
            3 => ssd_scaling(),
            4 => mirror_machinery(),
            5 => label_smoothing(),
            6 | 8 => {
                let run = overfit_cache.get_or_insert_with(overfit_run);
                match run {
                    Ok(run) if id == 6 => postprocessing(run),
                    Ok(run) => overfit(run),
                    Err(e) => Err(format!("training run failed: {e}")),
                }
            }
            7 => component_and_distance_oracles(),
            9 => click_contracts(),
            _ => determinism(),
        }))
        .unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let line = format!(
            "criterion {id:>2} {} {title}: {} [{:.1}s]",
            if outcome.is_ok() { "PASS" } else { "FAIL" },
            match &outcome {
                Ok(d) | Err(d) => d,
            },
            start.elapsed().as_secs_f64()
        );
        println!("{line}");
        results.push((id, title, outcome));
    }

    let failed = results.iter().filter(|r| r.2.is_err()).count();
    println!("acceptance: {} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
