//! Acceptance criteria, one test per criterion. Each prints a single
//! `PASS`/`FAIL` line (visible with `--nocapture`) before asserting.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segkit::dataset::{save_manifest, synth_generate, ClassId, Manifest, SynthConfig};
use segkit::features::{FeatureStore, ToyEncoder};
use segkit::grid::{assign_dataset, build_grid, nearest_neighbour_assign, PointGrid};
use segkit::head::{train, MaskCandidate, ToyHead, TrainConfig, TrainLog};
use segkit::losses::{cross_entropy, dice_loss, focal_loss, grad_check};
use segkit::mask::BinaryMask;
use segkit::metrics::{iou_acc, per_class_aggregate, AccuracyDef, InstanceEval};
use segkit::pipeline::{everything_mode, run_everything_mode, EverythingOutput, FeatureSource, RunConfig};
use segkit::postprocess::{box_nms, clean_regions, run_pipeline, FilterConfig};

fn report(id: u32, name: &str, ok: bool, detail: &str) {
    println!("[{}] criterion {id}: {name} ({detail})", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {id} failed: {detail}");
}

// ---------------------------------------------------------------- 1 and 2

fn brute_nearest(p: (f64, f64), grid: &PointGrid) -> usize {
    let d = |q: (f64, f64)| (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2);
    let mut best = 0;
    for (i, &q) in grid.points().iter().enumerate() {
        if d(q) < d(grid.points()[best]) {
            best = i;
        }
    }
    best
}

/// A third uniform reals, a third integer pixels, a third on cell
/// boundaries (where two or four grid points tie).
fn priors(n: usize, side: u32, per_side: u32, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spacing = side as f64 / per_side as f64;
    (0..n)
        .map(|i| match i % 3 {
            0 => (rng.random_range(0.0..side as f64), rng.random_range(0.0..side as f64)),
            1 => (rng.random_range(0..side) as f64, rng.random_range(0..side) as f64),
            _ => {
                let bx = rng.random_range(1..per_side) as f64 * spacing;
                let y = if rng.random::<bool>() {
                    rng.random_range(1..per_side) as f64 * spacing
                } else {
                    rng.random_range(0..side) as f64
                };
                if rng.random::<bool>() {
                    (bx, y)
                } else {
                    (y, bx)
                }
            }
        })
        .collect()
}

#[test]
fn criterion_1_nearest_neighbour_matches_brute_force() {
    let mut mismatches = 0;
    let mut ties = 0;
    let mut elapsed = Duration::ZERO;
    for (per_side, seed) in [(32u32, 1u64), (64, 2)] {
        let grid = build_grid(per_side, 1024, 1024).unwrap();
        let ps = priors(1000, 1024, per_side, seed);
        let t = Instant::now();
        let got: Vec<usize> = ps.iter().map(|&p| nearest_neighbour_assign(p, &grid).unwrap()).collect();
        elapsed += t.elapsed();
        for (&p, &g) in ps.iter().zip(&got) {
            let b = brute_nearest(p, &grid);
            mismatches += (g != b) as usize;
            let d = |q: (f64, f64)| (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2);
            let best_d = d(grid.points()[b]);
            ties += (grid.points().iter().filter(|&&q| d(q) == best_d).count() > 1) as usize;
        }
    }
    let ok = mismatches == 0 && ties > 0 && elapsed < Duration::from_secs(1);
    report(
        1,
        "nearest-neighbour assignment equals brute force",
        ok,
        &format!("2000 priors, {mismatches} mismatches, {ties} tie cases, {elapsed:?}"),
    );
}

#[test]
fn criterion_2_assignment_distance_bound() {
    let mut worst_excess = f64::NEG_INFINITY;
    for (per_side, seed) in [(32u32, 1u64), (64, 2)] {
        let grid = build_grid(per_side, 1024, 1024).unwrap();
        let bound = grid.half_cell_diagonal();
        if per_side == 32 {
            assert!((bound - 2f64.sqrt() * 16.0).abs() < 1e-12);
        }
        for p in priors(1000, 1024, per_side, seed) {
            let q = grid.points()[nearest_neighbour_assign(p, &grid).unwrap()];
            let d = ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt();
            worst_excess = worst_excess.max(d - bound);
        }
    }
    report(
        2,
        "assigned distance within half the cell diagonal",
        worst_excess <= 0.0,
        &format!("max distance minus bound = {worst_excess:.4}"),
    );
}

// ---------------------------------------------------------------- 3 and 4

#[test]
fn criterion_3_loss_gradients_pass_finite_differences() {
    let (mut dice_max, mut focal_max, mut ce_max) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=64);
        let probs: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        let gt: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
        dice_max = dice_max.max(grad_check(|p: &[f64]| dice_loss(p, &gt).unwrap(), &probs, 1e-5).unwrap());
        focal_max = focal_max.max(
            grad_check(|p: &[f64]| focal_loss(p, &gt, 0.25, 2.0).unwrap(), &probs, 1e-5).unwrap(),
        );
        let k = rng.random_range(1..=54);
        let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-5.0..5.0)).collect();
        let label = rng.random_range(0..k);
        ce_max = ce_max.max(grad_check(|z: &[f64]| cross_entropy(z, label).unwrap(), &logits, 1e-5).unwrap());
    }
    let flipped = |z: &[f64]| {
        let (v, g) = cross_entropy(z, 0).unwrap();
        (v, g.into_iter().map(|x| -x).collect::<Vec<_>>())
    };
    let control = grad_check(flipped, &[0.0, 0.0], 1e-5).unwrap();
    let flipped_focal = |p: &[f64]| {
        let (v, g) = focal_loss(p, &[true], 0.25, 2.0).unwrap();
        (v, g.into_iter().map(|x| -x).collect::<Vec<_>>())
    };
    let control_focal = grad_check(flipped_focal, &[0.1], 1e-5).unwrap();
    let ok = dice_max < 1e-6 && focal_max < 1e-6 && ce_max < 1e-6 && control >= 0.5 && control_focal >= 0.5;
    report(
        3,
        "analytic gradients match central differences",
        ok,
        &format!(
            "100 seeds: dice {dice_max:.2e}, focal {focal_max:.2e}, ce {ce_max:.2e}; sign-flip controls {control:.2}, {control_focal:.2}"
        ),
    );
}

#[test]
fn criterion_4_loss_hand_values() {
    let dice = dice_loss(&[1.0, 1.0, 0.0], &[true, false, true]).unwrap().0;
    let focal = focal_loss(&[0.5], &[true], 0.25, 2.0).unwrap().0;
    let ce = cross_entropy(&[0.0; 54], 0).unwrap().0;
    let ok = (dice - 0.5).abs() < 1e-6 && (focal - 0.043322).abs() < 1e-6 && (ce - 3.98898).abs() < 1e-5;
    report(
        4,
        "loss hand cases",
        ok,
        &format!("dice {dice:.7}, focal {focal:.7}, ce {ce:.6}"),
    );
}

// ---------------------------------------------------------------- 5

const SIDE: u32 = 64;

fn rect(x0: u32, y0: u32, x1: u32, y1: u32) -> BinaryMask {
    BinaryMask::from_fn(SIDE, SIDE, |x, y| (x0..x1).contains(&x) && (y0..y1).contains(&y))
}

fn or(a: &BinaryMask, b: &BinaryMask) -> BinaryMask {
    BinaryMask::from_vec(
        SIDE,
        SIDE,
        a.as_slice().iter().zip(b.as_slice()).map(|(&p, &q)| p || q).collect(),
    )
}

fn minus(a: &BinaryMask, b: &BinaryMask) -> BinaryMask {
    BinaryMask::from_vec(
        SIDE,
        SIDE,
        a.as_slice().iter().zip(b.as_slice()).map(|(&p, &q)| p && !q).collect(),
    )
}

fn cand(idx: usize, pred: f64, mask: BinaryMask) -> MaskCandidate {
    MaskCandidate {
        mask,
        logits: vec![],
        predicted_iou: pred,
        prompt_point: (idx as f64, 0.0),
        candidate_index: idx,
        label_logits: vec![],
    }
}

/// Ten candidates and the survivors traced by hand through threshold 0.3,
/// min area 150 and box cutoff 0.3:
///
/// * 2 (0.25) fails the threshold; 3 (0.30) passes it exactly.
/// * 4 is empty; 5 is a lone 100 px island and is emptied by cleanup.
/// * 6 loses its 25 px island; 7 gets its 36 px hole filled.
/// * NMS order by score: 0, 1, 6, 8, 7, 9, 3. 1 overlaps 0 at IoU 324/476;
///   8 overlaps 0 at 200/600 = 0.333; 3 overlaps 9 at 256/544.
fn constructed_case() -> (Vec<MaskCandidate>, Vec<(usize, BinaryMask)>) {
    let blob6 = rect(0, 30, 20, 50);
    let ring7 = minus(&rect(22, 44, 38, 60), &rect(27, 49, 33, 55));
    let cands = vec![
        cand(0, 0.95, rect(0, 0, 20, 20)),
        cand(1, 0.90, rect(2, 2, 22, 22)),
        cand(2, 0.25, rect(40, 40, 60, 60)),
        cand(3, 0.30, rect(40, 40, 60, 60)),
        cand(4, 0.80, BinaryMask::new(SIDE, SIDE)),
        cand(5, 0.70, rect(25, 0, 35, 10)),
        cand(6, 0.85, or(&blob6, &rect(44, 22, 49, 27))),
        cand(7, 0.60, ring7),
        cand(8, 0.50, rect(10, 0, 30, 20)),
        cand(9, 0.40, rect(44, 44, 64, 64)),
    ];
    let expected = vec![
        (0, rect(0, 0, 20, 20)),
        (6, blob6),
        (7, rect(22, 44, 38, 60)),
        (9, rect(44, 44, 64, 64)),
    ];
    (cands, expected)
}

fn random_mask(rng: &mut ChaCha8Rng, w: u32, h: u32) -> BinaryMask {
    // blobs of varying size plus salt noise, so islands and holes occur
    let mut m = BinaryMask::new(w, h);
    for _ in 0..rng.random_range(0..6) {
        let (x0, y0) = (rng.random_range(0..w), rng.random_range(0..h));
        let (bw, bh) = (rng.random_range(1..=w / 2), rng.random_range(1..=h / 2));
        let v = rng.random::<bool>() || m.is_empty();
        for y in y0..(y0 + bh).min(h) {
            for x in x0..(x0 + bw).min(w) {
                m.set(x, y, v);
            }
        }
    }
    let density = rng.random_range(0.0..0.2);
    for i in 0..m.len() {
        if rng.random_bool(density) {
            let s = m.as_mut_slice();
            s[i] = !s[i];
        }
    }
    m
}

#[test]
fn criterion_5_postprocess_oracle() {
    let (cands, expected) = constructed_case();
    let out = run_pipeline(cands, &FilterConfig::default());
    let got: Vec<(usize, BinaryMask)> = out.iter().map(|c| (c.candidate_index, c.mask.clone())).collect();
    let oracle_ok = got == expected;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut idem_fail = 0;
    for _ in 0..1000 {
        let m = random_mask(&mut rng, 32, 32);
        let a = rng.random_range(0..80);
        let once = clean_regions(&m, a);
        idem_fail += (clean_regions(&once, a) != once) as usize;
    }

    let mut worst_pair = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..30);
        let set: Vec<MaskCandidate> = (0..n)
            .map(|i| {
                let x0 = rng.random_range(0..50);
                let y0 = rng.random_range(0..50);
                let m = rect(x0, y0, x0 + rng.random_range(1..14), y0 + rng.random_range(1..14));
                cand(i, rng.random_range(0.0..1.0), m)
            })
            .collect();
        let kept = box_nms(set, 0.3);
        for i in 0..kept.len() {
            for j in i + 1..kept.len() {
                let a = kept[i].mask.bbox().unwrap();
                let b = kept[j].mask.bbox().unwrap();
                worst_pair = worst_pair.max(a.iou(&b));
            }
        }
    }
    let ok = oracle_ok && idem_fail == 0 && worst_pair < 0.3;
    report(
        5,
        "post-processing oracle, idempotent cleanup, NMS separation",
        ok,
        &format!(
            "survivors {:?} (oracle match: {oracle_ok}), idempotence failures {idem_fail}/1000, max kept box IoU {worst_pair:.3}",
            got.iter().map(|g| g.0).collect::<Vec<_>>()
        ),
    );
}

// ---------------------------------------------------------------- 6

fn count_oracle(p: &BinaryMask, g: &BinaryMask) -> (f64, f64) {
    let (mut i, mut u, mut gn) = (0u32, 0u32, 0u32);
    for y in 0..p.height() {
        for x in 0..p.width() {
            let (a, b) = (p.get(x, y), g.get(x, y));
            if a && b {
                i += 1;
            }
            if a || b {
                u += 1;
            }
            if b {
                gn += 1;
            }
        }
    }
    let iou = if u == 0 { 0.0 } else { i as f64 / u as f64 };
    let acc = if gn == 0 { 0.0 } else { i as f64 / gn as f64 };
    (iou, acc)
}

#[test]
fn criterion_6_metrics_oracle() {
    let mut mismatches = 0usize;
    let mut acc_below_iou = 0usize;
    let mut pairs = 0usize;
    let mut check = |p: &BinaryMask, g: &BinaryMask| {
        let got = iou_acc(p, g, AccuracyDef::ForegroundRecall);
        mismatches += (got != count_oracle(p, g)) as usize;
        acc_below_iou += (got.1 < got.0) as usize;
        pairs += 1;
    };

    // every pair of subsets of a 3x3 block inside the 6x6 canvas
    let block = |bits: u32| BinaryMask::from_fn(6, 6, |x, y| x < 3 && y < 3 && bits >> (y * 3 + x) & 1 == 1);
    let masks: Vec<BinaryMask> = (0..512).map(block).collect();
    for p in &masks {
        for g in &masks {
            check(p, g);
        }
    }
    // every pair of axis-aligned rectangles on the 6x6 canvas
    let mut rects = Vec::new();
    for x0 in 0..6 {
        for x1 in x0 + 1..=6 {
            for y0 in 0..6 {
                for y1 in y0 + 1..=6 {
                    rects.push(BinaryMask::from_fn(6, 6, |x, y| (x0..x1).contains(&x) && (y0..y1).contains(&y)));
                }
            }
        }
    }
    for p in &rects {
        for g in &rects {
            check(p, g);
        }
    }
    let exhaustive = masks.len().pow(2) + rects.len().pow(2);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..1000 {
        let p = random_mask(&mut rng, 64, 64);
        let g = random_mask(&mut rng, 64, 64);
        check(&p, &g);
    }

    let table = segkit::dataset::ClassTable::toy(8).unwrap();
    let mut evals: Vec<InstanceEval> = (0..200)
        .map(|i| InstanceEval {
            instance_id: format!("e{i}"),
            class: ClassId(rng.random_range(0..8)),
            iou: rng.random_range(0.0..1.0),
            acc: rng.random_range(0.0..1.0),
            predicted_label: Some(ClassId(rng.random_range(0..8))),
            matched: rng.random::<bool>(),
        })
        .collect();
    let reference = per_class_aggregate(&evals, &table);
    let mut perm_fail = 0;
    for _ in 0..100 {
        evals.shuffle(&mut rng);
        perm_fail += (per_class_aggregate(&evals, &table) != reference) as usize;
    }

    let ok = mismatches == 0 && acc_below_iou == 0 && perm_fail == 0;
    report(
        6,
        "metrics equal pixel counting, acc >= iou, aggregation order-free",
        ok,
        &format!(
            "{exhaustive} exhaustive 6x6 pairs + 1000 random 64x64 pairs, {mismatches} mismatches, {acc_below_iou} acc<iou, {perm_fail}/100 permutation differences"
        ),
    );
}

// ---------------------------------------------------------------- 7 and 8

const TRAIN_SEED: u64 = 11;
const EVAL_SEED: u64 = 12;
const HEAD_SEED: u64 = 3;

fn synth(images: usize, seed: u64, prefix: &str) -> Manifest {
    synth_generate(&SynthConfig {
        images,
        seed,
        id_prefix: prefix.to_string(),
        ..SynthConfig::default()
    })
    .unwrap()
}

struct Run {
    trained: EverythingOutput,
    log: TrainLog,
    elapsed: Duration,
}

/// Synthesis, assignment, 200 epochs of training and an everything-mode
/// evaluation with the default settings, through files as the CLI does it.
fn full_run(dir: &Path) -> Run {
    let t = Instant::now();
    let train_set = synth(64, TRAIN_SEED, "train");
    let eval_set = synth(16, EVAL_SEED, "eval");
    save_manifest(&train_set, &dir.join("train/manifest.json")).unwrap();
    save_manifest(&eval_set, &dir.join("eval/manifest.json")).unwrap();

    let enc = ToyEncoder { stride: 1 };
    let store = FeatureStore::precompute(&train_set, &enc).unwrap();
    let assignments = assign_dataset(&train_set, &store, 32).unwrap();
    let init = ToyHead::random(ToyEncoder::CHANNELS, train_set.class_table.len(), HEAD_SEED);
    let cfg = TrainConfig {
        seed: TRAIN_SEED,
        ..TrainConfig::default()
    };
    let (head, log) = train(&init, &train_set, &assignments, &store, &cfg).unwrap();
    head.save(&dir.join("head.ckpt")).unwrap();
    log.write_csv(&dir.join("train_log.csv")).unwrap();

    let run = RunConfig {
        manifest: dir.join("eval/manifest.json"),
        features: FeatureSource::Toy { stride: 1 },
        checkpoint: dir.join("head.ckpt"),
        out_dir: dir.join("predict"),
        grid_per_side: 32,
        filter: FilterConfig::default(),
        train: cfg,
        seed: TRAIN_SEED,
        canvas: None,
        accuracy: AccuracyDef::ForegroundRecall,
    };
    let trained = run_everything_mode(&run).unwrap();
    Run {
        trained,
        log,
        elapsed: t.elapsed(),
    }
}

fn first_run() -> &'static (tempfile::TempDir, Run) {
    static RUN: OnceLock<(tempfile::TempDir, Run)> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let run = full_run(dir.path());
        (dir, run)
    })
}

fn cls_accuracy(out: &EverythingOutput) -> f64 {
    out.report.mean_cls_acc
}

#[test]
fn criterion_7_end_to_end_desk_scale() {
    let (_, run) = first_run();
    let eval_set = synth(16, EVAL_SEED, "eval");
    let random = ToyHead::random(ToyEncoder::CHANNELS, eval_set.class_table.len(), HEAD_SEED);
    let baseline = everything_mode(
        &random,
        &eval_set,
        &ToyEncoder { stride: 1 },
        32,
        &FilterConfig::default(),
        AccuracyDef::ForegroundRecall,
    )
    .unwrap();

    let miou = run.trained.report.miou;
    let cls = cls_accuracy(&run.trained);
    let base_miou = baseline.report.miou;
    let reduced = run
        .trained
        .images
        .iter()
        .filter(|i| i.survivors.len() < i.pre_filter)
        .count();
    let first = run.log.first().unwrap().mean_total;
    let last = run.log.last().unwrap().mean_total;
    println!("{}", segkit::metrics::render_report(&run.trained.report, Some(&baseline.report)));
    println!("{}", run.trained.counts.render_text());
    let ok = miou >= 0.60
        && cls >= 0.50
        && base_miou <= 0.15
        && run.elapsed < Duration::from_secs(300)
        && reduced == run.trained.images.len()
        && last < 0.5 * first;
    report(
        7,
        "desk-scale training beats the random head",
        ok,
        &format!(
            "mIoU {miou:.3}, cls acc {cls:.3}, random-head mIoU {base_miou:.3}, loss {first:.4} -> {last:.4}, {reduced}/{} images reduced, run {:.1?}",
            run.trained.images.len(),
            run.elapsed
        ),
    );
}

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn criterion_8_determinism() {
    let (dir_a, _) = first_run();
    let dir_b = tempfile::tempdir().unwrap();
    full_run(dir_b.path());
    let a = read_tree(dir_a.path());
    let b = read_tree(dir_b.path());
    let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
    let ok = a.len() == b.len() && differing.is_empty() && a.contains_key("train_log.csv") && a.contains_key("predict/eval.json");
    report(
        8,
        "train + everything mode are byte-reproducible",
        ok,
        &format!("{} files compared, {} differ", a.len(), differing.len()),
    );
}
