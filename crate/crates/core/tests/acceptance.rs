//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Criteria that are pure properties (1-5, the configuration error of 8 and
//! all of 9) make the binary exit non-zero when they fail. The outcomes of
//! the training runs (6, 7 and the accuracy spread of 8) are reported but
//! only enforced with `OBJSLOT_STRICT=1`.
//!
//! `OBJSLOT_SKIP_TRAINING=1` skips the training runs entirely.

use std::process::ExitCode;
use std::time::Instant;

use itertools::Itertools;
use objslot::checks;
use objslot::dataset::{make_split, Manifest, Split};
use objslot::losses::{correspondence, object_distillation_loss, temporal_reasoning_loss, total_loss, BatchContext, ClipTerms, LossConfig};
use objslot::model::{Model, ModelConfig};
use objslot::object_time::DeltaMode;
use objslot::segmentation::{evaluate_clip, hungarian_match, MaskSet};
use objslot::slot_attention::{SlotAttention, SlotConfig};
use objslot::train::data::generate_split;
use objslot::train::{EvalReport, Sample, StepLog, TrainConfig, Trainer};
use objslot::{Error, Graph, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Line {
    id: &'static str,
    pass: bool,
    enforced: bool,
    detail: String,
}

fn line(id: &'static str, pass: bool, enforced: bool, detail: impl Into<String>) -> Line {
    let l = Line {
        id,
        pass,
        enforced,
        detail: detail.into(),
    };
    println!(
        "criterion {:<3} {}  {}{}",
        l.id,
        if l.pass { "PASS" } else { "FAIL" },
        l.detail,
        if l.enforced || l.pass { "" } else { "  [reported, not enforced]" }
    );
    l
}

fn criterion_1() -> Line {
    let start = Instant::now();
    let results = checks::check_all(None).expect("gradcheck suite runs");
    let secs = start.elapsed().as_secs_f64();
    let worst = results.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let failed: Vec<&str> = results.iter().filter(|c| !c.passed).map(|c| c.module.as_str()).collect();
    let pass = failed.is_empty() && worst < checks::TOL && secs < 60.0;
    line(
        "1",
        pass,
        true,
        format!(
            "gradcheck on {} blocks, worst rel err {worst:.2e} (< {:.0e}), {secs:.1}s (< 60s){}",
            results.len(),
            checks::TOL,
            if failed.is_empty() { String::new() } else { format!(", failing: {}", failed.join(",")) }
        ),
    )
}

fn criterion_2() -> Line {
    let start = Instant::now();
    let (n, d, hw, frames) = (4, 16, 16, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let cfg = SlotConfig {
        n_slots: n,
        dim: d,
        ..SlotConfig::default()
    };
    let sa = SlotAttention::new(&mut store, "sa", cfg, &mut rng).unwrap();
    let x = Tensor::uniform(&[frames, hw, d], -1.0, 1.0, &mut rng);

    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let xv = g.constant(x.clone());
    let out = sa.decompose(&mut g, &p, xv).unwrap();
    let mut worst_col = 0.0f64;
    for &a in &out.attn_per_iter {
        let t = g.value(a);
        for f in 0..frames {
            for j in 0..hw {
                let s: f64 = (0..n).map(|k| t.get(&[f, k, j])).sum();
                worst_col = worst_col.max((s - 1.0).abs());
            }
        }
    }

    let base = sa.decompose_detached(&store, &x).unwrap();
    let mut exact = true;
    for _ in 0..20 {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let q = store.get(sa.queries);
        let mut data = Vec::with_capacity(q.numel());
        for &src in &perm {
            data.extend_from_slice(&q.data()[src * d..(src + 1) * d]);
        }
        let mut permuted = store.clone();
        *permuted.get_mut(sa.queries) = Tensor::new(vec![n, d], data).unwrap();
        let o = sa.decompose_detached(&permuted, &x).unwrap();
        for f in 0..frames {
            for (k, &src) in perm.iter().enumerate() {
                exact &= (0..d).all(|i| o.tokens.get(&[f, k, i]) == base.tokens.get(&[f, src, i]));
                exact &= (0..hw).all(|j| o.attn.get(&[f, k, j]) == base.attn.get(&[f, src, j]));
            }
        }
    }
    line(
        "2",
        worst_col <= 1e-9 && exact,
        true,
        format!(
            "max |column sum - 1| {worst_col:.1e} over {} iterations (<= 1e-9); 20 permutations exactly equivariant: {exact}; {:.2}s",
            out.attn_per_iter.len(),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn loss_ctx(g: &mut Graph, rng: &mut ChaCha8Rng, labels: &[usize], t: usize, cfg: LossConfig) -> BatchContext {
    let (n, d, k) = (3, 6, 4);
    let clips = labels
        .iter()
        .map(|&label| ClipTerms {
            tokens: g.constant(Tensor::uniform(&[t, n, d], -1.0, 1.0, rng)),
            cls: g.constant(Tensor::uniform(&[t, d], -1.0, 1.0, rng)),
            states: g.constant(Tensor::uniform(&[t - 1, n, d], -1.0, 1.0, rng)),
            logits: g.constant(Tensor::uniform(&[k], -1.0, 1.0, rng)),
            label,
        })
        .collect();
    BatchContext { clips, cfg }
}

fn criterion_3() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = 5;

    // equal logits, one negative: both clips share their cls vectors
    let mut g = Graph::new();
    let mut ctx = loss_ctx(&mut g, &mut rng, &[0, 1], t, LossConfig::default());
    ctx.clips[1].cls = ctx.clips[0].cls;
    let l = object_distillation_loss(&mut g, &ctx).unwrap();
    let ln2_err = (g.value(l).item() - t as f64 * std::f64::consts::LN_2).abs();

    let mut scale_err = 0.0f64;
    for _ in 0..50 {
        let o = Tensor::uniform(&[t, 3, 6], -1.0, 1.0, &mut rng);
        let p = Tensor::uniform(&[t, 6], -1.0, 1.0, &mut rng);
        let (a, b) = (rng.random_range(0.01..100.0), rng.random_range(0.01..100.0));
        let mut g = Graph::new();
        let (ov, pv) = (g.constant(o.clone()), g.constant(p.clone()));
        let c0 = correspondence(&mut g, ov, pv, 0.07).unwrap();
        let (ov, pv) = (g.constant(o.map(|x| x * a)), g.constant(p.map(|x| x * b)));
        let c1 = correspondence(&mut g, ov, pv, 0.07).unwrap();
        scale_err = scale_err.max(g.value(c0).max_abs_diff(g.value(c1)));
    }

    let mut g = Graph::new();
    let cfg = LossConfig {
        margin: 0.0,
        ..LossConfig::default()
    };
    let mut ctx = loss_ctx(&mut g, &mut rng, &[0, 0, 1, 1], t, cfg);
    let shared = ctx.clips[0].states;
    ctx.clips.iter_mut().for_each(|c| c.states = shared);
    let lt = temporal_reasoning_loss(&mut g, &ctx).unwrap();
    let temp_zero = g.value(lt).item();

    let mut g = Graph::new();
    let ctx = loss_ctx(&mut g, &mut rng, &[0, 1, 2, 0, 1, 2], t, LossConfig::default());
    let v = total_loss(&mut g, &ctx).unwrap().values(&g);
    let exact_sum = v.total == (v.obj + v.temp) + v.cls;

    line(
        "3",
        ln2_err < 1e-12 && scale_err <= 1e-12 && temp_zero == 0.0 && exact_sum,
        true,
        format!(
            "|L_obj - T ln2| {ln2_err:.1e}; scale invariance {scale_err:.1e} (<= 1e-12); L_temp(margin 0, identical) = {temp_zero}; total exact sum: {exact_sum}"
        ),
    )
}

fn brute_force(cost: &Tensor) -> f64 {
    let (a, b) = (cost.shape()[0], cost.shape()[1]);
    let mut best = f64::INFINITY;
    if a <= b {
        for cols in (0..b).permutations(a) {
            best = best.min((0..a).fold(0.0, |s, r| s + cost.get(&[r, cols[r]])));
        }
    } else {
        for rows in (0..a).permutations(b) {
            let mut pairs: Vec<(usize, usize)> = rows.iter().enumerate().map(|(c, &r)| (r, c)).collect();
            pairs.sort_unstable();
            best = best.min(pairs.iter().fold(0.0, |s, &(r, c)| s + cost.get(&[r, c])));
        }
    }
    best
}

fn criterion_4() -> Line {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    for _ in 0..500 {
        let (a, b) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let cost = Tensor::uniform(&[a, b], 0.0, 1.0, &mut rng);
        if hungarian_match(&cost).unwrap().total != brute_force(&cost) {
            mismatches += 1;
        }
    }
    line(
        "4",
        mismatches == 0,
        true,
        format!(
            "500 random matrices up to 6x6, {mismatches} inexact totals; {:.2}s",
            start.elapsed().as_secs_f64()
        ),
    )
}

fn criterion_5() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (t, h, w) = (3, 12, 12);
    let mut perfect = true;
    let mut invariant = true;
    for _ in 0..20 {
        let objects = rng.random_range(1..=3);
        let n = rng.random_range(objects + 1..=6);
        let gt_data: Vec<f64> = (0..t * h * w).map(|_| rng.random_range(0..=objects) as f64).collect();
        let gt = Tensor::new(vec![t, h, w], gt_data).unwrap();

        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let relabeled = gt.data().iter().map(|&v| perm[v as usize]).collect();
        let s = evaluate_clip(&MaskSet::new(t, h, w, n, relabeled).unwrap(), &gt).unwrap();
        perfect &= s.j == 1.0 && s.f == 1.0 && s.jf == 1.0;

        let random = (0..t * h * w).map(|_| rng.random_range(0..n)).collect();
        let masks = MaskSet::new(t, h, w, n, random).unwrap();
        perm.shuffle(&mut rng);
        let a = evaluate_clip(&masks, &gt).unwrap();
        let b = evaluate_clip(&masks.relabel(&perm).unwrap(), &gt).unwrap();
        invariant &= (a.j, a.f, a.jf) == (b.j, b.f, b.jf);
    }
    line(
        "5",
        perfect && invariant,
        true,
        format!("J = F = JF = 1 on 20 relabeled ground truths: {perfect}; relabel invariance on 20 mask sets: {invariant}"),
    )
}

const DATA_SEED: u64 = 7;

/// The desk-scale run: D=64, N=4, T=8, 6 classes, 48 train / 12 val clips,
/// batch 16, 50 epochs.
fn desk_config(delta: usize, aux: bool) -> TrainConfig {
    let mut cfg = TrainConfig {
        model: ModelConfig {
            n_slots: 4,
            delta: DeltaMode::Fixed(delta),
            ..ModelConfig::default()
        },
        lr: 2e-3,
        eval_every: 0,
        ..TrainConfig::default()
    };
    cfg.loss.tau_outer = Some(1.0);
    cfg.loss.enable_obj = aux;
    cfg.loss.enable_temp = aux;
    cfg
}

struct RunResult {
    train: EvalReport,
    val: EvalReport,
    secs: f64,
}

fn desk_data(manifest: &Manifest, cfg: &TrainConfig) -> (Model, Vec<Sample>, Vec<Sample>) {
    let model = Model::new(cfg.model.clone(), cfg.seed).unwrap();
    let train = generate_split(manifest, Split::Train, &model).unwrap();
    let val = generate_split(manifest, Split::Val, &model).unwrap();
    (model, train, val)
}

fn train_run(manifest: &Manifest, cfg: TrainConfig, label: &str) -> RunResult {
    let start = Instant::now();
    let (model, train, val) = desk_data(manifest, &cfg);
    let mut trainer = Trainer::new(cfg, model, train, val).unwrap();
    trainer.run(&mut std::io::sink(), None).unwrap();
    let r = RunResult {
        train: trainer.evaluate(Split::Train).unwrap(),
        val: trainer.evaluate(Split::Val).unwrap(),
        secs: start.elapsed().as_secs_f64(),
    };
    println!(
        "  run {label}: {} steps, train acc {:.3}, val acc {:.3}, val JF {:.3} (random {:.3}), fg/bg norm ratio {:.3}, {:.0}s",
        trainer.step,
        r.train.accuracy,
        r.val.accuracy,
        r.val.jf.unwrap_or(f64::NAN),
        r.val.random_jf.unwrap_or(f64::NAN),
        r.val.fg_bg_norm_ratio.unwrap_or(f64::NAN),
        r.secs
    );
    r
}

fn training_criteria(lines: &mut Vec<Line>) {
    let manifest = make_split(60, 6, DATA_SEED, 8, (64, 64)).unwrap();
    assert_eq!(manifest.split(Split::Train).len(), 48);

    let full = train_run(&manifest, desk_config(2, true), "full, delta 2");
    let ablation = train_run(&manifest, desk_config(2, false), "no auxiliary losses, delta 2");

    let (tr, va) = (full.train.accuracy, full.val.accuracy);
    lines.push(line(
        "6a",
        tr >= 0.90 && va >= 0.70,
        false,
        format!("train top-1 {tr:.3} (>= 0.90), val top-1 {va:.3} (>= 0.70)"),
    ));
    let margin = full.val.accuracy - ablation.val.accuracy;
    lines.push(line(
        "6b",
        margin >= 0.05,
        false,
        format!(
            "val {:.3} full vs {:.3} ablation, margin {:+.1} points (>= +5)",
            full.val.accuracy,
            ablation.val.accuracy,
            100.0 * margin
        ),
    ));
    let (jf, rnd) = (full.val.jf.unwrap(), full.val.random_jf.unwrap());
    lines.push(line(
        "6c",
        jf >= 2.0 * rnd,
        false,
        format!("val JF {jf:.3} vs random baseline {rnd:.3}, ratio {:.2} (>= 2)", jf / rnd),
    ));
    let ratio = full.val.fg_bg_norm_ratio.unwrap();
    lines.push(line("7", ratio > 1.0, false, format!("fg/bg state-change norm ratio {ratio:.3} (> 1)")));

    let d1 = train_run(&manifest, desk_config(1, true), "full, delta 1");
    let d4 = train_run(&manifest, desk_config(4, true), "full, delta 4");
    let accs = [d1.val.accuracy, full.val.accuracy, d4.val.accuracy];
    let spread = accs.iter().copied().fold(f64::NEG_INFINITY, f64::max) - accs.iter().copied().fold(f64::INFINITY, f64::min);
    lines.push(line(
        "8a",
        spread < 0.10,
        false,
        format!(
            "val acc delta 1/2/4 = {:.3}/{:.3}/{:.3}, spread {:.1} points (< 10)",
            accs[0],
            accs[1],
            accs[2],
            100.0 * spread
        ),
    ));
}

fn criterion_8b() -> Line {
    let mut cfg = desk_config(8, true);
    let validate = matches!(cfg.validate(), Err(Error::Config(_)));
    let build = matches!(Model::new(cfg.model.clone(), 0), Err(Error::Config(_)));
    cfg.model.delta = DeltaMode::Fixed(7);
    let ok_below = cfg.validate().is_ok();
    line(
        "8b",
        validate && build && ok_below,
        true,
        format!("delta = T = 8 rejected as a configuration error: {}; delta = 7 accepted: {ok_below}", validate && build),
    )
}

fn criterion_9() -> Line {
    let manifest = make_split(60, 6, DATA_SEED, 8, (64, 64)).unwrap();
    let mut cfg = desk_config(2, true);
    cfg.epochs = 2;
    let run = |cfg: TrainConfig| -> (Vec<StepLog>, Vec<u8>) {
        let (model, train, val) = desk_data(&manifest, &cfg);
        let mut t = Trainer::new(cfg, model, train, val).unwrap();
        let mut sink = Vec::new();
        let logs = t.run(&mut sink, None).unwrap();
        (logs, sink)
    };
    let (la, sa) = run(cfg.clone());
    let (lb, sb) = run(cfg.clone());
    let identical = la == lb && sa == sb && !la.is_empty();

    let dir = tempfile::tempdir().unwrap();
    let (model, train, val) = desk_data(&manifest, &cfg);
    let mut straight = Trainer::new(cfg, model, train.clone(), val.clone()).unwrap();
    straight.train_step().unwrap();
    let ckpt = straight.checkpoint();
    ckpt.save(dir.path()).unwrap();
    let loaded = objslot::train::Checkpoint::load(dir.path()).unwrap();
    let stored_exact = loaded.params == ckpt.params && loaded.state == ckpt.state && loaded.step == ckpt.step;
    let expected = straight.train_step().unwrap();
    let mut resumed = Trainer::resume(&loaded, train, val).unwrap();
    let got = resumed.train_step().unwrap();
    let continued_exact = got == expected && resumed.model.store.tensors() == straight.model.store.tensors();
    line(
        "9",
        identical && stored_exact && continued_exact,
        true,
        format!(
            "seed-matched {}-step loss logs identical: {identical}; checkpoint bit-exact: {stored_exact}; resumed step bit-exact: {continued_exact}",
            la.len()
        ),
    )
}

fn main() -> ExitCode {
    let strict = std::env::var("OBJSLOT_STRICT").is_ok_and(|v| v == "1");
    let skip_training = std::env::var("OBJSLOT_SKIP_TRAINING").is_ok_and(|v| v == "1");
    println!("acceptance suite (strict = {strict})");
    let start = Instant::now();
    let mut lines = vec![criterion_1(), criterion_2(), criterion_3(), criterion_4(), criterion_5()];
    if skip_training {
        println!("criterion 6-8a SKIPPED (OBJSLOT_SKIP_TRAINING=1)");
    } else {
        training_criteria(&mut lines);
    }
    lines.push(criterion_8b());
    lines.push(criterion_9());

    let passed = lines.iter().filter(|l| l.pass).count();
    let fatal: Vec<&str> = lines
        .iter()
        .filter(|l| !l.pass && (l.enforced || strict))
        .map(|l| l.id)
        .collect();
    println!(
        "acceptance: {passed}/{} passed in {:.0}s; enforced failures: {}",
        lines.len(),
        start.elapsed().as_secs_f64(),
        if fatal.is_empty() { "none".to_string() } else { fatal.join(", ") }
    );
    if fatal.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
