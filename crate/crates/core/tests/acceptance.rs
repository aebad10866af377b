//! End-to-end acceptance suite. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL (or WARN) line even on success.
//!
//! `MINIDISTILL_ACCEPT=1,4,9` restricts the run to the listed criteria.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use minidistill::bench::{run_bench, Arch, BenchOptions, ParamsReport, DEFAULT_VOCAB};
use minidistill::data::{corpus_sequences, make_mlm_batch, synth_corpus, MaskedBatch, Vocab};
use minidistill::gradcheck::{self, Module, THRESHOLD};
use minidistill::losses::{
    attention_transfer_loss, minilm_loss, value_relation_loss, value_relation_of, DistillSpec, LossMode,
};
use minidistill::model::{census, LayerCapture, ModelConfig, TransformerModel};
use minidistill::trainer::{
    distill_stage, evaluate_distill, mlm_accuracy, pretrain_teacher, run_plan, DistillPlan, PlanOutput,
    TaChoice, TrainOptions,
};
use minidistill::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, PartialEq)]
enum Status {
    Pass,
    Warn,
    Fail,
}

struct Outcome {
    status: Status,
    detail: String,
}

impl Outcome {
    fn check(ok: bool, detail: impl Into<String>) -> Self {
        Outcome {
            status: if ok { Status::Pass } else { Status::Fail },
            detail: detail.into(),
        }
    }

    fn soft(ok: bool, detail: impl Into<String>) -> Self {
        Outcome {
            status: if ok { Status::Pass } else { Status::Warn },
            detail: detail.into(),
        }
    }
}

fn within(limit: Duration, elapsed: Duration) -> bool {
    elapsed < limit
}

// ---------------------------------------------------------------- 1

fn params_counts() -> Outcome {
    let start = Instant::now();
    let trm_rows = [
        (12, 768, 85_054_464, "85.1M"),
        (6, 768, 42_527_232, "42.5M"),
        (12, 384, 21_293_568, "21.3M"),
        (6, 384, 10_646_784, "10.6M"),
        (4, 384, 7_097_856, "7.1M"),
        (3, 384, 5_323_392, "5.3M"),
    ];
    let mut bad = Vec::new();
    for (l, d, trm, short) in trm_rows {
        let r = ParamsReport::new(l, d, DEFAULT_VOCAB).unwrap();
        let text = r.to_string();
        if r.trm != trm || !text.contains(short) {
            bad.push(format!("{l}x{d} Trm {}", r.trm));
        }
        let emd = if d == 768 { (23_440_896, "23.4M") } else { (11_720_448, "11.7M") };
        if r.emd != emd.0 || !text.contains(emd.1) {
            bad.push(format!("{l}x{d} Emd {}", r.emd));
        }
    }
    let elapsed = start.elapsed();
    let ok = bad.is_empty() && within(Duration::from_secs(1), elapsed);
    Outcome::check(ok, format!("6 Trm rows + 2 Emd counts exact, mismatches {bad:?}, {elapsed:.2?}"))
}

// ---------------------------------------------------------------- 2

fn speed_ratio() -> Outcome {
    let start = Instant::now();
    let opts = BenchOptions {
        seq_len: 128,
        batch_size: 1,
        batches: 20,
        warmup: 1,
        ..BenchOptions::default()
    };
    let report = run_bench(&[Arch::new(12, 768), Arch::new(6, 768), Arch::new(6, 384)], &opts).unwrap();
    let half_depth = report.ratio(1, 0);
    let small = report.ratio(2, 0);
    let elapsed = start.elapsed();
    let ok = (1.6..=2.4).contains(&half_depth) && small >= 4.0 && within(Duration::from_secs(300), elapsed);
    Outcome::check(
        ok,
        format!("6x768 {half_depth:.2}x (want 2.0 ± 20%), 6x384 {small:.2}x (want ≥ 4), {elapsed:.1?}"),
    )
}

// ---------------------------------------------------------------- 3

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let checks = gradcheck::suite(Module::All, 0).unwrap();
    let report = gradcheck::run(&checks, THRESHOLD);
    let worst = report
        .outcomes
        .iter()
        .map(|o| o.max_rel_err)
        .fold(0.0f64, f64::max);
    let elapsed = start.elapsed();
    Outcome::check(
        report.all_passed() && within(Duration::from_secs(120), elapsed),
        format!(
            "{} checks, worst relative error {worst:.2e}, failures {:?}, {elapsed:.2?}",
            report.outcomes.len(),
            report.failures()
        ),
    )
}

// ---------------------------------------------------------------- 4

struct Instance {
    valid: usize,
    t_att: Vec<Mat>,
    s_att: Vec<Mat>,
    t_val: Vec<Mat>,
    s_val: Vec<Mat>,
}

fn instance(rng: &mut ChaCha8Rng) -> Instance {
    let heads = rng.gen_range(1..=3);
    let n = rng.gen_range(1..=7);
    let valid = rng.gen_range(1..=n);
    let (dk, dk_s) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
    Instance {
        valid,
        t_att: (0..heads).map(|_| random_distribution(rng, n, n)).collect(),
        s_att: (0..heads).map(|_| random_distribution(rng, n, n)).collect(),
        t_val: (0..heads).map(|_| random_mat(rng, n, dk, 6.0)).collect(),
        s_val: (0..heads).map(|_| random_mat(rng, n, dk_s, 6.0)).collect(),
    }
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = [0.0f64; 4];
    for _ in 0..100 {
        let x = instance(&mut rng);
        let teacher = LayerCapture {
            layer: 1,
            queries: vec![],
            keys: vec![],
            values: x.t_val.iter().map(to_tensor).collect(),
            attention: x.t_att.iter().map(to_tensor).collect(),
            hidden: None,
        };
        let mut tape = Tape::new();
        let student = LayerCapture::<Var> {
            layer: 1,
            queries: vec![],
            keys: vec![],
            values: x.s_val.iter().map(|m| tape.leaf(to_tensor(m), true)).collect(),
            attention: x.s_att.iter().map(|m| tape.leaf(to_tensor(m), true)).collect(),
            hidden: None,
        };
        let at = attention_transfer_loss(&mut tape, &teacher, &student, x.valid).unwrap();
        worst[0] = worst[0].max((tape.value(at).item() - attention_transfer(&x.t_att, &x.s_att, x.valid)).abs());

        let dk = x.t_val[0][0].len();
        let rel = value_relation_of(&teacher.values, dk, x.valid).unwrap();
        for (h, v) in rel.heads.iter().zip(&x.t_val) {
            let oracle = value_relation(v, dk, x.valid);
            for (i, row) in oracle.iter().enumerate() {
                for (j, &o) in row.iter().enumerate() {
                    worst[1] = worst[1].max((h.get(i, j) - o).abs());
                }
            }
        }

        let vr = value_relation_loss(&mut tape, &teacher.values, &student.values, x.valid).unwrap();
        let vr_oracle = common::value_relation_loss(&x.t_val, &x.s_val, x.valid);
        worst[2] = worst[2].max((tape.value(vr).item() - vr_oracle).abs());

        let total = minilm_loss(&mut tape, &teacher, &student, x.valid, true).unwrap().total;
        let oracle = minilm(&x.t_att, &x.s_att, &x.t_val, &x.s_val, x.valid);
        worst[3] = worst[3].max((tape.value(total).item() - oracle).abs());
    }
    let elapsed = start.elapsed();
    let ok = worst.iter().all(|&w| w <= 1e-10) && within(Duration::from_secs(60), elapsed);
    Outcome::check(
        ok,
        format!(
            "100 instances, max |Δ| AT {:.1e} VR {:.1e} L_VR {:.1e} total {:.1e}, {elapsed:.2?}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

// ---------------------------------------------------------------- 5

fn small_corpus() -> (Vocab, Vec<Vec<usize>>) {
    let text = synth_corpus(5, 300);
    let vocab = Vocab::build(&text, 1000).unwrap();
    let seqs = corpus_sequences(&vocab, &text, 14);
    (vocab, seqs)
}

fn self_distillation() -> Outcome {
    let start = Instant::now();
    let (vocab, seqs) = small_corpus();
    let cfg = ModelConfig::new(2, 32, 4, vocab.len(), 16).with_dropout(0.0);
    let teacher = TransformerModel::<f64>::init(cfg, 55).unwrap();
    let student = teacher.clone();
    let batch = make_mlm_batch(vocab.len(), &seqs[..16], 16, 0.15, 1).unwrap();
    let mut parts = Vec::new();
    let mut ok = true;
    for mode in [LossMode::Minilm, LossMode::LayerToLayer, LossMode::SoftLabel, LossMode::ValueMse] {
        let spec = DistillSpec::new(mode);
        let proj = spec
            .projection_shape(teacher.config(), student.config())
            .map(|s| Tensor::<f64>::eye(s[0]));
        let loss = evaluate_distill(&teacher, &student, &spec, proj.as_ref(), &batch).unwrap().total;
        ok &= loss.abs() < 1e-8;
        parts.push(format!("{} {loss:.1e}", mode.as_str()));
    }
    let elapsed = start.elapsed();
    Outcome::check(
        ok && within(Duration::from_secs(30), elapsed),
        format!("{}, {elapsed:.2?}", parts.join(", ")),
    )
}

// ---------------------------------------------------------------- 6

fn shape_flexibility() -> Outcome {
    let start = Instant::now();
    let (vocab, seqs) = small_corpus();
    let teacher = TransformerModel::<f32>::init(ModelConfig::new(2, 64, 4, vocab.len(), 16), 8).unwrap();
    let mut notes = Vec::new();
    let mut ok = true;
    for width in [16, 32, 48] {
        let cfg = ModelConfig::new(1, width, 4, vocab.len(), 16).with_dropout(0.0);
        let expected = census(&cfg).total();
        let run = |mode: LossMode, steps: usize| {
            let opts = TrainOptions {
                steps,
                batch_size: 2,
                seed: 3,
                ..TrainOptions::default()
            };
            let student = TransformerModel::<f32>::init(cfg.clone(), 4).unwrap();
            distill_stage(&teacher, student, &DistillSpec::new(mode), &seqs, &opts, None).unwrap()
        };
        let trainable = |m: &TransformerModel<f32>, p: &Option<Tensor<f32>>| {
            m.params().iter().map(Tensor::numel).sum::<usize>() + p.as_ref().map_or(0, Tensor::numel)
        };

        let minilm = run(LossMode::Minilm, 2);
        let minilm_ok = minilm.projection.is_none()
            && DistillSpec::new(LossMode::Minilm).projection_shape(teacher.config(), &cfg).is_none()
            && trainable(&minilm.student, &minilm.projection) == expected;

        let (one, three) = (run(LossMode::ValueMse, 1), run(LossMode::ValueMse, 3));
        let dk_s = width / 4;
        let mse_ok = match (&one.projection, &three.projection) {
            (Some(a), Some(b)) => {
                a.shape() == [dk_s, 16]
                    && trainable(&three.student, &three.projection) == expected + dk_s * 16
                    && a.max_abs_diff(b) > 0.0
            }
            _ => false,
        };
        ok &= minilm_ok && mse_ok;
        notes.push(format!(
            "d'={width}: minilm +0 params {}, value-mse +{} trained {}",
            if minilm_ok { "ok" } else { "BAD" },
            dk_s * 16,
            if mse_ok { "ok" } else { "BAD" }
        ));
    }
    let elapsed = start.elapsed();
    Outcome::check(ok, format!("{}, {elapsed:.1?}", notes.join("; ")))
}

// ---------------------------------------------------------------- 7 & 8

struct Pipeline {
    teacher: TransformerModel<f32>,
    output: PlanOutput<f32>,
    vocab_len: usize,
    train: Vec<Vec<usize>>,
    held_out: Vec<MaskedBatch>,
    teacher_acc: f64,
    elapsed: Duration,
}

fn held_out_batches(vocab: &Vocab, n: usize) -> Vec<MaskedBatch> {
    let seqs = corpus_sequences(vocab, &synth_corpus(9_001, 400), 30);
    seqs.chunks(16)
        .take(n)
        .enumerate()
        .map(|(i, c)| make_mlm_batch(vocab.len(), c, 32, 0.15, 77 + i as u64).unwrap())
        .collect()
}

fn pipeline() -> Pipeline {
    let start = Instant::now();
    let text = synth_corpus(7, 4000);
    let vocab = Vocab::build(&text, 1000).unwrap();
    let train = corpus_sequences(&vocab, &text, 30);
    let cfg = ModelConfig::new(4, 64, 4, vocab.len(), 32);
    let pre = TrainOptions {
        steps: 2000,
        batch_size: 16,
        seed: 7,
        ..TrainOptions::default()
    };
    let (teacher, _) = pretrain_teacher::<f32>(&cfg, &train, &pre, None).unwrap();
    let teacher_acc = mlm_accuracy(&teacher, &train, 16, 8, 99).unwrap();
    let opts = TrainOptions {
        steps: 1000,
        batch_size: 16,
        seed: 8,
        ..TrainOptions::default()
    };
    let plan = DistillPlan::build(
        teacher.config(),
        2,
        32,
        &DistillSpec::new(LossMode::Minilm),
        TaChoice::Auto,
        &opts,
        0.0,
    )
    .unwrap();
    let output = run_plan(&teacher, &plan, &train, &mut |_, _| Ok(())).unwrap();
    Pipeline {
        teacher,
        output,
        vocab_len: vocab.len(),
        train,
        held_out: held_out_batches(&vocab, 8),
        teacher_acc,
        elapsed: start.elapsed(),
    }
}

/// Mean last-layer attention KL of `student` to `teacher` over held-out batches.
fn attention_kl(teacher: &TransformerModel<f32>, student: &TransformerModel<f32>, batches: &[MaskedBatch]) -> f64 {
    let spec = DistillSpec::new(LossMode::AttOnly);
    let sum: f64 = batches
        .iter()
        .map(|b| evaluate_distill(teacher, student, &spec, None, b).unwrap().total)
        .sum();
    sum / batches.len() as f64
}

fn ta_pipeline(p: &Pipeline) -> Outcome {
    let mut ok = true;
    let mut notes = vec![format!(
        "teacher {}, masked acc {:.3} ({:.0}x chance)",
        p.teacher.config().label(),
        p.teacher_acc,
        p.teacher_acc * p.vocab_len as f64
    )];
    for s in &p.output.stages {
        let (first, last) = s.output.report.window_means(50).unwrap();
        let drop = 1.0 - last / first;
        ok &= drop >= 0.5;
        notes.push(format!("{} {}->{} loss {first:.4}->{last:.4} (-{:.0}%)", s.role, s.teacher, s.student, drop * 100.0));
    }
    let assistant = &p.output.stages[0].output.student;
    let trained = attention_kl(assistant, p.output.final_student(), &p.held_out);
    let random_model = TransformerModel::<f32>::init(p.output.final_student().config().clone(), 12_345).unwrap();
    let random = attention_kl(assistant, &random_model, &p.held_out);
    let gain = random / trained;
    ok &= p.output.stages.len() == 2 && gain >= 5.0 && within(Duration::from_secs(900), p.elapsed);
    notes.push(format!("attention KL {trained:.4} vs random {random:.4} ({gain:.1}x)"));
    notes.push(format!("{:.1?}", p.elapsed));
    Outcome::check(ok, notes.join("; "))
}

fn ablation_direction(p: &Pipeline) -> Outcome {
    let assistant = &p.output.stages[0].output.student;
    let student_cfg = p.output.final_student().config().clone();
    let mut wins = 0;
    let mut notes = Vec::new();
    for seed in [101, 202, 303] {
        let mut kl = [0.0; 2];
        for (i, mode) in [LossMode::Minilm, LossMode::AttOnly].into_iter().enumerate() {
            let opts = TrainOptions {
                steps: 1000,
                batch_size: 16,
                seed,
                ..TrainOptions::default()
            };
            let student = TransformerModel::init(student_cfg.clone(), seed + 17).unwrap();
            let out = distill_stage(assistant, student, &DistillSpec::new(mode), &p.train, &opts, None).unwrap();
            kl[i] = attention_kl(assistant, &out.student, &p.held_out);
        }
        wins += usize::from(kl[0] < kl[1]);
        notes.push(format!("seed {seed}: minilm {:.4} vs att-only {:.4}", kl[0], kl[1]));
    }
    Outcome::soft(wins >= 2, format!("{wins}/3 seeds favour minilm; {}", notes.join(", ")))
}

// ---------------------------------------------------------------- 9

fn rotation_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(2..=10);
        let dk = rng.gen_range(1..=16);
        let v = random_mat(&mut rng, n, dk, 3.0);
        let rotated = matmul(&v, &random_orthogonal(&mut rng, dk));
        let a = value_relation_of(&[to_tensor(&v)], dk, n).unwrap();
        let b = value_relation_of(&[to_tensor(&rotated)], dk, n).unwrap();
        worst = worst.max(a.heads[0].max_abs_diff(&b.heads[0]));
    }
    Outcome::check(worst <= 1e-8, format!("100 rotations, max |Δ| {worst:.1e}"))
}

fn main() -> ExitCode {
    // libtest-style flags (e.g. from `cargo test -- --nocapture`) are ignored.
    let selected: Option<Vec<usize>> = std::env::var("MINIDISTILL_ACCEPT")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |i: usize| selected.as_ref().map_or(true, |s| s.contains(&i));

    let titles = [
        "parameter counts",
        "speed ratios",
        "gradient suite",
        "oracle equivalence",
        "self-distillation identity",
        "shape flexibility",
        "teacher-assistant pipeline",
        "ablation direction (soft)",
        "value-relation rotation invariance",
    ];
    let mut failed = Vec::new();
    let mut report = |i: usize, o: Outcome| {
        let tag = match o.status {
            Status::Pass => "PASS",
            Status::Warn => "WARN",
            Status::Fail => {
                failed.push(i);
                "FAIL"
            }
        };
        println!("[{tag}] criterion {i}: {} — {}", titles[i - 1], o.detail);
    };

    let simple: [(usize, fn() -> Outcome); 7] = [
        (1, params_counts),
        (2, speed_ratio),
        (3, gradient_suite),
        (4, oracle_equivalence),
        (5, self_distillation),
        (6, shape_flexibility),
        (9, rotation_invariance),
    ];
    for (i, f) in simple {
        if wanted(i) {
            report(i, f());
        }
    }
    if wanted(7) || wanted(8) {
        let p = pipeline();
        if wanted(7) {
            report(7, ta_pipeline(&p));
        }
        if wanted(8) {
            report(8, ablation_direction(&p));
        }
    }
    if failed.is_empty() {
        println!("acceptance: all hard criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}
