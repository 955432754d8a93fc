//! Acceptance criteria, run sequentially so each timing budget applies to a
//! single core. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any fails.

use std::time::{Duration, Instant};

use mvalign::autodiff::{Tape, Tensor};
use mvalign::discrepancy::{
    gaussian_kl_tape, gswd, metric_value, ot_oracle_exact, swd, wasserstein_1d,
    wasserstein_1d_columns, wasserstein_1d_pow, CouplingProblem, DefiningFunction, MetricKind,
    MetricSpec, SliceFamily,
};
use mvalign::loco::{
    contrastive_from_scores, contrastive_loss, loco_loss, LossConfig, MemoryBank, NegativeSet,
    NegativeSource,
};
use mvalign::probe::{extract_features, probe_train_eval, ProbeConfig};
use mvalign::rng;
use mvalign::suite::loss_suite;
use mvalign::trainer::{
    checkpoint_load, checkpoint_save, encode_checkpoint, Objective, TrainConfig, TrainState,
    Trainer,
};
use mvalign::views::rgb_to_lab;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(pass: bool, elapsed: Duration, budget: Duration, detail: String) -> Outcome {
    let ok = elapsed < budget;
    outcome(
        pass && ok,
        format!(
            "{detail}; {:.1}s (limit {:.0}s)",
            elapsed.as_secs_f64(),
            budget.as_secs_f64()
        ),
    )
}

fn gaussian_matrix(n: usize, d: usize, shift: f64, r: &mut impl Rng) -> Tensor {
    let data = (0..n * d)
        .map(|_| shift + Distribution::<f64>::sample(&StandardNormal, r))
        .collect();
    Tensor::new(vec![n, d], data).unwrap()
}

fn c1_ot_oracle() -> Outcome {
    let t = Instant::now();
    let mut r = rng::stream(101, &[]);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let n = r.random_range(1..=8);
        let p = if i % 2 == 0 { 1.0 } else { 2.0 };
        let a: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
        let pts = |v: &[f64]| v.iter().map(|&x| vec![x]).collect::<Vec<_>>();
        let exact =
            ot_oracle_exact(&CouplingProblem::from_points(&pts(&a), &pts(&b), p).unwrap()).unwrap();
        let sorted = wasserstein_1d_pow(&a, &b, p).unwrap();
        worst = worst.max((sorted - exact.cost).abs());
        let wp = wasserstein_1d(&a, &b, p).unwrap();
        worst = worst.max((wp - exact.cost.powf(1.0 / p)).abs());
    }
    within(
        worst <= 1e-9,
        t.elapsed(),
        Duration::from_secs(5),
        format!("max |sorted - exact| = {worst:.2e}"),
    )
}

fn c2_gaussian_w2() -> Outcome {
    let t = Instant::now();
    let mut r = rng::stream(102, &[]);
    let n = 100_000;
    let a: Vec<f64> = (0..n)
        .map(|_| Normal::new(0.0, 1.0).unwrap().sample(&mut r))
        .collect();
    let b: Vec<f64> = (0..n)
        .map(|_| Normal::new(2.0, 1.0).unwrap().sample(&mut r))
        .collect();
    let w2 = wasserstein_1d(&a, &b, 2.0).unwrap();
    within(
        (w2 - 2.0).abs() <= 0.05,
        t.elapsed(),
        Duration::from_secs(5),
        format!("W2 = {w2:.4}"),
    )
}

fn c3_self_and_symmetry() -> Outcome {
    let mut r = rng::stream(103, &[]);
    let p = gaussian_matrix(64, 4, 0.0, &mut r);
    let q = gaussian_matrix(64, 4, 1.5, &mut r);
    let mut self_max: f64 = 0.0;
    let mut asym: f64 = 0.0;
    for order in [1.0, 2.0] {
        self_max = self_max.max(
            swd(&p, &p, 32, order, &mut rng::stream(7, &[]))
                .unwrap()
                .abs(),
        );
        for df in [
            DefiningFunction::sample_linear(4, 16, &mut r),
            DefiningFunction::sample_odd_poly(4, 16, &mut r),
            DefiningFunction::neural(4, &[8], 16, &mut r),
        ] {
            self_max = self_max.max(gswd(&p, &p, &df, order).unwrap().abs());
            asym = asym
                .max((gswd(&p, &q, &df, order).unwrap() - gswd(&q, &p, &df, order).unwrap()).abs());
        }
        let a = swd(&p, &q, 32, order, &mut rng::stream(7, &[])).unwrap();
        let b = swd(&q, &p, 32, order, &mut rng::stream(7, &[])).unwrap();
        asym = asym.max((a - b).abs());
    }
    for (kind, family) in [
        (MetricKind::Swd, SliceFamily::Linear),
        (MetricKind::Gswd, SliceFamily::OddPoly),
        (MetricKind::Gswd, SliceFamily::Neural),
    ] {
        let spec = MetricSpec {
            kind,
            family,
            slices: 16,
            ..MetricSpec::default()
        };
        self_max = self_max.max(metric_value(&p, &p, &spec, 9).unwrap().abs());
        asym = asym.max(
            (metric_value(&p, &q, &spec, 9).unwrap() - metric_value(&q, &p, &spec, 9).unwrap())
                .abs(),
        );
    }
    outcome(
        self_max == 0.0 && asym < 1e-12,
        format!("max self-distance {self_max:e}, max asymmetry {asym:.2e}"),
    )
}

fn c4_homogeneity() -> Outcome {
    let mut r = rng::stream(104, &[]);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let d = r.random_range(1..=5);
        let l = r.random_range(1..=4);
        let upsilon = r.random_range(-4.0..4.0);
        let x = gaussian_matrix(3, d, 0.0, &mut r);
        let base = if i % 2 == 0 {
            DefiningFunction::sample_linear(d, l, &mut r)
        } else {
            DefiningFunction::sample_odd_poly(d, l, &mut r)
        };
        let theta = base.params.get(0).clone();
        let scaled = Tensor::new(
            theta.shape().to_vec(),
            theta.data().iter().map(|v| v * upsilon).collect(),
        )
        .unwrap();
        let other = match base.family {
            SliceFamily::Linear => DefiningFunction::linear(scaled).unwrap(),
            _ => DefiningFunction::odd_poly(d, scaled).unwrap(),
        };
        let y0 = base.project_values(&x).unwrap();
        let y1 = other.project_values(&x).unwrap();
        for (a, b) in y0.data().iter().zip(y1.data()) {
            worst = worst.max((b - upsilon * a).abs() / (1.0 + a.abs()));
        }
    }
    outcome(
        worst <= 1e-9,
        format!("max |ge(x, u th) - u ge(x, th)| = {worst:.2e}"),
    )
}

fn c5_gradients() -> Outcome {
    let t = Instant::now();
    let entries = loss_suite(0).unwrap();
    let worst = entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max);
    let name = &entries
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .unwrap()
        .name;
    within(
        worst < 1e-4,
        t.elapsed(),
        Duration::from_secs(30),
        format!("{} checks, max rel err {worst:.2e} ({name})", entries.len()),
    )
}

fn c6_contrastive() -> Outcome {
    let mut worst_uniform: f64 = 0.0;
    for k in [1, 2, 5, 255] {
        let v = contrastive_from_scores(3.7, &vec![3.7; k]).unwrap();
        worst_uniform = worst_uniform.max((v - ((k + 1) as f64).ln()).abs());
        for tau in [0.07, 1.0] {
            let mut tape = Tape::new();
            let a = tape.constant(Tensor::new(vec![1, 3], vec![0.2, -0.4, 0.9]).unwrap());
            let negs = tape.constant(Tensor::new(vec![k, 3], [0.2, -0.4, 0.9].repeat(k)).unwrap());
            let l = contrastive_loss(&mut tape, a, a, negs, k, tau).unwrap();
            worst_uniform = worst_uniform.max((tape.scalar_value(l) - ((k + 1) as f64).ln()).abs());
        }
    }
    let m = 3;
    let mut r = rng::stream(106, &[]);
    let hs: Vec<Tensor> = (0..m).map(|_| gaussian_matrix(6, 4, 0.0, &mut r)).collect();
    let cf = gaussian_matrix(6, 4, 0.0, &mut r);
    let bank = MemoryBank::new(m, 30, 4, 0.5, 3);
    let ids: Vec<usize> = (0..6).collect();
    let mut worst_linear: f64 = 0.0;
    for (source, negs) in [
        (NegativeSource::Minibatch, NegativeSet::Minibatch),
        (NegativeSource::Bank, bank.negatives(&ids, 8, 4).unwrap()),
    ] {
        let eval = |alpha: f64, beta: f64| {
            let cfg = LossConfig {
                alpha,
                beta,
                tau: 0.3,
                negatives: source,
                k: 8,
            };
            let mut tape = Tape::new();
            let h: Vec<_> = hs.iter().map(|t| tape.constant(t.clone())).collect();
            let c = tape.constant(cf.clone());
            let terms = loco_loss(&mut tape, &h, c, &cfg, &negs).unwrap();
            tape.scalar_value(terms.total)
        };
        let (a, b) = (0.8, 1.7);
        worst_linear =
            worst_linear.max((eval(a, b) - (a * eval(1.0, 0.0) + b * eval(0.0, 1.0))).abs());
    }
    outcome(
        worst_uniform <= 1e-6 && worst_linear <= 1e-10,
        format!(
            "uniform-score err {worst_uniform:.2e}, (alpha, beta) linearity err {worst_linear:.2e}"
        ),
    )
}

fn c7_gloco_alignment() -> Outcome {
    let t = Instant::now();
    let mut c = TrainConfig {
        objective: Objective::Gloco,
        gamma: 1.0,
        critic_steps: 5,
        batch_size: 128,
        ..TrainConfig::default()
    };
    c.dataset.n = 128;
    c.dataset.synth.view_dims = vec![16, 16];
    c.dataset.synth.view_offsets = vec![0.0, 5.0];
    let data = c.dataset.load().unwrap();
    let mut tr = Trainer::new(TrainState::for_dataset(c, &data).unwrap(), &data).unwrap();
    let mut first = f64::NAN;
    let mut last = f64::NAN;
    for i in 0..500 {
        let (row, _) = tr.step().unwrap();
        if i == 0 {
            first = row.gswd_mean_pairwise;
        }
        last = row.gswd_mean_pairwise;
    }
    let ratio = last / first;
    within(
        ratio <= 0.10,
        t.elapsed(),
        Duration::from_secs(60),
        format!(
            "GSWD {first:.4} -> {last:.5} ({:.1}% of step 1)",
            100.0 * ratio
        ),
    )
}

fn c8_coconet_smoke() -> Outcome {
    let t = Instant::now();
    let mut c = TrainConfig::default();
    c.dataset.n = 1000;
    let data = c.dataset.load().unwrap();
    let mut tr = Trainer::new(TrainState::for_dataset(c, &data).unwrap(), &data).unwrap();
    while tr.state.epoch < 20 {
        tr.step().unwrap();
    }
    let features = extract_features(&tr.state.encoders, &data).unwrap();
    let report =
        probe_train_eval(&features, data.labels().unwrap(), &ProbeConfig::default()).unwrap();
    within(
        report.accuracy >= 0.90,
        t.elapsed(),
        Duration::from_secs(300),
        format!(
            "linear probe top-1 {:.1}% (macro-F1 {:.3})",
            100.0 * report.accuracy,
            report.macro_f1
        ),
    )
}

fn c9_ablation() -> Outcome {
    let base = |objective: Objective| {
        let mut c = TrainConfig {
            objective,
            gamma: 0.0,
            critic_steps: 0,
            batch_size: 32,
            negatives: 16,
            c1: 16,
            c2: 8,
            h: 2,
            w: 2,
            extract_hidden: 32,
            map_hidden: 32,
            ..TrainConfig::default()
        };
        c.dataset.n = 160;
        c
    };
    let run = |c: TrainConfig| {
        let data = c.dataset.load().unwrap();
        let mut tr = Trainer::new(TrainState::for_dataset(c, &data).unwrap(), &data).unwrap();
        let mut trail = Vec::new();
        for _ in 0..12 {
            tr.step().unwrap();
            trail.push(tr.state.encoder_fingerprint());
        }
        (
            trail,
            tr.state.encoders.omega.clone(),
            tr.state.encoders.theta.clone(),
            tr.state.cfnet.params.clone(),
        )
    };
    let a = run(base(Objective::Coco));
    let b = run(base(Objective::Loco));
    let same = a.0 == b.0
        && a.1.fingerprint() == b.1.fingerprint()
        && a.2.fingerprint() == b.2.fingerprint()
        && a.3.fingerprint() == b.3.fingerprint();
    let moved = a.0.first() != a.0.last();
    outcome(
        same && moved,
        format!(
            "{} steps, fingerprints {}",
            a.0.len(),
            if same { "identical" } else { "differ" }
        ),
    )
}

/// sRGB to L*a*b* with the CIE epsilon/kappa formulation.
fn lab_oracle(rgb: [f64; 3]) -> [f64; 3] {
    let eps = 216.0 / 24389.0;
    let kappa = 24389.0 / 27.0;
    let lin: Vec<f64> = rgb
        .iter()
        .map(|&c| {
            if c > 0.04045 {
                ((c + 0.055) / 1.055).powf(2.4)
            } else {
                c / 12.92
            }
        })
        .collect();
    let m = [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ];
    let white = [0.95047, 1.0, 1.08883];
    let f: Vec<f64> = (0..3)
        .map(|i| {
            let t = (m[i][0] * lin[0] + m[i][1] * lin[1] + m[i][2] * lin[2]) / white[i];
            if t > eps {
                t.cbrt()
            } else {
                (kappa * t + 16.0) / 116.0
            }
        })
        .collect();
    [
        116.0 * f[1] - 16.0,
        500.0 * (f[0] - f[1]),
        200.0 * (f[1] - f[2]),
    ]
}

fn c10_color() -> Outcome {
    let white = rgb_to_lab(1.0, 1.0, 1.0).unwrap();
    let black = rgb_to_lab(0.0, 0.0, 0.0).unwrap();
    let anchor = (white[0] - 100.0)
        .abs()
        .max(white[1].abs())
        .max(white[2].abs())
        .max(black.iter().map(|v| v.abs()).fold(0.0, f64::max));
    let mut r = rng::stream(110, &[]);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let px = [r.random::<f64>(), r.random::<f64>(), r.random::<f64>()];
        let got = rgb_to_lab(px[0], px[1], px[2]).unwrap();
        let want = lab_oracle(px);
        for (g, w) in got.iter().zip(&want) {
            worst = worst.max((g - w).abs());
        }
    }
    outcome(
        anchor <= 1e-3 && worst <= 1e-9,
        format!("anchor err {anchor:.2e}, oracle err {worst:.2e}"),
    )
}

fn c11_resume() -> Outcome {
    let mut c = TrainConfig {
        batch_size: 32,
        negatives: 16,
        optimizer: mvalign::autodiff::OptimizerKind::Adam,
        c1: 16,
        c2: 8,
        h: 2,
        w: 2,
        extract_hidden: 32,
        map_hidden: 32,
        ..TrainConfig::default()
    };
    c.dataset.n = 160;
    let data = c.dataset.load().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");

    let mut straight = Trainer::new(TrainState::for_dataset(c, &data).unwrap(), &data).unwrap();
    for _ in 0..7 {
        straight.step().unwrap();
    }
    checkpoint_save(&straight.state, &path).unwrap();
    let (row_a, _) = straight.step().unwrap();

    let mut resumed = Trainer::new(checkpoint_load(&path).unwrap(), &data).unwrap();
    let (row_b, _) = resumed.step().unwrap();
    let same = encode_checkpoint(&straight.state).unwrap()
        == encode_checkpoint(&resumed.state).unwrap()
        && row_a == row_b;
    outcome(
        same,
        format!(
            "resumed mid-epoch at step {}, state after one step {}",
            row_a.step - 1,
            if same { "bitwise equal" } else { "differs" }
        ),
    )
}

fn c12_gradient_separation() -> Outcome {
    let n = 1000;
    let sigma = 1.0;
    let x = 20.0 * sigma;
    let mut r = rng::stream(112, &[]);
    let q: Vec<f64> = (0..n)
        .map(|_| sigma * Distribution::<f64>::sample(&StandardNormal, &mut r))
        .collect();
    let grad = |metric: &dyn Fn(
        &mut Tape,
        mvalign::autodiff::Var,
        mvalign::autodiff::Var,
    ) -> mvalign::autodiff::Var| {
        let mut tape = Tape::new();
        let p = tape.leaf(&Tensor::new(vec![n, 1], vec![x; n]).unwrap().with_grad());
        let qv = tape.constant(Tensor::new(vec![n, 1], q.clone()).unwrap());
        let v = metric(&mut tape, p, qv);
        let g = tape.backward(v).unwrap();
        g.get(p).unwrap().iter().sum::<f64>().abs()
    };
    let w1 = grad(&|t, p, q| {
        let w = wasserstein_1d_columns(t, p, q, 1.0).unwrap();
        t.sum(w, None).unwrap()
    });
    let kl = grad(&|t, p, q| gaussian_kl_tape(t, p, q).unwrap());
    let ratio = w1 / kl;
    outcome(
        ratio > 10.0,
        format!("|dW1/dx| = {w1:.3e}, |dKL/dx| = {kl:.3e}, ratio {ratio:.3e}"),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 12] = [
        ("exact OT oracle equivalence", c1_ot_oracle),
        ("Gaussian W2", c2_gaussian_w2),
        ("self-distance and symmetry", c3_self_and_symmetry),
        ("defining-function homogeneity", c4_homogeneity),
        ("gradient suite", c5_gradients),
        ("contrastive identities", c6_contrastive),
        ("global alignment training", c7_gloco_alignment),
        ("full objective smoke run", c8_coconet_smoke),
        ("ablation consistency", c9_ablation),
        ("color pipeline", c10_color),
        ("resume equivalence", c11_resume),
        ("metric-gradient separation", c12_gradient_separation),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = format!("{}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|a| *a == id || name.contains(a.as_str())) {
            continue;
        }
        let o = f();
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} [{:>2}] {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail
        );
    }
    println!("acceptance: {failed} failed");
    if failed > 0 {
        std::process::exit(1);
    }
}
