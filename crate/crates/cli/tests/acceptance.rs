//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits nonzero if
//! any criterion fails. Built without the libtest harness so the lines always show.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crossauc_core::alignment_losses::{
    forgery_prob, grad_check, kink_distance, loss_cls, loss_rank_intra, loss_rank_pair, random_batch, total_loss,
    LossWeights, GRAD_CHECK_FLOOR,
};
use crossauc_core::augmentation::{blend_swap, self_blend, BinaryMask, ImageBuffer, SoftMask, TransformParams};
use crossauc_core::cross_auc::{cross_matrix, verify_published, CrossAucMatrix, PUBLISHED_TOLERANCE};
use crossauc_core::farmoe::{moe_key_projection, shared_key_projection, Affine, ClsPolicy, ExpertBank, RegionMap};
use crossauc_core::fixtures::all_published;
use crossauc_core::roc_auc::{auc_bruteforce, rank_auc, roc_curve, Level};
use crossauc_core::score_store::{Label, Sample, ScoreStore, VideoAggregation};
use crossauc_core::shift_sim::{gen_domain, DomainSpec};
use crossauc_core::toy_trainer::{run as run_toy, ToyConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn main() {
    let criteria: [(&str, Duration, fn() -> Outcome); 8] = [
        ("published summary rows", Duration::from_secs(1), published_summaries),
        ("AUC oracle equivalence", Duration::from_secs(10), auc_oracles),
        ("monotone and shift invariances", Duration::from_secs(10), invariances),
        ("Gaussian planted AUC", Duration::from_secs(10), planted_auc),
        ("loss gradient verification", Duration::from_secs(30), gradients),
        ("equation identities", Duration::from_secs(30), identities),
        ("toy cross-domain claim", Duration::from_secs(300), toy_claim),
        ("CLI determinism", Duration::from_secs(120), determinism),
    ];
    let mut failed = 0;
    for (k, (name, budget, check)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let out = check();
        let took = t0.elapsed();
        let in_time = took <= *budget;
        let pass = out.pass && in_time;
        if !pass {
            failed += 1;
        }
        let time_note = if in_time { "" } else { " [over time budget]" };
        println!(
            "criterion {} {} {name}: {} ({:.2}s of {}s){time_note}",
            k + 1,
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            took.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!("acceptance: {} of 8 criteria pass", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

// 1. Avg/min/population std recomputed from the published per-pair values.
fn published_summaries() -> Outcome {
    let mut bad = Vec::new();
    let tables = all_published();
    for f in &tables {
        let r = verify_published(f, PUBLISHED_TOLERANCE).expect("shipped table is valid");
        for c in r.fields.iter().filter(|c| !c.pass) {
            bad.push(format!(
                "{} {} computed {:.6} vs claimed {:.3} (delta {:+.6})",
                f.name, c.field, c.computed, c.claimed, c.delta
            ));
        }
    }
    let n_bad_tables = tables
        .iter()
        .filter(|f| !verify_published(f, PUBLISHED_TOLERANCE).unwrap().pass)
        .count();
    let mut detail = format!(
        "{}/{} tables within ±{PUBLISHED_TOLERANCE}",
        tables.len() - n_bad_tables,
        tables.len()
    );
    if !bad.is_empty() {
        detail.push_str(&format!("; mismatches: {}", bad.join("; ")));
    }
    Outcome {
        pass: bad.is_empty() && tables.len() == 10,
        detail,
    }
}

fn tied_scores(rng: &mut ChaCha8Rng, n: usize, levels: u32) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect()
}

// 2. Sort-based AUC, brute-force AUC and trapezoidal ROC area agree.
fn auc_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA0C);
    let (mut worst_brute, mut worst_roc) = (0.0f64, 0.0f64);
    let mut tied_instances = 0;
    for _ in 0..500 {
        let levels = rng.random_range(2..30);
        let (n_pos, n_neg) = (rng.random_range(1..=200), rng.random_range(1..=200));
        let pos = tied_scores(&mut rng, n_pos, levels);
        let neg = tied_scores(&mut rng, n_neg, levels);
        let r = rank_auc(&pos, &neg).unwrap();
        if r.n_tied_pairs > 0 {
            tied_instances += 1;
        }
        worst_brute = worst_brute.max((r.value - auc_bruteforce(&pos, &neg).unwrap().value).abs());
        worst_roc = worst_roc.max((r.value - roc_curve(&pos, &neg).unwrap().area()).abs());
    }
    Outcome {
        pass: worst_brute < 1e-12 && worst_roc < 1e-12,
        detail: format!(
            "500 instances ({tied_instances} with ties): max |rank - brute| {worst_brute:.1e}, max |rank - roc area| {worst_roc:.1e}"
        ),
    }
}

fn random_store(rng: &mut ChaCha8Rng) -> Vec<Sample> {
    let k = rng.random_range(2..=5);
    let mut out = Vec::new();
    for d in 0..k {
        for label in [Label::Real, Label::Fake] {
            for i in 0..rng.random_range(1..=30) {
                let id = format!("d{d}-{label}-{i}");
                out.push(Sample {
                    sample_id: id.clone(),
                    dataset_id: format!("d{d}"),
                    video_id: id,
                    frame_idx: 0,
                    label,
                    // 0.05 grid: forced ties, and no two distinct values collide after the maps below
                    score: rng.random_range(0..=20) as f64 * 0.05,
                });
            }
        }
    }
    out
}

fn matrix_of(samples: &[Sample]) -> CrossAucMatrix {
    let store = ScoreStore::from_samples(samples.to_vec()).unwrap();
    cross_matrix(&store, Level::Frame, VideoAggregation::Mean).unwrap()
}

fn mapped(samples: &[Sample], f: impl Fn(&Sample) -> f64) -> Vec<Sample> {
    samples
        .iter()
        .map(|s| Sample {
            score: f(s),
            ..s.clone()
        })
        .collect()
}

// 3. Rank invariance of the whole matrix, and the direction of a one-dataset shift.
fn invariances() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED3);
    let transforms: [fn(f64) -> f64; 3] = [|x| 3.0 * x * x * x + x - 7.0, |x| x.exp(), |x| (x - 0.3).atan()];
    let mut violations = Vec::new();
    let mut moved = 0;
    for inst in 0..50 {
        let samples = random_store(&mut rng);
        let base = matrix_of(&samples);
        for (t, f) in transforms.iter().enumerate() {
            if matrix_of(&mapped(&samples, |s| f(s.score))) != base {
                violations.push(format!("store {inst}: transform {t} changed the matrix"));
            }
        }
        let k = base.k();
        let d = rng.random_range(0..k);
        let c = rng.random_range(0.01..0.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let id = base.dataset_ids[d].clone();
        let shifted = matrix_of(&mapped(&samples, |s| if s.dataset_id == id { s.score + c } else { s.score }));
        if shifted.get(d, d) != base.get(d, d) {
            violations.push(format!("store {inst}: diagonal of {id} moved"));
        }
        for j in (0..k).filter(|&j| j != d) {
            let (row_new, row_old) = (shifted.get(d, j).value().unwrap(), base.get(d, j).value().unwrap());
            let (col_new, col_old) = (shifted.get(j, d).value().unwrap(), base.get(j, d).value().unwrap());
            // raising the reals of d can only lower AUC(fakes_j, reals_d); raising its fakes only helps column d
            let ok = if c > 0.0 {
                row_new <= row_old && col_new >= col_old
            } else {
                row_new >= row_old && col_new <= col_old
            };
            if !ok {
                violations.push(format!("store {inst}: shift {c:+.3} of {id} moved cell {j} the wrong way"));
            }
            if row_new != row_old || col_new != col_old {
                moved += 1;
            }
        }
    }
    Outcome {
        pass: violations.is_empty(),
        detail: if violations.is_empty() {
            format!("50 stores x 3 monotone maps unchanged exactly; shifts kept diagonals and moved {moved} off-diagonal cells in the proven direction")
        } else {
            violations.join("; ")
        },
    }
}

// 4. Simulated Gaussian domains recover their closed-form AUC.
fn planted_auc() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6A55);
    let n = 2000;
    let mut worst_z = 0.0f64;
    let mut misses = Vec::new();
    for k in 0..20 {
        let spec = DomainSpec {
            dataset_id: format!("g{k}"),
            real_mean: rng.random_range(-1.0..1.0),
            real_std: rng.random_range(0.2..1.5),
            fake_mean: 0.0,
            fake_std: rng.random_range(0.2..1.5),
            n_real: n,
            n_fake: n,
            seed: k,
        };
        let spec = DomainSpec {
            fake_mean: spec.real_mean + rng.random_range(0.0..2.5),
            ..spec
        };
        let planted = spec.planted_auc();
        let samples = gen_domain(&spec).unwrap();
        let (fakes, reals): (Vec<&Sample>, Vec<&Sample>) = samples.iter().partition(|s| s.label == Label::Fake);
        let f: Vec<f64> = fakes.iter().map(|s| s.score).collect();
        let r: Vec<f64> = reals.iter().map(|s| s.score).collect();
        let measured = rank_auc(&f, &r).unwrap().value;
        let sd = (planted * (1.0 - planted) / n as f64).sqrt();
        let z = (measured - planted).abs() / sd;
        worst_z = worst_z.max(z);
        if z > 3.0 {
            misses.push(format!("g{k}: planted {planted:.4} measured {measured:.4}"));
        }
    }
    Outcome {
        pass: misses.is_empty(),
        detail: format!(
            "20 parameterizations at n={n}/side, worst deviation {worst_z:.2} binomial sd (limit 3){}",
            if misses.is_empty() { String::new() } else { format!("; {}", misses.join("; ")) }
        ),
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_CHECK_FLOOR)
}

/// Scores in (0.05, 0.95) with at least one forged and one authentic label and every
/// hinge argument at least `gap` away from its kink.
fn kink_free_scores(rng: &mut ChaCha8Rng, p: usize, m: f64, gap: f64) -> (Vec<f64>, Vec<f64>, Vec<u8>) {
    loop {
        let fake: Vec<f64> = (0..p).map(|_| rng.random_range(0.05..0.95)).collect();
        let real: Vec<f64> = (0..p).map(|_| rng.random_range(0.05..0.95)).collect();
        let mut labels: Vec<u8> = (0..p).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 1;
        labels[p - 1] = 0;
        let mut clear = true;
        for i in (0..p).filter(|&i| labels[i] == 1) {
            for j in (0..p).filter(|&j| labels[j] == 0) {
                clear &= (m - (fake[i] - fake[j])).abs() > gap;
            }
            clear &= (m - (fake[i] - real[i])).abs() > gap;
        }
        if clear {
            return (fake, real, labels);
        }
    }
}

fn fd_check(x: &[f64], analytic: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut worst = 0.0f64;
    let mut w = x.to_vec();
    for i in 0..x.len() {
        w[i] = x[i] + h;
        let up = f(&w);
        w[i] = x[i] - h;
        let down = f(&w);
        w[i] = x[i];
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * h)));
    }
    worst
}

// 5. Analytic gradients of each loss term and of the composed objective.
fn gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6EAD);
    let (p, m, h) = (16, 0.1, 1e-6);
    let (mut w_intra, mut w_pair, mut w_cls, mut w_total) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut rejected = 0;
    for _ in 0..100 {
        let (fake, real, labels) = kink_free_scores(&mut rng, p, m, 1e-3);

        let g = loss_rank_intra(&[(&fake, &labels)], m).unwrap();
        w_intra = w_intra.max(fd_check(&fake, &g.grads[0], h, |x| {
            loss_rank_intra(&[(x, &labels)], m).unwrap().value
        }));

        let g = loss_rank_pair(&[(&fake, &real, &labels)], m).unwrap();
        w_pair = w_pair.max(fd_check(&fake, &g.grads_fake[0], h, |x| {
            loss_rank_pair(&[(x, &real, &labels)], m).unwrap().value
        }));
        w_pair = w_pair.max(fd_check(&real, &g.grads_real[0], h, |x| {
            loss_rank_pair(&[(&fake, x, &labels)], m).unwrap().value
        }));

        let probs: Vec<f64> = (0..8).map(|_| rng.random_range(0.02..0.98)).collect();
        let y: Vec<u8> = (0..8).map(|_| rng.random_range(0..2)).collect();
        let (_, g) = loss_cls(&probs, &y).unwrap();
        w_cls = w_cls.max(fd_check(&probs, &g, h, |x| loss_cls(x, &y).unwrap().0));

        let batch = loop {
            let b = random_batch(&mut rng, 8, p, 2, LossWeights::default());
            if kink_distance(&b).unwrap() > 1e-3 {
                break b;
            }
            rejected += 1;
        };
        w_total = w_total.max(grad_check(&batch, 1e-5).unwrap().max_rel_err);
    }
    let worst = w_intra.max(w_pair).max(w_cls).max(w_total);
    Outcome {
        pass: worst < 1e-5,
        detail: format!(
            "100 kink-free instances (d=8, P=16; {rejected} near-kink batches redrawn): max rel err intra {w_intra:.1e}, pair {w_pair:.1e}, cls {w_cls:.1e}, composed {w_total:.1e} (limit 1e-5)"
        ),
    }
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> ImageBuffer {
    ImageBuffer::new(h, w, c, (0..h * w * c).map(|_| rng.random_range(0.0..=1.0)).collect()).unwrap()
}

fn random_affine(rng: &mut ChaCha8Rng, d: usize) -> Affine {
    Affine {
        weight: (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        bias: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

// 6. Pixel conservation, identity fixed point, probability complement and shift,
// loss recomposition and expert collapse.
fn identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1DE);
    let mut failures: Vec<String> = Vec::new();
    let mut cases = 0;

    for i in 0..250 {
        let (h, w, c) = (rng.random_range(1..12), rng.random_range(1..12), if rng.random_bool(0.5) { 3 } else { 1 });
        let real = random_image(&mut rng, h, w, c);
        let fake = random_image(&mut rng, h, w, c);
        let mask = BinaryMask::new(h, w, (0..h * w).map(|_| rng.random_range(0..2u8)).collect()).unwrap();
        let out = blend_swap(&real, &fake, &mask).unwrap();
        let ok = (0..h).all(|r| {
            (0..w).all(|col| {
                (0..c).all(|ch| {
                    let want = if mask.get(r, col) == 1 { fake.get(r, col, ch) } else { real.get(r, col, ch) };
                    out.get(r, col, ch) == want
                })
            })
        });
        if !ok {
            failures.push(format!("blend case {i}"));
        }

        let soft = SoftMask::new(h, w, (0..h * w).map(|_| rng.random_range(0.0..=1.0)).collect()).unwrap();
        if self_blend(&real, &TransformParams::identity(c), &soft).unwrap() != real {
            failures.push(format!("identity self-blend case {i}"));
        }
        cases += 2;
    }

    let mut worst_prob = 0.0f64;
    for _ in 0..250 {
        let (a, b) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let s = rng.random_range(-1.0..1.0);
        worst_prob = worst_prob
            .max((forgery_prob(a, b) + forgery_prob(b, a) - 1.0).abs())
            .max((forgery_prob(a + s, b + s) - forgery_prob(a, b)).abs());
        cases += 1;
    }
    if worst_prob > 1e-12 {
        failures.push(format!("probability identities off by {worst_prob:.1e}"));
    }

    let mut worst_recomp = 0.0f64;
    for _ in 0..250 {
        let weights = LossWeights {
            lambda1: rng.random_range(0.0..2.0),
            lambda2: rng.random_range(0.0..2.0),
            margin: rng.random_range(0.0..0.5),
        };
        let n_pairs = rng.random_range(1..4);
        let b = random_batch(&mut rng, 4, 4, n_pairs, weights);
        let o = total_loss(&b).unwrap().breakdown;
        let recomposed = o.l_cls + weights.lambda1 * o.l_rank_intra + weights.lambda2 * o.l_rank_pair;
        worst_recomp = worst_recomp.max((o.l_total - recomposed).abs());
        cases += 1;
    }
    if worst_recomp > 1e-12 {
        failures.push(format!("loss recomposition off by {worst_recomp:.1e}"));
    }

    let mut worst_moe = 0.0f64;
    for _ in 0..250 {
        let d = rng.random_range(1..8);
        let (gh, gw) = (rng.random_range(1..5), rng.random_range(1..5));
        let k = rng.random_range(1..7);
        let ids: Vec<u16> = (0..gh * gw).map(|_| rng.random_range(1..=k as u16)).collect();
        let map = RegionMap::new(gh, gw, k, ids, ClsPolicy::SharedKey).unwrap();
        let bank = ExpertBank::from_shared(k, random_affine(&mut rng, d));
        let cls: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let feats: Vec<Vec<f64>> = (0..gh * gw)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let moe = moe_key_projection(&cls, &feats, &map, &bank).unwrap();
        let base = shared_key_projection(&cls, &feats, &bank);
        for (a, b) in moe.iter().flatten().zip(base.iter().flatten()) {
            worst_moe = worst_moe.max((a - b).abs());
        }
        cases += 1;
    }
    if worst_moe > 1e-12 {
        failures.push(format!("expert collapse off by {worst_moe:.1e}"));
    }

    Outcome {
        pass: failures.is_empty() && cases >= 1000,
        detail: if failures.is_empty() {
            format!(
                "{cases} randomized cases; probability {worst_prob:.1e}, recomposition {worst_recomp:.1e}, expert collapse {worst_moe:.1e}"
            )
        } else {
            failures.join("; ")
        },
    }
}

// 7. Ranking terms on vs off, paired by seed, on held-out shifted domains.
fn toy_claim() -> Outcome {
    let seeds: Vec<u64> = (0..5).collect();
    let config = |seed: u64, lambda1: f64, lambda2: f64| ToyConfig {
        seed,
        weights: LossWeights {
            lambda1,
            lambda2,
            ..LossWeights::default()
        },
        ..ToyConfig::default()
    };
    let runs: Vec<_> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .flat_map(|&s| [config(s, 0.0, 0.0), config(s, 0.3, 0.2)])
            .map(|cfg| scope.spawn(move || run_toy(&cfg).map(|(r, _)| r.summary)))
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut wins = 0;
    let mut rows = Vec::new();
    for (k, pair) in runs.chunks(2).enumerate() {
        let (Ok(base), Ok(ranked)) = (&pair[0], &pair[1]) else {
            return Outcome {
                pass: false,
                detail: format!("seed {k} failed to train"),
            };
        };
        let gap = |s: &crossauc_core::cross_auc::CrossAucSummary| (s.intra_avg.unwrap() - s.cross_avg).abs();
        let delta = ranked.cross_avg - base.cross_avg;
        let win = delta >= 0.05 && gap(ranked) < gap(base);
        wins += win as usize;
        rows.push(format!(
            "seed {k}: cross {:.3}->{:.3} ({delta:+.3}), gap {:.3}->{:.3}{}",
            base.cross_avg,
            ranked.cross_avg,
            gap(base),
            gap(ranked),
            if win { "" } else { " (no win)" }
        ));
    }
    Outcome {
        pass: wins >= 4,
        detail: format!("{wins}/5 paired seeds improve Cross-AUC avg by >= 0.05 with a smaller gap [{}]", rows.join("; ")),
    }
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_crossauc")
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

/// Runs the CLI, returning (exit code, stdout) with the manifest timestamp removed.
fn run_cli(args: &[&str]) -> (i32, Vec<u8>) {
    let out = Command::new(bin()).args(args).env_remove("SOURCE_DATE_EPOCH").output().unwrap();
    (out.status.code().unwrap_or(-1), strip_timestamp(&out.stdout))
}

fn strip_timestamp(bytes: &[u8]) -> Vec<u8> {
    String::from_utf8_lossy(bytes)
        .lines()
        .filter(|l| !l.trim_start().starts_with("\"timestamp_unix\""))
        .flat_map(|l| l.bytes().chain(std::iter::once(b'\n')))
        .collect()
}

fn read_stripped(path: &Path) -> Vec<u8> {
    strip_timestamp(&std::fs::read(path).unwrap())
}

// 8. Every seeded command twice, outputs compared byte for byte.
fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).display().to_string();
    let (real, fake, lm) = (data("face_real_64.ppm"), data("face_fake_64.ppm"), data("landmarks_64.json"));
    let (real, fake, lm) = (real.to_str().unwrap(), fake.to_str().unwrap(), lm.to_str().unwrap());
    let spec = data("domain_spec.json");
    let batch = data("smooth_batch.json");
    let sweep_cfg = p("sweep.json");
    std::fs::write(&sweep_cfg, r#"{"steps": 20, "eval_pairs": 32, "data": {"n_pairs": 16}}"#).unwrap();

    let mut diffs = Vec::new();
    let mut checked = 0;
    for round in 0..2 {
        let tag = |name: &str| p(name);
        let jobs: Vec<(String, Vec<String>, Vec<String>)> = vec![
            ("toytrain".into(), vec!["toytrain".into(), "--seed".into(), "5".into()], vec![]),
            (
                "sweep".into(),
                vec!["sweep".into(), sweep_cfg.clone(), "--grid".into(), "0:0,0.3:0.2".into(), "--seeds".into(), "1,2".into()],
                vec![],
            ),
            (
                "simulate".into(),
                vec![
                    "simulate".into(),
                    spec.display().to_string(),
                    "--shifts".into(),
                    "0,0.5,-1".into(),
                    "--seed".into(),
                    "9".into(),
                    "--out".into(),
                    tag("sim.jsonl"),
                ],
                vec![tag("sim.jsonl")],
            ),
            ("fixture-scores".into(), vec!["fixture-scores".into(), "ours".into()], vec![]),
            ("losses".into(), vec!["losses".into(), batch.display().to_string(), "--grad-check".into()], vec![]),
            ("verify-table".into(), vec!["verify-table".into(), "ours".into()], vec![]),
        ]
        .into_iter()
        .chain(["swap", "self-blend", "random"].into_iter().map(|mode| {
            (
                format!("augment {mode}"),
                vec![
                    "augment".into(),
                    "--real".into(),
                    real.into(),
                    "--fake".into(),
                    fake.into(),
                    "--landmarks".into(),
                    lm.into(),
                    "--mode".into(),
                    mode.into(),
                    "--seed".into(),
                    "17".into(),
                    "--out-image".into(),
                    tag(&format!("{mode}.ppm")),
                    "--out-mask".into(),
                    tag(&format!("{mode}.pgm")),
                ],
                vec![tag(&format!("{mode}.ppm")), tag(&format!("{mode}.pgm"))],
            )
        }))
        .collect();
        for (name, args, files) in jobs {
            let argv: Vec<&str> = args.iter().map(String::as_str).collect();
            let (code, stdout) = run_cli(&argv);
            if code != 0 {
                diffs.push(format!("{name} exited {code}"));
            }
            let mut blobs = vec![stdout];
            blobs.extend(files.iter().map(|f| read_stripped(Path::new(f))));
            std::fs::write(p(&format!("{name}.out{round}")), blobs.concat()).unwrap();
            if round == 1 {
                checked += 1;
                if read_stripped(Path::new(&p(&format!("{name}.out0")))) != blobs.concat() {
                    diffs.push(format!("{name} differs between runs"));
                }
            }
        }
    }
    // the eval of the simulated scores must also be stable
    let (_, e0) = run_cli(&["eval", &p("sim.jsonl")]);
    let (_, e1) = run_cli(&["eval", &p("sim.jsonl")]);
    checked += 1;
    if e0 != e1 {
        diffs.push("eval differs between runs".into());
    }
    Outcome {
        pass: diffs.is_empty(),
        detail: if diffs.is_empty() {
            format!("{checked} commands byte-identical across two runs (timestamp excluded)")
        } else {
            diffs.join("; ")
        },
    }
}
