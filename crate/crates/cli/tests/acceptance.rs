//! Acceptance checks. Each test prints one `PASS`/`FAIL` line straight to
//! stdout (bypassing the harness capture) and then asserts.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use lau_core::config::ExperimentConfig;
use lau_core::gradcheck::{check_lau_backward, check_network, GradcheckOptions};
use lau_core::losses::{
    offset_guided_loss, regression_loss, select_candidate, select_theta_opt, CandidateSet,
    CoordinateMap, LossMap, CANDIDATES,
};
use lau_core::net::{LossKind, UpsamplerKind};
use lau_core::samplers::{
    bilinear_upsample, corner_upsample, lau_forward, pixel_shuffle, pixel_unshuffle, Corner,
    OffsetField, Rounding,
};
use lau_core::synth::speckle_rate;
use lau_core::train::{poly_lr, train};
use lau_core::{LabelMap, Rng, Tensor4};

/// Runs checks one at a time so wall-clock budgets are not shared.
static SERIAL: Mutex<()> = Mutex::new(());

fn report(id: u32, name: &str, pass: bool, elapsed: Duration, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!(
        "acceptance {id:>2} {name:<26} {verdict}  ({:.2}s) {detail}\n",
        elapsed.as_secs_f64()
    );
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
}

fn run_check(id: u32, name: &str, budget: Duration, check: impl FnOnce() -> (bool, String)) {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let (ok, detail) = check();
    let elapsed = start.elapsed();
    let in_time = elapsed <= budget;
    let detail = if in_time {
        detail
    } else {
        format!("{detail}; over the {}s budget", budget.as_secs())
    };
    report(id, name, ok && in_time, elapsed, &detail);
    assert!(ok && in_time, "acceptance {id} ({name}) failed: {detail}");
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

#[test]
fn acceptance_01_zero_offsets_degenerate_to_bilinear() {
    run_check(1, "degeneration", secs(5), || {
        let mut rng = Rng::new(101);
        let mut worst: f64 = 0.0;
        for i in 0..50 {
            let k = [1, 2, 4, 8][i % 4];
            let shape = [rng.below(1, 3), rng.below(1, 5), rng.below(1, 7), rng.below(1, 7)];
            let u = Tensor4::uniform(shape, -3.0, 3.0, &mut rng);
            let m = if rng.uniform() < 0.5 { 1 } else { shape[1] };
            let off = OffsetField::zeros(shape[0], m, k * shape[2], k * shape[3]);
            let lau = lau_forward(&u, &off, k).unwrap();
            worst = worst.max(lau.max_abs_diff(&bilinear_upsample(&u, k).unwrap()));
        }
        (worst <= 1e-12, format!("50 instances, max abs diff {worst:.2e}"))
    });
}

#[test]
fn acceptance_02_sampler_gradients() {
    run_check(2, "sampler gradients", secs(30), || {
        let mut cases = 0;
        let mut worst: f64 = 0.0;
        let mut failures = 0;
        for seed in 0..2 {
            let r = check_lau_backward(GradcheckOptions {
                seed,
                cases: 100,
                h: 1e-6,
                margin: 1e-3,
            })
            .unwrap();
            cases += r.cases;
            worst = worst.max(r.max_rel_err);
            failures += r.failures;
        }
        (
            failures == 0 && worst <= 1e-5 && cases >= 100,
            format!("{cases} configurations, max rel err {worst:.2e}, {failures} failures"),
        )
    });
}

/// `V[b, c, y, x] = Σ δ(c' = c·k² + k·(y mod k) + x mod k)·δ(y' = ⌊y/k⌋)·δ(x' = ⌊x/k⌋)·U[b, c', y', x']`.
fn shuffle_oracle(u: &Tensor4, k: usize) -> Tensor4 {
    let [n, c, h, w] = u.shape();
    let co = c / (k * k);
    let mut v = Tensor4::zeros([n, co, k * h, k * w]);
    for b in 0..n {
        for oc in 0..co {
            for y in 0..k * h {
                for x in 0..k * w {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for iy in 0..h {
                            for ix in 0..w {
                                let hit = ic == oc * k * k + k * (y % k) + x % k && iy == y / k && ix == x / k;
                                if hit {
                                    acc += u.at(b, ic, iy, ix);
                                }
                            }
                        }
                    }
                    *v.at_mut(b, oc, y, x) = acc;
                }
            }
        }
    }
    v
}

#[test]
fn acceptance_03_pixel_shuffle() {
    run_check(3, "pixel shuffle", secs(5), || {
        let mut rng = Rng::new(303);
        let mut shapes = 0;
        let mut bad = Vec::new();
        for k in 1..=3 {
            for n in 1..=2 {
                for c in (k * k..=18).step_by(k * k) {
                    for h in 1..=3 {
                        for w in 1..=3 {
                            let u = Tensor4::uniform([n, c, h, w], -1.0, 1.0, &mut rng);
                            let v = pixel_shuffle(&u, k).unwrap();
                            let exact = v.data() == shuffle_oracle(&u, k).data();
                            let round = pixel_unshuffle(&v, k).unwrap().data() == u.data();
                            shapes += 1;
                            if !(exact && round) {
                                bad.push(([n, c, h, w], k));
                            }
                        }
                    }
                }
            }
        }
        (bad.is_empty(), format!("{shapes} shapes, mismatches {bad:?}"))
    });
}

/// Indicator-kernel oracle: sums every input pixel whose integer coordinate
/// equals the rounded, clipped source point.
fn corner_oracle(u: &Tensor4, k: usize, corner: Corner) -> Tensor4 {
    let [n, c, h, w] = u.shape();
    let pick = |mode: Rounding, pos: usize, len: usize| {
        let p = pos as f64 / k as f64;
        let r = match mode {
            Rounding::Floor => p.floor(),
            Rounding::Ceil => p.ceil(),
        };
        r.clamp(0.0, (len - 1) as f64)
    };
    let mut v = Tensor4::zeros([n, c, k * h, k * w]);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..k * h {
                for x in 0..k * w {
                    let (qx, qy) = (pick(corner.x_mode, x, w), pick(corner.y_mode, y, h));
                    let mut acc = 0.0;
                    for iy in 0..h {
                        for ix in 0..w {
                            let psi = f64::from(u8::from(ix as f64 == qx && iy as f64 == qy));
                            acc += psi * u.at(b, ch, iy, ix);
                        }
                    }
                    *v.at_mut(b, ch, y, x) = acc;
                }
            }
        }
    }
    v
}

#[test]
fn acceptance_04_corner_samplers() {
    run_check(4, "corner samplers", secs(5), || {
        let mut rng = Rng::new(404);
        let mut clipped = 0;
        let mut bad = 0;
        for i in 0..50 {
            // Every other instance uses a 1-pixel axis, where ceil always clips.
            let h = if i % 2 == 0 { 1 } else { rng.below(2, 5) };
            let w = rng.below(1, 5);
            let k = rng.below(1, 5);
            let u = Tensor4::uniform([rng.below(1, 3), rng.below(1, 3), h, w], -1.0, 1.0, &mut rng);
            let corner = Corner::ALL[i % 4];
            if k > 1 && (corner.x_mode == Rounding::Ceil || corner.y_mode == Rounding::Ceil) {
                clipped += 1;
            }
            if corner_upsample(&u, k, corner).unwrap().data() != corner_oracle(&u, k, corner).data() {
                bad += 1;
            }
        }
        (bad == 0, format!("50 instances ({clipped} with ceil clipping), {bad} mismatches"))
    });
}

fn random_candidates(rng: &mut Rng) -> CandidateSet {
    let (n, h, w) = (rng.below(1, 3), rng.below(1, 5), rng.below(1, 5));
    let len = n * h * w;
    let valid: Vec<bool> = (0..len).map(|_| rng.uniform() > 0.15).collect();
    let losses = std::array::from_fn(|_| {
        // Coarse values make exact ties common.
        let values = (0..len).map(|_| (rng.below(0, 6) as f64) * 0.25).collect();
        LossMap::new(n, h, w, values, valid.clone()).unwrap()
    });
    let coords = std::array::from_fn(|_| {
        let px = (0..len).map(|_| rng.uniform_range(0.0, 4.0)).collect();
        let py = (0..len).map(|_| rng.uniform_range(0.0, 4.0)).collect();
        CoordinateMap::new(n, h, w, px, py).unwrap()
    });
    CandidateSet::new(losses, coords).unwrap()
}

fn huber(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

#[test]
fn acceptance_05_losses() {
    run_check(5, "location-aware losses", secs(10), || {
        let mut rng = Rng::new(505);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let cs = random_candidates(&mut rng);
            let (gamma, lambda) = (rng.uniform_range(0.0, 1.0), rng.uniform_range(0.0, 1.0));
            let l = &cs.losses[0];

            let off = offset_guided_loss(l, &cs.losses[1], lambda).unwrap();
            let reg = regression_loss(&cs, gamma, lambda).unwrap();
            for i in 0..l.values.len() {
                let (want_off, want_reg) = if l.valid[i] {
                    let li = l.values[i];
                    let aux = cs.losses[1].values[i];
                    let w_off = if li < aux { 1.0 } else { 1.0 + lambda };
                    let omega: Vec<f64> = cs.losses.iter().map(|m| m.values[i]).collect();
                    let w_reg = if omega.iter().all(|&o| li <= o) { 1.0 } else { 1.0 + lambda };
                    let mut best = 0;
                    for j in 1..CANDIDATES {
                        if omega[j] < omega[best] {
                            best = j;
                        }
                    }
                    let dx = cs.coords[best].px[i] - cs.coords[0].px[i];
                    let dy = cs.coords[best].py[i] - cs.coords[0].py[i];
                    (li * w_off, gamma * (huber(dx) + huber(dy)) + li * w_reg)
                } else {
                    (0.0, 0.0)
                };
                worst = worst.max((off.values[i] - want_off).abs());
                worst = worst.max((reg.values[i] - want_reg).abs());
            }
        }

        // Constructed ties: LaU ties a corner, then two corners tie.
        let tie = |vals: [f64; CANDIDATES]| {
            let losses = vals.map(|v| LossMap::all_valid(1, 1, 1, vec![v]).unwrap());
            let coords = std::array::from_fn(|j| CoordinateMap::new(1, 1, 1, vec![j as f64], vec![0.0]).unwrap());
            let cs = CandidateSet::new(losses, coords).unwrap();
            (select_candidate(&cs)[0], select_theta_opt(&cs).px[0])
        };
        let ties = [
            (tie([0.5, 0.5, 0.5, 0.5, 0.5]), (0, 0.0)),
            (tie([0.7, 0.2, 0.9, 0.2, 0.2]), (1, 1.0)),
            (tie([0.7, 0.9, 0.3, 0.8, 0.3]), (2, 2.0)),
            (tie([0.4, 0.9, 0.9, 0.4, 0.4]), (0, 0.0)),
        ];
        let ties_ok = ties.iter().all(|(got, want)| got == want);
        (
            worst <= 1e-12 && ties_ok,
            format!("100 candidate sets, max abs diff {worst:.2e}, tie order respected: {ties_ok}"),
        )
    });
}

#[test]
fn acceptance_06_end_to_end_gradients() {
    run_check(6, "end-to-end gradients", secs(60), || {
        let mut parts = Vec::new();
        let mut ok = true;
        for loss in [LossKind::Ce, LossKind::Off, LossKind::Reg] {
            let r = check_network(GradcheckOptions::default(), loss).unwrap();
            ok &= r.passed() && r.max_rel_err <= 1e-4;
            parts.push(format!("{} {} params max {:.2e}", loss.name(), r.checked / r.cases, r.max_rel_err));
        }
        (ok, parts.join(", "))
    });
}

#[test]
fn acceptance_07_lau_matches_or_beats_bilinear() {
    run_check(7, "training direction", secs(60 * 60), || {
        let mut lau = Vec::new();
        let mut base = Vec::new();
        let mut slowest = Duration::ZERO;
        for seed in 0..5 {
            let off_cfg = ExperimentConfig { seed, ..Default::default() };
            let bil_cfg = ExperimentConfig {
                seed,
                upsampler: UpsamplerKind::Bilinear,
                loss: LossKind::Ce,
                ..Default::default()
            };
            for (cfg, sink) in [(off_cfg, &mut lau), (bil_cfg, &mut base)] {
                let (tr, va) = cfg.datasets().unwrap();
                let start = Instant::now();
                let outcome = train(&cfg.train_config(), &tr, &va).unwrap();
                slowest = slowest.max(start.elapsed());
                sink.push(outcome.final_val().unwrap().miou);
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (m_lau, m_base) = (mean(&lau), mean(&base));
        let in_time = slowest <= secs(300);
        (
            m_lau >= m_base && in_time,
            format!(
                "mean val mIoU lau_off {m_lau:.4} vs bilinear {m_base:.4}; slowest run {:.0}s",
                slowest.as_secs_f64()
            ),
        )
    });
}

fn lau_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lau"))
}

fn write_small_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("small.json");
    std::fs::write(
        &path,
        r#"{"image_size": 16, "train_count": 8, "val_count": 4, "epochs": 2, "batch": 4, "c_prime": 8}"#,
    )
    .unwrap();
    path
}

#[test]
fn acceptance_08_lambda_sweep() {
    run_check(8, "lambda sweep", secs(120), || {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_small_config(dir.path());
        let out = dir.path().join("sweep");
        let status = lau_bin()
            .args(["sweep", "--param", "lambda", "--values", "0,0.1,0.2,0.3,0.4", "--seeds", "0,1"])
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap_or_default();
        let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
        let grid = ["0", "0.1", "0.2", "0.3", "0.4"];
        let per_seed_ok = ["0", "1"].iter().all(|s| {
            let vals: Vec<&str> = rows.iter().filter(|r| r[2] == *s).map(|r| r[1]).collect();
            vals == grid
        });
        let ok = status.status.success()
            && csv.lines().next() == Some("param,value,seed,final_miou,final_pixacc")
            && rows.len() == 10
            && per_seed_ok;
        (ok, format!("{} rows over 2 seeds, grid per seed matches: {per_seed_ok}", rows.len()))
    });
}

#[test]
fn acceptance_09_poly_schedule() {
    run_check(9, "poly schedule", secs(1), || {
        let total = 1000;
        let mid = poly_lr(0.001, total / 2, total, 0.9);
        let start = poly_lr(0.001, 0, total, 0.9);
        let end = poly_lr(0.001, total, total, 0.9);
        let ok = (mid - 5.3589e-4).abs() <= 1e-8 && start == 0.001 && end == 0.0;
        (ok, format!("midpoint {mid:.10e}, start {start}, end {end}"))
    });
}

#[test]
fn acceptance_10_speckle_detector() {
    run_check(10, "speckle detector", secs(1), || {
        let constant = LabelMap::filled(1, 6, 7, 2, 3).unwrap();
        let checker: Vec<i32> = (0..6 * 7).map(|i| (i / 7 + i % 7) % 2).collect();
        let checker = LabelMap::new(1, 6, 7, checker, 2).unwrap();
        let mut planted = vec![0; 25];
        planted[2 * 5 + 2] = 1;
        let planted = LabelMap::new(1, 5, 5, planted, 2).unwrap();
        let rates = [
            speckle_rate(&constant).unwrap(),
            speckle_rate(&checker).unwrap(),
            speckle_rate(&planted).unwrap(),
        ];
        let ok = rates[0] == 0.0 && rates[1] == 1.0 && (rates[2] - 1.0 / 9.0).abs() < 1e-15;
        (ok, format!("constant {}, checkerboard {}, planted {:.6}", rates[0], rates[1], rates[2]))
    });
}
