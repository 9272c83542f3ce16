//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line for
//! each and exits non-zero if any failed.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use emss::dataset::{generate_synthetic, DataMatrix, SyntheticSpec};
use emss::error::Error;
use emss::kpca::{self, KernelSpec};
use emss::motion::synth::{add_noise, Scene};
use emss::motion::{estimate_field, imc, solve_update, DisplacementField, FieldConfig, Frame, Retention, SolverSpec};
use emss::pca::{self, principal_angle, EmConfig};
use emss::spca;

/// Records the largest single allocation while `TRACKING` is set.
struct Counting;

static TRACKING: AtomicBool = AtomicBool::new(false);
static LARGEST: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        if TRACKING.load(Ordering::Relaxed) {
            LARGEST.fetch_max(layout.size(), Ordering::Relaxed);
        }
        unsafe { System.alloc(layout) }
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) }
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        if TRACKING.load(Ordering::Relaxed) {
            LARGEST.fetch_max(new_size, Ordering::Relaxed);
        }
        unsafe { System.realloc(ptr, layout, new_size) }
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gaussian(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| r.sample(StandardNormal))
}

fn random_orthonormal(n: usize, r: &mut ChaCha8Rng) -> DMatrix<f64> {
    gaussian(n, n, r).qr().q()
}

/// Eigenpairs of a symmetric matrix from nalgebra, sorted descending.
fn oracle_eigen(s: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let e = s.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..s.nrows()).collect();
    order.sort_by(|&a, &b| e.eigenvalues[b].total_cmp(&e.eigenvalues[a]));
    let values = order.iter().map(|&i| e.eigenvalues[i]).collect();
    let vectors = DMatrix::from_columns(&order.iter().map(|&i| e.eigenvectors.column(i).into_owned()).collect::<Vec<_>>());
    (values, vectors)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

/// Route equivalence of the three PCA routes.
fn criterion_1() -> Verdict {
    let start = Instant::now();
    let (mut worst_angle, mut worst_value) = (0.0f64, 0.0f64);
    let mut failures = 0;
    for seed in 0..50u64 {
        let mut r = rng(1000 + seed);
        let p = r.random_range(4..=20);
        let n = r.random_range(25..=50);
        let k = r.random_range(1..=3usize);
        let eigenvalues: Vec<f64> = (0..k).map(|i| 16.0 / 2f64.powi(i as i32)).collect();
        let spec = SyntheticSpec {
            p,
            n,
            true_rank: k,
            eigenvalues,
            noise_sigma: 0.2,
            seed,
        };
        let (m, _) = generate_synthetic(&spec).unwrap();
        let cov = pca::pca_covariance(&m, k).unwrap();
        let svd = pca::pca_svd(&m, k).unwrap();
        let em = pca::pca_em(&m, &EmConfig::new(k).with_seed(seed).with_tolerance(1e-12).with_max_iterations(20_000)).unwrap();
        for other in [&svd, &em] {
            let angle = principal_angle(&cov.basis, &other.basis).unwrap();
            let value = cov
                .eigenvalues
                .iter()
                .zip(&other.eigenvalues)
                .map(|(a, b)| rel(*b, *a))
                .fold(0.0, f64::max);
            worst_angle = worst_angle.max(angle);
            worst_value = worst_value.max(value);
            if angle >= 1e-4 || value >= 1e-4 {
                failures += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        failures == 0 && elapsed < Duration::from_secs(10),
        format!(
            "50 instances, worst angle {worst_angle:.2e} rad, worst eigenvalue error {worst_value:.2e}, {failures} failures, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

/// Random PSD matrix with a geometric spectrum and some exact zeros.
fn psd_instance(seed: u64) -> DMatrix<f64> {
    let mut r = rng(2000 + seed);
    let n = r.random_range(8..=30);
    let q = random_orthonormal(n, &mut r);
    let ratio: f64 = r.random_range(0.55..0.8);
    let zeros = r.random_range(0..n / 4);
    let values = DVector::from_fn(n, |i, _| if i + zeros >= n { 0.0 } else { 10.0 * ratio.powi(i as i32) });
    let s = &q * DMatrix::from_diagonal(&values) * q.transpose();
    (&s + s.transpose()) * 0.5
}

/// Constrained EM against the dense oracle; the unconstrained pair only gets the span.
fn criterion_2() -> Verdict {
    let start = Instant::now();
    let q = 3;
    let (mut worst_cos, mut worst_value, mut worst_span) = (0.0f64, 0.0f64, 0.0f64);
    let mut failures = 0;
    let mut rotated = 0;
    let mut runs = 0;
    for inst in 0..20u64 {
        let s = psd_instance(inst);
        let (values, vectors) = oracle_eigen(&s);
        let top = vectors.columns(0, q).into_owned();
        for seed in 0..3u64 {
            runs += 1;
            let cfg = EmConfig::new(q).with_seed(seed).with_tolerance(1e-13).with_max_iterations(200_000);
            let e = kpca::mcem_eigs(&s, q, &cfg).unwrap();
            let mut ok = e.converged;
            for j in 0..q {
                let cos = e.vectors.column(j).dot(&vectors.column(j)).abs();
                worst_cos = worst_cos.max(1.0 - cos);
                worst_value = worst_value.max(rel(e.values[j], values[j]));
                ok &= cos > 1.0 - 1e-6 && rel(e.values[j], values[j]) < 1e-6;
            }
            let u = kpca::em_eigs_unconstrained(&s, q, &EmConfig::new(q).with_seed(seed).with_tolerance(1e-12).with_max_iterations(200_000)).unwrap();
            let span = principal_angle(&u.vectors.clone().qr().q(), &top).unwrap();
            worst_span = worst_span.max(span);
            ok &= span < 1e-5;
            let misaligned = (0..q).any(|j| {
                let w = u.vectors.column(j);
                (w.dot(&vectors.column(j)) / w.norm()).abs() < 1.0 - 1e-3
            });
            if misaligned {
                rotated += 1;
            }
            if !ok {
                failures += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        failures == 0 && rotated * 2 > runs && elapsed < Duration::from_secs(30),
        format!(
            "{runs} runs, worst 1-|cos| {worst_cos:.2e}, worst eigenvalue error {worst_value:.2e}; unconstrained span angle <= {worst_span:.2e}, \
             individual vectors off in {rotated}/{runs}; {failures} failures, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

/// Largest allocation of an EM fit at p = 10^4 stays below one p x p buffer.
fn criterion_3() -> Verdict {
    let (p, k, n) = (10_000usize, 3usize, 200usize);
    let spec = SyntheticSpec {
        p,
        n,
        true_rank: k,
        eigenvalues: vec![9.0, 4.0, 1.0],
        noise_sigma: 0.05,
        seed: 3,
    };
    let (m, _) = generate_synthetic(&spec).unwrap();
    let cfg = EmConfig::new(k).with_seed(3).with_tolerance(1e-8).with_max_iterations(500);
    let start = Instant::now();
    LARGEST.store(0, Ordering::SeqCst);
    TRACKING.store(true, Ordering::SeqCst);
    let fit = pca::pca_em(&m, &cfg);
    TRACKING.store(false, Ordering::SeqCst);
    let elapsed = start.elapsed();
    let largest = LARGEST.load(Ordering::SeqCst);
    let limit = p * p * 8;
    match fit {
        Ok(model) => verdict(
            largest < limit && model.converged && elapsed < Duration::from_secs(60),
            format!(
                "largest allocation {largest} bytes (p x p would be {limit}), converged {} in {} iterations, {:.2}s",
                model.converged,
                model.iterations,
                elapsed.as_secs_f64()
            ),
        ),
        Err(e) => verdict(false, format!("fit failed: {e}")),
    }
}

/// EM with missing entries against the complete fit and mean imputation.
fn criterion_4() -> Verdict {
    let mut worst_gap = 0.0f64;
    let mut wins = 0;
    let mut failures = 0;
    for seed in 0..20u64 {
        let spec = SyntheticSpec {
            p: 12,
            n: 150,
            true_rank: 2,
            eigenvalues: vec![9.0, 4.0],
            noise_sigma: 0.3,
            seed: 4000 + seed,
        };
        let (full, planted) = generate_synthetic(&spec).unwrap();
        let masked = full.with_random_mask(0.1, seed).unwrap();
        let cfg = EmConfig::new(2).with_seed(seed).with_tolerance(1e-10).with_max_iterations(20_000);
        let complete = pca::pca_em(&full, &cfg).unwrap();
        let missing = pca::pca_em(&masked, &cfg).unwrap();
        let imputed = pca::pca_covariance(&masked.impute_mean(), 2).unwrap();
        let gap = principal_angle(&missing.basis, &complete.basis).unwrap();
        worst_gap = worst_gap.max(gap);
        if gap >= 0.1 || !missing.converged {
            failures += 1;
        }
        let em_angle = principal_angle(&missing.basis, &planted).unwrap();
        let mean_angle = principal_angle(&imputed.basis, &planted).unwrap();
        if em_angle < mean_angle {
            wins += 1;
        }
    }
    verdict(
        failures == 0 && wins >= 16,
        format!("worst angle to complete-data fit {worst_gap:.3} rad, beats mean imputation on {wins}/20 seeds"),
    )
}

fn dense_log_density(model: &spca::SpcaModel, y: &DVector<f64>) -> f64 {
    let c = model.loadings();
    let p = c.nrows();
    let cov = &c * c.transpose() + DMatrix::identity(p, p) * model.noise_level;
    let chol = cov.cholesky().unwrap();
    let v = y - &model.subspace.mean;
    let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    let quad = v.dot(&chol.solve(&v));
    -0.5 * (p as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + quad)
}

/// Sensible PCA: monotone likelihood, noise recovery, density oracle, ordering.
fn criterion_5() -> Verdict {
    let mut notes = Vec::new();
    let mut pass = true;

    let mut worst_drop = 0.0f64;
    for seed in 0..10u64 {
        let spec = SyntheticSpec {
            p: 8,
            n: 300,
            true_rank: 2,
            eigenvalues: vec![6.0, 3.0],
            noise_sigma: 0.5 + 0.1 * seed as f64,
            seed: 5000 + seed,
        };
        let (m, _) = generate_synthetic(&spec).unwrap();
        let model = spca::spca_em(&m, &EmConfig::new(2).with_seed(seed).with_tolerance(1e-10).with_max_iterations(5000)).unwrap();
        for w in model.log_likelihood_trace.windows(2) {
            let drop = (w[0] - w[1]) / w[0].abs().max(1.0);
            worst_drop = worst_drop.max(drop);
        }
    }
    pass &= worst_drop <= 1e-8;
    notes.push(format!("largest relative likelihood drop {worst_drop:.1e}"));

    let sigma: f64 = 0.5;
    let spec = SyntheticSpec {
        p: 8,
        n: 2000,
        true_rank: 2,
        eigenvalues: vec![6.0, 3.0],
        noise_sigma: sigma,
        seed: 55,
    };
    let (m, _) = generate_synthetic(&spec).unwrap();
    let model = spca::spca_em(&m, &EmConfig::new(2).with_tolerance(1e-9).with_max_iterations(5000)).unwrap();
    let noise_err = rel(model.noise_level, sigma * sigma);
    pass &= noise_err < 0.2;
    notes.push(format!("noise {:.4} vs {:.4}", model.noise_level, sigma * sigma));

    let mut worst_density = 0.0f64;
    let mut r = rng(56);
    for trial in 0..5u64 {
        let p = 3 + trial as usize;
        let spec = SyntheticSpec {
            p,
            n: 200,
            true_rank: 2,
            eigenvalues: vec![5.0, 2.0],
            noise_sigma: 0.4,
            seed: 5600 + trial,
        };
        let (m, _) = generate_synthetic(&spec).unwrap();
        let model = spca::spca_em(&m, &EmConfig::new(2).with_tolerance(1e-9)).unwrap();
        for _ in 0..10 {
            let y = DVector::from_fn(p, |_, _| 2.0 * r.sample::<f64, _>(StandardNormal));
            let got = spca::spca_log_likelihood(&model, &y).unwrap();
            worst_density = worst_density.max(rel(got, dense_log_density(&model, &y)));
        }
    }
    pass &= worst_density < 1e-8;
    notes.push(format!("density vs dense oracle {worst_density:.1e}"));

    let w1 = model.subspace.basis.column(0).into_owned();
    let far = &model.subspace.mean + w1 * (50.0 * model.subspace.eigenvalues[0].sqrt());
    let train = m.values().column(0).into_owned();
    let (l_far, l_train) = (
        spca::spca_log_likelihood(&model, &far).unwrap(),
        spca::spca_log_likelihood(&model, &train).unwrap(),
    );
    pass &= l_far < l_train;
    notes.push(format!("far on-subspace point {l_far:.1} < training point {l_train:.1}"));
    verdict(pass, notes.join("; "))
}

/// Three tight clusters of 50 points in 3-D, the incomplete Cholesky case.
fn clustered_points() -> DataMatrix {
    let mut r = rng(66);
    let centres = [[0.0, 0.0, 0.0], [4.0, 2.0, 0.0], [8.0, 4.0, 0.0]];
    DataMatrix::new(DMatrix::from_fn(3, 50, |i, j| centres[j % 3][i] + 0.01 * r.sample::<f64, _>(StandardNormal))).unwrap()
}

/// Linear-kernel KPCA against PCA scores, and the incomplete Cholesky budget.
fn criterion_6() -> Verdict {
    let mut worst = 0.0f64;
    let mut failures = 0;
    for seed in 0..10u64 {
        let spec = SyntheticSpec {
            p: 6,
            n: 40,
            true_rank: 3,
            eigenvalues: vec![9.0, 4.0, 1.5],
            noise_sigma: 0.2,
            seed: 6000 + seed,
        };
        let (m, _) = generate_synthetic(&spec).unwrap();
        let q = 3;
        let reference = pca::pca_covariance(&m, q).unwrap();
        let scores = reference.scores(m.values()).unwrap();
        let model = kpca::kpca_fit(&m, &KernelSpec::Linear, q, &EmConfig::new(q).with_seed(seed).with_tolerance(1e-15).with_max_iterations(200_000), true)
            .unwrap();
        let kscores = kpca::training_scores(&model).unwrap();
        let scale = scores.amax().max(1.0);
        for j in 0..q {
            let a = scores.row(j);
            let b = kscores.row(j);
            let err = (a - b).amax().min((a + b).amax()) / scale;
            worst = worst.max(err);
            if err >= 1e-6 {
                failures += 1;
            }
        }
    }
    let points = clustered_points();
    let k = kpca::kernel_matrix(&points, &KernelSpec::Rbf { gamma: 0.5 }).unwrap();
    let factor = kpca::incomplete_cholesky(&k, 1e-6).unwrap();
    let recon = (&k - &factor.l * factor.l.transpose()).norm() / k.norm();
    verdict(
        failures == 0 && factor.rank < 25 && recon < 1e-3,
        format!(
            "worst score error {worst:.1e} over 10 instances; incomplete Cholesky rank {} on 50 points, reconstruction error {recon:.1e}",
            factor.rank
        ),
    )
}

const SHIFTS: [[f64; 2]; 2] = [[2.0, 1.0], [0.5, 0.25]];
const MARGIN: usize = 8;
const SIZE: usize = 64;

fn solvers() -> [SolverSpec; 4] {
    [SolverSpec::Ols, SolverSpec::rls(100.0), SolverSpec::pcr1(), SolverSpec::pcr2(100.0)]
}

/// `count` frames of a textured scene drifting by `shift`, optionally noisy.
fn motion_sequence(seed: u64, shift: [f64; 2], snr: Option<f64>, count: usize) -> Vec<Frame> {
    let scene = Scene::random_band(seed, 6, [8.0, 16.0]);
    (0..count)
        .map(|k| {
            let t = k as f64;
            let f = scene.render(SIZE, SIZE, [shift[0] * t, shift[1] * t]).unwrap();
            match snr {
                Some(db) => add_noise(&f, db, seed * 100 + k as u64).unwrap(),
                None => f,
            }
        })
        .collect()
}

/// Median displacement accuracy for every solver, noiseless and at 20 dB.
fn criterion_7() -> Verdict {
    let start = Instant::now();
    let mut worst = [[0.0f64; 4]; 2];
    for (ni, snr) in [None, Some(20.0)].into_iter().enumerate() {
        for shift in SHIFTS {
            for seed in 0..3u64 {
                let frames = motion_sequence(seed, shift, snr, 2);
                for (si, solver) in solvers().into_iter().enumerate() {
                    let cfg = FieldConfig {
                        solver,
                        ..FieldConfig::default()
                    };
                    let field = estimate_field(&frames[0], &frames[1], &cfg).unwrap();
                    let m = field.interior_median(MARGIN).unwrap();
                    let err = (m[0] - shift[0]).hypot(m[1] - shift[1]);
                    worst[ni][si] = worst[ni][si].max(err);
                }
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = worst[0].iter().all(|e| *e < 0.1) && worst[1].iter().all(|e| *e < 0.5) && elapsed < Duration::from_secs(60);
    let fmt = |w: &[f64; 4]| {
        solvers()
            .iter()
            .zip(w)
            .map(|(s, e)| format!("{} {e:.3}", s.name()))
            .collect::<Vec<_>>()
            .join(", ")
    };
    verdict(
        pass,
        format!(
            "worst median error noiseless [{}], 20 dB [{}] px, {:.2}s",
            fmt(&worst[0]),
            fmt(&worst[1]),
            elapsed.as_secs_f64()
        ),
    )
}

/// IMC edge cases and the estimated-field improvement at 20 dB.
fn criterion_8() -> Verdict {
    let mut pass = true;
    let mut notes = Vec::new();
    let clean = motion_sequence(0, [2.0, 1.0], None, 3);
    let zero = vec![DisplacementField::zeros(SIZE, SIZE); 2];
    let z = imc(&clean, &zero, MARGIN).unwrap();
    pass &= z == 0.0;
    notes.push(format!("zero field {z} dB"));
    let exact = vec![DisplacementField::uniform(SIZE, SIZE, [2.0, 1.0]); 2];
    let perfect = matches!(imc(&clean, &exact, MARGIN), Err(Error::PerfectRegistration));
    pass &= perfect;
    notes.push(format!("exact field perfect registration {perfect}"));

    let mut table = Vec::new();
    for solver in solvers() {
        let mut worst = f64::INFINITY;
        for seed in 0..3u64 {
            let noisy = motion_sequence(seed, [2.0, 1.0], Some(20.0), 3);
            let cfg = FieldConfig {
                solver,
                ..FieldConfig::default()
            };
            let fields: Vec<DisplacementField> = noisy.windows(2).map(|w| estimate_field(&w[0], &w[1], &cfg).unwrap()).collect();
            worst = worst.min(imc(&noisy, &fields, MARGIN).unwrap());
        }
        if solver != SolverSpec::Ols {
            pass &= worst > 3.0;
        }
        table.push(format!("{} {worst:.2}", solver.name()));
    }
    notes.push(format!("lowest IMC at 20 dB over 3 seeds [{}] dB", table.join(", ")));
    verdict(pass, notes.join("; "))
}

/// The four estimators coincide when regularization is switched off.
fn criterion_9() -> Verdict {
    let mut r = rng(9);
    let mut worst = 0.0f64;
    let mut tested = 0;
    while tested < 1000 {
        let g = gaussian(8, 2, &mut r);
        let sv = g.singular_values();
        if sv[0] / sv[1] > 10.0 {
            continue;
        }
        tested += 1;
        let z: Vec<f64> = (0..8).map(|_| r.sample(StandardNormal)).collect();
        let ols = solve_update(&g, &z, &SolverSpec::Ols).unwrap();
        let scale = ols[0].hypot(ols[1]).max(1.0);
        for spec in [
            SolverSpec::rls(0.0),
            SolverSpec::Pcr1 {
                retention: Retention::Components(2),
            },
            SolverSpec::pcr2(0.0),
        ] {
            let u = solve_update(&g, &z, &spec).unwrap();
            worst = worst.max((u[0] - ols[0]).hypot(u[1] - ols[1]) / scale);
        }
    }
    verdict(worst < 1e-10, format!("1000 systems, worst relative difference {worst:.1e}"))
}

/// Byte-level fingerprints of artifacts from several criteria.
fn artifacts() -> Vec<u8> {
    let mut out = Vec::new();
    let spec = SyntheticSpec {
        p: 12,
        n: 80,
        true_rank: 2,
        eigenvalues: vec![6.0, 2.0],
        noise_sigma: 0.3,
        seed: 10,
    };
    let (m, _) = generate_synthetic(&spec).unwrap();
    let masked = m.with_random_mask(0.1, 10).unwrap();
    let em = pca::pca_em(&masked, &EmConfig::new(2).with_seed(10)).unwrap();
    out.extend(serde_json::to_vec(&em).unwrap());
    let s = spca::spca_em(&m, &EmConfig::new(2).with_seed(10)).unwrap();
    out.extend(serde_json::to_vec(&s).unwrap());
    let k = kpca::kpca_fit(&m, &KernelSpec::Rbf { gamma: 0.1 }, 2, &EmConfig::new(2).with_seed(10), true).unwrap();
    out.extend(serde_json::to_vec(&k.to_file()).unwrap());
    let frames = motion_sequence(1, [0.5, 0.25], Some(20.0), 2);
    let cfg = FieldConfig {
        solver: SolverSpec::pcr1(),
        parallel: true,
        ..FieldConfig::default()
    };
    out.extend(estimate_field(&frames[0], &frames[1], &cfg).unwrap().to_csv().into_bytes());
    out
}

fn cli_run(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let bin = env!("CARGO_BIN_EXE_emss");
    let data = dir.join("data");
    let fit = dir.join("fit");
    let frames = dir.join("frames");
    let est = dir.join("est");
    let s = |p: &std::path::Path| p.to_str().unwrap().to_string();
    let runs: Vec<Vec<String>> = vec![
        vec!["synth".into(), "make".into(), "--seed".into(), "5".into(), "--missing".into(), "0.1".into(), "--out".into(), s(&data)],
        vec!["pca".into(), "fit".into(), "--algo".into(), "em".into(), "--seed".into(), "5".into(), "--input".into(), s(&data.join("data.csv")), "--out".into(), s(&fit)],
        vec!["synth".into(), "make".into(), "--kind".into(), "frames".into(), "--snr".into(), "20".into(), "--seed".into(), "5".into(), "--out".into(), s(&frames)],
        vec!["motion".into(), "imc".into(), "--frames".into(), s(&frames.join("frames")), "--out".into(), s(&est)],
    ];
    for args in runs {
        let status = std::process::Command::new(bin).args(&args).env_remove("EMSS_SEED").status().unwrap();
        assert_eq!(status.code(), Some(0), "{args:?}");
    }
    let mut files = Vec::new();
    for d in [&data, &fit, &frames, &est] {
        let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("manifest.json")).unwrap()).unwrap();
        for a in manifest["artifacts"].as_array().unwrap() {
            let name = a["path"].as_str().unwrap();
            files.push((name.to_string(), std::fs::read(d.join(name)).unwrap()));
        }
    }
    files
}

/// Same seed, same bytes: library artifacts and CLI outputs, run twice.
fn criterion_10() -> Verdict {
    let lib_same = artifacts() == artifacts();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (x, y) = (cli_run(a.path()), cli_run(b.path()));
    let cli_same = x == y;
    verdict(
        lib_same && cli_same,
        format!("library artifacts identical {lib_same}; {} CLI artifacts identical {cli_same}", x.len()),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("route equivalence", criterion_1),
        ("constrained EM determinacy", criterion_2),
        ("complexity contract", criterion_3),
        ("missing-data EM", criterion_4),
        ("sensible PCA", criterion_5),
        ("kernel PCA", criterion_6),
        ("motion accuracy", criterion_7),
        ("IMC behaviour", criterion_8),
        ("estimator degeneracy chain", criterion_9),
        ("determinism", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let v = check();
        if !v.pass {
            failed += 1;
        }
        println!("{} criterion {} ({name}): {}", if v.pass { "PASS" } else { "FAIL" }, i + 1, v.detail);
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
}
