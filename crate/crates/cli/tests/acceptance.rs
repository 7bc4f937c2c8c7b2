//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero when any fails. Reference values come from the small dense
//! routines in this file, not from the library under test.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use sensorsel_core::barrier::{build_e, gradient_exact, gradient_from_lower_block, hessian_exact};
use sensorsel_core::data::{activity_fixture, gen_synthetic};
use sensorsel_core::experiment::{run_experiment, ExperimentConfig};
use sensorsel_core::gabp::{enforced_solve, run_gabp, EnforceConfig, GabpConfig, GabpGraph};
use sensorsel_core::ingest::{load_csv_matrix, preprocess_activity};
use sensorsel_core::mvee::{enclosure_check, mvee_solve, MveeConfig};
use sensorsel_core::newton::newton_solve;
use sensorsel_core::selection::select;
use sensorsel_core::{Backend, DenseMatrix, NewtonConfig, RelaxedPoint, SensorProblem};

type Outcome = Result<String, String>;
type Mat = Vec<Vec<f64>>;

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gabp correctness", gabp_correctness),
        ("enforced convergence", enforcement),
        ("derivative fidelity", derivatives),
        ("saddle inverse identity", saddle_identity),
        ("exhaustive sandwich", exhaustive_sandwich),
        ("synthetic benchmark", benchmark),
        ("minimum-volume ellipsoid", ellipsoid),
        ("cli determinism", determinism),
        ("activity pipeline", activity_pipeline),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail}; {secs:.1}s)", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({detail}; {secs:.1}s)", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- oracles

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.gen_range(f64::EPSILON..1.0);
    let v: f64 = rng.gen();
    (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
}

fn to_dense(m: &Mat) -> DenseMatrix {
    DenseMatrix::from_rows(m).unwrap()
}

fn from_dense(m: &DenseMatrix) -> Mat {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// Gauss-Jordan with partial pivoting; returns `M⁻¹B` for the columns of `B`.
fn gauss_solve(m: &Mat, b: &Mat) -> Mat {
    let n = m.len();
    let w = b[0].len();
    let mut a: Mat = m.iter().zip(b).map(|(r, rb)| r.iter().chain(rb).copied().collect()).collect();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        let piv = a[c][c];
        assert!(piv != 0.0, "singular oracle system");
        for v in a[c].iter_mut() {
            *v /= piv;
        }
        let pivot_row = a[c].clone();
        for (r, row) in a.iter_mut().enumerate() {
            if r != c && row[c] != 0.0 {
                let f = row[c];
                for (v, pv) in row.iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
            }
        }
    }
    a.into_iter().map(|r| r[n..n + w].to_vec()).collect()
}

fn identity(n: usize) -> Mat {
    (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect()
}

fn inverse(m: &Mat) -> Mat {
    gauss_solve(m, &identity(m.len()))
}

fn solve_vec(m: &Mat, b: &[f64]) -> Vec<f64> {
    let cols: Mat = b.iter().map(|&v| vec![v]).collect();
    gauss_solve(m, &cols).into_iter().map(|r| r[0]).collect()
}

/// `log det` of a symmetric positive definite matrix by LU; `-∞` otherwise.
fn logdet_spd(m: &Mat) -> f64 {
    let n = m.len();
    let mut a = m.clone();
    let mut total = 0.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        let piv = a[c][c];
        if piv.abs() < 1e-12 {
            return f64::NEG_INFINITY;
        }
        total += piv.abs().ln();
        for r in c + 1..n {
            let f = a[r][c] / piv;
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
        }
    }
    total
}

fn gram(a: &Mat, w: &[f64]) -> Mat {
    let n = a[0].len();
    let mut g = vec![vec![0.0; n]; n];
    for (row, &wi) in a.iter().zip(w) {
        for r in 0..n {
            for c in 0..n {
                g[r][c] += wi * row[r] * row[c];
            }
        }
    }
    g
}

fn matvec(m: &Mat, x: &[f64]) -> Vec<f64> {
    m.iter().map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

fn rel_err(x: &[f64], reference: &[f64]) -> f64 {
    let diff: Vec<f64> = x.iter().zip(reference).map(|(a, b)| a - b).collect();
    inf_norm(&diff) / inf_norm(reference).max(1e-300)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    (0..rows).map(|_| (0..cols).map(|_| normal(rng)).collect()).collect()
}

fn interior_point(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    (0..m).map(|_| rng.gen_range(0.05..0.95)).collect()
}

/// Objective `log det(Σ z_i a_i a_iᵀ) + κ Σ (log z_i + log(1 − z_i))`.
fn objective_oracle(a: &Mat, z: &[f64], kappa: f64) -> f64 {
    logdet_spd(&gram(a, z)) + kappa * z.iter().map(|&v| v.ln() + (1.0 - v).ln()).sum::<f64>()
}

fn fd_gradient(a: &Mat, z: &[f64], kappa: f64) -> Vec<f64> {
    (0..z.len())
        .map(|i| {
            let h = 1e-6;
            let mut up = z.to_vec();
            let mut dn = z.to_vec();
            up[i] += h;
            dn[i] -= h;
            (objective_oracle(a, &up, kappa) - objective_oracle(a, &dn, kappa)) / (2.0 * h)
        })
        .collect()
}

/// Best `k`-subset by enumeration.
fn brute_force(a: &Mat, k: usize) -> f64 {
    fn rec(a: &Mat, k: usize, start: usize, pick: &mut Vec<usize>, best: &mut f64) {
        if pick.len() == k {
            let rows: Mat = pick.iter().map(|&i| a[i].clone()).collect();
            *best = best.max(logdet_spd(&gram(&rows, &vec![1.0; k])));
            return;
        }
        for i in start..=a.len() - (k - pick.len()) {
            pick.push(i);
            rec(a, k, i + 1, pick, best);
            pick.pop();
        }
    }
    let mut best = f64::NEG_INFINITY;
    rec(a, k, 0, &mut Vec::new(), &mut best);
    best
}

fn problem(a: &Mat, k: usize) -> SensorProblem {
    let (m, n) = (a.len(), a[0].len());
    SensorProblem::new(to_dense(a), k, SensorProblem::default_kappa(m, n)).unwrap()
}

// -------------------------------------------------------------- criteria

fn diagonally_dominant(rng: &mut ChaCha8Rng, n: usize, density: f64) -> Mat {
    let mut j: Mat = vec![vec![0.0; n]; n];
    for r in 0..n {
        for c in r + 1..n {
            if rng.gen_bool(density) {
                let v = rng.gen_range(-1.0..1.0);
                j[r][c] = v;
                j[c][r] = v;
            }
        }
    }
    for r in 0..n {
        let off: f64 = j[r].iter().map(|v| v.abs()).sum();
        j[r][r] = off * rng.gen_range(1.05..2.0) + rng.gen_range(0.1..1.0);
    }
    j
}

fn random_tree(rng: &mut ChaCha8Rng, n: usize) -> Mat {
    let mut j: Mat = vec![vec![0.0; n]; n];
    for child in 1..n {
        let parent = rng.gen_range(0..child);
        let v = rng.gen_range(-1.0..1.0);
        j[child][parent] = v;
        j[parent][child] = v;
    }
    for r in 0..n {
        let off: f64 = j[r].iter().map(|v| v.abs()).sum();
        j[r][r] = off * rng.gen_range(1.0..2.0) + rng.gen_range(0.1..1.0);
    }
    j
}

fn gabp_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let cfg = GabpConfig::default();
    let mut worst_mean = 0.0f64;
    for t in 0..100 {
        let n = rng.gen_range(2..=50);
        let density = rng.gen_range(0.1..1.0);
        let j = diagonally_dominant(&mut rng, n, density);
        let h: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let res = run_gabp(&GabpGraph::from_dense(&to_dense(&j), &h).unwrap(), &cfg)
            .map_err(|e| format!("dominant system {t}: {e}"))?;
        let err = rel_err(&res.means, &solve_vec(&j, &h));
        ensure(res.converged && err <= 1e-6, || format!("dominant system {t}: mean error {err:e}"))?;
        worst_mean = worst_mean.max(err);
    }
    let mut worst_var = 0.0f64;
    for t in 0..100 {
        let n = rng.gen_range(2..=50);
        let j = random_tree(&mut rng, n);
        let h: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let res = run_gabp(&GabpGraph::from_dense(&to_dense(&j), &h).unwrap(), &cfg)
            .map_err(|e| format!("tree {t}: {e}"))?;
        let inv = inverse(&j);
        let diag: Vec<f64> = (0..n).map(|i| inv[i][i]).collect();
        let mean_err = rel_err(&res.means, &solve_vec(&j, &h));
        let var_err = rel_err(&res.variances, &diag);
        ensure(mean_err <= 1e-6 && var_err <= 1e-8, || {
            format!("tree {t}: mean error {mean_err:e}, variance error {var_err:e}")
        })?;
        worst_mean = worst_mean.max(mean_err);
        worst_var = worst_var.max(var_err);
    }
    Ok(format!("worst mean error {worst_mean:.1e}, worst tree variance error {worst_var:.1e}"))
}

fn enforcement() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let cfg = EnforceConfig::default();
    let (mut solved, mut tried, mut worst) = (0, 0, 0.0f64);
    while solved < 50 {
        tried += 1;
        ensure(tried < 1000, || "too few systems where plain GaBP fails".into())?;
        let n = rng.gen_range(3..=30);
        let b: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let j: Mat = if solved % 2 == 0 {
            let s = random_matrix(&mut rng, n, n);
            (0..n).map(|r| (0..n).map(|c| 0.5 * (s[r][c] + s[c][r])).collect()).collect()
        } else {
            let s = random_matrix(&mut rng, n, n);
            let mut g = gram(&s, &vec![1.0; n]);
            for (i, row) in g.iter_mut().enumerate() {
                row[i] += 0.1;
            }
            g
        };
        if run_gabp(&GabpGraph::from_dense(&to_dense(&j), &b).unwrap(), &cfg.gabp).is_ok() {
            continue;
        }
        let sol = enforced_solve(&to_dense(&j), &b, &cfg).map_err(|e| format!("system {solved} (n={n}): {e}"))?;
        let r: Vec<f64> = matvec(&j, &sol.x).iter().zip(&b).map(|(a, c)| a - c).collect();
        let scaled = inf_norm(&r) / (1.0 + inf_norm(&b));
        ensure(scaled <= 1e-5, || format!("system {solved} (n={n}): residual {scaled:e}"))?;
        worst = worst.max(scaled);
        solved += 1;
    }
    Ok(format!("50 systems where plain GaBP failed ({tried} drawn), worst scaled residual {worst:.1e}"))
}

fn derivatives() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut worst_g, mut worst_h) = (0.0f64, 0.0f64);
    for t in 0..20 {
        let n = rng.gen_range(1..=4);
        let m = rng.gen_range(n + 2..=20);
        let a = random_matrix(&mut rng, m, n);
        let p = problem(&a, rng.gen_range(n..m));
        let kappa = p.kappa();
        let z = interior_point(&mut rng, m);
        let (g, x) = gradient_exact(&p, &RelaxedPoint::new(z.clone())).map_err(|e| e.to_string())?;
        let g_err = rel_err(&g, &fd_gradient(&a, &z, kappa));
        ensure(g_err <= 1e-5, || format!("instance {t}: gradient error {g_err:e}"))?;
        let h = from_dense(&hessian_exact(&p, &RelaxedPoint::new(z.clone()), &x).map_err(|e| e.to_string())?);
        let lib_grad = |w: &[f64]| gradient_exact(&p, &RelaxedPoint::new(w.to_vec())).unwrap().0;
        let mut h_err = 0.0f64;
        for c in 0..m {
            let step = 1e-6;
            let mut up = z.clone();
            let mut dn = z.clone();
            up[c] += step;
            dn[c] -= step;
            let fd: Vec<f64> = lib_grad(&up).iter().zip(lib_grad(&dn)).map(|(u, d)| (u - d) / (2.0 * step)).collect();
            let col: Vec<f64> = h.iter().map(|r| r[c]).collect();
            h_err = h_err.max(rel_err(&col, &fd));
        }
        ensure(h_err <= 1e-4, || format!("instance {t}: Hessian error {h_err:e}"))?;
        worst_g = worst_g.max(g_err);
        worst_h = worst_h.max(h_err);
    }
    Ok(format!("20 instances, worst gradient error {worst_g:.1e}, worst Hessian error {worst_h:.1e}"))
}

fn saddle_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = 0.0f64;
    for t in 0..20 {
        let n = rng.gen_range(1..=3);
        let m = rng.gen_range(n + 2..=10);
        let a = random_matrix(&mut rng, m, n);
        let p = problem(&a, rng.gen_range(n..m));
        let z = interior_point(&mut rng, m);
        let mut e = vec![vec![0.0; n + m]; n + m];
        for i in 0..m {
            for c in 0..n {
                e[c][n + i] = a[i][c];
                e[n + i][c] = a[i][c];
            }
            e[n + i][n + i] = -1.0 / z[i];
        }
        let lib_e = build_e(&p, &RelaxedPoint::new(z.clone())).map_err(|e| e.to_string())?;
        ensure(from_dense(&lib_e) == e, || format!("instance {t}: saddle matrix layout differs"))?;
        let inv = inverse(&e);
        let y: Vec<f64> = (0..m).map(|i| inv[n + i][n + i]).collect();
        let via_block = gradient_from_lower_block(&p, &z, &y);
        let (g, _) = gradient_exact(&p, &RelaxedPoint::new(z.clone())).map_err(|e| e.to_string())?;
        let err = rel_err(&via_block, &g);
        ensure(err <= 1e-8, || format!("instance {t}: error {err:e}"))?;
        worst = worst.max(err);
    }
    Ok(format!("20 instances, worst relative error {worst:.1e}"))
}

fn exhaustive_sandwich() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut recovered = 0;
    for t in 0..20 {
        let n = rng.gen_range(1..=3);
        let m = rng.gen_range(n + 4..=12);
        let k = rng.gen_range(n + 1..m);
        let a = random_matrix(&mut rng, m, n);
        let p = problem(&a, k);
        let out = newton_solve(&p, &NewtonConfig::with_backend(Backend::ReferenceDense))
            .map_err(|e| format!("instance {t}: {e}"))?;
        let sel = select(&p, &out.point, 1000).map_err(|e| e.to_string())?;
        let best = brute_force(&a, k);
        let slack = 1e-9 * (1.0 + best.abs());
        ensure(sel.lower_bound <= best + slack && best <= sel.upper_bound + slack, || {
            format!(
                "instance {t}: lower {:.6} optimum {best:.6} upper {:.6}",
                sel.lower_bound, sel.upper_bound
            )
        })?;
        let rows: Mat = sel.chosen.iter().map(|&i| a[i].clone()).collect();
        let found = logdet_spd(&gram(&rows, &vec![1.0; k]));
        if (found - best).abs() <= slack {
            recovered += 1;
        }
    }
    ensure(recovered >= 14, || format!("local search recovered the optimum on {recovered}/20"))?;
    Ok(format!("bounds sandwich the optimum on 20/20, local search optimal on {recovered}/20"))
}

fn benchmark() -> Outcome {
    let a = gen_synthetic(100, 20, 1);
    let cfg = ExperimentConfig {
        k_values: (25..=70).step_by(5).collect(),
        kappa: None,
        backends: Backend::ALL.to_vec(),
        newton: NewtonConfig::default().with_tolerance(1e-3).with_gabp_threshold(1e-8),
        local_search_passes: 1000,
        timing: false,
    };
    let mut buf = Vec::new();
    run_experiment(&a, &cfg, &mut buf, None).map_err(|e| e.to_string())?;
    let rows: Vec<Value> = String::from_utf8(buf)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let cell = |k: usize, backend: &str| -> Result<&Value, String> {
        rows.iter()
            .find(|r| r["k"] == k && r["backend"] == backend)
            .ok_or_else(|| format!("missing cell k={k} {backend}"))
    };
    let (mut exact_rounds, mut trunc_rounds) = (0u64, 0u64);
    let mut iters = Vec::new();
    let mut worst_diff = 0.0f64;
    for &k in &cfg.k_values {
        let (dense, exact, trunc) = (cell(k, "reference-dense")?, cell(k, "exact")?, cell(k, "truncated")?);
        for r in [dense, exact, trunc] {
            ensure(r["status"] != "failed", || format!("k={k} {}: {}", r["backend"], r["error"]))?;
        }
        let diff = (dense["objective"].as_f64().unwrap() - exact["objective"].as_f64().unwrap()).abs();
        ensure(diff <= 1e-4, || format!("k={k}: dense and exact objectives differ by {diff:e}"))?;
        worst_diff = worst_diff.max(diff);
        for r in [dense, exact] {
            let it = r["newton_iterations"].as_u64().unwrap();
            ensure((4..=12).contains(&it), || format!("k={k} {}: {it} Newton iterations", r["backend"]))?;
            iters.push(it);
        }
        let (gt, ge) = (trunc["gap"].as_f64().unwrap(), exact["gap"].as_f64().unwrap());
        ensure(gt >= ge - 1e-9, || format!("k={k}: truncated gap {gt:.6} below exact gap {ge:.6}"))?;
        exact_rounds += exact["gabp_rounds"].as_u64().unwrap();
        trunc_rounds += trunc["gabp_rounds"].as_u64().unwrap();
    }
    ensure(5 * trunc_rounds < exact_rounds, || {
        format!("truncated rounds {trunc_rounds} not below a fifth of exact rounds {exact_rounds}")
    })?;
    Ok(format!(
        "objective agreement {worst_diff:.1e}, Newton iterations {}..{}, GaBP rounds truncated {trunc_rounds} vs exact {exact_rounds}",
        iters.iter().min().unwrap(),
        iters.iter().max().unwrap()
    ))
}

fn ellipsoid() -> Outcome {
    let cfg = MveeConfig::default();
    let cross = to_dense(&vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]]);
    let sol = mvee_solve(&cross, &cfg).map_err(|e| e.to_string())?;
    let shape = from_dense(sol.ellipsoid.shape());
    let dev = (0..2)
        .flat_map(|r| (0..2).map(move |c| (r, c)))
        .map(|(r, c)| (shape[r][c] - f64::from(u8::from(r == c))).abs())
        .fold(0.0, f64::max);
    ensure(dev <= 1e-3, || format!("cross instance: shape deviates from I by {dev:e}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut worst = 0.0f64;
    for t in 0..20 {
        let n = rng.gen_range(1..=3);
        let m = rng.gen_range(n + 2..=15);
        let pts = random_matrix(&mut rng, m, n);
        let sol = mvee_solve(&to_dense(&pts), &cfg).map_err(|e| format!("cloud {t}: {e}"))?;
        let shape = from_dense(sol.ellipsoid.shape());
        let ratio = pts
            .iter()
            .map(|x| x.iter().zip(matvec(&shape, x)).map(|(a, b)| a * b).sum::<f64>())
            .fold(0.0, f64::max);
        ensure(ratio <= 1.05, || format!("cloud {t}: max level {ratio}"))?;
        let total: f64 = sol.weights.iter().sum();
        ensure((total - n as f64).abs() <= 1e-6, || format!("cloud {t}: weights sum to {total}"))?;
        let shrunk = enclosure_check(&sol.ellipsoid.scaled(1.01), &to_dense(&pts), 0.0).map_err(|e| e.to_string())?;
        ensure(!shrunk.encloses(), || format!("cloud {t}: shrunk ellipsoid still encloses"))?;
        worst = worst.max(ratio);
    }
    Ok(format!("identity recovered to {dev:.1e}, 20 clouds enclosed with worst level {worst:.4}"))
}

fn cli(args: &[&str]) -> Result<std::process::Output, String> {
    Command::new(env!("CARGO_BIN_EXE_sensorsel"))
        .args(args)
        .output()
        .map_err(|e| format!("cannot run sensorsel: {e}"))
}

fn cli_ok(args: &[&str]) -> Result<std::process::Output, String> {
    let out = cli(args)?;
    ensure(out.status.success(), || {
        format!("sensorsel {} exited with {}: {}", args.join(" "), out.status, String::from_utf8_lossy(&out.stderr))
    })?;
    Ok(out)
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let key = path.strip_prefix(dir).unwrap().display().to_string();
                files.insert(key, std::fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn determinism() -> Outcome {
    let run = |dir: &Path| -> Result<BTreeMap<String, Vec<u8>>, String> {
        let p = |name: &str| dir.join(name).display().to_string();
        let data = p("data.csv");
        cli_ok(&["synth", "--m", "40", "--n", "5", "--seed", "9", "--out", &data])?;
        cli_ok(&["synth", "--kind", "activity", "--m", "30", "--n", "12", "--active", "6", "--seed", "9", "--out", &p("activity.csv")])?;
        for backend in ["reference-dense", "exact", "truncated"] {
            cli_ok(&["solve", "--input", &data, "--k", "12", "--backend", backend, "--out", &p(&format!("solve-{backend}.json"))])?;
        }
        cli_ok(&["select", "--input", &data, "--k", "12", "--backend", "truncated", "--out", &p("select.json")])?;
        cli_ok(&[
            "sweep", "--input", &data, "--k-from", "5", "--k-to", "25", "--k-step", "5", "--backends",
            "reference-dense,exact,truncated", "--trace-dir", &p("traces"), "--out", &p("sweep.jsonl"),
        ])?;
        cli_ok(&["mvee", "--m", "12", "--n", "3", "--seed", "4", "--out", &p("mvee.json")])?;
        cli_ok(&["check", "--m", "20", "--n", "3", "--k", "6", "--out", &p("check.json")])?;
        let stdout = cli_ok(&["sweep", "--m", "30", "--n", "4", "--seed", "2", "--k-from", "4", "--k-to", "8", "--backends", "truncated"])?;
        std::fs::write(dir.join("stdout.jsonl"), stdout.stdout).unwrap();
        Ok(snapshot(dir))
    };
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    let a = run(first.path())?;
    let b = run(second.path())?;
    ensure(a.keys().eq(b.keys()), || "runs produced different file sets".into())?;
    for (name, bytes) in &a {
        ensure(bytes == &b[name], || format!("{name} differs between runs"))?;
    }
    let sweep = String::from_utf8(a["sweep.jsonl"].clone()).unwrap();
    let messages = sweep
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["gabp_messages"].as_u64().unwrap_or(0))
        .sum::<u64>();
    ensure(messages > 0, || "sweep recorded no GaBP messages".into())?;

    let bad = cli(&["solve", "--m", "10", "--n", "3", "--k", "20"])?;
    ensure(bad.status.code() == Some(2), || format!("invalid budget exited with {}", bad.status))?;
    Ok(format!("{} files byte-identical across two runs, {messages} GaBP messages in the sweep", a.len()))
}

fn activity_pipeline() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("activity.csv").display().to_string();
    cli_ok(&["synth", "--kind", "activity", "--m", "153", "--n", "120", "--active", "89", "--seed", "7", "--out", &csv])?;
    let raw = load_csv_matrix(&csv).map_err(|e| e.to_string())?;
    ensure(raw == activity_fixture(153, 120, 89, 7), || "written fixture does not round-trip".into())?;
    let (filtered, kept) = preprocess_activity(&raw, 1.0).map_err(|e| e.to_string())?;
    ensure(filtered.rows() == 153 && kept.len() == 89, || {
        format!("kept {} columns over {} rows", kept.len(), filtered.rows())
    })?;
    let n = kept.len();
    let out = cli_ok(&[
        "sweep", "--input", &csv, "--min-activity", "1.0", "--k-from", "89", "--k-to", "109",
        "--backends", "reference-dense,truncated",
    ])?;
    let rows: Vec<Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).map_err(|e| format!("malformed line: {e}")))
        .collect::<Result<_, _>>()?;
    ensure(rows.len() == 42, || format!("{} rows, expected 42", rows.len()))?;
    let mut last: BTreeMap<String, f64> = BTreeMap::new();
    for r in &rows {
        let k = r["k"].as_u64().ok_or("k missing")? as usize;
        let backend = r["backend"].as_str().ok_or("backend missing")?.to_owned();
        ensure((n..=n + 20).contains(&k), || format!("unexpected k={k}"))?;
        ensure(r["status"] != "failed", || format!("k={k} {backend}: {}", r["error"]))?;
        for field in ["objective", "relaxed_logdet", "simple_rule_logdet", "local_search_logdet", "upper_bound", "lower_bound", "gap"] {
            ensure(r[field].as_f64().is_some_and(f64::is_finite), || format!("k={k} {backend}: {field} not finite"))?;
        }
        let chosen: Vec<u64> = r["chosen"].as_array().ok_or("chosen missing")?.iter().filter_map(Value::as_u64).collect();
        ensure(chosen.len() == k && chosen.windows(2).all(|w| w[0] < w[1]) && chosen.iter().all(|&i| i < 153), || {
            format!("k={k} {backend}: malformed selection")
        })?;
        let gap = r["gap"].as_f64().unwrap();
        let lower = r["lower_bound"].as_f64().unwrap();
        let upper = r["upper_bound"].as_f64().unwrap();
        ensure(gap >= 0.0 && (upper - lower - gap).abs() <= 1e-9 * (1.0 + gap), || {
            format!("k={k} {backend}: gap {gap} inconsistent with bounds")
        })?;
        if let Some(&prev) = last.get(&backend) {
            ensure(gap <= prev + 1e-9, || format!("{backend}: gap rose from {prev:.6} to {gap:.6} at k={k}"))?;
        }
        last.insert(backend, gap);
    }
    Ok(format!(
        "89 of 120 columns kept, 21 budgets x 2 backends, final gaps {}",
        last.iter().map(|(b, g)| format!("{b} {g:.4}")).collect::<Vec<_>>().join(", ")
    ))
}
