//! Shared test oracles: a dense-V brute-force likelihood and GLS solver that
//! never touch the library's mixed-model code, instance generators, and a
//! synthetic MovieLens-format fixture.
#![allow(dead_code, clippy::needless_range_loop)]

use std::fmt::Write as _;
use std::path::Path;

use lmmrec::{build_design, parse_formula, Design, Factor, Table};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Mat = Vec<Vec<f64>>;

/// LU decomposition with partial pivoting; returns (lu, perm, sign) or None
/// when a pivot vanishes.
fn lu(a: &Mat) -> Option<(Mat, Vec<usize>, f64)> {
    let n = a.len();
    let mut m = a.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut sign = 1.0;
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| m[i][k].abs().total_cmp(&m[j][k].abs()))?;
        if m[p][k].abs() < 1e-300 {
            return None;
        }
        if p != k {
            m.swap(p, k);
            perm.swap(p, k);
            sign = -sign;
        }
        for i in k + 1..n {
            let f = m[i][k] / m[k][k];
            m[i][k] = f;
            for j in k + 1..n {
                m[i][j] -= f * m[k][j];
            }
        }
    }
    Some((m, perm, sign))
}

fn lu_solve(f: &(Mat, Vec<usize>, f64), b: &[f64]) -> Vec<f64> {
    let (m, perm, _) = f;
    let n = m.len();
    let mut x: Vec<f64> = perm.iter().map(|&p| b[p]).collect();
    for i in 0..n {
        for j in 0..i {
            x[i] -= m[i][j] * x[j];
        }
    }
    for i in (0..n).rev() {
        for j in i + 1..n {
            x[i] -= m[i][j] * x[j];
        }
        x[i] /= m[i][i];
    }
    x
}

/// `log|A|` for a matrix with positive determinant.
fn log_det(f: &(Mat, Vec<usize>, f64)) -> f64 {
    let sign = f.0.iter().enumerate().fold(f.2, |s, (i, r)| s * r[i].signum());
    assert!(sign > 0.0, "determinant is negative");
    f.0.iter().enumerate().map(|(i, r)| r[i].abs().ln()).sum()
}

pub fn solve(a: &Mat, b: &[f64]) -> Vec<f64> {
    lu_solve(&lu(a).expect("singular"), b)
}

pub fn inverse(a: &Mat) -> Mat {
    let f = lu(a).expect("singular");
    let n = a.len();
    let cols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            lu_solve(&f, &e)
        })
        .collect();
    (0..n).map(|i| (0..n).map(|j| cols[j][i]).collect()).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b.first().map_or(0, Vec::len));
    (0..n).map(|i| (0..m).map(|j| (0..k).map(|l| a[i][l] * b[l][j]).sum()).collect()).collect()
}

pub fn transpose(a: &Mat) -> Mat {
    let m = a.first().map_or(0, Vec::len);
    (0..m).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn mat_vec(a: &Mat, v: &[f64]) -> Vec<f64> {
    a.iter().map(|r| r.iter().zip(v).map(|(x, y)| x * y).sum()).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dense X (kept columns) and per-block dense Z of a design.
pub fn dense_parts(d: &Design) -> (Mat, Vec<Mat>) {
    let n = d.n_obs();
    let x: Mat =
        (0..n).map(|i| d.kept_columns.iter().map(|&c| if d.x.get(i, c) { 1.0 } else { 0.0 }).collect()).collect();
    let zs = d
        .z_blocks
        .iter()
        .map(|b| {
            (0..n).map(|i| (0..b.levels.len()).map(|j| if b.matrix.get(i, j) { 1.0 } else { 0.0 }).collect()).collect()
        })
        .collect();
    (x, zs)
}

/// Everything the brute-force path produces at a given γ.
#[derive(Debug, Clone)]
pub struct DenseFit {
    pub tau: Vec<f64>,
    pub u: Vec<f64>,
    pub sigma2_reml: f64,
    pub sigma2_ml: f64,
    pub loglik_reml: f64,
    pub loglik_ml: f64,
}

/// GLS and profiled likelihoods from an explicit `V = I + Σ γ_k Z_k Z_kᵀ`.
pub fn dense_fit(d: &Design, gamma: &[f64]) -> DenseFit {
    let (x, zs) = dense_parts(d);
    let n = d.n_obs();
    let p = x.first().map_or(0, Vec::len);
    let mut v: Mat = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for (z, &g) in zs.iter().zip(gamma) {
        let zzt = matmul(z, &transpose(z));
        for i in 0..n {
            for j in 0..n {
                v[i][j] += g * zzt[i][j];
            }
        }
    }
    let vf = lu(&v).expect("V singular");
    let vinv_x: Vec<Vec<f64>> = (0..p).map(|c| lu_solve(&vf, &x.iter().map(|r| r[c]).collect::<Vec<_>>())).collect();
    let xtvx: Mat = (0..p).map(|a| (0..p).map(|b| (0..n).map(|i| x[i][a] * vinv_x[b][i]).sum()).collect()).collect();
    let vinv_y = lu_solve(&vf, &d.y);
    let xtvy: Vec<f64> = (0..p).map(|a| (0..n).map(|i| x[i][a] * vinv_y[i]).sum()).collect();
    let (tau, log_det_xtvx) = if p == 0 {
        (vec![], 0.0)
    } else {
        let f = lu(&xtvx).expect("XᵀV⁻¹X singular");
        (lu_solve(&f, &xtvy), log_det(&f))
    };
    let resid: Vec<f64> = (0..n).map(|i| d.y[i] - dot(&x[i], &tau)).collect();
    let vinv_r = lu_solve(&vf, &resid);
    let ypy = dot(&resid, &vinv_r);
    let mut u = Vec::new();
    for (z, &g) in zs.iter().zip(gamma) {
        u.extend(transpose(z).iter().map(|col| g * dot(col, &vinv_r)));
    }
    let log_det_v = log_det(&vf);
    let nf = n as f64;
    let df = (n - p) as f64;
    let two_pi = 2.0 * std::f64::consts::PI;
    let sigma2_reml = ypy / df;
    let sigma2_ml = ypy / nf;
    DenseFit {
        tau,
        u,
        sigma2_reml,
        sigma2_ml,
        loglik_reml: -0.5 * (df * ((two_pi * sigma2_reml).ln() + 1.0) + log_det_v + log_det_xtvx),
        loglik_ml: -0.5 * (nf * ((two_pi * sigma2_ml).ln() + 1.0) + log_det_v),
    }
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1.0)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn factor(name: &str, n: usize) -> Factor {
    Factor::new(name, (0..n).map(|i| format!("{name}{i}")))
}

/// A random table over factors `a`, `b`, `c` with `n` rows, every level
/// observed at least once, responses drawn from a random mixed model.
pub fn random_table(rng: &mut ChaCha8Rng, n: usize, levels: [usize; 3]) -> Table {
    let names = ["a", "b", "c"];
    let mut t = Table::new(names.iter().zip(levels).map(|(nm, l)| factor(nm, l)).collect()).unwrap();
    let effects: Vec<Vec<f64>> =
        levels.iter().map(|&l| (0..l).map(|_| rng.random_range(0.3..1.5) * normal(rng)).collect()).collect();
    for i in 0..n {
        let codes: Vec<usize> = levels.iter().map(|&l| if i < l { i } else { rng.random_range(0..l) }).collect();
        let y = 3.0 + (0..3).map(|k| effects[k][codes[k]]).sum::<f64>() + 0.7 * normal(rng);
        t.push_row(y, &codes).unwrap();
    }
    t
}

/// Formulas over `a`, `b`, `c` with one or two random factors.
pub const RANDOM_FORMULAS: [&str; 6] = [
    "y ~ (1|a)",
    "y ~ a + (1|b)",
    "y ~ -1 + a + (1|b)",
    "y ~ (1|a) + (1|b)",
    "y ~ a + (1|b) + (1|c)",
    "y ~ -1 + c + (1|a) + (1|b)",
];

pub fn design(formula: &str, t: &Table) -> Design {
    build_design(&parse_formula(formula).unwrap(), t).unwrap()
}

/// Balanced one-way layout: `a` groups of `n`, `y = μ + u_g + e`.
pub fn balanced_one_way(rng: &mut ChaCha8Rng, a: usize, n: usize, sd_u: f64, sd_e: f64) -> Table {
    let mut t = Table::new(vec![factor("g", a)]).unwrap();
    for g in 0..a {
        let u = sd_u * normal(rng);
        for _ in 0..n {
            t.push_row(10.0 + u + sd_e * normal(rng), &[g]).unwrap();
        }
    }
    t
}

/// Closed-form balanced one-way REML: `(σ̂²_e, σ̂²_u)`, including the
/// boundary case MSA ≤ MSE, where the optimum sits at σ²_u = 0 and the
/// residual variance pools all N − 1 degrees of freedom.
pub fn balanced_reml(t: &Table) -> (f64, f64) {
    let a = t.factors()[0].levels.len();
    let y = t.responses();
    let n = y.len() / a;
    let mut sums = vec![0.0; a];
    for i in 0..y.len() {
        sums[t.code(i, 0)] += y[i];
    }
    let means: Vec<f64> = sums.iter().map(|s| s / n as f64).collect();
    let grand = y.iter().sum::<f64>() / y.len() as f64;
    let ssa: f64 = means.iter().map(|m| n as f64 * (m - grand).powi(2)).sum();
    let sse: f64 = (0..y.len()).map(|i| (y[i] - means[t.code(i, 0)]).powi(2)).sum();
    let msa = ssa / (a - 1) as f64;
    let mse = sse / (a * (n - 1)) as f64;
    if msa > mse {
        (mse, (msa - mse) / n as f64)
    } else {
        ((ssa + sse) / (y.len() - 1) as f64, 0.0)
    }
}

/// Writes a small MovieLens-1M-format directory. Ratings for each movie
/// follow `3 + age-effect + occupation-effect + gender-effect + noise`,
/// rounded into 1–5; returns the number of ratings written.
pub fn write_movielens_fixture(dir: &Path, seed: u64, n_users: usize, ratings_per_user: usize) -> usize {
    let mut rng = rng(seed);
    let ages = [1, 18, 25, 35, 45, 50, 56];
    let movies = [
        (1, "Toy Story (1995)", "Animation|Children's|Comedy"),
        (2, "Jurassic Park (1993)", "Action|Adventure|Sci-Fi"),
        (3, "Sound of Music, The (1965)", "Musical"),
        (4, "Singin' in the Rain (1952)", "Musical|Romance"),
        (5, "Alien (1979)", "Action|Horror|Sci-Fi|Thriller"),
        (6, "Amélie (2001)", "Comedy|Romance"),
    ];
    let mut users = String::new();
    let mut profile = Vec::new();
    for uid in 1..=n_users {
        let g = if rng.random_bool(0.6) { "M" } else { "F" };
        let age = ages[rng.random_range(0..ages.len())];
        let occ = rng.random_range(0..21u8);
        writeln!(users, "{uid}::{g}::{age}::{occ}::{:05}", rng.random_range(0..100_000)).unwrap();
        profile.push((g, age, occ));
    }
    let movie_text: String = movies.iter().map(|(id, title, genres)| format!("{id}::{title}::{genres}\n")).collect();
    // Latin-1 encode (the fixture's one accented title).
    let movie_bytes: Vec<u8> = movie_text.chars().map(|c| c as u32 as u8).collect();

    let mut ratings = String::new();
    let mut count = 0;
    for (i, &(g, age, occ)) in profile.iter().enumerate() {
        for k in 0..ratings_per_user {
            let movie = movies[(i + k * 5) % movies.len()].0;
            let age_idx = ages.iter().position(|&a| a == age).unwrap() as f64;
            let musical = movie == 3 || movie == 4;
            let mut y = 3.2 + if g == "M" { 0.2 } else { -0.1 } + 0.05 * f64::from(occ % 5) - 0.1;
            if musical {
                y += 0.15 * (age_idx - 3.0) + if occ == 2 { 0.8 } else { 0.0 };
            }
            y += 0.9 * normal(&mut rng);
            let r = y.round().clamp(1.0, 5.0) as u8;
            writeln!(ratings, "{}::{movie}::{r}::{}", i + 1, 978_300_000 + count).unwrap();
            count += 1;
        }
    }
    std::fs::create_dir_all(dir).unwrap();
    std::fs::write(dir.join("users.dat"), users).unwrap();
    std::fs::write(dir.join("movies.dat"), movie_bytes).unwrap();
    std::fs::write(dir.join("ratings.dat"), ratings).unwrap();
    count
}

const NAMES: [&str; 8] = ["age", "gender", "occupation", "g", "h_2", "Zip", "_x", "b1"];

/// Valid formulas over a small identifier pool (response `y`).
pub fn arb_formula() -> impl proptest::strategy::Strategy<Value = lmmrec::ModelFormula> {
    use proptest::prelude::*;
    (any::<bool>(), proptest::sample::subsequence(NAMES.to_vec(), 0..=NAMES.len()), any::<u64>()).prop_filter_map(
        "empty model",
        |(intercept, names, split)| {
            let (mut fixed, mut random) = (Vec::new(), Vec::new());
            for (i, n) in names.into_iter().enumerate() {
                if split >> i & 1 == 1 {
                    random.push(n.to_string())
                } else {
                    fixed.push(n.to_string())
                }
            }
            lmmrec::ModelFormula::new("y", intercept, fixed, random).ok()
        },
    )
}
