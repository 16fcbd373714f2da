//! Seeded self-check suites behind `lorapt verify`.

use lorapt::adapters::Method;
use lorapt::tensor3::{fft_mode3, fnorm, identity_tensor, ifft_mode3, tprod, tprod_oracle, ttranspose};
use lorapt::tinymodel::{gradient_check, GRAD_CHECK_CONFIG};
use lorapt::tsvd::{fourier_singular_values, reconstruct, split_low_rank, tsvd};
use lorapt::Tensor3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SUITES: [&str; 3] = ["tprod", "tsvd", "grad"];

/// Outcome of one property over all of its seeded instances.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed error, compared against `tol`.
    pub worst: f64,
    pub tol: f64,
}

impl Check {
    fn new(name: &'static str, worst: f64, tol: f64) -> Self {
        Self {
            name,
            passed: worst <= tol,
            worst,
            tol,
        }
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, n1: usize, n2: usize, n3: usize) -> Tensor3 {
    Tensor3::from_fn(n1, n2, n3, |_, _, _| rng.random_range(-1.0..1.0))
}

fn dims(rng: &mut ChaCha8Rng, max: usize) -> usize {
    rng.random_range(1..=max)
}

fn rel(a: &Tensor3, b: &Tensor3) -> f64 {
    fnorm(&(a - b)) / fnorm(b).max(f64::MIN_POSITIVE)
}

pub fn run_suite(name: &str, seed: u64) -> lorapt::Result<Vec<Check>> {
    match name {
        "tprod" => tprod_suite(seed),
        "tsvd" => tsvd_suite(seed),
        "grad" => grad_suite(seed),
        other => Err(lorapt::Error::InvalidArgument(format!(
            "unknown suite {other:?} (expected one of {})",
            SUITES.join(", ")
        ))),
    }
}

fn tprod_suite(seed: u64) -> lorapt::Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut oracle, mut assoc, mut transpose, mut ident, mut fft) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let (n1, n2, n4, n3) = (dims(&mut rng, 8), dims(&mut rng, 8), dims(&mut rng, 8), dims(&mut rng, 8));
        let a = random_tensor(&mut rng, n1, n2, n3);
        let b = random_tensor(&mut rng, n2, n4, n3);
        let ab = tprod(&a, &b)?;
        oracle = oracle.max(ab.max_abs_diff(&tprod_oracle(&a, &b)?));
        let t = ttranspose(&ab).max_abs_diff(&tprod(&ttranspose(&b), &ttranspose(&a))?);
        transpose = transpose.max(t);
        ident = ident.max(tprod(&identity_tensor(n1, n3), &a)?.max_abs_diff(&a));
        fft = fft.max(ifft_mode3(&fft_mode3(&a)?)?.max_abs_diff(&a));
        let n5 = dims(&mut rng, 8);
        let c = random_tensor(&mut rng, n4, n5, n3);
        assoc = assoc.max(tprod(&ab, &c)?.max_abs_diff(&tprod(&a, &tprod(&b, &c)?)?));
    }
    Ok(vec![
        Check::new("tprod-matches-block-circulant-oracle", oracle, 1e-10),
        Check::new("tprod-associative", assoc, 1e-10),
        Check::new("transpose-reverses-product", transpose, 1e-10),
        Check::new("identity-is-neutral", ident, 1e-12),
        Check::new("fft-round-trip", fft, 1e-12),
    ])
}

fn tsvd_suite(seed: u64) -> lorapt::Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut recon, mut orth, mut offdiag, mut order, mut split, mut energy) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let (n1, n2, n3) = (dims(&mut rng, 16), dims(&mut rng, 16), dims(&mut rng, 8));
        let a = random_tensor(&mut rng, n1, n2, n3);
        let f = tsvd(&a)?;
        recon = recon.max(rel(&tprod(&tprod(&f.u, &f.s)?, &ttranspose(&f.v))?, &a));
        for q in [&f.u, &f.v] {
            let e = tprod(&ttranspose(q), q)?.max_abs_diff(&identity_tensor(q.n2(), n3));
            orth = orth.max(e);
        }
        for k in 0..n3 {
            for i in 0..n1 {
                for j in 0..n2 {
                    if i != j {
                        offdiag = offdiag.max(f.s.get(i, j, k).abs());
                    }
                }
            }
        }
        let sv = fourier_singular_values(&a)?;
        for s in &sv {
            for w in s.windows(2) {
                order = order.max(w[1] - w[0]);
            }
        }
        for r in [1usize, 2, 4].into_iter().filter(|&r| r <= n1.min(n2)) {
            let (p, res) = split_low_rank(&a, r)?;
            split = split.max(rel(&(&reconstruct(&p)? + &res), &a));
            let discarded: f64 = sv.iter().map(|s| s[r..].iter().map(|x| x * x).sum::<f64>()).sum::<f64>() / n3 as f64;
            let got = fnorm(&res).powi(2);
            if discarded > 0.0 {
                energy = energy.max((got - discarded).abs() / discarded);
            } else {
                energy = energy.max(got);
            }
        }
    }
    Ok(vec![
        Check::new("tsvd-reconstruction", recon, 1e-9),
        Check::new("tsvd-orthogonal-factors", orth, 1e-9),
        Check::new("tsvd-f-diagonal", offdiag, 0.0),
        Check::new("fourier-singular-values-nonincreasing", order, 0.0),
        Check::new("split-sums-to-original", split, 1e-9),
        Check::new("residual-energy-equals-discarded-spectrum", energy, 1e-8),
    ])
}

fn grad_suite(seed: u64) -> lorapt::Result<Vec<Check>> {
    let mut out = Vec::new();
    for (name, method, rank) in [
        ("grad-lora-pt-r1", Method::LoraPt, 1),
        ("grad-lora-r2", Method::Lora, 2),
        ("grad-pissa-r2", Method::Pissa, 2),
    ] {
        let rep = gradient_check(&GRAD_CHECK_CONFIG, method, rank, seed, 1e-5)?;
        let mut c = Check::new(name, rep.max_rel_err, 1e-5);
        c.passed = rep.passes(1e-5);
        out.push(c);
    }
    Ok(out)
}
