use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use vilds::btd::{self, LowerBlockBiDiag, Side, SymBlockTriDiag};
use vilds::dense::{tril, Mat};

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_factor(seed: u64, len: usize, n: usize) -> LowerBlockBiDiag {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let diag = (0..len)
        .map(|_| {
            let m = Mat::from_fn(n, n, |_, _| 0.3 * normal(&mut rng));
            let mut l = tril(&m);
            for i in 0..n {
                l[(i, i)] = 0.5 + rng.random::<f64>();
            }
            l
        })
        .collect();
    let lower = (1..len).map(|_| Mat::from_fn(n, n, |_, _| 0.3 * normal(&mut rng))).collect();
    LowerBlockBiDiag::new(diag, lower).unwrap()
}

fn random_vec(seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim).map(|_| normal(&mut rng)).collect()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cholesky_recovers_factor(seed in any::<u64>(), len in 1usize..9, n in 1usize..5) {
        let r = random_factor(seed, len, n);
        let back = btd::cholesky(&r.gram()).unwrap();
        for t in 0..len {
            prop_assert!((&back.diag[t] - &r.diag[t]).amax() < 1e-10);
        }
        for t in 0..len.saturating_sub(1) {
            prop_assert!((&back.lower[t] - &r.lower[t]).amax() < 1e-10);
        }
    }

    #[test]
    fn solves_invert_products(seed in any::<u64>(), len in 1usize..9, n in 1usize..5) {
        let r = random_factor(seed, len, n);
        let v = random_vec(seed ^ 1, len * n);
        let lo = btd::solve(&r, &v, Side::Lower).unwrap();
        prop_assert!(close(&r.mul_vec(&lo).unwrap(), &v, 1e-10));
        // Rᵀ w = v
        let up = btd::solve(&r, &v, Side::Upper).unwrap();
        let rt = r.materialize(1000).unwrap().transpose();
        let back: Vec<f64> = (rt * vilds::dense::Vector::from_column_slice(&up)).iter().copied().collect();
        prop_assert!(close(&back, &v, 1e-10));
    }

    #[test]
    fn precision_times_sample_offset(seed in any::<u64>(), len in 1usize..7, n in 1usize..4) {
        // H (z − μ) = R ε for z = μ + R⁻ᵀ ε
        let r = random_factor(seed, len, n);
        let mu = random_vec(seed ^ 2, len * n);
        let eps = random_vec(seed ^ 3, len * n);
        let z = btd::sample(&mu, &r, &eps).unwrap();
        let d: Vec<f64> = z.iter().zip(&mu).map(|(a, b)| a - b).collect();
        prop_assert!(close(&r.gram().mul_vec(&d).unwrap(), &r.mul_vec(&eps).unwrap(), 1e-9));
    }

    #[test]
    fn marginals_are_spd_and_match_dense(seed in any::<u64>(), len in 1usize..8, n in 1usize..4) {
        let r = random_factor(seed, len, n);
        let mu = random_vec(seed ^ 4, len * n);
        let mm = btd::marginals(&mu, &r).unwrap();
        let cov = btd::materialize(&r.gram(), 1000).unwrap().try_inverse().unwrap();
        for t in 0..len {
            let v = &mm.var[t];
            prop_assert!((v - v.transpose()).amax() < 1e-12);
            prop_assert!(v.clone().cholesky().is_some());
            prop_assert!((v - cov.view((t * n, t * n), (n, n))).amax() < 1e-9);
        }
        prop_assert!((btd::logdet_sigma(&r) - cov.determinant().ln()).abs() < 1e-9);
    }

    #[test]
    fn cholesky_vjp_matches_finite_differences(seed in any::<u64>(), len in 1usize..5, n in 1usize..4) {
        let h = random_factor(seed, len, n).gram();
        let w = random_factor(seed ^ 5, len, n);
        let f = |h: &SymBlockTriDiag| -> f64 {
            let r = btd::cholesky(h).unwrap();
            let mut s = 0.0;
            for t in 0..len {
                s += r.diag[t].component_mul(&w.diag[t]).sum();
                if t + 1 < len {
                    s += r.lower[t].component_mul(&w.lower[t]).sum();
                }
            }
            s
        };
        let r = btd::cholesky(&h).unwrap();
        let hb = btd::cholesky_vjp(&h, &r, &w);
        let step = 1e-6;
        for t in 0..len {
            for i in 0..n {
                for j in 0..=i {
                    let mut up = h.clone();
                    let mut dn = h.clone();
                    for (m, s) in [(&mut up, step), (&mut dn, -step)] {
                        m.diag[t][(i, j)] += s;
                        if i != j {
                            m.diag[t][(j, i)] += s;
                        }
                    }
                    let fd = (f(&up) - f(&dn)) / (2.0 * step);
                    let an = if i == j { hb.diag[t][(i, i)] } else { 2.0 * hb.diag[t][(i, j)] };
                    prop_assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "diag {t} ({i},{j}): {fd} vs {an}");
                }
            }
            if t + 1 < len {
                for i in 0..n {
                    for j in 0..n {
                        let mut up = h.clone();
                        let mut dn = h.clone();
                        up.lower[t][(i, j)] += step;
                        dn.lower[t][(i, j)] -= step;
                        let fd = (f(&up) - f(&dn)) / (2.0 * step);
                        let an = hb.lower[t][(i, j)];
                        prop_assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "lower {t} ({i},{j}): {fd} vs {an}");
                    }
                }
            }
        }
    }

    #[test]
    fn scaling_precision_scales_logdet(seed in any::<u64>(), len in 1usize..6, n in 1usize..4, c in 0.1f64..10.0) {
        let h = random_factor(seed, len, n).gram();
        let mut scaled = SymBlockTriDiag::zeros(len, n);
        scaled.add_scaled(c, &h);
        let a = btd::logdet_sigma(&btd::cholesky(&h).unwrap());
        let b = btd::logdet_sigma(&btd::cholesky(&scaled).unwrap());
        prop_assert!((a - b - (len * n) as f64 * c.ln()).abs() < 1e-9);
    }
}
