//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on failure.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tcrobust::accounting::{band_dominance_violations, run_ledger, shadow_ledger, CostSpec};
use tcrobust::cps::{
    girsanov_cps, no_cps_certificate, polarity_check, supermartingale_check, verify_band, CheckMode, PriceSystem,
};
use tcrobust::fvproc::{
    komlos_average, rho, MonotonePath, PolicyTag, RationalEnumeration, Strategy,
};
use tcrobust::scenario::{simulate, ModelSpec, NoisePanel, ThetaGrid, TimeGrid};
use tcrobust::solver::{
    brute_force, decode, duality_report, solve, Admissibility, DualityOptions, OracleGrid, PolicyClass,
    ProblemSpec, RobustProblem, SolveOptions, SolveReport,
};
use tcrobust::utility::{
    conjugate, delta2_ratio, log_grid, luxemburg_norm, young_conjugate, young_pair, UtilitySpec,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

fn bs(mu: f64, sigma: f64) -> ModelSpec<f64> {
    ModelSpec::black_scholes(mu, sigma, 1.0)
}

fn c1_arctan() -> Outcome {
    let grid = TimeGrid::new(1.0, 50).map_err(|e| e.to_string())?;
    let noise = NoisePanel::monte_carlo(2024, 1000, &grid, 1).map_err(|e| e.to_string())?;
    let prices = simulate(&ModelSpec::ArctanDrift, &grid, &noise).map_err(|e| e.to_string())?;
    let lambda = 2.0 / 3.0;
    let ps = PriceSystem::constant(1000, 50, 0.75, lambda).map_err(|e| e.to_string())?;
    let band = verify_band(&prices, &ps, lambda).map_err(|e| e.to_string())?;
    ensure(band.holds && band.delta >= 0.0, format!("band fails at lambda = 2/3: {band:?}"))?;
    // Entry-by-entry recheck with zero tolerance.
    let bad = prices.iter().filter(|&&s| !((1.0 - lambda) * s <= 0.75 && 0.75 <= s)).count();
    ensure(bad == 0, format!("{bad} entries outside the band"))?;
    let cert = no_cps_certificate(&ModelSpec::ArctanDrift, 1.0, 0.42).ok_or("no certificate registered")?;
    ensure(cert.holds, "certificate does not hold at lambda = 0.42")?;
    ensure((cert.bid_floor - 0.58f64 * 1.75).abs() < 1e-15, "certificate value")?;
    Ok(format!("delta = {:.4}, (1-0.42)*7/4 = {}", band.delta, cert.bid_floor))
}

fn c2_conjugates() -> Outcome {
    let log = UtilitySpec::Log;
    let mut worst: f64 = 0.0;
    for k in 1..=20 {
        let y = 0.1 * k as f64;
        let v = conjugate(&log, y).map_err(|e| e.to_string())?;
        worst = worst.max((v - (-y.ln() - 1.0)).abs());
    }
    ensure(worst < 1e-8, format!("log conjugate error {worst:e}"))?;
    let ex = UtilitySpec::Exponential { a: 1.0 };
    let mut worst_e: f64 = 0.0;
    for k in 1..=20 {
        let y = 0.25 * k as f64;
        let v = conjugate(&ex, y).map_err(|e| e.to_string())?;
        worst_e = worst_e.max((v - (1.0 - y + y * y.ln())).abs());
    }
    ensure(worst_e < 1e-8, format!("exponential conjugate error {worst_e:e}"))?;
    let pair = young_pair(&ex).map_err(|e| e.to_string())?;
    ensure((pair.beta - 1.0).abs() < 1e-6, format!("beta = {}", pair.beta))?;
    for k in 0..=40 {
        let x = 0.25 * k as f64;
        ensure(pair.phi_star(x) == x.exp() - 1.0, format!("Phi*({x}) not exact"))?;
    }
    let mut worst_b: f64 = 0.0;
    for k in 1..=20 {
        let y = 0.3 * k as f64;
        let bi = young_conjugate(|x| pair.phi_star(x), y).ok_or("biconjugate unbounded")?;
        worst_b = worst_b.max((bi - pair.phi(y)).abs());
    }
    ensure(worst_b < 1e-7, format!("biconjugation error {worst_b:e}"))?;
    Ok(format!(
        "log err {worst:.1e}, exp err {worst_e:.1e}, beta {:.9}, biconj err {worst_b:.1e}",
        pair.beta
    ))
}

fn c3_luxemburg() -> Outcome {
    let phi = |x: f64| x.exp() - 1.0;
    let mut worst: f64 = 0.0;
    for &c in &[0.5, 1.0, 2.0] {
        let n = luxemburg_norm(&[c; 16], phi).map_err(|e| e.to_string())?;
        worst = worst.max((n - c / 2f64.ln()).abs());
    }
    ensure(worst < 1e-9, format!("constant-sample error {worst:e}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sample: Vec<f64> = (0..500).map(|_| 4.0 * uniform(&mut rng) - 2.0).collect();
    let base = luxemburg_norm(&sample, phi).map_err(|e| e.to_string())?;
    let mut worst_h: f64 = 0.0;
    for &c in &[0.5, 1.0, 2.0] {
        let scaled: Vec<f64> = sample.iter().map(|x| c * x).collect();
        let n = luxemburg_norm(&scaled, phi).map_err(|e| e.to_string())?;
        worst_h = worst_h.max((n - c * base).abs());
    }
    ensure(worst_h < 1e-9, format!("homogeneity error {worst_h:e}"))?;
    Ok(format!("analytic err {worst:.1e}, homogeneity err {worst_h:.1e}"))
}

fn c4_delta2() -> Outcome {
    let pair = young_pair(&UtilitySpec::Exponential { a: 1.0 }).map_err(|e| e.to_string())?;
    let grid = log_grid(1.0, 6, 10);
    let est = delta2_ratio(|y| pair.phi(y), &grid).map_err(|e| e.to_string())?;
    ensure(
        (1.9..=2.2).contains(&est.ratio_at_max),
        format!("ratio at 1e6 = {}", est.ratio_at_max),
    )?;
    ensure(est.finite, "Phi flagged non-Delta2")?;
    let star = delta2_ratio(|x| pair.phi_star(x), &grid).map_err(|e| e.to_string())?;
    ensure(!star.finite, "Phi* not flagged")?;
    Ok(format!("Phi ratio at 1e6 = {:.4}; Phi* flagged non-Delta2", est.ratio_at_max))
}

fn c5_accounting() -> Outcome {
    let (m, n) = (1000, 12);
    let grid = TimeGrid::new(1.0, n).map_err(|e| e.to_string())?;
    let noise = NoisePanel::monte_carlo(5, m, &grid, 1).map_err(|e| e.to_string())?;
    let prices = simulate(&bs(0.05, 0.25), &grid, &noise).map_err(|e| e.to_string())?;
    let lambda = 0.02;
    let cost = CostSpec::new(lambda, 3.0).map_err(|e| e.to_string())?;
    let shadow = prices.mapv(|s| s * (1.0 - 0.5 * lambda));
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut worst_cash: f64 = 0.0;
    let mut worst_lin: f64 = 0.0;
    let random_strategy = |rng: &mut ChaCha8Rng| -> Result<Strategy<f64>, String> {
        let h0 = 2.0 * uniform(rng) - 1.0;
        let mut up = Array2::zeros((m, n + 1));
        let mut dn = Array2::zeros((m, n + 1));
        for p in 0..m {
            let mut phi = h0;
            for i in 1..n {
                let (u, d) = (0.3 * uniform(rng), 0.3 * uniform(rng));
                up[[p, i]] = u;
                dn[[p, i]] = d;
                phi = phi + u - d;
            }
            if phi > 0.0 {
                dn[[p, n]] = phi;
            } else {
                up[[p, n]] = -phi;
            }
        }
        Strategy::new(grid, h0, up, dn, PolicyTag::Deterministic).map_err(|e| e.to_string())
    };
    let mut prev: Option<Strategy<f64>> = None;
    for _ in 0..100 {
        let s = random_strategy(&mut rng)?;
        let led = run_ledger(&s, &prices, &cost).map_err(|e| e.to_string())?;
        // Independent cash: initial trade, then separate buy and sell totals.
        for p in 0..m {
            let s0 = prices[[p, 0]];
            let h0 = s.h0();
            let initial = if h0 >= 0.0 { -h0 * s0 } else { -h0 * (1.0 - lambda) * s0 };
            let mut buys = 0.0;
            let mut sells = 0.0;
            for i in 0..=n {
                buys += prices[[p, i]] * s.up_jumps()[[p, i]];
                sells += prices[[p, i]] * s.dn_jumps()[[p, i]];
                let want = 3.0 + initial - buys + (1.0 - lambda) * sells;
                let got = led.cash[[p, i]];
                let scale = 3.0 + buys.abs() + sells.abs();
                worst_cash = worst_cash.max((got - want).abs() / scale);
            }
        }
        let v = shadow_ledger(&led, &shadow).map_err(|e| e.to_string())?;
        let viol = band_dominance_violations(&v, &prices, &shadow, lambda);
        ensure(viol.is_empty(), format!("{} liq > V entries inside the band", viol.len()))?;
        if let Some(q) = &prev {
            if s.h0() >= 0.0 && q.h0() >= 0.0 {
                let a = 0.3;
                let mix = s.blend(q, a).map_err(|e| e.to_string())?;
                let lm = run_ledger(&mix, &prices, &cost).map_err(|e| e.to_string())?;
                let lq = run_ledger(q, &prices, &cost).map_err(|e| e.to_string())?;
                for p in 0..m {
                    let want = a * led.liq[[p, n]] + (1.0 - a) * lq.liq[[p, n]];
                    let got = lm.liq[[p, n]];
                    worst_lin = worst_lin.max((got - want).abs() / (1.0 + want.abs()));
                }
            }
        }
        prev = Some(s);
    }
    ensure(worst_cash <= 1e-12, format!("cash conservation error {worst_cash:e}"))?;
    ensure(worst_lin <= 1e-12, format!("terminal linearity error {worst_lin:e}"))?;
    Ok(format!("cash rel err {worst_cash:.1e}, liq_T linearity err {worst_lin:.1e}"))
}

fn lattice_problem(thetas: Vec<ModelSpec<f64>>, steps: usize) -> Result<RobustProblem<f64>, String> {
    lattice_problem_with(thetas, steps, UtilitySpec::Log)
}

fn lattice_problem_with(
    thetas: Vec<ModelSpec<f64>>,
    steps: usize,
    utility: UtilitySpec<f64>,
) -> Result<RobustProblem<f64>, String> {
    let grid = TimeGrid::new(1.0, steps).map_err(|e| e.to_string())?;
    let noise = NoisePanel::lattice(&grid, 1, None).map_err(|e| e.to_string())?;
    RobustProblem::new(ProblemSpec {
        cost: CostSpec::new(0.01, 1.0).map_err(|e| e.to_string())?,
        thetas: ThetaGrid::new(thetas).map_err(|e| e.to_string())?,
        utility,
        grid,
        noise,
        policy_class: PolicyClass::LatticePolicy,
        long_only: false,
        admissibility: Admissibility::RPlus,
    })
    .map_err(|e| e.to_string())
}

fn lattice_fixtures() -> Result<Vec<(&'static str, RobustProblem<f64>)>, String> {
    Ok(vec![
        ("singleton", lattice_problem(vec![bs(0.05, 0.3)], 2)?),
        ("two-model", lattice_problem(vec![bs(0.05, 0.3), bs(0.02, 0.25)], 2)?),
    ])
}

fn lattice_opts() -> SolveOptions<f64> {
    SolveOptions {
        iters: 3000,
        step0: 0.2,
        ..SolveOptions::default()
    }
}

fn c6_oracle() -> Outcome {
    let og = OracleGrid {
        lo: -1.0,
        hi: 1.0,
        step: 0.05,
        budget: 1_000_000,
    };
    let mut notes = Vec::new();
    for (name, p) in lattice_fixtures()? {
        let oracle = brute_force(&p, &og).map_err(|e| e.to_string())?;
        let rep = solve(&p, &lattice_opts()).map_err(|e| e.to_string())?;
        let diff = (rep.robust_value - oracle.value).abs();
        ensure(
            diff <= oracle.neighbor_gap,
            format!(
                "{name}: solver {} vs oracle {} (gap {})",
                rep.robust_value, oracle.value, oracle.neighbor_gap
            ),
        )?;
        notes.push(format!("{name}: |diff| {diff:.2e} <= gap {:.2e}", oracle.neighbor_gap));
    }
    Ok(notes.join("; "))
}

fn mc_fixture(paths: usize) -> Result<RobustProblem<f64>, String> {
    let grid = TimeGrid::new(1.0, 4).map_err(|e| e.to_string())?;
    let noise = NoisePanel::monte_carlo(77, paths, &grid, 1).map_err(|e| e.to_string())?;
    RobustProblem::new(ProblemSpec {
        cost: CostSpec::new(0.01, 1.0).map_err(|e| e.to_string())?,
        thetas: ThetaGrid::new(vec![bs(0.08, 0.3), bs(0.05, 0.25)]).map_err(|e| e.to_string())?,
        utility: UtilitySpec::Log,
        grid,
        noise,
        policy_class: PolicyClass::DeterministicSchedule,
        long_only: false,
        admissibility: Admissibility::RPlus,
    })
    .map_err(|e| e.to_string())
}

fn registered(p: &RobustProblem<f64>, shrink: Option<f64>) -> Result<Vec<PriceSystem<f64>>, String> {
    let spec = p.spec();
    spec.thetas
        .models()
        .iter()
        .map(|m| girsanov_cps(m, &spec.grid, &spec.noise, shrink).map_err(|e| e.to_string()))
        .collect()
}

fn c7_supermartingale() -> Outcome {
    let mut checks = 0;
    for (name, p) in lattice_fixtures()? {
        let rep = solve(&p, &lattice_opts()).map_err(|e| e.to_string())?;
        let s = decode(&p, &rep.best_params).map_err(|e| e.to_string())?;
        for shrink in [None, Some(0.995)] {
            for (k, ps) in registered(&p, shrink)?.iter().enumerate() {
                let led = run_ledger(&s, &p.panel().prices[k], &p.spec().cost).map_err(|e| e.to_string())?;
                let led = shadow_ledger(&led, &ps.shadow).map_err(|e| e.to_string())?;
                let mode = CheckMode::Lattice(&p.spec().noise);
                let sm = supermartingale_check(led.shadow.as_ref().unwrap(), ps, mode, 1e-10)
                    .map_err(|e| e.to_string())?;
                ensure(sm.pass, format!("{name} model {k}: supermartingale excess {}", sm.max_excess))?;
                let pol = polarity_check(&led.terminal_liq(), ps, 1.0, 1.0, mode, 1e-10).map_err(|e| e.to_string())?;
                ensure(pol.pass, format!("{name} model {k}: E[XY] = {} > xy", pol.lhs.mean))?;
                checks += 2;
            }
        }
    }
    let p = mc_fixture(100_000)?;
    let rep = solve(
        &p,
        &SolveOptions {
            iters: 60,
            ..SolveOptions::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let s = decode(&p, &rep.best_params).map_err(|e| e.to_string())?;
    let mut worst_z = f64::NEG_INFINITY;
    for (k, ps) in registered(&p, None)?.iter().enumerate() {
        let led = run_ledger(&s, &p.panel().prices[k], &p.spec().cost).map_err(|e| e.to_string())?;
        let pol = polarity_check(&led.terminal_liq(), ps, 1.0, 1.0, CheckMode::MonteCarlo, 0.0)
            .map_err(|e| e.to_string())?;
        ensure(pol.pass, format!("MC model {k}: E[XY] = {} > 1 + 3 SE ({})", pol.lhs.mean, pol.lhs.se))?;
        worst_z = worst_z.max((pol.lhs.mean - pol.rhs) / pol.lhs.se);
        checks += 1;
    }
    Ok(format!("{checks} checks; MC polarity worst z = {worst_z:.2}"))
}

fn c8_duality() -> Outcome {
    let y_grid = vec![0.25, 0.5, 1.0, 2.0, 4.0];
    let mut fixtures = lattice_fixtures()?;
    fixtures.push(("monte-carlo", mc_fixture(20_000)?));
    fixtures.push((
        "power",
        lattice_problem_with(vec![bs(0.05, 0.3), bs(0.02, 0.25)], 2, UtilitySpec::Power { p: 0.5 })?,
    ));
    let mut notes = Vec::new();
    for (name, p) in fixtures {
        let opts = if p.spec().noise.is_lattice() {
            lattice_opts()
        } else {
            SolveOptions {
                iters: 100,
                ..SolveOptions::default()
            }
        };
        let rep = solve(&p, &opts).map_err(|e| e.to_string())?;
        let systems = registered(&p, None)?;
        let d = duality_report(
            &p,
            &rep,
            &systems,
            &DualityOptions {
                y_grid: y_grid.clone(),
                k_grid: vec![1.0, 4.0, 16.0],
                solve: opts.clone(),
                tol: 1e-9,
            },
        )
        .map_err(|e| e.to_string())?;
        for b in &d.bounds {
            ensure(
                b.pass,
                format!("{name} model {} y {}: value {} > bound {}", b.theta, b.y, b.solver_value, b.bound),
            )?;
        }
        ensure(d.polarity.iter().all(|p| p.report.pass), format!("{name}: polarity failure"))?;
        ensure(
            d.inada_pass,
            format!(
                "{name}: chord slopes {:?}",
                d.inada.iter().map(|i| i.chord).collect::<Vec<_>>()
            ),
        )?;
        let min_slack = d.bounds.iter().map(|b| b.bound - b.solver_value).fold(f64::INFINITY, f64::min);
        // With U(0) >= 0 the ratio itself is checked; log falls back to chord slopes.
        let (label, slopes): (&str, Vec<f64>) = if p.spec().utility.eval(0.0) >= 0.0 {
            ("ratios", d.inada.iter().map(|i| i.ratio).collect())
        } else {
            ("chords", d.inada.iter().map(|i| i.chord).collect())
        };
        notes.push(format!(
            "{name}: min slack {min_slack:.3e}, {label} {:?}",
            slopes.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>()
        ));
    }
    Ok(notes.join("; "))
}

fn c9_monotonicity() -> Outcome {
    let chain = [
        vec![bs(0.06, 0.3)],
        vec![bs(0.06, 0.3), bs(0.04, 0.3)],
        vec![bs(0.06, 0.3), bs(0.04, 0.3), bs(0.03, 0.2)],
    ];
    let mut values = Vec::new();
    for thetas in chain.iter() {
        let p = lattice_problem(thetas.clone(), 2)?;
        values.push(solve(&p, &lattice_opts()).map_err(|e| e.to_string())?.robust_value);
    }
    for w in values.windows(2) {
        ensure(w[1] <= w[0] + 1e-6, format!("robust value rose from {} to {}", w[0], w[1]))?;
    }

    let grid = TimeGrid::new(1.0, 4).map_err(|e| e.to_string())?;
    let noise = NoisePanel::monte_carlo(9, 2000, &grid, 1).map_err(|e| e.to_string())?;
    let p = RobustProblem::new(ProblemSpec {
        cost: CostSpec::new(0.01, 1.0).map_err(|e| e.to_string())?,
        thetas: ThetaGrid::new(vec![bs(0.1, 0.2), bs(-0.1, 0.2)]).map_err(|e| e.to_string())?,
        utility: UtilitySpec::Log,
        grid,
        noise,
        policy_class: PolicyClass::DeterministicSchedule,
        long_only: true,
        admissibility: Admissibility::RPlus,
    })
    .map_err(|e| e.to_string())?;
    let rep: SolveReport<f64> = solve(
        &p,
        &SolveOptions {
            iters: 100,
            init: Some(tcrobust::solver::PolicyParams {
                h0: 0.5,
                ..tcrobust::solver::PolicyParams::zero(p.slots())
            }),
            ..SolveOptions::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let strict = rep.history.iter().filter(|h| h.argmin_theta == 1).count();
    for h in &rep.history {
        ensure(
            h.argmin_set.contains(&1),
            format!("iteration {}: worst model set {:?}", h.iter, h.argmin_set),
        )?;
    }
    Ok(format!(
        "chain values {:?}; mu=-0.1 worst on all {} iterations ({strict} strictly)",
        values.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>(),
        rep.history.len()
    ))
}

fn random_path(grid: TimeGrid<f64>, rng: &mut ChaCha8Rng) -> MonotonePath<f64> {
    let mut jumps = vec![0.0];
    for _ in 0..grid.steps() {
        let big = uniform(rng) < 0.2;
        jumps.push(if big { uniform(rng) } else { 0.01 * uniform(rng) });
    }
    MonotonePath::new(grid, jumps).expect("valid path")
}

fn c10_komlos() -> Outcome {
    let grid = TimeGrid::new(1.0, 10).map_err(|e| e.to_string())?;
    let e = RationalEnumeration::new(64).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let paths: Vec<_> = (0..30).map(|_| random_path(grid, &mut rng)).collect();
    for f in &paths {
        ensure(rho(f, f, &e).unwrap().value == 0.0, "rho(f, f) != 0")?;
        for g in &paths {
            let fg = rho(f, g, &e).unwrap().value;
            ensure(fg == rho(g, f, &e).unwrap().value, "rho not symmetric")?;
            for h in paths.iter().take(10) {
                let bound = rho(f, h, &e).unwrap().value + rho(h, g, &e).unwrap().value;
                ensure(fg <= bound * (1.0 + 1e-15), "triangle inequality")?;
            }
        }
    }

    let c = MonotonePath::new(grid, vec![0.0, 0.1, 0.0, 0.3, 0.0, 0.2, 0.1, 0.0, 0.7, 0.0, 0.05]).unwrap();
    let k = komlos_average(&vec![c.clone(); 21]).map_err(|e| e.to_string())?;
    ensure(k.averages.iter().all(|a| a.jumps() == c.jumps()), "constant sequence moved")?;
    let a = MonotonePath::new(grid, (0..=10).map(|i| if i % 2 == 1 { 1.0 } else { 0.0 }).collect()).unwrap();
    let b = MonotonePath::new(grid, (0..=10).map(|i| if i % 2 == 0 && i > 0 { 1.0 } else { 0.0 }).collect()).unwrap();
    let alt: Vec<_> = (0..41).map(|j| if j % 2 == 0 { a.clone() } else { b.clone() }).collect();
    let k = komlos_average(&alt).map_err(|e| e.to_string())?;
    for (n, avg) in k.averages.iter().enumerate() {
        let len = (n + 1) as f64;
        let na = (n..=2 * n).filter(|j| j % 2 == 0).count() as f64;
        for (i, &jmp) in avg.jumps().iter().enumerate() {
            let want = if i == 0 {
                0.0
            } else if i % 2 == 1 {
                na / len
            } else {
                (len - na) / len
            };
            ensure(jmp == want, format!("alternating average n={n} i={i}: {jmp} vs {want}"))?;
        }
    }

    // Random i.i.d. sequences: rho(A_n, A_2n) averaged over replicates.
    let reps = 16;
    let ns = [10usize, 100, 1000];
    let mut dist = vec![0.0; ns.len()];
    for _ in 0..reps {
        let seq: Vec<_> = (0..4001).map(|_| random_path(grid, &mut rng)).collect();
        let k = komlos_average(&seq).map_err(|e| e.to_string())?;
        for (j, &n) in ns.iter().enumerate() {
            dist[j] += rho(&k.averages[n], &k.averages[2 * n], &e).unwrap().value / reps as f64;
        }
    }
    for w in dist.windows(2) {
        ensure(w[1] * 2.0 <= w[0], format!("distances {dist:?} do not halve per decade"))?;
    }
    Ok(format!(
        "decade distances {:?}",
        dist.iter().map(|d| format!("{d:.2e}")).collect::<Vec<_>>()
    ))
}

fn run_cli(dir: &Path, config: &Path, threads: &str) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_tcrobust"))
        .args(["solve", "--config"])
        .arg(config)
        .arg("--out")
        .arg(dir)
        .args(["--threads", threads])
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), format!("solve exited with {:?}: {}", out.status, String::from_utf8_lossy(&out.stderr)))
}

fn inventory(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let text = std::fs::read_to_string(dir.join("manifest.json")).map_err(|e| e.to_string())?;
    let manifest: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let files = manifest["outputs"].as_array().ok_or("manifest lacks outputs")?;
    files
        .iter()
        .map(|f| {
            let name = f["file"].as_str().ok_or("bad entry")?.to_string();
            let bytes = std::fs::read(dir.join(&name)).map_err(|e| e.to_string())?;
            Ok((name, bytes))
        })
        .collect()
}

fn c11_reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = tmp.path().join("config.json");
    std::fs::write(
        &config,
        r#"{
            "seed": 11,
            "grid": {"horizon": 1.0, "steps": 8},
            "noise": {"kind": "monte-carlo", "paths": 20000},
            "thetas": [
                {"model": "black-scholes", "mu": 0.08, "sigma": 0.3},
                {"model": "black-scholes", "mu": 0.04, "sigma": 0.2}
            ],
            "lambda": 0.01,
            "utility": {"kind": "log"},
            "optimizer": {"iters": 50},
            "write_ledgers": true
        }"#,
    )
    .map_err(|e| e.to_string())?;
    let runs = [("a", "1"), ("b", "1"), ("c", "8")];
    let mut outputs = Vec::new();
    for (name, threads) in runs {
        let dir = tmp.path().join(name);
        run_cli(&dir, &config, threads)?;
        outputs.push(inventory(&dir)?);
    }
    ensure(outputs[0].len() >= 6, format!("only {} files inventoried", outputs[0].len()))?;
    for other in &outputs[1..] {
        ensure(other.len() == outputs[0].len(), "inventories differ in length")?;
        for ((na, ba), (nb, bb)) in outputs[0].iter().zip(other) {
            ensure(na == nb && ba == bb, format!("{na} differs between runs"))?;
        }
    }
    Ok(format!("{} files byte-identical across 3 runs (threads 1, 1, 8)", outputs[0].len()))
}

fn main() {
    let criteria: Vec<(&str, u64, fn() -> Outcome)> = vec![
        ("1 arctan CPS thresholds", 1, c1_arctan),
        ("2 conjugate and Young closed forms", 1, c2_conjugates),
        ("3 Luxemburg norm analytic case", 1, c3_luxemburg),
        ("4 Delta2 ratio", 1, c4_delta2),
        ("5 accounting identities", 5, c5_accounting),
        ("6 oracle equivalence", 60, c6_oracle),
        ("7 supermartingale and polarity", 30, c7_supermartingale),
        ("8 duality bound and Inada diagnostic", 60, c8_duality),
        ("9 robust monotonicity and worst-model selection", 60, c9_monotonicity),
        ("10 Komlos averages and rho", 10, c10_komlos),
        ("11 reproducibility", 120, c11_reproducibility),
    ];
    let mut failed = 0;
    for (name, budget, f) in criteria {
        let t = Instant::now();
        let res = f();
        let elapsed = t.elapsed();
        let res = match res {
            Ok(msg) if elapsed > Duration::from_secs(budget) => {
                Err(format!("{msg}; runtime {:.2}s exceeds {budget}s", elapsed.as_secs_f64()))
            }
            r => r,
        };
        match res {
            Ok(msg) => println!("PASS criterion {name} [{:.2}s]: {msg}", elapsed.as_secs_f64()),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {name} [{:.2}s]: {msg}", elapsed.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
