mod common;

use std::collections::HashMap;

use faer::Mat;
use kpop::balancing::{self, bias_bound, ess, mean_first_columns, n_to_90pct, KpopConfig};
use kpop::calibration::{entropy_balance, post_stratify, rake_margins, CalibrationProblem};
use kpop::dataset::{one_hot, strata_labels, ColumnData, ColumnRoles, Dataset, Variable};
use kpop::estimation::{weighted_mean, Z_95};
use kpop::kernel::{distance_histogram, make_kernel, KernelMatrix};
use kpop::spectral::thin_svd;
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LEVELS: [&str; 4] = ["a", "b", "c", "d"];

struct CatData {
    ds: Dataset,
    vars: Vec<String>,
    columns: Vec<Vec<&'static str>>,
    n_sample: usize,
}

/// Random categorical sample + population, sample rows first, every
/// variable taking at least two levels in the sample.
fn cat_data(seed: u64, with_weights: bool) -> CatData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_s = rng.random_range(4..14);
    let n_p = rng.random_range(3..14);
    let n_vars = rng.random_range(1..4);
    let mut columns = Vec::new();
    for _ in 0..n_vars {
        let k = rng.random_range(2..=4);
        let mut col: Vec<&'static str> = (0..n_s + n_p).map(|_| LEVELS[rng.random_range(0..k)]).collect();
        col[0] = LEVELS[0];
        col[1] = LEVELS[1];
        columns.push(col);
    }
    let vars: Vec<String> = (0..n_vars).map(|j| format!("v{j}")).collect();
    let variables = vars
        .iter()
        .zip(&columns)
        .map(|(n, c)| Variable::categorical(n.clone(), c))
        .collect();
    let (base, pop, y) = if with_weights {
        (
            Some((0..n_s).map(|_| rng.random_range(0.5..3.0)).collect()),
            Some((0..n_p).map(|_| rng.random_range(0.0..2.0) + 0.1).collect()),
            Some((0..n_s).map(|_| rng.random_range(-1.0..1.0)).collect()),
        )
    } else {
        (None, None, None)
    };
    let ds = Dataset::new(variables, (0..n_s + n_p).map(|i| i < n_s).collect(), base, pop, y).unwrap();
    CatData {
        ds,
        vars,
        columns,
        n_sample: n_s,
    }
}

/// Two continuous covariates, generic enough that singular values are
/// distinct.
fn continuous_data(seed: u64, n_s: usize, n_p: usize, order: &[usize]) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x1: Vec<f64> = (0..n_s + n_p)
        .map(|i| rng.random_range(-1.0..1.0) + if i < n_s { 0.4 } else { 0.0 })
        .collect();
    let x2: Vec<f64> = (0..n_s + n_p).map(|_| rng.random_range(-1.0..1.0)).collect();
    let perm = |v: &[f64]| -> Vec<f64> {
        let mut out: Vec<f64> = order.iter().map(|&i| v[i]).collect();
        out.extend_from_slice(&v[n_s..]);
        out
    };
    Dataset::new(
        vec![Variable::numeric("x1", perm(&x1)), Variable::numeric("x2", perm(&x2))],
        (0..n_s + n_p).map(|i| i < n_s).collect(),
        None,
        None,
        None,
    )
    .unwrap()
}

fn random_kernel(seed: u64, n_s: usize, n_p: usize) -> KernelMatrix {
    let ds = continuous_data(seed, n_s, n_p, &(0..n_s).collect::<Vec<_>>());
    let design = one_hot(&ds, &["x1".into(), "x2".into()]).unwrap();
    make_kernel(&design, 1.5).unwrap()
}

fn column_map(ds: &Dataset, vars: &[String]) -> Vec<HashMap<String, f64>> {
    let d = one_hot(ds, vars).unwrap();
    (0..d.n_rows())
        .map(|i| {
            d.column_names
                .iter()
                .enumerate()
                .map(|(j, n)| (n.clone(), d.get(i, j)))
                .collect()
        })
        .collect()
}

fn saturated_config() -> proptest::test_runner::Config {
    proptest::test_runner::Config {
        cases: 48,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(saturated_config())]

    #[test]
    fn one_hot_row_permutation_equivariant(seed in any::<u64>(), shuffle in any::<u64>()) {
        let d = cat_data(seed, false);
        let n = d.columns[0].len();
        let mut s_perm: Vec<usize> = (0..d.n_sample).collect();
        let mut p_perm: Vec<usize> = (d.n_sample..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle);
        s_perm.shuffle(&mut rng);
        p_perm.shuffle(&mut rng);
        let order: Vec<usize> = s_perm.iter().chain(&p_perm).copied().collect();
        let vars: Vec<Variable> = d.vars.iter().zip(&d.columns).map(|(name, c)| {
            let permuted: Vec<&str> = order.iter().map(|&i| c[i]).collect();
            Variable::categorical(name.clone(), &permuted)
        }).collect();
        let pds = Dataset::new(vars, (0..n).map(|i| i < d.n_sample).collect(), None, None, None).unwrap();
        let orig = column_map(&d.ds, &d.vars);
        let perm = column_map(&pds, &d.vars);
        for (new_row, &old_row) in order.iter().enumerate() {
            prop_assert_eq!(&perm[new_row], &orig[old_row]);
        }
    }

    #[test]
    fn one_hot_distance_twice_differences(seed in any::<u64>()) {
        let d = cat_data(seed, false);
        let m = one_hot(&d.ds, &d.vars).unwrap();
        for i in 0..m.n_rows() {
            for j in 0..m.n_rows() {
                let dist: f64 = m.row(i).iter().zip(m.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                let diff = d.columns.iter().filter(|c| c[i] != c[j]).count();
                prop_assert_eq!(dist, 2.0 * diff as f64);
            }
        }
    }

    #[test]
    fn dataset_csv_round_trip(seed in any::<u64>()) {
        let d = cat_data(seed, true);
        let roles = ColumnRoles {
            sample_col: "s".into(),
            covariates: d.vars.clone(),
            continuous: vec![],
            base_weight_col: Some("bw".into()),
            pop_weight_col: Some("pw".into()),
            outcome_col: Some("y".into()),
        };
        let mut buf = Vec::new();
        d.ds.write_csv(&mut buf, &roles).unwrap();
        let back = Dataset::from_reader(buf.as_slice(), &roles).unwrap();
        prop_assert_eq!(back.in_sample(), d.ds.in_sample());
        prop_assert_eq!(back.base_weights(), d.ds.base_weights());
        prop_assert_eq!(back.pop_weights(), d.ds.pop_weights());
        prop_assert_eq!(back.outcome(), d.ds.outcome());
        for (a, b) in back.variables().iter().zip(d.ds.variables()) {
            prop_assert_eq!(&a.name, &b.name);
            prop_assert_eq!(&a.data, &b.data);
        }
    }

    #[test]
    fn kernel_entries_consistent(seed in any::<u64>(), b in 0.2f64..20.0, scale in 1.01f64..4.0) {
        let d = cat_data(seed, false);
        let design = one_hot(&d.ds, &d.vars).unwrap();
        let k = make_kernel(&design, b).unwrap();
        let wider = make_kernel(&design, b * scale).unwrap();
        let hist = distance_histogram(&design).unwrap();
        let n_s = k.n_sample();
        prop_assert_eq!(hist.total(), (k.n_rows() * n_s - n_s) as u64);
        for i in 0..k.n_rows() {
            let mut by_dist: Vec<(f64, f64)> = Vec::new();
            for j in 0..n_s {
                let dist: f64 = design.row(i).iter().zip(design.row(j)).map(|(a, c)| (a - c) * (a - c)).sum();
                let kij = k.get(i, j);
                prop_assert!((kij - (-dist / b).exp()).abs() <= 1e-12);
                if i == j {
                    prop_assert_eq!(kij, 1.0);
                } else {
                    prop_assert!(hist.bins().iter().any(|(d0, _)| *d0 == dist));
                }
                if i < n_s {
                    prop_assert_eq!(kij, k.get(j, i));
                }
                if dist > 0.0 {
                    prop_assert!(wider.get(i, j) > kij);
                }
                by_dist.push((dist, kij));
            }
            by_dist.sort_by(|a, b| a.0.total_cmp(&b.0));
            for p in by_dist.windows(2) {
                if p[1].0 > p[0].0 {
                    prop_assert!(p[1].1 < p[0].1);
                }
            }
        }
    }

    #[test]
    fn kernel_sample_block_psd(seed in any::<u64>()) {
        let d = cat_data(seed, false);
        let k = make_kernel(&one_hot(&d.ds, &d.vars).unwrap(), 1.0).unwrap();
        let n_s = k.n_sample();
        let m = DMatrix::from_fn(n_s, n_s, |i, j| k.get(i, j));
        let eig = SymmetricEigen::new(m).eigenvalues;
        let max = eig.max();
        prop_assert!(eig.iter().all(|&l| l >= -1e-8 * max));
    }

    #[test]
    fn svd_row_permutation_and_conventions(seed in any::<u64>(), shuffle in any::<u64>(), n_s in 3usize..20, n_p in 2usize..25) {
        let k = random_kernel(seed, n_s, n_p);
        let dec = thin_svd(&k, 1e-10).unwrap();
        let a1 = dec.singular_values[0];
        let km = k.as_mat();
        for j in 0..dec.rank() {
            let mut big = 0usize;
            for i in 0..n_s {
                if dec.u[(i, j)].abs() > dec.u[(big, j)].abs() {
                    big = i;
                }
            }
            prop_assert!(dec.u[(big, j)] > 0.0);
            let mut err = 0.0;
            for i in 0..k.n_rows() {
                let ku: f64 = (0..n_s).map(|c| km[(i, c)] * dec.u[(c, j)]).sum();
                err += (ku - dec.singular_values[j] * dec.v[(i, j)]).powi(2);
            }
            prop_assert!(err.sqrt() <= 1e-8 * a1);
        }
        let mut order: Vec<usize> = (0..k.n_rows()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle));
        let values: Vec<f64> = order.iter().flat_map(|&i| k.row(i).to_vec()).collect();
        let pk = KernelMatrix::from_parts(values, k.n_rows(), n_s, k.bandwidth()).unwrap();
        let pdec = thin_svd(&pk, 1e-10).unwrap();
        prop_assert_eq!(pdec.rank(), dec.rank());
        for (a, b) in pdec.singular_values.iter().zip(&dec.singular_values) {
            prop_assert!((a - b).abs() <= 1e-10 * a1);
        }
    }

    #[test]
    fn entropy_balance_invariants(seed in any::<u64>(), scale in 0.001f64..1000.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(5..30);
        let m = rng.random_range(1..4);
        let a = Mat::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
        let mut q: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..2.0)).collect();
        let tq: f64 = q.iter().sum();
        q.iter_mut().for_each(|x| *x /= tq);
        // targets inside the convex hull: a random simplex mix of the rows
        let mix: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let tm: f64 = mix.iter().sum();
        let t: Vec<f64> = (0..m).map(|j| (0..n).map(|i| mix[i] * a[(i, j)]).sum::<f64>() / tm).collect();
        let sol = entropy_balance(&CalibrationProblem::new(a.clone(), t.clone(), q.clone()).unwrap()).unwrap();
        prop_assert!(sol.weights.iter().all(|&w| w >= 0.0));
        prop_assert!((sol.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(sol.residual >= 0.0 && sol.divergence >= 0.0);
        prop_assert!(sol.converged);
        for j in 0..m {
            let got: f64 = (0..n).map(|i| sol.weights[i] * a[(i, j)]).sum();
            prop_assert!((got - t[j]).abs() <= 1e-4);
        }

        // rescale column 0 and its target
        let sa = Mat::from_fn(n, m, |i, j| if j == 0 { a[(i, j)] * scale } else { a[(i, j)] });
        let mut st = t.clone();
        st[0] *= scale;
        let scaled = entropy_balance(&CalibrationProblem::new(sa, st, q.clone()).unwrap()).unwrap();
        for (x, y) in scaled.weights.iter().zip(&sol.weights) {
            prop_assert!((x - y).abs() <= 1e-8);
        }

        // reorder the units
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let pa = Mat::from_fn(n, m, |i, j| a[(order[i], j)]);
        let pq: Vec<f64> = order.iter().map(|&i| q[i]).collect();
        let perm = entropy_balance(&CalibrationProblem::new(pa, t, pq).unwrap()).unwrap();
        for (i, &o) in order.iter().enumerate() {
            prop_assert!((perm.weights[i] - sol.weights[o]).abs() <= 1e-8);
        }
    }

    #[test]
    fn post_stratification_structure(seed in any::<u64>()) {
        let d = cat_data(seed, true);
        let out = post_stratify(&d.ds, &d.vars);
        let Ok(out) = out else {
            return Ok(());
        };
        let w = &out.solution.weights;
        let keys = strata_labels(&d.ds, &d.vars).unwrap();
        let (s_keys, p_keys) = keys.split_at(d.n_sample);
        let q = d.ds.base_weights();
        let mut pop: HashMap<&str, f64> = HashMap::new();
        for (k, p) in p_keys.iter().zip(d.ds.pop_weights()) {
            *pop.entry(k.as_str()).or_default() += p;
        }
        let kept: f64 = pop.iter().filter(|(k, _)| s_keys.iter().any(|s| s == *k)).map(|(_, v)| v).sum();
        let mut smp: HashMap<&str, f64> = HashMap::new();
        for i in 0..d.n_sample {
            let k = s_keys[i].as_str();
            *smp.entry(k).or_default() += w[i];
            match pop.get(k) {
                None => prop_assert_eq!(w[i], 0.0),
                // weight per unit of base weight is constant within a stratum
                Some(_) => {
                    for j in 0..d.n_sample {
                        if s_keys[j] == s_keys[i] {
                            prop_assert!((w[i] / q[i] - w[j] / q[j]).abs() <= 1e-12);
                        }
                    }
                }
            }
        }
        for (k, total) in smp {
            let share = pop.get(k).map_or(0.0, |p| p / kept);
            prop_assert!((total - share).abs() <= 1e-12);
        }
    }

    #[test]
    fn weighted_mean_affine(seed in any::<u64>(), a in -50.0f64..50.0, b in -10.0f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..40);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        let r = weighted_mean(&y, &w).unwrap();
        let ty: Vec<f64> = y.iter().map(|v| a * v + b).collect();
        let t = weighted_mean(&ty, &w).unwrap();
        let tol = 1e-9 * (1.0 + a.abs() + b.abs());
        prop_assert!((t.estimate - (a * r.estimate + b)).abs() <= tol);
        prop_assert!((t.se - a.abs() * r.se).abs() <= tol);
        prop_assert!(r.ci_low <= r.estimate && r.estimate <= r.ci_high);
        prop_assert!((r.ci_high - r.estimate - Z_95 * r.se).abs() <= 1e-12 * (1.0 + r.se));
        prop_assert!(r.n_effective > 0.0 && r.n_effective <= n as f64 + 1e-9);

        // each unit twice at half weight
        let dy: Vec<f64> = y.iter().flat_map(|v| [*v, *v]).collect();
        let dw: Vec<f64> = w.iter().flat_map(|v| [v / 2.0, v / 2.0]).collect();
        let dup = weighted_mean(&dy, &dw).unwrap();
        prop_assert!((dup.estimate - r.estimate).abs() <= 1e-12);
    }
}

fn kpop_cfg() -> KpopConfig {
    KpopConfig {
        increment: 1,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(proptest::test_runner::Config { cases: 24, ..Default::default() })]

    #[test]
    fn kpop_argmin_and_diagnostics(seed in any::<u64>(), mf in any::<bool>()) {
        let d = cat_data(seed, false);
        let mut cfg = kpop_cfg();
        if mf {
            cfg.mean_first_vars = vec![d.vars[0].clone()];
        }
        let rep = match balancing::solve(&d.ds, &d.vars, &cfg) {
            Ok(r) => r,
            Err(_) => return Ok(()),
        };
        for g in rep.grid.iter().filter(|g| g.converged) {
            if !rep.no_converged_candidate {
                // exact: the chosen point is never beaten by a converged one
                prop_assert!(rep.bias_bound_after <= g.bias_bound || !rep.weights.converged);
            }
        }
        let chosen = rep.grid.iter().find(|g| g.r == rep.chosen_r).unwrap();
        prop_assert_eq!(chosen.bias_bound, rep.bias_bound_after);
        prop_assert!(rep.bias_bound_ratio > 0.0);
        prop_assert!(rep.ess > 0.0 && rep.ess <= d.n_sample as f64 + 1e-9);
        prop_assert!(rep.n_to_90pct >= 1 && rep.n_to_90pct <= d.n_sample);

        let basis = balancing::kernel_basis(&d.ds, &d.vars, &cfg).unwrap();
        let uniform = vec![1.0 / d.n_sample as f64; d.n_sample];
        let b0 = bias_bound(&basis.decomposition, &uniform, d.ds.pop_weights()).unwrap();
        prop_assert!((b0.value - rep.bias_bound_before).abs() <= 1e-12 * (1.0 + b0.value));

        if mf && rep.weights.converged {
            let m = mean_first_columns(&d.ds, &cfg.mean_first_vars).unwrap();
            for (j, t) in m.targets.iter().enumerate() {
                let got: f64 = (0..d.n_sample).map(|i| rep.weights.weights[i] * m.sample[(i, j)]).sum();
                prop_assert!((got - t).abs() <= cfg.tolerance);
            }
        }
    }

    #[test]
    fn kpop_sample_order_invariant(seed in any::<u64>(), shuffle in any::<u64>(), n_s in 5usize..14, n_p in 8usize..20) {
        let ident: Vec<usize> = (0..n_s).collect();
        let mut order = ident.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle));
        let vars = vec!["x1".to_string(), "x2".to_string()];
        let cfg = KpopConfig { b: Some(2.0), ..kpop_cfg() };
        let a = balancing::solve(&continuous_data(seed, n_s, n_p, &ident), &vars, &cfg).unwrap();
        let b = balancing::solve(&continuous_data(seed, n_s, n_p, &order), &vars, &cfg).unwrap();
        // best-effort iterates of infeasible points depend on the Newton path
        for (ga, gb) in a.grid.iter().zip(&b.grid).filter(|(x, y)| x.converged && y.converged) {
            prop_assert!((ga.bias_bound - gb.bias_bound).abs() <= 1e-6 * (1.0 + ga.bias_bound));
        }
        prop_assert!((a.bias_bound_before - b.bias_bound_before).abs() <= 1e-9);
        if a.weights.converged && b.weights.converged {
            let mut sorted: Vec<f64> = a.grid.iter().filter(|g| g.converged).map(|g| g.bias_bound).collect();
            sorted.sort_by(f64::total_cmp);
            // the r choice is only well defined when the best bound is separated
            if sorted.len() < 2 || sorted[1] - sorted[0] > 1e-6 * (1.0 + sorted[0]) {
                prop_assert_eq!(a.chosen_r, b.chosen_r);
                for (i, &o) in order.iter().enumerate() {
                    prop_assert!((b.weights.weights[i] - a.weights.weights[o]).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn kpop_saturated_full_rank_is_poststrat(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_vars = rng.random_range(1..4);
        let levels: Vec<usize> = (0..n_vars).map(|_| rng.random_range(2..4)).collect();
        let n_profiles = rng.random_range(2..7);
        let mut profiles: Vec<Vec<usize>> = Vec::new();
        while profiles.len() < n_profiles.min(levels.iter().product()) {
            let p: Vec<usize> = levels.iter().map(|&k| rng.random_range(0..k)).collect();
            if !profiles.contains(&p) {
                profiles.push(p);
            }
        }
        // each profile appears in both parts, plus random extras
        let mut sample: Vec<usize> = (0..profiles.len()).collect();
        let mut pop: Vec<usize> = (0..profiles.len()).collect();
        for _ in 0..rng.random_range(0..8) {
            sample.push(rng.random_range(0..profiles.len()));
        }
        for _ in 0..rng.random_range(0..8) {
            pop.push(rng.random_range(0..profiles.len()));
        }
        let rows: Vec<usize> = sample.iter().chain(&pop).copied().collect();
        let vars: Vec<String> = (0..n_vars).map(|j| format!("v{j}")).collect();
        let variables = (0..n_vars)
            .map(|j| {
                let col: Vec<&str> = rows.iter().map(|&p| LEVELS[profiles[p][j]]).collect();
                Variable::categorical(vars[j].clone(), &col)
            })
            .collect();
        let ds = Dataset::new(variables, (0..rows.len()).map(|i| i < sample.len()).collect(), None, None, None).unwrap();
        if ds.variables().iter().any(|v| matches!(&v.data, ColumnData::Categorical { levels, .. } if levels.len() < 2)) {
            return Ok(());
        }
        let basis = balancing::kernel_basis(&ds, &vars, &KpopConfig::default()).unwrap();
        let rank = basis.decomposition.rank();
        prop_assert_eq!(rank, profiles.len());
        let cfg = KpopConfig { min_dims: rank, max_dims: Some(rank), tolerance: 1e-8, ..Default::default() };
        let rep = balancing::solve_with_basis(&ds, &vars, &basis, &cfg).unwrap();
        prop_assert!(rep.weights.converged);
        let ps = post_stratify(&ds, &vars).unwrap();
        for (a, b) in rep.weights.weights.iter().zip(&ps.solution.weights) {
            prop_assert!((a - b).abs() <= 1e-3 * b);
        }
    }

    #[test]
    fn rake_matches_margins_when_supported(seed in any::<u64>()) {
        let d = cat_data(seed, true);
        let Ok(r) = rake_margins(&d.ds, &d.vars) else {
            return Ok(());
        };
        if !r.unsupported_levels.is_empty() || !r.solution.converged {
            return Ok(());
        }
        let w = &r.solution.weights;
        let pw = d.ds.pop_weights();
        for c in &d.columns {
            for lvl in LEVELS {
                let s: f64 = (0..d.n_sample).filter(|&i| c[i] == lvl).map(|i| w[i]).sum();
                let p: f64 = (d.n_sample..c.len()).filter(|&i| c[i] == lvl).map(|i| pw[i - d.n_sample]).sum();
                prop_assert!((s - p).abs() <= 1e-4);
            }
        }
        prop_assert!(ess(w) <= d.n_sample as f64 + 1e-9);
        prop_assert!(n_to_90pct(w) >= 1);
    }
}
