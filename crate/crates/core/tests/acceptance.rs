//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits 0;
//! failing criteria are reported, not hidden.

use std::time::Instant;

use femseg::adapt::{split_simplices, transfer_state, CostModel, Integrator};
use femseg::datacost::{CostField, Sampler};
use femseg::energy::{assemble, Flavor, Problem};
use femseg::fem::{forward_difference_gradient, p1_gradient, Lattice};
use femseg::geometry::{simplex_gradients, GeometryCache};
use femseg::mesh::grid_mesh_2d;
use femseg::pipeline::{run_pipeline, PipelineConfig, PipelineRun};
use femseg::scene::{generate, observe, perturb, Perturbation, Scene, SceneSpec};
use femseg::shapes::{dykstra_project, project_simplex, ConvexSet, DykstraOptions, WulffShape, WulffTable};
use femseg::solver::{SolverConfig, SolverState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(n: usize, name: &str, o: Outcome) -> bool {
    println!(
        "criterion {n:>2} {} {name}: {}",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail
    );
    o.pass
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn benchmark(scene: &Scene, flavor: Flavor) -> (PipelineRun, f64) {
    let start = Instant::now();
    let run = run_pipeline(scene, &observe(scene), flavor, &PipelineConfig::default()).unwrap();
    (run, start.elapsed().as_secs_f64())
}

fn clean_benchmark(run: &PipelineRun, secs: f64, overall: f64, average: f64) -> Outcome {
    let a = &run.accuracy;
    let nv = run.problem.mesh.n_vertices();
    Outcome {
        pass: a.overall >= overall && a.average >= average && secs < 120.0 && nv <= 20_000,
        detail: format!(
            "overall {:.4} (>= {overall}), average {:.4} (>= {average}), {nv} vertices, {secs:.1} s",
            a.overall, a.average
        ),
    }
}

fn perturbation_trend(scene: &Scene) -> Outcome {
    let clean = observe(scene);
    let mut cfg = PipelineConfig::default();
    cfg.refine.steps = 0;
    let amounts = [0.0, 0.1, 0.3, 0.5, 0.7];
    let mut pass = true;
    let mut lines = Vec::new();
    for (name, make) in [
        ("wrong_class", Perturbation::WrongClass as fn(f64) -> Perturbation),
        ("missing_data", Perturbation::MissingData as fn(f64) -> Perturbation),
    ] {
        let acc: Vec<f64> = amounts
            .iter()
            .map(|&a| {
                let obs = perturb(&clean, &make(a), 0).unwrap();
                run_pipeline(scene, &obs, Flavor::P1NonMetric, &cfg)
                    .unwrap()
                    .accuracy
                    .overall
            })
            .collect();
        let monotone = acc.windows(2).all(|w| w[1] <= w[0] + 0.01);
        let early_collapse = amounts.iter().zip(&acc).any(|(&a, &v)| a <= 0.5 && v < 0.8);
        let mut ok = monotone && !early_collapse;
        if name == "wrong_class" {
            ok &= acc[0] - acc[1] < 0.02;
        }
        pass &= ok;
        let values: Vec<String> = acc.iter().map(|v| format!("{v:.4}")).collect();
        lines.push(format!(
            "{name} [{}] monotone {monotone} collapse<=50% {early_collapse}",
            values.join(", ")
        ));
    }
    Outcome {
        pass,
        detail: lines.join("; "),
    }
}

fn random_simplex(r: &mut ChaCha8Rng, d: usize) -> Vec<Vec<f64>> {
    loop {
        let pts: Vec<Vec<f64>> = (0..=d)
            .map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect())
            .collect();
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let Some((_, vol)) = simplex_gradients(d, &refs) else {
            continue;
        };
        let diam = pts
            .iter()
            .flat_map(|a| {
                pts.iter()
                    .map(move |b| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>())
            })
            .fold(0.0f64, f64::max)
            .sqrt();
        if vol.abs() > 0.05 * diam.powi(d as i32) {
            return pts;
        }
    }
}

fn gradient_oracles() -> Outcome {
    let start = Instant::now();
    let mut r = rng(4);
    let (mut affine, mut sum, mut pairing) = (0.0f64, 0.0f64, 0.0f64);
    for d in [2, 3] {
        for _ in 0..1000 {
            let pts = random_simplex(&mut r, d);
            let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
            let (g, _) = simplex_gradients(d, &refs).unwrap();
            let a: Vec<f64> = (0..d).map(|_| r.random_range(-2.0..2.0)).collect();
            let b = r.random_range(-1.0..1.0);
            for c in 0..d {
                let rec: f64 = (0..=d).map(|l| (dot(&a, &pts[l]) + b) * g[l * d + c]).sum();
                affine = affine.max((rec - a[c]).abs());
                sum = sum.max((0..=d).map(|l| g[l * d + c]).sum::<f64>().abs());
            }
            for l in 0..=d {
                for k in 1..=d {
                    let e: Vec<f64> = (0..d).map(|c| pts[k][c] - pts[0][c]).collect();
                    let want = (l == k) as i32 as f64 - (l == 0) as i32 as f64;
                    pairing = pairing.max((dot(&g[l * d..(l + 1) * d], &e) - want).abs());
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: affine <= 1e-12 && sum <= 1e-12 && pairing <= 1e-12 && secs < 5.0,
        detail: format!("affine {affine:.1e}, sum {sum:.1e}, edge pairing {pairing:.1e}, {secs:.2} s"),
    }
}

fn grid_equivalence() -> Outcome {
    let mut r = rng(5);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (nx, ny) = (r.random_range(2..10), r.random_range(2..10));
        let mesh = grid_mesh_2d([0.0, 0.0], [nx as f64, ny as f64], nx, ny).unwrap();
        let geo = GeometryCache::new(&mesh).unwrap();
        let lat = Lattice {
            dims: vec![nx + 1, ny + 1],
        };
        let f: Vec<f64> = (0..lat.len()).map(|_| r.random_range(-1.0..1.0)).collect();
        for s in 0..mesh.n_simplices() {
            let v = mesh.simplex(s);
            let p = mesh.vertex(v[0]);
            let (i, j) = (p[0].round() as usize, p[1].round() as usize);
            let corner = mesh.vertex(v[1])[0] > p[0] && mesh.vertex(v[2])[1] > p[1] && mesh.vertex(v[2])[0] == p[0];
            if !corner {
                continue;
            }
            let fd = forward_difference_gradient(&lat, &f, &[i, j]).unwrap();
            let g = p1_gradient(&mesh, &geo, s, &f);
            worst = worst.max((fd[0] - g[0]).abs()).max((fd[1] - g[1]).abs());
        }
    }
    Outcome {
        pass: worst <= 1e-14,
        detail: format!("max difference {worst:.1e} on 100 lattices"),
    }
}

fn exhaustive(p: &Problem, m: usize) -> (f64, Vec<usize>) {
    let (nv, k1) = (p.mesh.n_vertices(), p.dim() + 1);
    let local: Vec<Vec<f64>> = (0..p.mesh.n_simplices())
        .map(|s| {
            (0..m.pow(k1 as u32))
                .map(|code| {
                    let mut x = vec![0.0; nv * m];
                    for (l, &v) in p.mesh.simplex(s).iter().enumerate() {
                        x[v * m + code / m.pow(l as u32) % m] = 1.0;
                    }
                    p.local_regularizer(&x, s)
                })
                .collect()
        })
        .collect();
    let mut best = (f64::INFINITY, Vec::new());
    let mut lab = vec![0usize; nv];
    for code in 0..m.pow(nv as u32) {
        let mut c = code;
        for l in lab.iter_mut() {
            *l = c % m;
            c /= m;
        }
        let mut e: f64 = (0..nv).map(|v| p.costs.get(v)[lab[v]]).sum();
        for (s, table) in local.iter().enumerate() {
            let idx: usize = p
                .mesh
                .simplex(s)
                .iter()
                .enumerate()
                .map(|(l, &v)| lab[v] * m.pow(l as u32))
                .sum();
            e += table[idx];
        }
        if e < best.0 - 1e-12 {
            best = (e, lab.clone());
        }
    }
    best
}

fn argmax_labels(x: &[f64], m: usize) -> Vec<usize> {
    x.chunks(m)
        .map(|c| (0..m).fold(0, |b, i| if c[i] > c[b] { i } else { b }))
        .collect()
}

fn one_hot(labels: &[usize], m: usize) -> Vec<f64> {
    labels
        .iter()
        .flat_map(|&l| (0..m).map(move |i| (i == l) as i32 as f64))
        .collect()
}

fn potts_exactness() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst = 0.0f64;
    let mut exact = 0;
    for _ in 0..10 {
        let mesh = grid_mesh_2d([0.0, 0.0], [5.0, 1.0], 5, 1).unwrap();
        let nv = mesh.n_vertices();
        let mut costs = CostField::zeros(nv, 2);
        for v in 0..nv {
            costs.get_mut(v)[1] = r.random_range(-1.0..1.0);
        }
        let table = WulffTable::uniform(2, 2, WulffShape::ball(0.6)).unwrap();
        for flavor in [Flavor::P1NonMetric, Flavor::P1Metric] {
            let p = assemble(flavor, mesh.clone(), costs.clone(), table.clone()).unwrap();
            let out = p.solve(&SolverConfig::default(), None).unwrap();
            let x = p.indicators(&out.state);
            let thr: Vec<usize> = x.chunks(2).map(|c| (c[1] > 0.5) as usize).collect();
            let e = p.p1_energy_of(&one_hot(&thr, 2));
            let (best, _) = exhaustive(&p, 2);
            worst = worst.max((e - best).abs());
            exact += ((e - best).abs() <= 1e-9) as usize;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: exact == 20 && secs < 60.0,
        detail: format!("{exact}/20 thresholded optima exact (max gap {worst:.1e}), {secs:.1} s"),
    }
}

fn linear_rho(p: &[f64], o: &mut [f64]) {
    o[0] = 8.0 * (0.3 - p[0]);
    o[1] = 8.0 * (p[1] - 0.5);
    o[2] = 8.0 * (0.2 * p[0] - 0.2);
}

fn random_splits(r: &mut ChaCha8Rng, p: &Problem) -> Vec<(usize, Vec<f64>)> {
    let mut splits = Vec::new();
    while splits.is_empty() {
        for s in 0..p.mesh.n_simplices() {
            if r.random::<f64>() < 0.3 {
                let mut b: Vec<f64> = (0..3).map(|_| r.random::<f64>() + 0.2).collect();
                let t: f64 = b.iter().sum();
                b.iter_mut().for_each(|v| *v /= t);
                let mut pt = vec![0.0; 2];
                for (l, &v) in p.mesh.simplex(s).iter().enumerate() {
                    for (q, x) in pt.iter_mut().zip(p.mesh.vertex(v)) {
                        *q += b[l] * x;
                    }
                }
                splits.push((s, pt));
            }
        }
    }
    splits
}

fn refinement_invariance() -> Outcome {
    let table = WulffTable::from_fn(3, 2, |i, j| WulffShape::ball(if i == 0 && j == 2 { 0.3 } else { 0.1 })).unwrap();
    let quad = CostModel {
        rho: &linear_rho,
        integrator: Integrator::Quadrature,
        n_labels: 3,
    };
    let sampled = CostModel {
        rho: &linear_rho,
        integrator: Integrator::Sampled(Sampler { spacing: 0.0025 }),
        n_labels: 3,
    };
    let solve_cfg = SolverConfig {
        max_iters: 3000,
        ..SolverConfig::default()
    };
    let mut r = rng(7);
    let mut lines = Vec::new();
    let mut pass = true;
    for flavor in [Flavor::P1NonMetric, Flavor::P1Metric] {
        let (mut exact, mut approx, mut increase) = (0.0f64, 0.0f64, f64::NEG_INFINITY);
        let bases: Vec<(Problem, SolverState)> = [&quad, &sampled]
            .iter()
            .map(|model| {
                let mesh = grid_mesh_2d([0.0, 0.0], [1.0, 1.0], 4, 4).unwrap();
                let geo = GeometryCache::new(&mesh).unwrap();
                let costs = model.full(flavor, &mesh, &geo);
                let p = assemble(flavor, mesh, costs, table.clone()).unwrap();
                let st = p.solve(&solve_cfg, None).unwrap().state;
                (p, st)
            })
            .collect();
        for _ in 0..50 {
            for (k, model) in [&quad, &sampled].iter().enumerate() {
                let (p, st) = &bases[k];
                let e0 = p.primal_energy(st).unwrap().total;
                let splits = random_splits(&mut r, p);
                let (mesh, maps) = split_simplices(&p.mesh, &p.geo, &splits).unwrap();
                let t = transfer_state(p, st, mesh, &maps, model).unwrap();
                let e1 = t.problem.primal_energy(&t.state).unwrap().total;
                if k == 0 {
                    exact = exact.max((e1 - e0).abs());
                    let e2 = t
                        .problem
                        .primal_energy(&t.problem.solve(&solve_cfg, Some(t.state.clone())).unwrap().state)
                        .unwrap()
                        .total;
                    increase = increase.max(e2 - e1);
                } else {
                    approx = approx.max((e1 - e0).abs());
                }
            }
        }
        pass &= exact <= 1e-10 && approx <= 1e-3 && increase <= 1e-8;
        lines.push(format!(
            "{}: linear {exact:.1e}, sampled {approx:.1e}, solve increase {increase:.1e}",
            flavor.name()
        ));
    }
    Outcome {
        pass,
        detail: format!("{} (50 random splits; P1 flavors)", lines.join("; ")),
    }
}

fn simplex_oracle(v: &[f64]) -> Vec<f64> {
    let (mut lo, mut hi) = (
        v.iter().cloned().fold(f64::INFINITY, f64::min) - 1.0,
        v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if v.iter().map(|&x| (x - mid).max(0.0)).sum::<f64>() > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    v.iter().map(|&x| (x - 0.5 * (lo + hi)).max(0.0)).collect()
}

fn distance_oracle(w: &WulffShape, y: &[f64]) -> f64 {
    let n = 20_000;
    (0..n)
        .map(|k| {
            let t = std::f64::consts::TAU * k as f64 / n as f64;
            let u = [t.cos(), t.sin()];
            dot(&u, y) - w.support(&u).unwrap()
        })
        .fold(0.0f64, f64::max)
}

fn two_halfspaces(n1: &[f64; 2], b1: f64, n2: &[f64; 2], b2: f64, y: &[f64; 2]) -> [f64; 2] {
    let inside = |p: &[f64; 2]| dot(n1, p) <= b1 + 1e-15 && dot(n2, p) <= b2 + 1e-15;
    if inside(y) {
        return *y;
    }
    for (n, b) in [(n1, b1), (n2, b2)] {
        let t = dot(n, y) - b;
        let p = [y[0] - t * n[0], y[1] - t * n[1]];
        if t > 0.0 && inside(&p) {
            return p;
        }
    }
    let det = n1[0] * n2[1] - n1[1] * n2[0];
    [(b1 * n2[1] - b2 * n1[1]) / det, (n1[0] * b2 - n2[0] * b1) / det]
}

fn projection_oracles() -> Outcome {
    let mut r = rng(8);
    let mut simplex = 0.0f64;
    for _ in 0..10_000 {
        let n = r.random_range(2..12);
        let v: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
        let (a, b) = (project_simplex(&v), simplex_oracle(&v));
        simplex = simplex.max(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
    }
    let shapes = [
        WulffShape::sum(vec![WulffShape::segment(&[0.0, 1.0], 0.5), WulffShape::ball(0.2)]),
        WulffShape::sum(vec![
            WulffShape::segment(&[0.6, 0.8], 0.3),
            WulffShape::segment(&[1.0, 0.0], 0.4),
        ]),
        WulffShape::sum(vec![
            WulffShape::Box {
                lo: vec![-0.2, -0.1],
                hi: vec![0.3, 0.1],
            },
            WulffShape::ball(0.1),
        ]),
    ];
    let mut minkowski = 0.0f64;
    let mut moreau = 0.0f64;
    for w in &shapes {
        for _ in 0..200 {
            let y = [r.random_range(-1.5..1.5), r.random_range(-1.5..1.5)];
            let p = w.project(&y);
            let dist = ((y[0] - p[0]).powi(2) + (y[1] - p[1]).powi(2)).sqrt();
            minkowski = minkowski
                .max((dist - distance_oracle(w, &y)).abs())
                .max(distance_oracle(w, &p));
            let sigma = r.random_range(0.1..3.0);
            let mut prox = [0.0; 2];
            w.prox_support(&y, sigma, &mut prox);
            let q = [(y[0] - prox[0]) / sigma, (y[1] - prox[1]) / sigma];
            let fenchel = (w.support(&prox).unwrap() - dot(&q, &prox)).abs();
            moreau = moreau.max(fenchel).max(w.distance(&q));
        }
    }
    let mut dykstra = 0.0f64;
    for _ in 0..1000 {
        let a1 = r.random_range(0.0..std::f64::consts::TAU);
        let a2 = a1 + r.random_range(0.5..2.6);
        let (n1, n2) = ([a1.cos(), a1.sin()], [a2.cos(), a2.sin()]);
        let (b1, b2) = (r.random_range(-0.5..0.5), r.random_range(-0.5..0.5));
        let h1 = WulffShape::HalfSpaceCut {
            normal: n1.to_vec(),
            offset: b1,
        };
        let h2 = WulffShape::HalfSpaceCut {
            normal: n2.to_vec(),
            offset: b2,
        };
        let y = [r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)];
        let sets: [&dyn ConvexSet; 2] = [&h1, &h2];
        let got = dykstra_project(
            &sets,
            &y,
            DykstraOptions {
                max_cycles: 100_000,
                tol: 1e-15,
            },
        )
        .unwrap()
        .point;
        let want = two_halfspaces(&n1, b1, &n2, b2, &y);
        dykstra = dykstra.max((got[0] - want[0]).abs()).max((got[1] - want[1]).abs());
    }
    Outcome {
        pass: simplex <= 1e-12 && minkowski <= 1e-3 && dykstra <= 1e-10 && moreau <= 1e-10,
        detail: format!("simplex {simplex:.1e}, minkowski {minkowski:.1e}, dykstra {dykstra:.1e}, moreau {moreau:.1e}"),
    }
}

fn rt_sufficiency(run: &PipelineRun) -> Outcome {
    let p = &run.problem;
    let m = p.n_labels();
    let fields: Vec<Vec<f64>> = (0..m).map(|i| p.rt_face_coefficients(&run.state, i)).collect();
    let mut r = rng(9);
    let (mut worst, mut worst_mid, mut over) = (0.0f64, 0.0f64, 0usize);
    let mut bary = [0.0; 3];
    for s in 0..p.mesh.n_simplices() {
        let verts = p.mesh.simplex(s);
        let mids: Vec<Vec<f64>> = (0..3)
            .map(|l| p.geo.face_midpoint(p.mesh.simplex_face(s, l)).to_vec())
            .collect();
        let mut points = Vec::with_capacity(10);
        for _ in 0..10 {
            let e: Vec<f64> = (0..3).map(|_| -r.random::<f64>().max(1e-300).ln()).collect();
            let t: f64 = e.iter().sum();
            bary.iter_mut().zip(&e).for_each(|(b, v)| *b = v / t);
            points.push(
                (0..2)
                    .map(|c| (0..3).map(|l| bary[l] * p.mesh.vertex(verts[l])[c]).sum())
                    .collect::<Vec<f64>>(),
            );
        }
        for i in 0..m {
            for j in i + 1..m {
                let w = p.table.shape(i, j);
                let viol = |z: &[f64]| {
                    let a = femseg::fem::rt_field_eval(&p.mesh, &p.geo, s, &fields[i], z);
                    let b = femseg::fem::rt_field_eval(&p.mesh, &p.geo, s, &fields[j], z);
                    w.distance(&[a[0] - b[0], a[1] - b[1]])
                };
                let mid = mids.iter().map(|z| viol(z)).fold(0.0, f64::max);
                let inner = points.iter().map(|z| viol(z)).fold(0.0, f64::max);
                worst_mid = worst_mid.max(mid);
                worst = worst.max(inner - mid);
                over += (inner > mid + 1e-9) as usize;
            }
        }
    }
    Outcome {
        pass: over == 0,
        detail: format!(
            "{over} simplex/pair cases exceed the midpoint violation (worst excess {worst:.2e}, max midpoint violation {worst_mid:.2e})"
        ),
    }
}

fn nonmetric_behavior() -> Outcome {
    let mesh = grid_mesh_2d([0.0, 0.0], [3.0, 2.0], 3, 2).unwrap();
    let nv = mesh.n_vertices();
    let table = WulffTable::from_fn(3, 2, |i, j| WulffShape::ball(if i == 0 && j == 2 { 3.0 } else { 1.0 })).unwrap();
    let mut costs = CostField::zeros(nv, 3);
    for v in 0..nv {
        let x = mesh.vertex(v)[0];
        let c = costs.get_mut(v);
        if x < 0.5 {
            c.copy_from_slice(&[-3.0, 3.0, 3.0]);
        } else if x > 2.5 {
            c.copy_from_slice(&[3.0, 3.0, -3.0]);
        } else {
            c.copy_from_slice(&[0.0, 0.5, 0.0]);
        }
    }
    let mut has = Vec::new();
    let mut lines = Vec::new();
    for flavor in [Flavor::P1Metric, Flavor::P1NonMetric] {
        let p = assemble(flavor, mesh.clone(), costs.clone(), table.clone()).unwrap();
        let (best, opt) = exhaustive(&p, 3);
        let out = p.solve(&SolverConfig::default(), None).unwrap();
        let lab = argmax_labels(p.indicators(&out.state), 3);
        let e = p.p1_energy_of(&one_hot(&lab, 3));
        has.push(lab.contains(&1));
        lines.push(format!(
            "{} argmax has label 1: {} (exhaustive optimum has it: {}, energy {e:.4} vs optimum {best:.4})",
            flavor.name(),
            lab.contains(&1),
            opt.contains(&1)
        ));
    }
    Outcome {
        pass: has[0] && !has[1],
        detail: lines.join("; "),
    }
}

fn adjointness_and_determinism() -> Outcome {
    let mut r = rng(11);
    let mut worst = 0.0f64;
    for flavor in [Flavor::P1NonMetric, Flavor::P1Metric, Flavor::Rt] {
        let mesh = grid_mesh_2d([0.0, 0.0], [1.0, 1.0], 5, 4).unwrap();
        let n = if flavor.is_p1() {
            mesh.n_vertices()
        } else {
            mesh.n_simplices()
        };
        let costs = CostField {
            n_labels: 3,
            values: (0..n * 3).map(|_| r.random_range(-1.0..1.0)).collect(),
        };
        let table = WulffTable::from_fn(3, 2, |i, j| WulffShape::ball(0.1 * (1 + i + j) as f64)).unwrap();
        let p = assemble(flavor, mesh, costs, table).unwrap();
        let k = &p.saddle;
        for _ in 0..20 {
            let x: Vec<f64> = (0..k.n_primal()).map(|_| r.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..k.n_dual()).map(|_| r.random_range(-1.0..1.0)).collect();
            let (kx, kty) = (k.k.mul(&x), k.kt.mul(&y));
            let scale = dot(&kx, &kx).sqrt() * dot(&y, &y).sqrt();
            worst = worst.max((dot(&kx, &y) - dot(&x, &kty)).abs() / scale.max(1.0));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let identical = pool.install(|| {
        let mesh = grid_mesh_2d([0.0, 0.0], [1.0, 1.0], 8, 8).unwrap();
        let costs = CostField {
            n_labels: 3,
            values: (0..81 * 3).map(|_| r.random_range(-0.05..0.05)).collect(),
        };
        let table = WulffTable::from_fn(3, 2, |i, j| {
            WulffShape::ball(if i == 0 && j == 2 { 0.03 } else { 0.01 })
        })
        .unwrap();
        let p = assemble(Flavor::P1NonMetric, mesh, costs, table).unwrap();
        let cfg = SolverConfig {
            max_iters: 1000,
            restart_every: 64,
            rebalance: true,
            ..SolverConfig::default()
        };
        let a = p.solve(&cfg, None).unwrap();
        let b = p.solve(&cfg, None).unwrap();
        let bits = |s: &SolverState| {
            s.primal
                .iter()
                .chain(&s.dual)
                .map(|v| v.to_bits())
                .collect::<Vec<u64>>()
        };
        a.trace.to_csv(false) == b.trace.to_csv(false) && bits(&a.state) == bits(&b.state)
    });
    Outcome {
        pass: worst <= 1e-12 && identical,
        detail: format!("adjointness {worst:.1e}, traces byte-identical at 1 worker: {identical}"),
    }
}

fn main() {
    let scene = generate(&SceneSpec::default(), 0).unwrap();
    let mut passed = 0;
    let (p1, p1_secs) = benchmark(&scene, Flavor::P1NonMetric);
    passed += report(
        1,
        "clean benchmark, P1 non-metric",
        clean_benchmark(&p1, p1_secs, 0.99, 0.99),
    ) as usize;
    drop(p1);
    let (rt, rt_secs) = benchmark(&scene, Flavor::Rt);
    passed += report(2, "clean benchmark, RT", clean_benchmark(&rt, rt_secs, 0.965, 0.90)) as usize;
    passed += report(3, "perturbation trend", perturbation_trend(&scene)) as usize;
    passed += report(4, "gradient oracles", gradient_oracles()) as usize;
    passed += report(5, "grid vs P1 gradients", grid_equivalence()) as usize;
    passed += report(6, "Potts exactness", potts_exactness()) as usize;
    passed += report(7, "refinement invariance", refinement_invariance()) as usize;
    passed += report(8, "projection oracles", projection_oracles()) as usize;
    passed += report(9, "RT constraint sufficiency", rt_sufficiency(&rt)) as usize;
    passed += report(10, "non-metric behavior", nonmetric_behavior()) as usize;
    passed += report(11, "adjointness and determinism", adjointness_and_determinism()) as usize;
    println!("acceptance: {passed}/11 criteria pass");
}
