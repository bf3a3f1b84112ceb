use femseg::adapt::{split_simplices, transfer_state, CostModel, Integrator};
use femseg::energy::{assemble, Flavor};
use femseg::extract::LabelMap;
use femseg::geometry::GeometryCache;
use femseg::mesh::grid_mesh_2d;
use femseg::shapes::{project_simplex, WulffShape, WulffTable};
use femseg::snapshot::{decode_f64, encode_f64};
use femseg::solver::SolverConfig;
use proptest::prelude::*;

fn shape() -> impl Strategy<Value = WulffShape> {
    prop_oneof![
        (0.01..2.0f64).prop_map(WulffShape::ball),
        (0.0..6.3f64, 0.01..1.0f64, 0.01..0.5f64).prop_map(|(a, h, r)| WulffShape::sum(vec![
            WulffShape::segment(&[a.cos(), a.sin()], h),
            WulffShape::ball(r)
        ])),
    ]
}

fn rho(p: &[f64], o: &mut [f64]) {
    o[0] = 0.5 - p[0];
    o[1] = p[1] - 0.4;
}

proptest! {
    #[test]
    fn simplex_projection_is_idempotent(v in prop::collection::vec(-5.0..5.0f64, 1..12)) {
        let p = project_simplex(&v);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let q = project_simplex(&p);
        prop_assert!(p.iter().zip(&q).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn projection_lands_in_shape(w in shape(), y in prop::array::uniform2(-3.0..3.0f64)) {
        let p = w.project(&y);
        prop_assert!(w.distance(&p) < 1e-9);
        let dist = ((y[0] - p[0]).powi(2) + (y[1] - p[1]).powi(2)).sqrt();
        for k in 0..64 {
            let t = std::f64::consts::TAU * k as f64 / 64.0;
            let u = [t.cos(), t.sin()];
            let lower = u[0] * y[0] + u[1] * y[1] - w.support(&u).unwrap();
            prop_assert!(lower <= dist + 1e-9);
        }
    }

    #[test]
    fn support_is_sublinear(w in shape(), a in prop::array::uniform2(-2.0..2.0f64), b in prop::array::uniform2(-2.0..2.0f64), t in 0.0..4.0f64) {
        let h = |y: &[f64]| w.support(y).unwrap();
        prop_assert!(h(&[a[0] + b[0], a[1] + b[1]]) <= h(&a) + h(&b) + 1e-12);
        prop_assert!((h(&[t * a[0], t * a[1]]) - t * h(&a)).abs() <= 1e-12 * (1.0 + t));
    }

    #[test]
    fn base64_round_trip(v in prop::collection::vec(any::<f64>(), 0..64)) {
        let back = decode_f64(&encode_f64(&v)).unwrap();
        prop_assert_eq!(back.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), v.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn pgm_round_trip(w in 1usize..12, h in 1usize..12, seed in any::<u64>()) {
        let lo = [0.0, 0.0];
        let hi = [1.0, 1.0];
        let map = LabelMap::from_fn(w, h, lo, hi, |p| ((p[0] * 7.0 + p[1] * 13.0 + seed as f64) as u64 % 5) as u8);
        let back = LabelMap::from_pgm(&map.to_pgm(4), 4, lo, hi).unwrap();
        prop_assert_eq!(back, map);
    }

    #[test]
    fn splits_keep_volume(picks in prop::collection::btree_set(0usize..18, 1..8), bary in prop::array::uniform3(0.2..1.0f64)) {
        let mesh = grid_mesh_2d([0.0, 0.0], [1.0, 1.0], 3, 3).unwrap();
        let geo = GeometryCache::new(&mesh).unwrap();
        let t: f64 = bary.iter().sum();
        let splits: Vec<(usize, Vec<f64>)> = picks
            .iter()
            .map(|&s| {
                let v = mesh.simplex(s);
                (s, (0..2).map(|c| (0..3).map(|l| bary[l] / t * mesh.vertex(v[l])[c]).sum()).collect())
            })
            .collect();
        let (fine, maps) = split_simplices(&mesh, &geo, &splits).unwrap();
        let fine_geo = GeometryCache::new(&fine).unwrap();
        prop_assert_eq!(fine.n_simplices(), mesh.n_simplices() + 2 * picks.len());
        prop_assert!((fine_geo.volumes().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (s, &p) in maps.parent.iter().enumerate() {
            prop_assert!(fine_geo.volume(s) <= geo.volume(p) + 1e-15);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn transfer_keeps_p1_energy(pick in 0usize..18, bary in prop::array::uniform3(0.2..1.0f64), metric in any::<bool>()) {
        let flavor = if metric { Flavor::P1Metric } else { Flavor::P1NonMetric };
        let model = CostModel { rho: &rho, integrator: Integrator::Quadrature, n_labels: 2 };
        let mesh = grid_mesh_2d([0.0, 0.0], [1.0, 1.0], 3, 3).unwrap();
        let geo = GeometryCache::new(&mesh).unwrap();
        let costs = model.full(flavor, &mesh, &geo);
        let p = assemble(flavor, mesh, costs, WulffTable::uniform(2, 2, WulffShape::ball(0.1)).unwrap()).unwrap();
        let st = p.solve(&SolverConfig { max_iters: 500, ..SolverConfig::default() }, None).unwrap().state;
        let t: f64 = bary.iter().sum();
        let v = p.mesh.simplex(pick);
        let pt: Vec<f64> = (0..2).map(|c| (0..3).map(|l| bary[l] / t * p.mesh.vertex(v[l])[c]).sum()).collect();
        let (fine, maps) = split_simplices(&p.mesh, &p.geo, &[(pick, pt)]).unwrap();
        let tr = transfer_state(&p, &st, fine, &maps, &model).unwrap();
        let (e0, e1) = (p.primal_energy(&st).unwrap().total, tr.problem.primal_energy(&tr.state).unwrap().total);
        prop_assert!((e0 - e1).abs() < 1e-10, "{} vs {}", e0, e1);
    }
}
