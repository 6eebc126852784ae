use heatprompt::buildings::{aggregate_composition, BuildingRecord, UseType};
use heatprompt::eval::{mae, paired_t_abs_errors, r_squared};
use heatprompt::geometry::{polygon_metrics, sampling_window, Crs, GeoMultiPolygon, Point, Polygon};
use heatprompt::imagery::{rasterize_mask, OUTPUT_SIZE};
use heatprompt::models::{fit_linear, fit_ridge, gradient_check, MlpHyperParams, MlpModel, RIDGE_GRID};
use heatprompt::semantics::HashingEmbedder;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

fn star(seed: u64, center: Point, radius: f64, vertices: usize) -> GeoMultiPolygon {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut angles: Vec<f64> = (0..vertices).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    angles.sort_by(f64::total_cmp);
    angles.dedup();
    let mut ring: Vec<Point> = angles
        .iter()
        .map(|&a| {
            let r = radius * rng.gen_range(0.5..1.0);
            Point::new(center.x + r * a.cos(), center.y + r * a.sin())
        })
        .collect();
    ring.push(ring[0]);
    GeoMultiPolygon::new(Crs::WebMercator, vec![Polygon::new(ring, vec![])]).unwrap()
}

fn regular(n: usize, r: f64, c: Point) -> GeoMultiPolygon {
    let mut ring: Vec<Point> = (0..n)
        .map(|k| {
            let a = 2.0 * PI * k as f64 / n as f64;
            Point::new(c.x + r * a.cos(), c.y + r * a.sin())
        })
        .collect();
    ring.push(ring[0]);
    GeoMultiPolygon::new(Crs::WebMercator, vec![Polygon::new(ring, vec![])]).unwrap()
}

fn design(seed: u64, rows: usize, dims: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..dims).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let x: Vec<Vec<f64>> = (0..rows)
        .map(|_| (0..dims).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let y = x
        .iter()
        .map(|r| r.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + rng.gen_range(-0.5..0.5))
        .collect();
    (x, y)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_ignore_a_common_shift(
        y in prop::collection::vec(-100.0f64..100.0, 3..40),
        noise in prop::collection::vec(-5.0f64..5.0, 40),
        shift in -1e3f64..1e3,
    ) {
        let pred: Vec<f64> = y.iter().zip(&noise).map(|(a, e)| a + e).collect();
        prop_assume!(y.iter().any(|v| (v - y[0]).abs() > 1e-3));
        let ys: Vec<f64> = y.iter().map(|v| v + shift).collect();
        let ps: Vec<f64> = pred.iter().map(|v| v + shift).collect();
        let r2 = r_squared(&y, &pred).unwrap();
        prop_assert!((r2 - r_squared(&ys, &ps).unwrap()).abs() < 1e-6 * (1.0 + r2.abs()));
        prop_assert!((mae(&y, &pred).unwrap() - mae(&ys, &ps).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn paired_t_is_antisymmetric(
        a in prop::collection::vec(0.0f64..10.0, 3..30),
        b in prop::collection::vec(0.0f64..10.0, 30),
    ) {
        let b = &b[..a.len()];
        let ab = paired_t_abs_errors(&a, b).unwrap();
        let ba = paired_t_abs_errors(b, &a).unwrap();
        prop_assert_eq!(ab.degenerate, ba.degenerate);
        if let (Some(t1), Some(t2)) = (ab.t, ba.t) {
            prop_assert!((t1 + t2).abs() < 1e-9 * (1.0 + t1.abs()));
            prop_assert!((ab.p_two_sided.unwrap() - ba.p_two_sided.unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn area_is_translation_invariant_and_scales_quadratically(
        seed in any::<u64>(),
        vertices in 5usize..40,
        dx in -1e6f64..1e6,
        dy in -1e6f64..1e6,
        k in 0.1f64..10.0,
    ) {
        let g = star(seed, Point::new(1e5, -2e5), 500.0, vertices);
        let m = polygon_metrics(&g).unwrap();
        let moved = polygon_metrics(&g.translated(dx, dy)).unwrap();
        prop_assert!((m.area_m2 - moved.area_m2).abs() < 1e-6 * m.area_m2);
        prop_assert!((m.perimeter_m - moved.perimeter_m).abs() < 1e-6 * m.perimeter_m);
        let scaled = polygon_metrics(&g.map_points(|p| Point::new(p.x * k, p.y * k))).unwrap();
        prop_assert!((scaled.area_m2 - k * k * m.area_m2).abs() < 1e-9 * scaled.area_m2);
        prop_assert!((scaled.perimeter_m - k * m.perimeter_m).abs() < 1e-9 * scaled.perimeter_m);
    }

    #[test]
    fn window_side_survives_quarter_turns(seed in any::<u64>(), vertices in 5usize..40) {
        let c = Point::new(3e5, 4e5);
        let g = star(seed, c, 800.0, vertices);
        let turned = g.map_points(|p| Point::new(c.x - (p.y - c.y), c.y + (p.x - c.x)));
        let a = sampling_window(&g).unwrap();
        let b = sampling_window(&turned).unwrap();
        prop_assert!((a.side_m - b.side_m).abs() < 1e-9 * a.side_m);
    }

    #[test]
    fn mask_area_tracks_polygon_area(seed in any::<u64>(), vertices in 5usize..40) {
        let g = star(seed, Point::new(-7e5, 2e6), 300.0, vertices);
        let window = sampling_window(&g).unwrap();
        let mask = rasterize_mask(&g, &window).unwrap();
        let px = window.side_m / OUTPUT_SIZE as f64;
        let covered = mask.data.iter().filter(|&&v| v == 255).count() as f64 * px * px;
        let area = polygon_metrics(&g).unwrap().area_m2;
        prop_assert!((covered - area).abs() <= 0.02 * area, "{covered} vs {area}");
    }

    #[test]
    fn ridge_training_loss_grows_with_lambda(seed in any::<u64>()) {
        let (x, y) = design(seed, 40, 4);
        let mut last = fit_linear(&x, &y).unwrap().mse(&x, &y);
        for &lambda in &RIDGE_GRID {
            let loss = fit_ridge(&x, &y, lambda).unwrap().mse(&x, &y);
            prop_assert!(loss >= last - 1e-12);
            last = loss;
        }
    }

    #[test]
    fn closed_form_ignores_row_order(seed in any::<u64>()) {
        let (x, y) = design(seed, 30, 3);
        let mut order: Vec<usize> = (0..30).collect();
        order.reverse();
        order.rotate_left((seed % 30) as usize);
        let xp: Vec<Vec<f64>> = order.iter().map(|&i| x[i].clone()).collect();
        let yp: Vec<f64> = order.iter().map(|&i| y[i]).collect();
        for lambda in [0.0, 1.0] {
            let a = fit_ridge(&x, &y, lambda).unwrap();
            let b = fit_ridge(&xp, &yp, lambda).unwrap();
            for (u, v) in a.weights.iter().zip(&b.weights) {
                prop_assert!((u - v).abs() < 1e-9);
            }
            prop_assert!((a.bias - b.bias).abs() < 1e-9);
        }
    }

    #[test]
    fn mlp_predict_matches_forward(seed in any::<u64>(), dims in 1usize..8) {
        let (x, _) = design(seed, 12, dims);
        let m = MlpModel::init(dims, MlpHyperParams { hidden: [8, 6], ..Default::default() }, seed);
        let pred = m.predict(&x).unwrap();
        for (row, p) in x.iter().zip(&pred) {
            prop_assert!((m.forward(row) - p).abs() < 1e-10);
        }
    }

    #[test]
    fn composition_ignores_building_order(seed in any::<u64>(), n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let uses = [None, Some(UseType::SingleFamily), Some(UseType::Terraced), Some(UseType::MultiFamily), Some(UseType::NonResidential)];
        let ages = [None, Some("1949-1978"), Some("1979-1990"), Some("before 1919")];
        let buildings: Vec<BuildingRecord> = (0..n)
            .map(|i| BuildingRecord::new(
                format!("b{i}"),
                Point::new(0.0, 0.0),
                rng.gen_range(30.0..500.0),
                uses[rng.gen_range(0..uses.len())],
                rng.gen_bool(0.8).then(|| rng.gen_range(3.0..30.0)),
                ages[rng.gen_range(0..ages.len())].map(str::to_owned),
                3.0,
            ))
            .collect();
        let forward: Vec<&BuildingRecord> = buildings.iter().collect();
        let mut shuffled = forward.clone();
        shuffled.reverse();
        shuffled.rotate_left((seed % n as u64) as usize);
        prop_assert_eq!(aggregate_composition(&forward), aggregate_composition(&shuffled));
    }

    #[test]
    fn hashing_embedding_is_unit_length(words in prop::collection::vec("[a-z]{1,8}", 1..30)) {
        let text = words.join(" ");
        if let Ok(v) = HashingEmbedder::vectorize(&text) {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-12);
            prop_assert_eq!(v, HashingEmbedder::vectorize(&text).unwrap());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gradients_are_exact_away_from_kinks(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y) = design(seed, 8, 3);
        let mut m = MlpModel::init(3, MlpHyperParams { hidden: [5, 4], ..Default::default() }, seed);
        for layer in &mut m.layers {
            layer.biases.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
        }
        // Central differences straddle a ReLU kink when a preactivation is within h.
        let near_kink = x.iter().any(|row| {
            m.preactivations(row).iter().take(2).flatten().any(|z| z.abs() < 1e-3)
        });
        prop_assume!(!near_kink);
        prop_assert!(gradient_check(&m, &x, &y) < 1e-4);
        // Away from kinks the loss is polynomial in each parameter, so central
        // differences are exact up to rounding.
        let analytic = m.gradient(&x, &y);
        let h = 1e-5;
        for (i, (&p, &a)) in m.parameters().iter().zip(&analytic).enumerate() {
            let mut probe = m.clone();
            probe.set_parameter(i, p + h);
            let up = probe.loss(&x, &y);
            probe.set_parameter(i, p - h);
            let numeric = (up - probe.loss(&x, &y)) / (2.0 * h);
            prop_assert!((a - numeric).abs() <= 1e-8 + 1e-6 * a.abs(), "parameter {i}: {a} vs {numeric}");
        }
    }
}

#[test]
fn twelve_gons_agree_with_closed_form_and_sampling() {
    let r = 250.0;
    let c = Point::new(1.2e6, 6.3e6);
    // Regular n-gon: n r² sin(2π/n) / 2 = 3 r² for n = 12.
    let area = polygon_metrics(&regular(12, r, c)).unwrap().area_m2;
    assert!((area - 3.0 * r * r).abs() < 1e-6 * area);

    for seed in 0..3 {
        let g = star(seed, c, r, 12);
        let m = polygon_metrics(&g).unwrap();
        let b = m.bbox;
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let samples = 1_000_000;
        let hits = (0..samples)
            .filter(|_| g.contains(Point::new(rng.gen_range(b.min_x..b.max_x), rng.gen_range(b.min_y..b.max_y))))
            .count();
        let estimate = b.width() * b.height() * hits as f64 / samples as f64;
        assert!((estimate - m.area_m2).abs() < 0.005 * m.area_m2, "{estimate} vs {}", m.area_m2);
    }
}

#[test]
fn kink_free_models_pass_tight_gradient_check() {
    let mut checked = 0;
    let mut seed = 0u64;
    while checked < 20 {
        seed += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let y: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut m = MlpModel::init(3, MlpHyperParams { hidden: [4, 4], ..Default::default() }, seed);
        for layer in &mut m.layers {
            layer.biases.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
        }
        let kink_free = x
            .iter()
            .all(|row| m.preactivations(row).iter().take(2).flatten().all(|z| z.abs() > 0.1));
        if kink_free {
            checked += 1;
            let dev = gradient_check(&m, &x, &y);
            assert!(dev < 1e-6, "seed {seed}: {dev}");
        }
    }
}
