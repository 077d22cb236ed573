mod common;

use common::{rng, two_class_events};
use proptest::prelude::*;
use rand::Rng;
use spiralcluster::pipeline::{self, HoughParams, ImageGrid, Point2D, PreprocessConfig};
use spiralcluster::simkit::{EventCloud, Point, Species};

fn cloud(points: &[[f64; 4]]) -> EventCloud {
    EventCloud::new("t", None, points.iter().map(|p| Point::from(*p)).collect())
}

#[test]
fn rasterized_mass_equals_in_bounds_charge() {
    let mut r = rng(1);
    for _ in 0..20 {
        let pts: Vec<Point2D> = (0..500)
            .map(|_| Point2D {
                x: r.gen_range(-300.0..300.0),
                y: r.gen_range(-300.0..300.0),
                charge: r.gen_range(0.0..10.0),
            })
            .collect();
        let raster = pipeline::rasterize(&pts, 64, 275.0).unwrap();
        let inside: Vec<f64> =
            pts.iter().filter(|p| p.x.abs() <= 275.0 && p.y.abs() <= 275.0).map(|p| p.charge).collect();
        assert_eq!(raster.dropped, pts.len() - inside.len());
        let want = pipeline::pairwise_sum(&inside);
        let got = pipeline::pairwise_sum(&raster.image.values);
        assert!((got - want).abs() <= 1e-9 * want);
    }
}

#[test]
fn bin_edges_are_half_open_with_closed_last_bin() {
    let at = |x: f64| pipeline::rasterize(&[Point2D { x, y: 0.0, charge: 1.0 }], 4, 2.0).unwrap();
    // Bins on [-2, 2]: [-2,-1) [-1,0) [0,1) [1,2].
    assert_eq!(at(-1.0).image.values[2 * 4 + 1], 1.0);
    assert_eq!(at(2.0).image.values[2 * 4 + 3], 1.0);
    assert_eq!(at(2.0 + 1e-9).dropped, 1);
    assert_eq!(at(-2.0).image.values[2 * 4], 1.0);
}

#[test]
fn hough_recovers_a_noisy_circle() {
    let mut r = rng(2);
    let (cx, cy, radius) = (30.0, -20.0, 40.0);
    let mut pts: Vec<Point2D> = (0..100)
        .map(|i| {
            let a = i as f64 * std::f64::consts::TAU / 100.0;
            Point2D { x: cx + radius * a.cos(), y: cy + radius * a.sin(), charge: 1.0 }
        })
        .collect();
    let noise: Vec<Point2D> = (0..20)
        .map(|_| Point2D { x: r.gen_range(-200.0..200.0), y: r.gen_range(-200.0..200.0), charge: 1.0 })
        .collect();
    pts.extend(&noise);
    let params = HoughParams { keep_distance: 2.0, ..Default::default() };
    let out = pipeline::hough_circle_filter(&pts, &params).unwrap();
    let kept = |p: &Point2D| out.points.iter().any(|q| q == p);
    assert!(pts[..100].iter().all(kept));
    let noise_kept = noise.iter().filter(|p| kept(p)).count();
    assert!(noise_kept <= 4, "{noise_kept} noise points survived");

    let clean = pipeline::hough_circle_filter(&pts[..100], &params).unwrap();
    assert_eq!(clean.points, pts[..100].to_vec());
    let two = pipeline::hough_circle_filter(&pts[..2], &params).unwrap();
    assert!(two.warning && two.points == pts[..2].to_vec());
}

#[test]
fn nn_filter_matches_brute_force() {
    let c = cloud(&[[0.0, 0.0, 0.0, 1.0], [1.0, 0.0, 0.0, 1.0], [0.0, 1.0, 0.0, 1.0], [50.0, 50.0, 0.0, 1.0]]);
    let out = pipeline::nn_filter(&c, 2.0, 1).unwrap();
    assert_eq!(out.points, c.points[..3].to_vec());
    let single = cloud(&[[0.0, 0.0, 0.0, 1.0]]);
    assert!(pipeline::nn_filter(&single, 5.0, 1).unwrap().points.is_empty());
    let pair = cloud(&[[0.0, 0.0, 0.0, 1.0], [0.0, 0.0, 2.5, 1.0]]);
    assert_eq!(pipeline::nn_filter(&pair, 5.0, 1).unwrap().points.len(), 2);
}

fn random_cloud() -> impl Strategy<Value = Vec<[f64; 4]>> {
    prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0, 0.0f64..100.0, 0.0f64..5.0), 1..60)
        .prop_map(|v| v.into_iter().map(|(x, y, z, q)| [x, y, z, q]).collect())
}

proptest! {
    #[test]
    fn nn_filter_grows_with_radius(pts in random_cloud(), r1 in 1.0f64..20.0, dr in 0.0f64..20.0, k in 1usize..4) {
        let c = cloud(&pts);
        let small = pipeline::nn_filter(&c, r1, k).unwrap();
        let large = pipeline::nn_filter(&c, r1 + dr, k).unwrap();
        prop_assert!(small.points.iter().all(|p| large.points.contains(p)));
        // Brute-force count of kept points.
        let expect = pts.iter().enumerate().filter(|(i, a)| {
            pts.iter().enumerate().filter(|(j, b)| {
                *j != *i && (a[0]-b[0]).powi(2) + (a[1]-b[1]).powi(2) + (a[2]-b[2]).powi(2) <= r1 * r1
            }).count() >= k
        }).count();
        prop_assert_eq!(small.points.len(), expect);
    }

    #[test]
    fn scaled_images_span_the_unit_interval(vals in prop::collection::vec(0.0f64..1e4, 2..64)) {
        let n = vals.len();
        let img = ImageGrid::from_values(1, n, vals.clone()).unwrap();
        let s = pipeline::log_minmax_scale(&img).unwrap();
        let (lo, hi) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        if hi > lo {
            prop_assert!(!s.degenerate);
            let smin = s.image.values.iter().cloned().fold(f64::INFINITY, f64::min);
            let smax = s.image.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!((smin, smax), (0.0, 1.0));
        } else {
            prop_assert!(s.degenerate);
        }
    }
}

#[test]
fn unfiltered_preprocessing_is_the_plain_composition() {
    let events = two_class_events(3, 3, 4);
    let cfg = PreprocessConfig { resolution: 64, ..Default::default() };
    for e in &events {
        let via = pipeline::preprocess_event(e, &cfg).unwrap();
        let raster = pipeline::rasterize(&pipeline::project_xy(e), 64, cfg.bounds).unwrap();
        let manual = pipeline::log_minmax_scale(&raster.image).unwrap();
        assert_eq!(via.image, manual.image);
        assert_eq!(via.dropped, raster.dropped);
        assert_eq!(via, pipeline::preprocess_event(e, &cfg).unwrap());
    }
}

#[test]
fn proton_spirals_render_as_connected_arcs() {
    let events = two_class_events(12, 0, 5);
    let cfg = PreprocessConfig::default();
    for e in events.iter().filter(|e| e.label == Some(Species::Proton)) {
        let img = pipeline::preprocess_event(e, &cfg).unwrap().image;
        let nz = img.nonzero_count();
        assert!(nz >= 30, "{}: only {nz} lit pixels", e.id);
        assert!(pipeline::largest_component(&img) as f64 >= 0.9 * nz as f64, "{} is fragmented", e.id);
    }
}

#[test]
fn filters_run_on_noisy_events() {
    let events = two_class_events(2, 2, 6);
    let cfg = PreprocessConfig { resolution: 32, apply_nn_filter: true, apply_hough: true, ..Default::default() };
    let out = pipeline::preprocess_all(&events, &cfg).unwrap();
    assert_eq!(out.len(), 4);
    assert!(out.iter().all(|p| p.image.values.iter().all(|v| (0.0..=1.0).contains(v))));
    let bad = PreprocessConfig { resolution: 0, ..Default::default() };
    assert!(pipeline::preprocess_all(&events, &bad).is_err());
}
