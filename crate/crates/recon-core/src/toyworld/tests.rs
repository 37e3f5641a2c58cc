use std::collections::BTreeSet;

use rand_chacha::ChaCha8Rng;
use rand_distr::num_traits::Float;

use super::*;

fn btree(ids: &[CategoryId]) -> BTreeSet<CategoryId> {
    ids.iter().copied().collect()
}

fn obj(x0: usize, y0: usize, x1: usize, y1: usize, label: CategoryId) -> LayoutObject {
    LayoutObject {
        bbox: BBox::new(x0, y0, x1, y1).unwrap(),
        label,
    }
}

#[test]
fn default_palette_is_valid_and_well_separated() {
    let p = default_palette();
    assert_eq!(p.num_categories(), 5);
    assert_eq!(p.category(BACKGROUND).unwrap().name(), "background");
    // Detector threshold is half this; keep generous margin over the 0.2 floor.
    assert!(
        p.min_inter_category_distance() >= 0.47,
        "min inter-category distance {}",
        p.min_inter_category_distance()
    );
}

#[test]
fn palette_rejects_bad_inputs() {
    let ok = |id| {
        CategorySpec::new(
            id,
            format!("c{id}"),
            vec![ColorComponent {
                mean: [0.1 * id as f64, 0.9, 0.1],
                weight: 1.0,
            }],
        )
        .unwrap()
    };
    // weights must sum to 1
    assert!(CategorySpec::new(
        0,
        "bad",
        vec![
            ColorComponent { mean: [0.0; 3], weight: 0.5 },
            ColorComponent { mean: [1.0; 3], weight: 0.6 },
        ]
    )
    .is_err());
    // weights must be positive
    assert!(CategorySpec::new(
        0,
        "bad",
        vec![
            ColorComponent { mean: [0.0; 3], weight: 1.2 },
            ColorComponent { mean: [1.0; 3], weight: -0.2 },
        ]
    )
    .is_err());
    // colors must be in [0,1]
    assert!(CategorySpec::new(0, "bad", vec![ColorComponent { mean: [1.2, 0.0, 0.0], weight: 1.0 }]).is_err());
    // ids must be 0..C-1 without gaps
    assert!(Palette::new(0.05, vec![ok(0), ok(2)]).is_err());
    // sigma bound
    assert!(Palette::new(0.0, vec![ok(0)]).is_err());
    assert!(Palette::new(0.11, vec![ok(0)]).is_err());
    // inter-category separation
    let near = vec![
        CategorySpec::new(0, "a", vec![ColorComponent { mean: [0.5, 0.5, 0.5], weight: 1.0 }]).unwrap(),
        CategorySpec::new(1, "b", vec![ColorComponent { mean: [0.55, 0.5, 0.5], weight: 1.0 }]).unwrap(),
    ];
    assert!(Palette::new(0.05, near).is_err());
}

#[test]
fn bbox_enforces_area_floor() {
    assert!(BBox::new(0, 0, 4, 4).is_ok());
    assert!(BBox::new(0, 0, 3, 5).is_err()); // 15 px
    assert!(BBox::new(2, 2, 2, 6).is_err()); // degenerate
    assert!(BBox::new(5, 0, 4, 8).is_err());
    let b = BBox::new(1, 2, 5, 6).unwrap();
    assert_eq!((b.width(), b.height(), b.area()), (4, 4, 16));
    assert!(b.contains(1, 2) && b.contains(4, 5));
    assert!(!b.contains(5, 2) && !b.contains(1, 6));
}

#[test]
fn layout_invariants() {
    let p = default_palette();
    let good = vec![obj(0, 0, 4, 4, 1), obj(5, 5, 10, 10, 2), obj(0, 5, 4, 10, 3)];
    assert!(Layout::new(16, 16, good.clone(), btree(&[1, 2, 3]), &p).is_ok());
    // too few objects
    assert!(Layout::new(16, 16, good[..2].to_vec(), btree(&[1, 2]), &p).is_err());
    // too many objects
    let many: Vec<_> = (0..9).map(|i| obj(i, 0, i + 4, 4, 1)).collect();
    assert!(Layout::new(32, 32, many, btree(&[1]), &p).is_err());
    // caption must cover labels
    assert!(Layout::new(16, 16, good.clone(), btree(&[1, 2]), &p).is_err());
    // caption may be a superset
    assert!(Layout::new(16, 16, good.clone(), btree(&[1, 2, 3, 4]), &p).is_ok());
    // unknown caption id
    assert!(Layout::new(16, 16, good.clone(), btree(&[1, 2, 3, 9]), &p).is_err());
    // unknown label
    let bad = vec![obj(0, 0, 4, 4, 7), obj(5, 5, 10, 10, 2), obj(0, 5, 4, 10, 3)];
    assert!(Layout::new(16, 16, bad, btree(&[7, 2, 3]), &p).is_err());
    // background label forbidden
    let bad = vec![obj(0, 0, 4, 4, 0), obj(5, 5, 10, 10, 2), obj(0, 5, 4, 10, 3)];
    assert!(Layout::new(16, 16, bad, btree(&[0, 2, 3]), &p).is_err());
    // out of canvas
    assert!(Layout::new(8, 8, good, btree(&[1, 2, 3]), &p).is_err());
}

/// Oracle: independent per-pixel rasterization (last containing object wins)
/// must match the painter's-algorithm renderer, including the overlap.
#[test]
fn render_matches_per_pixel_oracle() {
    let p = default_palette();
    let objects = vec![obj(0, 0, 4, 4, 1), obj(2, 2, 6, 6, 2), obj(0, 4, 4, 8, 3)];
    let layout = Layout::new(8, 8, objects.clone(), btree(&[1, 2, 3]), &p).unwrap();
    let choice = vec![1, 0, 2, 1]; // background, then per object
    let got = render_mean_field(&layout, &p, &choice).unwrap();

    let color = |cat: CategoryId, k: usize| p.category(cat).unwrap().components()[k].mean;
    for y in 0..8 {
        for x in 0..8 {
            let mut expect = color(BACKGROUND, choice[0]);
            for (i, o) in objects.iter().enumerate() {
                if o.bbox.contains(x, y) {
                    expect = color(o.label, choice[i + 1]);
                }
            }
            assert_eq!(got.pixel(y, x), expect, "pixel ({y},{x})");
        }
    }
    // Spot-check the overlap explicitly: object 1 paints over object 0.
    assert_eq!(got.pixel(3, 3), color(2, 2));
}

#[test]
fn render_rejects_bad_choice_vector() {
    let p = default_palette();
    let layout = Layout::new(
        16,
        16,
        vec![obj(0, 0, 4, 4, 1), obj(5, 5, 10, 10, 2), obj(0, 5, 4, 10, 3)],
        btree(&[1, 2, 3]),
        &p,
    )
    .unwrap();
    assert!(render_mean_field(&layout, &p, &[0, 0, 0]).is_err());
    assert!(render_mean_field(&layout, &p, &[0, 9, 0, 0]).is_err());
}

#[test]
fn scene_sampling_is_deterministic_and_unbiased() {
    let p = default_palette();
    let layout = Layout::new(
        64,
        64,
        vec![obj(2, 2, 14, 14, 1), obj(20, 20, 34, 34, 2), obj(40, 4, 56, 20, 3)],
        btree(&[1, 2, 3]),
        &p,
    )
    .unwrap();
    let a = sample_scene(&layout, &p, 7).unwrap();
    let b = sample_scene(&layout, &p, 7).unwrap();
    assert_eq!(a.image, b.image);
    assert_eq!(a.component_choice, b.component_choice);
    assert_ne!(a.image, sample_scene(&layout, &p, 8).unwrap().image);

    // Background pixel mean approaches the chosen component mean (LLN).
    let bg_mean = p.category(BACKGROUND).unwrap().components()[a.component_choice[0]].mean;
    let mut sum = [0.0f64; 3];
    let mut n = 0usize;
    for y in 0..64 {
        for x in 0..64 {
            if layout.objects().iter().all(|o| !o.bbox.contains(x, y)) {
                let px = a.image.pixel(y, x);
                for ch in 0..3 {
                    sum[ch] += px[ch];
                }
                n += 1;
            }
        }
    }
    let tol = 3.0 * p.pixel_sigma() / (n as f64).sqrt();
    for ch in 0..3 {
        let dev = (sum[ch] / n as f64 - bg_mean[ch]).abs();
        assert!(dev <= tol, "channel {ch}: deviation {dev} > {tol}");
    }
}

#[test]
fn component_choices_follow_prior_weights() {
    let p = default_palette();
    let layout = Layout::new(
        16,
        16,
        vec![obj(0, 0, 4, 4, 1), obj(5, 5, 10, 10, 2), obj(0, 5, 4, 10, 3)],
        btree(&[1, 2, 3]),
        &p,
    )
    .unwrap();
    let n = 4000;
    let mut bg_first = 0usize;
    for seed in 0..n {
        let s = sample_scene(&layout, &p, seed as u64).unwrap();
        if s.component_choice[0] == 0 {
            bg_first += 1;
        }
    }
    let freq = bg_first as f64 / n as f64;
    let tol = 3.0 * (0.6 * 0.4 / n as f64).sqrt();
    assert!((freq - 0.6).abs() <= tol, "frequency {freq}, tolerance {tol}");
}

#[test]
fn control_map_marks_exact_perimeters() {
    let p = default_palette();
    // Disjoint boxes so active count is the sum of perimeter formulas.
    let objects = vec![obj(1, 1, 5, 5, 1), obj(8, 8, 14, 12, 2), obj(1, 8, 5, 14, 3)];
    let layout = Layout::new(16, 16, objects.clone(), btree(&[1, 2, 3]), &p).unwrap();
    let map = make_control_map(&layout);
    let expected: usize = objects
        .iter()
        .map(|o| 2 * o.bbox.width() + 2 * o.bbox.height() - 4)
        .sum();
    assert_eq!(map.count_active(), expected);
    // A 4x4 box contributes exactly 12 perimeter pixels.
    assert_eq!(2 * 4 + 2 * 4 - 4, 12);
    for o in &objects {
        let b = &o.bbox;
        assert!(map.is_active(b.y0(), b.x0()));
        assert!(map.is_active(b.y1() - 1, b.x1() - 1));
        if b.width() > 2 && b.height() > 2 {
            assert!(!map.is_active(b.y0() + 1, b.x0() + 1), "interior must stay inactive");
        }
    }
}

#[test]
fn generator_yields_valid_gapped_layouts() {
    let p = default_palette();
    let cfg = LayoutGenConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..300 {
        let layout = generate_layout(&cfg, &p, &mut rng).unwrap();
        let objs = layout.objects();
        assert!((cfg.min_objects..=cfg.max_objects).contains(&objs.len()));
        let distinct: BTreeSet<_> = objs.iter().map(|o| o.label).collect();
        assert!(distinct.len() >= cfg.min_categories);
        for (i, a) in objs.iter().enumerate() {
            for b in objs.iter().skip(i + 1) {
                // Re-check the gap with an independent expansion test.
                let sep_x = a.bbox.x1() + cfg.gap <= b.bbox.x0() || b.bbox.x1() + cfg.gap <= a.bbox.x0();
                let sep_y = a.bbox.y1() + cfg.gap <= b.bbox.y0() || b.bbox.y1() + cfg.gap <= a.bbox.y0();
                assert!(sep_x || sep_y, "boxes must stay {} apart", cfg.gap);
            }
        }
    }
}

#[test]
fn generator_rejects_impossible_requests() {
    let p = default_palette();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = LayoutGenConfig {
        width: 10,
        height: 10,
        min_objects: 8,
        max_objects: 8,
        min_side: 6,
        max_side: 6,
        ..LayoutGenConfig::default()
    };
    assert!(generate_layout(&cfg, &p, &mut rng).is_err());
    let cfg = LayoutGenConfig {
        min_side: 3, // 9 px < area floor
        max_side: 4,
        ..LayoutGenConfig::default()
    };
    assert!(generate_layout(&cfg, &p, &mut rng).is_err());
}

#[test]
fn grid_accessors_round_trip() {
    let mut g = LatentGrid::zeros(3, 5).unwrap();
    g.set(2, 4, 1, 0.75);
    g.set_pixel(0, 0, [0.1, 0.2, 0.3]);
    assert_eq!(g.get(2, 4, 1), 0.75);
    assert_eq!(g.pixel(0, 0), [0.1, 0.2, 0.3]);
    assert_eq!(g.data().len(), 45);
    assert!(LatentGrid::zeros(0, 5).is_err());
    assert!(LatentGrid::from_vec(2, 2, vec![0.0; 5]).is_err());
    assert!(LatentGrid::from_vec(1, 1, vec![0.0, f64::nan(), 0.0]).is_err());
}

#[test]
fn expected_color_is_weighted_mean() {
    let p = default_palette();
    let bg = p.category(BACKGROUND).unwrap();
    let e = bg.expected_color();
    for ch in 0..3 {
        let manual = 0.6 * bg.components()[0].mean[ch] + 0.4 * bg.components()[1].mean[ch];
        assert!((e[ch] - manual).abs() < 1e-15);
    }
}
