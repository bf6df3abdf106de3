use lanenum::maskgeom::{extract_lines, fit_line, label_components, HeuristicConfig};
use lanenum::scene::{generate_sample, DatasetRequest};
use proptest::prelude::*;

fn slope_counts(mask: &[u8], width: usize, cfg: &HeuristicConfig) -> Option<(usize, usize)> {
    let fits = extract_lines(mask, width, cfg);
    if fits
        .iter()
        .any(|f| !f.slope.is_finite() || f.slope.abs() > cfg.vertical_slope)
    {
        return None;
    }
    Some((
        fits.iter().filter(|f| f.slope > 0.0).count(),
        fits.iter().filter(|f| f.slope < 0.0).count(),
    ))
}

fn mirror(mask: &[u8], width: usize) -> Vec<u8> {
    mask.chunks(width)
        .flat_map(|row| row.iter().rev().copied())
        .collect()
}

#[test]
fn mirroring_swaps_slope_signs_on_rendered_masks() {
    let cfg = HeuristicConfig::default();
    let mut req = DatasetRequest::new(400, 17);
    req.corruption.line_dropout_p = 0.2;
    let mut checked = 0;
    for i in 0..req.sample_count {
        let s = generate_sample(&req, i);
        let Some((pos, neg)) = slope_counts(s.center_mask(), s.width, &cfg) else {
            continue;
        };
        let flipped = slope_counts(&mirror(s.center_mask(), s.width), s.width, &cfg)
            .expect("mirror keeps slopes finite");
        assert_eq!(flipped, (neg, pos), "sample {i}");
        checked += 1;
    }
    assert!(
        checked >= 300,
        "only {checked} masks without near-vertical fits"
    );
}

#[test]
fn rendered_left_boundary_of_a_single_lane_has_positive_slope() {
    let req = DatasetRequest::new(2000, 29);
    let mut found = 0;
    for i in 0..req.sample_count {
        let s = generate_sample(&req, i);
        let scene = s.scene.as_ref().unwrap();
        if scene.ambiguous || scene.lane_count != 1 {
            continue;
        }
        let ids = lanenum::scene::render_line_ids(scene, 0);
        let left: Vec<u8> = ids
            .ids
            .iter()
            .map(|&id| if id == 1 { 255 } else { 0 })
            .collect();
        let comps = label_components(&left, s.width, 1);
        assert!(!comps.is_empty());
        for c in comps.iter().filter(|c| c.pixels.len() >= 20) {
            let fit = fit_line(c, s.height).unwrap();
            assert!(fit.slope > 0.0, "sample {i}: slope {}", fit.slope);
        }
        found += 1;
    }
    assert!(found >= 50);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mirroring_random_strokes_swaps_counts(
        strokes in proptest::collection::vec((5usize..45, 5usize..45, 20usize..60, -3i32..=3), 1..5),
    ) {
        let (w, h) = (60usize, 60usize);
        let mut mask = vec![0u8; w * h];
        for (x0, y0, len, dx) in strokes {
            for k in 0..len.min(h - y0) {
                let x = x0 as i64 + (dx as i64 * k as i64) / 3;
                if (0..w as i64 - 1).contains(&x) {
                    mask[(y0 + k) * w + x as usize] = 255;
                    mask[(y0 + k) * w + x as usize + 1] = 255;
                }
            }
        }
        let cfg = HeuristicConfig::default();
        if let Some((pos, neg)) = slope_counts(&mask, w, &cfg) {
            prop_assert_eq!(slope_counts(&mirror(&mask, w), w, &cfg), Some((neg, pos)));
        }
    }
}
