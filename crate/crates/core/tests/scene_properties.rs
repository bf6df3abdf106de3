use lanenum::maskgeom::{predict_lane_heuristic, HeuristicConfig};
use lanenum::scene::{
    generate_sample, generate_samples, read_dataset, render, render_line_ids, write_dataset,
    DatasetRequest, Sample,
};

fn corrupted(p: f64, q: f64, count: usize, seed: u64) -> Vec<Sample> {
    let mut req = DatasetRequest::new(count, seed);
    req.corruption.line_dropout_p = p;
    req.corruption.pixel_flip_q = q;
    generate_samples(&req, 1)
}

/// Whether boundary `i` lost every pixel in mask frame `k`.
fn erased(s: &Sample, k: usize, i: usize) -> Option<bool> {
    let scene = s.scene.as_ref().unwrap();
    let ids = render_line_ids(scene, k as i64 - scene.temporal_radius() as i64);
    let mask = s.mask(k);
    let pixels: Vec<usize> = (0..ids.ids.len())
        .filter(|&at| ids.ids[at] as usize == i + 1)
        .collect();
    (!pixels.is_empty()).then(|| pixels.iter().all(|&at| mask[at] == 0))
}

#[test]
fn erasure_is_independent_across_frames() {
    let samples = corrupted(0.3, 0.0, 700, 31);
    let mut table = [[0f64; 2]; 2];
    let mut lines = 0;
    for s in samples.iter().filter(|s| s.label != 0) {
        for i in 0..=s.scene.as_ref().unwrap().lane_count {
            if let (Some(a), Some(b)) = (erased(s, 0, i), erased(s, 1, i)) {
                table[a as usize][b as usize] += 1.0;
                lines += 1;
            }
        }
    }
    assert!(lines >= 2000, "only {lines} lines");
    let n = lines as f64;
    let rows = [table[0][0] + table[0][1], table[1][0] + table[1][1]];
    let cols = [table[0][0] + table[1][0], table[0][1] + table[1][1]];
    let mut chi2 = 0.0;
    for r in 0..2 {
        for c in 0..2 {
            let expected = rows[r] * cols[c] / n;
            chi2 += (table[r][c] - expected).powi(2) / expected;
        }
    }
    // 99th percentile of chi-square with one degree of freedom
    assert!(chi2 < 6.635, "chi2 {chi2:.3} over {lines} lines: {table:?}");
    let rate = rows[1] / n;
    assert!((rate - 0.3).abs() < 0.03, "erasure rate {rate:.3}");
}

#[test]
fn positive_pixels_do_not_grow_with_dropout() {
    let totals: Vec<usize> = [0.0, 0.15, 0.3]
        .iter()
        .map(|&p| {
            corrupted(p, 0.002, 500, 8)
                .iter()
                .map(|s| s.masks.iter().filter(|&&v| v != 0).count())
                .sum()
        })
        .collect();
    assert!(
        totals[0] >= totals[1] && totals[1] >= totals[2],
        "{totals:?}"
    );
}

#[test]
fn three_lane_middle_scenes_read_as_lane_two() {
    let req = DatasetRequest::new(3000, 5);
    let mut found = 0;
    for i in 0..req.sample_count {
        let s = generate_sample(&req, i);
        let scene = s.scene.as_ref().unwrap();
        if scene.ambiguous || scene.lane_count != 3 || scene.ego_lane != 2 {
            continue;
        }
        found += 1;
        assert_eq!(
            predict_lane_heuristic(s.center_mask(), s.width, &HeuristicConfig::default()),
            2,
            "sample {i}"
        );
    }
    assert!(found >= 50, "only {found} scenes with L=3, e=2");
}

#[test]
fn zero_jitter_gives_identical_frames() {
    let mut req = DatasetRequest::new(100, 3);
    req.generator.jitter_frac = 0.0;
    for i in 0..100 {
        let s = generate_sample(&req, i);
        assert_eq!(s.mask(0), s.mask(1), "sample {i}");
        assert_eq!(s.mask(1), s.mask(2), "sample {i}");
    }
}

#[test]
fn ambiguous_masks_are_nearly_empty() {
    let mut req = DatasetRequest::new(200, 21);
    req.generator.p_ambiguous = 1.0;
    for i in 0..200 {
        let s = generate_sample(&req, i);
        assert_eq!(s.label, 0);
        let scene = s.scene.as_ref().unwrap();
        for k in -1..=1 {
            let (_, mask) = render(scene, k);
            assert!(
                (mask.positive() as f64) < 0.005 * mask.data.len() as f64,
                "sample {i} frame {k}"
            );
        }
    }
}

#[test]
fn boundaries_left_of_center_equal_the_ego_lane() {
    let req = DatasetRequest::new(2000, 13);
    for i in 0..2000 {
        let s = generate_sample(&req, i);
        let scene = s.scene.as_ref().unwrap();
        if !scene.ambiguous {
            assert_eq!(scene.lines_left_of_center(), scene.ego_lane, "sample {i}");
            assert_eq!(s.label as usize, scene.ego_lane.min(4));
        }
    }
}

#[test]
fn regeneration_is_byte_identical_for_any_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let mut req = DatasetRequest::new(120, 44);
    req.corruption.line_dropout_p = 0.2;
    req.corruption.pixel_flip_q = 0.01;
    req.corruption.thickness_jitter = 1;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    write_dataset(&a, &req, 1).unwrap();
    write_dataset(&b, &req, 4).unwrap();
    for f in ["manifest.json", "split.json", "samples.bin"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let read = read_dataset(&a).unwrap();
    let fresh = generate_samples(&req, 1);
    assert_eq!(
        read.samples,
        fresh.iter().map(Sample::without_scene).collect::<Vec<_>>()
    );
    assert_eq!(read.manifest.class_histogram.iter().sum::<usize>(), 120);
}
