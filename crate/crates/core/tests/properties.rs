use cmfd_core::backbone::{
    attention_weights, l2_normalize_descriptors, self_correlation, spatial_attention, top_t_pool, zero_out_normalize,
    AttentionParams,
};
use cmfd_core::crf::{meanfield_infer, CrfParams, UnaryField};
use cmfd_core::fusion::{integrate, project_matches, proposal_score_mask, FusionParams};
use cmfd_core::keypoint::{Keypoint, Matcher, MatchSet, MatchedPoint, MutualNnMatcher};
use cmfd_core::metrics::{aggregate, pixel_metrics, DetectedRule};
use cmfd_core::proposal::{avg_score, iou, select_proposals_traced, SelectionParams};
use cmfd_core::superpixel::SuperpixelLabels;
use cmfd_core::synth::{paste_footprint, synthesize_forgery, SynthConfig, TransformRanges};
use cmfd_core::{BBox, BinaryMask, RgbImage, ScoreMap, Tensor};
use proptest::collection::vec;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tensor(c: usize, h: usize, w: usize) -> impl Strategy<Value = Tensor> {
    vec(-2.0f64..2.0, c * h * w).prop_map(move |d| Tensor::from_vec(c, h, w, d).unwrap())
}

fn score_map(w: usize, h: usize) -> impl Strategy<Value = ScoreMap> {
    vec(0.0f64..1.0, w * h).prop_map(move |d| ScoreMap::from_vec(w, h, d).unwrap())
}

fn mask(w: usize, h: usize) -> impl Strategy<Value = BinaryMask> {
    vec(any::<bool>(), w * h).prop_map(move |d| BinaryMask::from_fn(w, h, |x, y| d[y * w + x]))
}

fn bbox(w: usize, h: usize) -> impl Strategy<Value = BBox> {
    (0..w - 1, 0..h - 1, 1..=w, 1..=h).prop_filter_map("degenerate", |(x1, y1, x2, y2)| BBox::new(x1, y1, x2, y2).ok())
}

fn keypoints(n: usize, dim: usize, seed: u64) -> Vec<Keypoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let d: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            Keypoint {
                x: i,
                y: 0,
                descriptor: d.iter().map(|v| v / norm).collect(),
                score: 1.0,
            }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attention_with_zero_lambda_is_identity(f in tensor(8, 3, 4), seed in any::<u64>()) {
        let mut p = AttentionParams::random(8, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        p.lambda = 0.0;
        prop_assert_eq!(spatial_attention(&f, &p).unwrap(), f);
    }

    #[test]
    fn attention_rows_are_distributions(f in tensor(8, 3, 3), seed in any::<u64>()) {
        let p = AttentionParams::random(8, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let beta = attention_weights(&f, &p).unwrap();
        for row in beta.chunks(9) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn correlation_is_symmetric_and_bounded(f in tensor(6, 3, 4)) {
        let c = self_correlation(&l2_normalize_descriptors(&f));
        let n = 12;
        for m in 0..n {
            for k in 0..n {
                let (a, b) = (c.data()[k * n + m], c.data()[m * n + k]);
                prop_assert!((a - b).abs() < 1e-6);
                prop_assert!(a.abs() <= 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn top_t_is_sorted_and_prefix_consistent(f in tensor(4, 3, 3), t in 1usize..8) {
        let c = self_correlation(&f);
        let small = top_t_pool(&c, t).unwrap();
        let large = top_t_pool(&c, t + 1).unwrap();
        for m in 0..9 {
            let fib = small.fiber(m);
            prop_assert!(fib.windows(2).all(|p| p[0] >= p[1]));
            prop_assert_eq!(&fib[..], &large.fiber(m)[..t]);
        }
    }

    #[test]
    fn top_t_ignores_channel_order(f in tensor(3, 2, 3), t in 1usize..6, seed in any::<u64>()) {
        let c = self_correlation(&f);
        let (k, h, w) = c.shape();
        let mut order: Vec<usize> = (0..k).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..k).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut shuffled = Tensor::zeros(k, h, w);
        for (dst, &src) in order.iter().enumerate() {
            shuffled.plane_mut(dst).copy_from_slice(c.plane(src));
        }
        prop_assert_eq!(top_t_pool(&c, t).unwrap(), top_t_pool(&shuffled, t).unwrap());
    }

    #[test]
    fn normalized_fibers_are_unit_or_zero(f in tensor(5, 2, 3)) {
        let z = zero_out_normalize(&f);
        for m in 0..6 {
            let fib = z.fiber(m);
            prop_assert!(fib.iter().all(|&v| v >= 0.0));
            let n = fib.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(n == 0.0 || (n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn selection_postconditions(
        s in score_map(64, 64),
        boxes in vec(bbox(64, 64), 0..20),
        s_t in 0.2f64..0.6,
    ) {
        let params = SelectionParams { s_t, ..SelectionParams::default() };
        let trace = select_proposals_traced(&s, &boxes, &params).unwrap();
        prop_assert!(trace.sweeps <= boxes.len().max(1));
        for b in &trace.boxes {
            prop_assert!((b.area() as f64) < 0.5 * 64.0 * 64.0);
            prop_assert!(avg_score(&s, b).unwrap() > s_t || trace.fallback.contains(b));
        }
        prop_assert_eq!(select_proposals_traced(&s, &boxes, &params).unwrap(), trace);
    }

    #[test]
    fn matcher_is_symmetric_and_one_to_one(na in 0usize..12, nb in 0usize..12, seed in any::<u64>()) {
        let a = keypoints(na, 6, seed);
        let b = keypoints(nb, 6, seed ^ 0x5555);
        let m = MutualNnMatcher::default();
        let ab = m.match_pair(&a, &b).unwrap();
        let mut ba: Vec<(usize, usize)> = m.match_pair(&b, &a).unwrap().iter().map(|c| (c.b, c.a)).collect();
        let mut ab_pairs: Vec<(usize, usize)> = ab.iter().map(|c| (c.a, c.b)).collect();
        ab_pairs.sort_unstable();
        ba.sort_unstable();
        prop_assert_eq!(&ab_pairs, &ba);
        let mut seen_a: Vec<usize> = ab.iter().map(|c| c.a).collect();
        let mut seen_b: Vec<usize> = ab.iter().map(|c| c.b).collect();
        seen_a.sort_unstable();
        seen_a.dedup();
        seen_b.sort_unstable();
        seen_b.dedup();
        prop_assert_eq!(seen_a.len(), ab.len());
        prop_assert_eq!(seen_b.len(), ab.len());
        prop_assert!(ab.iter().all(|c| (0.0..=1.0).contains(&c.score)));
    }

    #[test]
    fn fusion_is_monotone_and_open_range(
        a in score_map(4, 4),
        b in score_map(4, 4),
        bump in 0.0f64..0.5,
        phi in 0.5f64..8.0,
    ) {
        let p = FusionParams { phi, ..FusionParams::default() };
        let base = integrate(&a, &b, &p).unwrap();
        let raised: Vec<f64> = a.as_slice().iter().map(|v| (v + bump).min(1.0)).collect();
        let up = integrate(&ScoreMap::from_vec(4, 4, raised).unwrap(), &b, &p).unwrap();
        for (x, y) in base.as_slice().iter().zip(up.as_slice()) {
            prop_assert!(*x > 0.0 && *x < 1.0);
            prop_assert!(y >= x);
        }
    }

    #[test]
    fn projection_is_constant_per_region(labels in vec(0u32..5, 36), pts in vec((0usize..6, 0usize..6, 0.0f64..1.0), 0..6)) {
        let mut remap = [u32::MAX; 5];
        let mut next = 0;
        let dense: Vec<u32> = labels.iter().map(|&l| {
            if remap[l as usize] == u32::MAX {
                remap[l as usize] = next;
                next += 1;
            }
            remap[l as usize]
        }).collect();
        let l = SuperpixelLabels::new(6, 6, dense).unwrap();
        let m = MatchSet {
            points: pts.iter().map(|&(x, y, score)| MatchedPoint { x, y, score }).collect(),
            lines: Vec::new(),
        };
        let s = project_matches(&l, &m).unwrap();
        for i in 0..36 {
            for j in 0..36 {
                if l.as_slice()[i] == l.as_slice()[j] {
                    prop_assert_eq!(s.as_slice()[i], s.as_slice()[j]);
                }
            }
        }
    }

    #[test]
    fn proposal_mask_matches_membership(s in score_map(16, 12), boxes in vec(bbox(16, 12), 0..3)) {
        let out = proposal_score_mask(&s, &boxes).unwrap();
        for y in 0..12 {
            for x in 0..16 {
                let inside = boxes.iter().any(|b| b.contains(x, y));
                prop_assert_eq!(out.get(x, y), if inside { s.get(x, y) } else { 0.0 });
            }
        }
    }

    #[test]
    fn crf_marginals_normalize_and_respect_label_swap(
        u in vec((0.0f64..4.0, 0.0f64..4.0), 20),
        px in vec(any::<u8>(), 60),
    ) {
        let img = RgbImage::from_raw(5, 4, px).unwrap();
        let p = CrfParams::default();
        let fwd = UnaryField::new(5, 4, u.iter().map(|&(a, b)| [a, b]).collect()).unwrap();
        let swapped = UnaryField::new(5, 4, u.iter().map(|&(a, b)| [b, a]).collect()).unwrap();
        let q = meanfield_infer(&fwd, &img, &p).unwrap();
        let r = meanfield_infer(&swapped, &img, &p).unwrap();
        for (a, b) in q.as_slice().iter().zip(r.as_slice()) {
            prop_assert!((a[0] + a[1] - 1.0).abs() < 1e-9);
            prop_assert!((a[0] - b[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn metric_identities(pred in mask(8, 8), gt in mask(8, 8)) {
        let m = pixel_metrics(&pred, &gt).unwrap();
        let swapped = pixel_metrics(&gt, &pred).unwrap();
        prop_assert!((m.f1 - 2.0 * m.iou / (1.0 + m.iou)).abs() < 1e-12);
        prop_assert!(m.f1 >= m.iou);
        prop_assert_eq!(m.f1, swapped.f1);
        prop_assert_eq!(m.iou, swapped.iou);
        if m.tp + m.fp > 0 && m.tp + m.fn_ > 0 {
            prop_assert_eq!(m.precision, swapped.recall);
            prop_assert_eq!(m.recall, swapped.precision);
        }
    }

    #[test]
    fn aggregates_ignore_order(masks in vec((mask(4, 4), mask(4, 4)), 1..8)) {
        let per: Vec<_> = masks.iter().map(|(p, g)| pixel_metrics(p, g).unwrap()).collect();
        let mut rev = per.clone();
        rev.reverse();
        let a = aggregate(&per, DetectedRule::default()).unwrap();
        let b = aggregate(&rev, DetectedRule::default()).unwrap();
        prop_assert!((a.protocol_all.f1 - b.protocol_all.f1).abs() < 1e-12);
        prop_assert!((a.detected_rate - b.detected_rate).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a.detected_rate));
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(20, 20), b in bbox(20, 20)) {
        let v = iou(&a, &b);
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&v));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn synthetic_mask_is_recomputable(seed in any::<u64>(), stream in 0u64..100) {
        let img = RgbImage::from_fn(64, 64, |x, y| [(x * 4) as u8, (y * 4) as u8, ((x ^ y) * 3) as u8]);
        let region = BinaryMask::from_fn(64, 64, |x, y| (10..20).contains(&x) && (30..38).contains(&y));
        let cfg = SynthConfig { size: 64, max_retries: 20 };
        let ranges = TransformRanges::mild();
        let s = synthesize_forgery(&img, &region, &ranges, &cfg, seed, stream).unwrap();
        let p = &s.provenance;
        let paste = paste_footprint(&s.source, &p.transform, p.offset).unwrap();
        prop_assert_eq!(&paste, &s.paste);
        prop_assert_eq!(s.source.union(&paste).unwrap(), s.mask);
        for y in 0..64 {
            for x in 0..64 {
                if !s.paste.get(x, y) && !s.source.get(x, y) {
                    prop_assert_eq!(s.image.get(x, y), img.get(x, y));
                }
            }
        }
    }

    #[test]
    fn luminance_shift_never_wraps(seed in any::<u64>()) {
        let img = RgbImage::from_fn(32, 32, |x, _| if x < 16 { [250, 250, 250] } else { [3, 3, 3] });
        let region = BinaryMask::from_fn(32, 32, |x, y| (2..8).contains(&x) && (2..8).contains(&y));
        let mut ranges = TransformRanges::identity();
        ranges.luminance = cmfd_core::synth::Interval::new(20.0, 32.0).unwrap();
        let s = synthesize_forgery(&img, &region, &ranges, &SynthConfig { size: 32, max_retries: 5 }, seed, 0).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                if s.paste.get(x, y) {
                    prop_assert_eq!(s.image.get(x, y), [255, 255, 255]);
                }
            }
        }
    }

    #[test]
    fn duplicated_patch_raises_best_match(
        f in tensor(4, 8, 8),
        (sx, sy) in (0usize..3, 0usize..3),
        (dx, dy) in (5usize..7, 5usize..7),
    ) {
        let best_other = |t: &Tensor| -> Vec<f64> {
            let n = t.spatial();
            let c = self_correlation(&l2_normalize_descriptors(t));
            (0..n)
                .map(|m| (0..n).filter(|&k| k != m).map(|k| c.data()[k * n + m]).fold(f64::NEG_INFINITY, f64::max))
                .collect()
        };
        let mut dup = f.clone();
        for ch in 0..4 {
            for oy in 0..2 {
                for ox in 0..2 {
                    dup.set(ch, dy + oy, dx + ox, f.at(ch, sy + oy, sx + ox));
                }
            }
        }
        let (before, after) = (best_other(&f), best_other(&dup));
        for oy in 0..2 {
            for ox in 0..2 {
                for (x, y) in [(sx + ox, sy + oy), (dx + ox, dy + oy)] {
                    let m = y * 8 + x;
                    prop_assert!(after[m] > before[m], "({x}, {y}): {} vs {}", after[m], before[m]);
                }
            }
        }
    }
}
