use proptest::prelude::*;

use ugs_core::conquer::{merge_levels, ThresholdSchedule};
use ugs_core::decoder::{fourier_encode, FourierBasis};
use ugs_core::eval::{average_recall, greedy_matches, recall_thresholds};
use ugs_core::features::decode_features;
use ugs_core::hierarchy::{granularity, query_mask, Click, GranularMask, Level, MaskHierarchy, PseudoLabelSet, QueryIndex};
use ugs_core::mask::{nms, Connectivity};
use ugs_core::{write_features, BinaryMask, PatchFeatureMap, ScoredMask};

fn mask_strategy(max_h: u32, max_w: u32) -> impl Strategy<Value = BinaryMask> {
    (1..=max_h, 1..=max_w).prop_flat_map(|(h, w)| {
        prop::collection::vec(any::<bool>(), (h * w) as usize)
            .prop_map(move |bits| BinaryMask::from_bools(h, w, &bits).unwrap())
    })
}

fn masks_on(h: u32, w: u32, n: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<BinaryMask>> {
    prop::collection::vec(
        prop::collection::vec(prop::bool::weighted(0.4), (h * w) as usize)
            .prop_map(move |bits| BinaryMask::from_bools(h, w, &bits).unwrap()),
        n,
    )
}

/// Distinct confidences, shuffled.
fn distinct_confidences(n: usize) -> impl Strategy<Value = Vec<f64>> {
    Just((0..n).map(|k| (k + 1) as f64 / (n + 1) as f64).collect::<Vec<_>>()).prop_shuffle()
}

fn scored(masks: Vec<BinaryMask>, conf: Vec<f64>) -> Vec<ScoredMask> {
    masks.into_iter().zip(conf).map(|(m, c)| ScoredMask::new(m, c).unwrap()).collect()
}

fn naive_iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (mut inter, mut union) = (0u32, 0u32);
    for r in 0..a.height() {
        for c in 0..a.width() {
            let (x, y) = (a.get(r, c), b.get(r, c));
            inter += (x && y) as u32;
            union += (x || y) as u32;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Maximum bipartite matching size by exhaustive assignment.
fn best_matching(edges: &[Vec<bool>], row: usize, taken: &mut Vec<bool>) -> usize {
    if row == edges.len() {
        return 0;
    }
    let mut best = best_matching(edges, row + 1, taken);
    for j in 0..taken.len() {
        if edges[row][j] && !taken[j] {
            taken[j] = true;
            best = best.max(1 + best_matching(edges, row + 1, taken));
            taken[j] = false;
        }
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn rle_round_trip(m in mask_strategy(12, 12)) {
        let rle = m.to_rle();
        prop_assert_eq!(rle.counts.iter().map(|&c| c as u64).sum::<u64>(), m.len() as u64);
        prop_assert_eq!(rle.decode().unwrap(), m);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn iou_matches_pixel_oracle(ms in masks_on(16, 16, 2..=2)) {
        let got = ms[0].iou(&ms[1]).unwrap();
        prop_assert!((got - naive_iou(&ms[0], &ms[1])).abs() < 1e-15);
        prop_assert_eq!(got, ms[1].iou(&ms[0]).unwrap());
    }

    #[test]
    fn nms_ignores_input_order(
        (ms, conf, perm) in (2usize..=7).prop_flat_map(|n| (
            masks_on(6, 6, n..=n),
            distinct_confidences(n),
            Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
        )),
        threshold in 0.2f64..0.95,
    ) {
        let a = scored(ms, conf);
        let b: Vec<ScoredMask> = perm.iter().map(|&i| a[i].clone()).collect();
        let kept_a: Vec<&BinaryMask> = nms(&a, threshold).into_iter().map(|i| &a[i].mask).collect();
        let kept_b: Vec<&BinaryMask> = nms(&b, threshold).into_iter().map(|i| &b[i].mask).collect();
        prop_assert_eq!(kept_a, kept_b);
    }

    #[test]
    fn components_partition_the_mask(m in mask_strategy(10, 10), eight in any::<bool>()) {
        let conn = if eight { Connectivity::Eight } else { Connectivity::Four };
        let comps = m.connected_components(conn);
        let mut cover = BinaryMask::new(m.height(), m.width()).unwrap();
        for c in &comps {
            prop_assert!(!c.is_empty());
            prop_assert_eq!(c.intersection_area(&cover).unwrap(), 0);
            cover = cover.or(c).unwrap();
            // a component is connected: it is its own single component
            prop_assert_eq!(c.connected_components(conn).len(), 1);
        }
        prop_assert_eq!(cover, m);
    }

    #[test]
    fn features_round_trip(
        (h, w, d, data, normalize) in (1u32..=5, 1u32..=5, 1u32..=6).prop_flat_map(|(h, w, d)| (
            Just(h), Just(w), Just(d),
            prop::collection::vec(-4.0f32..4.0, (h * w * d) as usize),
            any::<bool>(),
        ))
    ) {
        let mut map = PatchFeatureMap::new(h, w, d, data).unwrap();
        if normalize {
            match map.l2_normalized() {
                Ok(m) => map = m,
                Err(_) => return Ok(()),
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ugf");
        write_features(&map, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        prop_assert_eq!(bytes.len(), 24 + 4 * (h * w * d) as usize);
        let back = decode_features(&bytes).unwrap();
        prop_assert_eq!(back.is_normalized(), map.is_normalized());
        prop_assert_eq!(back, map);
    }

    #[test]
    fn conquer_levels_coarsen_monotonically(
        (h, w, data) in (2u32..=7, 2u32..=7).prop_flat_map(|(h, w)| (
            Just(h), Just(w),
            prop::collection::vec(-1.0f32..1.0, (h * w * 3) as usize),
        )),
        region_bits in prop::collection::vec(prop::bool::weighted(0.8), 49),
    ) {
        let Ok(map) = PatchFeatureMap::new(h, w, 3, data).unwrap().l2_normalized() else {
            return Ok(());
        };
        let region = BinaryMask::from_bools(h, w, &region_bits[..(h * w) as usize]).unwrap();
        prop_assume!(!region.is_empty());
        let schedule = ThresholdSchedule::new(vec![0.9, 0.8, 0.7, 0.6, 0.5]).unwrap();
        let levels = merge_levels(&map, &region, &schedule).unwrap();
        for level in &levels {
            let mut cover = BinaryMask::new(h, w).unwrap();
            for c in &level.components {
                prop_assert_eq!(c.intersection_area(&cover).unwrap(), 0);
                cover = cover.or(c).unwrap();
            }
            prop_assert_eq!(&cover, &region);
        }
        for (i, fine) in levels.iter().enumerate() {
            for coarse in &levels[i + 1..] {
                for c in &fine.components {
                    let holders = coarse
                        .components
                        .iter()
                        .filter(|k| c.is_subset_of(k).unwrap())
                        .count();
                    prop_assert_eq!(holders, 1);
                }
            }
        }
    }

    #[test]
    fn granularity_is_monotone_in_area(
        (lo, hi, a, b) in (1u64..10_000, 0u64..10_000).prop_flat_map(|(lo, span)| {
            let hi = lo + span;
            (Just(lo), Just(hi), lo..=hi, lo..=hi)
        })
    ) {
        let (a, b) = (a.min(b), a.max(b));
        let (ga, gb) = (granularity(a, lo, hi), granularity(b, lo, hi));
        prop_assert!(ga <= gb);
        prop_assert!((0.1..=1.0).contains(&ga) && (0.1..=1.0).contains(&gb));
        prop_assert_eq!(granularity(hi, lo, hi), 1.0);
    }

    #[test]
    fn fourier_norm_is_half_dim(g in 0.0f64..=1.0, seed in any::<u64>()) {
        let basis = FourierBasis::sample(128, 10.0, seed);
        let phi = fourier_encode(g, &basis);
        let norm: f64 = phi.iter().map(|v| v * v).sum();
        prop_assert!((norm - 64.0).abs() < 1e-9);
    }

    #[test]
    fn query_result_contains_first_positive_click(
        ms in masks_on(8, 8, 1..=5),
        gs in prop::collection::vec(0.1f64..=1.0, 5),
        clicks in prop::collection::vec((0u32..8, 0u32..8, any::<bool>()), 1..=4),
        g in 0.1f64..=1.0,
    ) {
        let gm = |m: &BinaryMask, g: f64| GranularMask {
            mask: m.to_rle(),
            granularity: g,
            confidence: 1.0,
            level: Level::Conquer,
            instance_id: 0,
        };
        let labels = PseudoLabelSet {
            image_id: "p".into(),
            height: 8,
            width: 8,
            hierarchies: vec![MaskHierarchy {
                instance_id: 0,
                root: gm(&ms[0], 1.0),
                children: ms[1..].iter().zip(&gs).map(|(m, &g)| gm(m, g)).collect(),
            }],
        };
        let index = QueryIndex::new(labels).unwrap();
        let (x, y, _) = clicks[0];
        let extra: Vec<Click> = clicks[1..]
            .iter()
            .map(|&(x, y, pos)| if pos { Click::positive(x, y) } else { Click::negative(x, y) })
            .collect();
        let hit = query_mask(&index, x, y, g, &extra).unwrap();
        let containing = ms.iter().any(|m| m.get(y, x));
        prop_assert_eq!(hit.is_some(), containing);
        if let Some(hit) = hit {
            prop_assert!(hit.binary.get(y, x));
            prop_assert_eq!(&hit.mask.mask.decode().unwrap(), hit.binary);
        }
    }

    #[test]
    fn greedy_recall_is_stable_and_bounded_by_optimal(
        (props, conf, perm, gts) in (1usize..=6).prop_flat_map(|n| (
            masks_on(5, 5, n..=n),
            distinct_confidences(n),
            Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
            masks_on(5, 5, 1..=4),
        )),
    ) {
        let a = scored(props, conf);
        let b: Vec<ScoredMask> = perm.iter().map(|&i| a[i].clone()).collect();
        let greedy = greedy_matches(&a, &gts, 100).unwrap();
        prop_assert_eq!(greedy, greedy_matches(&b, &gts, 100).unwrap());
        let ar = average_recall(&a, &gts, 100).unwrap();
        prop_assert_eq!(ar, average_recall(&b, &gts, 100).unwrap());
        prop_assert!((0.0..=1.0).contains(&ar));
        for (k, t) in recall_thresholds().into_iter().enumerate() {
            let edges: Vec<Vec<bool>> = a
                .iter()
                .map(|p| gts.iter().map(|g| naive_iou(&p.mask, g) >= t).collect())
                .collect();
            let optimal = best_matching(&edges, 0, &mut vec![false; gts.len()]);
            prop_assert!(greedy[k] <= optimal, "t={} greedy {} optimal {}", t, greedy[k], optimal);
        }
    }
}
