use gclab_core::guidance::{encode_edge, encode_panoptic, encode_semantic, EDGE_HIGH, EDGE_LOW};
use gclab_core::{Grid, GuidanceKind, InstanceMap, RgbImage, SemanticMap};
use proptest::prelude::*;

fn step_image(h: usize, w: usize, col: usize, left: f32, right: f32) -> RgbImage {
    RgbImage::from_fn(h, w, |_, c| if c < col { [left; 3] } else { [right; 3] })
}

#[test]
fn vertical_step_edges_hug_the_step() {
    for col in [1, 5, 17, 30] {
        let img = step_image(24, 32, col, -0.6, 0.6);
        // luma jump 1.2; Sobel |gx| = 4 · 1.2 on the two columns meeting at the step
        let expected_mag = 4.0 * 1.2f32;
        assert!(expected_mag >= EDGE_HIGH);
        let e = encode_edge(&img, EDGE_LOW, EDGE_HIGH).unwrap();
        assert_eq!(e.channels(), 1);
        for r in 0..24 {
            for c in 0..32 {
                let want = c + 1 == col || c == col;
                assert_eq!(e.get(0, r, c) == 1.0, want, "col {col} pixel ({r}, {c})");
            }
        }
    }
}

#[test]
fn weak_steps_below_the_low_threshold_leave_no_edges() {
    let img = step_image(16, 16, 8, 0.0, 0.05);
    let e = encode_edge(&img, EDGE_LOW, EDGE_HIGH).unwrap();
    assert!(e.data().iter().all(|&v| v == 0.0));
}

fn scan_boundary(ids: &Grid<u32>) -> Vec<u8> {
    let (h, w) = ids.shape();
    let mut out = vec![0u8; h * w];
    for r in 0..h {
        for c in 0..w {
            let me = ids.get(r, c);
            let neighbours = [(r.wrapping_sub(1), c), (r + 1, c), (r, c.wrapping_sub(1)), (r, c + 1)];
            for (rr, cc) in neighbours {
                if rr < h && cc < w && ids.get(rr, cc) != me {
                    out[r * w + c] = 1;
                }
            }
        }
    }
    out
}

#[test]
fn split_instances_mark_the_two_adjacent_columns() {
    let (h, w, col) = (10, 12, 7);
    let inst = InstanceMap(Grid::from_fn(h, w, |_, c| if c < col { 1 } else { 2 }));
    let sem = SemanticMap::new(Grid::filled(h, w, 1u16), 3).unwrap();
    let g = encode_panoptic(&sem, &inst, 3).unwrap();
    let boundary = g.boundary_plane().unwrap();
    for r in 0..h {
        for c in 0..w {
            assert_eq!(boundary[r * w + c] == 1.0, c == col - 1 || c == col);
        }
    }
    assert_eq!(boundary.iter().map(|&v| v as u8).collect::<Vec<_>>(), scan_boundary(&inst.0));
}

#[test]
fn no_instances_means_no_boundary() {
    let sem = SemanticMap::new(Grid::from_fn(8, 8, |r, _| (r % 3) as u16), 3).unwrap();
    let g = encode_panoptic(&sem, &InstanceMap::empty(8, 8), 3).unwrap();
    assert!(g.boundary_plane().unwrap().iter().all(|&v| v == 0.0));
    assert_eq!(g.semantic_argmax().unwrap(), *sem.labels());
}

#[test]
fn class_index_at_k_is_rejected() {
    let labels = Grid::filled(4, 4, 3u16);
    let err = SemanticMap::new(labels, 3);
    assert!(err.is_err());
    let sem = SemanticMap::new(Grid::filled(4, 4, 2u16), 3).unwrap();
    assert!(encode_semantic(&sem, 2).is_err());
}

fn map_strategy() -> impl Strategy<Value = (usize, usize, usize, Vec<u16>, Vec<u32>)> {
    (2usize..12, 2usize..12, 2usize..6).prop_flat_map(|(h, w, k)| {
        (
            Just(h),
            Just(w),
            Just(k),
            prop::collection::vec(0..k as u16, h * w),
            prop::collection::vec(0u32..4, h * w),
        )
    })
}

proptest! {
    #[test]
    fn panoptic_extends_semantic((h, w, k, labels, ids) in map_strategy()) {
        let sem = SemanticMap::new(Grid::from_vec(h, w, labels).unwrap(), k).unwrap();
        let inst = InstanceMap(Grid::from_vec(h, w, ids).unwrap());
        let s = encode_semantic(&sem, k).unwrap();
        let p = encode_panoptic(&sem, &inst, k).unwrap();
        s.check_invariants().unwrap();
        p.check_invariants().unwrap();
        prop_assert_eq!(p.kind(), GuidanceKind::Panoptic);
        prop_assert_eq!(p.channels(), k + 1);
        prop_assert_eq!(&p.data()[..k * h * w], s.data());
        prop_assert_eq!(s.semantic_argmax().unwrap(), sem.labels().clone());
        for r in 0..h {
            for c in 0..w {
                let sum: f32 = (0..k).map(|ch| s.get(ch, r, c)).sum();
                prop_assert_eq!(sum, 1.0);
                prop_assert_eq!(s.get(sem.labels().get(r, c) as usize, r, c), 1.0);
            }
        }
        let boundary: Vec<u8> = p.boundary_plane().unwrap().iter().map(|&v| v as u8).collect();
        prop_assert_eq!(boundary, scan_boundary(&inst.0));
    }

    #[test]
    fn edge_maps_are_binary_single_channel(h in 3usize..20, w in 3usize..20, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let img = RgbImage::new(h, w, (0..3 * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let e = encode_edge(&img, EDGE_LOW, EDGE_HIGH).unwrap();
        prop_assert_eq!(e.channels(), 1);
        prop_assert_eq!(e.shape(), (h, w));
        prop_assert!(e.data().iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert_eq!(e, encode_edge(&img, EDGE_LOW, EDGE_HIGH).unwrap());
    }
}
