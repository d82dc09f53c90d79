use std::collections::HashSet;

use proptest::prelude::*;
use zoomloc::pyramid::{read_pyramid, write_pyramid, PatchRef, PyramidImage, Raster};

/// Parent window, zoom difference and the top level of a pyramid tall
/// enough to hold every child.
fn window() -> impl Strategy<Value = (PatchRef, usize, usize)> {
    (0usize..3, 1usize..4, 0usize..3, 1usize..40, 1usize..40, 0usize..64, 0usize..64).prop_map(
        |(level, n, extra, h, w, row, col)| (PatchRef::new(level, row, col, h, w), n, level + n + extra),
    )
}

fn area(p: &PatchRef) -> usize {
    p.height * p.width
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn children_tile_the_child_region((p, n, top) in window()) {
        let kids = p.children_set(n, top).unwrap();
        prop_assert_eq!(kids.len(), 1 << (2 * n));
        let region = p.child_region(n, top).unwrap();
        prop_assert_eq!(area(&region), kids.iter().map(area).sum::<usize>());

        let mut covered = HashSet::new();
        for (i, c) in kids.iter().enumerate() {
            prop_assert_eq!(c.level, p.level + n);
            prop_assert_eq!((c.height, c.width), (p.height, p.width));
            prop_assert!(c.row >= region.row && c.row + c.height <= region.row + region.height);
            prop_assert!(c.col >= region.col && c.col + c.width <= region.col + region.width);
            prop_assert_eq!(p.child_index(c, n), Some(i));
            // corners are enough: equal-size windows on a lattice overlap
            // iff they share the top-left corner
            prop_assert!(covered.insert((c.row, c.col)));
        }
    }

    #[test]
    fn zooms_compose((p, n, top) in window(), a in 1usize..3) {
        let (n, top) = (n + 1, top + 1);
        let a = a.min(n - 1);
        let b = n - a;
        let direct: HashSet<PatchRef> = p.children_set(n, top).unwrap().into_iter().collect();
        let mut staged = HashSet::new();
        for c in p.children_set(a, top).unwrap() {
            for g in c.children_set(b, top).unwrap() {
                prop_assert!(staged.insert(g));
            }
        }
        prop_assert_eq!(&staged, &direct);
        let two_step = p.child_region(a, top).unwrap().child_region(b, top).unwrap();
        prop_assert_eq!(two_step, p.child_region(n, top).unwrap());
    }

    #[test]
    fn out_of_range_levels_fail((p, n, _top) in window()) {
        prop_assert!(p.children_set(n, p.level + n - 1).is_err());
    }

    #[test]
    fn foreign_windows_have_no_index((p, n, top) in window(), dr in 1usize..40) {
        let kid = p.children_set(n, top).unwrap()[0];
        if dr % p.height != 0 {
            let shifted = PatchRef { row: kid.row + dr, ..kid };
            prop_assert!(p.child_index(&shifted, n).is_none());
        }
        let outside = PatchRef { row: kid.row + p.height * (1 << n), ..kid };
        prop_assert!(p.child_index(&outside, n).is_none());
        let wrong_level = PatchRef { level: kid.level + 1, ..kid };
        prop_assert!(p.child_index(&wrong_level, n).is_none());
    }
}

fn pyramid_from_bytes(levels: usize, bw: usize, bh: usize, seed: u64) -> PyramidImage<f32> {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let rasters = (0..levels)
        .map(|t| {
            let (w, h) = (bw << t, bh << t);
            let bytes: Vec<u8> = (0..w * h * 3)
                .map(|_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    (state >> 56) as u8
                })
                .collect();
            Raster::from_u8(w, h, 3, &bytes).unwrap()
        })
        .collect();
    PyramidImage::new(rasters).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn pyramid_io_round_trips(levels in 3usize..5, bw in 1usize..5, bh in 1usize..5, seed in any::<u64>()) {
        let img = pyramid_from_bytes(levels, bw, bh, seed);
        let dir = tempfile::tempdir().unwrap();
        write_pyramid(&img, dir.path()).unwrap();
        let back: PyramidImage<f32> = read_pyramid(dir.path()).unwrap();
        prop_assert_eq!(back, img);
    }
}

#[test]
fn pooled_pyramid_round_trips_after_quantisation() {
    let top = pyramid_from_bytes(3, 8, 8, 3).levels()[2].clone();
    let img = PyramidImage::from_top(top, 3).unwrap().quantized();
    let dir = tempfile::tempdir().unwrap();
    write_pyramid(&img, dir.path()).unwrap();
    let back: PyramidImage<f64> = read_pyramid(dir.path()).unwrap();
    assert_eq!(back.cast::<f32>(), img);
}

#[test]
fn truncated_level_is_rejected() {
    let img = pyramid_from_bytes(3, 2, 2, 9);
    let dir = tempfile::tempdir().unwrap();
    write_pyramid(&img, dir.path()).unwrap();
    let path = dir.path().join("level_2.ppm");
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    assert!(read_pyramid::<f32>(dir.path()).is_err());
}
