use proptest::prelude::*;

use umbra_core::mask::{shadow_rect, PatchGrid};
use umbra_core::scan::mas_order;
use umbra_core::ScanKind;

fn grid_strategy() -> impl Strategy<Value = PatchGrid> {
    (1usize..=16, 1usize..=16)
        .prop_flat_map(|(r, c)| (Just(r), Just(c), proptest::collection::vec(prop::bool::weighted(0.2), r * c)))
        .prop_map(|(r, c, cells)| PatchGrid::from_labels(r, c, 1, |y, x| cells[y * c + x]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn mas_order_is_a_valid_prefix_spiral(grid in grid_strategy()) {
        let path = mas_order(&grid).unwrap();
        let n = grid.rows() * grid.cols();
        let mut seen = vec![false; n];
        for &f in path.flat() {
            prop_assert!(!seen[f]);
            seen[f] = true;
        }
        prop_assert_eq!(path.len(), n);
        match shadow_rect(&grid) {
            Err(_) => prop_assert_eq!(path.kind(), ScanKind::Horizontal),
            Ok(rect) => {
                prop_assert_eq!(path.kind(), ScanKind::Mas);
                let prefix = &path.coords()[..rect.area()];
                prop_assert!(prefix.iter().all(|&p| rect.contains(p)));
                prop_assert!(prefix.windows(2).all(|w| w[0].manhattan(w[1]) == 1));
                prop_assert_eq!(prefix.last().copied(), path.start_b());
            }
        }
    }

    #[test]
    fn mas_order_is_deterministic(grid in grid_strategy()) {
        prop_assert_eq!(mas_order(&grid).unwrap(), mas_order(&grid.clone()).unwrap());
    }
}
