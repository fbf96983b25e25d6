mod oracles;

use kipa_core::cc3d::{connected_components, max_component, Connectivity};
use oracles::{flood_fill_labels, mirror, random_mask, same_partition};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn conn(six: bool) -> Connectivity {
    if six {
        Connectivity::Six
    } else {
        Connectivity::TwentySix
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn labels_match_flood_fill(seed: u64, shape in prop::array::uniform3(1usize..10), density in 0.0f64..1.0, six: bool) {
        let m = random_mask(&mut ChaCha8Rng::seed_from_u64(seed), shape, density);
        let set = connected_components(&m, conn(six));
        let oracle = flood_fill_labels(&m, six);
        prop_assert_eq!(set.label_map.data(), &oracle[..]);
        for c in &set.components {
            prop_assert_eq!(c.size, oracle.iter().filter(|&&l| l == c.id).count());
        }
    }

    #[test]
    fn mirroring_commutes_with_labeling(seed: u64, shape in prop::array::uniform3(1usize..9), axis in 0usize..3, six: bool) {
        let m = random_mask(&mut ChaCha8Rng::seed_from_u64(seed), shape, 0.45);
        let a = mirror(&connected_components(&m, conn(six)).label_map, axis);
        let b = connected_components(&mirror(&m, axis), conn(six)).label_map;
        prop_assert!(same_partition(a.data(), b.data()));
    }

    #[test]
    fn max_component_is_connected_subset(seed: u64, shape in prop::array::uniform3(1usize..9), six: bool) {
        let m = random_mask(&mut ChaCha8Rng::seed_from_u64(seed), shape, 0.4);
        let k = max_component(&m, conn(six));
        prop_assert!(k.data().iter().zip(m.data()).all(|(&a, &b)| !a || b));
        let labels = flood_fill_labels(&k, six);
        prop_assert!(labels.iter().all(|&l| l <= 1));
        let largest = connected_components(&m, conn(six)).components.iter().map(|c| c.size).max().unwrap_or(0);
        prop_assert_eq!(k.data().iter().filter(|&&v| v).count(), largest);
    }
}
