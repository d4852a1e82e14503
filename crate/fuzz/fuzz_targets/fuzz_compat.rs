#![no_main]

use classext::similarity::CompatibilityMap;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(map) = CompatibilityMap::from_slice(data) else {
        return;
    };

    assert!(map.threshold() > 0.0 && map.threshold().is_finite());
    for (ext, bases) in map.entries() {
        assert!(!ext.is_empty());
        for pair in bases.windows(2) {
            assert!(
                pair[0].distance < pair[1].distance
                    || (pair[0].distance == pair[1].distance && pair[0].base < pair[1].base),
                "entry not sorted"
            );
        }
        for c in bases {
            assert!(c.distance >= 0.0 && c.distance < map.threshold());
            assert!(map.is_compatible_base(&c.base));
            // base and extension sets stay disjoint
            assert!(!map.entries().contains_key(&c.base));
        }
    }

    let json = map.to_json_string();
    let reloaded = CompatibilityMap::from_slice(json.as_bytes()).unwrap();
    assert_eq!(map, reloaded);
});
