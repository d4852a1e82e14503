#![no_main]

use classext::mock::MockScenario;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(scenario) = MockScenario::from_slice(data) else {
        return;
    };

    // Whatever parsed must already be valid, and validity is stable.
    scenario.validate().expect("accepted scenario revalidates");

    let (width, height) = scenario.frame_size;
    assert!(width > 0 && height > 0);
    assert!((0.0..=1.0).contains(&scenario.classifier_accuracy));
    for entry in &scenario.script {
        assert!(entry.frame < scenario.frame_count);
        assert!((0.0..=1.0).contains(&entry.confidence));
        entry
            .bbox
            .validate_within(width, height)
            .expect("scripted box fits the frame");
        let frame = scenario.frame(entry.frame).expect("frame in range");
        assert_eq!(frame.index, entry.frame);
    }

    // serialization round-trips to an equal scenario
    let json = serde_json::to_vec(&scenario).unwrap();
    let reloaded = MockScenario::from_slice(&json).unwrap();
    assert_eq!(scenario, reloaded);
});
