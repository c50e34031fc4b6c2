#![no_main]

use libfuzzer_sys::fuzz_target;

// The binary checkpoint container: arbitrary bytes must either decode into a
// structurally valid model or fail cleanly, never panic or over-allocate
// (the header's architecture is validated before any tensor is built).
fuzz_target!(|data: &[u8]| {
    if let Ok(loaded) = dmsm::trainer::checkpoint_from_bytes(data) {
        assert!(loaded.model.param_count() <= 4_000_000);
        assert_eq!(loaded.adam_m.len(), loaded.adam_v.len());
        // A decoded checkpoint must re-encode; the round trip preserves the
        // parameter payload bit for bit.
        let mut adam = dmsm::trainer::Adam::new(1e-3, 0.9, 0.999, &loaded.model);
        adam.restore(loaded.adam_t, loaded.adam_m.clone(), loaded.adam_v.clone());
        let bytes =
            dmsm::trainer::checkpoint_to_bytes(&loaded.model, &adam, loaded.step, &loaded.schedule)
                .expect("re-encode");
        let again = dmsm::trainer::checkpoint_from_bytes(&bytes).expect("re-decode");
        for ((_, a), (_, b)) in loaded
            .model
            .collect_params()
            .iter()
            .zip(again.model.collect_params())
        {
            assert_eq!(a.data, b.data);
        }
    }
});
