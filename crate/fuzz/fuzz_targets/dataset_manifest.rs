#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(manifest) = dmsm::data::DatasetManifest::from_json_bytes(data) {
        // Accepted manifests must satisfy their own invariants.
        manifest.validate().expect("accepted manifest must validate");
        let json = serde_json::to_vec(&manifest).expect("manifest must serialize");
        let again = dmsm::data::DatasetManifest::from_json_bytes(&json)
            .expect("serialized manifest must reparse");
        assert_eq!(manifest, again);
    }
});
