#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(meta) = dmsm::data::ArrayMeta::from_json_bytes(data) {
        // Validation happened during parse; the element count must be small
        // enough that decoding cannot be asked to allocate absurd buffers.
        assert!(meta.numel() <= 1 << 28);
    }
});
