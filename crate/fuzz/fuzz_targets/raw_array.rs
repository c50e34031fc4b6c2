#![no_main]

use libfuzzer_sys::fuzz_target;

// Frame: sidecar JSON on the first line, raw payload after it. Exercises the
// complex64 / float32 / uint8 decoders against arbitrary sidecar+payload
// combinations.
fuzz_target!(|data: &[u8]| {
    let Some(split) = data.iter().position(|&b| b == b'\n') else {
        return;
    };
    let (meta_bytes, rest) = data.split_at(split);
    let payload = &rest[1..];
    let Ok(meta) = dmsm::data::ArrayMeta::from_json_bytes(meta_bytes) else {
        return;
    };
    match meta.dtype.as_str() {
        "complex64" => {
            if let Ok(img) = dmsm::data::decode_complex_payload(&meta, payload) {
                assert_eq!(img.as_slice().len(), meta.numel());
            }
        }
        "float32" => {
            if let Ok(values) = dmsm::data::decode_float_payload(&meta, payload) {
                assert_eq!(values.len(), meta.numel());
            }
        }
        "uint8" => {
            if let Ok(mask) = dmsm::data::decode_mask_payload(&meta, payload) {
                // Every accepted mask keeps its ACS region fully sampled.
                let acs = mask.acs_region();
                for y in acs.row0..acs.row1 {
                    for x in acs.col0..acs.col1 {
                        assert!(mask.is_sampled(y, x));
                    }
                }
            }
        }
        _ => unreachable!("validate() limits dtypes"),
    }
});
