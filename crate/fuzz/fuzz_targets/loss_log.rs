#![no_main]

use libfuzzer_sys::fuzz_target;

// Loss logs are line-delimited JSON consumed by tooling (resume inspection,
// plots); the record parser must tolerate arbitrary lines.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    for line in text.lines() {
        if let Ok(rec) = serde_json::from_str::<dmsm::trainer::LossLogRecord>(line) {
            let json = serde_json::to_string(&rec).expect("record must serialize");
            // NaN/Inf serialize as null and will not reparse; finite records
            // must round-trip.
            if [rec.l_dm, rec.l_ic, rec.l_kc, rec.total].iter().all(|v| v.is_finite()) {
                let again: dmsm::trainer::LossLogRecord =
                    serde_json::from_str(&json).expect("finite record must reparse");
                assert_eq!(again.step, rec.step);
            }
        }
    }
});
