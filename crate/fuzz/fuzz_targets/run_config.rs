#![no_main]

use libfuzzer_sys::fuzz_target;

// The run configuration is the primary user-supplied input; parsing must
// never panic, and anything accepted must survive a serialize/reparse cycle.
fuzz_target!(|data: &[u8]| {
    if let Ok(cfg) = dmsm::config::RunConfig::from_json_bytes(data) {
        let json = cfg.to_pretty_json().expect("accepted config must serialize");
        let again = dmsm::config::RunConfig::from_json_bytes(json.as_bytes())
            .expect("serialized config must reparse");
        assert_eq!(cfg, again);
    }
});
