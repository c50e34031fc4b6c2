//! Shared acceptance-suite plumbing: per-criterion PASS/FAIL reporting that
//! prints every sub-check before panicking on the failures.

pub struct Criterion {
    number: u32,
    name: &'static str,
    failures: Vec<String>,
}

impl Criterion {
    pub fn new(number: u32, name: &'static str) -> Self {
        Self { number, name, failures: Vec::new() }
    }

    pub fn check(&mut self, what: &str, ok: bool, detail: String) {
        let tag = if ok { "PASS" } else { "FAIL" };
        let suffix = if detail.is_empty() { String::new() } else { format!(" [{detail}]") };
        println!("[{tag}] criterion {}: {} - {what}{suffix}", self.number, self.name);
        if !ok {
            self.failures.push(format!("{what}{suffix}"));
        }
    }

    pub fn finish(self) {
        if !self.failures.is_empty() {
            panic!(
                "criterion {} ({}) failed: {}",
                self.number,
                self.name,
                self.failures.join("; ")
            );
        }
    }
}
