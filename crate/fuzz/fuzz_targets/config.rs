#![no_main]

use libfuzzer_sys::fuzz_target;
use sctnet::io::config::{apply_override, parse_table};
use sctnet::io::RunConfig;

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    // first line doubles as a `--set` override
    let (head, body) = text.split_once('\n').unwrap_or((&text, ""));
    if let Ok(cfg) = RunConfig::parse(body, &[head.to_string()]) {
        assert_eq!(RunConfig::parse(&cfg.to_toml(), &[]).unwrap(), cfg);
    }
    let mut table = parse_table("").unwrap();
    let _ = apply_override(&mut table, head);
});
