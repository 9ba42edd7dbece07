#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(g) = fedais::graph::parse_graph(data) {
        // a graph that parses must survive a round trip
        let text = serde_json::to_vec(&g.to_file_format()).unwrap();
        assert_eq!(fedais::graph::parse_graph(&text).unwrap(), g);
    }
});
