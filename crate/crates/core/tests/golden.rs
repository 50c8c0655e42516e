use std::fs;
use std::path::Path;

use caqr::harness::{golden_configs, golden_file_name, run_traced};
use caqr::sim::Trace;

#[test]
fn traces_match_fixtures() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    for c in golden_configs() {
        let name = golden_file_name(&c);
        let stored = fs::read_to_string(dir.join(&name)).unwrap_or_else(|e| panic!("{name}: {e}"));
        let trace = run_traced(&c).unwrap().trace;
        assert_eq!(trace.to_json(&c.costs).unwrap(), stored, "{name} drifted");
        let parsed = Trace::from_json(&stored).unwrap();
        assert_eq!(parsed.critical_path_counts(), trace.critical_path_counts(), "{name}");
    }
}
