use std::path::Path;

use battsynth_core::data::{load_csv, sine_fade, CsvOptions};

/// Set `BATTSYNTH_REGEN_FIXTURE=1` to rewrite the shipped file.
#[test]
fn bundled_fixture_matches_generator() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/sine_fade.csv");
    let table = sine_fade(2000, 0);
    let mut buf = Vec::new();
    table.write_csv(&mut buf).unwrap();
    if std::env::var_os("BATTSYNTH_REGEN_FIXTURE").is_some() {
        std::fs::write(&path, &buf).unwrap();
    }
    assert_eq!(std::fs::read(&path).unwrap(), buf, "fixture is stale; regenerate it");
    let loaded = load_csv(&path, &CsvOptions::default()).unwrap();
    assert_eq!(loaded.len(), 2000);
    for (c, v) in table.columns() {
        assert_eq!(loaded.column(c).unwrap(), v, "{}", c.name());
    }
}
