//! Template topologies pinned against checked-in records. Regenerate with
//! `BSPRUNE_BLESS=1 cargo test -p bsprune --test golden`.

use std::path::PathBuf;

use bsprune::decomposition::decompose_all;
use bsprune::graph::{build_template, GraphRecord, NetGraph, Template, WeightInit};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(format!("{name}.json"))
}

fn check(name: &str, record: &GraphRecord) {
    let path = fixture(name);
    if std::env::var_os("BSPRUNE_BLESS").is_some() {
        std::fs::write(&path, serde_json::to_string_pretty(record).unwrap() + "\n").unwrap();
        return;
    }
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let expected: GraphRecord = serde_json::from_str(&text).unwrap();
    assert_eq!(&expected, record, "{name} topology changed");
}

#[test]
fn templates_match_fixtures() {
    for t in Template::ALL {
        let g: NetGraph = build_template(t, t.default_input(), 10, WeightInit::ShapeOnly).unwrap();
        check(t.name(), &g.to_record().0);
    }
}

#[test]
fn decomposed_tiny_templates_match_fixtures() {
    for t in [Template::TinyVgg, Template::TinyResNet, Template::TinyDenseNet] {
        let g: NetGraph = build_template(t, t.default_input(), 10, WeightInit::ShapeOnly).unwrap();
        let d = decompose_all(&g, 1.0).unwrap();
        check(&format!("{}_decomposed", t.name()), &d.to_record().0);
    }
}
