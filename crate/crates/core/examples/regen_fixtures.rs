//! Regenerates the committed fixture files from the seeded generators.
//! Run from the workspace root: `cargo run -p sumlm-core --example regen_fixtures`

use std::fs;
use std::path::Path;

use sumlm_core::corpus::save_jsonl;
use sumlm_core::fixture;

fn main() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures");
    let synthetic = root.join("synthetic");
    let stats = root.join("stats");
    fs::create_dir_all(&synthetic).expect("create fixtures/synthetic");
    fs::create_dir_all(&stats).expect("create fixtures/stats");

    let (train, validation, test) = fixture::synthetic_corpus(fixture::SHIPPED_SEED);
    save_jsonl(&train, &synthetic.join("train.jsonl")).unwrap();
    save_jsonl(&validation, &synthetic.join("validation.jsonl")).unwrap();
    save_jsonl(&test, &synthetic.join("test.jsonl")).unwrap();

    let generic = fixture::generic_corpus(fixture::SHIPPED_SEED);
    fs::write(synthetic.join("generic.txt"), generic.join("\n") + "\n").unwrap();

    save_jsonl(&fixture::stats_fixture(), &stats.join("train.jsonl")).unwrap();

    println!("fixtures regenerated under {}", root.display());
}
