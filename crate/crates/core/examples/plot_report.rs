// Render an ablation table as a grouped bar chart (overall, slow, medium, fast).
//
// `cargo run --example plot_report -- table.json out.png`

use std::path::PathBuf;

use motionvod::model::Variant;
use motionvod::pipeline::{plot_file, write_json, AblationRow, AblationTable};

pub fn run_example() -> motionvod::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let dir = tempfile::tempdir().map_err(|e| motionvod::Error::io(std::env::temp_dir(), e))?;
    let (table_path, out) = match (args.get(1), args.get(2)) {
        (Some(t), Some(o)) => (PathBuf::from(t), PathBuf::from(o)),
        _ => {
            let row = |variant, map, slow, medium, fast| AblationRow {
                variant,
                map: Some(map),
                map_slow: Some(slow),
                map_medium: Some(medium),
                map_fast: Some(fast),
                train_seconds: 0.0,
                error: None,
            };
            let table = AblationTable {
                seed: 7,
                rows: vec![row(Variant::A, 0.37, 0.33, 0.18, 0.31), row(Variant::E, 0.59, 0.15, 0.30, 0.54)],
            };
            let p = dir.path().join("ablation.json");
            write_json(&p, &table)?;
            (p, dir.path().join("ablation.png"))
        }
    };
    plot_file(&table_path, &out)?;
    let img = image::open(&out).map_err(|e| motionvod::Error::Image { path: out.clone(), source: e })?;
    println!("wrote {} ({}x{})", out.display(), img.width(), img.height());
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
