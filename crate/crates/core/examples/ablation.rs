// Train several variants under one seed and print the comparison table.
//
// `cargo run --release --example ablation -- a,c,e,f`

use motionvod::config::PipelineConfig;
use motionvod::datagen::generate_dataset;
use motionvod::model::Variant;
use motionvod::pipeline::{ablate, split};
use motionvod::train::prepare_all;

pub fn run_example() -> motionvod::Result<()> {
    let list = std::env::args().nth(1).unwrap_or_else(|| "a,e,f".into());
    let variants = Variant::parse_list(&list)?;
    let mut cfg = PipelineConfig::tiny();
    cfg.train.epochs = 1;
    cfg.train.val_every = 0;
    let videos = prepare_all(&generate_dataset(&cfg.data, cfg.num_videos)?);
    let (tr, val) = split(&videos, cfg.train.val_fraction);
    let table = ablate(&cfg, &variants, tr, val, None, false);
    print!("{}", table.to_markdown());
    for r in &table.rows {
        println!("({}) trained in {:.1}s", r.variant, r.train_seconds);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
