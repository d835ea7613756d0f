// Train the full temporal detector on a handful of tiny videos, write a
// checkpoint, resume from it, and evaluate the result.

use motionvod::checkpoint::Checkpoint;
use motionvod::config::PipelineConfig;
use motionvod::datagen::generate_dataset;
use motionvod::pipeline::{evaluate_checkpoint, split};
use motionvod::train::{prepare_all, train, TrainOptions};

pub fn run_example() -> motionvod::Result<()> {
    let cfg = PipelineConfig::tiny();
    let videos = prepare_all(&generate_dataset(&cfg.data, cfg.num_videos)?);
    let (tr, val) = split(&videos, cfg.train.val_fraction);
    println!("{} training and {} validation videos of {}x{}", tr.len(), val.len(), cfg.data.width, cfg.data.height);

    let dir = tempfile::tempdir().map_err(|e| motionvod::Error::io(std::env::temp_dir(), e))?;
    let out = dir.path().to_path_buf();
    let opts = TrainOptions { out_dir: Some(out.clone()), stop_after_epochs: Some(1), verbose: true, ..Default::default() };
    let first = train(&cfg, tr, val, opts)?;
    println!("stopped after epoch {} at step {}", first.checkpoint.epoch, first.checkpoint.iteration);

    let ck = Checkpoint::load(&out.join("checkpoint_epoch1.bin"))?;
    let opts = TrainOptions { out_dir: Some(out.clone()), resume: Some(ck), verbose: true, ..Default::default() };
    let rest = train(&cfg, tr, val, opts)?;
    for m in rest.metrics.iter().take(3) {
        println!("step {}: L_total {:.4}", m.iter, m.l_total);
    }

    let ck = Checkpoint::load(&out.join("checkpoint.bin"))?;
    let report = evaluate_checkpoint(&ck, val, false, &out.join("eval"))?;
    print!("{}", report.to_text());
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
