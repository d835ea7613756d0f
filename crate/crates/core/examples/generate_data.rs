// Generate a small synthetic video set, write it to disk and read it back.
//
// `cargo run --example generate_data -- [out_dir]`

use std::path::PathBuf;

use motionvod::datagen::{generate_dataset, read_dataset, write_dataset, SceneConfig};

pub fn run_example() -> motionvod::Result<()> {
    let cfg = SceneConfig { frames_per_video: 8, ..SceneConfig::default() };
    let videos = generate_dataset(&cfg, 4)?;

    let tmp = tempfile::tempdir().map_err(|e| motionvod::Error::io(std::env::temp_dir(), e))?;
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| tmp.path().to_path_buf());
    let manifest = write_dataset(&videos, &out)?;
    println!("{} videos, {} frames written to {}", manifest.videos.len(), manifest.frame_files, out.display());

    for v in &videos {
        let objects: usize = v.annotations.iter().map(|a| a.len()).sum();
        let occluded = v.annotations.iter().flatten().filter(|o| o.occluded).count();
        let blurred = v.annotations.iter().flatten().filter(|o| o.blur_level > 0.0).count();
        println!("  {}: {} boxes ({occluded} occluded, {blurred} blurred)", v.video_id, objects);
    }
    let first = &videos[0].annotations[0];
    for o in first {
        let b = o.bbox;
        println!("  frame 0, track {} class {}: [{:.1}, {:.1}, {:.1}, {:.1}]", o.track_id, o.class_id, b.x1, b.y1, b.x2, b.y2);
    }

    let back = read_dataset(&out)?;
    assert_eq!(back, videos);
    println!("read back {} videos, identical to the generated ones", back.len());
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
