// Gated fusion of neighbouring frames and motion maps on one generated window.

use motionvod::autograd::Graph;
use motionvod::backbone::frame_to_tensor;
use motionvod::datagen::{generate_video, SceneConfig};
use motionvod::model::{Detector, ModelConfig, WindowInput};

pub fn run_example() -> motionvod::Result<()> {
    let scene = SceneConfig::default();
    let video = generate_video(&scene, 3)?;
    let input = WindowInput {
        frames: video.frames[2..7].iter().map(frame_to_tensor).collect(),
        gts: video.annotations[2..7].to_vec(),
        reference: 2,
    };

    let det = Detector::new(ModelConfig::default())?;
    let params = det.init_params(7);
    let mut g = Graph::with_params(&params);
    let (maps, reference) = det.backbone_maps(&mut g, &input)?;
    let s1 = det.stage_one(&mut g, maps, reference)?;

    println!("{} feature maps of shape {:?}", s1.maps.len(), g.shape(s1.maps[0]));
    for (i, pair) in s1.gates.iter().enumerate() {
        let r = g.value(pair.reference);
        let n = g.value(pair.neighbour);
        let worst = r.zip_map(n, |x, y| (x + y - 1.0).abs()).max_abs();
        println!("neighbour {i}: mean reference gate {:.3}, |A + A' - 1| <= {worst:.1e}", r.sum() / r.len() as f64);
    }
    println!("aggregated map {:?}", g.shape(s1.aggregated));
    for (i, &m) in s1.motion.iter().enumerate() {
        println!("motion map {i}: max |M| = {:.4}", g.value(m).max_abs());
    }
    println!("rpn scores {} anchors", g.shape(s1.rpn.logits)[0]);
    let props = det.proposals(&g, &s1, input.image_size(), 5);
    for (b, s) in props {
        println!("  proposal [{:.1}, {:.1}, {:.1}, {:.1}] objectness {s:.3}", b.x1, b.y1, b.x2, b.y2);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
