// Score a detection dump with motion-split mAP, with and without sequence
// rescoring. The dump here is a noisy copy of the ground truth.

use motionvod::boxes::BBox;
use motionvod::datagen::{generate_dataset, SceneConfig};
use motionvod::evalkit::{evaluate, gt_records, motion_split, seq_nms_all, DetectionRecord, EvalConfig, MotionBucket, SeqNmsConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn run_example() -> motionvod::Result<()> {
    let scene = SceneConfig { frames_per_video: 8, ..SceneConfig::default() };
    let videos = generate_dataset(&scene, 6)?;
    let gts = gt_records(&videos, None);
    let buckets = motion_split(&gts, 2);
    for b in MotionBucket::ALL {
        println!("{b:?}: {} ground-truth boxes", buckets.iter().filter(|&&x| x == b).count());
    }

    // jittered hits with flickering scores, plus a few false alarms
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut dets = Vec::new();
    for g in &gts {
        let j = |r: &mut ChaCha8Rng| r.gen_range(-2.0..2.0);
        let b = g.bbox;
        let bbox = BBox::new(b.x1 + j(&mut rng), b.y1 + j(&mut rng), b.x2 + j(&mut rng), b.y2 + j(&mut rng));
        dets.push(DetectionRecord { video_id: g.video_id.clone(), frame: g.frame, class_id: g.class_id, score: rng.gen_range(0.2..1.0), bbox });
        if rng.gen_bool(0.3) {
            let x = rng.gen_range(0.0..70.0);
            let y = rng.gen_range(0.0..70.0);
            let bbox = BBox::new(x, y, x + 20.0, y + 20.0);
            dets.push(DetectionRecord { video_id: g.video_id.clone(), frame: g.frame, class_id: 0, score: rng.gen_range(0.3..0.9), bbox });
        }
    }

    let cfg = EvalConfig::default();
    let plain = evaluate(&dets, &gts, &gts, scene.num_classes, &cfg);
    let rescored = seq_nms_all(&dets, &SeqNmsConfig::default());
    let linked = evaluate(&rescored, &gts, &gts, scene.num_classes, &cfg);
    let f = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!("plain:   mAP {:.4}  slow {} medium {} fast {}", plain.map, f(plain.map_slow), f(plain.map_medium), f(plain.map_fast));
    println!("seq-nms: mAP {:.4}  slow {} medium {} fast {}", linked.map, f(linked.map_slow), f(linked.map_medium), f(linked.map_fast));
    println!("{} of {} detections survive rescoring", rescored.len(), dets.len());
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
