// Box-level features: cosine attention over pooled crops, displacement
// encoding of linked boxes, the motion GRU and the final detection head.

use motionvod::autograd::Graph;
use motionvod::boxes::BBox;
use motionvod::jtmg::{box_differences, cosine_weights, decode_detections, DetectionHead, Jtmg, JtmgConfig};
use motionvod::mtbr::LinkedProposal;
use motionvod::params::ParamStore;
use motionvod::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn run_example() -> motionvod::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (k, c, p) = (2, 8, 3);
    let cfg = JtmgConfig { visual_dim: 16, diff_dim: 8, gru_hidden: 6, head_dim: 16, tied_gru: false };
    let jtmg = Jtmg::new(c, 5, cfg.clone());
    let head = DetectionHead::new(cfg.visual_dim + cfg.diff_dim + cfg.motion_dim(), cfg.head_dim, 2);
    let mut params = ParamStore::new();
    jtmg.init_visual(&mut params, &mut rng);
    jtmg.init_temporal(&mut params, &mut rng);
    head.init(&mut params, &mut rng);

    let mut crop = || Tensor::from_fn(&[k, c, p, p], |_| rng.gen_range(-1.0..1.0));
    let aggregated_t = crop();
    let mut g = Graph::with_params(&params);
    let aggregated = g.input(aggregated_t.clone());
    // frame 2 is the reference crop itself, frame 4 its negation
    let visual: Vec<_> = (0..5)
        .map(|f| match f {
            2 => g.input(aggregated_t.clone()),
            4 => g.input(aggregated_t.map(|v| -v)),
            _ => g.input(crop()),
        })
        .collect();
    let motion: Vec<_> = (0..5).map(|_| g.input(crop())).collect();

    for (f, w) in cosine_weights(&mut g, aggregated, &visual).iter().enumerate() {
        println!("frame {f}: cosine weights {:?}", g.value(*w).data().iter().map(|v| (v * 1e3).round() / 1e3).collect::<Vec<_>>());
    }

    let linked: Vec<LinkedProposal> = (0..k)
        .map(|i| {
            let boxes: Vec<BBox> = (0..5).map(|f| BBox::new(10.0 + 3.0 * f as f64, 20.0 + i as f64 * 30.0, 40.0 + 3.0 * f as f64, 50.0 + i as f64 * 30.0)).collect();
            LinkedProposal { anchor: boxes[2], boxes }
        })
        .collect();
    let p_t = box_differences(&linked, 2);
    println!("normalised displacements of proposal 0: {:?}", &p_t.data()[..20]);

    let g_visual = jtmg.box_level_aggregate(&mut g, aggregated, &visual);
    let g_diff = jtmg.box_diff_encode(&mut g, &linked, 2);
    let g_motion = jtmg.motion_gru(&mut g, &motion);
    println!("features: visual {:?}, displacement {:?}, motion {:?}", g.shape(g_visual), g.shape(g_diff), g.shape(g_motion));

    let (logits, deltas) = head.forward(&mut g, &[g_visual, g_diff, g_motion]);
    let refined: Vec<BBox> = linked.iter().map(|l| l.boxes[2]).collect();
    for d in decode_detections(g.value(logits), g.value(deltas), &refined, (96.0, 96.0)) {
        println!("class {} score {:.3}, probs {:?}", d.class_id, d.score, d.probs.iter().map(|v| (v * 1e3).round() / 1e3).collect::<Vec<_>>());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
