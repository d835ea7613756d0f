// Loss breakdown for one training window of a small model, and a
// finite-difference check of its parameter gradients.

use motionvod::autograd::Graph;
use motionvod::backbone::BackboneConfig;
use motionvod::boxes::BBox;
use motionvod::datagen::GroundTruthObject;
use motionvod::gradcheck::{check_params, Tolerance};
use motionvod::jtmg::JtmgConfig;
use motionvod::model::{Detector, ModelConfig, Variant, WindowInput};
use motionvod::mtbr::TbocConfig;
use motionvod::tensor::Tensor;
use motionvod::tg_rpn::AnchorConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn run_example() -> motionvod::Result<()> {
    let cfg = ModelConfig {
        variant: Variant::E,
        backbone: BackboneConfig { channels: [4, 4, 8, 8], strides: [2, 2, 1, 1], groups: 2 },
        gate_hidden: 4,
        anchors: AnchorConfig { scales: vec![6.0, 10.0], ratios: vec![1.0] },
        tboc: TbocConfig { pooled: 2, hidden: 6 },
        jtmg: JtmgConfig { visual_dim: 6, diff_dim: 4, gru_hidden: 3, head_dim: 6, tied_gru: false },
        ..ModelConfig::default()
    };
    let det = Detector::new(cfg)?;
    let mut params = det.init_params(3);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (_, t) in params.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.05..0.05));
    }
    println!("{} parameter tensors, {} scalars", params.len(), params.num_scalars());

    let input = WindowInput {
        frames: (0..5).map(|_| Tensor::from_fn(&[3, 16, 16], |_| rng.gen_range(-1.0..1.0))).collect(),
        gts: (0..5)
            .map(|f| {
                let x = 2.0 + f as f64;
                vec![GroundTruthObject { track_id: 0, class_id: 1, bbox: BBox::new(x, 3.0, x + 8.0, 11.0), occluded: false, blur_level: 0.0 }]
            })
            .collect(),
        reference: 2,
    };

    let mut g = Graph::with_params(&params);
    let (loss, report, plan) = det.loss(&mut g, &input, None, &mut ChaCha8Rng::seed_from_u64(1))?;
    println!(
        "L_rpn {:.4} (cls {:.4}, reg {:.4}), L_ref {:.4}, L_det {:.4}, L_total {:.4}",
        report.l_rpn, report.rpn_cls, report.rpn_reg, report.l_ref, report.l_det, report.l_total
    );
    println!("refinement positives per frame: {:?}", report.n_pos_per_frame);
    let grads = g.backward(loss).params(&g);
    let norm: f64 = grads.values().flat_map(|t| t.data().iter()).map(|v| v * v).sum::<f64>().sqrt();
    println!("gradient norm {norm:.4}");

    // the plan freezes sampling and linking so the loss is a smooth function of the parameters
    let check = check_params(
        &params,
        |g| det.loss(g, &input, Some(&plan), &mut ChaCha8Rng::seed_from_u64(0)).unwrap().0,
        Some(2),
        Tolerance::default(),
    );
    println!("gradient check: {} probes, max abs error {:.2e}, passed {}", check.checked, check.max_abs_err, check.passed());
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
