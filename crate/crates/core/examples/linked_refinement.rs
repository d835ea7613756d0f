// Link one anchor across a 5-frame window with the offset calibration head,
// then pool RoI features from every frame along the linked boxes.

use motionvod::autograd::Graph;
use motionvod::boxes::BBox;
use motionvod::mtbr::{pool_all, roi_align, Tboc, TbocConfig};
use motionvod::params::ParamStore;
use motionvod::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn run_example() -> motionvod::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (c, stride) = (8, 8);
    let tboc = Tboc::new(c, 2, TbocConfig { pooled: 3, hidden: 16 });
    let mut params = ParamStore::new();
    tboc.init(&mut params, &mut rng);

    // a bright blob drifting right by one cell per frame
    let maps: Vec<Tensor> = (0..5)
        .map(|f| Tensor::from_fn(&[c, 12, 12], |i| {
            let (y, x) = ((i / 12) % 12, i % 12);
            if (4..8).contains(&y) && (2 + f..6 + f).contains(&x) { 1.0 } else { 0.0 }
        }))
        .collect();
    let mut g = Graph::with_params(&params);
    let aware: Vec<_> = maps.iter().map(|m| g.input(m.clone())).collect();
    let anchors = [BBox::new(32.0, 32.0, 64.0, 64.0)];

    let pooled = roi_align(&mut g, aware[2], &anchors, stride, 3)?;
    println!("roi_align on the reference frame: {:?}", g.shape(pooled));

    let out = tboc.forward(&mut g, &aware, &anchors, stride)?;
    println!("class logits {:?}, {} per-frame offsets", g.shape(out.class_logits), out.deltas.len());
    let linked = out.link(&g, &anchors, (96.0, 96.0));
    for (f, b) in linked[0].boxes.iter().enumerate() {
        println!("  frame {f}: [{:.2}, {:.2}, {:.2}, {:.2}]", b.x1, b.y1, b.x2, b.y2);
    }

    let motion: Vec<_> = maps.iter().map(|m| g.input(m.map(|v| 0.1 * v))).collect();
    let bundle = pool_all(&mut g, aware[2], &aware, &motion, &linked, 2, stride, 3)?;
    println!(
        "bundle: aggregated {:?}, {} visual and {} motion crops",
        g.shape(bundle.aggregated),
        bundle.visual.len(),
        bundle.motion.len()
    );
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
