// Box arithmetic: IoU, delta coding, NMS and anchor assignment.

use motionvod::boxes::{assign_targets, iou, nms, BBox, BoxCoder, Label};

pub fn run_example() -> motionvod::Result<()> {
    let a = BBox::new(10.0, 10.0, 30.0, 30.0);
    let b = BBox::new(20.0, 15.0, 40.0, 35.0);
    println!("iou(a, b) = {:.4}", iou(&a, &b));

    let coder = BoxCoder::REFINE;
    let d = coder.encode(&a, &b)?;
    println!("delta a -> b = {:?}", d.to_array());
    let back = coder.decode(&a, &d)?;
    println!("decoded      = {:?}", back.to_array());

    let scored = vec![
        (BBox::new(0.0, 0.0, 20.0, 20.0), 0.9),
        (BBox::new(2.0, 1.0, 21.0, 20.0), 0.8),
        (BBox::new(40.0, 40.0, 60.0, 60.0), 0.7),
        (BBox::new(41.0, 42.0, 60.0, 61.0), 0.95),
    ];
    println!("nms(0.5) keeps {:?}", nms(&scored, 0.5));

    let anchors: Vec<BBox> = (0..6).map(|i| BBox::new(i as f64 * 8.0, 8.0, i as f64 * 8.0 + 24.0, 32.0)).collect();
    let gts = [BBox::new(14.0, 6.0, 38.0, 30.0)];
    let r = assign_targets(&anchors, &gts, 0.7, 0.3);
    for (i, (l, m)) in r.labels.iter().zip(&r.max_iou).enumerate() {
        let tag = match l {
            Label::Positive => "positive",
            Label::Negative => "negative",
            Label::Ignore => "ignored",
        };
        println!("anchor {i}: best iou {m:.3} -> {tag}");
    }
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
