//! Optional toy pretraining of the detection head from zero weights, compared
//! with the hand-set readout.

use coopadapt::detector::{decode_and_nms, toy_pretrain, DecodeConfig, DetectionHead, PretrainConfig};
use coopadapt::eval::{ap_suite, FrameDetection, FrameTruth};
use coopadapt::world::{generate_scene, render_canonical, Grid, WorldProfile};

fn main() -> anyhow::Result<()> {
    let grid = Grid { channels: 16, height: 32, width: 32, ..Grid::default() };
    let world = WorldProfile { extent: 12.0, neighbors: 0, ego_blind: 0.0, ego_partial: 0.0, ego_only: 0.0, ..WorldProfile::default() };
    let scenes = (0..150).map(|s| generate_scene(s, &world)).collect::<Result<Vec<_>, _>>()?;
    let (train, test) = scenes.split_at(100);
    let zero = DetectionHead::zeros(grid.channels);
    let (trained, report) = toy_pretrain(&zero, train, &grid, &PretrainConfig::default())?;
    println!("epoch losses {:?}", report.epoch_losses);
    let dc = DecodeConfig::default();
    for (name, head) in [("hand-set", DetectionHead::hand_set(grid.channels)?), ("pretrained", trained)] {
        let cells = head.anchor_cells(grid.height, grid.width);
        let (mut dets, mut truth) = (Vec::new(), Vec::new());
        for (frame, s) in test.iter().enumerate() {
            let f = render_canonical(s, 0, &grid)?;
            for d in decode_and_nms(&head.predict(&f)?, &grid, &cells, &dc) {
                dets.push(FrameDetection { frame, bbox: d.bbox, score: d.score });
            }
            truth.extend(s.boxes.iter().map(|&bbox| FrameTruth { frame, bbox }));
        }
        println!("{name:10} {:?}", ap_suite(&dets, &truth));
    }
    Ok(())
}
