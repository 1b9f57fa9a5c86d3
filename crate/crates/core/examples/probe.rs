use mvrefine::dataset::SequenceDataset;
use mvrefine::eval::{average_precision, boxes_from_labels, DifficultyRules, EvalConfig};
use mvrefine::kitti::{label_to_pose, parse_labels};
use mvrefine::losses::{LossWeights, Priors};
use mvrefine::motion::TrackConfig;
use mvrefine::refine::{refine_sequence, RefineConfig};
use mvrefine::synth::{example_scene, generate, perturb_dataset};
use std::time::Instant;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn center_errors(dir: &std::path::Path, label_dir: &std::path::Path, frames: usize) -> Vec<f64> {
    let mut errors = Vec::new();
    for f in 0..frames {
        let gt_path = dir.join(format!("labels/{f:06}.txt"));
        let pred_path = label_dir.join(format!("{f:06}.txt"));
        if !gt_path.exists() || !pred_path.exists() { continue; }
        let gts = parse_labels(&gt_path).unwrap();
        let preds = parse_labels(&pred_path).unwrap();
        for p in &preds {
            let pp = label_to_pose(p).unwrap();
            let best = gts.iter().filter_map(|g| {
                let gp = label_to_pose(g).ok()?;
                Some((gp.t_c - pp.t_c).norm())
            }).fold(f64::INFINITY, f64::min);
            if best < 8.0 { errors.push(best); }
        }
    }
    errors
}

fn bev_ap(dir: &std::path::Path, label_dir: &std::path::Path, frames: usize) -> Option<f64> {
    let rules = DifficultyRules::default();
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for f in 0..frames {
        let gt_path = dir.join(format!("labels/{f:06}.txt"));
        let pred_path = label_dir.join(format!("{f:06}.txt"));
        if !gt_path.exists() || !pred_path.exists() { continue; }
        let (_, g) = boxes_from_labels(f, &parse_labels(&gt_path).unwrap(), &rules);
        let (d, _) = boxes_from_labels(f, &parse_labels(&pred_path).unwrap(), &rules);
        gts.extend(g);
        dets.extend(d);
    }
    let table = average_precision(&dets, &gts, &EvalConfig::default());
    table.bev[2] // hard difficulty: all counted gt
}

fn main() {
    let seeds: Vec<u64> = std::env::args().skip(1).map(|s| s.parse().unwrap()).collect();
    for seed in seeds {
        let t0 = Instant::now();
        let dir = tempfile::tempdir().unwrap();
        let spec = example_scene(seed);
        generate(&spec, dir.path()).unwrap();
        perturb_dataset(dir.path(), &spec.noise, seed).unwrap();
        let dataset = SequenceDataset::load(dir.path()).unwrap();
        let out = dir.path().join("refined");
        let track_cfg = TrackConfig { seed, gate_radius: 8.0, motion_threshold: 0.4, ransac_inlier_dist: 5.0, ..TrackConfig::default() };
        let report = refine_sequence(
            &dataset, &track_cfg, &RefineConfig::default(), &LossWeights::default(),
            &Priors::default(), None, &out, None,
        ).unwrap();
        let noisy = center_errors(dir.path(), &dir.path().join("detections"), spec.frames);
        let refined = center_errors(dir.path(), &out, spec.frames);
        let ap_noisy = bev_ap(dir.path(), &dir.path().join("detections"), spec.frames);
        let ap_refined = bev_ap(dir.path(), &out, spec.frames);
        println!(
            "seed {seed}: tracks={} ratio={:.3} ap_noisy={:?} ap_refined={:?} time={:.1}s",
            report.tracks,
            median(refined) / median(noisy),
            ap_noisy.map(|x| (x * 1000.0).round() / 1000.0),
            ap_refined.map(|x| (x * 1000.0).round() / 1000.0),
            t0.elapsed().as_secs_f64()
        );
    }
}
