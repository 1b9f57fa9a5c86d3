use mvrefine::dataset::SequenceDataset;
use mvrefine::motion::{build_tracks, MotionClass, TrackConfig};
use mvrefine::synth::{example_scene, generate, perturb_dataset, GroundTruthIndex};
use nalgebra::Vector3;

fn main() {
    for (gate, thresh, inlier) in [(3.0, 0.1, 0.5), (5.0, 0.4, 5.0), (8.0, 0.4, 5.0), (8.0, 0.4, 2.0)] {
        let (mut impure, mut total, mut st_wrong, mut st_total, mut mv_wrong, mut mv_total) =
            (0usize, 0usize, 0usize, 0usize, 0usize, 0usize);
        for seed in 1..=10u64 {
            let dir = tempfile::tempdir().unwrap();
            let spec = example_scene(seed);
            generate(&spec, dir.path()).unwrap();
            perturb_dataset(dir.path(), &spec.noise, seed).unwrap();
            let gt: GroundTruthIndex = serde_json::from_str(
                &std::fs::read_to_string(dir.path().join("tracks_gt.json")).unwrap(),
            ).unwrap();
            let dataset = SequenceDataset::load(dir.path()).unwrap();
            let per_frame: Vec<_> = dataset.frames.iter().map(|f| f.tracker_detections()).collect();
            let cfg = TrackConfig { seed, gate_radius: gate, motion_threshold: thresh,
                ransac_inlier_dist: inlier, ..TrackConfig::default() };
            let tracks = build_tracks(&per_frame, &dataset.poses, &cfg).unwrap();
            for t in &tracks {
                if t.detections.len() < 5 { continue; }
                total += 1;
                // per-detection nearest gt object
                let owners: Vec<usize> = t.detections.iter().map(|d| {
                    let w = dataset.poses[d.frame].apply(&d.pose.t_c);
                    let mut best = (f64::INFINITY, 0usize);
                    for (oi, obj) in spec.objects.iter().enumerate() {
                        let c = spec.object_center(obj, d.frame);
                        let dist = (w - Vector3::new(c.x, c.y, c.z)).norm();
                        if dist < best.0 { best = (dist, oi); }
                    }
                    best.1
                }).collect();
                let majority = {
                    let mut counts = [0usize; 8];
                    for &o in &owners { counts[o] += 1; }
                    counts.iter().enumerate().max_by_key(|(_, c)| **c).unwrap().0
                };
                let purity = owners.iter().filter(|&&o| o == majority).count() as f64 / owners.len() as f64;
                if purity < 0.999 { impure += 1; }
                let gt_moving = gt.objects[majority].motion == MotionClass::Moving;
                let got_moving = t.motion == MotionClass::Moving;
                if gt_moving { mv_total += 1; if !got_moving { mv_wrong += 1; } }
                else { st_total += 1; if got_moving { st_wrong += 1; } }
            }
        }
        println!("gate {gate} thresh {thresh} inlier {inlier}: impure {impure}/{total} | static wrong {st_wrong}/{st_total} moving wrong {mv_wrong}/{mv_total}");
    }
}
