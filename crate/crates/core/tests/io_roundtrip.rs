use nalgebra::Point3;
use orchard_core::association::{fruit_association, AssociationParams};
use orchard_core::geometry::{camera_center, project};
use orchard_core::io::{
    export_results, parse_detections, parse_points_csv, read_sfm_export, read_text, IoError,
};
use orchard_core::synth::{generate_scene, CorruptionConfig, SceneConfig, SceneTruth};

fn noisy_scene() -> orchard_core::synth::SyntheticScene {
    generate_scene(&SceneConfig {
        rows: 2,
        fruits_per_row: 8,
        corruption: CorruptionConfig {
            pixel_noise_sigma: 0.7,
            outlier_per_frame_rate: 0.3,
            dropout_prob: 0.05,
            ..CorruptionConfig::default()
        },
        ..SceneConfig::default()
    })
    .unwrap()
}

#[test]
fn scene_files_parse_back_to_the_generated_scene() {
    let scene = noisy_scene();
    let dir = tempfile::tempdir().unwrap();
    scene.write_to_dir(dir.path()).unwrap();

    let detections = parse_detections(&dir.path().join("detections.csv")).unwrap();
    assert_eq!(detections, scene.detections);

    let poses = read_sfm_export(&dir.path().join("cameras.txt"), &dir.path().join("images.txt")).unwrap();
    let cameras = poses.to_camera_set().unwrap();
    assert_eq!(cameras.len(), scene.cameras.len());
    for (a, b) in cameras.iter().zip(scene.cameras.iter()) {
        assert_eq!(a.frame_id(), b.frame_id());
        assert!((a.projection() - b.projection()).amax() <= 1e-12 * b.projection().amax());
        let c = camera_center(a.projection()).unwrap();
        assert!((a.projection() * c.coords()).norm() <= 1e-9 * a.projection().norm());
    }

    let truth = SceneTruth::read(&dir.path().join("truth.json")).unwrap();
    assert_eq!(truth.positions(), scene.fruit_positions());
    assert_eq!(truth.detections.len(), scene.ground_truth.len());
}

#[test]
fn clean_detections_are_exact_projections_after_reload() {
    let scene = generate_scene(&SceneConfig {
        rows: 1,
        fruits_per_row: 3,
        ..SceneConfig::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    scene.write_to_dir(dir.path()).unwrap();
    let detections = parse_detections(&dir.path().join("detections.csv")).unwrap();
    let poses = read_sfm_export(&dir.path().join("cameras.txt"), &dir.path().join("images.txt")).unwrap();
    let cameras = poses.to_camera_set().unwrap();
    for (frame, dets) in &detections {
        for d in dets {
            let fruit = scene.source_of(orchard_core::NodeId::new(*frame, d.detection_index)).unwrap();
            let hp = orchard_core::HomogeneousPoint3::from_euclidean(&scene.fruits[fruit].position);
            let px = project(cameras.get(*frame).unwrap(), &hp).unwrap().to_pixel().unwrap();
            assert!((px - d.centroid).norm() <= 1e-8);
        }
    }
}

#[test]
fn exported_points_reload_within_tolerance() {
    let scene = noisy_scene();
    let estimates = fruit_association(&scene.detections, &scene.cameras, &AssociationParams::default()).unwrap();
    assert!(!estimates.is_empty());
    let labels: Vec<Option<usize>> = (0..estimates.len()).map(|i| (i % 3 != 0).then_some(i % 2)).collect();
    let dir = tempfile::tempdir().unwrap();
    let files = export_results(dir.path(), &estimates, &labels).unwrap();

    let records = parse_points_csv(&read_text(&files.points).unwrap()).unwrap();
    assert_eq!(records.len(), estimates.len());
    for ((r, e), label) in records.iter().zip(&estimates).zip(&labels) {
        let p: Point3<f64> = e.point();
        assert!((r.position - p).norm() <= 1e-9 * p.coords.norm().max(1.0));
        assert_eq!(r.inlier_count, e.inlier_nodes.len());
        assert_eq!(r.row_label, *label);
    }

    let tracks = read_text(&files.tracks).unwrap();
    let inliers: usize = estimates.iter().map(|e| e.inlier_nodes.len()).sum();
    assert_eq!(tracks.lines().count(), inliers + 1);

    let ply = read_text(&files.cloud).unwrap();
    assert!(ply.contains(&format!("element vertex {}\n", estimates.len())));
    assert_eq!(ply.lines().skip_while(|l| *l != "end_header").skip(1).count(), estimates.len());
}

#[test]
fn missing_files_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let err = parse_detections(&dir.path().join("absent.csv")).unwrap_err();
    assert!(matches!(err, IoError::Io { .. }));
    let err = read_sfm_export(&dir.path().join("cameras.txt"), &dir.path().join("images.txt")).unwrap_err();
    assert!(err.to_string().contains("cameras.txt"), "{err}");
}
