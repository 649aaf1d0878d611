use std::collections::BTreeMap;

use orchard_core::association::{fruit_association, AssociationParams};
use orchard_core::clustering::{kmeans_rows, row_counts};
use orchard_core::synth::{generate_scene, SceneConfig};

#[test]
fn four_row_scene_is_split_into_its_rows() {
    let scene = generate_scene(&SceneConfig::default()).unwrap();
    let estimates = fruit_association(&scene.detections, &scene.cameras, &AssociationParams::default()).unwrap();
    let points: Vec<_> = estimates.iter().map(|e| e.point()).collect();
    let clustering = kmeans_rows(&points, 4, 7).unwrap();

    // Map each estimate to the row of the nearest truth fruit.
    let truth_rows: Vec<usize> = points
        .iter()
        .map(|p| {
            scene
                .fruits
                .iter()
                .min_by(|a, b| (a.position - p).norm().total_cmp(&(b.position - p).norm()))
                .unwrap()
                .row
        })
        .collect();
    let mut pairs: BTreeMap<usize, usize> = BTreeMap::new();
    for (label, row) in clustering.labels().into_iter().zip(&truth_rows) {
        let mapped = *pairs.entry(label).or_insert(*row);
        assert_eq!(mapped, *row, "label {label} covers more than one row");
    }
    assert_eq!(pairs.len(), 4);

    let counts = row_counts(&clustering.assignments);
    let mut expected = vec![0; 4];
    for (label, row) in &pairs {
        expected[*label] = scene.fruits.iter().filter(|f| f.row == *row).count();
    }
    assert_eq!(counts, expected);

    for w in clustering.objective_history.windows(2) {
        assert!(w[1] <= w[0] + 1e-9 * w[0].abs());
    }
}

#[test]
fn labels_do_not_depend_on_the_seed() {
    let scene = generate_scene(&SceneConfig::default()).unwrap();
    let points = scene.fruit_positions();
    let reference = kmeans_rows(&points, 4, 0).unwrap().labels();
    for seed in 1..6 {
        assert_eq!(kmeans_rows(&points, 4, seed).unwrap().labels(), reference);
    }
}
