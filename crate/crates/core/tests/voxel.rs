use clickseg::scene::*;
use clickseg::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;

#[test]
fn single_point_lands_in_origin_cell() {
    let grid = voxelize(&PointCloud::new(vec![[0.02, 0.02, 0.02]]), 0.05).unwrap();
    assert_eq!(grid.keys, vec![[0, 0, 0]]);
}

#[test]
fn features_are_in_cell_means() {
    let mut cloud = PointCloud::new(vec![[0.01, 0.0, 0.0], [0.04, 0.0, 0.0]]);
    cloud.colors = Some(vec![[0.1, 0.0, 0.0], [0.3, 0.0, 0.0]]);
    let grid = voxelize(&cloud, 0.05).unwrap();
    assert_eq!(grid.len(), 1);
    assert!((grid.features[[0, 0]] - 0.025).abs() < 1e-12);
    assert!((grid.features[[0, 3]] - 0.2).abs() < 1e-12);
}

#[test]
fn voxel_count_matches_hash_set_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pts: Vec<[f64; 3]> = (0..1000)
        .map(|_| std::array::from_fn(|_| rng.random_range(0.0..1.0)))
        .collect();
    let oracle: HashSet<[i64; 3]> = pts
        .iter()
        .map(|p| p.map(|v| (v / 0.05).floor() as i64))
        .collect();
    let grid = voxelize(&PointCloud::new(pts), 0.05).unwrap();
    assert_eq!(grid.len(), oracle.len());
    assert!(grid.len() <= 8000);
    assert_eq!(grid.counts.iter().sum::<usize>(), 1000);
}

#[test]
fn errors() {
    assert!(matches!(
        voxelize(&PointCloud::default(), 0.05),
        Err(Error::EmptyScene)
    ));
    assert!(matches!(
        voxelize(&PointCloud::new(vec![[f64::INFINITY, 0.0, 0.0]]), 0.05),
        Err(Error::InvalidInput(_))
    ));
    let grid = voxelize(&PointCloud::new(vec![[0.0; 3]]), 0.05).unwrap();
    assert!(devoxelize_labels(&grid, &[0, 1]).is_err());
}

#[test]
fn devoxelize_examples() {
    let cloud = PointCloud::new(vec![[0.0; 3], [0.01, 0.0, 0.0], [0.02, 0.0, 0.0]]);
    let grid = voxelize(&cloud, 0.05).unwrap();
    assert_eq!(devoxelize_labels(&grid, &[2]).unwrap(), vec![2, 2, 2]);
    assert_eq!(devoxelize_labels(&grid, &[0]).unwrap(), vec![0, 0, 0]);
}

#[test]
fn majority_vote_breaks_ties_low() {
    let cloud = PointCloud::new(vec![[0.0; 3], [0.01, 0.0, 0.0], [0.2, 0.0, 0.0]]);
    let grid = voxelize(&cloud, 0.05).unwrap();
    assert_eq!(majority_labels(&grid, &[3, 1, 2]).unwrap(), vec![1, 2]);
}
