use clickseg::scene::*;
use clickseg::Error;

#[test]
fn json_scene_round_trip() {
    let cloud = PointCloud {
        points: vec![[0.0, 1.0, 2.0], [0.5, 0.25, -1.0]],
        colors: Some(vec![[1.0, 0.0, 0.5], [0.0, 0.0, 0.0]]),
        labels: Some(vec![0, 1]),
    };
    let bytes = encode_scene(&cloud, SceneFormat::Json).unwrap();
    assert_eq!(parse_scene(&bytes, SceneFormat::Json).unwrap(), cloud);
}

#[test]
fn json_parse_error_reports_offset() {
    let err = parse_scene(b"{\"points\": [[0,0,0]],\n  oops}", SceneFormat::Json).unwrap_err();
    match err {
        Error::Parse { offset, .. } => assert!(offset > 20),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn validation_rejects_gaps_and_nan() {
    let mut cloud = PointCloud::new(vec![[0.0; 3], [1.0; 3]]);
    cloud.labels = Some(vec![0, 2]);
    assert!(cloud.validate().is_err());
    cloud.labels = Some(vec![0, 1]);
    assert!(cloud.validate().is_ok());
    cloud.points[1][2] = f64::NAN;
    assert!(matches!(cloud.validate(), Err(Error::InvalidInput(_))));
    assert!(matches!(PointCloud::default().validate(), Err(Error::EmptyScene)));
}

#[test]
fn region_labels_follow_target_order() {
    let mut cloud = PointCloud::new(vec![[0.0; 3]; 4]);
    cloud.labels = Some(vec![0, 1, 2, 3]);
    let sample = SceneSample::new("s", cloud, vec![3, 1]).unwrap();
    assert_eq!(sample.region_labels(), vec![0, 2, 0, 1]);
}
