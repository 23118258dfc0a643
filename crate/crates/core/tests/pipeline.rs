use geofuse::datasets::{generate_pair, SurfaceKind, SynthConfig, SyntheticPair};
use geofuse::descriptors::{DescriptorConfig, DescriptorRegistry, IndexedCloud};
use geofuse::fusion::Fusion;
use geofuse::geometry::RigidTransform;
use geofuse::geometry::uniform_sample_keypoints;
use geofuse::registration::{ransac_register, register_pair, PipelineConfig};
use nalgebra::Vector3;

fn pair(seed: u64, rotation: f64, translation: f64, surface: SurfaceKind) -> SyntheticPair {
    pair_with_overlap(seed, rotation, translation, surface, 0.6)
}

fn pair_with_overlap(seed: u64, rotation: f64, translation: f64, surface: SurfaceKind, overlap: f64) -> SyntheticPair {
    generate_pair(&SynthConfig {
        surface,
        points: 8000,
        overlap,
        max_rotation: rotation,
        max_translation: translation,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn run(p: &SyntheticPair, seed: u64) -> geofuse::registration::RegistrationResult {
    let desc = DescriptorConfig::for_resolution(p.pr);
    let d = DescriptorRegistry::new(desc).unwrap().resolve(&["lfsh".to_string()]).unwrap();
    let cfg = PipelineConfig::from_resolution(p.pr, seed);
    register_pair(
        &IndexedCloud::new(p.source.clone()),
        &IndexedCloud::new(p.target.clone()),
        &d,
        &Fusion::Concat,
        &cfg,
        Some(&p.correspondences),
    )
    .unwrap()
}

#[test]
fn identity_pair_registers_exactly() {
    let p = pair_with_overlap(3, 0.0, 0.0, SurfaceKind::BumpySphere, 1.0);
    assert_eq!(p.gt, RigidTransform::identity());
    let r = run(&p, 1);
    assert!(r.success);
    assert!(r.rmse.unwrap() < 1e-3, "rmse {}", r.rmse.unwrap());
}

#[test]
fn same_seed_same_result() {
    let p = pair(5, 1.0, 10.0, SurfaceKind::HeightField);
    assert_eq!(run(&p, 9), run(&p, 9));
}

#[test]
fn disjoint_scenes_fail_or_error() {
    let a = pair(11, 0.0, 0.0, SurfaceKind::BumpySphere);
    let b = pair(12, 0.0, 0.0, SurfaceKind::HeightField);
    let far = RigidTransform::from_axis_angle(Vector3::z(), 0.0, Vector3::new(100.0, 0.0, 0.0));
    let target = b.target.transformed(&far);
    let desc = DescriptorConfig::for_resolution(a.pr);
    let d = DescriptorRegistry::new(desc).unwrap().resolve(&["lfsh".to_string()]).unwrap();
    let truth: Vec<(usize, usize)> = (0..10).map(|i| (i, i)).collect();
    let out = register_pair(
        &IndexedCloud::new(a.source.clone()),
        &IndexedCloud::new(target),
        &d,
        &Fusion::Concat,
        &PipelineConfig::from_resolution(a.pr, 0),
        Some(&truth),
    );
    match out {
        Ok(r) => assert!(!r.success || r.rmse.unwrap() > 10.0 * a.pr),
        Err(e) => assert!(matches!(e, geofuse::Error::InsufficientData { .. })),
    }
}

#[test]
fn moved_source_gives_equivariant_estimate() {
    let p = pair(7, 0.5, 5.0, SurfaceKind::BumpySphere);
    let base = run(&p, 4);
    let kp = |c: &geofuse::geometry::PointCloud| {
        let k = uniform_sample_keypoints(c, 4.0 * p.pr).unwrap();
        k.iter().map(|&i| *c.point(i)).collect::<Vec<_>>()
    };
    let (src, tgt) = (kp(&p.source), kp(&p.target));
    let t = RigidTransform::from_axis_angle(Vector3::new(1.0, 2.0, 0.5), 0.8, Vector3::new(0.3, -0.2, 0.1));
    let moved: Vec<_> = src.iter().map(|q| t.apply_point(q)).collect();
    let cfg = PipelineConfig::from_resolution(p.pr, 4).ransac;
    let a = ransac_register(&src, &tgt, &base.putative, &cfg).unwrap();
    let b = ransac_register(&moved, &tgt, &base.putative, &cfg).unwrap();
    assert_eq!(a.inliers, b.inliers);
    let composed = b.transform.compose(&t);
    assert!(composed.rotation_angle_to(&a.transform) < 1e-3);
    assert!((composed.translation() - a.transform.translation()).norm() < 1e-3 * p.pr.max(1.0));
}
