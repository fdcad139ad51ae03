use std::path::Path;

use geonlf_cli::io::{self, PlyFormat};
use geonlf_core::geometry::{Se3Param, Trajectory, Vec3};
use geonlf_core::range_image::RangeImage;
use geonlf_core::PointCloud;
use proptest::prelude::*;

fn image() -> impl Strategy<Value = RangeImage> {
    (1usize..6, 1usize..12).prop_flat_map(|(h, w)| {
        prop::collection::vec((any::<bool>(), 0.0f32..100.0, 0.0f32..1.0), h * w).prop_map(move |px| {
            let mut img = RangeImage::empty(h, w);
            for (i, (dropped, d, r)) in px.into_iter().enumerate() {
                if !dropped {
                    img.drop[i] = false;
                    img.depth[i] = d as f64;
                    img.intensity[i] = r as f64;
                }
            }
            img
        })
    })
}

fn cloud() -> impl Strategy<Value = PointCloud> {
    prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0, -50.0f64..50.0, 0.0f64..1.0), 1..80).prop_map(|v| {
        let mut c = PointCloud::from_points(v.iter().map(|p| Vec3::new(p.0, p.1, p.2)).collect());
        c.intensity = Some(v.iter().map(|p| p.3).collect());
        c
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rimg_round_trip_is_exact(img in image()) {
        let bytes = io::rimg_bytes(&img);
        let back = io::rimg_from_bytes(&bytes, Path::new("mem.rimg")).unwrap();
        prop_assert_eq!(io::rimg_bytes(&back), bytes);
        prop_assert_eq!(back, img);
    }

    #[test]
    fn ply_round_trips(c in cloud(), binary in any::<bool>()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        io::write_ply(&path, &c, if binary { PlyFormat::Binary } else { PlyFormat::Ascii }).unwrap();
        let back = io::read_ply(&path).unwrap();
        prop_assert_eq!(back.len(), c.len());
        let tol = if binary { 0.0 } else { 1e-6 };
        for (a, b) in back.points.iter().zip(&c.points) {
            prop_assert!((a - b).amax() <= tol * b.amax().max(1.0));
        }
        for (a, b) in back.intensity.unwrap().iter().zip(c.intensity.as_ref().unwrap()) {
            prop_assert!((a - b).abs() <= tol);
        }
    }

    #[test]
    fn trajectory_text_round_trip_is_exact(poses in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0, -1.5f64..1.5, -1.5f64..1.5, -1.5f64..1.5), 1..20)) {
        let traj = Trajectory::from_poses(
            poses.iter().map(|p| Se3Param::new(Vec3::new(p.0, p.1, p.2), Vec3::new(p.3, p.4, p.5)).matrix()).collect(),
        );
        let back = io::trajectory_from_str(&io::trajectory_to_string(&traj), Path::new("mem.txt")).unwrap();
        prop_assert_eq!(back.frames(), traj.frames());
    }
}
