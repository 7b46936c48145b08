use std::collections::BTreeMap;

use marmopipe::formats::{self, Dtype, FormatError};
use marmopipe_core::injsite::{CellPoint, CellPointCloud};
use marmopipe_core::mapping::{DisplacementField, RegionAtlas};
use marmopipe_core::nnseg::{NetworkParams, UNetConfig};
use marmopipe_core::{Channel, Stack3D, Tile2D};
use proptest::prelude::*;

#[test]
fn constant_tile_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let t = Tile2D::new(720, 720, vec![100; 720 * 720], Channel::Green, [750.0, 0.0, 50.0], 3, 1.34).unwrap();
    let p = dir.path().join("t.pgm");
    formats::write_tile(&t, &p).unwrap();
    assert_eq!(formats::read_tile(&p).unwrap(), t);
}

#[test]
fn short_tile_payload_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let t = Tile2D::new(8, 8, (0..64).collect(), Channel::Red, [0.0; 3], 0, 1.34).unwrap();
    let p = dir.path().join("t.pgm");
    formats::write_tile(&t, &p).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(formats::read_tile(&p), Err(FormatError::Malformed { .. })));
}

#[test]
fn tile_directory_is_sorted_by_name() {
    let dir = tempfile::tempdir().unwrap();
    for (name, k) in [("b.pgm", 1u32), ("a.pgm", 0)] {
        let t = Tile2D::new(2, 2, vec![k as u16; 4], Channel::Blue, [0.0; 3], k, 1.0).unwrap();
        formats::write_tile(&t, &dir.path().join(name)).unwrap();
    }
    let tiles = formats::read_tile_dir(dir.path()).unwrap();
    assert_eq!(tiles.iter().map(|t| t.tile_index).collect::<Vec<_>>(), vec![0, 1]);
}

#[test]
fn stacks_round_trip_per_dtype() {
    let dir = tempfile::tempdir().unwrap();
    let data: Vec<f64> = (0..24).map(|i| i as f64 * 1.5).collect();
    let s = Stack3D::new([2, 3, 4], [1.0, 2.0, 50.0], Some(Channel::Red), data).unwrap();
    for dtype in [Dtype::F64, Dtype::F32] {
        let p = dir.path().join(format!("{dtype:?}"));
        formats::write_stack(&s, &p, dtype).unwrap();
        let (back, d) = formats::read_stack_typed(&p).unwrap();
        assert_eq!((back, d), (s.clone(), dtype));
    }
    let p = dir.path().join("u16");
    formats::write_stack(&s, &p, Dtype::U16).unwrap();
    let back = formats::read_stack(&p).unwrap();
    let rounded: Vec<f64> = s.data().iter().map(|v| v.round()).collect();
    assert_eq!(back.data(), rounded.as_slice());
    assert_eq!(back.voxel_size(), s.voxel_size());
}

#[test]
fn truncated_stack_payload_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let s = Stack3D::zeros([4, 4, 2], [1.0; 3]).unwrap();
    let p = dir.path().join("s");
    formats::write_stack(&s, &p, Dtype::F32).unwrap();
    let raw = formats::stack_files(&p).into_iter().find(|f| f.extension().is_some_and(|e| e == "raw")).unwrap();
    let bytes = std::fs::read(&raw).unwrap();
    std::fs::write(&raw, &bytes[..bytes.len() - 4]).unwrap();
    assert!(formats::read_stack(&p).is_err());
}

#[test]
fn cells_atlas_field_and_model_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cells = CellPointCloud {
        points: vec![CellPoint { x: 3, y: 4, z: 1, score: 0.75 }, CellPoint { x: 0, y: 9, z: 0, score: 12.5 }],
    };
    let p = dir.path().join("cells.txt");
    formats::write_cells(&cells, &p).unwrap();
    assert_eq!(formats::read_cells(&p).unwrap(), cells);

    let names: BTreeMap<u32, String> = [(1, "cortex".to_string()), (7, "thalamus".to_string())].into();
    let atlas = RegionAtlas::new([3, 2, 1], [50.0; 3], vec![0, 1, 7, 7, 1, 0], names).unwrap();
    let p = dir.path().join("atlas");
    formats::write_atlas(&atlas, &p).unwrap();
    assert_eq!(formats::read_atlas(&p).unwrap(), atlas);

    let field = DisplacementField::constant([2, 2, 2], [50.0; 3], [1.5, -2.0, 0.25]).unwrap();
    let p = dir.path().join("field");
    formats::write_field(&field, &p).unwrap();
    assert_eq!(formats::read_field(&p).unwrap(), field);

    let params = NetworkParams::init(UNetConfig::new(2, 2, 2), 4).unwrap();
    let p = dir.path().join("net");
    formats::write_model(&params, &p, 4).unwrap();
    let back = formats::read_model(&p).unwrap();
    assert_eq!(back.config, params.config);
    for ((na, a), (nb, b)) in params.tensors().iter().zip(back.tensors().iter()) {
        assert_eq!(na, nb);
        let a32: Vec<f64> = a.iter().map(|&v| v as f32 as f64).collect();
        assert_eq!(a32.as_slice(), *b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn arbitrary_tiles_round_trip(
        w in 1usize..20,
        h in 1usize..20,
        seed in any::<u64>(),
        ch in 0usize..3,
        ox in -1e4f64..1e4,
        pitch in 0.1f64..10.0,
    ) {
        let px: Vec<u16> = (0..w * h).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 48) as u16).collect();
        let t = Tile2D::new(w, h, px, Channel::ALL[ch], [ox, 0.0, 1.0], 9, pitch).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.pgm");
        formats::write_tile(&t, &p).unwrap();
        prop_assert_eq!(formats::read_tile(&p).unwrap(), t);
    }
}
