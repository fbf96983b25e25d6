use byteorder::{BigEndian, ByteOrder, LittleEndian};
use kipa_core::volume::{LabelVolume, Mat3, ScalarVolume, VolumeHeader};
use kipa_engine::error::EngineError;
use kipa_engine::nifti::{self, Datatype, ReadOptions};
use proptest::prelude::*;

fn rotation(ax: f64, az: f64) -> Mat3 {
    let (sx, cx) = ax.sin_cos();
    let (sz, cz) = az.sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    let mut m = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            m[r][c] = (0..3).map(|k| rz[r][k] * rx[k][c]).sum();
        }
    }
    m
}

fn assert_geometry_close(a: &VolumeHeader, b: &VolumeHeader) {
    assert_eq!(a.shape, b.shape);
    for i in 0..3 {
        assert!((a.spacing[i] - b.spacing[i]).abs() <= 1e-5 * a.spacing[i], "spacing {i}");
        assert!((a.origin[i] - b.origin[i]).abs() <= 1e-3, "origin {i}");
        for j in 0..3 {
            assert!((a.direction[i][j] - b.direction[i][j]).abs() <= 1e-5, "direction {i},{j}");
        }
    }
}

fn header_strategy() -> impl Strategy<Value = VolumeHeader> {
    (
        prop::array::uniform3(1usize..9),
        prop::array::uniform3(0.3f64..3.0),
        prop::array::uniform3(-200.0f64..200.0),
        -3.0f64..3.0,
        -3.0f64..3.0,
    )
        .prop_map(|(shape, spacing, origin, ax, az)| {
            let mut h = VolumeHeader::new(shape, spacing).unwrap();
            h.origin = origin;
            h.direction = rotation(ax, az);
            h
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scalar_round_trip(h in header_strategy(), gzip: bool, seed: u64) {
        let n = h.shape.iter().product::<usize>();
        let data: Vec<f32> = (0..n).map(|i| ((i as u64 ^ seed) % 4001) as f32 - 1000.5).collect();
        let v = ScalarVolume::scalar(h.clone(), data).unwrap();
        let back = nifti::parse_nifti(&nifti::encode_scalar(&v, gzip), &ReadOptions::default())
            .unwrap()
            .into_scalar()
            .unwrap();
        prop_assert_eq!(back.data(), v.data());
        assert_geometry_close(back.header(), &h);
    }

    #[test]
    fn label_round_trip(h in header_strategy(), gzip: bool, seed: u64) {
        let n = h.shape.iter().product::<usize>();
        let data: Vec<u8> = (0..n).map(|i| ((i as u64).wrapping_mul(seed | 1) >> 7) as u8 % 5).collect();
        let v = LabelVolume::labels(h.clone(), data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(if gzip { "l.nii.gz" } else { "l.nii" });
        nifti::write_labels(&path, &v).unwrap();
        let back = nifti::read_labels(&path, &ReadOptions::default()).unwrap();
        prop_assert_eq!(back.data(), v.data());
        assert_geometry_close(back.header(), &h);
    }
}

/// Hand-assembled big-endian int16 file with voxel values `stored`.
fn big_endian_file(shape: [i16; 3], stored: &[i16], slope: f32, inter: f32) -> Vec<u8> {
    let mut b = vec![0u8; 352];
    BigEndian::write_i32(&mut b[0..], 348);
    for (i, d) in [3, shape[0], shape[1], shape[2], 1, 1, 1, 1].iter().enumerate() {
        BigEndian::write_i16(&mut b[40 + 2 * i..], *d);
    }
    BigEndian::write_i16(&mut b[70..], 4);
    BigEndian::write_i16(&mut b[72..], 16);
    for (i, p) in [1.0f32, 0.8, 0.9, 2.5, 1.0, 1.0, 1.0, 1.0].iter().enumerate() {
        BigEndian::write_f32(&mut b[76 + 4 * i..], *p);
    }
    BigEndian::write_f32(&mut b[108..], 352.0);
    BigEndian::write_f32(&mut b[112..], slope);
    BigEndian::write_f32(&mut b[116..], inter);
    b[344..348].copy_from_slice(b"n+1\0");
    for v in stored {
        let mut w = [0u8; 2];
        BigEndian::write_i16(&mut w, *v);
        b.extend_from_slice(&w);
    }
    b
}

#[test]
fn big_endian_int16_with_scaling() {
    let stored = [3i16, -2, 0, 7, 100, -100];
    let bytes = big_endian_file([3, 2, 1], &stored, 2.0, -1.0);
    let v = nifti::parse_nifti(&bytes, &ReadOptions::default()).unwrap();
    assert_eq!(v.datatype, Datatype::I16);
    assert_eq!(v.header.shape, [3, 2, 1]);
    assert_eq!(v.header.spacing, [0.8f32 as f64, 0.9f32 as f64, 2.5]);
    assert_eq!(v.values, vec![5.0, -5.0, -1.0, 13.0, 199.0, -201.0]);
}

#[test]
fn zero_slope_reads_stored_values() {
    let bytes = big_endian_file([2, 1, 1], &[4, -6], 0.0, 10.0);
    let v = nifti::parse_nifti(&bytes, &ReadOptions::default()).unwrap();
    assert_eq!(v.values, vec![4.0, -6.0]);
}

#[test]
fn four_dimensional_file_is_rejected() {
    let mut bytes = big_endian_file([2, 1, 1], &[1, 2], 1.0, 0.0);
    BigEndian::write_i16(&mut bytes[40..], 4);
    let e = nifti::parse_nifti(&bytes, &ReadOptions::default()).unwrap_err();
    assert!(matches!(e, EngineError::Dimensionality(4)), "{e}");
}

#[test]
fn truncated_data_is_a_parse_error() {
    let mut bytes = big_endian_file([2, 2, 2], &[1; 8], 1.0, 0.0);
    bytes.truncate(bytes.len() - 3);
    assert!(nifti::parse_nifti(&bytes, &ReadOptions::default()).is_err());
}

#[test]
fn header_image_pair() {
    let h = VolumeHeader::new([2, 2, 2], [1.0, 2.0, 3.0]).unwrap();
    let v = ScalarVolume::scalar(h, (0..8).map(|i| i as f32 * 1.5).collect()).unwrap();
    let single = nifti::encode_scalar(&v, false);
    let mut hdr = single[..348].to_vec();
    hdr[344..348].copy_from_slice(b"ni1\0");
    LittleEndian::write_f32(&mut hdr[108..], 0.0);
    let img = &single[352..];
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("p.hdr"), &hdr).unwrap();
    std::fs::write(dir.path().join("p.img"), img).unwrap();
    let back = nifti::read_scalar(&dir.path().join("p.hdr"), &ReadOptions::default()).unwrap();
    assert_eq!(back.data(), v.data());
}

#[test]
fn non_label_values_are_rejected_as_labels() {
    let bytes = big_endian_file([2, 1, 1], &[1, 9], 1.0, 0.0);
    let v = nifti::parse_nifti(&bytes, &ReadOptions::default()).unwrap();
    assert!(v.into_labels(None).is_err());
}
