use fracbnn::encoding::{RgbImage, ThermometerConfig};
use fracbnn::model::{build_fracbnn_resnet20, generate_synthetic, Model};
use fracbnn::modelfile::{load, save, ModelFileError, FILE_HEADER_LEN};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn reference() -> (Model, Vec<u8>) {
    let spec = build_fracbnn_resnet20(ThermometerConfig::new(16).unwrap(), 10);
    let model = generate_synthetic(8, &spec).unwrap();
    let bytes = save(&model).unwrap();
    (model, bytes)
}

#[test]
fn thousand_corruptions_never_load() {
    let (_, bytes) = reference();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut kinds = std::collections::BTreeMap::<String, usize>::new();
    for case in 0..1000 {
        let corrupt = match case % 4 {
            0 | 1 => {
                let mut b = bytes.clone();
                let i = rng.random_range(0..b.len());
                b[i] ^= 1 << rng.random_range(0..8);
                b
            }
            2 => bytes[..rng.random_range(0..bytes.len())].to_vec(),
            _ => {
                let mut b = bytes.clone();
                for _ in 0..rng.random_range(2..=8) {
                    let i = rng.random_range(0..b.len());
                    b[i] = rng.random();
                }
                if b == bytes {
                    b.pop();
                }
                b
            }
        };
        match load(&corrupt) {
            Ok(_) => panic!("case {case}: corrupted file loaded"),
            Err(e) => {
                assert!(e.location().is_some(), "case {case}: {e} has no location");
                let name = format!("{e:?}");
                let name = name.split([' ', '{', '(']).next().unwrap().to_string();
                *kinds.entry(name).or_default() += 1;
            }
        }
    }
    assert!(kinds.contains_key("CrcMismatch"));
    assert!(kinds.contains_key("Truncated"));
}

#[test]
fn round_trip_is_bitwise_and_deterministic() {
    let (model, bytes) = reference();
    let back = load(&bytes).unwrap();
    assert_eq!(back, model);
    assert_eq!(save(&back).unwrap(), bytes);
    assert_eq!(reference().1, bytes);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = RgbImage::random(32, 32, &mut rng);
    assert_eq!(back.forward(&img).unwrap(), model.forward(&img).unwrap());
}

fn resign(b: &mut [u8]) {
    let n = b.len() - 4;
    let crc = crc32fast::hash(&b[..n]);
    b[n..].copy_from_slice(&crc.to_le_bytes());
}

#[test]
fn each_header_fault_has_its_own_error() {
    let (_, bytes) = reference();

    let mut b = bytes.clone();
    b[0] = b'X';
    assert!(matches!(load(&b), Err(ModelFileError::BadMagic { .. })));

    let mut b = bytes.clone();
    b[4] = 2;
    resign(&mut b);
    assert!(matches!(
        load(&b),
        Err(ModelFileError::UnsupportedVersion { version: 2, .. })
    ));

    let mut b = bytes.clone();
    b[6] = 9;
    resign(&mut b);
    assert!(matches!(
        load(&b),
        Err(ModelFileError::UnknownTopology { tag: 9, .. })
    ));

    let mut b = bytes.clone();
    b[FILE_HEADER_LEN + 10] = 31;
    resign(&mut b);
    let e = load(&b).unwrap_err();
    assert!(
        matches!(
            e,
            ModelFileError::Shape { .. } | ModelFileError::TopologyMismatch { .. }
        ),
        "{e}"
    );
    assert_eq!(e.location().unwrap().layer, Some(0));

    let mut b = bytes.clone();
    let last = b.len() - 1;
    b[last] ^= 0xff;
    assert!(matches!(load(&b), Err(ModelFileError::CrcMismatch { .. })));
}
