mod common;

use common::{live_prompt_set, tiny_config};
use lpmc::codec::Codec;
use lpmc::io::{Container, Image, HEADER_BYTES};
use lpmc::metrics::psnr;
use lpmc::synth::synthetic_image;
use lpmc::Error;

fn codec() -> Codec {
    Codec::init(tiny_config(), 3).unwrap()
}

#[test]
fn decode_matches_in_process_forward() {
    let codec = codec();
    let prompt = live_prompt_set(&codec.config, 2, 8);
    for (i, (w, h)) in [(64, 64), (70, 45), (128, 64)].into_iter().enumerate() {
        let img = synthetic_image(w, h, i as u64);
        for p in [None, Some(&prompt)] {
            let c = codec.compress(&img, p).unwrap();
            let bytes = c.to_bytes();
            let parsed = Container::parse(&bytes, Some(codec.model_id())).unwrap();
            assert_eq!(parsed, c);
            let decoded = codec.decompress(&parsed, p).unwrap();
            let direct = codec.reconstruct(&img, p).unwrap();
            assert_eq!((decoded.width, decoded.height), (w, h));
            assert_eq!(decoded.data, direct.image.data, "image {i}");
            assert_eq!(
                psnr(&img, &decoded).unwrap(),
                psnr(&img, &direct.image).unwrap()
            );
        }
    }
}

#[test]
fn file_size_accounting() {
    let codec = codec();
    let img = synthetic_image(50, 30, 4);
    let c = codec.compress(&img, None).unwrap();
    let bytes = c.to_bytes();
    assert_eq!(
        bytes.len(),
        HEADER_BYTES + c.z_payload.len() + c.y_payload.len()
    );
    assert_eq!(c.total_bits(), bytes.len() * 8);
    assert_eq!(c.bpp(), (bytes.len() * 8) as f64 / 1500.0);
}

#[test]
fn payload_tracks_estimated_rate() {
    let codec = codec();
    for seed in 0..4 {
        let img = synthetic_image(64, 64, seed);
        let c = codec.compress(&img, None).unwrap();
        let (y, z) = codec.table_bits(&img, None).unwrap();
        let measured = (8 * c.payload_bytes()) as f64;
        assert!(
            (measured - (y + z)).abs() <= 0.01 * (y + z) + 64.0,
            "{measured} vs {}",
            y + z
        );
        // Rounding each scale up to its bucket costs a few percent over the
        // continuous likelihood.
        let soft = codec.reconstruct(&img, None).unwrap().estimated_bits();
        assert!((soft - (y + z)).abs() <= 0.1 * soft, "{soft} vs {}", y + z);
    }
}

#[test]
fn encoding_is_deterministic() {
    let codec = codec();
    let img = synthetic_image(64, 64, 1);
    assert_eq!(
        codec.compress(&img, None).unwrap().to_bytes(),
        codec.compress(&img, None).unwrap().to_bytes()
    );
}

#[test]
fn mismatches_are_reported() {
    let codec = codec();
    let prompt = live_prompt_set(&codec.config, 1, 2);
    let img = synthetic_image(64, 64, 0);
    let c = codec.compress(&img, Some(&prompt)).unwrap();
    assert!(matches!(
        codec.decompress(&c, None),
        Err(Error::PromptMismatch {
            expected: 1,
            found: 0xFF
        })
    ));
    let other = live_prompt_set(&codec.config, 3, 2);
    assert!(matches!(
        codec.decompress(&c, Some(&other)),
        Err(Error::PromptMismatch {
            expected: 1,
            found: 3
        })
    ));

    let desk = Codec::init(lpmc::config::ModelConfig::desk(), 3).unwrap();
    let bytes = c.to_bytes();
    assert!(matches!(
        Container::parse(&bytes, Some(desk.model_id())),
        Err(Error::ModelMismatch { .. })
    ));
    assert!(matches!(
        desk.decompress(&c, Some(&prompt)),
        Err(Error::ModelMismatch { .. })
    ));
}

#[test]
fn corrupt_streams_are_reported() {
    let codec = codec();
    let img = synthetic_image(64, 64, 2);
    let bytes = codec.compress(&img, None).unwrap().to_bytes();
    assert!(matches!(
        Container::parse(&bytes[..bytes.len() - 1], None),
        Err(Error::CorruptStream(_))
    ));
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(matches!(
        Container::parse(&longer, None),
        Err(Error::CorruptStream(_))
    ));
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(
        Container::parse(&bad_magic, None),
        Err(Error::CorruptStream(_))
    ));

    // Damage inside the y payload: either detected or a different image,
    // never a panic.
    let c = Container::parse(&bytes, None).unwrap();
    for k in 0..c.y_payload.len().min(40) {
        let mut bad = c.clone();
        bad.y_payload[k] ^= 0x10;
        match codec.decompress(&bad, None) {
            Err(Error::CorruptStream(_)) => {}
            Ok(img) => assert_eq!((img.width, img.height), (64, 64)),
            Err(e) => panic!("unexpected {e}"),
        }
    }
}

#[test]
fn constant_image_survives() {
    let codec = codec();
    let img = Image::from_fn(64, 64, |_, _, _| 0.5);
    let c = codec.compress(&img, None).unwrap();
    let out = codec.decompress(&c, None).unwrap();
    assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
}
