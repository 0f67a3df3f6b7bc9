mod common;

use common::{dft_half, uniform};
use gafl_core::data::{
    add_gaussian_noise, band_limited_noise, decode_pgm, encode_pgm, erase_rectangle,
    gen_band_dataset, load_directory, read_pgm, rng_from_seed, write_pgm, BandDatasetSpec,
    DataTask, Label,
};
use gafl_core::losses::psnr;
use gafl_core::Tensor;
use proptest::prelude::*;

fn spec(task: DataTask, sigma: f64, seed: u64) -> BandDatasetSpec {
    BandDatasetSpec {
        count: 8,
        extents: (32, 32),
        signal_radius: 4.0,
        noise_band: (8.0, 16.0),
        noise_sigma: sigma,
        task,
        seed,
    }
}

#[test]
fn same_seed_same_dataset() {
    for task in [
        DataTask::Segmentation,
        DataTask::Classification,
        DataTask::Denoising,
    ] {
        let a = gen_band_dataset(&spec(task, 0.3, 5)).unwrap();
        assert_eq!(a, gen_band_dataset(&spec(task, 0.3, 5)).unwrap());
        assert_ne!(a, gen_band_dataset(&spec(task, 0.3, 6)).unwrap());
    }
}

#[test]
fn mask_coverage_is_near_half() {
    let mut s = spec(DataTask::Segmentation, 0.3, 11);
    s.count = 30;
    for sample in gen_band_dataset(&s).unwrap() {
        let Label::Mask(mask) = sample.label else {
            panic!("expected a mask")
        };
        assert!((0.35..=0.65).contains(&mask.mean()));
        assert!(mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}

#[test]
fn classification_uses_both_classes() {
    let mut s = spec(DataTask::Classification, 0.3, 2);
    s.count = 40;
    let classes: Vec<usize> = gen_band_dataset(&s)
        .unwrap()
        .into_iter()
        .map(|x| match x.label {
            Label::Class(c) => c,
            _ => panic!("expected a class"),
        })
        .collect();
    assert!(classes.contains(&0) && classes.contains(&1));
}

#[test]
fn zero_sigma_image_is_the_signal() {
    for sample in gen_band_dataset(&spec(DataTask::Denoising, 0.0, 3)).unwrap() {
        let Label::Clean(clean) = &sample.label else {
            panic!("expected a clean target")
        };
        assert_eq!(&sample.image, clean);
    }
}

#[test]
fn band_noise_has_no_energy_outside_its_annulus() {
    let (n, m, band) = (32, 32, (8.0, 16.0));
    let noise = band_limited_noise(n, m, band, 0.3, &mut rng_from_seed(4)).unwrap();
    let (re, im) = dft_half(&noise);
    let h = m / 2 + 1;
    let mut outside = 0.0;
    for u in 0..n {
        let fu = if u <= n / 2 {
            u as f64
        } else {
            u as f64 - n as f64
        };
        for v in 0..h {
            let r = fu.hypot(v as f64);
            if r < band.0 || r > band.1 {
                outside += re[u * h + v].powi(2) + im[u * h + v].powi(2);
            }
        }
    }
    assert!(outside < 1e-6, "{outside}");
    let std = (noise.data().iter().map(|v| v * v).sum::<f64>() / noise.len() as f64).sqrt();
    assert!((std - 0.3).abs() < 1e-9);
}

#[test]
fn psnr_falls_as_band_noise_grows() {
    let mean_psnr = |sigma: f64| {
        let data = gen_band_dataset(&spec(DataTask::Denoising, sigma, 9)).unwrap();
        data.iter()
            .map(|s| match &s.label {
                Label::Clean(c) => psnr(&s.image, c).unwrap(),
                _ => unreachable!(),
            })
            .sum::<f64>()
            / data.len() as f64
    };
    let values: Vec<f64> = [0.05, 0.1, 0.2].iter().map(|&s| mean_psnr(s)).collect();
    assert!(values[0] > values[1] && values[1] > values[2], "{values:?}");
}

#[test]
fn gaussian_noise_statistics() {
    let img = Tensor::full(&[1, 64, 64], 0.5);
    let noisy = add_gaussian_noise(&img, 0.1, 17).unwrap();
    let std = (noisy.data().iter().map(|v| (v - 0.5).powi(2)).sum::<f64>() / 4096.0).sqrt();
    assert!((0.09..=0.11).contains(&std), "{std}");
    let clipped = add_gaussian_noise(&Tensor::full(&[1, 16, 16], 0.95), 0.5, 1).unwrap();
    assert!(clipped.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn erasing_examples() {
    let ones = Tensor::ones(&[2, 4, 4]);
    let e = erase_rectangle(&ones, 0, 0, 2, 2, 0.0).unwrap();
    assert_eq!(e.data().iter().filter(|&&v| v == 0.0).count(), 8);
    let whole = erase_rectangle(&ones, 0, 0, 4, 4, 0.25).unwrap();
    assert!(whole.data().iter().all(|&v| v == 0.25));
    let clipped = erase_rectangle(&ones, 3, 3, 5, 5, 0.0).unwrap();
    assert_eq!(clipped.data().iter().filter(|&&v| v == 0.0).count(), 2);
    let outside = erase_rectangle(&ones, 10, 10, 2, 2, 0.0).unwrap();
    assert_eq!(outside, ones);
}

#[test]
fn pgm_round_trip_is_idempotent_after_quantization() {
    let img = uniform(&[1, 5, 7], 0.0, 1.0, 8);
    let once = decode_pgm(&encode_pgm(&img).unwrap()).unwrap();
    assert_eq!(once.shape(), &[1, 5, 7]);
    assert!(once.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-12);
    let twice = decode_pgm(&encode_pgm(&once).unwrap()).unwrap();
    assert_eq!(once, twice);
    assert!(decode_pgm(b"P2\n1 1\n255\n\x00").is_err());
    assert!(decode_pgm(b"P5\n2 2\n255\n\x00").is_err());
    assert!(encode_pgm(&Tensor::full(&[1, 2, 2], 1.5)).is_err());
    let commented = decode_pgm(b"P5\n# note\n2 1\n255\n\x00\xff").unwrap();
    assert_eq!(commented.data(), &[0.0, 1.0]);
}

fn write_images(dir: &std::path::Path, count: usize) {
    std::fs::create_dir_all(dir.join("images")).unwrap();
    for i in 0..count {
        write_pgm(
            &uniform(&[1, 8, 8], 0.0, 1.0, i as u64),
            dir.join(format!("images/{i:04}.pgm")),
        )
        .unwrap();
    }
}

#[test]
fn directory_datasets() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_images(dir, 3);

    let plain = load_directory(dir, DataTask::Denoising).unwrap();
    assert_eq!(plain.len(), 3);
    assert_eq!(
        plain[1].image,
        read_pgm(dir.join("images/0001.pgm")).unwrap()
    );

    assert!(load_directory(dir, DataTask::Classification).is_err());
    std::fs::write(
        dir.join("labels.csv"),
        "name,class\n0000.pgm,1\n0001,0\n0002,1\n",
    )
    .unwrap();
    let classes: Vec<_> = load_directory(dir, DataTask::Classification)
        .unwrap()
        .into_iter()
        .map(|s| s.label)
        .collect();
    assert_eq!(
        classes,
        vec![Label::Class(1), Label::Class(0), Label::Class(1)]
    );

    assert!(load_directory(dir, DataTask::Segmentation).is_err());
    std::fs::create_dir_all(dir.join("labels")).unwrap();
    for i in 0..3 {
        let mask =
            Tensor::new(&[1, 8, 8], (0..64).map(|k| ((k + i) % 2) as f64).collect()).unwrap();
        write_pgm(&mask, dir.join(format!("labels/{i:04}.pgm"))).unwrap();
    }
    let seg = load_directory(dir, DataTask::Segmentation).unwrap();
    let Label::Mask(mask) = &seg[0].label else {
        panic!("expected a mask")
    };
    assert_eq!(mask.mean(), 0.5);

    let empty = tempfile::tempdir().unwrap();
    assert!(load_directory(empty.path(), DataTask::Denoising).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn erased_pixels_match_the_clipped_rectangle(
        top in -6i64..10, left in -6i64..10, h in 1i64..8, w in 1i64..8,
    ) {
        let img = uniform(&[1, 6, 7], 0.1, 1.0, 3);
        let out = erase_rectangle(&img, top, left, h, w, 0.0).unwrap();
        for y in 0..6i64 {
            for x in 0..7i64 {
                let inside = y >= top && y < top + h && x >= left && x < left + w;
                let v = out.data()[(y * 7 + x) as usize];
                prop_assert_eq!(v == 0.0, inside);
            }
        }
    }
}
