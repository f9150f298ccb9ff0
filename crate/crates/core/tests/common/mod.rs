//! Synthetic CIFAR-layout data for tests that cannot assume the real binaries.
#![allow(dead_code)]

use std::f64::consts::PI;
use std::path::Path;

use lmnet_core::dataio::cifar::{
    CifarKind, CIFAR100_TEST_FILE, CIFAR100_TRAIN_FILE, CIFAR10_TEST_FILE, CIFAR10_TRAIN_FILES,
    IMAGE_BYTES, RECORDS_PER_BATCH,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One image: an oriented grating whose angle encodes the class, with random
/// frequency, phase, tint and pixel noise.
fn grating(rng: &mut ChaCha8Rng, class: usize, classes: usize, out: &mut Vec<u8>) {
    let theta = PI * class as f64 / classes as f64;
    let (s, c) = theta.sin_cos();
    let freq = rng.gen_range(0.12..0.2) * 2.0 * PI;
    let phase = rng.gen_range(0.0..2.0 * PI);
    let amp = rng.gen_range(40.0..70.0);
    for _ in 0..3 {
        let base = rng.gen_range(90.0..165.0);
        for y in 0..32 {
            for x in 0..32 {
                let t = (x as f64 * c + y as f64 * s) * freq + phase;
                let v = base + amp * t.sin() + rng.gen_range(-45.0..45.0);
                out.push(v.clamp(0.0, 255.0) as u8);
            }
        }
    }
}

/// `records` CIFAR records; labels cycle through the classes.
pub fn synthetic_records(kind: CifarKind, records: usize, seed: u64) -> Vec<u8> {
    let classes = kind.classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(records * kind.record_bytes());
    for i in 0..records {
        let fine = i % classes;
        if kind == CifarKind::Cifar100 {
            out.push((fine / 5) as u8);
        }
        out.push(fine as u8);
        grating(&mut rng, fine, classes, &mut out);
    }
    debug_assert_eq!(
        out.len(),
        records * (kind.record_bytes() - IMAGE_BYTES) + records * IMAGE_BYTES
    );
    out
}

/// Writes a full-size CIFAR-10 directory (5 train batches, 1 test batch).
pub fn write_cifar10(dir: &Path, seed: u64) -> std::io::Result<()> {
    for (i, f) in CIFAR10_TRAIN_FILES.iter().enumerate() {
        std::fs::write(
            dir.join(f),
            synthetic_records(CifarKind::Cifar10, RECORDS_PER_BATCH, seed + i as u64),
        )?;
    }
    std::fs::write(
        dir.join(CIFAR10_TEST_FILE),
        synthetic_records(CifarKind::Cifar10, RECORDS_PER_BATCH, seed + 99),
    )
}

/// Writes a full-size CIFAR-100 directory (train.bin, test.bin).
pub fn write_cifar100(dir: &Path, seed: u64) -> std::io::Result<()> {
    std::fs::write(
        dir.join(CIFAR100_TRAIN_FILE),
        synthetic_records(CifarKind::Cifar100, 5 * RECORDS_PER_BATCH, seed),
    )?;
    std::fs::write(
        dir.join(CIFAR100_TEST_FILE),
        synthetic_records(CifarKind::Cifar100, RECORDS_PER_BATCH, seed + 99),
    )
}
