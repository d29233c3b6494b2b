#![allow(dead_code)]

use ibrar_harness::datasets::{load_cifar, load_idx_pair, CIFAR_RECORD, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
use ibrar_harness::HarnessError;
use std::fs;
use std::path::{Path, PathBuf};

pub fn idx(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for d in dims {
        out.extend(d.to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

fn put(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, bytes).unwrap();
    p
}

/// Loads each canned corrupt file and returns `(case, error)`; a case that
/// loads successfully panics.
pub fn corrupt_corpus(dir: &Path) -> Vec<(&'static str, HarnessError)> {
    let good_images = put(
        dir,
        "good-images",
        &idx(IDX_IMAGES_MAGIC, &[2, 2, 2], &[0, 64, 128, 255, 1, 2, 3, 4]),
    );
    let good_labels = put(dir, "good-labels", &idx(IDX_LABELS_MAGIC, &[2], &[0, 1]));
    let cifar_ok = {
        let mut r = vec![0u8; CIFAR_RECORD];
        r[0] = 3;
        r
    };
    let images: Vec<(&'static str, Vec<u8>)> = vec![
        ("short header", vec![0, 0, 8]),
        ("bad magic", idx(0x0100_0803, &[2, 2, 2], &[0; 8])),
        ("bad element type", idx(0x0000_0903, &[2, 2, 2], &[0; 8])),
        ("wrong rank", idx(0x0000_0802, &[2, 4], &[0; 8])),
        ("truncated dims", idx(IDX_IMAGES_MAGIC, &[2], &[])),
        ("zero dimension", idx(IDX_IMAGES_MAGIC, &[2, 0, 2], &[])),
        ("truncated payload", idx(IDX_IMAGES_MAGIC, &[2, 2, 2], &[0; 7])),
        ("trailing bytes", idx(IDX_IMAGES_MAGIC, &[2, 2, 2], &[0; 9])),
        ("count mismatch", idx(IDX_IMAGES_MAGIC, &[3, 2, 2], &[0; 12])),
    ];
    let mut out = Vec::new();
    for (name, bytes) in images {
        let p = put(dir, &format!("img-{}", name.replace(' ', "-")), &bytes);
        let e = load_idx_pair(&p, &good_labels, 10).expect_err(name);
        out.push((name, e));
    }
    let bad_labels = put(dir, "labels-oor", &idx(IDX_LABELS_MAGIC, &[2], &[0, 12]));
    out.push((
        "label out of range",
        load_idx_pair(&good_images, &bad_labels, 10).expect_err("labels"),
    ));
    let labels_as_images = put(dir, "labels-magic", &idx(IDX_IMAGES_MAGIC, &[2, 1, 1], &[0, 1]));
    out.push((
        "labels with image magic",
        load_idx_pair(&good_images, &labels_as_images, 10).expect_err("label magic"),
    ));
    let cifar: Vec<(&'static str, Vec<u8>)> = vec![
        ("cifar empty", vec![]),
        ("cifar partial record", cifar_ok[..CIFAR_RECORD - 5].to_vec()),
        ("cifar label out of range", {
            let mut r = cifar_ok.clone();
            r.extend_from_slice(&cifar_ok);
            r[CIFAR_RECORD] = 10;
            r
        }),
    ];
    for (name, bytes) in cifar {
        let p = put(dir, &format!("cifar-{}", name.replace(' ', "-")), &bytes);
        out.push((name, load_cifar(&[p]).expect_err(name)));
    }
    out
}
