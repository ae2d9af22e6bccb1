//! Embeds a content hash of the workspace sources so every run manifest
//! records exactly which code produced it.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

fn collect(dir: &Path, out: &mut Vec<PathBuf>) {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(_) => return,
    };
    for entry in entries.flatten() {
        let path = entry.path();
        let name = entry.file_name().to_string_lossy().into_owned();
        if path.is_dir() {
            if name != "target" && !name.starts_with('.') {
                collect(&path, out);
            }
        } else if name.ends_with(".rs") || name == "Cargo.toml" {
            out.push(path);
        }
    }
}

fn main() {
    let manifest_dir = PathBuf::from(env::var("CARGO_MANIFEST_DIR").unwrap());
    let root = manifest_dir
        .join("../..")
        .canonicalize()
        .unwrap_or(manifest_dir);
    let mut files = Vec::new();
    collect(&root.join("crates"), &mut files);
    files.push(root.join("Cargo.toml"));
    files.sort();

    let mut hasher = Sha256::new();
    for file in &files {
        if let Ok(bytes) = fs::read(file) {
            let rel = file.strip_prefix(&root).unwrap_or(file);
            hasher.update(rel.to_string_lossy().as_bytes());
            hasher.update([0u8]);
            hasher.update(&bytes);
            println!("cargo:rerun-if-changed={}", file.display());
        }
    }
    // Directory timestamps change when files appear or disappear.
    println!("cargo:rerun-if-changed={}", root.join("crates").display());

    let digest = format!("{:x}", hasher.finalize());
    println!("cargo:rustc-env=LOCALDISC_CODE_VERSION={}", &digest[..12]);
}
