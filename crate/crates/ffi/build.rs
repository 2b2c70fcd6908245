use std::path::PathBuf;

fn main() {
    let dir = PathBuf::from(std::env::var("CARGO_MANIFEST_DIR").expect("set by cargo"));
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");
    let config = cbindgen::Config::from_file(dir.join("cbindgen.toml")).expect("valid cbindgen.toml");
    let header = cbindgen::Builder::new().with_crate(&dir).with_config(config).generate().expect("header generation");
    std::fs::create_dir_all(dir.join("include")).expect("include dir");
    header.write_to_file(dir.join("include/specstream.h"));
}
