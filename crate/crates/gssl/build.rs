fn main() {
    println!("cargo:rerun-if-changed=build.rs");
    // ndarray's `blas` feature only generates cblas_* call sites; the actual
    // implementation must be linked by the leaf crate. We use the distro
    // OpenBLAS, which ships the CBLAS interface.
    if std::env::var_os("CARGO_FEATURE_OPENBLAS").is_some() {
        println!("cargo:rustc-link-lib=dylib=openblas");
    }
}
