use std::path::PathBuf;

/// MNIST directory from `$CSCNET_DATA/mnist`, falling back to
/// `/root/data/mnist`; `None` when the files are absent.
pub fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("CSCNET_DATA")
        .map(|r| PathBuf::from(r).join("mnist"))
        .unwrap_or_else(|| PathBuf::from("/root/data/mnist"));
    dir.join("t10k-images-idx3-ubyte").exists().then_some(dir)
}
