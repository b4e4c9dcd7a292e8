//! Prints the desk-scale run configuration in its canonical form, plus the
//! two hashes derived from it: the full config hash that names a run, and
//! the [diffusion]-scoped hash that decides whether a pretrained denoiser
//! is compatible.
//!
//!     cargo run --release --example desk_config [-- <out.toml>]

use crossres::config::RunConfig;

fn main() -> crossres::Result<()> {
    let cfg = RunConfig::desk(0);
    let text = cfg.canonical_text()?;
    print!("{text}");
    println!("# config_sha256 = {}", cfg.config_sha256()?);
    println!("# prior_sha256  = {}", cfg.prior_sha256()?);

    if let Some(path) = std::env::args().nth(1) {
        cfg.save(std::path::Path::new(&path))?;
        eprintln!("wrote {path}");
    }
    Ok(())
}
