//! Regenerates the bundled toy detector:
//!
//! ```text
//! cargo run --release -p tasksr-core --example train_toy_detector [OUT]
//! ```

use std::path::PathBuf;

use tasksr::detector::fit::{fit_toy, FitConfig};
use tasksr::detector::{BackendKind, DetectorBackend};

fn main() -> tasksr::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/toy_detector.ckpt"));
    let cfg = FitConfig::default();
    let started = std::time::Instant::now();
    let det = fit_toy(&cfg, |epoch, loss| {
        eprintln!("epoch {epoch:3}  loss {loss:.5}  ({:.0?})", started.elapsed());
    })?;
    assert_eq!(det.kind(), BackendKind::Toy);
    det.save(&out)?;
    let reloaded = DetectorBackend::load(&out)?;
    eprintln!("wrote {} ({})", out.display(), reloaded.id());
    Ok(())
}
