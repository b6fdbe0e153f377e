use std::path::Path;

use tasksr::data::{prepare_dataset, SamplePair};
use tasksr::imageio::save_png;

use crate::{CliError, Common, Outcome};

fn write_side(root: &Path, side: &str, pairs: &[SamplePair]) -> Result<(), CliError> {
    for p in pairs {
        for (kind, img) in [("hr", &p.hr), ("lr", &p.lr)] {
            let path = root.join("patches").join(side).join(kind).join(format!("{}.png", p.id));
            save_png(img, &path)?;
        }
    }
    Ok(())
}

/// Splits the dataset named by the config, writes `manifest.json` and the
/// patch pairs under `<root>/patches/{train,test}/{hr,lr}/`.
pub fn run(common: &Common) -> Result<Outcome, CliError> {
    let cfg = crate::train::load_single(common)?;
    let root = &cfg.data.root;
    if cfg.data.synthetic.is_none() && !root.is_dir() {
        return Err(CliError::Usage(format!("dataset root {} does not exist", root.display())));
    }
    cfg.ensure_dataset()?;
    let (prepared, report) = prepare_dataset(&cfg.dataset_spec(), cfg.model.scale, cfg.model.channels)?;
    write_side(root, "train", &prepared.train)?;
    write_side(root, "test", &prepared.test)?;
    prepared.manifest.save(root.join("manifest.json"))?;
    println!(
        "{}: {} train / {} test documents, {} / {} patch pairs",
        root.display(),
        prepared.manifest.train.len(),
        prepared.manifest.test.len(),
        prepared.train.len(),
        prepared.test.len()
    );
    if report.failures.is_empty() {
        Ok(Outcome::Ok)
    } else {
        Ok(Outcome::Partial(report.failures.iter().map(|(p, e)| format!("{}: {e}", p.display())).collect()))
    }
}
