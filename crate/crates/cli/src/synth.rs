use std::path::Path;

use log::info;

use modabric::data::synth::{generate_synthetic, write_synthetic, SynthSpec};

use crate::config::{RunConfig, WindowSection};
use crate::output::{read_text, write_text};
use crate::{CliError, CliResult};

pub const SPEC_SNAPSHOT: &str = "synth_spec.toml";
/// A run configuration whose windows match the generated log.
pub const WINDOWS_CONFIG: &str = "windows.toml";

pub fn synth_gen(spec_path: Option<&Path>, out: &Path, seed: Option<u64>) -> CliResult<()> {
    let mut spec: SynthSpec = match spec_path {
        Some(p) => toml::from_str(&read_text(p, "spec")?).map_err(|e| CliError::Usage(format!("spec {}: {}", p.display(), e.message())))?,
        None => SynthSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    let data = generate_synthetic(&spec)?;
    write_synthetic(&data, out)?;
    write_text(&out.join(SPEC_SNAPSHOT), &toml::to_string_pretty(&spec).expect("spec serialises"))?;
    let windows = RunConfig {
        windows: WindowSection::from_windows(&spec.windows()?),
        ..Default::default()
    };
    write_text(&out.join(WINDOWS_CONFIG), &windows.to_toml())?;
    info!(
        "wrote {} products ({} cold), {} customers, {} interactions to {}",
        data.catalogue.len(),
        data.cold_products.len(),
        data.customers.len(),
        data.events.len(),
        out.display()
    );
    Ok(())
}
