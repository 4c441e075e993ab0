//! Dataset directories: `catalog.tsv`, `train.jsonl`, `validation.jsonl` and
//! the resolved `world.json`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use genrec_core::world::io::{read_catalog, read_dataset, write_catalog, write_dataset};
use genrec_core::world::Split;
use genrec_core::{DatasetPair, Error, WorldConfig};

use crate::error::{CliError, CliResult};
use crate::manifest::{read_file, write_file};

pub const CATALOG_FILE: &str = "catalog.tsv";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const VALIDATION_FILE: &str = "validation.jsonl";
pub const WORLD_FILE: &str = "world.json";

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|source| CliError::File { path: path.display().to_string(), source })
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| CliError::File { path: path.display().to_string(), source })
}

pub fn files(dir: &Path) -> Vec<PathBuf> {
    [CATALOG_FILE, TRAIN_FILE, VALIDATION_FILE, WORLD_FILE].iter().map(|f| dir.join(f)).collect()
}

pub fn write_dir(dir: &Path, pair: &DatasetPair, world: &WorldConfig) -> CliResult<Vec<PathBuf>> {
    let mut w = create(&dir.join(CATALOG_FILE))?;
    write_catalog(&mut w, &pair.catalog)?;
    w.flush()?;
    write_dataset(create(&dir.join(TRAIN_FILE))?, &pair.train)?;
    write_dataset(create(&dir.join(VALIDATION_FILE))?, &pair.validation)?;
    let mut text = serde_json::to_string_pretty(world)?;
    text.push('\n');
    write_file(&dir.join(WORLD_FILE), text.as_bytes())?;
    Ok(files(dir))
}

pub fn read_dir(dir: &Path) -> CliResult<(DatasetPair, WorldConfig)> {
    let world: WorldConfig = serde_json::from_slice(&read_file(&dir.join(WORLD_FILE))?)?;
    let catalog = Arc::new(read_catalog(open(&dir.join(CATALOG_FILE))?)?);
    let train = read_dataset(open(&dir.join(TRAIN_FILE))?, Arc::clone(&catalog))?;
    let validation = read_dataset(open(&dir.join(VALIDATION_FILE))?, Arc::clone(&catalog))?;
    if train.split != Split::Train || validation.split != Split::Validation {
        return Err(Error::Format(format!("{}: split files are swapped or mislabeled", dir.display())).into());
    }
    if catalog.len() != world.vocab_size {
        return Err(Error::Format(format!(
            "{}: catalog has {} titles but world.json says {}",
            dir.display(),
            catalog.len(),
            world.vocab_size
        ))
        .into());
    }
    Ok((DatasetPair { catalog, train, validation, warnings: Vec::new() }, world))
}
