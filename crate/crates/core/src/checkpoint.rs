//! Network checkpoints: one `.ten` file per parameter plus `manifest.json`
//! describing the architecture, the training config, the dataset spec and
//! each fusion layer's kind and dimensions.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::data::ShapeWorldSpec;
use crate::error::{Error, Result};
use crate::gan::{Discriminator, Generator, NetConfig, TrainConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "brl-checkpoint-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionEntry {
    pub kind: String,
    pub feature: usize,
    pub condition: usize,
    pub output: usize,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub data: ShapeWorldSpec,
    pub fusion: Vec<FusionEntry>,
    pub tensors: Vec<TensorEntry>,
}

pub struct Checkpoint {
    pub manifest: Manifest,
    pub gen: Generator,
    pub disc: Discriminator,
}

fn entries(store: &ParamStore) -> Vec<TensorEntry> {
    store
        .iter()
        .map(|(_, name, t)| TensorEntry {
            name: name.to_string(),
            file: format!("{name}.ten"),
            shape: t.shape().to_vec(),
        })
        .collect()
}

pub fn save(
    dir: impl AsRef<Path>,
    gen: &Generator,
    disc: &Discriminator,
    train: &TrainConfig,
    data: &ShapeWorldSpec,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let dims = gen.cfg.fusion_dims();
    let manifest = Manifest {
        format: FORMAT.into(),
        net: gen.cfg.clone(),
        train: train.clone(),
        data: data.clone(),
        fusion: (0..gen.cfg.depth)
            .map(|_| FusionEntry {
                kind: "brl".into(),
                feature: dims.feature,
                condition: dims.condition,
                output: dims.output,
                rank: gen.cfg.rank,
            })
            .collect(),
        tensors: entries(&gen.store).into_iter().chain(entries(&disc.store)).collect(),
    };
    for store in [&gen.store, &disc.store] {
        for (_, name, t) in store.iter() {
            t.save(dir.join(format!("{name}.ten")))?;
        }
    }
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join(MANIFEST), json)?;
    Ok(())
}

fn fill(store: &mut ParamStore, dir: &Path, manifest: &Manifest) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let entry = manifest
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor {name}")))?;
        let t = Tensor::load(dir.join(&entry.file))?;
        store.set(id, t)?;
    }
    Ok(())
}

pub fn load(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
    if manifest.format != FORMAT {
        return Err(Error::Format(format!("unknown checkpoint format {:?}", manifest.format)));
    }
    // structure only; every value is overwritten from disk
    let mut rng = Rng::new(0);
    let mut gen = Generator::new(&manifest.net, &mut rng)?;
    let mut disc = Discriminator::new(&manifest.net, &mut rng)?;
    fill(&mut gen.store, dir, &manifest)?;
    fill(&mut disc.store, dir, &manifest)?;
    Ok(Checkpoint { manifest, gen, disc })
}
