//! Checkpoints: a model config file plus a directory of MSGT parameters.

use std::fs;
use std::path::Path;

use crate::config::FlatConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::msgt;
use crate::nn::ParamSet;
use crate::tensor::Real;

pub const MODEL_FILE: &str = "model.txt";
pub const PARAMS_DIR: &str = "params";

pub fn save<T: Real>(dir: &Path, cfg: &ModelConfig, params: &ParamSet<T>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut flat = FlatConfig::new();
    cfg.write_flat(&mut flat);
    let path = dir.join(MODEL_FILE);
    fs::write(&path, flat.render()).map_err(|e| Error::io(&path, e))?;
    msgt::write_dir(&dir.join(PARAMS_DIR), params.as_map())
}

pub fn load<T: Real>(dir: &Path) -> Result<(ModelConfig, ParamSet<T>)> {
    let cfg = ModelConfig::from_flat(&FlatConfig::load(&dir.join(MODEL_FILE))?)?;
    let params = ParamSet::from_map(msgt::read_dir(&dir.join(PARAMS_DIR))?);
    Ok((cfg, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::toy();
        let params = Model::<f32>::new(cfg.clone()).unwrap().init_params(4);
        save(dir.path(), &cfg, &params).unwrap();
        let (c2, p2) = load::<f32>(dir.path()).unwrap();
        assert_eq!(c2, cfg);
        assert_eq!(p2.len(), params.len());
        for (name, t) in params.iter() {
            assert_eq!(p2.get(name).unwrap(), t);
        }
    }
}
