//! JSON checkpoints. Floats are written in shortest round-trip form, so
//! load → save reproduces the document exactly.

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::gumbel::GumbelConfig;
use crate::models::{HeadSpec, Layer, MdnModel, Mlp, Model, ModelKind, RegressorModel, SdnModel, TrunkConfig};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDoc {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model_kind: ModelKind,
    pub trunk_cfg: TrunkConfig,
    pub head_spec: HeadSpec,
    pub gumbel_cfg: Option<GumbelConfig>,
    pub layers: Vec<LayerDoc>,
    pub logit_layer: Option<LayerDoc>,
    pub final_w: Option<Vec<Vec<f64>>>,
    /// Output layer of the MDN and regressor heads.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_layer: Option<LayerDoc>,
    pub rng_seed: u64,
    pub training_meta: serde_json::Value,
}

fn doc(l: &Layer) -> LayerDoc {
    LayerDoc { w: l.w.to_rows(), b: l.b.data().to_vec() }
}

fn layer(d: &LayerDoc) -> Result<Layer> {
    Ok(Layer { w: Tensor::from_rows(&d.w)?, b: Tensor::vector(d.b.clone()) })
}

fn need<T: Clone>(v: &Option<T>, what: &str) -> Result<T> {
    v.clone().ok_or_else(|| Error::Config(format!("checkpoint is missing {what}")))
}

impl Checkpoint {
    pub fn from_model(model: &Model, rng_seed: u64, training_meta: serde_json::Value) -> Self {
        let trunk = model.trunk();
        let mut c = Checkpoint {
            format_version: FORMAT_VERSION,
            model_kind: model.kind(),
            trunk_cfg: trunk.cfg.clone(),
            head_spec: model.head().clone(),
            gumbel_cfg: None,
            layers: trunk.layers.iter().map(doc).collect(),
            logit_layer: None,
            final_w: None,
            head_layer: None,
            rng_seed,
            training_meta,
        };
        match model {
            Model::Sdn(m) => {
                c.gumbel_cfg = Some(m.gumbel.clone());
                c.logit_layer = Some(doc(&m.logit));
                c.final_w = Some(m.final_w.to_rows());
            }
            Model::Mdn(m) => {
                c.logit_layer = Some(doc(&m.logit));
                c.head_layer = Some(doc(&m.head_layer));
            }
            Model::Regressor(m) => c.head_layer = Some(doc(&m.head_layer)),
        }
        c
    }

    pub fn to_model(&self) -> Result<Model> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint format {}", self.format_version)));
        }
        self.trunk_cfg.validate()?;
        self.head_spec.validate()?;
        let trunk = Mlp { cfg: self.trunk_cfg.clone(), layers: self.layers.iter().map(layer).collect::<Result<_>>()? };
        let head = self.head_spec.clone();
        Ok(match self.model_kind {
            ModelKind::Sdn => Model::Sdn(SdnModel {
                trunk,
                logit: layer(&need(&self.logit_layer, "logit_layer")?)?,
                final_w: Tensor::from_rows(&need(&self.final_w, "final_w")?)?,
                head,
                gumbel: need(&self.gumbel_cfg, "gumbel_cfg")?,
            }),
            ModelKind::Mdn => Model::Mdn(MdnModel {
                trunk,
                logit: layer(&need(&self.logit_layer, "logit_layer")?)?,
                head_layer: layer(&need(&self.head_layer, "head_layer")?)?,
                head,
            }),
            ModelKind::Regressor => {
                Model::Regressor(RegressorModel { trunk, head_layer: layer(&need(&self.head_layer, "head_layer")?)?, head })
            }
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_model, Activation};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_is_value_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = TrunkConfig { input_dim: 3, hidden: vec![4, 4], activation: Activation::Tanh };
        let m = Model::Sdn(init_model(&t, &HeadSpec::gains_only(3, 2), &GumbelConfig::new(3), &mut rng, &[]).unwrap());
        let c = Checkpoint::from_model(&m, 7, serde_json::json!({"env": "pendulum"}));
        let s = c.to_json().unwrap();
        let back = Checkpoint::from_json(&s).unwrap();
        assert_eq!(back.to_model().unwrap(), m);
        assert_eq!(back.to_json().unwrap(), s);
    }
}
