use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, BackboneInput, NUM_LEVELS};
use crate::error::{Error, Result};
use crate::evalkit::Detection;
use crate::numcore::{Bound, ParamStore, Tape};
use crate::scenegen::{PointCloud, PointCloudRange};
use crate::transformer::{select_top_k, Decoder, DecoderConfig, Encoder, EncoderConfig, LayerPrediction};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Width of the pyramid features, queries and attention blocks.
    pub d_model: usize,
    pub backbone: BackboneConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            backbone: BackboneConfig::default(),
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model < 6 {
            return Err(Error::Config(format!("d_model {} is below 6", self.d_model)));
        }
        self.backbone.validate()?;
        self.encoder.validate(self.d_model)?;
        self.decoder.validate(self.d_model)
    }

    pub fn range(&self) -> &PointCloudRange {
        &self.backbone.grid.range
    }
}

/// Backbone, encoder and decoder sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub num_classes: usize,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Model {
    /// Seeded random initialisation.
    pub fn new(cfg: &ModelConfig, num_classes: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if num_classes == 0 {
            return Err(Error::Config("at least one class is required".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let [h, w] = cfg.backbone.bev_hw();
        let max_cells = h.max(w);
        let backbone = Backbone::new(&mut store, &mut rng, &cfg.backbone, d)?;
        let encoder = Encoder::new(&mut store, &mut rng, &cfg.encoder, d, NUM_LEVELS, max_cells)?;
        let decoder = Decoder::new(&mut store, &mut rng, &cfg.decoder, d, num_classes, max_cells)?;
        Ok(Self {
            cfg: cfg.clone(),
            num_classes,
            store,
            backbone,
            encoder,
            decoder,
        })
    }

    pub fn prepare(&self, pc: &PointCloud, seed: u64) -> Result<BackboneInput> {
        self.backbone.prepare(pc, seed)
    }

    /// Per-layer predictions for one prepared scene.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, input: &BackboneInput) -> Result<Vec<LayerPrediction>> {
        let pyramid = self.backbone.forward(tape, p, input)?;
        let pyramid = self.encoder.forward(tape, p, &pyramid)?;
        self.decoder.forward(tape, p, &pyramid)
    }

    /// Top-`k` detections of every decoder layer, no gradients.
    pub fn detect_layers(&self, input: &BackboneInput, k: usize) -> Result<Vec<Vec<Detection>>> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let layers = self.forward(&mut tape, &p, input)?;
        layers
            .iter()
            .map(|l| {
                let out = select_top_k(tape.value(l.boxes), tape.value(l.logits), k, self.cfg.range())?;
                if out.iter().any(|d| !d.score.is_finite()) {
                    return Err(Error::Numeric("non-finite detection score".into()));
                }
                Ok(out)
            })
            .collect()
    }

    /// Top-`k` detections of the last decoder layer.
    pub fn detect(&self, input: &BackboneInput, k: usize) -> Result<Vec<Detection>> {
        Ok(self.detect_layers(input, k)?.pop().expect("decoder has at least one layer"))
    }
}
