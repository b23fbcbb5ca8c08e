use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{fit_mse, init_dense, Activation, MlpParams, Standardizer, TrainConfig};
use crate::{Error, Result};

/// Encoder (rectifier bottleneck) and decoder (identity output).
///
/// Reconstruction error is measured in the encoder's normalised input
/// space, so `training_loss` is comparable across feature scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderModel {
    pub encoder: MlpParams,
    pub decoder: MlpParams,
    pub training_loss: f64,
}

impl AutoencoderModel {
    /// Builds a model from explicit parts and records its loss on `x`.
    pub fn from_parts(encoder: MlpParams, decoder: MlpParams, x: &Array2<f64>) -> Result<Self> {
        let mut model = Self {
            encoder,
            decoder,
            training_loss: 0.0,
        };
        model.training_loss = reconstruction_mse(&model, x)?;
        Ok(model)
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn embedding_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn encode(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.encoder.check_dim(x)?;
        Ok(self.encoder.forward(x))
    }

    fn joined(&self) -> MlpParams {
        let mut layers = self.encoder.layers.clone();
        layers.extend(self.decoder.layers.iter().cloned());
        MlpParams::new(self.encoder.input.clone(), layers)
    }
}

pub fn train_autoencoder(
    x: &Array2<f64>,
    embedding_width: usize,
    cfg: &TrainConfig,
) -> Result<AutoencoderModel> {
    if x.nrows() == 0 {
        return Err(Error::EmptyInput("autoencoder training set"));
    }
    let d = x.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let input = Standardizer::fit(x);
    let target = input.apply(x);
    let mut joined = MlpParams::new(
        input.clone(),
        vec![
            init_dense(d, embedding_width, Activation::Relu, &mut rng),
            init_dense(embedding_width, d, Activation::Identity, &mut rng),
        ],
    );
    fit_mse(&mut joined, x, &target, cfg)?;
    let mut layers = joined.layers;
    let decoder_layer = layers.pop().unwrap();
    let mut encoder = MlpParams::new(input, layers);
    let mut decoder = MlpParams::new(Standardizer::identity(embedding_width), vec![decoder_layer]);
    encoder.theta_star = true;
    decoder.theta_star = true;
    AutoencoderModel::from_parts(encoder, decoder, x)
}

/// Mean over samples and features of the squared reconstruction error.
pub fn reconstruction_mse(model: &AutoencoderModel, x: &Array2<f64>) -> Result<f64> {
    model.encoder.check_dim(x)?;
    if x.nrows() == 0 {
        return Err(Error::EmptyInput("reconstruction batch"));
    }
    let out = model.joined().forward(x);
    let target = model.encoder.input.apply(x);
    let diff = out - target;
    Ok(diff.mapv(|v| v * v).mean().unwrap())
}
