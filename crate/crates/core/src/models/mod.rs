//! Trainable components: the classifier, the autoencoder, the SPN density
//! estimator and the Kronecker-factored Fisher used for natural gradients.

mod autoencoder;
mod kfac;
pub mod linalg;
mod mlp;
mod spn;

pub use autoencoder::{reconstruction_mse, train_autoencoder, AutoencoderModel};
pub use kfac::{
    augmented_gradients, compute_kfac, natural_gradient_sq_norm, vectorised, KfacFactors,
    KfacState,
};
pub use mlp::{
    argmax_rows, cross_entropy_grad, fine_tune_classifier, init_classifier, mse_grad, predict, predict_proba,
    train_classifier, Activation, ClassifierConfig, Dense, LayerGrad, MlpParams, Standardizer,
    TrainConfig,
};
pub use spn::{
    init_spn, log_sum_exp, spn_loglik, train_spn, SpnConfig, SpnGroup, SpnGroupGrad, SpnModel,
};
