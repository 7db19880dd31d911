//! The contextual GAN: networks, losses and the progressive training loop.

pub mod networks;
pub mod spec;
pub mod train;

pub use networks::{
    discriminate, generate_triplet, instantiate_networks, Discriminator, Generator, GeneratorOutput,
};
pub use spec::{NetworkSpec, NoiseDraw, TripletPatch};
pub use train::{
    discriminator_loss, fade_weight, generator_loss, gradient_penalty, load_generator, train_gan, Critic,
    GanState, GanStreams, GanTask, GanTrainConfig, GrowthState, LossRecord, PatchStream, PenaltyConfig,
};
