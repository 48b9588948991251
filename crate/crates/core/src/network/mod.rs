//! Generator, discriminators, optimizer state and checkpoints.

mod adam;
mod bundle;
mod discriminator;
mod fused;
mod generator;
pub mod layers;
pub mod ops;

pub use adam::{Adam, AdamConfig};
pub use bundle::{
    generator_input, images_to_tensor, restore, restore_batch, tensor_to_images, to_network_range, to_unit_range,
    BundleSpec, ModelBundle, CHECKPOINT_FORMAT,
};
pub use discriminator::{Discriminator, DiscriminatorSpec};
pub use generator::{Generator, GeneratorSpec};
