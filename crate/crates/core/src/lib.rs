//! Speaker normalization and zero-resource speech evaluation toolkit.

pub mod abx;
pub mod aud;
pub mod corpus;
pub mod mfcc;
pub mod normalize;
pub mod pipeline;
pub mod probe;
pub mod rng;
pub mod slm;
pub mod verify;
