//! Low-rank adaptors: math, file format, and the group-keyed registry.

mod adaptor;
mod file;
mod registry;

pub use adaptor::{
    default_targets, merge, unmerge, LoraAdaptor, LoraPair, LoraTarget, Projection,
    DEFAULT_ALPHA, DEFAULT_RANK,
};
pub use file::{load_adaptor, save_adaptor, ADAPTOR_FORMAT_VERSION};
pub use registry::{AdaptorRecord, AdaptorRegistry};
