//! Datasets on disk, the synthetic phantom, and batching.

mod batch;
mod dataset;
mod pgm;
mod phantom;

pub use batch::{batch_indices, batch_iter, collate, epoch_order, resize_nearest, Batch};
pub use dataset::{load_dataset, split_counts, write_dataset, Dataset, DatasetSplit, Sample, Split};
pub use pgm::{decode_pgm, encode_pgm, read_pgm, write_pgm, Gray};
pub use phantom::{
    generate_phantom, phantom_dataset, write_phantom_dataset, PhantomGeometry, BACKGROUND, INTENSITY, LV, MYO,
    NOISE_SIGMA, PHANTOM_CLASSES, PHANTOM_MIN_SIZE, RV,
};
