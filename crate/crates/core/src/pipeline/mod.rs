//! Data pipeline: preprocessing, charset management, label encoding, and
//! the bundle format with split management.

pub mod bundle;
pub mod charset;
pub mod preprocess;

pub use bundle::{
    build_bundles, decode_png, encode_png, load_corpus_index, load_image, save_png,
    BundleManifest, BundleSummary, CorpusEntry, DatasetBundle, Sample, SplitSpec,
};
pub use charset::Charset;
pub use preprocess::{
    deslant, estimate_slant, illumination_compensate, otsu_threshold, preprocess,
    resize_with_padding, shear, RawImage,
};
