//! Dataset files, long-tail protocol, task splitting, and exemplar memory.

mod dataset;
mod longtail;
mod memory;
mod synthetic;

pub use dataset::{
    decode_labels, decode_tensor, encode_labels, encode_tensor, load_dataset, read_label_file, read_tensor_file,
    save_dataset, LabeledDataset, FORMAT_VERSION, LABEL_MAGIC, TENSOR_MAGIC,
};
pub use longtail::{
    class_permutation, class_quotas, long_tail_counts, make_long_tailed, split_tasks, LtProtocol, TaskDataset,
};
pub use memory::{herding_select, normalize_rows, training_pool, Exemplar, ExemplarMemory, TrainingPool};
pub use synthetic::{SyntheticData, SyntheticSpec};
