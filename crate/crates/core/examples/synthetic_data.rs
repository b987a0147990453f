//! Generates Gaussian-blob data, writes it in the tensor/label file formats,
//! and loads it back.

use tae::data::{load_dataset, SyntheticSpec};
use tae::experiment::gen_data;

fn main() -> tae::Result<()> {
    let spec = SyntheticSpec {
        classes: 5,
        per_class: 40,
        test_per_class: 10,
        dims: vec![8],
        radius: 3.0,
        sigma: 0.8,
        seed: 7,
    };
    let dir = std::env::temp_dir().join("tae-synthetic-example");
    let [train_x, train_y, test_x, test_y] = gen_data(&spec, &dir)?;
    let train = load_dataset(&train_x, &train_y, None)?;
    let test = load_dataset(&test_x, &test_y, Some(train.class_count()))?;
    println!("train: {} samples of shape {:?}, per class {:?}", train.len(), train.sample_shape(), train.class_counts());
    println!("test:  {} samples", test.len());
    println!("files in {}", dir.display());
    Ok(())
}
