//! Loading IDX image/label files, the MNIST container format. Writes a tiny
//! pair to a temp directory, loads it and fits a logistic model with plain
//! gradient descent.
//!
//! cargo run --release --example idx -- [images labels]

use std::path::PathBuf;

use dpsparse::data::{load_idx, Split};
use dpsparse::{Model, ModelSpec, ParamVector};

fn write_pair(dir: &std::path::Path) -> std::io::Result<(PathBuf, PathBuf)> {
    // 40 3x3 images: class 1 is bright in the centre
    let mut img = vec![0, 0, 8, 3, 0, 0, 0, 40, 0, 0, 0, 3, 0, 0, 0, 3];
    let mut lbl = vec![0, 0, 8, 1, 0, 0, 0, 40];
    for i in 0..40u8 {
        let y = i % 2;
        for p in 0..9u8 {
            let base = (i * 7 + p * 13) % 60;
            img.push(if p == 4 && y == 1 { 200 + base / 2 } else { base });
        }
        lbl.push(y);
    }
    let (a, b) = (dir.join("images.idx"), dir.join("labels.idx"));
    std::fs::write(&a, img)?;
    std::fs::write(&b, lbl)?;
    Ok((a, b))
}

fn main() -> dpsparse::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (images, labels) = match args.as_slice() {
        [a, b] => (PathBuf::from(a), PathBuf::from(b)),
        _ => write_pair(&std::env::temp_dir())?,
    };
    let mut data = load_idx(&images, &labels, Split::FinetuneTrain)?;
    println!("{} samples, {} features, {} classes", data.len(), data.dim, data.classes);
    data.normalize_fit();

    let model = Model::new(ModelSpec::logistic(data.dim, data.classes))?;
    let mut params = ParamVector::zeros(model.layout().clone());
    let batch = data.as_batch();
    for _ in 0..100 {
        let g = model.batch_grad(&params, &batch)?;
        params.add_scaled(&g, -0.5)?;
    }
    println!("training accuracy {:.3}", model.evaluate(&params, &data)?);
    Ok(())
}
