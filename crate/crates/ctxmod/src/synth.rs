//! Parallel dataset generation. Every image and its responses depend only
//! on (seed, image index), so the result equals the sequential generator.

use ctxmod_core::dataset::Dataset;
use ctxmod_core::synth::{procedural_image, responses_for_image, ImageSource, ResponseModel, SyntheticNeuron};
use ctxmod_core::IMAGE_PIXELS;

use crate::jobs::run_indexed;
use crate::DataError;

pub fn generate_dataset_par(
    n_train: usize,
    n_val: usize,
    neurons: &[SyntheticNeuron],
    source: ImageSource<'_>,
    seed: u64,
    jobs: usize,
) -> Result<Dataset, DataError> {
    if n_train == 0 || n_val == 0 || neurons.is_empty() {
        return Err(DataError::Format("need images in both splits and at least one neuron".into()));
    }
    if let ImageSource::Supplied(imgs) = source {
        if imgs.len() < n_train + n_val {
            return Err(DataError::Format(format!(
                "{} supplied images, need {}",
                imgs.len(),
                n_train + n_val
            )));
        }
        if imgs.iter().any(|im| im.len() != IMAGE_PIXELS) {
            return Err(DataError::Format("supplied images must be 50×50".into()));
        }
    }
    let models: Vec<ResponseModel> = neurons.iter().map(ResponseModel::new).collect();
    let rows = run_indexed(jobs, n_train + n_val, |i| {
        let img = match source {
            ImageSource::Procedural => procedural_image(seed, i as u64),
            ImageSource::Supplied(imgs) => imgs[i].clone(),
        };
        let r = responses_for_image(&models, &img, seed, i as u64);
        (img, r)
    });
    let mut ds = Dataset {
        side: ctxmod_core::IMAGE_SIDE,
        n_neurons: neurons.len(),
        train_images: Vec::with_capacity(n_train * IMAGE_PIXELS),
        val_images: Vec::with_capacity(n_val * IMAGE_PIXELS),
        train_responses: Vec::new(),
        val_responses: Vec::new(),
        seed,
        neurons: neurons.to_vec(),
    };
    for (i, (img, r)) in rows.into_iter().enumerate() {
        if i < n_train {
            ds.train_images.extend(img);
            ds.train_responses.extend(r);
        } else {
            ds.val_images.extend(img);
            ds.val_responses.extend(r);
        }
    }
    ds.validate()?;
    Ok(ds)
}
