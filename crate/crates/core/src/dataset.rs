//! In-memory stimulus/response sets with a train/validation split.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::synth::SyntheticNeuron;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// Images are `side`×`side` single-channel planes stored back to back;
/// responses are image-major (`responses[i * n_neurons + j]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub side: usize,
    pub n_neurons: usize,
    pub train_images: Vec<f32>,
    pub val_images: Vec<f32>,
    pub train_responses: Vec<f32>,
    pub val_responses: Vec<f32>,
    pub seed: u64,
    /// Ground truth when the responses are synthetic; empty otherwise.
    pub neurons: Vec<SyntheticNeuron>,
}

impl Dataset {
    pub fn pixels(&self) -> usize {
        self.side * self.side
    }

    pub fn len(&self, split: Split) -> usize {
        let px = self.pixels().max(1);
        match split {
            Split::Train => self.train_images.len() / px,
            Split::Val => self.val_images.len() / px,
        }
    }

    pub fn images(&self, split: Split) -> &[f32] {
        match split {
            Split::Train => &self.train_images,
            Split::Val => &self.val_images,
        }
    }

    pub fn image(&self, split: Split, i: usize) -> &[f32] {
        let px = self.pixels();
        &self.images(split)[i * px..(i + 1) * px]
    }

    /// Responses of one neuron over a split.
    pub fn responses(&self, split: Split, neuron: usize) -> Vec<f32> {
        let r = match split {
            Split::Train => &self.train_responses,
            Split::Val => &self.val_responses,
        };
        r.iter().skip(neuron).step_by(self.n_neurons).copied().collect()
    }

    /// Copy keeping only the pixels in `rows` × `cols` (a square window).
    pub fn crop(&self, rows: core::ops::Range<usize>, cols: core::ops::Range<usize>) -> Result<Self> {
        if rows.len() != cols.len() || rows.end > self.side || cols.end > self.side || rows.is_empty() {
            return Err(invalid(format!("crop {rows:?}×{cols:?} of a {0}×{0} image", self.side)));
        }
        let cut = |imgs: &[f32]| -> Vec<f32> {
            let mut out = Vec::with_capacity(imgs.len() / self.pixels() * rows.len() * cols.len());
            for im in imgs.chunks_exact(self.pixels()) {
                for r in rows.clone() {
                    out.extend_from_slice(&im[r * self.side + cols.start..r * self.side + cols.end]);
                }
            }
            out
        };
        Ok(Self {
            side: rows.len(),
            n_neurons: self.n_neurons,
            train_images: cut(&self.train_images),
            val_images: cut(&self.val_images),
            train_responses: self.train_responses.clone(),
            val_responses: self.val_responses.clone(),
            seed: self.seed,
            neurons: self.neurons.clone(),
        })
    }

    /// Checks every size relation and that all values are finite.
    pub fn validate(&self) -> Result<()> {
        let px = self.pixels();
        if px == 0 || self.n_neurons == 0 {
            return Err(invalid("dataset needs a positive image side and neuron count"));
        }
        for (name, imgs, resp) in [
            ("train", &self.train_images, &self.train_responses),
            ("validation", &self.val_images, &self.val_responses),
        ] {
            if imgs.len() % px != 0 {
                return Err(invalid(format!("{name} images are not a whole number of {px}-pixel planes")));
            }
            if resp.len() != imgs.len() / px * self.n_neurons {
                return Err(invalid(format!(
                    "{name}: {} responses for {} images × {} neurons",
                    resp.len(),
                    imgs.len() / px,
                    self.n_neurons
                )));
            }
            if imgs.iter().chain(resp.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("{name} data")));
            }
        }
        if !self.neurons.is_empty() && self.neurons.len() != self.n_neurons {
            return Err(invalid("neuron metadata count differs from response columns"));
        }
        Ok(())
    }
}
