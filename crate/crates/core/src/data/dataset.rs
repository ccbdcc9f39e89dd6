use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Images stored H×W×C row-major (channel-minor) with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    shape: ImageShape,
    images: Vec<f64>,
    labels: Vec<u32>,
    class_names: Vec<String>,
}

impl LabeledImageSet {
    pub fn new(
        shape: ImageShape,
        images: Vec<f64>,
        labels: Vec<u32>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::domain("image shape has zero size"));
        }
        if images.len() != labels.len() * shape.len() {
            return Err(Error::domain(format!(
                "{} pixel values do not hold {} images of {}x{}x{}",
                images.len(),
                labels.len(),
                shape.height,
                shape.width,
                shape.channels
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= class_names.len()) {
            return Err(Error::domain(format!(
                "label {bad} outside the declared {} classes",
                class_names.len()
            )));
        }
        if let Some(v) = images.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::domain(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            shape,
            images,
            labels,
            class_names,
        })
    }

    /// Class names "0", "1", … for every label up to the largest present.
    pub fn numbered_classes(n: usize) -> Vec<String> {
        (0..n).map(|i| i.to_string()).collect()
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.shape.len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.images
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn indices_of_class(&self, class: u32) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    /// New set holding the given samples in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let n = self.shape.len();
        let mut images = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Self {
            shape: self.shape,
            images,
            labels,
            class_names: self.class_names.clone(),
        }
    }

    /// At most `n` samples of every class, skipping the first `offset` of
    /// each, preserving file order.
    pub fn take_per_class(&self, offset: usize, n: usize) -> Self {
        let mut seen = vec![0usize; self.num_classes()];
        let mut keep = Vec::new();
        for i in 0..self.len() {
            let c = self.labels[i] as usize;
            if seen[c] >= offset && seen[c] < offset + n {
                keep.push(i);
            }
            seen[c] += 1;
        }
        self.subset(&keep)
    }
}
