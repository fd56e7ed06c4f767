//! In-memory labelled image sets.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{config_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<S> {
    /// `(c, h, w)` of every sample.
    pub sample_shape: [usize; 3],
    /// Samples back to back, row-major.
    pub images: Vec<S>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl<S: Scalar> Dataset<S> {
    pub fn new(sample_shape: [usize; 3], images: Vec<S>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let per = sample_shape.iter().product::<usize>();
        if per == 0 || images.len() != per * labels.len() {
            return Err(config_err(format!(
                "{} values do not form {} samples of shape {sample_shape:?}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(config_err(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self {
            sample_shape,
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn per_sample(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> Tensor<S> {
        let n = self.per_sample();
        Tensor::from_vec(&self.sample_shape, self.images[i * n..(i + 1) * n].to_vec()).expect("sample shape")
    }

    /// Stacks the given samples into an `(n, c, h, w)` batch.
    pub fn batch(&self, idx: &[usize]) -> (Tensor<S>, Vec<usize>) {
        let n = self.per_sample();
        let mut data = Vec::with_capacity(n * idx.len());
        for &i in idx {
            data.extend_from_slice(&self.images[i * n..(i + 1) * n]);
        }
        let [c, h, w] = self.sample_shape;
        (
            Tensor::from_vec(&[idx.len(), c, h, w], data).expect("batch shape"),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let (x, labels) = self.batch(idx);
        Self {
            sample_shape: self.sample_shape,
            images: x.into_data(),
            labels,
            classes: self.classes,
        }
    }

    /// First `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> (Self, Self) {
        let n = n.min(self.len());
        let a: Vec<usize> = (0..n).collect();
        let b: Vec<usize> = (n..self.len()).collect();
        (self.subset(&a), self.subset(&b))
    }

    /// Random split with `fraction` of the samples going to the second part.
    pub fn split<R: Rng + ?Sized>(&self, fraction: f64, rng: &mut R) -> (Self, Self) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        let k = ((self.len() as f64) * (1.0 - fraction)).round() as usize;
        (self.subset(&idx[..k]), self.subset(&idx[k..]))
    }

    pub fn samples(&self) -> Vec<Tensor<S>> {
        (0..self.len()).map(|i| self.sample(i)).collect()
    }

    pub fn cast<T: Scalar>(&self) -> Dataset<T> {
        Dataset {
            sample_shape: self.sample_shape,
            images: self.images.iter().map(|v| T::of(v.as_f64())).collect(),
            labels: self.labels.clone(),
            classes: self.classes,
        }
    }
}
