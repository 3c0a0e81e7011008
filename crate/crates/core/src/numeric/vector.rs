use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Position of one tensor inside a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSlot {
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl TensorSlot {
    pub fn extent(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Shared, immutable tensor layout. Cloning is a reference-count bump.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Layout(Arc<Vec<TensorSlot>>);

impl Layout {
    pub fn new(slots: Vec<TensorSlot>) -> Self {
        Layout(Arc::new(slots))
    }

    pub fn slots(&self) -> &[TensorSlot] {
        &self.0
    }

    /// Total number of scalars covered by the layout.
    pub fn extent(&self) -> usize {
        self.0.iter().map(TensorSlot::extent).sum()
    }
}

impl PartialEq for Layout {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0) || self.0 == other.0
    }
}

/// Common surface of flat real-valued vectors that carry a layout.
pub trait FlatVector: Sized {
    fn values(&self) -> &[f64];
    fn layout(&self) -> &Layout;
    fn from_parts(values: Vec<f64>, layout: Layout) -> Result<Self>;

    fn len(&self) -> usize {
        self.values().len()
    }

    fn is_empty(&self) -> bool {
        self.values().is_empty()
    }

    fn norm_sq(&self) -> f64 {
        self.values().iter().map(|v| v * v).sum()
    }

    fn check_same_layout(&self, other: &impl FlatVector) -> Result<()> {
        if self.layout() != other.layout() || self.len() != other.len() {
            return Err(Error::Layout {
                expected: self.len(),
                actual: other.len(),
            });
        }
        Ok(())
    }
}

macro_rules! flat_vector {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            values: Vec<f64>,
            layout: Layout,
        }

        impl $name {
            pub fn new(values: Vec<f64>, layout: Layout) -> Result<Self> {
                if values.len() != layout.extent() {
                    return Err(Error::Layout {
                        expected: layout.extent(),
                        actual: values.len(),
                    });
                }
                Ok(Self { values, layout })
            }

            pub fn zeros(layout: Layout) -> Self {
                Self {
                    values: vec![0.0; layout.extent()],
                    layout,
                }
            }

            pub fn into_values(self) -> Vec<f64> {
                self.values
            }

            pub fn values_mut(&mut self) -> &mut [f64] {
                &mut self.values
            }

            pub fn is_finite(&self) -> bool {
                self.values.iter().all(|v| v.is_finite())
            }
        }

        impl FlatVector for $name {
            fn values(&self) -> &[f64] {
                &self.values
            }

            fn layout(&self) -> &Layout {
                &self.layout
            }

            fn from_parts(values: Vec<f64>, layout: Layout) -> Result<Self> {
                Self::new(values, layout)
            }
        }
    };
}

flat_vector!(
    /// Flat model parameters in layout order.
    ParamVector
);
flat_vector!(
    /// Gradient of the mean loss, laid out like the parameters it came from.
    GradientVector
);

/// `w' = w - lr * g`. The input parameters are left untouched.
pub fn sgd_step(params: &ParamVector, grad: &GradientVector, lr: f64) -> Result<ParamVector> {
    params.check_same_layout(grad)?;
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::config(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    let values: Vec<f64> = params
        .values()
        .iter()
        .zip(grad.values())
        .map(|(w, g)| w - lr * g)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sgd_step"));
    }
    ParamVector::new(values, params.layout().clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(n: usize) -> Layout {
        Layout::new(vec![TensorSlot {
            offset: 0,
            shape: vec![n],
        }])
    }

    #[test]
    fn sgd_direct_arithmetic() {
        let l = layout(2);
        let w = ParamVector::new(vec![1.0, 1.0], l.clone()).unwrap();
        let g = GradientVector::new(vec![0.5, -0.5], l).unwrap();
        let next = sgd_step(&w, &g, 0.1).unwrap();
        assert_eq!(next.values(), &[0.95, 1.05]);
        assert_eq!(w.values(), &[1.0, 1.0]);
    }

    #[test]
    fn zero_grad_and_zero_lr_are_identity() {
        let l = layout(3);
        let w = ParamVector::new(vec![0.3, -2.0, 7.5], l.clone()).unwrap();
        let zero = GradientVector::zeros(l.clone());
        assert_eq!(sgd_step(&w, &zero, 0.5).unwrap(), w);

        let g = GradientVector::new(vec![1.0, 2.0, 3.0], l).unwrap();
        let once = sgd_step(&w, &g, 0.0).unwrap();
        let twice = sgd_step(&once, &g, 0.0).unwrap();
        assert_eq!(twice, w);
    }

    #[test]
    fn mismatched_layouts_are_rejected() {
        let w = ParamVector::new(vec![1.0, 1.0], layout(2)).unwrap();
        let g = GradientVector::new(vec![1.0, 1.0, 1.0], layout(3)).unwrap();
        assert!(matches!(sgd_step(&w, &g, 0.1), Err(Error::Layout { .. })));
        assert!(ParamVector::new(vec![1.0], layout(2)).is_err());
    }
}
