use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::numeric::{loss, predict, ModelSpec, ParamVector};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub mean_loss: f64,
}

/// Top-1 accuracy and mean cross-entropy over the whole test split.
pub fn evaluate(params: &ParamVector, test: &Dataset, spec: &ModelSpec) -> Result<EvalResult> {
    if test.is_empty() {
        return Err(Error::config("cannot evaluate on an empty test set"));
    }
    let batch = test.as_batch()?;
    let predicted = predict(params, &batch, spec)?;
    let correct = predicted.iter().zip(test.labels()).filter(|(p, y)| p == y).count();
    Ok(EvalResult {
        accuracy: correct as f64 / test.len() as f64,
        mean_loss: loss(params, &batch, spec)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_blobs, Split};
    use crate::numeric::init_params;

    #[test]
    fn empty_test_set_is_rejected() {
        let spec = ModelSpec::logistic(2, 2, 0);
        let empty = Dataset::new(vec![], vec![], 2, 2, Split::Test).unwrap();
        let p = init_params(&spec).unwrap();
        assert!(evaluate(&p, &empty, &spec).is_err());
    }

    #[test]
    fn separating_weights_score_one() {
        // Two points on either side of x0 = 0; the weights read x0 directly.
        let test = Dataset::new(vec![-1.0, 0.0, 2.0, 0.5], vec![0, 1], 2, 2, Split::Test).unwrap();
        let spec = ModelSpec::logistic(2, 2, 0);
        let mut p = init_params(&spec).unwrap();
        for v in p.values_mut() {
            *v = 0.0;
        }
        // W is [input, class] row-major, then the bias.
        p.values_mut()[0] = -1.0;
        p.values_mut()[1] = 1.0;
        let r = evaluate(&p, &test, &spec).unwrap();
        assert_eq!(r.accuracy, 1.0);
        let again = evaluate(&p, &test, &spec).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn random_init_is_near_chance() {
        let test = generate_blobs(2, 500, 4, 9).unwrap();
        let accs: Vec<f64> = (0..20)
            .map(|s| {
                let spec = ModelSpec::logistic(4, 2, s);
                evaluate(&init_params(&spec).unwrap(), &test, &spec).unwrap().accuracy
            })
            .collect();
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 0.5).abs() <= 0.1, "mean accuracy {mean}");
    }
}
