//! Dataset-size weighted averaging of two collaborators' tensors.

use fedstar::tensorstore::{aggregate_weighted_mean, ModelTensor, Tag, WeightedContribution};

fn contribution(origin: &str, samples: f64, values: Vec<f32>) -> WeightedContribution {
    WeightedContribution {
        origin: origin.into(),
        weight: samples,
        tensors: vec![ModelTensor::new("w", vec![2, 2], values).with_key(3, origin, [Tag::Trained])],
    }
}

fn main() -> anyhow::Result<()> {
    let inputs = vec![
        contribution("hospital_a", 300.0, vec![1.0, 2.0, 3.0, 4.0]),
        contribution("hospital_b", 100.0, vec![5.0, 6.0, 7.0, 8.0]),
    ];
    let out = aggregate_weighted_mean(&inputs, 3)?;
    for t in &out {
        println!("{} -> {:?}", t.key, t.data);
    }
    // 0.75 * a + 0.25 * b
    assert_eq!(out[0].data, vec![2.0, 3.0, 4.0, 5.0]);
    Ok(())
}
