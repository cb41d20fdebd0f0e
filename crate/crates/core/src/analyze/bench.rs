use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::graph::{GraphError, Mode, ModelGraph};
use crate::tensor::Tensor;

/// Activation bytes touched by one inference pass.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Traffic {
    /// Input plus output buffer bytes of each top-level node.
    pub per_node: Vec<u64>,
    /// Sum of `per_node`.
    pub bytes_moved: u64,
    /// Largest single node's live input plus output bytes.
    pub peak_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub batch: usize,
    pub repetitions: usize,
    pub samples_ns: Vec<u64>,
    pub median_ns: u64,
    pub traffic: Traffic,
}

/// Counts `f32` activation bytes from shape inference alone.
pub fn activation_traffic(g: &ModelGraph, batch: usize) -> Result<Traffic, GraphError> {
    let shapes = g.shapes()?;
    let bytes = |s: &[usize]| (s.iter().product::<usize>() * batch * 4) as u64;
    let per_node: Vec<u64> = shapes.windows(2).map(|w| bytes(&w[0]) + bytes(&w[1])).collect();
    Ok(Traffic {
        bytes_moved: per_node.iter().sum(),
        peak_bytes: per_node.iter().copied().max().unwrap_or(0),
        per_node,
    })
}

/// Times `repetitions` inference passes on one thread after one warm-up pass.
pub fn bench(g: &ModelGraph, batch: usize, repetitions: usize, seed: u64) -> Result<BenchReport, GraphError> {
    let traffic = activation_traffic(g, batch)?;
    let mut shape = vec![batch];
    shape.extend(&g.input_shape);
    let x = Tensor::randn(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("single-thread pool");
    let samples_ns = pool.install(|| -> Result<Vec<u64>, GraphError> {
        g.forward(&x, Mode::Infer)?;
        let mut out = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            let t = Instant::now();
            std::hint::black_box(g.forward(&x, Mode::Infer)?);
            out.push(t.elapsed().as_nanos() as u64);
        }
        Ok(out)
    })?;
    let mut sorted = samples_ns.clone();
    sorted.sort_unstable();
    let median_ns = sorted.get(sorted.len() / 2).copied().unwrap_or(0);
    Ok(BenchReport {
        batch,
        repetitions,
        samples_ns,
        median_ns,
        traffic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Node;
    use crate::tensor::ConvParams;

    #[test]
    fn two_layer_bytes_by_hand() {
        let c = ConvParams::new(Tensor::zeros(&[4, 2, 3, 3]), None, 1, 1).unwrap();
        let g = ModelGraph::new("two", vec![2, 5, 5], vec![Node::Conv(c), Node::Relu]);
        let t = activation_traffic(&g, 3).unwrap();
        // conv: (2*25 + 4*25) floats in and out, relu: (100 + 100).
        assert_eq!(t.per_node, vec![3 * 4 * 150, 3 * 4 * 200]);
        assert_eq!(t.bytes_moved, 3 * 4 * 350);
        assert_eq!(t.peak_bytes, 3 * 4 * 200);
    }

    #[test]
    fn single_repetition_single_sample() {
        let g = ModelGraph::new("r", vec![1, 2, 2], vec![Node::Relu]);
        let r = bench(&g, 2, 1, 0).unwrap();
        assert_eq!(r.samples_ns.len(), 1);
    }
}
