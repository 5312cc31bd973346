//! CTC-based length adaptation: consecutive frames sharing the same argmax
//! label collapse into their arithmetic mean. Blank-labeled runs are kept.
//! Label decisions are constants; gradients flow through the averaging.

use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::numkernel::graph::{Graph, NodeId};
use ndarray::Array2;

/// Per-frame argmax labels; ties resolve to the lowest index.
pub fn argmax_labels(logprobs: &Array2<f64>) -> Vec<usize> {
    logprobs
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for (k, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Maximal runs of equal labels as (start, len) spans.
pub fn label_runs(labels: &[usize]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = 0;
    for t in 1..=labels.len() {
        if t == labels.len() || labels[t] != labels[start] {
            runs.push((start, t - start));
            start = t;
        }
    }
    runs
}

/// Averaging matrix: row `j` holds `1/len_j` over run `j`'s frames.
pub fn collapse_matrix(labels: &[usize]) -> Array2<f64> {
    let runs = label_runs(labels);
    let mut w = Array2::zeros((runs.len(), labels.len()));
    for (j, &(start, len)) in runs.iter().enumerate() {
        for t in start..start + len {
            w[[j, t]] = 1.0 / len as f64;
        }
    }
    w
}

/// Graph-level collapse of one item given its per-frame labels.
pub fn ctc_collapse_node(g: &mut Graph, h: NodeId, labels: &[usize]) -> (NodeId, usize) {
    let w = collapse_matrix(labels);
    let n_runs = w.nrows();
    (g.linmap(w, h), n_runs)
}

/// Batched value-level collapse: one `logprobs` matrix per item, aligned with
/// the item's valid frames.
pub fn ctc_collapse(h: &FeatureSequence, logprobs: &[Array2<f64>]) -> Result<FeatureSequence> {
    if logprobs.len() != h.batch_size() {
        return Err(Error::Shape(format!(
            "{} logprob matrices for batch of {}",
            logprobs.len(),
            h.batch_size()
        )));
    }
    let mut items = Vec::with_capacity(h.batch_size());
    let mut total_in = 0usize;
    let mut total_out = 0usize;
    for b in 0..h.batch_size() {
        if logprobs[b].nrows() != h.lengths()[b] {
            return Err(Error::Shape(format!(
                "item {b}: {} logprob rows for length {}",
                logprobs[b].nrows(),
                h.lengths()[b]
            )));
        }
        let labels = argmax_labels(&logprobs[b]);
        let w = collapse_matrix(&labels);
        total_in += h.lengths()[b];
        total_out += w.nrows();
        items.push(w.dot(&h.item(b)));
    }
    let rate = if total_in == 0 {
        h.frame_rate_hz()
    } else {
        h.frame_rate_hz() * total_out as f64 / total_in as f64
    };
    FeatureSequence::from_items(&items, rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn logprobs_for(labels: &[usize], width: usize) -> Array2<f64> {
        let mut lp = Array2::from_elem((labels.len(), width), -10.0);
        for (t, &l) in labels.iter().enumerate() {
            lp[[t, l]] = -0.1;
        }
        lp
    }

    #[test]
    fn runs_partition_into_three_groups() {
        // labels [a, a, blank, b, b, b] with a=0, b=1, blank=2
        let labels = [0usize, 0, 2, 1, 1, 1];
        assert_eq!(label_runs(&labels), vec![(0, 2), (2, 1), (3, 3)]);

        let h = Array2::from_shape_fn((6, 2), |(i, j)| (i * 2 + j) as f64);
        let fs = FeatureSequence::single(h.clone(), 50.0).unwrap();
        let lp = logprobs_for(&labels, 3);
        let out = ctc_collapse(&fs, &[lp]).unwrap();
        assert_eq!(out.lengths(), &[3]);
        // first output is mean(h1, h2), blank run kept, last is mean of rows 3..6
        let expect = [[1.0, 2.0], [4.0, 5.0], [8.0, 9.0]];
        for (j, row) in expect.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                assert!((out.item(0)[[j, c]] - v).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn constant_labels_collapse_to_one_vector() {
        let labels = [1usize; 13];
        let h = Array2::ones((13, 4));
        let fs = FeatureSequence::single(h, 50.0).unwrap();
        let out = ctc_collapse(&fs, &[logprobs_for(&labels, 3)]).unwrap();
        assert_eq!(out.lengths(), &[1]);
    }

    #[test]
    fn alternating_labels_do_not_compress() {
        let labels = [0usize, 1, 0, 1];
        let h = Array2::ones((4, 2));
        let fs = FeatureSequence::single(h, 50.0).unwrap();
        let out = ctc_collapse(&fs, &[logprobs_for(&labels, 3)]).unwrap();
        assert_eq!(out.lengths(), &[4]);
    }

    #[test]
    fn run_means_and_frame_conservation_on_random_cases() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        for _ in 0..1000 {
            let t_len = rng.random_range(1..30);
            let width = rng.random_range(2..5);
            let lp = Array2::from_shape_fn((t_len, width), |_| rng.random_range(-3.0..0.0));
            let h = Array2::from_shape_fn((t_len, 3), |_| rng.random_range(-1.0..1.0));
            let labels = argmax_labels(&lp);
            let runs = label_runs(&labels);
            let fs = FeatureSequence::single(h.clone(), 50.0).unwrap();
            let out = ctc_collapse(&fs, &[lp]).unwrap();
            assert_eq!(out.lengths()[0], runs.len());
            // total frame count conserved across runs
            assert_eq!(runs.iter().map(|&(_, l)| l).sum::<usize>(), t_len);
            // each output equals the run mean
            for (j, &(start, len)) in runs.iter().enumerate() {
                for c in 0..3 {
                    let mean: f64 =
                        (start..start + len).map(|t| h[[t, c]]).sum::<f64>() / len as f64;
                    assert!((out.item(0)[[j, c]] - mean).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn argmax_ties_resolve_to_lowest_index() {
        let lp = array![[0.5, 0.5, 0.1]];
        assert_eq!(argmax_labels(&lp), vec![0]);
    }
}
