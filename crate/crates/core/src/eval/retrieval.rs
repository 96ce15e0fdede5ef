//! Bidirectional HE/ST retrieval by cosine similarity.

use serde::Serialize;

use super::embed_split;
use crate::alignment::{normalize_rows, similarity_matrix};
use crate::cell_graph::Scale;
use crate::datagen::{Dataset, Split};
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::training::Model;

pub const DEFAULT_PERCENTS: [usize; 3] = [5, 10, 15];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RetrievalReport {
    pub scale: Scale,
    pub n: usize,
    pub percents: Vec<usize>,
    /// Image queries against cell-graph candidates, one value per percent.
    pub he_to_st: Vec<f64>,
    pub st_to_he: Vec<f64>,
}

impl RetrievalReport {
    pub fn recall(&self, p: usize, he_query: bool) -> Option<f64> {
        let i = self.percents.iter().position(|&q| q == p)?;
        Some(if he_query { self.he_to_st[i] } else { self.st_to_he[i] })
    }
}

/// Fraction of rows whose diagonal entry ranks within the top `⌈p·N/100⌉`
/// columns. Equal scores rank the lower column index first.
pub fn recall_at_percent(sim: &Tensor, p: usize) -> Result<f64> {
    let n = sim.rows();
    if sim.shape() != [n, n] || n == 0 {
        return Err(Error::invalid(format!(
            "retrieval needs a square similarity matrix, got {:?}",
            sim.shape()
        )));
    }
    let k = (p * n).div_ceil(100);
    let hits = (0..n)
        .filter(|&i| {
            let row = sim.row_slice(i);
            let own = row[i];
            let rank = row
                .iter()
                .enumerate()
                .filter(|&(j, &s)| s > own || (s == own && j < i))
                .count();
            rank < k
        })
        .count();
    Ok(hits as f64 / n as f64)
}

fn transpose(t: &Tensor) -> Result<Tensor> {
    let (r, c) = (t.rows(), t.cols());
    let data = (0..c).flat_map(|j| (0..r).map(move |i| t.data()[i * c + j])).collect();
    Tensor::matrix(c, r, data)
}

/// Recall in both directions for paired embedding rows.
pub fn retrieval_from_embeddings(
    image: &[Vec<f64>],
    st: &[Vec<f64>],
    scale: Scale,
    percents: &[usize],
) -> Result<RetrievalReport> {
    if image.len() != st.len() {
        return Err(Error::invalid("retrieval: modality row counts differ"));
    }
    if image.len() < 2 {
        return Err(Error::Dataset(format!(
            "retrieval needs at least 2 test tiles, found {}",
            image.len()
        )));
    }
    let sim = similarity_matrix(
        &normalize_rows(&Tensor::from_rows(image)?)?,
        &normalize_rows(&Tensor::from_rows(st)?)?,
    )?;
    let back = transpose(&sim)?;
    Ok(RetrievalReport {
        scale,
        n: image.len(),
        percents: percents.to_vec(),
        he_to_st: percents
            .iter()
            .map(|&p| recall_at_percent(&sim, p))
            .collect::<Result<_>>()?,
        st_to_he: percents
            .iter()
            .map(|&p| recall_at_percent(&back, p))
            .collect::<Result<_>>()?,
    })
}

/// Retrieval over the test split at `scale`.
pub fn retrieval(model: &Model, ds: &Dataset, scale: Scale) -> Result<RetrievalReport> {
    let emb = embed_split(model, ds, Split::Test)?;
    let s = scale.index();
    let image: Vec<Vec<f64>> = emb.iter().map(|e| e.image[s].clone()).collect();
    let st: Vec<Vec<f64>> = emb.iter().map(|e| e.st[s].clone()).collect();
    retrieval_from_embeddings(&image, &st, scale, &DEFAULT_PERCENTS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Rng;
    use proptest::{prop_assert, proptest};

    #[test]
    fn perfect_alignment_recalls_everything() {
        let n = 20;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect())
            .collect();
        let rep = retrieval_from_embeddings(&rows, &rows, Scale::Macro, &DEFAULT_PERCENTS).unwrap();
        assert_eq!(rep.he_to_st, vec![1.0; 3]);
        assert_eq!(rep.st_to_he, vec![1.0; 3]);
    }

    #[test]
    fn anti_aligned_counterparts_are_never_found() {
        let n = 40;
        // Counterpart similarity is the lowest in every row.
        let data: Vec<f64> = (0..n * n).map(|k| if k / n == k % n { -1.0 } else { 0.5 }).collect();
        let sim = Tensor::matrix(n, n, data).unwrap();
        for p in 1..100 {
            if p * n < 100 * (n - 1) {
                assert_eq!(recall_at_percent(&sim, p).unwrap(), 0.0, "p = {p}");
            }
        }
        assert_eq!(recall_at_percent(&sim, 100).unwrap(), 1.0);
    }

    #[test]
    fn ties_favor_lower_index() {
        let sim = Tensor::matrix(2, 2, vec![1.0; 4]).unwrap();
        // Row 0 ranks first, row 1 ranks second; top-1 finds only row 0.
        assert_eq!(recall_at_percent(&sim, 50).unwrap(), 0.5);
    }

    #[test]
    fn cutoff_rounds_up() {
        // 5% of 10 candidates is half a slot, so the top-1 cutoff applies.
        let mut data = vec![0.0; 100];
        for i in 0..10 {
            data[i * 10 + i] = 1.0;
        }
        let sim = Tensor::matrix(10, 10, data).unwrap();
        assert_eq!(recall_at_percent(&sim, 5).unwrap(), 1.0);
    }

    #[test]
    fn too_few_rows_is_an_error() {
        assert!(retrieval_from_embeddings(&[vec![1.0]], &[vec![1.0]], Scale::Macro, &[10]).is_err());
    }

    proptest! {
        #[test]
        fn recall_is_monotone_in_p(seed in 0u64..500, n in 2usize..40) {
            let mut rng = Rng::new(seed);
            let mut draw = || (0..n).map(|_| (0..4).map(|_| rng.normal()).collect()).collect::<Vec<Vec<f64>>>();
            let (a, b) = (draw(), draw());
            let rep = retrieval_from_embeddings(&a, &b, Scale::Micro, &[5, 10, 15, 50]).unwrap();
            for r in [&rep.he_to_st, &rep.st_to_he] {
                prop_assert!(r.windows(2).all(|w| w[0] <= w[1]));
            }
        }
    }
}
