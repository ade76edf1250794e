//! Seeded synthetic corpora, queries and triplets for tests, benchmarks and
//! demos.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dsa::DsaBatch;
use crate::metrics::Qrels;
use crate::model::{EmbeddingVector, QueryRecord};
use crate::store::{IndexDirectory, PackedMatrix};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn page_ids(m: usize) -> Vec<String> {
    (0..m).map(|i| format!("p{i:06}")).collect()
}

fn gaussian(rng: &mut ChaCha8Rng, scale: f64) -> f32 {
    let v: f64 = StandardNormal.sample(rng);
    (v * scale) as f32
}

/// `m` pages of uniform `[-1, 1)` image and text rows.
pub fn uniform_index(m: usize, d: usize, seed: u64) -> IndexDirectory {
    let mut r = rng(seed);
    let mut fill = |n: usize| -> Vec<f32> { (0..n).map(|_| r.gen_range(-1.0f32..1.0)).collect() };
    let images = fill(m * d);
    let texts = fill(m * d);
    let ids = page_ids(m);
    IndexDirectory::from_matrices(
        PackedMatrix::new(d, images, ids.clone()).expect("shape"),
        PackedMatrix::new(d, texts, ids).expect("shape"),
        false,
    )
    .expect("aligned")
}

/// `m` pages whose image and text rows are i.i.d. `N(0, 1/d)`, so both
/// modalities' similarity scores share one distribution.
pub fn gaussian_index(m: usize, d: usize, seed: u64) -> IndexDirectory {
    let mut r = rng(seed);
    let scale = 1.0 / (d as f64).sqrt();
    let images: Vec<f32> = (0..m * d).map(|_| gaussian(&mut r, scale)).collect();
    let texts: Vec<f32> = (0..m * d).map(|_| gaussian(&mut r, scale)).collect();
    let ids = page_ids(m);
    IndexDirectory::from_matrices(
        PackedMatrix::new(d, images, ids.clone()).expect("shape"),
        PackedMatrix::new(d, texts, ids).expect("shape"),
        false,
    )
    .expect("aligned")
}

/// Unified-encoder queries with standard normal entries.
pub fn gaussian_queries(n: usize, d: usize, seed: u64) -> Vec<QueryRecord> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let v = (0..d).map(|_| gaussian(&mut r, 1.0)).collect();
            QueryRecord::unified(format!("q{i:05}"), EmbeddingVector::new(v).expect("finite"))
        })
        .collect()
}

/// A retrieval task where both modalities carry the same relevance signal
/// but on very different scales.
#[derive(Debug, Clone)]
pub struct ScaleMismatchScenario {
    pub index: IndexDirectory,
    pub queries: Vec<QueryRecord>,
    pub qrels: Qrels,
}

pub const SCALE_MISMATCH_QUERIES: usize = 50;
pub const SCALE_MISMATCH_PAGES: usize = 200;
/// Text scores: `TEXT_SCALE * (relevance + TEXT_NOISE * N(0,1))`.
pub const TEXT_SCALE: f64 = 0.2;
pub const TEXT_NOISE: f64 = 0.35;
/// Image scores: `IMAGE_SCALE * (relevance + IMAGE_NOISE * N(0,1))`.
pub const IMAGE_SCALE: f64 = 3.0;
pub const IMAGE_NOISE: f64 = 0.7;

/// Queries are one-hot (`d` = number of queries), so page row `i`, column
/// `j` is exactly the score of page `i` for query `j`. Each query has one
/// gold page. The text channel is a small-scale, less noisy copy of the
/// relevance signal; the image channel is large-scale and noisier, so a raw
/// linear blend is dominated by the weaker modality.
pub fn scale_mismatch_scenario(seed: u64) -> ScaleMismatchScenario {
    let (nq, m) = (SCALE_MISMATCH_QUERIES, SCALE_MISMATCH_PAGES);
    let mut r = rng(seed);
    let mut pages: Vec<usize> = (0..m).collect();
    pages.shuffle(&mut r);
    let gold: Vec<usize> = pages[..nq].to_vec();

    let mut images = vec![0f32; m * nq];
    let mut texts = vec![0f32; m * nq];
    for i in 0..m {
        for j in 0..nq {
            let rel = if gold[j] == i { 1.0 } else { 0.0 };
            let nt: f64 = StandardNormal.sample(&mut r);
            let ni: f64 = StandardNormal.sample(&mut r);
            texts[i * nq + j] = (TEXT_SCALE * (rel + TEXT_NOISE * nt)) as f32;
            images[i * nq + j] = (IMAGE_SCALE * (rel + IMAGE_NOISE * ni)) as f32;
        }
    }
    let ids = page_ids(m);
    let index = IndexDirectory::from_matrices(
        PackedMatrix::new(nq, images, ids.clone()).expect("shape"),
        PackedMatrix::new(nq, texts, ids.clone()).expect("shape"),
        false,
    )
    .expect("aligned");

    let mut qrels = Qrels::new();
    let queries = (0..nq)
        .map(|j| {
            let mut v = vec![0f32; nq];
            v[j] = 1.0;
            let mut q = QueryRecord::unified(format!("q{j:03}"), EmbeddingVector::new(v).unwrap());
            q.gold_page_ids.insert(ids[gold[j]].clone());
            qrels.add(q.query_id.clone(), ids[gold[j]].clone());
            q
        })
        .collect();
    ScaleMismatchScenario {
        index,
        queries,
        qrels,
    }
}

pub const SEPARABLE_TRIPLETS: usize = 8;

/// Eight triplets over 8-dimensional features. Query and image features are
/// noisy copies of the same basis vector; text features are a signed
/// permutation of it, so a linear text encoder can align them exactly.
pub fn separable_triplets(seed: u64) -> DsaBatch {
    let n = SEPARABLE_TRIPLETS;
    let mut r = rng(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut r);
    let signs: Vec<f64> = (0..n)
        .map(|_| if r.gen_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    let mut noisy = |f: &dyn Fn(usize, usize) -> f64| {
        Array2::from_shape_fn((n, n), |(i, k)| f(i, k)).mapv(|v| {
            v + {
                let z: f64 = StandardNormal.sample(&mut r);
                0.05 * z
            }
        })
    };
    let query = noisy(&|i, k| f64::from(u8::from(i == k)));
    let image = noisy(&|i, k| f64::from(u8::from(i == k)));
    let text = noisy(&|i, k| if perm[i] == k { signs[i] } else { 0.0 });
    DsaBatch::new(query, image, text).expect("shapes agree")
}
