//! In-memory features for a manifest, indexed for sampling and evaluation.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::features::{FeatureSpec, GlobalFeature, ImageFeatures};
use crate::geometry::Category;

#[derive(Debug, Clone, PartialEq)]
pub struct Product {
    pub id: String,
    pub category: usize,
    pub features: GlobalFeature,
}

/// One compatible (scene, product) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PairRef {
    /// Position in the source manifest.
    pub example: usize,
    pub scene: usize,
    pub product: usize,
    pub category: usize,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub spec: FeatureSpec,
    pub categories: Vec<Category>,
    pub scenes: Vec<ImageFeatures>,
    /// Sorted by id.
    pub products: Vec<Product>,
    pub pairs: Vec<PairRef>,
}

impl Corpus {
    /// Builds a corpus where scene `i` belongs to pair `i`. Products are
    /// deduplicated by id; the first feature vector seen for an id wins.
    pub fn new(
        spec: FeatureSpec,
        categories: Vec<Category>,
        entries: Vec<(ImageFeatures, String, usize, GlobalFeature)>,
    ) -> Result<Self> {
        let mut by_id: BTreeMap<String, (usize, GlobalFeature)> = BTreeMap::new();
        for (_, id, cat, f) in &entries {
            if *cat >= categories.len() {
                return Err(Error::Shape(format!("category index {cat} out of range")));
            }
            match by_id.get(id) {
                Some((c, _)) if c != cat => {
                    return Err(Error::InvalidConfig(format!("product {id:?} listed under two categories")))
                }
                Some(_) => {}
                None => {
                    by_id.insert(id.clone(), (*cat, f.clone()));
                }
            }
        }
        let products: Vec<Product> = by_id
            .into_iter()
            .map(|(id, (category, features))| Product { id, category, features })
            .collect();
        let index: BTreeMap<&str, usize> =
            products.iter().enumerate().map(|(i, p)| (p.id.as_str(), i)).collect();

        let mut scenes = Vec::with_capacity(entries.len());
        let mut pairs = Vec::with_capacity(entries.len());
        for (i, (scene, id, category, _)) in entries.iter().enumerate() {
            scene.check(&spec)?;
            pairs.push(PairRef { example: i, scene: i, product: index[id.as_str()], category: *category });
            scenes.push(scene.clone());
        }
        for p in &products {
            if p.features.0.len() != spec.d1 {
                return Err(Error::Shape(format!("product {:?} feature length", p.id)));
            }
        }
        Ok(Self { spec, categories, scenes, products, pairs })
    }

    pub fn product_index(&self, id: &str) -> Option<usize> {
        self.products.binary_search_by(|p| p.id.as_str().cmp(id)).ok()
    }

    /// Pairs at the given manifest positions.
    pub fn subset(&self, examples: &[usize]) -> Vec<PairRef> {
        examples.iter().map(|&i| self.pairs[i]).collect()
    }
}

/// Candidate products per category, in product-id order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Catalog {
    pub by_category: Vec<Vec<usize>>,
}

impl Catalog {
    /// Distinct products referenced by `pairs`.
    pub fn from_pairs(n_categories: usize, pairs: &[PairRef]) -> Self {
        let mut by_category = vec![Vec::new(); n_categories];
        for p in pairs {
            by_category[p.category].push(p.product);
        }
        for v in &mut by_category {
            v.sort_unstable();
            v.dedup();
        }
        Self { by_category }
    }

    /// Every product in the corpus.
    pub fn all(corpus: &Corpus) -> Self {
        let mut by_category = vec![Vec::new(); corpus.categories.len()];
        for (i, p) in corpus.products.iter().enumerate() {
            by_category[p.category].push(i);
        }
        Self { by_category }
    }

    pub fn products(&self, category: usize) -> &[usize] {
        self.by_category.get(category).map_or(&[], Vec::as_slice)
    }
}

/// Corpus of standard-normal features: `products_per_category` products in
/// each category and `n_pairs` scenes. The first scenes pair with each
/// product in turn; the rest pair with random products.
pub fn random_corpus(
    spec: FeatureSpec,
    n_categories: usize,
    products_per_category: usize,
    n_pairs: usize,
    seed: u64,
) -> Result<Corpus> {
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    use crate::features::FeatureMap;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    fn vector(rng: &mut impl Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
    }
    let categories: Vec<Category> =
        (0..n_categories).map(|id| Category { id, name: format!("category{id}") }).collect();
    let products: Vec<(String, usize, GlobalFeature)> = (0..n_categories * products_per_category)
        .map(|i| (format!("p{i:04}"), i / products_per_category.max(1), GlobalFeature(vector(&mut rng, spec.d1))))
        .collect();
    let mut entries = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let scene = ImageFeatures {
            global: GlobalFeature(vector(&mut rng, spec.d1)),
            map: FeatureMap { w: spec.w, h: spec.h, d2: spec.d2, values: vector(&mut rng, spec.regions() * spec.d2) },
        };
        let k = if i < products.len() { i } else { rng.gen_range(0..products.len()) };
        let (id, cat, f) = products[k].clone();
        entries.push((scene, id, cat, f));
    }
    Corpus::new(spec, categories, entries)
}
