//! Synthetic clustered datasets and the plain-text dataset format.
//!
//! A dataset is a list of labeled feature vectors with contiguous class ids
//! `[0, C)` and an optional group id per sample (a camera-style tag used only
//! by the evaluator's same-group exclusion). The generator draws one center
//! per class and scatters `per_class` points around it; the trailing
//! `noise_dims` coordinates carry label-independent noise (every class is
//! centered at zero there), so an encoder has to learn to discount them.
//!
//! Text format, one sample per line after the header:
//!
//! ```text
//! anchorset-dataset v1 C=<C> D=<D_in> split=<train|query|gallery>
//! y,group,x_1,...,x_D
//! ```
//!
//! Floats are written in shortest round-trip decimal, so `read(write(d))`
//! reproduces `d` exactly. The `split=` token is optional on input and
//! defaults to `train`.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Synthetic samples cycle through this many group ids within each class.
pub const SYNTHETIC_GROUPS: u32 = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Query,
    Gallery,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Query => "query",
            SplitTag::Gallery => "gallery",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(SplitTag::Train),
            "query" => Some(SplitTag::Query),
            "gallery" => Some(SplitTag::Gallery),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub x: Vec<f64>,
    pub y: usize,
    pub group: Option<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<LabeledSample>,
    pub num_classes: usize,
    pub input_dim: usize,
    pub split_tag: SplitTag,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample indices per class, in dataset order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, s) in self.samples.iter().enumerate() {
            by_class[s.y].push(i);
        }
        by_class
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for s in &self.samples {
            counts[s.y] += 1;
        }
        counts
    }

    pub fn with_split_tag(mut self, tag: SplitTag) -> Self {
        self.split_tag = tag;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    pub per_class: usize,
    pub cluster_spread: f64,
    pub center_spread: f64,
    pub noise_dims: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be >= 1".into()));
        }
        if self.per_class == 0 {
            return Err(Error::Config("per_class must be >= 1".into()));
        }
        if self.noise_dims >= self.input_dim {
            return Err(Error::Config(format!(
                "noise_dims ({}) must leave at least one signal dimension (input_dim {})",
                self.noise_dims, self.input_dim
            )));
        }
        for (name, v) in [
            ("cluster_spread", self.cluster_spread),
            ("center_spread", self.center_spread),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Draws class centers and scattered samples. Identical specs (seed included)
/// produce identical datasets.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    generate_synthetic_with_centers(spec).map(|(d, _)| d)
}

/// Like [`generate_synthetic`], but also returns the drawn class centers
/// (noise coordinates are zero for every class).
pub fn generate_synthetic_with_centers(spec: &SyntheticSpec) -> Result<(Dataset, Vec<Vec<f64>>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let signal_dims = spec.input_dim - spec.noise_dims;

    let mut centers = Vec::with_capacity(spec.num_classes);
    for _ in 0..spec.num_classes {
        let mut c = vec![0.0; spec.input_dim];
        for v in c.iter_mut().take(signal_dims) {
            let z: f64 = rng.sample(StandardNormal);
            *v = spec.center_spread * z;
        }
        centers.push(c);
    }

    let mut samples = Vec::with_capacity(spec.num_classes * spec.per_class);
    for (y, center) in centers.iter().enumerate() {
        for k in 0..spec.per_class {
            let mut x = center.clone();
            for v in x.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += spec.cluster_spread * z;
            }
            samples.push(LabeledSample {
                x,
                y,
                group: Some(k as u32 % SYNTHETIC_GROUPS),
            });
        }
    }

    let d = Dataset {
        samples,
        num_classes: spec.num_classes,
        input_dim: spec.input_dim,
        split_tag: SplitTag::Train,
    };
    Ok((d, centers))
}

/// Splits out `queries_per_class` samples of every class as the query set;
/// the rest form the gallery. Selection is a seeded per-class choice, both
/// outputs preserve dataset order, and together they partition the input.
/// Every class must have strictly more than `queries_per_class` samples so
/// the gallery keeps at least one match per query class.
pub fn split_query_gallery(
    d: &Dataset,
    queries_per_class: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if queries_per_class == 0 {
        return Err(Error::Config("queries_per_class must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_query = vec![false; d.len()];
    for (class, indices) in d.class_indices().iter().enumerate() {
        if indices.len() <= queries_per_class {
            return Err(Error::Data(format!(
                "class {class} has {} samples; need more than {queries_per_class} to split",
                indices.len()
            )));
        }
        let mut pool = indices.clone();
        // Partial Fisher-Yates: the first queries_per_class slots become the query picks.
        for i in 0..queries_per_class {
            let j = rng.random_range(i..pool.len());
            pool.swap(i, j);
        }
        for &idx in &pool[..queries_per_class] {
            is_query[idx] = true;
        }
    }

    let pick = |want_query: bool, tag: SplitTag| Dataset {
        samples: d
            .samples
            .iter()
            .zip(&is_query)
            .filter(|(_, &q)| q == want_query)
            .map(|(s, _)| s.clone())
            .collect(),
        num_classes: d.num_classes,
        input_dim: d.input_dim,
        split_tag: tag,
    };
    Ok((
        pick(true, SplitTag::Query),
        pick(false, SplitTag::Gallery),
    ))
}

/// Default desk-scale retrieval benchmark: 50 classes, 30 training samples
/// per class, and a held-out pool per class split into 2 queries and 8
/// gallery samples. The seed shifts centers, scatter, and split choices
/// together.
pub const BENCHMARK_CLASSES: usize = 50;
pub const BENCHMARK_TRAIN_PER_CLASS: usize = 30;
pub const BENCHMARK_INPUT_DIM: usize = 24;
pub const BENCHMARK_NOISE_DIMS: usize = 8;
pub const BENCHMARK_CLUSTER_SPREAD: f64 = 1.0;
pub const BENCHMARK_CENTER_SPREAD: f64 = 2.8;
pub const BENCHMARK_HELDOUT_PER_CLASS: usize = 10;
pub const BENCHMARK_QUERIES_PER_CLASS: usize = 2;

/// Train/query/gallery triple from one spec: `heldout_per_class` samples per
/// class are carved off (seed+1) and split into queries and gallery (seed+2);
/// the rest train.
pub fn benchmark_splits(
    spec: &SyntheticSpec,
    heldout_per_class: usize,
    queries_per_class: usize,
) -> Result<(Dataset, Dataset, Dataset)> {
    let full = generate_synthetic(spec)?;
    let (heldout, train) =
        split_query_gallery(&full, heldout_per_class, spec.seed.wrapping_add(1))?;
    let train = train.with_split_tag(SplitTag::Train);
    let (query, gallery) =
        split_query_gallery(&heldout, queries_per_class, spec.seed.wrapping_add(2))?;
    Ok((train, query, gallery))
}

pub fn default_benchmark(seed: u64) -> (Dataset, Dataset, Dataset) {
    let spec = SyntheticSpec {
        num_classes: BENCHMARK_CLASSES,
        input_dim: BENCHMARK_INPUT_DIM,
        per_class: BENCHMARK_TRAIN_PER_CLASS + BENCHMARK_HELDOUT_PER_CLASS,
        cluster_spread: BENCHMARK_CLUSTER_SPREAD,
        center_spread: BENCHMARK_CENTER_SPREAD,
        noise_dims: BENCHMARK_NOISE_DIMS,
        seed,
    };
    benchmark_splits(&spec, BENCHMARK_HELDOUT_PER_CLASS, BENCHMARK_QUERIES_PER_CLASS)
        .expect("benchmark spec is valid")
}

pub fn write_dataset(d: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!(
        "anchorset-dataset v1 C={} D={} split={}\n",
        d.num_classes,
        d.input_dim,
        d.split_tag.as_str()
    ));
    for s in &d.samples {
        out.push_str(&s.y.to_string());
        out.push(',');
        match s.group {
            Some(g) => out.push_str(&g.to_string()),
            None => out.push('-'),
        }
        for v in &s.x {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    crate::util::write_atomic(path, out.as_bytes())?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let shown = path.display().to_string();
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: shown.clone(),
        line,
        msg,
    };

    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing header".into()))?;
    let tokens: Vec<&str> = header.split_whitespace().collect();
    if tokens.len() < 4 || tokens[0] != "anchorset-dataset" || tokens[1] != "v1" {
        return Err(parse_err(
            1,
            format!("expected header 'anchorset-dataset v1 C=<C> D=<D>', found '{header}'"),
        ));
    }
    let num_classes: usize = tokens[2]
        .strip_prefix("C=")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| parse_err(1, format!("bad class count token '{}'", tokens[2])))?;
    let input_dim: usize = tokens[3]
        .strip_prefix("D=")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| parse_err(1, format!("bad dimension token '{}'", tokens[3])))?;
    let mut split_tag = SplitTag::Train;
    if let Some(tok) = tokens.get(4) {
        split_tag = tok
            .strip_prefix("split=")
            .and_then(SplitTag::parse)
            .ok_or_else(|| parse_err(1, format!("bad split token '{tok}'")))?;
    }
    if num_classes == 0 || input_dim == 0 {
        return Err(parse_err(1, "C and D must be >= 1".into()));
    }

    let mut samples = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let y: usize = fields
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| parse_err(lineno, "bad class id".into()))?;
        if y >= num_classes {
            return Err(parse_err(
                lineno,
                format!("class id {y} out of range for C={num_classes}"),
            ));
        }
        let group_tok = fields
            .next()
            .ok_or_else(|| parse_err(lineno, "missing group field".into()))?;
        let group = if group_tok == "-" {
            None
        } else {
            Some(
                group_tok
                    .parse::<u32>()
                    .map_err(|_| parse_err(lineno, format!("bad group id '{group_tok}'")))?,
            )
        };
        let mut x = Vec::with_capacity(input_dim);
        for tok in fields {
            let v: f64 = tok
                .parse()
                .map_err(|_| parse_err(lineno, format!("bad feature value '{tok}'")))?;
            if !v.is_finite() {
                return Err(parse_err(lineno, format!("non-finite feature value '{tok}'")));
            }
            x.push(v);
        }
        if x.len() != input_dim {
            return Err(parse_err(
                lineno,
                format!("expected {input_dim} feature values, found {}", x.len()),
            ));
        }
        samples.push(LabeledSample { x, y, group });
    }

    Ok(Dataset {
        samples,
        num_classes,
        input_dim,
        split_tag,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 8,
            input_dim: 6,
            per_class: 20,
            cluster_spread: 0.5,
            center_spread: 2.0,
            noise_dims: 2,
            seed: 11,
        }
    }

    #[test]
    fn zero_spread_collapses_to_centers() {
        let spec = SyntheticSpec {
            cluster_spread: 0.0,
            ..small_spec()
        };
        let (d, centers) = generate_synthetic_with_centers(&spec).unwrap();
        for s in &d.samples {
            assert_eq!(s.x, centers[s.y], "sample differs from its class center");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn class_counts_and_ids_are_exact() {
        let spec = small_spec();
        let d = generate_synthetic(&spec).unwrap();
        assert_eq!(d.len(), spec.num_classes * spec.per_class);
        let counts = d.class_counts();
        assert_eq!(counts.len(), spec.num_classes);
        assert!(counts.iter().all(|&c| c == spec.per_class));
        let seen: BTreeSet<usize> = d.samples.iter().map(|s| s.y).collect();
        assert_eq!(seen, (0..spec.num_classes).collect());
    }

    #[test]
    fn groups_cycle_within_each_class() {
        let d = generate_synthetic(&small_spec()).unwrap();
        for indices in d.class_indices() {
            for (k, &i) in indices.iter().enumerate() {
                assert_eq!(d.samples[i].group, Some(k as u32 % SYNTHETIC_GROUPS));
            }
        }
    }

    // Statistical check against the generator's own recorded centers: with
    // per_class draws of spread sigma, each coordinate of the class mean is
    // within 3*sigma/sqrt(per_class) except for rare tail events.
    #[test]
    fn sample_means_track_generated_centers() {
        let spec = small_spec();
        let (d, centers) = generate_synthetic_with_centers(&spec).unwrap();
        let tol = 3.0 * spec.cluster_spread / (spec.per_class as f64).sqrt();
        let mut ok = 0usize;
        let mut total = 0usize;
        for (class, indices) in d.class_indices().iter().enumerate() {
            for dim in 0..spec.input_dim {
                let mean: f64 = indices.iter().map(|&i| d.samples[i].x[dim]).sum::<f64>()
                    / indices.len() as f64;
                total += 1;
                if (mean - centers[class][dim]).abs() <= tol {
                    ok += 1;
                }
            }
        }
        assert!(
            ok as f64 >= 0.95 * total as f64,
            "only {ok}/{total} coordinates within 3-sigma tolerance"
        );
    }

    #[test]
    fn split_partitions_and_counts() {
        let d = generate_synthetic(&small_spec()).unwrap();
        let (q, g) = split_query_gallery(&d, 3, 7).unwrap();
        assert_eq!(q.split_tag, SplitTag::Query);
        assert_eq!(g.split_tag, SplitTag::Gallery);
        assert!(q.class_counts().iter().all(|&c| c == 3));
        assert!(g.class_counts().iter().all(|&c| c == 17));
        assert_eq!(q.len() + g.len(), d.len());

        // Disjoint partition that preserves dataset order: merging by a
        // two-pointer walk over the original reproduces it exactly.
        let mut qi = q.samples.iter().peekable();
        let mut gi = g.samples.iter().peekable();
        for s in &d.samples {
            if qi.peek().is_some_and(|cand| *cand == s) {
                qi.next();
            } else {
                assert_eq!(gi.next().unwrap(), s);
            }
        }
        assert!(qi.next().is_none() && gi.next().is_none());
    }

    #[test]
    fn split_is_deterministic_and_seed_sensitive() {
        let d = generate_synthetic(&small_spec()).unwrap();
        let a = split_query_gallery(&d, 3, 7).unwrap();
        let b = split_query_gallery(&d, 3, 7).unwrap();
        assert_eq!(a, b);
        let c = split_query_gallery(&d, 3, 8).unwrap();
        assert_ne!(a.0, c.0, "different seeds should pick different queries");
    }

    #[test]
    fn split_error_names_the_thin_class() {
        let d = generate_synthetic(&SyntheticSpec {
            per_class: 3,
            ..small_spec()
        })
        .unwrap();
        let err = split_query_gallery(&d, 3, 0).unwrap_err();
        assert!(
            err.to_string().contains("class 0"),
            "error should name the class: {err}"
        );
    }

    #[test]
    fn benchmark_shape() {
        let (train, query, gallery) = default_benchmark(0);
        assert_eq!(train.num_classes, BENCHMARK_CLASSES);
        assert!(train
            .class_counts()
            .iter()
            .all(|&c| c == BENCHMARK_TRAIN_PER_CLASS));
        assert!(query.class_counts().iter().all(|&c| c == 2));
        assert!(gallery.class_counts().iter().all(|&c| c == 8));
        assert_eq!(train.split_tag, SplitTag::Train);
    }

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.txt");
        let mut d = generate_synthetic(&small_spec()).unwrap();
        // Awkward values that expose lossy formatting.
        d.samples[0].x[0] = 0.1 + 0.2;
        d.samples[0].x[1] = 1.0e-17;
        d.samples[1].group = None;
        d.split_tag = SplitTag::Gallery;
        write_dataset(&d, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn header_without_split_defaults_to_train() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.txt");
        std::fs::write(&path, "anchorset-dataset v1 C=2 D=2\n0,-,1,2\n1,0,3,4\n").unwrap();
        let d = read_dataset(&path).unwrap();
        assert_eq!(d.split_tag, SplitTag::Train);
        assert_eq!(d.samples[0].group, None);
        assert_eq!(d.samples[1].x, vec![3.0, 4.0]);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();

        let p1 = dir.path().join("short_row.txt");
        std::fs::write(&p1, "anchorset-dataset v1 C=2 D=3\n0,0,1,2,3\n1,1,4,5\n").unwrap();
        let err = read_dataset(&p1).unwrap_err();
        assert!(
            err.to_string().contains(":3:") && err.to_string().contains("expected 3"),
            "dimension mismatch should point at line 3: {err}"
        );

        let p2 = dir.path().join("bad_class.txt");
        std::fs::write(&p2, "anchorset-dataset v1 C=2 D=1\n5,0,1.5\n").unwrap();
        let err = read_dataset(&p2).unwrap_err();
        assert!(
            err.to_string().contains(":2:") && err.to_string().contains("class id 5"),
            "class range error should point at line 2: {err}"
        );

        let p3 = dir.path().join("no_header.txt");
        std::fs::write(&p3, "").unwrap();
        let err = read_dataset(&p3).unwrap_err();
        assert!(err.to_string().contains("missing header"), "{err}");

        let p4 = dir.path().join("bad_header.txt");
        std::fs::write(&p4, "anchors v2 C=2 D=1\n").unwrap();
        assert!(read_dataset(&p4).is_err());
    }

    #[test]
    fn noise_dims_must_leave_signal() {
        let spec = SyntheticSpec {
            noise_dims: 6,
            ..small_spec()
        };
        assert!(generate_synthetic(&spec).is_err());
    }

    proptest! {
        // Round-trip identity over arbitrary well-formed datasets, not just
        // generator output.
        #[test]
        fn roundtrip_random_datasets(
            rows in prop::collection::vec(
                (0usize..4, prop::option::of(0u32..9), prop::collection::vec(-1.0e6f64..1.0e6, 3)),
                1..40,
            )
        ) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("d.txt");
            let d = Dataset {
                samples: rows
                    .into_iter()
                    .map(|(y, group, x)| LabeledSample { x, y, group })
                    .collect(),
                num_classes: 4,
                input_dim: 3,
                split_tag: SplitTag::Query,
            };
            write_dataset(&d, &path).unwrap();
            prop_assert_eq!(read_dataset(&path).unwrap(), d);
        }
    }
}
