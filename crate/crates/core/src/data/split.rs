use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};

/// Assignment of every training sample to one of `subsets` disjoint bags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPlan {
    pub subsets: usize,
    pub seed: u64,
    /// `assignment[i]` is the bag of sample `i`.
    pub assignment: Vec<usize>,
}

impl SplitPlan {
    /// Sample indices of bag `subset`, ascending.
    pub fn indices(&self, subset: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|&(_, &s)| s == subset)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.subsets];
        for &s in &self.assignment {
            sizes[s] += 1;
        }
        sizes
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("N={} seed={}\n", self.subsets, self.seed);
        for (i, s) in self.assignment.iter().enumerate() {
            writeln!(out, "{i},{s}").expect("writing to a String");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty split file".into()))?;
        let bad_header = || Error::Format(format!("bad split header {header:?}"));
        let mut fields = header.split_whitespace();
        let subsets = fields
            .next()
            .and_then(|f| f.strip_prefix("N="))
            .and_then(|v| v.parse().ok())
            .ok_or_else(bad_header)?;
        let seed = fields
            .next()
            .and_then(|f| f.strip_prefix("seed="))
            .and_then(|v| v.parse().ok())
            .ok_or_else(bad_header)?;
        let mut assignment = Vec::new();
        for (lineno, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let parsed = line
                .split_once(',')
                .and_then(|(i, s)| Some((i.trim().parse::<usize>().ok()?, s.trim().parse::<usize>().ok()?)));
            match parsed {
                Some((i, s)) if i == assignment.len() && s < subsets => assignment.push(s),
                _ => return Err(Error::Format(format!("bad split line {}: {line:?}", lineno + 2))),
            }
        }
        Ok(Self {
            subsets,
            seed,
            assignment,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Shuffles each class with `seed` and deals its samples round-robin into
/// `subsets` bags. The dealing position carries over from one class to the
/// next, so leftover samples spread across bags starting from bag 0.
pub fn stratified_disjoint_split(train: &Dataset, subsets: usize, seed: u64) -> Result<SplitPlan> {
    if subsets == 0 {
        return Err(Error::Split("ensemble size must be >= 1".into()));
    }
    let mut by_class = vec![Vec::new(); train.class_count];
    for (i, &l) in train.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < subsets {
            return Err(Error::Split(format!(
                "class {class} has {} samples, fewer than {subsets} subsets",
                members.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0; train.len()];
    let mut next = 0;
    for members in &mut by_class {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            assignment[i] = next;
            next = (next + 1) % subsets;
        }
    }
    Ok(SplitPlan {
        subsets,
        seed,
        assignment,
    })
}

/// One bag per class group; the groups must partition the class ids.
pub fn semantic_split_override(train: &Dataset, groups: &[Vec<usize>]) -> Result<SplitPlan> {
    if groups.is_empty() {
        return Err(Error::Partition("no class groups given".into()));
    }
    let mut owner = vec![None; train.class_count];
    for (g, group) in groups.iter().enumerate() {
        if group.is_empty() {
            return Err(Error::Partition(format!("group {g} is empty")));
        }
        for &c in group {
            match owner.get_mut(c) {
                None => return Err(Error::Partition(format!("class {c} outside [0,{})", train.class_count))),
                Some(Some(prev)) => return Err(Error::Partition(format!("class {c} in groups {prev} and {g}"))),
                Some(slot) => *slot = Some(g),
            }
        }
    }
    let missing: BTreeSet<_> = owner
        .iter()
        .enumerate()
        .filter(|(_, o)| o.is_none())
        .map(|(c, _)| c)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Partition(format!("classes {missing:?} are in no group")));
    }
    let assignment = train
        .labels
        .iter()
        .map(|&l| owner[l].expect("every class owned"))
        .collect();
    Ok(SplitPlan {
        subsets: groups.len(),
        seed: 0,
        assignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labelled(counts: &[usize]) -> Dataset {
        let labels: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
            .collect();
        Dataset::new((1, 1, 1), vec![0; labels.len()], labels, counts.len()).unwrap()
    }

    fn per_class(ds: &Dataset, plan: &SplitPlan, subset: usize) -> Vec<usize> {
        let mut h = vec![0; ds.class_count];
        for i in plan.indices(subset) {
            h[ds.labels[i]] += 1;
        }
        h
    }

    #[test]
    fn forced_stratification() {
        let ds = labelled(&[10, 6]);
        let plan = stratified_disjoint_split(&ds, 2, 3).unwrap();
        assert_eq!(per_class(&ds, &plan, 0), vec![5, 3]);
        assert_eq!(per_class(&ds, &plan, 1), vec![5, 3]);
    }

    #[test]
    fn single_subset_is_identity() {
        let ds = labelled(&[4, 3, 5]);
        let plan = stratified_disjoint_split(&ds, 1, 0).unwrap();
        assert_eq!(plan.indices(0), (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn five_way_split_exhaustive_check() {
        let ds = labelled(&[100, 100, 100]);
        let plan = stratified_disjoint_split(&ds, 5, 11).unwrap();
        let mut seen = BTreeSet::new();
        for s in 0..5 {
            assert_eq!(per_class(&ds, &plan, s), vec![20, 20, 20]);
            for i in plan.indices(s) {
                assert!(seen.insert(i), "index {i} in two subsets");
            }
        }
        assert_eq!(seen, (0..300).collect());
    }

    #[test]
    fn remainders_keep_sizes_balanced() {
        let ds = labelled(&[7, 7, 7]);
        let plan = stratified_disjoint_split(&ds, 2, 5).unwrap();
        let sizes = plan.sizes();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn too_few_samples_is_split_error() {
        let ds = labelled(&[5, 1]);
        assert!(matches!(stratified_disjoint_split(&ds, 2, 0), Err(Error::Split(_))));
    }

    #[test]
    fn override_groups() {
        let ds = labelled(&[3, 4]);
        let plan = semantic_split_override(&ds, &[vec![0], vec![1]]).unwrap();
        assert_eq!(plan.indices(0), vec![0, 1, 2]);
        assert_eq!(plan.indices(1), vec![3, 4, 5, 6]);

        let ds = labelled(&[3, 4, 5]);
        let plan = semantic_split_override(&ds, &[vec![0, 1], vec![2]]).unwrap();
        assert_eq!(plan.sizes(), vec![7, 5]);

        let overlap = semantic_split_override(&ds, &[vec![0, 1], vec![1, 2]]);
        assert!(matches!(overlap, Err(Error::Partition(_))));
        let incomplete = semantic_split_override(&ds, &[vec![0], vec![2]]);
        assert!(matches!(incomplete, Err(Error::Partition(_))));
    }

    #[test]
    fn text_round_trip() {
        let ds = labelled(&[4, 4]);
        let plan = stratified_disjoint_split(&ds, 2, 42).unwrap();
        let text = plan.to_text();
        assert!(text.starts_with("N=2 seed=42\n"));
        assert_eq!(SplitPlan::from_text(&text).unwrap(), plan);
        assert!(SplitPlan::from_text("N=2\n0,0\n").is_err());
        assert!(SplitPlan::from_text("N=2 seed=1\n0,5\n").is_err());
    }
}
