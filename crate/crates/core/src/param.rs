//! Flat parameter storage segmented into named groups.
//!
//! Every model, optimizer buffer and checkpoint in the crate is a [`ParamVector`]:
//! one contiguous `f64` buffer plus an ordered table of named segments that tile it
//! exactly. Arithmetic between vectors requires identical layouts; reductions are
//! summed strictly left to right so results are bitwise reproducible.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named contiguous segment `[offset, offset + len)` of a parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Group {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Ordered group table. Shared behind an `Arc` so clones of a vector are cheap to
/// compare for layout equality.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    groups: Vec<Group>,
    len: usize,
}

impl Layout {
    /// Build a layout from `(name, length)` pairs laid out back to back.
    pub fn from_lengths<S: Into<String>>(parts: impl IntoIterator<Item = (S, usize)>) -> Result<Self> {
        let mut offset = 0;
        let groups = parts
            .into_iter()
            .map(|(name, len)| {
                let g = Group {
                    name: name.into(),
                    offset,
                    len,
                };
                offset += len;
                g
            })
            .collect();
        Self::from_groups(groups)
    }

    /// Validate an explicit group table: contiguous, non-overlapping, uniquely named,
    /// covering `[0, len)`.
    pub fn from_groups(groups: Vec<Group>) -> Result<Self> {
        let mut expected = 0usize;
        let mut seen = BTreeSet::new();
        for g in &groups {
            if g.offset != expected {
                return Err(Error::Layout(format!(
                    "group `{}` starts at {} but previous segment ended at {}",
                    g.name, g.offset, expected
                )));
            }
            if !seen.insert(g.name.as_str()) {
                return Err(Error::Layout(format!("duplicate group name `{}`", g.name)));
            }
            expected = g
                .offset
                .checked_add(g.len)
                .ok_or_else(|| Error::Layout(format!("group `{}` overflows", g.name)))?;
        }
        Ok(Layout {
            groups,
            len: expected,
        })
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn group(&self, name: &str) -> Option<&Group> {
        self.groups.iter().find(|g| g.name == name)
    }
}

/// The weight vector `W`: flat values plus named segmentation.
#[derive(Clone, Debug)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl PartialEq for ParamVector {
    /// Bitwise equality of values (so `-0.0 != 0.0`) and layout equality.
    fn eq(&self, other: &Self) -> bool {
        self.same_layout(other)
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Arc<Layout>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Layout(format!(
                "{} values for a layout of length {}",
                values.len(),
                layout.len()
            )));
        }
        Ok(ParamVector { values, layout })
    }

    /// A vector with a single group named `w`.
    pub fn from_values(values: Vec<f64>) -> Self {
        let layout = Layout::from_lengths([("w", values.len())]).expect("single group layout");
        ParamVector {
            values,
            layout: Arc::new(layout),
        }
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        ParamVector {
            values: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.layout.clone())
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(values, self.layout.clone())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn groups(&self) -> &[Group] {
        self.layout.groups()
    }

    pub fn group(&self, name: &str) -> Result<&[f64]> {
        let g = self
            .layout
            .group(name)
            .ok_or_else(|| Error::UnknownGroup(name.to_string()))?;
        Ok(&self.values[g.offset..g.offset + g.len])
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout
    }

    pub fn check_layout(&self, other: &Self) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::Layout(format!(
                "{:?} vs {:?}",
                group_names(self.groups()),
                group_names(other.groups())
            )))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, location: &str) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::non_finite(format!("{location} (index {i})"))),
        }
    }

    /// `self <- alpha * x + self`.
    pub fn axpy_in_place(&mut self, alpha: f64, x: &ParamVector) -> Result<()> {
        self.check_layout(x)?;
        for (y, xi) in self.values.iter_mut().zip(&x.values) {
            *y += alpha * xi;
        }
        self.ensure_finite("axpy")
    }

    /// `self <- alpha * self`.
    pub fn scale_in_place(&mut self, alpha: f64) -> Result<()> {
        for v in &mut self.values {
            *v *= alpha;
        }
        self.ensure_finite("scale")
    }

    pub fn scale(&self, alpha: f64) -> Result<ParamVector> {
        let mut out = self.clone();
        out.scale_in_place(alpha)?;
        Ok(out)
    }

    /// Euclidean norm, summed left to right.
    pub fn norm2(&self) -> f64 {
        self.values.iter().fold(0.0, |acc, v| acc + v * v).sqrt()
    }

    /// Running arithmetic mean: `self <- (self * n + x) / (n + 1)`, evaluated as
    /// `self + (x - self) / (n + 1)` so that averaging identical vectors is exact.
    ///
    /// `n` is the number of components already folded into `self`.
    pub fn running_mean_update(&mut self, x: &ParamVector, n: u64) -> Result<()> {
        self.check_layout(x)?;
        let denom = n as f64 + 1.0;
        for (avg, xi) in self.values.iter_mut().zip(&x.values) {
            *avg += (xi - *avg) / denom;
        }
        self.ensure_finite("running mean")
    }

    /// Only the groups selected by `mask`, in this vector's group order.
    pub fn masked_view(&self, mask: &GroupMask) -> Result<ParamVector> {
        mask.validate(self)?;
        let mut values = Vec::new();
        let mut parts = Vec::new();
        for g in self.groups().iter().filter(|g| mask.includes(&g.name)) {
            values.extend_from_slice(&self.values[g.offset..g.offset + g.len]);
            parts.push((g.name.clone(), g.len));
        }
        ParamVector::new(values, Arc::new(Layout::from_lengths(parts)?))
    }

    /// Inverse of [`masked_view`](Self::masked_view): write the included groups of
    /// `view` back into `self`, leaving excluded groups untouched.
    pub fn scatter_masked(&mut self, mask: &GroupMask, view: &ParamVector) -> Result<()> {
        mask.validate(self)?;
        let mut cursor = 0;
        let groups = self.layout.clone();
        for g in groups.groups().iter().filter(|g| mask.includes(&g.name)) {
            let src = view.group(&g.name)?;
            if src.len() != g.len {
                return Err(Error::Layout(format!(
                    "group `{}` has length {} in view, {} in target",
                    g.name,
                    src.len(),
                    g.len
                )));
            }
            self.values[g.offset..g.offset + g.len].copy_from_slice(src);
            cursor += g.len;
        }
        if cursor != view.len() {
            return Err(Error::Layout("view carries groups outside the mask".into()));
        }
        Ok(())
    }

    /// Zero every coordinate belonging to a group outside `mask`.
    pub fn zero_excluded(&mut self, mask: &GroupMask) -> Result<()> {
        mask.validate(self)?;
        let layout = self.layout.clone();
        for g in layout.groups().iter().filter(|g| !mask.includes(&g.name)) {
            self.values[g.offset..g.offset + g.len].fill(0.0);
        }
        Ok(())
    }
}

/// `alpha * x + y`.
pub fn axpy(alpha: f64, x: &ParamVector, y: &ParamVector) -> Result<ParamVector> {
    let mut out = y.clone();
    out.axpy_in_place(alpha, x)?;
    Ok(out)
}

/// Inner product, accumulated left to right.
pub fn dot(x: &ParamVector, y: &ParamVector) -> Result<f64> {
    x.check_layout(y)?;
    let s = x
        .values
        .iter()
        .zip(&y.values)
        .fold(0.0, |acc, (a, b)| acc + a * b);
    if s.is_finite() {
        Ok(s)
    } else {
        Err(Error::non_finite("dot"))
    }
}

fn group_names(groups: &[Group]) -> Vec<(&str, usize)> {
    groups.iter().map(|g| (g.name.as_str(), g.len)).collect()
}

/// Named subset of parameter groups.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupMask {
    pub included: BTreeSet<String>,
}

impl GroupMask {
    pub fn all(x: &ParamVector) -> Self {
        GroupMask {
            included: x.groups().iter().map(|g| g.name.clone()).collect(),
        }
    }

    pub fn only<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Self {
        GroupMask {
            included: names.into_iter().map(Into::into).collect(),
        }
    }

    /// Every group of `x` except `excluded`; unknown names are an error.
    pub fn excluding<S: AsRef<str>>(x: &ParamVector, excluded: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut mask = Self::all(x);
        for name in excluded {
            let name = name.as_ref();
            if !mask.included.remove(name) {
                return Err(Error::UnknownGroup(name.to_string()));
            }
        }
        Ok(mask)
    }

    pub fn includes(&self, name: &str) -> bool {
        self.included.contains(name)
    }

    pub fn validate(&self, x: &ParamVector) -> Result<()> {
        match self.included.iter().find(|n| x.layout.group(n).is_none()) {
            Some(missing) => Err(Error::UnknownGroup(missing.clone())),
            None => Ok(()),
        }
    }

    /// Number of coordinates of `x` selected by this mask.
    pub fn count(&self, x: &ParamVector) -> Result<usize> {
        self.validate(x)?;
        Ok(x
            .groups()
            .iter()
            .filter(|g| self.includes(&g.name))
            .map(|g| g.len)
            .sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from_values(v.to_vec())
    }

    fn emb_head() -> ParamVector {
        let layout = Layout::from_lengths([("emb", 2), ("head", 1)]).unwrap();
        ParamVector::new(vec![1.0, 2.0, 3.0], Arc::new(layout)).unwrap()
    }

    #[test]
    fn axpy_examples() {
        assert_eq!(axpy(0.0, &pv(&[5., 5.]), &pv(&[1., 2.])).unwrap(), pv(&[1., 2.]));
        assert_eq!(axpy(1.0, &pv(&[0., 0.]), &pv(&[3., 4.])).unwrap(), pv(&[3., 4.]));
        assert_eq!(axpy(2.0, &pv(&[1., 1.]), &pv(&[1., 1.])).unwrap(), pv(&[3., 3.]));
    }

    #[test]
    fn axpy_rejects_layout_mismatch() {
        let err = axpy(1.0, &pv(&[1., 2., 3.]), &emb_head()).unwrap_err();
        assert!(matches!(err, Error::Layout(_)));
        assert!(axpy(1.0, &pv(&[1.]), &pv(&[1., 2.])).is_err());
    }

    #[test]
    fn axpy_overflow_is_non_finite() {
        let err = axpy(f64::MAX, &pv(&[f64::MAX]), &pv(&[0.])).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn dot_examples() {
        assert_eq!(dot(&pv(&[1., 0.]), &pv(&[0., 1.])).unwrap(), 0.0);
        assert_eq!(dot(&pv(&[1., 2.]), &pv(&[1., 2.])).unwrap(), 5.0);
        assert_eq!(dot(&pv(&[3.]), &pv(&[1.])).unwrap(), 3.0);
        assert!(dot(&pv(&[3.]), &pv(&[1., 1.])).is_err());
    }

    #[test]
    fn masked_view_examples() {
        let x = emb_head();
        assert_eq!(x.masked_view(&GroupMask::only(["head"])).unwrap().values(), &[3.0]);
        assert_eq!(x.masked_view(&GroupMask::all(&x)).unwrap(), x);
        assert_eq!(x.masked_view(&GroupMask::only(["emb"])).unwrap().values(), &[1.0, 2.0]);
        let err = x.masked_view(&GroupMask::only(["nope"])).unwrap_err();
        assert!(matches!(err, Error::UnknownGroup(n) if n == "nope"));
    }

    #[test]
    fn excluding_rejects_unknown_names() {
        let x = emb_head();
        let m = GroupMask::excluding(&x, ["emb"]).unwrap();
        assert_eq!(m, GroupMask::only(["head"]));
        assert!(GroupMask::excluding(&x, ["embedding"]).is_err());
    }

    #[test]
    fn layout_validation() {
        let overlap = vec![
            Group { name: "a".into(), offset: 0, len: 2 },
            Group { name: "b".into(), offset: 1, len: 2 },
        ];
        assert!(Layout::from_groups(overlap).is_err());
        let dup = vec![
            Group { name: "a".into(), offset: 0, len: 1 },
            Group { name: "a".into(), offset: 1, len: 1 },
        ];
        assert!(Layout::from_groups(dup).is_err());
        let layout = Arc::new(Layout::from_lengths([("a", 2)]).unwrap());
        assert!(ParamVector::new(vec![1.0], layout).is_err());
    }

    #[test]
    fn running_mean_matches_mean() {
        let mut avg = pv(&[0.0]);
        avg.running_mean_update(&pv(&[2.0]), 1).unwrap();
        assert_eq!(avg.values(), &[1.0]);
        avg.running_mean_update(&pv(&[4.0]), 2).unwrap();
        assert_eq!(avg.values(), &[2.0]);
    }

    fn three_groups() -> impl Strategy<Value = (ParamVector, Vec<bool>)> {
        (1usize..5, 0usize..4, 1usize..6).prop_flat_map(|(a, b, c)| {
            (
                prop::collection::vec(-10.0f64..10.0, a + b + c),
                prop::collection::vec(any::<bool>(), 3),
            )
                .prop_map(move |(vals, keep)| {
                    let layout = Layout::from_lengths([("a", a), ("b", b), ("c", c)]).unwrap();
                    (ParamVector::new(vals, Arc::new(layout)).unwrap(), keep)
                })
        })
    }

    proptest! {
        #[test]
        fn dot_is_squared_norm(v in prop::collection::vec(-10.0f64..10.0, 1..64)) {
            let x = pv(&v);
            let d = dot(&x, &x).unwrap();
            let n = x.norm2();
            prop_assert!((d - n * n).abs() <= 1e-12 * d.max(f64::MIN_POSITIVE));
        }

        #[test]
        fn view_then_scatter_round_trips((x, keep) in three_groups(), fill in -5.0f64..5.0) {
            let names = ["a", "b", "c"];
            let mask = GroupMask::only(names.iter().zip(&keep).filter(|(_, k)| **k).map(|(n, _)| *n));
            let mut view = x.masked_view(&mask).unwrap();
            // identity on included groups
            let mut y = x.clone();
            y.scatter_masked(&mask, &view).unwrap();
            prop_assert_eq!(&y, &x);
            // excluded groups untouched when the view changes
            for v in view.values_mut() { *v = fill; }
            y.scatter_masked(&mask, &view).unwrap();
            for g in x.groups() {
                let expect: Vec<f64> = if mask.includes(&g.name) {
                    vec![fill; g.len]
                } else {
                    x.group(&g.name).unwrap().to_vec()
                };
                prop_assert_eq!(y.group(&g.name).unwrap(), expect.as_slice());
            }
        }

        #[test]
        fn ops_are_bitwise_deterministic(v in prop::collection::vec(-10.0f64..10.0, 1..32), a in -3.0f64..3.0) {
            let x = pv(&v);
            let y = x.scale(0.5).unwrap();
            prop_assert_eq!(axpy(a, &x, &y).unwrap(), axpy(a, &x, &y).unwrap());
            prop_assert_eq!(dot(&x, &y).unwrap().to_bits(), dot(&x, &y).unwrap().to_bits());
        }
    }
}
