//! Interaction subsets of the candidate instruments.
//!
//! An [`InteractionPlan`] fixes the position of every interaction component:
//! orders ascend, and subsets of equal order appear in lexicographic order.
//! Orders `1..q` are enumerated; the moment vector uses orders `2..q` and the
//! projection bases `W_{k-1}` use orders `1..k-1`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound on the number of interaction moments a plan may carry.
pub const MAX_INTERACTIONS: usize = 1_000_000;

/// Strictly increasing instrument indices of one interaction.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubsetIndex(Vec<usize>);

impl SubsetIndex {
    pub fn new(indices: Vec<usize>, p: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Plan("subset must contain at least one index".into()));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Plan(format!("subset {indices:?} is not strictly increasing")));
        }
        if indices.iter().any(|&j| j >= p) {
            return Err(Error::Plan(format!("subset {indices:?} has an index outside [0, {p})")));
        }
        Ok(Self(indices))
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn order(&self) -> usize {
        self.0.len()
    }

    /// `prod_{j in subset} (z_j - mu_j)`
    #[inline]
    pub fn centered_product(&self, z: &[f64], mu: &[f64]) -> f64 {
        self.0.iter().map(|&j| z[j] - mu[j]).product()
    }

    #[inline]
    pub fn raw_product(&self, z: &[f64]) -> f64 {
        self.0.iter().map(|&j| z[j]).product()
    }
}

/// Binomial coefficient, `None` on overflow.
pub fn binomial(n: usize, k: usize) -> Option<usize> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    usize::try_from(acc).ok()
}

/// Number of interactions of orders `2..=q` among `p` instruments.
pub fn interaction_count(p: usize, q: usize) -> Option<usize> {
    (2..=q).try_fold(0usize, |acc, k| acc.checked_add(binomial(p, k)?))
}

/// Lexicographic successor of a k-subset of `0..p`, in place.
fn next_subset(s: &mut [usize], p: usize) -> bool {
    let k = s.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if s[i] < p - k + i {
            s[i] += 1;
            for j in i + 1..k {
                s[j] = s[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

fn enumerate_order(p: usize, k: usize) -> Vec<SubsetIndex> {
    let mut out = Vec::new();
    if k == 0 || k > p {
        return out;
    }
    let mut cur: Vec<usize> = (0..k).collect();
    loop {
        out.push(SubsetIndex(cur.clone()));
        if !next_subset(&mut cur, p) {
            break;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionPlan {
    p: usize,
    q: usize,
    /// `subsets_by_order[k - 1]` holds the order-k subsets.
    subsets_by_order: Vec<Vec<SubsetIndex>>,
    /// Offsets of each order within the stacked moment vector (orders 2..q).
    moment_offsets: Vec<usize>,
    /// Offsets of each order within a projection basis, after the intercept.
    basis_offsets: Vec<usize>,
    r: usize,
}

impl InteractionPlan {
    pub fn new(p: usize, q: usize) -> Result<Self> {
        if q < 2 {
            return Err(Error::Plan(format!(
                "maximum interaction order q = {q} must be at least 2"
            )));
        }
        if q > p {
            return Err(Error::Plan(format!("q = {q} exceeds p = {p}; q >= 2 requires p >= 2")));
        }
        let r = interaction_count(p, q)
            .filter(|&r| r <= MAX_INTERACTIONS)
            .ok_or_else(|| {
                Error::Plan(format!(
                    "p = {p}, q = {q} yields more than {MAX_INTERACTIONS} interactions"
                ))
            })?;
        let subsets_by_order: Vec<_> = (1..=q).map(|k| enumerate_order(p, k)).collect();
        Ok(Self::from_subsets(p, q, subsets_by_order, r))
    }

    fn from_subsets(p: usize, q: usize, subsets_by_order: Vec<Vec<SubsetIndex>>, r: usize) -> Self {
        let mut moment_offsets = vec![0; q + 2];
        let mut basis_offsets = vec![0; q + 2];
        for k in 1..=q {
            let len = subsets_by_order[k - 1].len();
            basis_offsets[k + 1] = basis_offsets[k] + len;
            moment_offsets[k + 1] = moment_offsets[k] + if k >= 2 { len } else { 0 };
        }
        Self {
            p,
            q,
            subsets_by_order,
            moment_offsets,
            basis_offsets,
            r,
        }
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    /// Total number of interaction moments, `sum_{k=2}^q C(p, k)`.
    pub fn r(&self) -> usize {
        self.r
    }

    pub fn subsets(&self, k: usize) -> &[SubsetIndex] {
        &self.subsets_by_order[k - 1]
    }

    /// Subsets of orders `2..=q` in moment order.
    pub fn moment_subsets(&self) -> impl Iterator<Item = &SubsetIndex> {
        self.subsets_by_order[1..].iter().flatten()
    }

    /// Positions of the order-k block inside the stacked moment vector.
    pub fn order_range(&self, k: usize) -> Range<usize> {
        assert!((2..=self.q).contains(&k), "order {k} outside 2..={}", self.q);
        self.moment_offsets[k]..self.moment_offsets[k + 1]
    }

    /// Length of `W_{k-1}`: `1 + sum_{j=1}^{k-1} C(p, j)`.
    pub fn basis_dim(&self, k: usize) -> usize {
        1 + self.basis_offsets[k]
    }

    fn check_row(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.p {
            return Err(Error::Dimension {
                context: "interactions: instrument row",
                expected: self.p,
                got: z.len(),
            });
        }
        Ok(())
    }

    /// Demeaned interactions of orders `2..q`, stacked in plan order.
    pub fn eval_demeaned(&self, z: &[f64], mu: &[f64]) -> Result<Vec<f64>> {
        self.check_row(z)?;
        if mu.len() != self.p {
            return Err(Error::Dimension {
                context: "interactions: mean vector",
                expected: self.p,
                got: mu.len(),
            });
        }
        let mut out = vec![0.0; self.r];
        self.eval_demeaned_into(z, mu, &mut out);
        Ok(out)
    }

    /// Unchecked variant of [`eval_demeaned`](Self::eval_demeaned) writing into
    /// a caller buffer of length `r`.
    pub fn eval_demeaned_into(&self, z: &[f64], mu: &[f64], out: &mut [f64]) {
        for (slot, s) in out.iter_mut().zip(self.moment_subsets()) {
            *slot = s.centered_product(z, mu);
        }
    }

    /// The non-demeaned basis `W_{k-1}(z) = (1, Z_1, ..., Z_{k-1})`.
    pub fn eval_basis(&self, z: &[f64], k: usize) -> Result<Vec<f64>> {
        self.check_row(z)?;
        if !(2..=self.q).contains(&k) {
            return Err(Error::Plan(format!("basis order k = {k} outside 2..={}", self.q)));
        }
        let mut out = vec![0.0; self.basis_dim(k)];
        self.eval_basis_into(z, k, &mut out);
        Ok(out)
    }

    pub fn eval_basis_into(&self, z: &[f64], k: usize, out: &mut [f64]) {
        out[0] = 1.0;
        let subsets = self.subsets_by_order[..k - 1].iter().flatten();
        for (slot, s) in out[1..].iter_mut().zip(subsets) {
            *slot = s.raw_product(z);
        }
    }
}

/// Wire form used inside result JSON: one entry per order with its index tuples.
#[derive(Serialize, Deserialize)]
struct PlanRepr {
    p: usize,
    q: usize,
    r: usize,
    orders: Vec<OrderRepr>,
}

#[derive(Serialize, Deserialize)]
struct OrderRepr {
    order: usize,
    subsets: Vec<SubsetIndex>,
}

impl Serialize for InteractionPlan {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PlanRepr {
            p: self.p,
            q: self.q,
            r: self.r,
            orders: (2..=self.q)
                .map(|k| OrderRepr {
                    order: k,
                    subsets: self.subsets(k).to_vec(),
                })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for InteractionPlan {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = PlanRepr::deserialize(de)?;
        let canonical = InteractionPlan::new(repr.p, repr.q).map_err(D::Error::custom)?;
        let listed: Vec<_> = repr
            .orders
            .iter()
            .flat_map(|o| o.subsets.iter().map(move |s| (o.order, s)))
            .collect();
        let expected: Vec<_> = (2..=repr.q)
            .flat_map(|k| canonical.subsets(k).iter().map(move |s| (k, s)))
            .collect();
        if repr.r != canonical.r || listed != expected {
            return Err(D::Error::custom("plan listing does not match canonical ordering"));
        }
        Ok(canonical)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx(plan: &InteractionPlan, k: usize) -> Vec<Vec<usize>> {
        plan.subsets(k).iter().map(|s| s.indices().to_vec()).collect()
    }

    #[test]
    fn pairs_for_three_instruments() {
        let plan = InteractionPlan::new(3, 2).unwrap();
        assert_eq!(idx(&plan, 2), vec![vec![0, 1], vec![0, 2], vec![1, 2]]);
        assert_eq!(plan.r(), 3);
    }

    #[test]
    fn simulation_sizes() {
        assert_eq!(InteractionPlan::new(10, 2).unwrap().r(), 45);
        assert_eq!(InteractionPlan::new(20, 2).unwrap().r(), 190);
        assert_eq!(InteractionPlan::new(3, 3).unwrap().r(), 4);
    }

    #[test]
    fn rejects_bad_orders() {
        assert!(InteractionPlan::new(3, 1).is_err());
        assert!(InteractionPlan::new(3, 4).is_err());
        assert!(InteractionPlan::new(1, 2).is_err());
        let err = InteractionPlan::new(200, 6).unwrap_err();
        assert!(err.to_string().contains("more than"), "{err}");
    }

    #[test]
    fn order_counts_match_binomials() {
        let plan = InteractionPlan::new(7, 4).unwrap();
        for k in 1..=4 {
            assert_eq!(plan.subsets(k).len(), binomial(7, k).unwrap());
        }
        assert_eq!(plan.order_range(2), 0..21);
        assert_eq!(plan.order_range(3), 21..56);
        assert_eq!(plan.order_range(4), 56..91);
        assert_eq!(plan.basis_dim(2), 8);
        assert_eq!(plan.basis_dim(4), 1 + 7 + 21 + 35);
    }

    #[test]
    fn demeaned_examples() {
        let plan = InteractionPlan::new(3, 2).unwrap();
        let v = plan.eval_demeaned(&[1.0, 0.0, 1.0], &[0.5; 3]).unwrap();
        assert_eq!(v, vec![-0.25, 0.25, -0.25]);
        let mu = [0.1, 0.7, -3.0];
        assert!(plan.eval_demeaned(&mu, &mu).unwrap().iter().all(|&x| x == 0.0));

        let plan2 = InteractionPlan::new(2, 2).unwrap();
        let v = plan2.eval_demeaned(&[1.0, 1.0], &[0.3, 0.6]).unwrap();
        assert!((v[0] - 0.28).abs() < 1e-15);
        assert!(plan2.eval_demeaned(&[1.0], &[0.3, 0.6]).is_err());
    }

    #[test]
    fn basis_examples() {
        let plan = InteractionPlan::new(2, 2).unwrap();
        assert_eq!(plan.eval_basis(&[1.0, 0.0], 2).unwrap(), vec![1.0, 1.0, 0.0]);
        let plan3 = InteractionPlan::new(3, 3).unwrap();
        assert_eq!(
            plan3.eval_basis(&[1.0, 0.0, 1.0], 3).unwrap(),
            vec![1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]
        );
        let b = plan3.eval_basis(&[0.0; 3], 2).unwrap();
        assert_eq!(b, vec![1.0, 0.0, 0.0, 0.0]);
        assert!(plan3.eval_basis(&[0.0; 3], 4).is_err());
        assert!(plan3.eval_basis(&[0.0; 3], 1).is_err());
    }

    #[test]
    fn zero_mean_matches_raw_products() {
        let plan = InteractionPlan::new(4, 3).unwrap();
        let z = [0.3, -1.2, 2.0, 0.5];
        let demeaned = plan.eval_demeaned(&z, &[0.0; 4]).unwrap();
        let basis = plan.eval_basis(&z, 3).unwrap();
        // order-2 block of the moment vector is the tail of W_2
        let r2 = plan.order_range(2);
        assert_eq!(&demeaned[r2.clone()], &basis[1 + 4..]);
    }

    #[test]
    fn subset_validation() {
        assert!(SubsetIndex::new(vec![0, 2], 3).is_ok());
        assert!(SubsetIndex::new(vec![2, 0], 3).is_err());
        assert!(SubsetIndex::new(vec![1, 1], 3).is_err());
        assert!(SubsetIndex::new(vec![3], 3).is_err());
        assert!(SubsetIndex::new(vec![], 3).is_err());
    }

    #[test]
    fn tampered_listing_is_rejected() {
        let plan = InteractionPlan::new(3, 2).unwrap();
        let mut json = serde_json::to_value(&plan).unwrap();
        json["orders"][0]["subsets"][0] = serde_json::json!([0, 2]);
        json["orders"][0]["subsets"][1] = serde_json::json!([0, 1]);
        assert!(serde_json::from_value::<InteractionPlan>(json).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn plan_round_trips_through_json(p in 2usize..9, dq in 0usize..4) {
                let q = (2 + dq).min(p);
                let plan = InteractionPlan::new(p, q).unwrap();
                let json = serde_json::to_string(&plan).unwrap();
                let back: InteractionPlan = serde_json::from_str(&json).unwrap();
                prop_assert_eq!(&back, &plan);
                let total: usize = (2..=q).map(|k| binomial(p, k).unwrap()).sum();
                prop_assert_eq!(plan.r(), total);
            }

            #[test]
            fn sample_centered_mains_average_to_zero(
                rows in proptest::collection::vec(proptest::collection::vec(0u8..2, 4), 2..40)
            ) {
                let n = rows.len() as f64;
                for j in 0..4 {
                    let mu = rows.iter().map(|r| r[j] as f64).sum::<f64>() / n;
                    let avg = rows.iter().map(|r| r[j] as f64 - mu).sum::<f64>() / n;
                    prop_assert!(avg.abs() < 1e-14);
                }
            }
        }
    }
}
