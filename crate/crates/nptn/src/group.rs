//! Explicit filter orbits under finite unitary groups, the transformation
//! node response `max_g ⟨x, g·w⟩`, and empirical invariance probes.
//!
//! Named groups are realized as exact index permutations, so a group element
//! acting on a vector only reorders its entries. Dot products are summed with
//! exact (correctly rounded) accumulation, which makes them independent of
//! that order: invariance under a named group then holds bit-for-bit, not
//! just to rounding error.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{NptnError, Result};
use crate::layers::NptnWeights;
use crate::rng::Rng;
use crate::tensor::{NDTensor, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupName {
    CyclicShift,
    C4Rotation,
    Translation2d,
    Arbitrary,
}

impl fmt::Display for GroupName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            GroupName::CyclicShift => "cyclic-shift",
            GroupName::C4Rotation => "c4-rotation",
            GroupName::Translation2d => "translation-2d",
            GroupName::Arbitrary => "arbitrary",
        };
        f.write_str(s)
    }
}

/// An explicit set of transformed templates `{g·w}`, one row per element.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupOrbit {
    pub templates: NDTensor<f64>,
    pub group: GroupName,
    /// How each template was produced, e.g. `"shift 2"`, `"rot 270"`.
    pub generator_record: Vec<String>,
    /// Side length when templates are square `k × k` patches.
    side: Option<usize>,
}

impl GroupOrbit {
    pub fn len(&self) -> usize {
        self.templates.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.templates.shape()[1]
    }

    pub fn template(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.templates.data()[i * d..(i + 1) * d]
    }

    /// Apply group element `i` to an arbitrary vector. Element `i` is the one
    /// that produced template `i` from template 0. `None` for arbitrary sets.
    pub fn act(&self, element: usize, x: &[f64]) -> Option<Vec<f64>> {
        assert!(element < self.len(), "group element {element} out of range");
        match self.group {
            GroupName::CyclicShift => Some(cyclic_shift(x, element)),
            GroupName::C4Rotation => {
                let k = self.side?;
                let mut v = x.to_vec();
                for _ in 0..element {
                    v = rotate90(&v, k);
                }
                Some(v)
            }
            GroupName::Translation2d => {
                let k = self.side?;
                Some(translate_torus(x, k, element / k, element % k))
            }
            GroupName::Arbitrary => None,
        }
    }

    /// Applying any group element to any template lands exactly on another
    /// template of the set.
    pub fn is_closed(&self) -> bool {
        if self.group == GroupName::Arbitrary {
            return false;
        }
        (0..self.len()).all(|g| {
            (0..self.len()).all(|i| {
                let moved = self.act(g, self.template(i)).expect("named group");
                (0..self.len()).any(|j| self.template(j) == moved.as_slice())
            })
        })
    }

    /// Every template has the L2 norm of template 0, within `tol`.
    pub fn preserves_norm(&self, tol: f64) -> bool {
        let n0 = exact_dot(self.template(0), self.template(0)).sqrt();
        (0..self.len())
            .all(|i| (exact_dot(self.template(i), self.template(i)).sqrt() - n0).abs() <= tol)
    }
}

fn cyclic_shift(w: &[f64], by: usize) -> Vec<f64> {
    let d = w.len();
    (0..d).map(|j| w[(j + d - by % d) % d]).collect()
}

/// 90° clockwise: `out[i][j] = w[k-1-j][i]`.
fn rotate90(w: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            out[i * k + j] = w[(k - 1 - j) * k + i];
        }
    }
    out
}

fn translate_torus(w: &[f64], k: usize, dy: usize, dx: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            out[((i + dy) % k) * k + (j + dx) % k] = w[i * k + j];
        }
    }
    out
}

fn from_rows(
    rows: Vec<Vec<f64>>,
    group: GroupName,
    record: Vec<String>,
    side: Option<usize>,
) -> Result<GroupOrbit> {
    let g = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    let data: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(GroupOrbit {
        templates: NDTensor::from_vec(&[g, d], data)?,
        group,
        generator_record: record,
        side,
    })
}

/// `|G| = d` templates; template `i` is `w` circularly shifted right by `i`.
pub fn cyclic_shift_orbit(w: &[f64]) -> Result<GroupOrbit> {
    if w.is_empty() {
        return Err(NptnError::shape("cyclic orbit needs a non-empty template"));
    }
    let rows = (0..w.len()).map(|i| cyclic_shift(w, i)).collect();
    let record = (0..w.len()).map(|i| format!("shift {i}")).collect();
    from_rows(rows, GroupName::CyclicShift, record, None)
}

/// The four 90° clockwise rotations of a square `[k, k]` template.
pub fn c4_rotation_orbit(w: &NDTensor<f64>) -> Result<GroupOrbit> {
    let k = match w.shape() {
        &[a, b] if a == b => a,
        s => {
            return Err(NptnError::shape(format!(
                "c4 orbit needs a square [k,k] template, got {s:?}"
            )))
        }
    };
    let mut rows = vec![w.data().to_vec()];
    for i in 1..4 {
        rows.push(rotate90(&rows[i - 1], k));
    }
    let record = (0..4).map(|i| format!("rot {}", 90 * i)).collect();
    from_rows(rows, GroupName::C4Rotation, record, Some(k))
}

/// All `k²` cyclic 2-D translations of a square template (element
/// `dy·k + dx` shifts down by `dy` and right by `dx`).
pub fn translation_2d_orbit(w: &NDTensor<f64>) -> Result<GroupOrbit> {
    let k = match w.shape() {
        &[a, b] if a == b => a,
        s => {
            return Err(NptnError::shape(format!(
                "translation orbit needs [k,k], got {s:?}"
            )))
        }
    };
    let mut rows = Vec::with_capacity(k * k);
    let mut record = Vec::with_capacity(k * k);
    for dy in 0..k {
        for dx in 0..k {
            rows.push(translate_torus(w.data(), k, dy, dx));
            record.push(format!("translate ({dy},{dx})"));
        }
    }
    from_rows(rows, GroupName::Translation2d, record, Some(k))
}

/// An unconstrained filter set, e.g. a learned node. Carries no invariance
/// guarantee.
pub fn arbitrary_orbit(templates: NDTensor<f64>) -> Result<GroupOrbit> {
    if templates.ndim() != 2 {
        return Err(NptnError::shape("arbitrary orbit expects [G, d] templates"));
    }
    let g = templates.shape()[0];
    Ok(GroupOrbit {
        templates,
        group: GroupName::Arbitrary,
        generator_record: (0..g).map(|i| format!("filter {i}")).collect(),
        side: None,
    })
}

/// Correctly rounded dot product (Shewchuk's exact partial sums over the
/// rounded products). The result does not depend on summation order.
pub fn exact_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for (x, y) in a.iter().zip(b) {
        let mut v = x * y;
        let mut i = 0;
        for j in 0..partials.len() {
            let mut p = partials[j];
            if v.abs() < p.abs() {
                std::mem::swap(&mut v, &mut p);
            }
            let hi = v + p;
            let lo = p - (hi - v);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            v = hi;
        }
        partials.truncate(i);
        partials.push(v);
    }
    // Round the exact sum held in `partials` once, half-even.
    let mut n = partials.len();
    if n == 0 {
        return 0.0;
    }
    n -= 1;
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        n -= 1;
        let x = hi;
        let y = partials[n];
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}

/// `max_g ⟨x, g·w⟩` over the orbit, with the index of the winning template
/// (lowest index on ties).
pub fn tn_node_argmax(x: &[f64], orbit: &GroupOrbit) -> Result<(f64, usize)> {
    if x.len() != orbit.dim() {
        return Err(NptnError::shape(format!(
            "input of length {} against templates of length {}",
            x.len(),
            orbit.dim()
        )));
    }
    let mut best = (f64::NEG_INFINITY, 0);
    for i in 0..orbit.len() {
        let v = exact_dot(x, orbit.template(i));
        if v > best.0 {
            best = (v, i);
        }
    }
    Ok(best)
}

pub fn tn_node_response(x: &[f64], orbit: &GroupOrbit) -> Result<f64> {
    tn_node_argmax(x, orbit).map(|(v, _)| v)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InvarianceReport {
    pub score: f64,
    pub transform: String,
    pub trials: usize,
    pub max_deviation: f64,
}

/// Draw `trials` random inputs in `[-1, 1]^d` and record
/// `|Υ(x) − Υ(g′x)|` for every group element `g′`.
pub fn verify_lemma1(orbit: &GroupOrbit, trials: usize, rng: &mut Rng) -> Result<InvarianceReport> {
    if orbit.group == GroupName::Arbitrary {
        return Err(NptnError::contract(
            "an arbitrary filter set is not a group; no invariance guarantee to verify",
        ));
    }
    let d = orbit.dim();
    let mut max_dev: f64 = 0.0;
    let mut total = 0.0;
    let mut count = 0usize;
    for _ in 0..trials {
        let x: Vec<f64> = (0..d).map(|_| rng.uniform_f64(-1.0, 1.0)).collect();
        let base = tn_node_response(&x, orbit)?;
        for g in 0..orbit.len() {
            let moved = orbit.act(g, &x).expect("named group acts on inputs");
            let dev = (tn_node_response(&moved, orbit)? - base).abs();
            max_dev = max_dev.max(dev);
            total += dev;
            count += 1;
        }
    }
    Ok(InvarianceReport {
        score: if count == 0 {
            0.0
        } else {
            total / count as f64
        },
        transform: format!("{} (all elements)", orbit.group),
        trials,
        max_deviation: max_dev,
    })
}

/// Input transformations used to probe a single node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputTransform {
    Identity,
    /// Circular shift of the flattened patch.
    CyclicShift(usize),
    /// `quarter_turns` × 90° clockwise rotation of the square patch.
    Rotate90(usize),
    /// Circular 2-D translation of the square patch by `(dy, dx)`.
    Translate(usize, usize),
}

impl InputTransform {
    pub fn apply(&self, x: &[f64], side: usize) -> Vec<f64> {
        match *self {
            InputTransform::Identity => x.to_vec(),
            InputTransform::CyclicShift(s) => cyclic_shift(x, s),
            InputTransform::Rotate90(q) => {
                let mut v = x.to_vec();
                for _ in 0..q % 4 {
                    v = rotate90(&v, side);
                }
                v
            }
            InputTransform::Translate(dy, dx) => translate_torus(x, side, dy % side, dx % side),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let bad = || NptnError::Config {
            key: "transform".into(),
            msg: format!(
                "unknown transform `{s}` (identity | shift:N | rot90:Q | translate:DY,DX)"
            ),
        };
        let (name, arg) = s.split_once(':').unwrap_or((s, ""));
        let num = |a: &str| a.trim().parse::<usize>().map_err(|_| bad());
        match name {
            "identity" => Ok(InputTransform::Identity),
            "shift" => Ok(InputTransform::CyclicShift(num(arg)?)),
            "rot90" => Ok(InputTransform::Rotate90(num(arg)?)),
            "translate" => {
                let (a, b) = arg.split_once(',').ok_or_else(bad)?;
                Ok(InputTransform::Translate(num(a)?, num(b)?))
            }
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for InputTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InputTransform::Identity => write!(f, "identity"),
            InputTransform::CyclicShift(s) => write!(f, "shift:{s}"),
            InputTransform::Rotate90(q) => write!(f, "rot90:{q}"),
            InputTransform::Translate(dy, dx) => write!(f, "translate:{dy},{dx}"),
        }
    }
}

/// Relative change of a trained node's response under `transform`:
/// mean over random patches of `|Υ(Tx) − Υ(x)| / (|Υ(x)| + 1e-8)`, using
/// the node's `G` filters as the orbit. A probe, not a pass/fail claim.
pub fn invariance_score<T: Scalar>(
    wts: &NptnWeights<T>,
    node: (usize, usize),
    transform: InputTransform,
    samples: usize,
    rng: &mut Rng,
) -> Result<InvarianceReport> {
    let &[m, n, _, k, _] = wts.w.shape() else {
        unreachable!("nptn weights are 5-D")
    };
    if node.0 >= m || node.1 >= n {
        return Err(NptnError::shape(format!(
            "node {node:?} outside a {m}x{n} layer"
        )));
    }
    let orbit = arbitrary_orbit(wts.node_filters(node.0, node.1).cast())?;
    let d = k * k;
    let mut total = 0.0;
    let mut max_dev: f64 = 0.0;
    for _ in 0..samples {
        let x: Vec<f64> = (0..d).map(|_| rng.uniform_f64(-1.0, 1.0)).collect();
        let base = tn_node_response(&x, &orbit)?;
        let moved = tn_node_response(&transform.apply(&x, k), &orbit)?;
        let dev = (moved - base).abs();
        max_dev = max_dev.max(dev);
        total += dev / (base.abs() + 1e-8);
    }
    Ok(InvarianceReport {
        score: if samples == 0 {
            0.0
        } else {
            total / samples as f64
        },
        transform: transform.to_string(),
        trials: samples,
        max_deviation: max_dev,
    })
}

/// One CSV row of an invariance sweep.
#[derive(Clone, Debug, Serialize)]
pub struct InvarianceRow {
    pub layer: usize,
    pub m: usize,
    pub n: usize,
    pub transform: String,
    pub score: f64,
    pub max_deviation: f64,
    pub trials: usize,
}

impl InvarianceRow {
    pub fn new(layer: usize, node: (usize, usize), report: &InvarianceReport) -> Self {
        InvarianceRow {
            layer,
            m: node.0,
            n: node.1,
            transform: report.transform.clone(),
            score: report.score,
            max_deviation: report.max_deviation,
            trials: report.trials,
        }
    }
}

/// Columns: `layer,m,n,transform,score,max_deviation,trials`.
pub fn write_invariance_csv<W: Write>(rows: &[InvarianceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| NptnError::io("invariance csv", std::io::Error::other(e));
    for row in rows {
        w.serialize(row).map_err(err)?;
    }
    w.flush().map_err(|e| NptnError::io("invariance csv", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::NptnLayerSpec;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn mat(k: usize, v: Vec<f64>) -> NDTensor<f64> {
        NDTensor::from_vec(&[k, k], v).unwrap()
    }

    #[test]
    fn cyclic_orbit_examples() {
        let o = cyclic_shift_orbit(&[1.0, 0.0]).unwrap();
        assert_eq!(o.templates.data(), &[1.0, 0.0, 0.0, 1.0]);
        let o = cyclic_shift_orbit(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(
            o.templates.data(),
            &[1.0, 2.0, 3.0, 3.0, 1.0, 2.0, 2.0, 3.0, 1.0]
        );
        assert!(o.preserves_norm(1e-12));
        assert!(o.is_closed());
    }

    #[test]
    fn c4_orbit_examples() {
        let o = c4_rotation_orbit(&mat(2, vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(o.template(1), &[3.0, 1.0, 4.0, 2.0]);
        assert!(o.preserves_norm(1e-12));
        assert!(o.is_closed());

        let sym =
            c4_rotation_orbit(&mat(3, vec![0.0, 1.0, 0.0, 1.0, 5.0, 1.0, 0.0, 1.0, 0.0])).unwrap();
        for i in 1..4 {
            assert_eq!(sym.template(i), sym.template(0));
        }
    }

    #[test]
    fn c4_rejects_non_square() {
        let w = NDTensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(c4_rotation_orbit(&w), Err(NptnError::Shape(_))));
    }

    #[test]
    fn four_rotations_return_home() {
        let w: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let mut v = w.clone();
        for _ in 0..4 {
            v = rotate90(&v, 3);
        }
        assert_eq!(v, w);
    }

    #[test]
    fn translation_orbit_is_closed() {
        let mut rng = Rng::new(2);
        let w = NDTensor::<f64>::uniform(&[3, 3], -1.0, 1.0, &mut rng);
        let o = translation_2d_orbit(&w).unwrap();
        assert_eq!(o.len(), 9);
        assert!(o.is_closed());
        assert!(o.preserves_norm(1e-12));
    }

    #[test]
    fn node_response_examples() {
        let single =
            arbitrary_orbit(NDTensor::from_vec(&[1, 3], vec![1.0, -1.0, 2.0]).unwrap()).unwrap();
        assert_eq!(tn_node_response(&[1.0, 2.0, 3.0], &single).unwrap(), 5.0);

        let o = cyclic_shift_orbit(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        let x = [3.0, 1.0, 2.0, 0.0];
        assert_eq!(tn_node_response(&x, &o).unwrap(), 3.0);
        for s in 0..4 {
            assert_eq!(tn_node_response(&cyclic_shift(&x, s), &o).unwrap(), 3.0);
        }
        assert!(tn_node_response(&[1.0], &o).is_err());
    }

    #[test]
    fn invariance_holds_exactly_on_named_groups() {
        let mut rng = Rng::new(8);
        let w: Vec<f64> = (0..8).map(|_| rng.uniform_f64(-1.0, 1.0)).collect();
        let r = verify_lemma1(&cyclic_shift_orbit(&w).unwrap(), 100, &mut rng).unwrap();
        assert_eq!(r.max_deviation, 0.0);

        let w = NDTensor::<f64>::uniform(&[3, 3], -1.0, 1.0, &mut rng);
        let r = verify_lemma1(&c4_rotation_orbit(&w).unwrap(), 100, &mut rng).unwrap();
        assert_eq!(r.max_deviation, 0.0);

        let single = cyclic_shift_orbit(&[0.7]).unwrap();
        assert_eq!(
            verify_lemma1(&single, 100, &mut rng).unwrap().max_deviation,
            0.0
        );
    }

    #[test]
    fn verify_refuses_arbitrary_sets() {
        let o = arbitrary_orbit(NDTensor::zeros(&[2, 4])).unwrap();
        let mut rng = Rng::new(0);
        assert!(matches!(
            verify_lemma1(&o, 5, &mut rng),
            Err(NptnError::Contract(_))
        ));
    }

    #[test]
    fn exact_dot_is_order_free() {
        let a = [1e16, 1.0, -1e16, 1.0];
        let b = [1.0; 4];
        assert_eq!(exact_dot(&a, &b), 2.0);
        let a2 = [1.0, -1e16, 1.0, 1e16];
        assert_eq!(exact_dot(&a2, &b), 2.0);
        assert_eq!(exact_dot(&[0.1, 0.2, 0.3], &[1.0; 3]), 0.6);
    }

    fn node_bank(k: usize, filters: Vec<Vec<f64>>) -> NptnWeights<f64> {
        let g = filters.len();
        let spec = NptnLayerSpec::new(1, 1, g, k, 0);
        NptnWeights::from_tensor(
            &spec,
            NDTensor::from_vec(&spec.weight_shape(), filters.concat()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn identity_transform_scores_zero() {
        let mut rng = Rng::new(4);
        let spec = NptnLayerSpec::new(2, 2, 3, 3, 1);
        let wts = NptnWeights::<f64>::init(&spec, &mut rng).unwrap();
        let r = invariance_score(&wts, (1, 0), InputTransform::Identity, 50, &mut rng).unwrap();
        assert_eq!(r.score, 0.0);
    }

    #[test]
    fn shift_orbit_bank_scores_zero_under_shift() {
        let mut rng = Rng::new(5);
        let w: Vec<f64> = (0..9).map(|_| rng.uniform_f64(-1.0, 1.0)).collect();
        let orbit = cyclic_shift_orbit(&w).unwrap();
        let bank = node_bank(3, (0..9).map(|i| orbit.template(i).to_vec()).collect());
        for s in 0..9 {
            let r = invariance_score(&bank, (0, 0), InputTransform::CyclicShift(s), 50, &mut rng)
                .unwrap();
            assert_eq!(r.score, 0.0);
        }
    }

    #[test]
    fn random_bank_is_not_invariant() {
        let mut rng = Rng::new(6);
        let spec = NptnLayerSpec::new(1, 1, 4, 3, 1);
        let wts = NptnWeights::<f64>::init(&spec, &mut rng).unwrap();
        let r =
            invariance_score(&wts, (0, 0), InputTransform::CyclicShift(1), 200, &mut rng).unwrap();
        assert!(r.score > 0.0);
    }

    #[test]
    fn transform_parse_roundtrip() {
        for t in [
            InputTransform::Identity,
            InputTransform::CyclicShift(3),
            InputTransform::Rotate90(1),
            InputTransform::Translate(1, 2),
        ] {
            assert_eq!(InputTransform::parse(&t.to_string()).unwrap(), t);
        }
        assert!(InputTransform::parse("spin").is_err());
    }

    #[test]
    fn csv_has_expected_header() {
        let row = InvarianceRow {
            layer: 0,
            m: 1,
            n: 2,
            transform: "identity".into(),
            score: 0.0,
            max_deviation: 0.0,
            trials: 10,
        };
        let mut buf = Vec::new();
        write_invariance_csv(&[row], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("layer,m,n,transform,score,max_deviation,trials\n"));
    }

    proptest! {
        #[test]
        fn response_ignores_template_order(seed in any::<u64>(), g in 2usize..6) {
            let mut rng = Rng::new(seed);
            let t = NDTensor::<f64>::uniform(&[g, 5], -1.0, 1.0, &mut rng);
            let x: Vec<f64> = (0..5).map(|_| rng.uniform_f64(-1.0, 1.0)).collect();
            let mut rows: Vec<Vec<f64>> = t.data().chunks(5).map(<[f64]>::to_vec).collect();
            let a = tn_node_response(&x, &arbitrary_orbit(t).unwrap()).unwrap();
            rows.reverse();
            let rev = NDTensor::from_vec(&[g, 5], rows.concat()).unwrap();
            prop_assert_eq!(a, tn_node_response(&x, &arbitrary_orbit(rev).unwrap()).unwrap());
        }

        #[test]
        fn positive_scaling_scales_response(seed in any::<u64>(), lambda in 0.01f64..100.0) {
            let mut rng = Rng::new(seed);
            let t = NDTensor::<f64>::uniform(&[4, 6], -1.0, 1.0, &mut rng);
            let orbit = arbitrary_orbit(t).unwrap();
            let x: Vec<f64> = (0..6).map(|_| rng.uniform_f64(-1.0, 1.0)).collect();
            let scaled: Vec<f64> = x.iter().map(|v| v * lambda).collect();
            let (a, ia) = tn_node_argmax(&x, &orbit).unwrap();
            let (b, ib) = tn_node_argmax(&scaled, &orbit).unwrap();
            prop_assert!((b - lambda * a).abs() <= 1e-9 * (1.0 + b.abs()));
            prop_assert_eq!(ia, ib);
        }

        #[test]
        fn named_groups_are_exactly_invariant(seed in any::<u64>(), k in 1usize..5) {
            let mut rng = Rng::new(seed);
            let w = NDTensor::<f64>::uniform(&[k, k], -1.0, 1.0, &mut rng);
            for orbit in [c4_rotation_orbit(&w).unwrap(), translation_2d_orbit(&w).unwrap(), cyclic_shift_orbit(w.data()).unwrap()] {
                let x: Vec<f64> = (0..k * k).map(|_| rng.uniform_f64(-1.0, 1.0)).collect();
                let base = tn_node_response(&x, &orbit).unwrap();
                for g in 0..orbit.len() {
                    let moved = orbit.act(g, &x).unwrap();
                    prop_assert_eq!(tn_node_response(&moved, &orbit).unwrap(), base);
                }
            }
        }
    }
}
