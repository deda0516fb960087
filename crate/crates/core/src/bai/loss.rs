use serde::{Deserialize, Serialize};

use super::model::{BaiArch, Reps, Variant};
use crate::error::{Error, Result};
use crate::nn::{Graph, Real, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub rec: f64,
    pub tr: f64,
    pub cyc: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Self {
            rec: 1.0,
            tr: 1.0,
            cyc: 0.5,
        }
    }
}

impl Lambdas {
    pub fn validate(&self) -> Result<()> {
        if [self.rec, self.tr, self.cyc].iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// How the squared-L2 cycle distances reduce over the elements of one sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CycleReduction {
    /// `‖K − K̿‖²` divided by the element count of `K`.
    #[default]
    Mean,
    /// `‖K − K̿‖²` summed over elements.
    Sum,
}

pub const TERM_NAMES: [&str; 12] = [
    "rec_s", "rec_e", "rec_c", "rec_v", "tr_s", "tr_e", "tr_c", "tr_v", "cyc_s", "cyc_e", "cyc_c", "cyc_v",
];

/// Scalar total and its named terms (unweighted), all on the same graph.
pub struct LossGraph {
    pub total: Var,
    pub terms: Vec<(&'static str, Var)>,
}

fn named<T>(r: Result<T>, term: &str) -> Result<T> {
    r.map_err(|e| match e {
        Error::Numerical(m) => Error::Numerical(format!("loss term {term}: {m}")),
        other => other,
    })
}

/// `(1 − cos) + ‖·‖₂` for semantics.
fn semantic_loss<T: Real>(g: &mut Graph<'_, T>, pred: Var, target: Var) -> Result<Var> {
    let c = g.cosine_loss(pred, target)?;
    let d = g.l2_dist(pred, target)?;
    g.add(c, d)
}

/// Per-modality reconstruction/translation losses.
fn rep_terms<T: Real>(g: &mut Graph<'_, T>, pred: Reps, target: Reps, names: [&'static str; 3]) -> Result<Vec<(&'static str, Var)>> {
    Ok(vec![
        (names[0], named(semantic_loss(g, pred.s, target.s), names[0])?),
        (names[1], named(g.bce(pred.e, target.e), names[1])?),
        (names[2], named(g.l2_dist(pred.c, target.c), names[2])?),
    ])
}

pub fn cycle_dist<T: Real>(g: &mut Graph<'_, T>, a: Var, b: Var, red: CycleReduction, term: &str) -> Result<Var> {
    named(
        match red {
            CycleReduction::Sum => g.sq_dist(a, b),
            CycleReduction::Mean => g.mse(a, b),
        },
        term,
    )
}

/// Squared-L2 cycle terms for the representations.
pub fn cycle_rep_terms<T: Real>(g: &mut Graph<'_, T>, pred: Reps, target: Reps, red: CycleReduction) -> Result<Vec<(&'static str, Var)>> {
    Ok(vec![
        ("cyc_s", cycle_dist(g, pred.s, target.s, red, "cyc_s")?),
        ("cyc_e", cycle_dist(g, pred.e, target.e, red, "cyc_e")?),
        ("cyc_c", cycle_dist(g, pred.c, target.c, red, "cyc_c")?),
    ])
}

/// Weighted sum of the reconstruction, translation and cycle groups.
///
/// Groups whose weight is zero are left out of the graph entirely. The UM
/// variant keeps only the three representation translation terms and never
/// touches the voxel decoder or the representation-to-voxel translator.
pub fn loss_total<T: Real>(
    arch: &BaiArch,
    g: &mut Graph<'_, T>,
    v: Var,
    reps: Reps,
    subject: u32,
    lambdas: &Lambdas,
    cycle: CycleReduction,
) -> Result<LossGraph> {
    lambdas.validate()?;
    if g.shape(v)[0] == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    let mut weighted: Vec<(&'static str, Var, f64)> = Vec::new();
    let z_v = arch.encode_fmri(g, v, subject)?;
    let zt_v = arch.t_v2r(g, z_v)?;
    let hat_r = arch.decode_reps(g, zt_v)?;

    if arch.variant == Variant::Um {
        if lambdas.tr > 0.0 {
            for (n, t) in rep_terms(g, hat_r, reps, ["tr_s", "tr_e", "tr_c"])? {
                weighted.push((n, t, lambdas.tr));
            }
        }
        return finish(g, weighted);
    }

    let z_r = arch.encode_reps(g, reps)?;
    let mut hat_v = None;
    if lambdas.rec > 0.0 {
        let tilde_v = arch.decode_fmri(g, z_v, subject)?;
        let tilde_r = arch.decode_reps(g, z_r)?;
        for (n, t) in rep_terms(g, tilde_r, reps, ["rec_s", "rec_e", "rec_c"])? {
            weighted.push((n, t, lambdas.rec));
        }
        weighted.push(("rec_v", named(g.l2_dist(tilde_v, v), "rec_v")?, lambdas.rec));
    }
    if lambdas.tr > 0.0 || lambdas.cyc > 0.0 {
        let zt_r = arch.t_r2v(g, z_r)?;
        hat_v = Some(arch.decode_fmri(g, zt_r, subject)?);
    }
    if lambdas.tr > 0.0 {
        for (n, t) in rep_terms(g, hat_r, reps, ["tr_s", "tr_e", "tr_c"])? {
            weighted.push((n, t, lambdas.tr));
        }
        let hv = hat_v.expect("computed above");
        weighted.push(("tr_v", named(g.l2_dist(hv, v), "tr_v")?, lambdas.tr));
    }
    if lambdas.cyc > 0.0 {
        let hv = hat_v.expect("computed above");
        let back_r = arch.translate_v2r(g, hv, subject)?;
        for (n, t) in cycle_rep_terms(g, back_r, reps, cycle)? {
            weighted.push((n, t, lambdas.cyc));
        }
        let back_v = arch.translate_r2v(g, hat_r, subject)?;
        weighted.push(("cyc_v", cycle_dist(g, back_v, v, cycle, "cyc_v")?, lambdas.cyc));
    }
    finish(g, weighted)
}

fn finish<T: Real>(g: &mut Graph<'_, T>, weighted: Vec<(&'static str, Var, f64)>) -> Result<LossGraph> {
    if weighted.is_empty() {
        return Err(Error::Config("all loss weights are zero".into()));
    }
    let pairs: Vec<(Var, f64)> = weighted.iter().map(|&(_, v, w)| (v, w)).collect();
    let total = g.weighted_sum(&pairs)?;
    let mut terms: Vec<(&'static str, Var)> = weighted.iter().map(|&(n, v, _)| (n, v)).collect();
    terms.sort_by_key(|(n, _)| TERM_NAMES.iter().position(|t| t == n));
    Ok(LossGraph { total, terms })
}
