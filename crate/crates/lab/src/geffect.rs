//! G-effect instrumentation: dot products between risk gradients and
//! unlearning-objective gradients, per step and per layer group, plus the
//! per-sample PG-effect decomposition and the first-order performance
//! prediction they support.
//!
//! Sign conventions: the risk R is the mean answer NLL. A negative
//! unlearning G-effect e_u means the step increases risk on the forget set
//! (removal); a non-negative retaining G-effect e_r means retain-set risk
//! does not grow (retention).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::EncodedExample;
use crate::error::{LabError, Result};
use crate::model::{FlatGradient, Group, ModelState};
use crate::objectives::{
    self, npo_weight, ObjectiveKind, ObjectiveSpec, RunContext,
};
use crate::scalar::{s, Scalar};

/// One instrumented step of an unlearning run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GEffectRecord {
    pub step: usize,
    pub e_u: f64,
    pub e_r: f64,
    /// group name -> (e_u share, e_r share); shares sum to the totals.
    pub per_group: BTreeMap<String, (f64, f64)>,
    pub cumulative_e_u: f64,
    pub cumulative_e_r: f64,
    /// mean answer-token probability on the forget set
    pub diag_mean_prob: f64,
    /// mean inverse confidence 1/p over forget answer tokens (clamped)
    pub diag_mean_inv_conf: f64,
    /// mean sequence-level w^npo; NaN when the objective has no such weight
    pub diag_mean_npo_weight: f64,
}

/// Per-record PG-effect sample (per-sample decomposition of the NPO G-effect).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PGEffectSample {
    pub record_id: String,
    pub step: usize,
    pub weight: f64,
    pub pg_u: f64,
    pub pg_r: f64,
}

/// Gradient of the risk metric: mean answer NLL over the records.
pub fn risk_gradient<S: Scalar>(
    model: &ModelState<S>,
    records: &[EncodedExample],
) -> Result<FlatGradient<S>> {
    if records.is_empty() {
        return Err(LabError::InvalidArgument("empty risk set".into()));
    }
    let vocab = model.layout.vocab;
    let inv_n = s::<S>(1.0 / records.len() as f64);
    let mut grad = FlatGradient::zeros(&model.layout);
    for ex in records {
        let cache = model.forward(&ex.tokens)?;
        let mut d_logits = vec![S::zero(); ex.tokens.len() * vocab];
        for i in 1..ex.tokens.len() {
            if !ex.answer_mask[i] {
                continue;
            }
            let target = ex.tokens[i] as usize;
            let row = &cache.logprobs[(i - 1) * vocab..i * vocab];
            let drow = &mut d_logits[(i - 1) * vocab..i * vocab];
            // d(-log p_y)/d logit_j = p_j - delta_jy
            for (j, dr) in drow.iter_mut().enumerate() {
                let delta = if j == target { S::one() } else { S::zero() };
                *dr = (row[j].exp() - delta) * inv_n;
            }
        }
        let g = model.backward(&cache, Some(&d_logits), &[]);
        grad.add_scaled(&g, S::one());
    }
    if !grad.is_finite() {
        return Err(LabError::Numeric("non-finite risk gradient".into()));
    }
    Ok(grad)
}

/// Total and per-group dot product of two aligned flat gradients.
pub fn dot<S: Scalar>(
    g1: &FlatGradient<S>,
    g2: &FlatGradient<S>,
) -> Result<(S, BTreeMap<Group, S>)> {
    if g1.values.len() != g2.values.len() {
        return Err(LabError::InvalidArgument(format!(
            "gradient length mismatch: {} vs {}",
            g1.values.len(),
            g2.values.len()
        )));
    }
    let mut per_group = BTreeMap::new();
    let mut total = S::zero();
    for (group, range) in &g1.groups {
        let mut acc = S::zero();
        for i in range.clone() {
            acc = acc + g1.values[i] * g2.values[i];
        }
        per_group.insert(*group, acc);
        total = total + acc;
    }
    Ok((total, per_group))
}

/// Compute the G-effect at the current parameter state (before the update).
///
/// `e_u` dots the forget-set risk gradient with the objective gradient taken
/// on the full forget set; `e_r` dots the retain_eval risk gradient with the
/// same objective gradient. Cumulative fields must be filled by the caller's
/// running sums (pass the previous record's values).
#[allow(clippy::too_many_arguments)]
pub fn geffect_step<S: Scalar>(
    model: &ModelState<S>,
    ref_model: Option<&ModelState<S>>,
    spec: &ObjectiveSpec,
    forget: &[EncodedExample],
    retain_eval: &[EncodedExample],
    ctx: &RunContext<S>,
    step: usize,
    prev_cumulative: (f64, f64),
) -> Result<GEffectRecord> {
    let (_, g_lu) = objectives::objective_loss_and_grad(model, ref_model, spec, forget, ctx)?;
    let g_risk_u = risk_gradient(model, forget)?;
    let g_risk_r = risk_gradient(model, retain_eval)?;
    let (e_u, per_u) = dot(&g_risk_u, &g_lu)?;
    let (e_r, per_r) = dot(&g_risk_r, &g_lu)?;

    let mut per_group = BTreeMap::new();
    for group in Group::ALL {
        let u = per_u[&group].to_f64().unwrap_or(f64::NAN);
        let r = per_r[&group].to_f64().unwrap_or(f64::NAN);
        per_group.insert(group.as_str().to_string(), (u, r));
    }

    // diagnostics over the forget answers
    let mut sum_p = 0.0;
    let mut sum_inv = 0.0;
    let mut n_tok = 0usize;
    for ex in forget {
        let lp = model.token_log_probs(ex)?;
        for (i, &m) in ex.answer_mask.iter().enumerate() {
            if m {
                let logp = lp[i].to_f64().unwrap_or(f64::NEG_INFINITY).max(-50.0);
                sum_p += logp.exp();
                sum_inv += (-logp).exp();
                n_tok += 1;
            }
        }
    }
    let diag_mean_npo_weight = if spec.name.needs_reference() {
        let rm = ref_model.ok_or_else(|| {
            LabError::InvalidArgument("npo-family diagnostics need the reference model".into())
        })?;
        let mut sum_w = 0.0;
        for ex in forget {
            let w: S = npo_weight(
                model.sequence_log_prob(ex)?,
                rm.sequence_log_prob(ex)?,
                s(spec.beta),
            );
            sum_w += w.to_f64().unwrap_or(f64::NAN);
        }
        sum_w / forget.len() as f64
    } else {
        f64::NAN
    };

    let e_u = e_u.to_f64().unwrap_or(f64::NAN);
    let e_r = e_r.to_f64().unwrap_or(f64::NAN);
    Ok(GEffectRecord {
        step,
        e_u,
        e_r,
        per_group,
        cumulative_e_u: prev_cumulative.0 + e_u,
        cumulative_e_r: prev_cumulative.1 + e_r,
        diag_mean_prob: sum_p / n_tok as f64,
        diag_mean_inv_conf: sum_inv / n_tok as f64,
        diag_mean_npo_weight,
    })
}

/// Gradient of log p(answer | question) for one record.
pub fn log_prob_gradient<S: Scalar>(
    model: &ModelState<S>,
    ex: &EncodedExample,
) -> Result<FlatGradient<S>> {
    let mut g = risk_gradient(model, std::slice::from_ref(ex))?;
    g.scale(-S::one());
    Ok(g)
}

/// Per-record PG-effect decomposition. Only sequence-level NPO
/// factors into one weight per sample, so other objectives are rejected.
pub fn pg_effect<S: Scalar>(
    model: &ModelState<S>,
    ref_model: &ModelState<S>,
    spec: &ObjectiveSpec,
    forget: &[(String, EncodedExample)],
    retain_eval: &[EncodedExample],
    step: usize,
) -> Result<Vec<PGEffectSample>> {
    if spec.name != ObjectiveKind::Npo {
        return Err(LabError::InvalidArgument(format!(
            "pg_effect requires the sequence-level npo objective, got {}",
            spec.name.as_str()
        )));
    }
    if forget.is_empty() {
        return Err(LabError::InvalidArgument("empty forget set".into()));
    }
    let forget_exs: Vec<EncodedExample> = forget.iter().map(|(_, e)| e.clone()).collect();
    let g_risk_u = risk_gradient(model, &forget_exs)?;
    let g_risk_r = risk_gradient(model, retain_eval)?;
    let beta = s::<S>(spec.beta);
    let mut out = Vec::with_capacity(forget.len());
    for (id, ex) in forget {
        let w = npo_weight(
            model.sequence_log_prob(ex)?,
            ref_model.sequence_log_prob(ex)?,
            beta,
        );
        let g_logp = log_prob_gradient(model, ex)?;
        let (pg_u, _) = dot(&g_risk_u, &g_logp)?;
        let (pg_r, _) = dot(&g_risk_r, &g_logp)?;
        out.push(PGEffectSample {
            record_id: id.clone(),
            step,
            weight: w.to_f64().unwrap_or(f64::NAN),
            pg_u: pg_u.to_f64().unwrap_or(f64::NAN),
            pg_r: pg_r.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(out)
}

pub const PG_BUCKET_EDGES: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];

/// Per-bucket (count, mean pg_u, mean pg_r) over half-open weight buckets
/// [lo, hi); the last bucket is closed above so weight exactly 1.0 (and any
/// saturation beyond) lands in it.
pub fn bucket_pg_effect(
    samples: &[PGEffectSample],
    edges: &[f64],
) -> Vec<(usize, f64, f64)> {
    let n_buckets = edges.len() - 1;
    let mut counts = vec![0usize; n_buckets];
    let mut sum_u = vec![0.0; n_buckets];
    let mut sum_r = vec![0.0; n_buckets];
    for sample in samples {
        let mut b = n_buckets - 1;
        for i in 0..n_buckets - 1 {
            if sample.weight >= edges[i] && sample.weight < edges[i + 1] {
                b = i;
                break;
            }
        }
        counts[b] += 1;
        sum_u[b] += sample.pg_u;
        sum_r[b] += sample.pg_r;
    }
    (0..n_buckets)
        .map(|b| {
            if counts[b] == 0 {
                (0, 0.0, 0.0)
            } else {
                (counts[b], sum_u[b] / counts[b] as f64, sum_r[b] / counts[b] as f64)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    RemovalAndRetention,
    RemovalOnly,
    RetentionOnly,
    Neither,
}

/// Removal iff e_u < 0; retention iff e_r >= 0.
pub fn classify_region(rec: &GEffectRecord) -> Region {
    match (rec.e_u < 0.0, rec.e_r >= 0.0) {
        (true, true) => Region::RemovalAndRetention,
        (true, false) => Region::RemovalOnly,
        (false, true) => Region::RetentionOnly,
        (false, false) => Region::Neither,
    }
}

/// First-order Taylor prediction of the risk change over k steps at learning
/// rate lr, with the preconditioner and step-size factors taken as identity.
pub fn predict_first_order(e: f64, lr: f64, k: usize) -> f64 {
    -lr * k as f64 * e
}

/// Fixed column order of `geffect.csv`.
pub fn geffect_csv_header() -> String {
    let mut cols = vec![
        "step".to_string(),
        "e_u".to_string(),
        "e_r".to_string(),
        "cum_e_u".to_string(),
        "cum_e_r".to_string(),
    ];
    for group in Group::ALL {
        cols.push(format!("e_u_{}", group.as_str()));
        cols.push(format!("e_r_{}", group.as_str()));
    }
    cols.push("diag_mean_prob".to_string());
    cols.push("diag_mean_inv_conf".to_string());
    cols.push("diag_mean_npo_weight".to_string());
    cols.join(",")
}

pub fn write_geffect_csv(path: &Path, records: &[GEffectRecord]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "{}", geffect_csv_header())?;
    for rec in records {
        write!(w, "{},{},{},{},{}", rec.step, rec.e_u, rec.e_r, rec.cumulative_e_u, rec.cumulative_e_r)?;
        for group in Group::ALL {
            let (u, r) = rec.per_group[group.as_str()];
            write!(w, ",{u},{r}")?;
        }
        writeln!(
            w,
            ",{},{},{}",
            rec.diag_mean_prob, rec.diag_mean_inv_conf, rec.diag_mean_npo_weight
        )?;
    }
    Ok(())
}

pub fn read_geffect_csv(path: &Path) -> Result<Vec<GEffectRecord>> {
    if !path.exists() {
        return Err(LabError::MissingArtifact(path.display().to_string()));
    }
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| LabError::Serialization("empty geffect.csv".into()))?;
    if header != geffect_csv_header() {
        return Err(LabError::Serialization(format!(
            "unexpected geffect.csv header: {header}"
        )));
    }
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 + 2 * Group::ALL.len() + 3 {
            return Err(LabError::Serialization(format!(
                "geffect.csv line {}: wrong field count",
                lineno + 2
            )));
        }
        let f = |i: usize| -> Result<f64> {
            fields[i].parse().map_err(|_| {
                LabError::Serialization(format!("geffect.csv line {}: bad number", lineno + 2))
            })
        };
        let mut per_group = BTreeMap::new();
        for (gi, group) in Group::ALL.iter().enumerate() {
            per_group.insert(group.as_str().to_string(), (f(5 + 2 * gi)?, f(6 + 2 * gi)?));
        }
        let tail = 5 + 2 * Group::ALL.len();
        records.push(GEffectRecord {
            step: fields[0].parse().map_err(|_| {
                LabError::Serialization(format!("geffect.csv line {}: bad step", lineno + 2))
            })?,
            e_u: f(1)?,
            e_r: f(2)?,
            cumulative_e_u: f(3)?,
            cumulative_e_r: f(4)?,
            per_group,
            diag_mean_prob: f(tail)?,
            diag_mean_inv_conf: f(tail + 1)?,
            diag_mean_npo_weight: f(tail + 2)?,
        });
    }
    Ok(records)
}

pub fn read_pgeffect_jsonl(path: &Path) -> Result<Vec<PGEffectSample>> {
    if !path.exists() {
        return Err(LabError::MissingArtifact(path.display().to_string()));
    }
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Into::into))
        .collect()
}

pub fn write_pgeffect_jsonl(path: &Path, samples: &[PGEffectSample]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for sample in samples {
        serde_json::to_writer(&mut w, sample)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Distribution, Normal};

    fn random_model(seed: u64) -> ModelState<f64> {
        let cfg = ModelConfig {
            vocab_size: 11,
            d_model: 16,
            n_layers: 3,
            n_heads: 2,
            context_len: 16,
            seed: 11,
        };
        let mut m = ModelState::<f64>::init(cfg).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.25).unwrap();
        for p in &mut m.params {
            *p += normal.sample(&mut rng);
        }
        m
    }

    fn ex(tokens: &[u32], n_answer: usize) -> EncodedExample {
        let len = tokens.len();
        EncodedExample {
            tokens: tokens.to_vec(),
            answer_mask: (0..len).map(|i| i >= len - n_answer).collect(),
        }
    }

    fn forget() -> Vec<EncodedExample> {
        vec![ex(&[0, 5, 6, 2, 7, 8, 1], 2), ex(&[0, 9, 2, 10, 1], 1)]
    }

    fn retain() -> Vec<EncodedExample> {
        vec![ex(&[0, 3, 2, 4, 6, 1], 2), ex(&[0, 7, 2, 5, 1], 1)]
    }

    #[test]
    fn risk_gradient_is_negated_ga_gradient() {
        let m = random_model(1);
        let b = forget();
        let g_risk = risk_gradient(&m, &b).unwrap();
        let (_, g_ga) = objectives::objective_loss_and_grad(
            &m,
            None,
            &ObjectiveSpec::plain(ObjectiveKind::Ga),
            &b,
            &RunContext::default(),
        )
        .unwrap();
        for (a, b) in g_risk.values.iter().zip(&g_ga.values) {
            assert!((a + b).abs() < 1e-12);
        }
    }

    #[test]
    fn risk_gradient_finite_differences() {
        let m = random_model(2);
        let b = forget();
        let g = risk_gradient(&m, &b).unwrap();
        let risk = |model: &ModelState<f64>| -> f64 {
            b.iter()
                .map(|e| -model.sequence_log_prob(e).unwrap())
                .sum::<f64>()
                / b.len() as f64
        };
        let h = 1e-5;
        let n = m.n_params();
        let mut checked = 0;
        for idx in (0..n).step_by(n / 32) {
            let mut plus = m.clone();
            plus.params[idx] += h;
            let mut minus = m.clone();
            minus.params[idx] -= h;
            let fd = (risk(&plus) - risk(&minus)) / (2.0 * h);
            let an = g.values[idx];
            let denom = fd.abs().max(an.abs()).max(1e-6);
            assert!((fd - an).abs() / denom < 1e-4, "coord {idx}: {fd} vs {an}");
            checked += 1;
        }
        assert!(checked >= 32);
    }

    #[test]
    fn risk_gradient_is_linear_in_halves() {
        let m = random_model(3);
        let all = vec![
            ex(&[0, 5, 6, 2, 7, 8, 1], 2),
            ex(&[0, 9, 2, 10, 1], 1),
            ex(&[0, 3, 2, 4, 6, 1], 2),
            ex(&[0, 7, 2, 5, 1], 1),
        ];
        let g_full = risk_gradient(&m, &all).unwrap();
        let g_a = risk_gradient(&m, &all[..2]).unwrap();
        let g_b = risk_gradient(&m, &all[2..]).unwrap();
        for i in 0..g_full.values.len() {
            let mean = 0.5 * (g_a.values[i] + g_b.values[i]);
            assert!((g_full.values[i] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn dot_identities_and_brute_force() {
        let m = random_model(4);
        let g1 = risk_gradient(&m, &forget()).unwrap();
        let g2 = risk_gradient(&m, &retain()).unwrap();

        // dot(g, g) = ||g||^2
        let (self_dot, per) = dot(&g1, &g1).unwrap();
        assert!((self_dot - g1.norm().powi(2)).abs() < 1e-12 * self_dot.abs().max(1.0));
        let group_sum: f64 = per.values().sum();
        assert!((group_sum - self_dot).abs() < 1e-10 * self_dot.abs().max(1.0));

        // brute-force elementwise oracle
        let (total, per) = dot(&g1, &g2).unwrap();
        let brute: f64 = g1.values.iter().zip(&g2.values).map(|(a, b)| a * b).sum();
        assert!((total - brute).abs() < 1e-12 * brute.abs().max(1e-12));
        let group_sum: f64 = per.values().sum();
        assert!((group_sum - total).abs() <= 1e-10 * total.abs().max(1e-12));

        // orthogonal vectors
        let mut a = FlatGradient::zeros(&m.layout);
        let mut b = FlatGradient::zeros(&m.layout);
        a.values[0] = 3.0;
        b.values[1] = 4.0;
        assert_eq!(dot(&a, &b).unwrap().0, 0.0);
    }

    #[test]
    fn ga_geffect_is_negated_risk_norm() {
        let m = random_model(5);
        let spec = ObjectiveSpec::plain(ObjectiveKind::Ga);
        let rec = geffect_step(
            &m,
            None,
            &spec,
            &forget(),
            &retain(),
            &RunContext::default(),
            0,
            (0.0, 0.0),
        )
        .unwrap();
        let g_risk = risk_gradient(&m, &forget()).unwrap();
        let expected = -g_risk.norm().powi(2);
        assert!(rec.e_u <= 0.0);
        assert!((rec.e_u - expected).abs() < 1e-10 * expected.abs());
        // group shares sum to totals
        let (su, sr) = rec
            .per_group
            .values()
            .fold((0.0, 0.0), |(u, r), &(gu, gr)| (u + gu, r + gr));
        assert!((su - rec.e_u).abs() <= 1e-10 * rec.e_u.abs().max(1e-12));
        assert!((sr - rec.e_r).abs() <= 1e-10 * rec.e_r.abs().max(1e-12));
        assert!(rec.e_r.is_finite());
        assert!(rec.diag_mean_prob > 0.0 && rec.diag_mean_prob < 1.0);
        assert!(rec.diag_mean_inv_conf >= 1.0);
        assert!(rec.diag_mean_npo_weight.is_nan());
    }

    #[test]
    fn npo_at_reference_matches_ga_geffect() {
        let m = random_model(6);
        let mut spec = ObjectiveSpec::plain(ObjectiveKind::Npo);
        spec.beta = 2.0;
        let rec_npo = geffect_step(
            &m,
            Some(&m),
            &spec,
            &forget(),
            &retain(),
            &RunContext::default(),
            0,
            (0.0, 0.0),
        )
        .unwrap();
        let rec_ga = geffect_step(
            &m,
            None,
            &ObjectiveSpec::plain(ObjectiveKind::Ga),
            &forget(),
            &retain(),
            &RunContext::default(),
            0,
            (0.0, 0.0),
        )
        .unwrap();
        assert!((rec_npo.e_u - rec_ga.e_u).abs() < 1e-10 * rec_ga.e_u.abs());
        assert!((rec_npo.diag_mean_npo_weight - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cumulative_sums_accumulate() {
        let m = random_model(7);
        let spec = ObjectiveSpec::plain(ObjectiveKind::Ga);
        let ctx = RunContext::default();
        let r0 = geffect_step(&m, None, &spec, &forget(), &retain(), &ctx, 0, (0.0, 0.0)).unwrap();
        let r1 = geffect_step(
            &m,
            None,
            &spec,
            &forget(),
            &retain(),
            &ctx,
            1,
            (r0.cumulative_e_u, r0.cumulative_e_r),
        )
        .unwrap();
        assert!((r1.cumulative_e_u - 2.0 * r0.e_u).abs() < 1e-12 * r0.e_u.abs());
        assert!((r1.cumulative_e_r - 2.0 * r0.e_r).abs() < 1e-9 * r0.e_r.abs().max(1e-9));
    }

    #[test]
    fn pg_effect_batch_identity() {
        let m = random_model(8);
        let r = random_model(9);
        let mut spec = ObjectiveSpec::plain(ObjectiveKind::Npo);
        spec.beta = 0.5;
        let items: Vec<(String, EncodedExample)> = forget()
            .into_iter()
            .enumerate()
            .map(|(i, e)| (format!("rec{i}"), e))
            .collect();
        let samples = pg_effect(&m, &r, &spec, &items, &retain(), 3).unwrap();
        assert_eq!(samples.len(), items.len());

        let rec = geffect_step(
            &m,
            Some(&r),
            &spec,
            &forget(),
            &retain(),
            &RunContext::default(),
            3,
            (0.0, 0.0),
        )
        .unwrap();
        let mean_u: f64 =
            samples.iter().map(|p| p.weight * p.pg_u).sum::<f64>() / samples.len() as f64;
        let mean_r: f64 =
            samples.iter().map(|p| p.weight * p.pg_r).sum::<f64>() / samples.len() as f64;
        assert!(
            (mean_u - rec.e_u).abs() <= 1e-8 * rec.e_u.abs().max(1e-12),
            "{mean_u} vs {}",
            rec.e_u
        );
        assert!((mean_r - rec.e_r).abs() <= 1e-8 * rec.e_r.abs().max(1e-12));
    }

    #[test]
    fn pg_effect_single_record_equals_batch() {
        let m = random_model(10);
        let r = random_model(11);
        let mut spec = ObjectiveSpec::plain(ObjectiveKind::Npo);
        spec.beta = 1.0;
        let items = vec![("only".to_string(), ex(&[0, 5, 6, 2, 7, 8, 1], 2))];
        let samples = pg_effect(&m, &r, &spec, &items, &retain(), 0).unwrap();
        let rec = geffect_step(
            &m,
            Some(&r),
            &spec,
            &[items[0].1.clone()],
            &retain(),
            &RunContext::default(),
            0,
            (0.0, 0.0),
        )
        .unwrap();
        let s = &samples[0];
        assert!((s.weight * s.pg_u - rec.e_u).abs() <= 1e-10 * rec.e_u.abs().max(1e-12));
    }

    #[test]
    fn pg_effect_rejects_non_npo() {
        let m = random_model(12);
        let items = vec![("a".to_string(), ex(&[0, 5, 2, 7, 1], 1))];
        for name in [ObjectiveKind::Ga, ObjectiveKind::Tnpo, ObjectiveKind::Po] {
            let mut spec = ObjectiveSpec::plain(name);
            spec.beta = 1.0;
            assert!(pg_effect(&m, &m, &spec, &items, &retain(), 0).is_err());
        }
    }

    #[test]
    fn pg_effect_at_reference_has_unit_weights() {
        let m = random_model(13);
        let mut spec = ObjectiveSpec::plain(ObjectiveKind::Npo);
        spec.beta = 4.0;
        let items: Vec<(String, EncodedExample)> = forget()
            .into_iter()
            .enumerate()
            .map(|(i, e)| (i.to_string(), e))
            .collect();
        let samples = pg_effect(&m, &m, &spec, &items, &retain(), 0).unwrap();
        for s in &samples {
            assert!((s.weight - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn buckets_cover_and_count() {
        // all weights exactly 1 land in the final (closed) bucket
        let ones: Vec<PGEffectSample> = (0..7)
            .map(|i| PGEffectSample {
                record_id: i.to_string(),
                step: 0,
                weight: 1.0,
                pg_u: 2.0,
                pg_r: -1.0,
            })
            .collect();
        let buckets = bucket_pg_effect(&ones, &PG_BUCKET_EDGES);
        assert_eq!(buckets.len(), 5);
        assert_eq!(buckets[4].0, 7);
        assert!((buckets[4].1 - 2.0).abs() < 1e-15);
        assert!(buckets[..4].iter().all(|b| b.0 == 0));

        // empty input
        let empty = bucket_pg_effect(&[], &PG_BUCKET_EDGES);
        assert!(empty.iter().all(|b| *b == (0, 0.0, 0.0)));

        // brute-force oracle on scattered weights
        let ws = [0.0, 0.19, 0.2, 0.55, 0.79, 0.8, 0.99, 1.0, 1.7];
        let samples: Vec<PGEffectSample> = ws
            .iter()
            .enumerate()
            .map(|(i, &w)| PGEffectSample {
                record_id: i.to_string(),
                step: 0,
                weight: w,
                pg_u: w,
                pg_r: -w,
            })
            .collect();
        let buckets = bucket_pg_effect(&samples, &PG_BUCKET_EDGES);
        let total: usize = buckets.iter().map(|b| b.0).sum();
        assert_eq!(total, ws.len());
        let brute = |lo: f64, hi: f64, last: bool| -> usize {
            ws.iter()
                .filter(|&&w| w >= lo && (w < hi || last))
                .count()
        };
        assert_eq!(buckets[0].0, brute(0.0, 0.2, false));
        assert_eq!(buckets[1].0, brute(0.2, 0.4, false));
        assert_eq!(buckets[4].0, brute(0.8, 1.0, true));
    }

    #[test]
    fn region_classification_boundaries() {
        let base = GEffectRecord {
            step: 0,
            e_u: 0.0,
            e_r: 0.0,
            per_group: BTreeMap::new(),
            cumulative_e_u: 0.0,
            cumulative_e_r: 0.0,
            diag_mean_prob: 0.0,
            diag_mean_inv_conf: 0.0,
            diag_mean_npo_weight: f64::NAN,
        };
        let with = |e_u: f64, e_r: f64| {
            let mut r = base.clone();
            r.e_u = e_u;
            r.e_r = e_r;
            r
        };
        assert_eq!(classify_region(&with(-1.0, 0.0)), Region::RemovalAndRetention);
        assert_eq!(classify_region(&with(1.0, -1.0)), Region::Neither);
        assert_eq!(classify_region(&with(-1.0, -1.0)), Region::RemovalOnly);
        assert_eq!(classify_region(&with(0.0, 1.0)), Region::RetentionOnly);
    }

    #[test]
    fn first_order_prediction_arithmetic() {
        assert_eq!(predict_first_order(0.0, 1e-4, 5), 0.0);
        assert!((predict_first_order(2.0, 1e-4, 1) + 2e-4).abs() < 1e-18);
        assert!((predict_first_order(-3.0, 1e-5, 10) - 3e-4).abs() < 1e-18);
    }

    #[test]
    fn first_order_prediction_matches_measured_risk_change() {
        // a single plain-SGD GA step at small lr: measured delta-R on the
        // forget set stays within 10% of -lr * e_u
        let spec = ObjectiveSpec::plain(ObjectiveKind::Ga);
        let ctx = RunContext::default();
        let b = forget();
        for (seed, lr) in [(20u64, 1e-4), (21, 1e-5), (22, 1e-4), (23, 1e-5)] {
            let m = random_model(seed);
            let (_, g_lu) =
                objectives::objective_loss_and_grad(&m, None, &spec, &b, &ctx).unwrap();
            let rec = geffect_step(&m, None, &spec, &b, &retain(), &ctx, 0, (0.0, 0.0)).unwrap();
            let mut stepped = m.clone();
            for (p, g) in stepped.params.iter_mut().zip(&g_lu.values) {
                *p -= lr * g;
            }
            let risk = |model: &ModelState<f64>| -> f64 {
                b.iter()
                    .map(|e| -model.sequence_log_prob(e).unwrap())
                    .sum::<f64>()
                    / b.len() as f64
            };
            let measured = risk(&stepped) - risk(&m);
            let predicted = predict_first_order(rec.e_u, lr, 1);
            assert!(
                (measured - predicted).abs() <= (0.1 * predicted.abs()).max(1e-9),
                "seed {seed} lr {lr}: measured {measured} vs predicted {predicted}"
            );
        }
    }

    #[test]
    fn csv_and_jsonl_round_trip_shapes() {
        let m = random_model(30);
        let spec = ObjectiveSpec::plain(ObjectiveKind::Ga);
        let rec = geffect_step(
            &m,
            None,
            &spec,
            &forget(),
            &retain(),
            &RunContext::default(),
            0,
            (0.0, 0.0),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("geffect.csv");
        write_geffect_csv(&csv_path, &[rec.clone()]).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert_eq!(header, geffect_csv_header());
        let row = lines.next().unwrap();
        assert_eq!(row.split(',').count(), header.split(',').count());
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields[0], "0");
        assert!((fields[1].parse::<f64>().unwrap() - rec.e_u).abs() < 1e-12);

        let jsonl_path = dir.path().join("pgeffect.jsonl");
        let sample = PGEffectSample {
            record_id: "r".into(),
            step: 1,
            weight: 0.5,
            pg_u: 1.0,
            pg_r: -1.0,
        };
        write_pgeffect_jsonl(&jsonl_path, &[sample.clone()]).unwrap();
        let line = std::fs::read_to_string(&jsonl_path).unwrap();
        let back: PGEffectSample = serde_json::from_str(line.trim()).unwrap();
        assert_eq!(back.record_id, sample.record_id);
        assert_eq!(back.weight, sample.weight);
    }
}
