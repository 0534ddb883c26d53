//! Evaluation protocol: extraction strength (exact and perturbed), the
//! model-utility proxy, and forget quality via a two-sample KS test against
//! the gold retain-only model.
//!
//! Everything here is deterministic: greedy decoding, fixed aggregation
//! order, no sampling.

use serde::{Deserialize, Serialize};

use crate::corpus::{self, EncodedExample, QARecord, Tokenizer};
use crate::error::{LabError, Result};
use crate::model::ModelState;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub es_exact_retain: f64,
    pub es_exact_forget: f64,
    pub es_perturb_retain: f64,
    pub es_perturb_forget: f64,
    pub mu: f64,
    pub fq: f64,
    pub uwc_lambda: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_record: Option<Vec<EvalDetailRow>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalDetailRow {
    pub record_id: String,
    pub split: String,
    pub es_exact: f64,
    pub es_perturb: f64,
    pub norm_logp: f64,
}

/// Greedy next-token choice; ties resolve to the lowest token id.
fn greedy_next<S: Scalar>(model: &ModelState<S>, prefix: &[u32]) -> Result<u32> {
    let cache = model.forward(prefix)?;
    let vocab = model.layout.vocab;
    let row = &cache.logprobs[(prefix.len() - 1) * vocab..prefix.len() * vocab];
    let mut best = 0usize;
    for (j, &lp) in row.iter().enumerate() {
        if lp > row[best] {
            best = j;
        }
    }
    Ok(best as u32)
}

/// Whether greedy decoding from `prefix` emits exactly `target`.
fn greedy_completes<S: Scalar>(
    model: &ModelState<S>,
    prefix: &[u32],
    target: &[u32],
) -> Result<bool> {
    let mut seq = prefix.to_vec();
    for &want in target {
        if seq.len() >= model.layout.ctx {
            return Ok(false);
        }
        let next = greedy_next(model, &seq)?;
        if next != want {
            return Ok(false);
        }
        seq.push(next);
    }
    Ok(true)
}

/// ES from the per-k success profile (k = number of force-fed answer
/// tokens, indices 0..=m): 1 - k*/m with k* the minimal succeeding k.
pub fn es_from_success(success: &[bool]) -> f64 {
    let m = success.len() - 1;
    let k_star = success.iter().position(|&ok| ok).unwrap_or(m);
    1.0 - k_star as f64 / m as f64
}

/// Extraction strength of one record: scan all prefix lengths k = 0..m and
/// take the minimal k from which greedy decoding restores the remaining
/// answer tokens. Succeeding at k but failing at k+1 is possible with greedy
/// decoding; the minimal index is used (the success scan is exhaustive).
pub fn extraction_strength<S: Scalar>(
    model: &ModelState<S>,
    tok: &Tokenizer,
    record: &QARecord,
    use_rephrased: bool,
) -> Result<f64> {
    let ex = corpus::encode(tok, record, use_rephrased)?;
    extraction_strength_encoded(model, &ex)
}

pub fn extraction_strength_encoded<S: Scalar>(
    model: &ModelState<S>,
    ex: &EncodedExample,
) -> Result<f64> {
    let answer_start = ex
        .answer_mask
        .iter()
        .position(|&m| m)
        .ok_or_else(|| LabError::InvalidArgument("record has no answer tokens".into()))?;
    let m = ex.answer_mask.iter().filter(|&&b| b).count();
    if m == 0 {
        return Err(LabError::InvalidArgument("empty answer".into()));
    }
    let answer = &ex.tokens[answer_start..answer_start + m];
    let mut success = Vec::with_capacity(m + 1);
    for k in 0..=m {
        let prefix = &ex.tokens[..answer_start + k];
        success.push(greedy_completes(model, prefix, &answer[k..])?);
    }
    Ok(es_from_success(&success))
}

/// Harmonic mean; collapses toward 0 if any element does.
pub fn harmonic_mean(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    n / xs.iter().map(|&x| 1.0 / x).sum::<f64>()
}

/// Length-normalized answer probability exp(log p / m) of one record.
pub fn normalized_answer_prob<S: Scalar>(
    model: &ModelState<S>,
    ex: &EncodedExample,
) -> Result<f64> {
    let m = ex.answer_mask.iter().filter(|&&b| b).count();
    let lp = model
        .sequence_log_prob(ex)?
        .to_f64()
        .ok_or_else(|| LabError::Numeric("log prob not representable".into()))?;
    Ok((lp / m as f64).exp())
}

/// Model utility: harmonic mean of length-normalized answer probabilities
/// over the retain evaluation records.
pub fn model_utility<S: Scalar>(
    model: &ModelState<S>,
    examples: &[EncodedExample],
) -> Result<f64> {
    if examples.is_empty() {
        return Err(LabError::InvalidArgument("empty retain_eval set".into()));
    }
    let probs: Vec<f64> = examples
        .iter()
        .map(|ex| normalized_answer_prob(model, ex))
        .collect::<Result<_>>()?;
    Ok(harmonic_mean(&probs))
}

/// Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.is_empty() || ys.is_empty() {
        return Err(LabError::InvalidArgument("empty KS sample".into()));
    }
    let mut xs = xs.to_vec();
    let mut ys = ys.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    ys.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    let n = xs.len();
    let m = ys.len();
    let mut i = 0usize;
    let mut j = 0usize;
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let v = xs[i].min(ys[j]);
        while i < n && xs[i] <= v {
            i += 1;
        }
        while j < m && ys[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    Ok((d, ks_asymptotic_p(d, n, m)))
}

/// Asymptotic two-sample Kolmogorov distribution survival function with the
/// standard small-sample correction; D = 0 maps to p = 1 exactly.
fn ks_asymptotic_p(d: f64, n: usize, m: usize) -> f64 {
    if d <= 0.0 {
        return 1.0;
    }
    let en = (n * m) as f64 / (n + m) as f64;
    let sqrt_en = en.sqrt();
    let lambda = (sqrt_en + 0.12 + 0.11 / sqrt_en) * d;
    let mut p = 0.0;
    let mut sign = 1.0;
    for j in 1..=100 {
        let term = (-2.0 * (j as f64 * lambda).powi(2)).exp();
        p += sign * term;
        sign = -sign;
        if term < 1e-300 {
            break;
        }
    }
    (2.0 * p).clamp(f64::MIN_POSITIVE, 1.0)
}

/// Length-normalized answer NLL for each record.
pub fn normalized_nlls<S: Scalar>(
    model: &ModelState<S>,
    examples: &[EncodedExample],
) -> Result<Vec<f64>> {
    examples
        .iter()
        .map(|ex| {
            let m = ex.answer_mask.iter().filter(|&&b| b).count();
            let lp = model
                .sequence_log_prob(ex)?
                .to_f64()
                .ok_or_else(|| LabError::Numeric("log prob not representable".into()))?;
            Ok(-lp / m as f64)
        })
        .collect()
}

/// FQ = log10 of the KS p-value between the model's and the gold model's
/// per-record normalized forget NLLs; 0 iff the distributions are
/// indistinguishable (p = 1).
pub fn forget_quality<S: Scalar>(
    model: &ModelState<S>,
    gold: &ModelState<S>,
    forget: &[EncodedExample],
) -> Result<f64> {
    if forget.is_empty() {
        return Err(LabError::InvalidArgument("empty forget set".into()));
    }
    let xs = normalized_nlls(model, forget)?;
    let ys = normalized_nlls(gold, forget)?;
    let (_, p) = ks_two_sample(&xs, &ys)?;
    Ok(p.log10())
}

/// Assemble the full report: four ES means, MU on retain_eval, FQ against
/// the gold model.
pub fn evaluate<S: Scalar>(
    model: &ModelState<S>,
    gold: &ModelState<S>,
    tok: &Tokenizer,
    forget_records: &[QARecord],
    retain_eval_records: &[QARecord],
    uwc_lambda: f64,
    with_detail: bool,
) -> Result<EvalReport> {
    if forget_records.is_empty() || retain_eval_records.is_empty() {
        return Err(LabError::InvalidArgument(
            "evaluate needs non-empty forget and retain_eval splits".into(),
        ));
    }
    let mut detail = Vec::new();
    let mut es = |records: &[QARecord], split: &str| -> Result<(f64, f64)> {
        let mut sum_exact = 0.0;
        let mut sum_perturb = 0.0;
        for rec in records {
            let exact = extraction_strength(model, tok, rec, false)?;
            let perturb = extraction_strength(model, tok, rec, true)?;
            sum_exact += exact;
            sum_perturb += perturb;
            if with_detail {
                let ex = corpus::encode(tok, rec, false)?;
                let m = ex.answer_mask.iter().filter(|&&b| b).count();
                detail.push(EvalDetailRow {
                    record_id: rec.id.clone(),
                    split: split.to_string(),
                    es_exact: exact,
                    es_perturb: perturb,
                    norm_logp: model.sequence_log_prob(&ex)?.to_f64().unwrap_or(f64::NAN)
                        / m as f64,
                });
            }
        }
        let n = records.len() as f64;
        Ok((sum_exact / n, sum_perturb / n))
    };
    let (es_exact_forget, es_perturb_forget) = es(forget_records, "forget")?;
    let (es_exact_retain, es_perturb_retain) = es(retain_eval_records, "retain_eval")?;

    let retain_exs: Vec<EncodedExample> = retain_eval_records
        .iter()
        .map(|r| corpus::encode(tok, r, false))
        .collect::<Result<_>>()?;
    let forget_exs: Vec<EncodedExample> = forget_records
        .iter()
        .map(|r| corpus::encode(tok, r, false))
        .collect::<Result<_>>()?;
    let mu = model_utility(model, &retain_exs)?;
    let fq = forget_quality(model, gold, &forget_exs)?;

    Ok(EvalReport {
        es_exact_retain,
        es_exact_forget,
        es_perturb_retain,
        es_perturb_forget,
        mu,
        fq,
        uwc_lambda,
        per_record: if with_detail { Some(detail) } else { None },
    })
}

pub fn write_eval_json(path: &std::path::Path, report: &EvalReport) -> Result<()> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), report)?;
    Ok(())
}
