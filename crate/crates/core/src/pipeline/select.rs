use super::PipelineError;

/// The hyperparameter with the highest score; ties go to the smallest value.
pub fn select_best(sweep: &[(f64, f64)]) -> Result<f64, PipelineError> {
    if sweep.is_empty() {
        return Err(PipelineError::Selection("no sweep scores".into()));
    }
    if let Some((g, s)) = sweep.iter().find(|(g, s)| !g.is_finite() || !s.is_finite()) {
        return Err(PipelineError::Selection(format!(
            "non-finite score {s} at hyperparameter {g}"
        )));
    }
    let best = sweep
        .iter()
        .copied()
        .reduce(|best, cur| {
            if cur.1 > best.1 || (cur.1 == best.1 && cur.0 < best.0) {
                cur
            } else {
                best
            }
        })
        .expect("nonempty");
    Ok(best.0)
}

/// All domains ordered by score descending, ties by position in
/// `tie_break_order`.
pub fn rank_domains(
    scores: &[(String, f64)],
    tie_break_order: &[String],
) -> Result<Vec<String>, PipelineError> {
    let mut keyed = Vec::with_capacity(scores.len());
    for (domain, score) in scores {
        if !score.is_finite() {
            return Err(PipelineError::Selection(format!(
                "non-finite score {score} for domain `{domain}`"
            )));
        }
        let pos = tie_break_order
            .iter()
            .position(|d| d == domain)
            .ok_or_else(|| {
                PipelineError::Selection(format!("domain `{domain}` is missing from the tie-break order"))
            })?;
        keyed.push((*score, pos, domain.clone()));
    }
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(keyed.into_iter().map(|(_, _, d)| d).collect())
}

/// The two highest-scoring domains, best first.
pub fn select_top2(
    scores: &[(String, f64)],
    tie_break_order: &[String],
) -> Result<(String, String), PipelineError> {
    if scores.len() < 2 {
        return Err(PipelineError::Selection(format!(
            "need at least two domains, got {}",
            scores.len()
        )));
    }
    let mut ranked = rank_domains(scores, tie_break_order)?.into_iter();
    Ok((ranked.next().expect("len ≥ 2"), ranked.next().expect("len ≥ 2")))
}
