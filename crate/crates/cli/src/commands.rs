use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use lmmrec::ingest::{resolve_level, AGE, AGE_LABELS, GENDER, GENDER_LABELS, OCCUPATION, OCCUPATION_LABELS};
use lmmrec::stats::{aic, bic};
use lmmrec::{
    coefficient_report, cross_validate, fit, information_criteria, likelihood_ratio_test, load_movielens,
    rank_groups_for_item, rank_items_for_group, test_report, ColumnTerm, CvOptions, Fit, GroupCell, ModelFormula,
    MovieLens, RemlError, Selector, Table as Observations,
};
use rayon::prelude::*;

use crate::args::{FitArgs, SelectArgs};
use crate::output::{Table, Value};
use crate::{NotConverged, Tagged, UsageError};

pub fn load(data: Option<&Path>) -> Result<MovieLens> {
    let dir = data.ok_or_else(|| {
        UsageError(
            "ingest: no data directory; pass --data, set LMMREC_DATA or add `data = …` to the config file".into(),
        )
    })?;
    Ok(load_movielens(dir).tagged()?)
}

fn selector(select: &SelectArgs) -> Result<Selector> {
    Ok(select.selector().ok_or_else(|| UsageError("select the ratings with --movie, --movie-id or --genre".into()))?)
}

fn observations(ml: &MovieLens, sel: &Selector) -> Result<Observations> {
    Ok(ml.observation_table(sel).tagged()?)
}

fn formula(text: &str) -> Result<ModelFormula> {
    lmmrec::parse_formula(text).tagged().with_context(|| format!("in formula `{text}`"))
}

fn fit_one(f: &ModelFormula, t: &Observations, args: &FitArgs) -> Result<Fit> {
    // Design problems (e.g. an unknown factor) are reported as such.
    fit(f, t, args.criterion(), &args.options()).map_err(|e| {
        anyhow::Error::from(match e {
            RemlError::Design(d) => lmmrec::Error::Design(d),
            e => lmmrec::Error::Reml(e),
        })
    })
}

fn criterion_label(fit: &Fit) -> &'static str {
    match fit.criterion {
        lmmrec::Criterion::Reml => "REML",
        lmmrec::Criterion::Ml => "ML",
    }
}

fn term_parts(term: &ColumnTerm) -> (String, String) {
    match term {
        ColumnTerm::Intercept => ("intercept".into(), String::new()),
        ColumnTerm::Level { factor, label, .. } => (factor.clone(), label.clone()),
    }
}

/// Fails after output has been written if any fit stopped early.
fn check_converged<'a>(fits: impl IntoIterator<Item = (&'a str, &'a Fit)>) -> Result<()> {
    let stuck: Vec<&str> = fits.into_iter().filter(|(_, f)| !f.converged).map(|(l, _)| l).collect();
    if stuck.is_empty() {
        Ok(())
    } else {
        Err(NotConverged(stuck.join(", ")).into())
    }
}

pub fn fit_summary(fit: &Fit) -> Table {
    let mut t = Table::new(["kind", "name", "level", "estimate", "std_error"]);
    t.push(vec!["model".into(), "formula".into(), fit.formula.to_string().into(), Value::Missing, Value::Missing]);
    t.push(vec!["model".into(), "criterion".into(), criterion_label(fit).into(), Value::Missing, Value::Missing]);
    for (fe, se) in fit.fixed.iter().zip(fit.fixed_standard_errors()) {
        let (name, level) = term_parts(&fe.term);
        t.push(vec!["fixed".into(), name.into(), level.into(), fe.estimate.into(), se.into()]);
    }
    for term in &fit.dropped {
        let (name, level) = term_parts(term);
        t.push(vec!["aliased".into(), name.into(), level.into(), Value::Missing, Value::Missing]);
    }
    for r in &fit.random {
        for (level, &u) in r.levels.iter().zip(&r.estimates) {
            t.push(vec!["random".into(), r.factor.as_str().into(), level.as_str().into(), u.into(), Value::Missing]);
        }
    }
    let sigma2 = fit.theta.sigma2;
    t.push(vec!["variance".into(), "residual".into(), String::new().into(), sigma2.into(), Value::Missing]);
    for (r, &g) in fit.random.iter().zip(&fit.theta.gamma) {
        t.push(vec![
            "variance".into(),
            r.factor.as_str().into(),
            String::new().into(),
            (g * sigma2).into(),
            Value::Missing,
        ]);
        t.push(vec!["ratio".into(), r.factor.as_str().into(), String::new().into(), g.into(), Value::Missing]);
    }
    let ic = information_criteria(fit);
    let stats: [(&str, Value); 7] = [
        ("loglik", ic.loglik.into()),
        ("aic", ic.aic.into()),
        ("bic", ic.bic.into()),
        ("n_params", fit.n_params().into()),
        ("n_obs", fit.n_obs.into()),
        ("iterations", fit.iterations.into()),
        ("converged", fit.converged.into()),
    ];
    for (name, v) in stats {
        t.push(vec!["statistic".into(), name.into(), String::new().into(), v, Value::Missing]);
    }
    t
}

pub fn cmd_fit(ml: &MovieLens, select: &SelectArgs, formula_text: &str, args: &FitArgs) -> Result<(Table, Result<()>)> {
    let sel = selector(select)?;
    let t = observations(ml, &sel)?;
    let fit = fit_one(&formula(formula_text)?, &t, args)?;
    let label = fit.formula.to_string();
    Ok((fit_summary(&fit), check_converged([(label.as_str(), &fit)])))
}

pub fn cmd_compare(
    ml: &MovieLens,
    select: &SelectArgs,
    nested: &str,
    full: &str,
    args: &FitArgs,
) -> Result<(Table, Result<()>)> {
    let sel = selector(select)?;
    let t = observations(ml, &sel)?;
    let (fn_, ff) = (formula(nested)?, formula(full)?);
    let small = fit_one(&fn_, &t, args)?;
    let large = fit_one(&ff, &t, args)?;
    let lrt = likelihood_ratio_test(&small, &large).tagged()?;

    // Both rows use the maximum-likelihood fits the test is based on.
    let n = small.n_obs;
    let mut out = Table::new(["model", "formula", "df", "aic", "bic", "loglik", "lr_stat", "delta_df", "p_value"]);
    out.push(vec![
        "nested".into(),
        fn_.to_string().into(),
        lrt.df_nested.into(),
        aic(lrt.loglik_nested, lrt.df_nested).into(),
        bic(lrt.loglik_nested, lrt.df_nested, n).into(),
        lrt.loglik_nested.into(),
        Value::Dash,
        Value::Dash,
        Value::Dash,
    ]);
    out.push(vec![
        "full".into(),
        ff.to_string().into(),
        lrt.df_full.into(),
        aic(lrt.loglik_full, lrt.df_full).into(),
        bic(lrt.loglik_full, lrt.df_full, n).into(),
        lrt.loglik_full.into(),
        lrt.lr_stat.into(),
        lrt.delta_df.into(),
        lrt.p_value.into(),
    ]);
    let (a, b) = (fn_.to_string(), ff.to_string());
    Ok((out, check_converged([(a.as_str(), &small), (b.as_str(), &large)])))
}

pub fn cmd_criteria(
    ml: &MovieLens,
    select: &SelectArgs,
    formulas: &[String],
    args: &FitArgs,
) -> Result<(Table, Result<()>)> {
    let sel = selector(select)?;
    let t = observations(ml, &sel)?;
    let parsed: Vec<ModelFormula> = formulas.iter().map(|f| formula(f)).collect::<Result<_>>()?;
    let fits: Vec<Fit> = parsed.par_iter().map(|f| fit_one(f, &t, args)).collect::<Result<_>>()?;
    let mut out = Table::new(["model", "formula", "p_value", "aic", "bic", "loglik", "df", "converged"]);
    let labels: Vec<String> = (1..=fits.len()).map(|i| format!("model{i}")).collect();
    for (label, fit) in labels.iter().zip(&fits) {
        let r = test_report(fit, label.as_str());
        out.push(vec![
            r.model_label.into(),
            fit.formula.to_string().into(),
            r.p_value.into(),
            r.aic.into(),
            r.bic.into(),
            r.loglik.into(),
            r.df.into(),
            fit.converged.into(),
        ]);
    }
    Ok((out, check_converged(labels.iter().map(String::as_str).zip(&fits))))
}

#[derive(Debug, Clone)]
pub struct EvaluateArgs<'a> {
    pub select: &'a SelectArgs,
    pub all_genres: bool,
    pub min_ratings: usize,
    pub formula: &'a str,
    pub repeats: usize,
    pub train_fraction: f64,
    pub seed: u64,
    pub clip: bool,
    pub per_repeat: bool,
    pub fit: &'a FitArgs,
}

/// Genres with at least `min_ratings` ratings, in name order.
fn genres(ml: &MovieLens, min_ratings: usize) -> Vec<String> {
    ml.genre_rating_counts().into_iter().filter(|&(_, n)| n >= min_ratings && n > 0).map(|(g, _)| g).collect()
}

fn item_label(sel: &Selector) -> String {
    match sel {
        Selector::MovieId(id) => id.to_string(),
        Selector::Title(t) | Selector::Genre(t) => t.clone(),
    }
}

pub fn cmd_evaluate(ml: &MovieLens, a: &EvaluateArgs) -> Result<Table> {
    if a.repeats == 0 {
        return Err(UsageError("eval: --repeats must be at least 1".into()).into());
    }
    let f = formula(a.formula)?;
    let items: Vec<Selector> = if a.all_genres {
        genres(ml, a.min_ratings).into_iter().map(Selector::Genre).collect()
    } else {
        vec![selector(a.select)?]
    };
    let opts = CvOptions {
        repeats: a.repeats,
        train_fraction: a.train_fraction,
        seed: a.seed,
        clip: a.clip.then_some((1.0, 5.0)),
        fit: a.fit.options(),
    };
    // Items run concurrently; collect keeps them in input (genre-name) order.
    let reports = items
        .par_iter()
        .map(|sel| {
            let t = observations(ml, sel)?;
            cross_validate(&f, &t, &opts).tagged().with_context(|| sel.to_string())
        })
        .collect::<Result<Vec<_>>>()?;

    let model = f.to_string();
    if a.per_repeat {
        let mut out =
            Table::new(["model", "item", "repeat", "seed", "n_train", "n_test", "mae", "baseline_mae", "converged"]);
        for (sel, rep) in items.iter().zip(&reports) {
            for r in &rep.repeats {
                out.push(vec![
                    model.as_str().into(),
                    item_label(sel).into(),
                    r.repeat.into(),
                    r.seed.into(),
                    r.n_train.into(),
                    r.n_test.into(),
                    r.mae.into(),
                    r.baseline_mae.into(),
                    r.converged.into(),
                ]);
            }
        }
        Ok(out)
    } else {
        let mut out =
            Table::new(["model", "item", "repeats", "seed", "n_test", "mae", "mae_min", "mae_max", "baseline_mae"]);
        for (sel, rep) in items.iter().zip(&reports) {
            out.push(vec![
                model.as_str().into(),
                item_label(sel).into(),
                rep.repeats.len().into(),
                rep.split_seed.into(),
                rep.n_test.into(),
                rep.mae.into(),
                rep.mae_min.into(),
                rep.mae_max.into(),
                rep.baseline_mae.into(),
            ]);
        }
        Ok(out)
    }
}

fn valid_levels(factor: &str) -> &'static [&'static str] {
    match factor {
        AGE => &AGE_LABELS,
        OCCUPATION => &OCCUPATION_LABELS,
        _ => &GENDER_LABELS,
    }
}

/// Parses `age=25,gender=M` into a cell of canonical level labels.
pub fn parse_group(text: &str) -> Result<GroupCell, UsageError> {
    let mut values = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (factor, level) =
            part.split_once('=').ok_or_else(|| UsageError(format!("group entry `{part}` is not factor=level")))?;
        let factor = factor.trim().to_ascii_lowercase();
        if ![AGE, OCCUPATION, GENDER].contains(&factor.as_str()) {
            return Err(UsageError(format!("unknown factor `{factor}`; valid factors: age, occupation, gender")));
        }
        if values.iter().any(|(f, _): &(String, Option<String>)| *f == factor) {
            return Err(UsageError(format!("factor `{factor}` given twice")));
        }
        let labels = valid_levels(&factor);
        let idx = resolve_level(&factor, level).ok_or_else(|| {
            UsageError(format!("unknown level `{}` for {factor}; valid levels: {}", level.trim(), labels.join(", ")))
        })?;
        values.push((factor, Some(labels[idx].to_string())));
    }
    if values.is_empty() {
        return Err(UsageError("--for needs at least one factor=level pair".into()));
    }
    Ok(GroupCell::new(values))
}

#[derive(Debug, Clone)]
pub struct RecommendArgs<'a> {
    pub select: &'a SelectArgs,
    pub by: Option<&'a str>,
    pub for_group: Option<&'a str>,
    pub top: Option<usize>,
    pub formula: &'a str,
    pub min_ratings: usize,
    pub fit: &'a FitArgs,
}

pub fn cmd_recommend(ml: &MovieLens, a: &RecommendArgs) -> Result<(Table, Result<()>)> {
    if a.top == Some(0) {
        return Err(UsageError("recommend: --top must be at least 1".into()).into());
    }
    let f = formula(a.formula)?;
    match (a.by, a.for_group) {
        (Some(by), None) => {
            let by: Vec<&str> = by.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
            if by.is_empty() {
                return Err(UsageError("--by needs at least one factor".into()).into());
            }
            let t = observations(ml, &selector(a.select)?)?;
            let fit = fit_one(&f, &t, a.fit)?;
            let ranked = rank_groups_for_item(&fit, &by).tagged()?;
            let mut columns = vec!["rank".to_string()];
            columns.extend(by.iter().map(|s| s.to_string()));
            columns.extend(["score".into(), "support".into()]);
            let mut out = Table::new(columns);
            for (i, r) in ranked.iter().take(a.top.unwrap_or(usize::MAX)).enumerate() {
                let mut row: Vec<Value> = vec![(i + 1).into()];
                row.extend(r.cell.values.iter().map(|(_, l)| Value::from(l.clone().unwrap_or_default())));
                row.extend([r.score.into(), r.support.into()]);
                out.push(row);
            }
            let label = f.to_string();
            Ok((out, check_converged([(label.as_str(), &fit)])))
        }
        (None, Some(group)) => {
            let cell = parse_group(group)?;
            let names = genres(ml, a.min_ratings);
            let fits: BTreeMap<String, Fit> = names
                .par_iter()
                .map(|g| {
                    let t = observations(ml, &Selector::Genre(g.clone()))?;
                    Ok((g.clone(), fit_one(&f, &t, a.fit).with_context(|| format!("genre {g}"))?))
                })
                .collect::<Result<_>>()?;
            let ranked = rank_items_for_group(&fits, &cell, a.top.unwrap_or(5)).tagged()?;
            let mut out = Table::new(["rank", "genre", "group", "score"]);
            for (i, (genre, score)) in ranked.into_iter().enumerate() {
                out.push(vec![(i + 1).into(), genre.into(), cell.to_string().into(), score.into()]);
            }
            Ok((out, check_converged(fits.iter().map(|(g, f)| (g.as_str(), f)))))
        }
        _ => Err(UsageError("recommend needs either --by FACTORS (with a selector) or --for GROUP".into()).into()),
    }
}

pub fn cmd_coefficients(
    ml: &MovieLens,
    select: &SelectArgs,
    formula_text: &str,
    factor: &str,
    args: &FitArgs,
) -> Result<(Table, Result<()>)> {
    let t = observations(ml, &selector(select)?)?;
    let fit = fit_one(&formula(formula_text)?, &t, args)?;
    let report = coefficient_report(&fit, factor).tagged()?;
    let mut out = Table::new(["model", "factor", "level", "estimate", "std_error", "aliased"]);
    let model = report.model_label.as_str();
    let push = |out: &mut Table, level: &str, est: Value, se: Value, aliased: bool| {
        out.push(vec![model.into(), report.factor.as_str().into(), level.into(), est, se, aliased.into()]);
    };
    match t.factor(factor) {
        // Level order, aliased levels in place.
        Ok(f) => {
            for level in &f.levels {
                if let Some(r) = report.rows.iter().find(|r| &r.level == level) {
                    push(&mut out, level, r.estimate.into(), r.std_error.into(), false);
                } else if report.aliased.contains(level) {
                    push(&mut out, level, Value::Missing, Value::Missing, true);
                }
            }
        }
        Err(_) => {
            for r in &report.rows {
                push(&mut out, &r.level, r.estimate.into(), r.std_error.into(), false);
            }
        }
    }
    let label = fit.formula.to_string();
    Ok((out, check_converged([(label.as_str(), &fit)])))
}

pub fn cmd_ingest(ml: &MovieLens, select: &SelectArgs) -> Result<Table> {
    match select.selector() {
        Some(sel) => {
            let t = observations(ml, &sel)?;
            let names: Vec<String> = t.factors().iter().map(|f| f.name.clone()).collect();
            let mut out = Table::new(names.iter().cloned().chain(["rating".to_string()]));
            for i in 0..t.n_rows() {
                let mut row: Vec<Value> =
                    (0..names.len()).map(|k| Value::from(t.factors()[k].levels[t.code(i, k)].as_str())).collect();
                row.push(Value::Int(t.response(i).round() as i64));
                out.push(row);
            }
            Ok(out)
        }
        None => {
            let mut out = Table::new(["kind", "name", "count"]);
            out.push(vec!["total".into(), "users".into(), ml.users.len().into()]);
            out.push(vec!["total".into(), "movies".into(), ml.movies.len().into()]);
            out.push(vec!["total".into(), "ratings".into(), ml.ratings.len().into()]);
            for (g, n) in ml.genre_rating_counts() {
                out.push(vec!["genre".into(), g.into(), n.into()]);
            }
            Ok(out)
        }
    }
}
