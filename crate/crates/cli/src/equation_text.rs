//! Human-readable rendering of an extracted equation, with enough structure
//! (full-precision coefficients, a label header) to parse it back exactly.

use anyhow::{anyhow, bail, Result};
use recall_core::equations::EquationForm;
use recall_core::sparsereg::SparseCoefficientMatrix;

fn head_line(form: EquationForm, descriptor_names: &[String]) -> String {
    let d = |j: usize| descriptor_names[j].clone();
    match form {
        EquationForm::Hlr => format!(
            "p(recall) = 2^(-delta_days/h), h = 2^({})",
            d(0)
        ),
        EquationForm::Wickelgren => format!(
            "p(recall) = sigmoid({}) * (1 + softplus({})*delta_days)^(-softplus({}))",
            d(0),
            d(1),
            d(2)
        ),
        EquationForm::ActR => format!(
            "p(recall) = sigmoid({} - softplus({})*ln(1 + delta_days))",
            d(0),
            d(1)
        ),
    }
}

/// Render the preset form with its fitted coefficients. Nonzero terms are
/// sorted by descending |weight|; a descriptor with no surviving terms is
/// substituted as a literal 0 everywhere it appears.
pub fn render_equation(
    form: EquationForm,
    labels: &[String],
    lambda: &SparseCoefficientMatrix,
) -> String {
    assert_eq!(labels.len(), lambda.width, "label count mismatch");
    assert_eq!(lambda.z, form.descriptor_count(), "descriptor count mismatch");
    let mut descriptor_names = Vec::new();
    let mut term_lines = Vec::new();
    for j in 0..lambda.z {
        let mut terms: Vec<(f64, &str)> = (0..lambda.width)
            .filter_map(|r| {
                let v = lambda.values[r * lambda.z + j];
                (v != 0.0).then_some((v, labels[r].as_str()))
            })
            .collect();
        terms.sort_by(|a, b| b.0.abs().total_cmp(&a.0.abs()));
        if terms.is_empty() {
            descriptor_names.push("0".to_string());
            term_lines.push(format!("d{} = 0", j + 1));
        } else {
            descriptor_names.push(format!("d{}", j + 1));
            let rendered: Vec<String> =
                terms.iter().map(|(v, l)| format!("{v:e}*{l}")).collect();
            term_lines.push(format!("d{} = {}", j + 1, rendered.join(" + ")));
        }
    }
    let mut out = String::from("#extracted v1\n");
    out.push_str(&format!("form={}\n", form.name()));
    out.push_str(&format!("#labels={}\n", labels.join(",")));
    out.push_str(&head_line(form, &descriptor_names));
    out.push('\n');
    for line in term_lines {
        out.push_str(&line);
        out.push('\n');
    }
    out
}

/// Re-parse [`render_equation`] output into the form and coefficient matrix.
pub fn parse_equation(text: &str) -> Result<(EquationForm, Vec<String>, SparseCoefficientMatrix)> {
    let mut form: Option<EquationForm> = None;
    let mut labels: Vec<String> = Vec::new();
    let mut rows: Vec<(usize, Vec<(String, f64)>)> = Vec::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("form=") {
            form = Some(rest.parse().map_err(|e| anyhow!("{e}"))?);
        } else if let Some(rest) = line.strip_prefix("#labels=") {
            labels = rest.split(',').map(str::to_string).collect();
        } else if line.starts_with('d') && line.contains('=') {
            let (name, body) = line.split_once('=').unwrap();
            let j: usize = name.trim()[1..]
                .parse()
                .map_err(|e| anyhow!("bad descriptor line '{line}': {e}"))?;
            let body = body.trim();
            let mut terms = Vec::new();
            if body != "0" {
                for term in body.split(" + ") {
                    let (coef, label) = term
                        .split_once('*')
                        .ok_or_else(|| anyhow!("bad term '{term}'"))?;
                    terms.push((label.trim().to_string(), coef.trim().parse::<f64>()?));
                }
            }
            rows.push((j - 1, terms));
        }
    }
    let form = form.ok_or_else(|| anyhow!("missing form line"))?;
    if labels.is_empty() {
        bail!("missing #labels header");
    }
    if rows.len() != form.descriptor_count() {
        bail!(
            "expected {} descriptor lines, found {}",
            form.descriptor_count(),
            rows.len()
        );
    }
    let mut lambda = SparseCoefficientMatrix::zeros(labels.len(), form.descriptor_count());
    for (j, terms) in rows {
        for (label, coef) in terms {
            let r = labels
                .iter()
                .position(|l| *l == label)
                .ok_or_else(|| anyhow!("unknown term label '{label}'"))?;
            lambda.values[r * lambda.z + j] = coef;
        }
    }
    Ok((form, labels, lambda))
}
