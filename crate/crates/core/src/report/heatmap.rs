use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum HeatmapError {
    #[error("{tokens} tokens but {weights} attention weights")]
    LengthMismatch { tokens: usize, weights: usize },
}

/// Background for saturation `s` in `[0, 1]`: white at 0, a saturated blue
/// at 1.
fn color(s: f64) -> String {
    let channel = |v: f64| (v * 255.0).round() as u8;
    format!("rgb({},{},255)", channel(1.0 - s), channel(1.0 - 0.3667 * s))
}

fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

/// One inline-styled span per token with background saturation `α_t`
/// (clamped to `[0, 1]`). With `rescale`, weights are divided by their
/// maximum first so the peak token is fully saturated.
pub fn render_heatmap(tokens: &[String], alpha: &[f64], caption: Option<&str>, rescale: bool) -> Result<String, HeatmapError> {
    if tokens.len() != alpha.len() {
        return Err(HeatmapError::LengthMismatch {
            tokens: tokens.len(),
            weights: alpha.len(),
        });
    }
    let peak = alpha.iter().copied().fold(0.0, f64::max);
    let mut out = String::from("<div class=\"heatmap\">");
    for (tok, &a) in tokens.iter().zip(alpha) {
        let a = if rescale && peak > 0.0 { a / peak } else { a };
        let s = if a.is_nan() { 0.0 } else { a.clamp(0.0, 1.0) };
        let _ = write!(
            out,
            "<span class=\"tok\" data-saturation=\"{s:.6}\" style=\"background-color:{};padding:1px 2px\">{}</span> ",
            color(s),
            escape(tok)
        );
    }
    if let Some(c) = caption {
        let _ = write!(out, "<div class=\"caption\">{}</div>", escape(c));
    }
    out.push_str("</div>");
    Ok(out)
}

/// Original and adversarial attention over the same tokens, side by side.
pub fn render_heatmap_pair(
    tokens: &[String],
    original: &[f64],
    adversarial: &[f64],
    delta_y: f64,
    rescale: bool,
) -> Result<String, HeatmapError> {
    let left = render_heatmap(tokens, original, None, rescale)?;
    let right = render_heatmap(tokens, adversarial, Some(&format!("Δŷ: {delta_y:.3}")), rescale)?;
    Ok(format!(
        "<table class=\"heatmap-pair\"><tr><th>Original</th><th>Adversarial</th></tr>\
         <tr><td style=\"vertical-align:top;padding:4px\">{left}</td>\
         <td style=\"vertical-align:top;padding:4px\">{right}</td></tr></table>"
    ))
}

/// Wraps fragments into a self-contained page.
pub fn heatmap_document(title: &str, fragments: &[String]) -> String {
    let mut out = format!(
        "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>{0}</title>\n</head>\n<body style=\"font-family:monospace\">\n<h3>{0}</h3>\n",
        escape(title)
    );
    for f in fragments {
        out.push_str(f);
        out.push('\n');
    }
    out.push_str("</body>\n</html>\n");
    out
}
