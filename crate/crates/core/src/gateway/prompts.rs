//! Prompt templates and their rendering.
//!
//! A template file holds the system message, a line reading `<<<USER>>>`, and
//! the user message. `{name}` is substituted from the render variables and
//! `{{` / `}}` produce literal braces.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LampError, Result};

const USER_MARKER: &str = "<<<USER>>>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self { role, content: content.into() }
    }
}

/// Wording that adapts the shared templates to one classification task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskTemplate {
    pub id: String,
    /// What the input is, with article-free wording ("movie review").
    pub subject: String,
    /// Short noun used in running text ("review").
    pub noun: String,
    /// Input label shown to the model ("Review").
    pub label: String,
    /// Class whose probability is requested.
    pub positive: String,
    pub negative: String,
    /// Property being judged ("sentiment").
    pub attribute: String,
}

impl TaskTemplate {
    pub fn sentiment() -> Self {
        Self::from_parts("sentiment", "movie review", "review", "Review", "positive", "negative", "sentiment")
    }

    pub fn harmfulness() -> Self {
        Self::from_parts("harmfulness", "prompt", "prompt", "Prompt", "harmful", "harmless", "harmfulness")
    }

    pub fn hatefulness() -> Self {
        Self::from_parts("hatefulness", "text", "text", "Text", "hateful", "not hateful", "hatefulness")
    }

    fn from_parts(id: &str, subject: &str, noun: &str, label: &str, pos: &str, neg: &str, attr: &str) -> Self {
        Self {
            id: id.into(),
            subject: subject.into(),
            noun: noun.into(),
            label: label.into(),
            positive: pos.into(),
            negative: neg.into(),
            attribute: attr.into(),
        }
    }

    pub fn builtin(id: &str) -> Option<Self> {
        match id {
            "sentiment" => Some(Self::sentiment()),
            "harmfulness" => Some(Self::harmfulness()),
            "hatefulness" => Some(Self::hatefulness()),
            _ => None,
        }
    }

    /// Resolves a built-in id, or reads a custom task from a JSON file path.
    pub fn resolve(id_or_path: &str) -> Result<Self> {
        if let Some(t) = Self::builtin(id_or_path) {
            return Ok(t);
        }
        let path = Path::new(id_or_path);
        if path.extension().is_some_and(|e| e == "json") {
            let task: TaskTemplate = serde_json::from_str(&std::fs::read_to_string(path)?)?;
            task.validate()?;
            return Ok(task);
        }
        Err(LampError::param(format!(
            "unknown task `{id_or_path}` (expected sentiment, harmfulness, hatefulness or a .json file)"
        )))
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("id", &self.id),
            ("subject", &self.subject),
            ("noun", &self.noun),
            ("label", &self.label),
            ("positive", &self.positive),
            ("negative", &self.negative),
            ("attribute", &self.attribute),
        ] {
            if v.trim().is_empty() {
                return Err(LampError::param(format!("task field `{name}` is empty")));
            }
        }
        Ok(())
    }

    fn vars(&self) -> HashMap<&'static str, String> {
        HashMap::from([
            ("subject", self.subject.clone()),
            ("noun", self.noun.clone()),
            ("label", self.label.clone()),
            ("positive", self.positive.clone()),
            ("negative", self.negative.clone()),
            ("attribute", self.attribute.clone()),
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub name: String,
    system: String,
    user: String,
}

impl Template {
    pub fn parse(name: &str, source: &str) -> Result<Self> {
        let (system, user) = source
            .split_once(USER_MARKER)
            .ok_or_else(|| LampError::param(format!("template `{name}` lacks a `{USER_MARKER}` line")))?;
        Ok(Self { name: name.to_string(), system: system.trim_end().to_string(), user: user.trim().to_string() })
    }

    pub fn render(&self, vars: &HashMap<&str, String>) -> Result<Vec<ChatMessage>> {
        Ok(vec![
            ChatMessage::new(Role::System, render(&self.name, &self.system, vars)?),
            ChatMessage::new(Role::User, render(&self.name, &self.user, vars)?),
        ])
    }
}

/// Single-pass placeholder substitution; substituted values are never rescanned.
pub fn render(name: &str, source: &str, vars: &HashMap<&str, String>) -> Result<String> {
    let mut out = String::with_capacity(source.len() + 256);
    let mut rest = source;
    while let Some(pos) = rest.find(['{', '}']) {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if let Some(after) = tail.strip_prefix("{{") {
            out.push('{');
            rest = after;
        } else if let Some(after) = tail.strip_prefix("}}") {
            out.push('}');
            rest = after;
        } else if tail.starts_with('}') {
            return Err(LampError::param(format!("template `{name}`: unmatched `}}`")));
        } else {
            let end = tail
                .find('}')
                .ok_or_else(|| LampError::param(format!("template `{name}`: unterminated placeholder")))?;
            let key = &tail[1..end];
            let value = vars
                .get(key)
                .ok_or_else(|| LampError::param(format!("template `{name}`: unknown placeholder `{{{key}}}`")))?;
            out.push_str(value);
            rest = &tail[end + 1..];
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// The four templates used by the gateway.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub explain: Template,
    pub aggregate: Template,
    pub relabel: Template,
    pub rewrite: Template,
}

impl Default for PromptSet {
    fn default() -> Self {
        let t = |name, src| Template::parse(name, src).expect("bundled template is well formed");
        Self {
            explain: t("explain", include_str!("../../templates/explain.txt")),
            aggregate: t("aggregate", include_str!("../../templates/aggregate.txt")),
            relabel: t("relabel", include_str!("../../templates/relabel.txt")),
            rewrite: t("rewrite", include_str!("../../templates/rewrite.txt")),
        }
    }
}

impl PromptSet {
    /// Loads `explain.txt`, `aggregate.txt`, `relabel.txt` and `rewrite.txt`
    /// from `dir`, falling back to the bundled copy for any missing file.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut set = Self::default();
        for (name, slot) in [
            ("explain", &mut set.explain),
            ("aggregate", &mut set.aggregate),
            ("relabel", &mut set.relabel),
            ("rewrite", &mut set.rewrite),
        ] {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                *slot = Template::parse(name, &std::fs::read_to_string(&path)?)?;
            }
        }
        Ok(set)
    }

    pub fn explain(
        &self,
        task: &TaskTemplate,
        text: &str,
        fixed_factors: Option<&[String]>,
        n_factors: usize,
    ) -> Result<Vec<ChatMessage>> {
        let mut vars = task.vars();
        vars.insert("input", text.to_string());
        let (instruction, schema) = match fixed_factors {
            Some(fixed) => {
                let listed: String = fixed.iter().map(|f| format!("\n- {f}")).collect();
                let schema = fixed
                    .iter()
                    .enumerate()
                    .map(|(i, f)| {
                        let name = serde_json::to_string(f).expect("string serialises");
                        format!("    {{\"factor\": {name}, \"importance\": <importance{}>}}", i + 1)
                    })
                    .collect::<Vec<_>>()
                    .join(",\n");
                (
                    format!("\nUse exactly the following factors, in this order, and give each one an importance weight:{listed}"),
                    schema,
                )
            }
            None => (
                String::new(),
                (1..=n_factors)
                    .map(|i| format!("    {{\"factor\": <factor{i}>, \"importance\": <importance{i}>}}"))
                    .collect::<Vec<_>>()
                    .join(",\n"),
            ),
        };
        vars.insert("factor_instruction", instruction);
        vars.insert("factor_schema", schema);
        self.explain.render(&vars)
    }

    pub fn aggregate(
        &self,
        task: &TaskTemplate,
        text: &str,
        pool: &[String],
        n_target: usize,
    ) -> Result<Vec<ChatMessage>> {
        let mut vars = task.vars();
        vars.insert("input", text.to_string());
        vars.insert("n_target", n_target.to_string());
        vars.insert(
            "factor_list",
            pool.iter().enumerate().map(|(i, f)| format!("Factor {}: {f}", i + 1)).collect::<Vec<_>>().join("\n"),
        );
        vars.insert("factor_placeholders", (1..=n_target).map(|i| format!("factor{i}")).collect::<Vec<_>>().join(", "));
        self.aggregate.render(&vars)
    }

    pub fn relabel(
        &self,
        task: &TaskTemplate,
        text: &str,
        factors: &[String],
        weights: &[f64],
    ) -> Result<Vec<ChatMessage>> {
        if factors.len() != weights.len() {
            return Err(LampError::param(format!("{} factors but {} weights", factors.len(), weights.len())));
        }
        let mut vars = task.vars();
        vars.insert("input", text.to_string());
        vars.insert(
            "factor_weights",
            factors
                .iter()
                .zip(weights)
                .map(|(f, w)| format!("factor: {f}, importance: {w:.4}"))
                .collect::<Vec<_>>()
                .join("\n"),
        );
        self.relabel.render(&vars)
    }

    pub fn rewrite(
        &self,
        task: &TaskTemplate,
        text: &str,
        factors: &[String],
        deltas: &[f64],
    ) -> Result<Vec<ChatMessage>> {
        if factors.len() != deltas.len() {
            return Err(LampError::param(format!("{} factors but {} deltas", factors.len(), deltas.len())));
        }
        if deltas.iter().any(|d| !d.is_finite()) {
            return Err(LampError::param("rewrite deltas must be finite"));
        }
        if deltas.iter().all(|&d| d == 0.0) {
            return Err(LampError::param("at least one rewrite delta must be nonzero"));
        }
        let section = |keep: fn(f64) -> bool| {
            let lines: Vec<String> =
                factors.iter().zip(deltas).filter(|(_, &d)| keep(d)).map(|(f, d)| format!("{f}: {d:.4}")).collect();
            if lines.is_empty() {
                "(none)".to_string()
            } else {
                lines.join("\n")
            }
        };
        let mut vars = task.vars();
        vars.insert("input", text.to_string());
        vars.insert("increase", section(|d| d > 0.0));
        vars.insert("decrease", section(|d| d < 0.0));
        self.rewrite.render(&vars)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars(pairs: &[(&'static str, &str)]) -> HashMap<&'static str, String> {
        pairs.iter().map(|(k, v)| (*k, v.to_string())).collect()
    }

    #[test]
    fn render_substitutes_and_escapes() {
        let out = render("t", "{{{label}: {{input}}}} = {x}", &vars(&[("label", "Review"), ("x", "1")])).unwrap();
        assert_eq!(out, "{Review: {input}} = 1");
    }

    #[test]
    fn render_does_not_rescan_values() {
        let out = render("t", "{a}", &vars(&[("a", "{b}"), ("b", "no")])).unwrap();
        assert_eq!(out, "{b}");
    }

    #[test]
    fn render_errors() {
        assert!(render("t", "{missing}", &HashMap::new()).is_err());
        assert!(render("t", "{open", &HashMap::new()).is_err());
        assert!(render("t", "close}", &HashMap::new()).is_err());
    }

    #[test]
    fn bundled_templates_render_for_every_task() {
        let set = PromptSet::default();
        let pool = vec!["acting".to_string(), "plot".to_string()];
        for task in [TaskTemplate::sentiment(), TaskTemplate::harmfulness(), TaskTemplate::hatefulness()] {
            set.explain(&task, "x", None, 5).unwrap();
            set.explain(&task, "x", Some(&pool), 5).unwrap();
            set.aggregate(&task, "x", &pool, 5).unwrap();
            set.relabel(&task, "x", &pool, &[0.1, 0.2]).unwrap();
            set.rewrite(&task, "x", &pool, &[0.1, -0.2]).unwrap();
        }
    }

    #[test]
    fn explain_prompt_shape() {
        let m = PromptSet::default().explain(&TaskTemplate::sentiment(), "A fine film.", None, 5).unwrap();
        assert_eq!(m.len(), 2);
        assert!(m[0].content.starts_with("You are a helpful assistant."));
        assert!(m[0].content.contains("probability of the review being positive"));
        assert!(m[0].content.contains("{Review: {input}}"));
        assert!(m[0].content.contains("<importance5>"));
        assert_eq!(m[1].content, "Review: A fine film.");
    }

    #[test]
    fn fixed_factor_prompt_lists_factors() {
        let f = vec!["acting praise".to_string(), "weak \"plot\"".to_string()];
        let m = PromptSet::default().explain(&TaskTemplate::sentiment(), "t", Some(&f), 5).unwrap();
        assert!(m[0].content.contains("\n- acting praise"));
        assert!(m[0].content.contains(r#""factor": "weak \"plot\"""#));
    }

    #[test]
    fn relabel_weights_have_four_decimals() {
        let f = vec!["a".to_string(), "b".to_string()];
        let m = PromptSet::default().relabel(&TaskTemplate::sentiment(), "t", &f, &[0.123456, 1.0]).unwrap();
        assert!(m[1].content.contains("factor: a, importance: 0.1235\nfactor: b, importance: 1.0000"));
        assert!(PromptSet::default().relabel(&TaskTemplate::sentiment(), "t", &f, &[0.1]).is_err());
    }

    #[test]
    fn rewrite_sections_split_by_sign() {
        let f = vec!["harmful".to_string(), "don't care".to_string()];
        let m = PromptSet::default()
            .rewrite(&TaskTemplate::harmfulness(), "t", &f, &[0.08206341749913071, -0.0701182933880991])
            .unwrap();
        let s = &m[0].content;
        let inc = s.find("Increase emphasis").unwrap();
        let dec = s.find("Decrease emphasis").unwrap();
        let h = s.find("harmful: 0.0821").unwrap();
        let d = s.find("don't care: -0.0701").unwrap();
        assert!(inc < h && h < dec && dec < d);
        assert!(s.contains("preserve the original vocabularies, structures, and meanings"));
        assert!(s.contains("\"rewritten_prompt\""));
    }

    #[test]
    fn rewrite_requires_a_nonzero_delta() {
        let f = vec!["a".to_string()];
        assert!(PromptSet::default().rewrite(&TaskTemplate::sentiment(), "t", &f, &[0.0]).is_err());
    }

    #[test]
    fn template_needs_user_marker() {
        assert!(Template::parse("x", "system only").is_err());
    }

    #[test]
    fn custom_task_from_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toxicity.json");
        let task = TaskTemplate {
            id: "toxicity".into(),
            subject: "comment".into(),
            noun: "comment".into(),
            label: "Comment".into(),
            positive: "toxic".into(),
            negative: "benign".into(),
            attribute: "toxicity".into(),
        };
        std::fs::write(&path, serde_json::to_string(&task).unwrap()).unwrap();
        assert_eq!(TaskTemplate::resolve(path.to_str().unwrap()).unwrap(), task);
        assert!(TaskTemplate::resolve("nope").is_err());
    }
}
