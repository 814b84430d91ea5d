//! Network architecture descriptions.
//!
//! One declaration per line:
//!
//! ```text
//! input type=class name=class_input
//! layer type=projection name=projection_layer input=class_input size=500
//! layer type=lstm name=hidden_layer_1 input=projection_layer size=1500
//! layer type=softmax name=output_layer input=hidden_layer_1
//! ```
//!
//! Attributes after the leading keyword may come in any order. A layer
//! with several inputs lists them comma-separated (`input=a,b`) and sees
//! their concatenation. Blank lines and lines starting with `#` are
//! ignored.

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    ClassInput,
    WordInput,
    Projection,
    Lstm,
    Gru,
    Tanh,
    Dropout,
    Softmax,
}

impl LayerKind {
    pub fn is_input(self) -> bool {
        matches!(self, LayerKind::ClassInput | LayerKind::WordInput)
    }

    pub fn is_recurrent(self) -> bool {
        matches!(self, LayerKind::Lstm | LayerKind::Gru)
    }

    fn requires_size(self) -> bool {
        matches!(
            self,
            LayerKind::Projection | LayerKind::Lstm | LayerKind::Gru | LayerKind::Tanh
        )
    }

    /// The `type=` value used in description files.
    pub fn type_name(self) -> &'static str {
        match self {
            LayerKind::ClassInput => "class",
            LayerKind::WordInput => "word",
            LayerKind::Projection => "projection",
            LayerKind::Lstm => "lstm",
            LayerKind::Gru => "gru",
            LayerKind::Tanh => "tanh",
            LayerKind::Dropout => "dropout",
            LayerKind::Softmax => "softmax",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LayerKind::ClassInput => "class_input",
            LayerKind::WordInput => "word_input",
            other => other.type_name(),
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub name: String,
    pub inputs: Vec<String>,
    pub size: Option<usize>,
    pub dropout_rate: Option<f64>,
    /// 1-based source line.
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkDescription {
    pub layers: Vec<LayerSpec>,
    /// `(producer, consumer)` indices into `layers`, for references that
    /// resolve to an earlier declaration.
    pub edges: Vec<(usize, usize)>,
}

/// One broken validity rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub file: Option<PathBuf>,
    pub line: usize,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.file {
            Some(path) => write!(f, "{}:{}: {}", path.display(), self.line, self.message),
            None => write!(f, "line {}: {}", self.line, self.message),
        }
    }
}

fn parse_positive(line: usize, key: &str, value: &str) -> Result<usize> {
    match value.parse::<usize>() {
        Ok(n) if n > 0 => Ok(n),
        _ => Err(Error::parse(
            line,
            format!("{key} must be a positive integer, got '{value}'"),
        )),
    }
}

/// Parses a description. Reference and topology rules are left to
/// [`validate_description`].
pub fn parse_description(text: &str) -> Result<NetworkDescription> {
    let mut layers: Vec<LayerSpec> = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.trim();
        if content.is_empty() || content.starts_with('#') {
            continue;
        }
        let mut tokens = content.split_whitespace();
        let keyword = tokens.next().expect("non-empty line");
        let is_input = match keyword {
            "input" => true,
            "layer" => false,
            other => {
                return Err(Error::parse(
                    line,
                    format!("unknown keyword '{other}' (expected 'input' or 'layer')"),
                ))
            }
        };

        let mut attrs: Vec<(&str, &str)> = Vec::new();
        for token in tokens {
            let Some((key, value)) = token.split_once('=') else {
                return Err(Error::parse(
                    line,
                    format!("malformed attribute '{token}' (expected key=value)"),
                ));
            };
            if key.is_empty() || value.is_empty() {
                return Err(Error::parse(
                    line,
                    format!("malformed attribute '{token}' (expected key=value)"),
                ));
            }
            if attrs.iter().any(|(k, _)| *k == key) {
                return Err(Error::parse(line, format!("attribute '{key}' given twice")));
            }
            attrs.push((key, value));
        }
        let get = |key: &str| attrs.iter().find(|(k, _)| *k == key).map(|(_, v)| *v);

        let type_name = get("type").ok_or_else(|| Error::parse(line, "missing required attribute 'type'"))?;
        let kind = match (is_input, type_name) {
            (true, "class") => LayerKind::ClassInput,
            (true, "word") => LayerKind::WordInput,
            (false, "projection") => LayerKind::Projection,
            (false, "lstm") => LayerKind::Lstm,
            (false, "gru") => LayerKind::Gru,
            (false, "tanh") => LayerKind::Tanh,
            (false, "dropout") => LayerKind::Dropout,
            (false, "softmax") => LayerKind::Softmax,
            (true, other) => {
                return Err(Error::parse(
                    line,
                    format!("unknown input type '{other}' (expected class or word)"),
                ))
            }
            (false, other) => return Err(Error::parse(line, format!("unknown layer type '{other}'"))),
        };

        let allowed: &[&str] = if is_input {
            &["type", "name"]
        } else {
            match kind {
                LayerKind::Dropout => &["type", "name", "input", "size", "dropout_rate"],
                _ => &["type", "name", "input", "size"],
            }
        };
        for (key, _) in &attrs {
            if !allowed.contains(key) {
                let why = if *key == "dropout_rate" {
                    format!("attribute 'dropout_rate' is only valid for dropout layers, not {kind}")
                } else {
                    format!("unknown attribute '{key}' for {kind}")
                };
                return Err(Error::parse(line, why));
            }
        }

        let name = get("name").ok_or_else(|| Error::parse(line, "missing required attribute 'name'"))?;
        if let Some(first) = seen.get(name) {
            return Err(Error::parse(
                line,
                format!("duplicate name '{name}' (first declared on line {first})"),
            ));
        }

        let inputs: Vec<String> = if is_input {
            Vec::new()
        } else {
            let value = get("input").ok_or_else(|| Error::parse(line, "missing required attribute 'input'"))?;
            let names: Vec<String> = value.split(',').map(str::to_string).collect();
            if names.iter().any(String::is_empty) {
                return Err(Error::parse(line, format!("malformed input list '{value}'")));
            }
            names
        };

        let size = match get("size") {
            Some(v) => Some(parse_positive(line, "size", v)?),
            None if kind.requires_size() => {
                return Err(Error::parse(
                    line,
                    format!("missing required attribute 'size' for {kind}"),
                ))
            }
            None => None,
        };

        let dropout_rate = match (kind, get("dropout_rate")) {
            (LayerKind::Dropout, Some(v)) => match v.parse::<f64>() {
                Ok(r) if (0.0..1.0).contains(&r) => Some(r),
                _ => {
                    return Err(Error::parse(
                        line,
                        format!("dropout_rate must be a real in [0, 1), got '{v}'"),
                    ))
                }
            },
            (LayerKind::Dropout, None) => {
                return Err(Error::parse(
                    line,
                    "missing required attribute 'dropout_rate' for dropout",
                ))
            }
            _ => None,
        };

        seen.insert(name.to_string(), line);
        layers.push(LayerSpec {
            kind,
            name: name.to_string(),
            inputs,
            size,
            dropout_rate,
            line,
        });
    }

    if layers.is_empty() {
        return Err(Error::parse(1, "no layers declared"));
    }

    let mut edges = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for (consumer, spec) in layers.iter().enumerate() {
        for input in &spec.inputs {
            if let Some(&producer) = index.get(input.as_str()) {
                edges.push((producer, consumer));
            }
        }
        index.insert(spec.name.as_str(), consumer);
    }
    Ok(NetworkDescription { layers, edges })
}

/// Every validity-rule violation in `desc`; empty means valid.
pub fn validate_description(desc: &NetworkDescription) -> Vec<Violation> {
    let mut violations = Vec::new();
    let mut push = |line: usize, message: String| {
        violations.push(Violation {
            file: None,
            line,
            message,
        })
    };
    let position: HashMap<&str, usize> = desc
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| (l.name.as_str(), i))
        .collect();

    for (i, spec) in desc.layers.iter().enumerate() {
        for input in &spec.inputs {
            match position.get(input.as_str()) {
                None => push(spec.line, format!("reference to undeclared name '{input}'")),
                Some(&j) if j >= i => push(
                    spec.line,
                    format!(
                        "reference to undeclared name '{input}' (declared later on line {}; layers must be listed in construction order)",
                        desc.layers[j].line
                    ),
                ),
                Some(_) => {}
            }
        }
    }

    let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); desc.layers.len()];
    for &(p, c) in &desc.edges {
        consumers[p].push(c);
    }

    for (i, spec) in desc.layers.iter().enumerate() {
        if spec.kind.is_input() {
            for &c in &consumers[i] {
                if desc.layers[c].kind != LayerKind::Projection {
                    push(
                        desc.layers[c].line,
                        format!(
                            "input '{}' must be followed by a projection layer, but feeds {} layer '{}'",
                            spec.name, desc.layers[c].kind, desc.layers[c].name
                        ),
                    );
                }
            }
        }
        if spec.kind == LayerKind::Projection {
            let ok = spec.inputs.len() == 1
                && position
                    .get(spec.inputs[0].as_str())
                    .map(|&j| desc.layers[j].kind.is_input())
                    .unwrap_or(true);
            if !ok {
                push(
                    spec.line,
                    format!("projection layer '{}' must take exactly one input layer", spec.name),
                );
            }
        }
        if spec.kind == LayerKind::Softmax && i + 1 != desc.layers.len() {
            push(
                spec.line,
                format!("softmax layer '{}' must be the final layer", spec.name),
            );
        }
    }

    if let Some(last) = desc.layers.last() {
        if last.kind != LayerKind::Softmax {
            push(
                last.line,
                format!("final layer must be softmax, found {} layer '{}'", last.kind, last.name),
            );
        }
        // Reverse reachability from the final layer.
        let n = desc.layers.len();
        let mut reaches = vec![false; n];
        reaches[n - 1] = true;
        for c in (0..n).rev() {
            if !reaches[c] {
                continue;
            }
            for &(p, consumer) in &desc.edges {
                if consumer == c {
                    reaches[p] = true;
                }
            }
        }
        for (i, spec) in desc.layers.iter().enumerate() {
            if !reaches[i] {
                push(
                    spec.line,
                    format!("layer '{}' has no path to the output layer", spec.name),
                );
            }
        }
    }

    if !desc.layers.iter().any(|l| l.kind.is_input()) {
        push(
            desc.layers.first().map_or(1, |l| l.line),
            "no input layer declared".to_string(),
        );
    }

    violations.sort_by_key(|v| v.line);
    violations
}

/// Parse and validate in one step.
pub fn parse_and_validate(text: &str) -> Result<NetworkDescription> {
    let desc = parse_description(text)?;
    let violations = validate_description(&desc);
    if violations.is_empty() {
        Ok(desc)
    } else {
        Err(Error::InvalidDescription(violations))
    }
}

/// Canonical text form: one declaration per line, attributes in the order
/// `type name input size dropout_rate`.
pub fn serialize_description(desc: &NetworkDescription) -> String {
    let mut out = String::new();
    for spec in &desc.layers {
        if spec.kind.is_input() {
            out.push_str(&format!("input type={} name={}", spec.kind.type_name(), spec.name));
        } else {
            out.push_str(&format!(
                "layer type={} name={} input={}",
                spec.kind.type_name(),
                spec.name,
                spec.inputs.join(",")
            ));
            if let Some(size) = spec.size {
                out.push_str(&format!(" size={size}"));
            }
            if let Some(rate) = spec.dropout_rate {
                out.push_str(&format!(" dropout_rate={rate}"));
            }
        }
        out.push('\n');
    }
    out
}

impl NetworkDescription {
    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn output_layer(&self) -> &LayerSpec {
        self.layers.last().expect("descriptions are non-empty")
    }

    pub fn input_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| l.kind.is_input())
    }

    pub fn uses_class_input(&self) -> bool {
        self.layers.iter().any(|l| l.kind == LayerKind::ClassInput)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_description() {
        let desc = parse_and_validate(
            "input type=word name=w\nlayer type=projection name=p input=w size=4\nlayer type=softmax name=out input=p\n",
        )
        .unwrap();
        assert_eq!(desc.layers.len(), 3);
        assert_eq!(desc.edges, vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn attributes_in_any_order() {
        let a = parse_description("layer size=4 input=a,b type=lstm name=h").unwrap();
        assert_eq!(a.layers[0].inputs, vec!["a".to_string(), "b".to_string()]);
        assert_eq!(a.layers[0].kind, LayerKind::Lstm);
        assert_eq!(a.layers[0].size, Some(4));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let cases = [
            (
                "input type=class name=a\nlyr type=tanh name=b input=a size=2",
                2,
                "unknown keyword",
            ),
            (
                "input type=class name=a\nlayer type=conv name=b input=a",
                2,
                "unknown layer type",
            ),
            ("input type=class name=a\ninput type=word name=a", 2, "duplicate name"),
            (
                "input type=class name=a\n\nlayer type=tanh name=b input=a size",
                3,
                "malformed attribute",
            ),
            (
                "input type=class name=a\nlayer type=tanh name=b input=a",
                2,
                "missing required attribute 'size'",
            ),
            (
                "input type=class name=a\nlayer type=dropout name=b input=a",
                2,
                "dropout_rate",
            ),
            (
                "input type=class name=a\nlayer type=tanh name=b input=a size=2 dropout_rate=0.1",
                2,
                "only valid for dropout",
            ),
            (
                "input type=class name=a\nlayer type=tanh name=b input=a size=2 colour=red",
                2,
                "unknown attribute",
            ),
            (
                "input type=class name=a\nlayer type=dropout name=b input=a dropout_rate=1.0",
                2,
                "[0, 1)",
            ),
            (
                "input type=class name=a\nlayer type=tanh name=b input=a size=0",
                2,
                "positive integer",
            ),
        ];
        for (text, line, needle) in cases {
            match parse_description(text) {
                Err(Error::Parse { location, message }) => {
                    assert_eq!(location.line, line, "{text}: {message}");
                    assert!(message.contains(needle), "{text}: {message}");
                }
                other => panic!("{text}: expected parse error, got {other:?}"),
            }
        }
    }

    #[test]
    fn empty_text_is_rejected() {
        let err = parse_description("").unwrap_err();
        assert!(err.to_string().contains("no layers declared"));
        assert!(parse_description("# only a comment\n\n").is_err());
    }

    #[test]
    fn self_reference_is_undeclared() {
        let desc = parse_description(
            "input type=class name=c\nlayer type=projection name=p input=c size=2\nlayer type=tanh name=t input=t size=2\nlayer type=softmax name=s input=p",
        )
        .unwrap();
        let v = validate_description(&desc);
        assert!(
            v.iter()
                .any(|v| v.line == 3 && v.message.contains("undeclared name 't'")),
            "{v:?}"
        );
    }

    #[test]
    fn final_layer_must_be_softmax() {
        let desc = parse_description(
            "input type=class name=c\nlayer type=projection name=p input=c size=2\nlayer type=tanh name=t input=p size=2",
        )
        .unwrap();
        let v = validate_description(&desc);
        assert!(
            v.iter()
                .any(|v| v.line == 3 && v.message.contains("final layer must be softmax")),
            "{v:?}"
        );
    }

    #[test]
    fn dangling_layer_is_reported() {
        let desc = parse_description(
            "input type=class name=c\nlayer type=projection name=p input=c size=2\nlayer type=tanh name=side input=p size=2\nlayer type=softmax name=s input=p",
        )
        .unwrap();
        let v = validate_description(&desc);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].line, 3);
        assert!(v[0].message.contains("no path to the output"));
    }

    #[test]
    fn serialize_is_canonical() {
        let text = "input type=class name=c\nlayer type=projection name=p input=c size=3\nlayer type=dropout name=d input=p dropout_rate=0.5\nlayer type=softmax name=s input=d\n";
        let desc = parse_description(text).unwrap();
        assert_eq!(serialize_description(&desc), text);
    }
}
