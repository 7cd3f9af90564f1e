//! Line-oriented model description.
//!
//! ```text
//! input C H W
//! conv IN OUT K STRIDE PAD
//! relu | maxpool K | avgpool K | flatten | linear IN OUT
//! block-begin / block-end      # residual-block grouping for the rank schedule
//! ```
//!
//! `#` starts a comment. Parsing validates the shape chain and reports the
//! first offending token with its line and column.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{pool_output_hw, ConvGeometry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerKind {
    Conv(ConvGeometry),
    Relu,
    MaxPool { k: usize },
    AvgPool { k: usize },
    Flatten,
    Linear { inputs: usize, outputs: usize },
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv(_) => "conv",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::AvgPool { .. } => "avgpool",
            LayerKind::Flatten => "flatten",
            LayerKind::Linear { .. } => "linear",
        }
    }

    pub fn is_elementwise(&self) -> bool {
        matches!(
            self,
            LayerKind::Relu | LayerKind::MaxPool { .. } | LayerKind::AvgPool { .. }
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Residual block this layer belongs to, numbered from zero in order of
    /// appearance.
    pub block: Option<usize>,
}

/// Activation shape between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActShape {
    Spatial([usize; 3]),
    Flat(usize),
}

impl ActShape {
    pub fn len(&self) -> usize {
        match *self {
            ActShape::Spatial([c, h, w]) => c * h * w,
            ActShape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            ActShape::Spatial(s) => s.to_vec(),
            ActShape::Flat(n) => vec![n],
        }
    }
}

impl fmt::Display for ActShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActShape::Spatial([c, h, w]) => write!(f, "{c}x{h}x{w}"),
            ActShape::Flat(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    input: [usize; 3],
    layers: Vec<LayerSpec>,
    shapes: Vec<ActShape>,
}

/// Applies one layer to a shape; the error message is what the parser
/// reports for an inconsistent chain.
fn next_shape(kind: &LayerKind, shape: ActShape) -> std::result::Result<ActShape, String> {
    match (kind, shape) {
        (LayerKind::Conv(g), ActShape::Spatial([c, h, w])) => {
            if g.in_channels != c {
                return Err(format!("expects {c} in-channels, got {}", g.in_channels));
            }
            let (oh, ow) = g.output_hw(h, w).map_err(|e| e.to_string())?;
            Ok(ActShape::Spatial([g.out_channels, oh, ow]))
        }
        (LayerKind::Relu, s) => Ok(s),
        (LayerKind::MaxPool { k } | LayerKind::AvgPool { k }, ActShape::Spatial([c, h, w])) => {
            let (oh, ow) = pool_output_hw(h, w, *k).map_err(|e| e.to_string())?;
            Ok(ActShape::Spatial([c, oh, ow]))
        }
        (LayerKind::Flatten, s) => Ok(ActShape::Flat(s.len())),
        (LayerKind::Linear { inputs, outputs }, ActShape::Flat(n)) => {
            if *inputs != n {
                return Err(format!("expects {n} input features, got {inputs}"));
            }
            Ok(ActShape::Flat(*outputs))
        }
        (LayerKind::Linear { .. }, ActShape::Spatial(_)) => {
            Err("linear needs a flattened input; add `flatten` first".into())
        }
        (k, ActShape::Flat(_)) => Err(format!(
            "{} needs a spatial input, got a flat vector",
            k.name()
        )),
    }
}

impl ModelSpec {
    pub fn new(input: [usize; 3], layers: Vec<LayerSpec>) -> Result<Self> {
        if input.contains(&0) {
            return Err(Error::invalid("input extents must be positive"));
        }
        let mut shapes = vec![ActShape::Spatial(input)];
        for (i, l) in layers.iter().enumerate() {
            let s = next_shape(&l.kind, *shapes.last().unwrap())
                .map_err(|m| Error::invalid(format!("layer {i} ({}): {m}", l.kind.name())))?;
            shapes.push(s);
        }
        Ok(ModelSpec {
            input,
            layers,
            shapes,
        })
    }

    pub fn input(&self) -> [usize; 3] {
        self.input
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Shape entering layer `i`.
    pub fn input_shape(&self, i: usize) -> ActShape {
        self.shapes[i]
    }

    /// Shape leaving layer `i`.
    pub fn output_shape(&self, i: usize) -> ActShape {
        self.shapes[i + 1]
    }

    pub fn final_shape(&self) -> ActShape {
        *self.shapes.last().unwrap()
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = (usize, &ConvGeometry)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match &l.kind {
                LayerKind::Conv(g) => Some((i, g)),
                _ => None,
            })
    }

    pub fn has_blocks(&self) -> bool {
        self.layers.iter().any(|l| l.block.is_some())
    }

    /// Canonical text form; parses back to an identical spec.
    pub fn to_text(&self) -> String {
        let [c, h, w] = self.input;
        let mut out = format!("input {c} {h} {w}\n");
        let mut open: Option<usize> = None;
        for l in &self.layers {
            if l.block != open {
                if open.is_some() {
                    out.push_str("block-end\n");
                }
                if l.block.is_some() {
                    out.push_str("block-begin\n");
                }
                open = l.block;
            }
            let line = match l.kind {
                LayerKind::Conv(g) => format!(
                    "conv {} {} {} {} {}",
                    g.in_channels, g.out_channels, g.kernel, g.stride, g.padding
                ),
                LayerKind::Relu => "relu".into(),
                LayerKind::MaxPool { k } => format!("maxpool {k}"),
                LayerKind::AvgPool { k } => format!("avgpool {k}"),
                LayerKind::Flatten => "flatten".into(),
                LayerKind::Linear { inputs, outputs } => format!("linear {inputs} {outputs}"),
            };
            out.push_str(&line);
            out.push('\n');
        }
        if open.is_some() {
            out.push_str("block-end\n");
        }
        out
    }
}

struct Token<'a> {
    text: &'a str,
    column: usize,
}

fn tokens(line: &str) -> Vec<Token<'_>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in line.char_indices() {
        if ch.is_whitespace() {
            if let Some(s) = start.take() {
                out.push(Token {
                    text: &line[s..i],
                    column: line[..s].chars().count() + 1,
                });
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push(Token {
            text: &line[s..],
            column: line[..s].chars().count() + 1,
        });
    }
    out
}

fn parse_err(line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        column,
        message: message.into(),
    }
}

pub fn parse_model(text: &str) -> Result<ModelSpec> {
    let mut input: Option<([usize; 3], ActShape)> = None;
    let mut layers = Vec::new();
    let mut block: Option<usize> = None;
    let mut next_block = 0;
    let mut last_line = 0;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        last_line = line_no;
        let content = raw.split('#').next().unwrap_or("");
        let toks = tokens(content);
        let Some(head) = toks.first() else { continue };
        let args = &toks[1..];

        let numbers = |count: usize| -> Result<Vec<usize>> {
            if args.len() != count {
                return Err(parse_err(
                    line_no,
                    head.column,
                    format!(
                        "`{}` takes {count} argument(s), got {}",
                        head.text,
                        args.len()
                    ),
                ));
            }
            args.iter()
                .map(|t| {
                    t.text.parse::<usize>().map_err(|_| {
                        parse_err(
                            line_no,
                            t.column,
                            format!("expected a non-negative integer, got `{}`", t.text),
                        )
                    })
                })
                .collect()
        };

        let kind = match head.text {
            "input" => {
                if input.is_some() {
                    return Err(parse_err(line_no, head.column, "input declared twice"));
                }
                let v = numbers(3)?;
                if let Some(p) = v.iter().position(|&d| d == 0) {
                    return Err(parse_err(
                        line_no,
                        args[p].column,
                        "input extents must be positive",
                    ));
                }
                let dims = [v[0], v[1], v[2]];
                input = Some((dims, ActShape::Spatial(dims)));
                continue;
            }
            "block-begin" => {
                numbers(0)?;
                if block.is_some() {
                    return Err(parse_err(line_no, head.column, "nested block-begin"));
                }
                block = Some(next_block);
                next_block += 1;
                continue;
            }
            "block-end" => {
                numbers(0)?;
                if block.take().is_none() {
                    return Err(parse_err(
                        line_no,
                        head.column,
                        "block-end without block-begin",
                    ));
                }
                continue;
            }
            "conv" => {
                let v = numbers(5)?;
                for (p, what) in [
                    (0, "in-channels"),
                    (1, "out-channels"),
                    (2, "kernel"),
                    (3, "stride"),
                ] {
                    if v[p] == 0 {
                        return Err(parse_err(
                            line_no,
                            args[p].column,
                            format!("{what} must be positive"),
                        ));
                    }
                }
                LayerKind::Conv(ConvGeometry {
                    in_channels: v[0],
                    out_channels: v[1],
                    kernel: v[2],
                    stride: v[3],
                    padding: v[4],
                })
            }
            "relu" => {
                numbers(0)?;
                LayerKind::Relu
            }
            "maxpool" | "avgpool" => {
                let v = numbers(1)?;
                if v[0] == 0 {
                    return Err(parse_err(
                        line_no,
                        args[0].column,
                        "pool window must be positive",
                    ));
                }
                if head.text == "maxpool" {
                    LayerKind::MaxPool { k: v[0] }
                } else {
                    LayerKind::AvgPool { k: v[0] }
                }
            }
            "flatten" => {
                numbers(0)?;
                LayerKind::Flatten
            }
            "linear" => {
                let v = numbers(2)?;
                if v[1] == 0 {
                    return Err(parse_err(
                        line_no,
                        args[1].column,
                        "linear outputs must be positive",
                    ));
                }
                LayerKind::Linear {
                    inputs: v[0],
                    outputs: v[1],
                }
            }
            other => {
                return Err(parse_err(
                    line_no,
                    head.column,
                    format!("unknown directive `{other}`"),
                ));
            }
        };

        let Some((_, shape)) = input.as_mut() else {
            return Err(parse_err(line_no, head.column, "no input declared"));
        };
        *shape = next_shape(&kind, *shape).map_err(|m| {
            // point at the first argument for arity-style shape complaints
            let col = args.first().map_or(head.column, |t| t.column);
            parse_err(
                line_no,
                col,
                format!("layer {} ({}): {m}", layers.len(), kind.name()),
            )
        })?;
        layers.push(LayerSpec { kind, block });
    }

    if block.is_some() {
        return Err(parse_err(last_line.max(1), 1, "unterminated block-begin"));
    }
    let Some((dims, _)) = input else {
        return Err(parse_err(last_line.max(1), 1, "no input declared"));
    };
    ModelSpec::new(dims, layers)
}

/// Model files shipped with the crate.
pub mod bundled {
    /// Six 64-channel 3×3 conv layers on 32×32 inputs with two 2×2 max pools.
    pub const VGG6: &str = include_str!("../../models/vgg6.txt");
    /// Two small conv layers on 3×8×8 inputs and a 2-way linear head.
    pub const TOY: &str = include_str!("../../models/toy.txt");
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_models_parse() {
        let vgg = parse_model(bundled::VGG6).unwrap();
        assert_eq!(vgg.conv_layers().count(), 6);
        assert_eq!(vgg.final_shape(), ActShape::Flat(10));
        assert_eq!(
            parse_model(bundled::TOY).unwrap().final_shape(),
            ActShape::Flat(2)
        );
    }

    #[test]
    fn small_model() {
        let m = parse_model("input 1 4 4\nconv 1 2 3 1 1\nrelu").unwrap();
        assert_eq!(m.layers().len(), 2);
        assert_eq!(m.output_shape(0), ActShape::Spatial([2, 4, 4]));
        assert_eq!(m.final_shape(), ActShape::Spatial([2, 4, 4]));
    }

    #[test]
    fn missing_input() {
        let e = parse_model("conv 3 64 3 1 1").unwrap_err();
        assert!(e.to_string().contains("no input declared"), "{e}");
        assert!(matches!(
            e,
            Error::Parse {
                line: 1,
                column: 1,
                ..
            }
        ));
        assert!(parse_model("# nothing\n")
            .unwrap_err()
            .to_string()
            .contains("no input declared"));
    }

    #[test]
    fn channel_mismatch() {
        let e = parse_model("input 3 32 32\nconv 4 8 3 1 1").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("expects 3 in-channels, got 4"), "{msg}");
        assert!(matches!(
            e,
            Error::Parse {
                line: 2,
                column: 6,
                ..
            }
        ));
    }

    #[test]
    fn directive_and_arity_errors() {
        let e = parse_model("input 1 4 4\n  dropout 0").unwrap_err();
        assert!(
            matches!(
                e,
                Error::Parse {
                    line: 2,
                    column: 3,
                    ..
                }
            ),
            "{e}"
        );
        let e = parse_model("input 1 4 4\nconv 1 2 3").unwrap_err();
        assert!(e.to_string().contains("takes 5 argument"), "{e}");
        let e = parse_model("input 1 4 4\nmaxpool x").unwrap_err();
        assert!(
            matches!(
                e,
                Error::Parse {
                    line: 2,
                    column: 9,
                    ..
                }
            ),
            "{e}"
        );
        assert!(parse_model("input 1 4 4\ninput 1 4 4").is_err());
        assert!(parse_model("input 1 4 4\nlinear 16 2").is_err());
        assert!(parse_model("input 1 4 4\nflatten\nlinear 15 2").is_err());
        assert!(parse_model("input 1 4 4\nflatten\nrelu\nconv 1 1 1 1 0").is_err());
        assert!(parse_model("input 1 4 4\nconv 1 1 7 1 0").is_err());
    }

    #[test]
    fn blocks() {
        let text = "input 2 8 8\nconv 2 4 3 1 1\nblock-begin\nconv 4 4 3 1 1\nrelu\nblock-end\nblock-begin\nconv 4 4 3 1 1\nblock-end\nrelu\n";
        let m = parse_model(text).unwrap();
        let blocks: Vec<_> = m.layers().iter().map(|l| l.block).collect();
        assert_eq!(blocks, vec![None, Some(0), Some(0), Some(1), None]);
        assert_eq!(m.to_text(), text);
        assert!(parse_model("input 1 2 2\nblock-begin\nblock-begin").is_err());
        assert!(parse_model("input 1 2 2\nblock-end").is_err());
        assert!(parse_model("input 1 2 2\nblock-begin\nrelu").is_err());
    }

    #[test]
    fn comments_and_round_trip() {
        let text =
            "# toy\ninput 3 8 8   # rgb\nconv 3 4 3 1 1\nrelu\nmaxpool 2\nflatten\nlinear 64 2\n";
        let m = parse_model(text).unwrap();
        let again = parse_model(&m.to_text()).unwrap();
        assert_eq!(m, again);
        assert_eq!(m.final_shape(), ActShape::Flat(2));
    }
}
