//! Turn grammar for the focus tool.
//!
//! An assistant turn is exactly one `<think>` block followed by exactly one
//! terminal block, either `<tool_call>` carrying a JSON payload or `<answer>`.
//! Only whitespace may separate or surround the blocks. Environment turns wrap
//! one `<image>` placeholder per returned view in `<tool_response>`.
//!
//! Text inside blocks may contain `<` and `>` as long as they do not spell one
//! of the reserved tags. [`serialize_turn`] escapes `&`, `<` and `>` as XML
//! entities and [`parse_turn`] decodes them, so any turn round-trips.

use serde_json::Value;

use crate::budget::BBox;

pub const FOCUS_TOOL: &str = "focus";
pub const IMAGE_PLACEHOLDER: &str = "<image>";
pub const MAX_BBOXES_PER_CALL: usize = 3;

const RESERVED: [&str; 4] = ["think", "tool_call", "answer", "tool_response"];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProtocolError {
    #[error("turn has no non-empty <think> block")]
    MissingThink,
    #[error("turn must carry exactly one of <tool_call> or <answer>")]
    BothOrNeitherTerminal,
    #[error("malformed tags: {0}")]
    MalformedTags(String),
    #[error("tool call payload is not valid JSON: {0}")]
    MalformedJson(String),
    #[error("unknown tool {0:?}")]
    UnknownTool(String),
    #[error("tool call requests {0} bboxes, expected 1-3")]
    BBoxCountOutOfRange(usize),
    #[error("bbox {0} must be an array of exactly 4 integers")]
    BadCoordinateArity(usize),
    #[error("tool response must carry 1-3 views, got {0}")]
    BadViewCount(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolCall {
    pub name: String,
    pub bboxes: Vec<BBox>,
}

impl ToolCall {
    pub fn focus(bboxes: Vec<BBox>) -> Self {
        Self {
            name: FOCUS_TOOL.to_string(),
            bboxes,
        }
    }

    /// JSON payload in the same layout as the tool schema example.
    pub fn to_json(&self) -> String {
        let boxes: Vec<String> = self
            .bboxes
            .iter()
            .map(|b| format!("[{}, {}, {}, {}]", b.x1, b.y1, b.x2, b.y2))
            .collect();
        format!(
            "{{\"name\": {}, \"arguments\": {{\"bboxes\": [{}]}}}}",
            Value::String(self.name.clone()),
            boxes.join(", ")
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Terminal {
    ToolCall(ToolCall),
    Answer(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TurnContent {
    pub think: String,
    pub terminal: Terminal,
}

impl TurnContent {
    pub fn tool_call(&self) -> Option<&ToolCall> {
        match &self.terminal {
            Terminal::ToolCall(tc) => Some(tc),
            Terminal::Answer(_) => None,
        }
    }

    pub fn answer(&self) -> Option<&str> {
        match &self.terminal {
            Terminal::Answer(a) => Some(a),
            Terminal::ToolCall(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Assistant,
    Environment,
}

impl Role {
    /// Role name used in conversation records.
    pub fn record_name(self) -> &'static str {
        match self {
            Role::Assistant => "gpt",
            Role::Environment => "human",
        }
    }

    pub fn from_record_name(name: &str) -> Option<Self> {
        match name {
            "gpt" => Some(Role::Assistant),
            "human" => Some(Role::Environment),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

#[derive(Debug)]
struct Block<'a> {
    tag: &'static str,
    inner: &'a str,
}

/// Returns the reserved tag (and whether it closes) starting at `pos`, if any.
fn reserved_tag_at(text: &str, pos: usize) -> Option<(&'static str, bool, usize)> {
    let rest = &text[pos..];
    if !rest.starts_with('<') {
        return None;
    }
    let (closing, body) = match rest[1..].strip_prefix('/') {
        Some(b) => (true, b),
        None => (false, &rest[1..]),
    };
    for tag in RESERVED {
        if let Some(after) = body.strip_prefix(tag) {
            if after.starts_with('>') {
                let len = 1 + closing as usize + tag.len() + 1;
                return Some((tag, closing, len));
            }
        }
    }
    None
}

fn split_blocks(text: &str) -> Result<Vec<Block<'_>>, ProtocolError> {
    let mut blocks = Vec::new();
    let mut open: Option<(&'static str, usize)> = None;
    let mut gap_start = 0;
    let mut i = 0;
    while i < text.len() {
        if !text.is_char_boundary(i) {
            i += 1;
            continue;
        }
        let Some((tag, closing, len)) = reserved_tag_at(text, i) else {
            i += 1;
            continue;
        };
        match (open, closing) {
            (None, false) => {
                let gap = &text[gap_start..i];
                if !gap.trim().is_empty() {
                    return Err(ProtocolError::MalformedTags(format!(
                        "stray text outside blocks: {:?}",
                        gap.trim()
                    )));
                }
                open = Some((tag, i + len));
            }
            (None, true) => {
                return Err(ProtocolError::MalformedTags(format!(
                    "closing </{tag}> without opening tag"
                )))
            }
            (Some((cur, _)), false) => {
                return Err(ProtocolError::MalformedTags(format!(
                    "<{tag}> nested inside <{cur}>"
                )))
            }
            (Some((cur, start)), true) => {
                if cur != tag {
                    return Err(ProtocolError::MalformedTags(format!(
                        "</{tag}> closes <{cur}>"
                    )));
                }
                blocks.push(Block {
                    tag,
                    inner: &text[start..i],
                });
                open = None;
                gap_start = i + len;
            }
        }
        i += len;
    }
    if let Some((cur, _)) = open {
        return Err(ProtocolError::MalformedTags(format!("unclosed <{cur}>")));
    }
    let tail = &text[gap_start..];
    if !tail.trim().is_empty() {
        return Err(ProtocolError::MalformedTags(format!(
            "stray text outside blocks: {:?}",
            tail.trim()
        )));
    }
    Ok(blocks)
}

pub fn escape_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for ch in text.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(pos) = rest.find('&') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        let (ch, skip) = if tail.starts_with("&lt;") {
            ('<', 4)
        } else if tail.starts_with("&gt;") {
            ('>', 4)
        } else if tail.starts_with("&amp;") {
            ('&', 5)
        } else {
            ('&', 1)
        };
        out.push(ch);
        rest = &tail[skip..];
    }
    out.push_str(rest);
    out
}

/// Parse one assistant turn.
pub fn parse_turn(text: &str) -> Result<TurnContent, ProtocolError> {
    let blocks = split_blocks(text)?;
    let mut think = None;
    let mut tool = None;
    let mut answer = None;
    for (idx, b) in blocks.iter().enumerate() {
        let slot = match b.tag {
            "think" => {
                if idx != 0 && think.is_none() {
                    return Err(ProtocolError::MalformedTags(
                        "<think> must come first".into(),
                    ));
                }
                &mut think
            }
            "tool_call" => &mut tool,
            "answer" => &mut answer,
            other => {
                return Err(ProtocolError::MalformedTags(format!(
                    "<{other}> is not allowed in an assistant turn"
                )))
            }
        };
        if slot.is_some() {
            return Err(ProtocolError::MalformedTags(format!(
                "more than one <{}> block",
                b.tag
            )));
        }
        *slot = Some(b.inner);
    }
    let think = match think {
        Some(t) if !t.trim().is_empty() => unescape_text(t.trim()),
        _ => return Err(ProtocolError::MissingThink),
    };
    let terminal = match (tool, answer) {
        (Some(tc), None) => Terminal::ToolCall(parse_tool_call(tc)?),
        (None, Some(a)) => Terminal::Answer(unescape_text(a.trim())),
        _ => return Err(ProtocolError::BothOrNeitherTerminal),
    };
    Ok(TurnContent { think, terminal })
}

/// Parse and validate the JSON interior of a `<tool_call>` block.
pub fn parse_tool_call(text: &str) -> Result<ToolCall, ProtocolError> {
    let value: Value =
        serde_json::from_str(text.trim()).map_err(|e| ProtocolError::MalformedJson(e.to_string()))?;
    let name = value
        .get("name")
        .and_then(Value::as_str)
        .ok_or_else(|| ProtocolError::MalformedJson("missing string field \"name\"".into()))?;
    if name != FOCUS_TOOL {
        return Err(ProtocolError::UnknownTool(name.to_string()));
    }
    let boxes = value
        .get("arguments")
        .and_then(|a| a.get("bboxes"))
        .and_then(Value::as_array)
        .ok_or_else(|| ProtocolError::MalformedJson("missing array \"arguments.bboxes\"".into()))?;
    if boxes.is_empty() || boxes.len() > MAX_BBOXES_PER_CALL {
        return Err(ProtocolError::BBoxCountOutOfRange(boxes.len()));
    }
    let mut bboxes = Vec::with_capacity(boxes.len());
    for (i, b) in boxes.iter().enumerate() {
        let coords = b.as_array().ok_or(ProtocolError::BadCoordinateArity(i))?;
        if coords.len() != 4 {
            return Err(ProtocolError::BadCoordinateArity(i));
        }
        let mut out = [0i64; 4];
        for (slot, c) in out.iter_mut().zip(coords) {
            // as_i64 rejects floats such as 10.0 or 10.5
            *slot = c.as_i64().ok_or(ProtocolError::BadCoordinateArity(i))?;
        }
        bboxes.push(BBox::from_array(out));
    }
    Ok(ToolCall {
        name: name.to_string(),
        bboxes,
    })
}

pub fn serialize_turn(turn: &TurnContent) -> String {
    let think = escape_text(&turn.think);
    match &turn.terminal {
        Terminal::ToolCall(tc) => format!("<think>{think}</think><tool_call>{}</tool_call>", tc.to_json()),
        Terminal::Answer(a) => format!("<think>{think}</think><answer>{}</answer>", escape_text(a)),
    }
}

/// Environment-side message with one image placeholder per returned view.
pub fn render_tool_response(view_count: usize) -> Result<Message, ProtocolError> {
    if view_count == 0 || view_count > MAX_BBOXES_PER_CALL {
        return Err(ProtocolError::BadViewCount(view_count));
    }
    Ok(Message {
        role: Role::Environment,
        content: format!(
            "<tool_response>{}</tool_response>",
            IMAGE_PLACEHOLDER.repeat(view_count)
        ),
    })
}

pub fn count_placeholders(text: &str) -> usize {
    text.matches(IMAGE_PLACEHOLDER).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_schema_example() {
        let t = parse_turn(
            "<think>zoom needed</think><tool_call>{\"name\":\"focus\",\"arguments\":{\"bboxes\":[[10,20,100,200]]}}</tool_call>",
        )
        .unwrap();
        assert_eq!(t.think, "zoom needed");
        assert_eq!(t.tool_call().unwrap().bboxes, vec![BBox::new(10, 20, 100, 200)]);
    }

    #[test]
    fn parses_answer_turn() {
        let t = parse_turn("  <think>clear enough</think>\n<answer>red</answer>\n").unwrap();
        assert_eq!(t.answer(), Some("red"));
    }

    #[test]
    fn missing_think() {
        assert_eq!(parse_turn("<answer>red</answer>"), Err(ProtocolError::MissingThink));
        assert_eq!(
            parse_turn("<think>   </think><answer>red</answer>"),
            Err(ProtocolError::MissingThink)
        );
    }

    #[test]
    fn both_or_neither() {
        assert_eq!(parse_turn("<think>x</think>"), Err(ProtocolError::BothOrNeitherTerminal));
        let both = "<think>x</think><tool_call>{\"name\":\"focus\",\"arguments\":{\"bboxes\":[[1,2,3,4]]}}</tool_call><answer>a</answer>";
        assert_eq!(parse_turn(both), Err(ProtocolError::BothOrNeitherTerminal));
    }

    #[test]
    fn rejects_duplicates_nesting_and_stray_text() {
        for bad in [
            "<think>a</think><answer>b</answer><answer>c</answer>",
            "<think>a</think><think>b</think><answer>c</answer>",
            "<think>a<answer>b</answer></think>",
            "<think>a</think><answer>b</answer> trailing",
            "lead <think>a</think><answer>b</answer>",
            "<think>a</think><answer>b",
            "<answer>b</answer><think>a</think>",
            "<think>a</think><tool_response><image></tool_response>",
            "<think>a</think></answer>",
        ] {
            assert!(
                matches!(parse_turn(bad), Err(ProtocolError::MalformedTags(_))),
                "{bad:?} -> {:?}",
                parse_turn(bad)
            );
        }
    }

    #[test]
    fn tool_call_validation() {
        assert_eq!(
            parse_tool_call("{\"name\":\"focus\",\"arguments\":{\"bboxes\":[[10,20,100,200]]}}")
                .unwrap()
                .bboxes
                .len(),
            1
        );
        let four = "{\"name\":\"focus\",\"arguments\":{\"bboxes\":[[0,0,1,1],[0,0,1,1],[0,0,1,1],[0,0,1,1]]}}";
        assert_eq!(parse_tool_call(four), Err(ProtocolError::BBoxCountOutOfRange(4)));
        let none = "{\"name\":\"focus\",\"arguments\":{\"bboxes\":[]}}";
        assert_eq!(parse_tool_call(none), Err(ProtocolError::BBoxCountOutOfRange(0)));
        let zoom = "{\"name\":\"zoom\",\"arguments\":{\"bboxes\":[[0,0,1,1]]}}";
        assert_eq!(parse_tool_call(zoom), Err(ProtocolError::UnknownTool("zoom".into())));
        let three = "{\"name\":\"focus\",\"arguments\":{\"bboxes\":[[0,0,1]]}}";
        assert_eq!(parse_tool_call(three), Err(ProtocolError::BadCoordinateArity(0)));
        let float = "{\"name\":\"focus\",\"arguments\":{\"bboxes\":[[0,0,1,1],[0.0,0,1,1]]}}";
        assert_eq!(parse_tool_call(float), Err(ProtocolError::BadCoordinateArity(1)));
        assert!(matches!(parse_tool_call("{not json"), Err(ProtocolError::MalformedJson(_))));
    }

    #[test]
    fn tool_json_matches_schema_layout() {
        let tc = ToolCall::focus(vec![BBox::new(10, 20, 100, 200)]);
        assert_eq!(
            tc.to_json(),
            "{\"name\": \"focus\", \"arguments\": {\"bboxes\": [[10, 20, 100, 200]]}}"
        );
    }

    #[test]
    fn angle_brackets_in_think() {
        let raw = parse_turn("<think>is a < b > c? <box> not reserved</think><answer>x</answer>").unwrap();
        assert_eq!(raw.think, "is a < b > c? <box> not reserved");
        let turn = TurnContent {
            think: "contains <think> and </answer> & stuff".into(),
            terminal: Terminal::Answer("a<b".into()),
        };
        let text = serialize_turn(&turn);
        assert_eq!(parse_turn(&text).unwrap(), turn);
    }

    #[test]
    fn tool_response_rendering() {
        let m = render_tool_response(2).unwrap();
        assert_eq!(m.role, Role::Environment);
        assert_eq!(count_placeholders(&m.content), 2);
        assert_eq!(count_placeholders(&render_tool_response(1).unwrap().content), 1);
        assert_eq!(render_tool_response(0), Err(ProtocolError::BadViewCount(0)));
        assert_eq!(render_tool_response(4), Err(ProtocolError::BadViewCount(4)));
    }

    #[test]
    fn unescape_leaves_unknown_entities() {
        assert_eq!(unescape_text("a &foo; &lt;b&gt; &amp;"), "a &foo; <b> &");
    }
}
