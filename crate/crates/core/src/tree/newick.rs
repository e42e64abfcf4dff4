//! Newick reader and writer.
//!
//! Grammar accepted by [`parse_newick`]:
//!
//! ```text
//! tree     := subtree [ ':' length ] ';'
//! subtree  := '(' subtree { ',' subtree } ')' [ label ] | label
//! edge     := subtree ':' length           (every non-root edge)
//! label    := unquoted | "'" { char | "''" } "'"
//! ```
//!
//! Whitespace between tokens and `[...]` comments are skipped. Branch lengths
//! are mandatory on every non-root edge; the root length is optional.

use crate::error::{NewickError, Result};
use crate::tree::{Node, NodeId, Tree};

/// Parses a single Newick statement terminated by `;`.
pub fn parse_newick(text: &str) -> Result<Tree> {
    let mut parser = Parser {
        src: text.as_bytes(),
        text,
        pos: 0,
        nodes: Vec::new(),
    };
    let (root, root_edge) = parser.parse_statement()?;
    Tree::from_nodes(parser.nodes, root, root_edge)
}

/// Serializes a tree; child order and internal labels are preserved.
pub fn write_newick(tree: &Tree) -> String {
    let mut out = String::new();
    write_subtree(tree, tree.root(), &mut out);
    if let Some(len) = tree.root_edge() {
        out.push(':');
        out.push_str(&format_length(len));
    }
    out.push(';');
    out
}

fn write_subtree(tree: &Tree, id: NodeId, out: &mut String) {
    let node = tree.node(id);
    if !node.children.is_empty() {
        out.push('(');
        for (i, &c) in node.children.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            write_subtree(tree, c, out);
            out.push(':');
            out.push_str(&format_length(tree.node(c).length));
        }
        out.push(')');
    }
    if let Some(label) = &node.label {
        write_label(label, out);
    }
}

// Shortest representation that parses back to the same f64.
fn format_length(len: f64) -> String {
    format!("{len}")
}

fn needs_quotes(label: &str) -> bool {
    label.is_empty()
        || label
            .chars()
            .any(|c| c.is_whitespace() || "()[]':;,".contains(c))
}

fn write_label(label: &str, out: &mut String) {
    if needs_quotes(label) {
        out.push('\'');
        out.push_str(&label.replace('\'', "''"));
        out.push('\'');
    } else {
        out.push_str(label);
    }
}

struct Parser<'a> {
    src: &'a [u8],
    text: &'a str,
    pos: usize,
    nodes: Vec<Node>,
}

impl<'a> Parser<'a> {
    fn error<T>(&self, offset: usize, message: impl Into<String>) -> Result<T> {
        Err(NewickError {
            offset,
            message: message.into(),
        }
        .into())
    }

    fn skip_trivia(&mut self) -> Result<()> {
        loop {
            match self.src.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'[') => {
                    let start = self.pos;
                    match self.src[self.pos..].iter().position(|&b| b == b']') {
                        Some(end) => self.pos += end + 1,
                        None => return self.error(start, "unterminated comment"),
                    }
                }
                _ => return Ok(()),
            }
        }
    }

    fn peek(&mut self) -> Result<Option<u8>> {
        self.skip_trivia()?;
        Ok(self.src.get(self.pos).copied())
    }

    fn parse_statement(&mut self) -> Result<(NodeId, Option<f64>)> {
        // Explicit stack of open `(` nodes; deep caterpillar trees must not
        // exhaust the call stack.
        let mut open: Vec<NodeId> = Vec::new();
        let root = 'outer: loop {
            // Start of a subtree.
            self.skip_trivia()?;
            let start = self.pos;
            let id = self.nodes.len();
            self.nodes.push(Node {
                parent: open.last().copied(),
                children: Vec::new(),
                length: 0.0,
                label: None,
            });
            if self.peek()? == Some(b'(') {
                self.pos += 1;
                open.push(id);
                continue;
            }
            match self.parse_label()? {
                Some(label) => self.nodes[id].label = Some(label),
                None => return self.error(start, "expected a tip label or `(`"),
            }
            // `done` is a completed subtree waiting for its edge.
            let mut done = id;
            loop {
                let Some(&parent) = open.last() else {
                    break 'outer done;
                };
                if self.peek()? != Some(b':') {
                    return self.error(self.pos, "missing branch length (expected `:`)");
                }
                self.pos += 1;
                self.nodes[done].length = self.parse_length()?;
                self.nodes[parent].children.push(done);
                match self.peek()? {
                    Some(b',') => {
                        self.pos += 1;
                        continue 'outer;
                    }
                    Some(b')') => {
                        self.pos += 1;
                        open.pop();
                        self.nodes[parent].label = self.parse_label()?;
                        done = parent;
                    }
                    Some(_) => return self.error(self.pos, "expected `,` or `)`"),
                    None => return self.error(self.pos, "unexpected end of input inside `(...)`"),
                }
            }
        };
        let root_edge = if self.peek()? == Some(b':') {
            self.pos += 1;
            Some(self.parse_length()?)
        } else {
            None
        };
        match self.peek()? {
            Some(b';') => self.pos += 1,
            Some(_) => return self.error(self.pos, "expected `;`"),
            None => return self.error(self.pos, "missing terminating `;`"),
        }
        if self.peek()?.is_some() {
            return self.error(self.pos, "trailing input after `;`");
        }
        Ok((root, root_edge))
    }

    fn parse_label(&mut self) -> Result<Option<String>> {
        match self.peek()? {
            Some(b'\'') => {
                let start = self.pos;
                self.pos += 1;
                let mut label = String::new();
                loop {
                    match self.src.get(self.pos) {
                        None => return self.error(start, "unterminated quoted label"),
                        Some(b'\'') if self.src.get(self.pos + 1) == Some(&b'\'') => {
                            label.push('\'');
                            self.pos += 2;
                        }
                        Some(b'\'') => {
                            self.pos += 1;
                            break;
                        }
                        Some(_) => {
                            // Advance one UTF-8 character.
                            let ch = self.text[self.pos..].chars().next().unwrap();
                            label.push(ch);
                            self.pos += ch.len_utf8();
                        }
                    }
                }
                if label.is_empty() {
                    return self.error(start, "empty quoted label");
                }
                Ok(Some(label))
            }
            Some(_) => {
                let start = self.pos;
                while let Some(&b) = self.src.get(self.pos) {
                    if b.is_ascii_whitespace() || b"()[]':;,".contains(&b) {
                        break;
                    }
                    self.pos += 1;
                }
                if self.pos == start {
                    Ok(None)
                } else {
                    Ok(Some(self.text[start..self.pos].to_owned()))
                }
            }
            None => Ok(None),
        }
    }

    fn parse_length(&mut self) -> Result<f64> {
        self.skip_trivia()?;
        let start = self.pos;
        while let Some(&b) = self.src.get(self.pos) {
            if b.is_ascii_digit() || b"+-.eE".contains(&b) {
                self.pos += 1;
            } else {
                break;
            }
        }
        let token = &self.text[start..self.pos];
        if token.is_empty() {
            return self.error(start, "expected a branch length");
        }
        match token.parse::<f64>() {
            Ok(v) if !v.is_finite() => self.error(start, format!("non-finite branch length `{token}`")),
            Ok(v) if v < 0.0 => self.error(start, format!("negative branch length `{token}`")),
            Ok(v) => Ok(v),
            Err(_) => self.error(start, format!("malformed number `{token}`")),
        }
    }
}
