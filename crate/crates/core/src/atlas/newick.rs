use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct NewickNode {
    pub label: Option<String>,
    pub length: Option<f64>,
    pub children: Vec<NewickNode>,
}

impl NewickNode {
    pub fn leaf(label: &str, length: Option<f64>) -> Self {
        Self {
            label: Some(label.to_string()),
            length,
            children: Vec::new(),
        }
    }

    /// Leaf labels in left-to-right order.
    pub fn leaves(&self) -> Vec<&str> {
        if self.children.is_empty() {
            return self.label.as_deref().into_iter().collect();
        }
        self.children.iter().flat_map(NewickNode::leaves).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut p = Parser {
            chars: text.trim().chars().collect(),
            pos: 0,
        };
        let node = p.node()?;
        p.expect(';')?;
        if p.pos != p.chars.len() {
            return Err(Error::Format(format!("trailing text after ';' at {}", p.pos)));
        }
        Ok(node)
    }
}

fn needs_quotes(label: &str) -> bool {
    label.is_empty() || label.chars().any(|c| "()[]',:; \t\n".contains(c))
}

impl fmt::Display for NewickNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn write(node: &NewickNode, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            if !node.children.is_empty() {
                f.write_str("(")?;
                for (i, c) in node.children.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write(c, f)?;
                }
                f.write_str(")")?;
            }
            if let Some(l) = &node.label {
                if needs_quotes(l) {
                    write!(f, "'{}'", l.replace('\'', "''"))?;
                } else {
                    f.write_str(l)?;
                }
            }
            if let Some(len) = node.length {
                write!(f, ":{len}")?;
            }
            Ok(())
        }
        write(self, f)?;
        f.write_str(";")
    }
}

struct Parser {
    chars: Vec<char>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn expect(&mut self, c: char) -> Result<()> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(Error::Format(format!("expected '{c}' at {}", self.pos)))
        }
    }

    fn node(&mut self) -> Result<NewickNode> {
        let mut children = Vec::new();
        if self.peek() == Some('(') {
            self.pos += 1;
            loop {
                children.push(self.node()?);
                match self.peek() {
                    Some(',') => self.pos += 1,
                    Some(')') => {
                        self.pos += 1;
                        break;
                    }
                    _ => return Err(Error::Format(format!("expected ',' or ')' at {}", self.pos))),
                }
            }
        }
        let label = self.label()?;
        let length = if self.peek() == Some(':') {
            self.pos += 1;
            let start = self.pos;
            while self.peek().is_some_and(|c| !",);".contains(c)) {
                self.pos += 1;
            }
            let s: String = self.chars[start..self.pos].iter().collect();
            Some(s.trim().parse::<f64>().map_err(|e| Error::Format(format!("branch length {s:?}: {e}")))?)
        } else {
            None
        };
        Ok(NewickNode {
            label,
            length,
            children,
        })
    }

    fn label(&mut self) -> Result<Option<String>> {
        if self.peek() == Some('\'') {
            self.pos += 1;
            let mut s = String::new();
            loop {
                match self.peek() {
                    None => return Err(Error::Format("unterminated quoted label".into())),
                    Some('\'') if self.chars.get(self.pos + 1) == Some(&'\'') => {
                        s.push('\'');
                        self.pos += 2;
                    }
                    Some('\'') => {
                        self.pos += 1;
                        return Ok(Some(s));
                    }
                    Some(c) => {
                        s.push(c);
                        self.pos += 1;
                    }
                }
            }
        }
        let start = self.pos;
        while self.peek().is_some_and(|c| !"(),:;'".contains(c)) {
            self.pos += 1;
        }
        let s: String = self.chars[start..self.pos].iter().collect();
        Ok((!s.is_empty()).then_some(s))
    }
}
