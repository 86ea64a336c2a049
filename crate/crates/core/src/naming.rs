//! Hierarchical names and call expressions.
//!
//! Data is addressed by hierarchical names (`/data/sensor/temp`) and
//! computations by call expressions over such names
//! (`/fn/add(/data/a,/data/b)`). A call expression decomposes into one
//! task per call node, in post-order, so sub-computations can be solved
//! independently.

use std::fmt;

use thiserror::Error;

/// Characters a name component may not contain. `/` separates components,
/// the rest would make the expression grammar ambiguous.
const RESERVED: &[char] = &['/', '(', ')', ','];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NameError {
    #[error("empty name")]
    EmptyName,
    #[error("empty name component")]
    EmptyComponent,
    #[error("name must start with '/'")]
    MissingLeadingSeparator,
    #[error("reserved character {0:?} in name component")]
    ReservedCharacter(char),
}

/// A hierarchical name: one or more non-empty components, printed as
/// `/` + components joined by `/`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Name {
    components: Vec<String>,
}

impl Name {
    /// Build a name from components, validating each one.
    pub fn new<I, S>(components: I) -> Result<Name, NameError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let components: Vec<String> = components.into_iter().map(Into::into).collect();
        if components.is_empty() {
            return Err(NameError::EmptyName);
        }
        for c in &components {
            validate_component(c)?;
        }
        Ok(Name { components })
    }

    /// Parse the canonical text form. A single trailing separator is
    /// tolerated and stripped.
    pub fn parse(text: &str) -> Result<Name, NameError> {
        let mut text = text;
        if text.len() > 1 && text.ends_with('/') {
            text = &text[..text.len() - 1];
        }
        if text.is_empty() || text.chars().all(|c| c == '/') {
            return Err(NameError::EmptyName);
        }
        let Some(rest) = text.strip_prefix('/') else {
            return Err(NameError::MissingLeadingSeparator);
        };
        let mut components = Vec::new();
        for part in rest.split('/') {
            validate_component(part)?;
            components.push(part.to_string());
        }
        Ok(Name { components })
    }

    pub fn components(&self) -> &[String] {
        &self.components
    }

    /// Canonical text form, `/a/b/c`.
    pub fn text(&self) -> String {
        self.to_string()
    }

    /// Extend the name with one more component.
    pub fn child(&self, component: &str) -> Result<Name, NameError> {
        validate_component(component)?;
        let mut components = self.components.clone();
        components.push(component.to_string());
        Ok(Name { components })
    }

    pub fn starts_with(&self, prefix: &Name) -> bool {
        self.components.len() >= prefix.components.len()
            && self.components[..prefix.components.len()] == prefix.components[..]
    }
}

fn validate_component(c: &str) -> Result<(), NameError> {
    if c.is_empty() {
        return Err(NameError::EmptyComponent);
    }
    for ch in c.chars() {
        if RESERVED.contains(&ch) {
            return Err(NameError::ReservedCharacter(ch));
        }
        if ch.is_whitespace() {
            return Err(NameError::ReservedCharacter(ch));
        }
    }
    Ok(())
}

impl fmt::Display for Name {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.components {
            write!(f, "/{c}")?;
        }
        Ok(())
    }
}

/// A computation description: either a reference to named data (a fetch
/// task) or a function call whose arguments are expressions themselves.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Expression {
    DataRef(Name),
    Call {
        function: Name,
        arguments: Vec<Expression>,
    },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("syntax error at byte {offset}: {message}")]
pub struct SyntaxError {
    pub offset: usize,
    pub message: String,
}

impl Expression {
    /// Parse `expr := name | name '(' [expr (',' expr)*] ')'`. Whitespace
    /// around tokens is ignored.
    pub fn parse(text: &str) -> Result<Expression, SyntaxError> {
        let mut p = ExprParser {
            bytes: text.as_bytes(),
            pos: 0,
        };
        p.skip_ws();
        let expr = p.expression()?;
        p.skip_ws();
        if p.pos < p.bytes.len() {
            return Err(p.err("trailing garbage after expression"));
        }
        Ok(expr)
    }

    /// Canonical text form with no whitespace; parsing it back yields a
    /// structurally equal expression.
    pub fn text(&self) -> String {
        self.to_string()
    }

    /// Collect every call node in post-order: a sub-call appears before
    /// any call that contains it. A bare data reference has no subtasks.
    pub fn decompose(&self) -> TaskTree {
        let mut subtasks = Vec::new();
        collect_calls(self, &mut subtasks);
        TaskTree {
            root: self.clone(),
            subtasks,
        }
    }

    pub fn call_count(&self) -> usize {
        match self {
            Expression::DataRef(_) => 0,
            Expression::Call { arguments, .. } => {
                1 + arguments.iter().map(Expression::call_count).sum::<usize>()
            }
        }
    }

    /// Every name referenced as plain data anywhere in the tree.
    pub fn data_refs(&self) -> Vec<&Name> {
        let mut out = Vec::new();
        fn walk<'a>(e: &'a Expression, out: &mut Vec<&'a Name>) {
            match e {
                Expression::DataRef(n) => out.push(n),
                Expression::Call { arguments, .. } => {
                    for a in arguments {
                        walk(a, out);
                    }
                }
            }
        }
        walk(self, &mut out);
        out
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expression::DataRef(n) => write!(f, "{n}"),
            Expression::Call {
                function,
                arguments,
            } => {
                write!(f, "{function}(")?;
                for (i, a) in arguments.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{a}")?;
                }
                write!(f, ")")
            }
        }
    }
}

fn collect_calls(e: &Expression, out: &mut Vec<Expression>) {
    if let Expression::Call { arguments, .. } = e {
        for a in arguments {
            collect_calls(a, out);
        }
        out.push(e.clone());
    }
}

/// An expression plus its call nodes in post-order; each call node is an
/// individually solvable task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskTree {
    pub root: Expression,
    pub subtasks: Vec<Expression>,
}

struct ExprParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ExprParser<'a> {
    fn err(&self, message: &str) -> SyntaxError {
        SyntaxError {
            offset: self.pos,
            message: message.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn name(&mut self) -> Result<Name, SyntaxError> {
        let start = self.pos;
        while let Some(b) = self.peek() {
            if b == b'(' || b == b')' || b == b',' || b.is_ascii_whitespace() {
                break;
            }
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err("expected a name"));
        }
        let token = std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| self.err("name is not valid UTF-8"))?;
        Name::parse(token).map_err(|e| SyntaxError {
            offset: start,
            message: e.to_string(),
        })
    }

    fn expression(&mut self) -> Result<Expression, SyntaxError> {
        self.skip_ws();
        let name = self.name()?;
        self.skip_ws();
        if self.peek() != Some(b'(') {
            return Ok(Expression::DataRef(name));
        }
        self.pos += 1;
        self.skip_ws();
        let mut arguments = Vec::new();
        if self.peek() == Some(b')') {
            self.pos += 1;
            return Ok(Expression::Call {
                function: name,
                arguments,
            });
        }
        loop {
            self.skip_ws();
            if matches!(self.peek(), Some(b',') | Some(b')')) {
                return Err(self.err("empty argument slot"));
            }
            arguments.push(self.expression()?);
            self.skip_ws();
            match self.peek() {
                Some(b',') => {
                    self.pos += 1;
                }
                Some(b')') => {
                    self.pos += 1;
                    return Ok(Expression::Call {
                        function: name,
                        arguments,
                    });
                }
                Some(_) => return Err(self.err("expected ',' or ')'")),
                None => return Err(self.err("unbalanced parenthesis")),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn name(text: &str) -> Name {
        Name::parse(text).unwrap()
    }

    #[test]
    fn parse_name_components() {
        let n = name("/name/component1/component2");
        assert_eq!(n.components(), ["name", "component1", "component2"]);
        assert_eq!(n.text(), "/name/component1/component2");
    }

    #[test]
    fn parse_name_single_component() {
        assert_eq!(name("/a").components(), ["a"]);
    }

    #[test]
    fn parse_name_trailing_separator_is_stripped() {
        assert_eq!(name("/a/b/"), name("/a/b"));
    }

    #[test]
    fn parse_name_errors() {
        assert_eq!(Name::parse("/a//b"), Err(NameError::EmptyComponent));
        assert_eq!(Name::parse(""), Err(NameError::EmptyName));
        assert_eq!(Name::parse("/"), Err(NameError::EmptyName));
        assert_eq!(Name::parse("//"), Err(NameError::EmptyName));
        assert_eq!(Name::parse("a/b"), Err(NameError::MissingLeadingSeparator));
        assert_eq!(
            Name::parse("/a b"),
            Err(NameError::ReservedCharacter(' '))
        );
    }

    #[test]
    fn parse_expression_call() {
        let e = Expression::parse("/fn/add(/data/a,/data/b)").unwrap();
        assert_eq!(
            e,
            Expression::Call {
                function: name("/fn/add"),
                arguments: vec![
                    Expression::DataRef(name("/data/a")),
                    Expression::DataRef(name("/data/b")),
                ],
            }
        );
    }

    #[test]
    fn parse_expression_bare_name_is_data_ref() {
        assert_eq!(
            Expression::parse("/data/a").unwrap(),
            Expression::DataRef(name("/data/a"))
        );
    }

    #[test]
    fn parse_expression_nested() {
        let e = Expression::parse("/fn/f(/fn/g(/data/x),/data/y)").unwrap();
        assert_eq!(
            e,
            Expression::Call {
                function: name("/fn/f"),
                arguments: vec![
                    Expression::Call {
                        function: name("/fn/g"),
                        arguments: vec![Expression::DataRef(name("/data/x"))],
                    },
                    Expression::DataRef(name("/data/y")),
                ],
            }
        );
    }

    #[test]
    fn parse_expression_whitespace_ignored() {
        let spaced = Expression::parse(" /fn/f ( /fn/g ( /data/x ) , /data/y ) ").unwrap();
        let tight = Expression::parse("/fn/f(/fn/g(/data/x),/data/y)").unwrap();
        assert_eq!(spaced, tight);
    }

    #[test]
    fn parse_expression_errors_carry_offsets() {
        let e = Expression::parse("/fn/add(/a,").unwrap_err();
        assert_eq!(e.offset, 11);
        let e = Expression::parse("/fn/add(/a,)").unwrap_err();
        assert_eq!(e.offset, 11);
        assert!(e.message.contains("empty argument"));
        let e = Expression::parse("/a/b junk").unwrap_err();
        assert!(e.message.contains("trailing garbage"));
        assert!(Expression::parse("/fn/f(/a))").is_err());
        assert!(Expression::parse("").is_err());
    }

    #[test]
    fn print_expression_examples() {
        assert_eq!(Expression::DataRef(name("/data/a")).text(), "/data/a");
        let call = Expression::Call {
            function: name("/fn/add"),
            arguments: vec![
                Expression::DataRef(name("/data/a")),
                Expression::DataRef(name("/data/b")),
            ],
        };
        assert_eq!(call.text(), "/fn/add(/data/a,/data/b)");
        let nullary = Expression::Call {
            function: name("/fn/now"),
            arguments: vec![],
        };
        assert_eq!(nullary.text(), "/fn/now()");
        assert_eq!(Expression::parse("/fn/now()").unwrap(), nullary);
    }

    #[test]
    fn decompose_data_ref_has_no_subtasks() {
        let t = Expression::DataRef(name("/data/a")).decompose();
        assert!(t.subtasks.is_empty());
    }

    #[test]
    fn decompose_single_call() {
        let e = Expression::parse("/fn/f(/data/a)").unwrap();
        let t = e.decompose();
        assert_eq!(t.subtasks, vec![e]);
    }

    #[test]
    fn decompose_post_order() {
        let e = Expression::parse("/fn/f(/fn/g(/data/a),/data/b)").unwrap();
        let g = Expression::parse("/fn/g(/data/a)").unwrap();
        let t = e.decompose();
        assert_eq!(t.subtasks, vec![g, e]);
    }

    // Test-only oracle: post-order traversal written independently of
    // `decompose`, using an explicit stack instead of recursion.
    fn post_order_calls_oracle(root: &Expression) -> Vec<Expression> {
        let mut out = Vec::new();
        let mut stack = vec![(root, false)];
        while let Some((e, visited)) = stack.pop() {
            match e {
                Expression::DataRef(_) => {}
                Expression::Call { arguments, .. } => {
                    if visited {
                        out.push(e.clone());
                    } else {
                        stack.push((e, true));
                        for a in arguments.iter().rev() {
                            stack.push((a, false));
                        }
                    }
                }
            }
        }
        out
    }

    fn arb_name() -> impl Strategy<Value = Name> {
        proptest::collection::vec("[a-z][a-z0-9_]{0,5}", 1..4)
            .prop_map(|cs| Name::new(cs).unwrap())
    }

    fn arb_expr() -> impl Strategy<Value = Expression> {
        let leaf = arb_name().prop_map(Expression::DataRef);
        leaf.prop_recursive(6, 64, 4, |inner| {
            (arb_name(), proptest::collection::vec(inner, 0..=4)).prop_map(
                |(function, arguments)| Expression::Call {
                    function,
                    arguments,
                },
            )
        })
    }

    proptest! {
        #[test]
        fn roundtrip_print_then_parse(e in arb_expr()) {
            let text = e.text();
            let back = Expression::parse(&text).unwrap();
            prop_assert_eq!(back, e);
        }

        #[test]
        fn name_order_matches_text_order(a in arb_name(), b in arb_name()) {
            // For alphanumeric components the component-wise order and the
            // canonical-text order coincide.
            prop_assert_eq!(a.cmp(&b), a.text().cmp(&b.text()));
        }

        #[test]
        fn subtask_count_equals_call_count(e in arb_expr()) {
            prop_assert_eq!(e.decompose().subtasks.len(), e.call_count());
        }

        #[test]
        fn decompose_matches_post_order_oracle(e in arb_expr()) {
            prop_assert_eq!(e.decompose().subtasks, post_order_calls_oracle(&e));
        }
    }
}
