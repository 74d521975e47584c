//! Program AST, its S-expression text form, and the structural queries and
//! edits used by the search.
//!
//! Grammar:
//!
//! ```text
//! program = action | '(' 'do' action* ')'
//! action  = '(' action-id expr ')'
//! expr    = '(' function expr* ')' | variable | parameter | number | '[' number* ']'
//! ```
//!
//! Parameters are identifiers of the form `p<digits>` (or `_t<digits>` for
//! the optimizer's temporaries); their dimension is inferred from context.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::library::FunctionLibrary;
use crate::trace::{ExecPolicy, Schema};

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    ActionCall { name: String, arg: Box<Expr> },
    FuncCall { func: String, args: Vec<Expr> },
    VarRef { name: String, dim: usize },
    ParamRef { name: String, dim: usize },
    ConstVec(Vec<f64>),
}

/// Location of a node: which body expression, then child indices starting
/// below the action root (the action argument is child 0).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodePath {
    pub body: usize,
    pub route: Vec<usize>,
}

impl NodePath {
    pub fn root(body: usize) -> Self {
        Self { body, route: Vec::new() }
    }

    pub fn child(&self, i: usize) -> Self {
        let mut route = self.route.clone();
        route.push(i);
        Self { body: self.body, route }
    }
}

impl fmt::Display for NodePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.body)?;
        for i in &self.route {
            write!(f, ".{i}")?;
        }
        Ok(())
    }
}

/// Something search can replace: an AST leaf, or the slot after the last
/// body expression where a new action call can be appended.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LeafPath {
    Node(NodePath),
    BodySlot,
}

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("syntax error at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unknown identifier `{name}` at byte {pos}")]
    UnknownIdentifier { pos: usize, name: String },
    #[error(transparent)]
    Type(#[from] TypeError),
}

#[derive(Debug, Error, PartialEq)]
#[error("type error at {path}: {msg}")]
pub struct TypeError {
    pub path: NodePath,
    pub msg: String,
}

#[derive(Debug, Error, PartialEq)]
pub enum EditError {
    #[error("no leaf at {0}")]
    InvalidPath(NodePath),
    #[error(transparent)]
    Type(#[from] TypeError),
}

impl Expr {
    pub fn var(name: &str, dim: usize) -> Self {
        Self::VarRef { name: name.into(), dim }
    }

    pub fn param(name: &str, dim: usize) -> Self {
        Self::ParamRef { name: name.into(), dim }
    }

    pub fn call(func: &str, args: Vec<Expr>) -> Self {
        Self::FuncCall { func: func.into(), args }
    }

    pub fn action(name: &str, arg: Expr) -> Self {
        Self::ActionCall { name: name.into(), arg: Box::new(arg) }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, Self::VarRef { .. } | Self::ParamRef { .. } | Self::ConstVec(_))
    }

    pub fn children(&self) -> &[Expr] {
        match self {
            Self::ActionCall { arg, .. } => std::slice::from_ref(arg.as_ref()),
            Self::FuncCall { args, .. } => args,
            _ => &[],
        }
    }

    fn children_mut(&mut self) -> &mut [Expr] {
        match self {
            Self::ActionCall { arg, .. } => std::slice::from_mut(arg.as_mut()),
            Self::FuncCall { args, .. } => args,
            _ => &mut [],
        }
    }

    /// Edge count of the longest path down to a leaf.
    pub fn depth(&self) -> usize {
        self.children().iter().map(|c| c.depth() + 1).max().unwrap_or(0)
    }

    pub fn at(&self, route: &[usize]) -> Option<&Expr> {
        match route.split_first() {
            None => Some(self),
            Some((&i, rest)) => self.children().get(i)?.at(rest),
        }
    }

    fn at_mut(&mut self, route: &[usize]) -> Option<&mut Expr> {
        match route.split_first() {
            None => Some(self),
            Some((&i, rest)) => self.children_mut().get_mut(i)?.at_mut(rest),
        }
    }

    fn visit<'a>(&'a self, route: &mut Vec<usize>, f: &mut impl FnMut(&[usize], &'a Expr)) {
        f(route, self);
        for (i, c) in self.children().iter().enumerate() {
            route.push(i);
            c.visit(route, f);
            route.pop();
        }
    }

    fn visit_mut(&mut self, f: &mut impl FnMut(&mut Expr)) {
        f(self);
        for c in self.children_mut() {
            c.visit_mut(f);
        }
    }

    /// Key identifying the structure up to argument order of commutative
    /// functions and parameter naming.
    fn canonical(&self, lib: &FunctionLibrary) -> String {
        match self {
            Self::ActionCall { name, arg } => format!("({name} {})", arg.canonical(lib)),
            Self::FuncCall { func, args } => {
                let mut keys: Vec<String> = args.iter().map(|a| a.canonical(lib)).collect();
                if lib.get(func).is_some_and(|f| f.is_commutative()) {
                    keys.sort();
                }
                format!("({func} {})", keys.join(" "))
            }
            Self::VarRef { name, .. } => name.clone(),
            Self::ParamRef { dim, .. } => format!("?{dim}"),
            Self::ConstVec(v) => format_vec(v),
        }
    }
}

fn format_num(x: f64) -> String {
    format!("{x:?}")
}

fn format_vec(v: &[f64]) -> String {
    if v.len() == 1 {
        return format_num(v[0]);
    }
    let parts: Vec<String> = v.iter().map(|&x| format_num(x)).collect();
    format!("[{}]", parts.join(" "))
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ActionCall { name, arg } => write!(f, "({name} {arg})"),
            Self::FuncCall { func, args } => {
                write!(f, "({func}")?;
                for a in args {
                    write!(f, " {a}")?;
                }
                write!(f, ")")
            }
            Self::VarRef { name, .. } | Self::ParamRef { name, .. } => f.write_str(name),
            Self::ConstVec(v) => f.write_str(&format_vec(v)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    pub body: Vec<Expr>,
    pub params: BTreeMap<String, Vec<f64>>,
    pub policy: ExecPolicy,
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.body.as_slice() {
            [single] => write!(f, "{single}"),
            body => {
                write!(f, "(do")?;
                for e in body {
                    write!(f, " {e}")?;
                }
                write!(f, ")")
            }
        }
    }
}

impl Program {
    pub fn empty(policy: ExecPolicy) -> Self {
        Self { body: Vec::new(), params: BTreeMap::new(), policy }
    }

    pub fn new(body: Vec<Expr>, params: BTreeMap<String, Vec<f64>>, policy: ExecPolicy) -> Self {
        Self { body, params, policy }
    }

    pub fn is_empty(&self) -> bool {
        self.body.is_empty()
    }

    pub fn with_param(mut self, name: &str, value: Vec<f64>) -> Self {
        self.params.insert(name.into(), value);
        self
    }

    /// Longest root-to-leaf edge count, action calls being roots.
    pub fn depth(&self) -> usize {
        self.body.iter().map(Expr::depth).max().unwrap_or(0)
    }

    pub fn at(&self, path: &NodePath) -> Option<&Expr> {
        self.body.get(path.body)?.at(&path.route)
    }

    /// Every leaf with its path, in depth-first order.
    pub fn leaves(&self) -> Vec<(NodePath, &Expr)> {
        let mut out = Vec::new();
        for (b, e) in self.body.iter().enumerate() {
            let mut route = Vec::new();
            e.visit(&mut route, &mut |r, node| {
                if node.is_leaf() {
                    out.push((NodePath { body: b, route: r.to_vec() }, node));
                }
            });
        }
        out
    }

    /// Replaceable positions: all leaves, plus the body slot when a new
    /// action call could be appended under the execution policy.
    pub fn leaf_slots(&self) -> Vec<LeafPath> {
        let mut out: Vec<LeafPath> =
            self.leaves().into_iter().map(|(p, _)| LeafPath::Node(p)).collect();
        if self.body.is_empty() || self.policy == ExecPolicy::SinglePass {
            out.push(LeafPath::BodySlot);
        }
        out
    }

    /// Parameter names in first-occurrence depth-first order.
    pub fn param_names(&self) -> Vec<&str> {
        let mut names: Vec<&str> = Vec::new();
        for e in &self.body {
            e.visit(&mut Vec::new(), &mut |_, node| {
                if let Expr::ParamRef { name, .. } = node {
                    if !names.contains(&name.as_str()) {
                        names.push(name);
                    }
                }
            });
        }
        names
    }

    /// Number of distinct parameters referenced by the body.
    pub fn param_count(&self) -> usize {
        self.param_names().len()
    }

    /// Number of variable-reference occurrences.
    pub fn var_count(&self) -> usize {
        self.leaves()
            .iter()
            .filter(|(_, e)| matches!(e, Expr::VarRef { .. }))
            .count()
    }

    /// Replace the node at `path` without renaming anything. Returns the
    /// previous node.
    pub fn set_node(&mut self, path: &NodePath, node: Expr) -> Option<Expr> {
        let slot = self.body.get_mut(path.body)?.at_mut(&path.route)?;
        Some(std::mem::replace(slot, node))
    }

    /// New program with the leaf at `path` replaced by `subtree`. Parameter
    /// values for the subtree come from `subtree_params`; afterwards all
    /// parameters are renamed `p0, p1, …` in depth-first order.
    pub fn replace_leaf(
        &self,
        path: &NodePath,
        subtree: Expr,
        subtree_params: &BTreeMap<String, Vec<f64>>,
        schema: &Schema,
        lib: &FunctionLibrary,
    ) -> Result<Program, EditError> {
        let old = self.at(path).ok_or_else(|| EditError::InvalidPath(path.clone()))?;
        if !old.is_leaf() || path.route.is_empty() {
            return Err(EditError::InvalidPath(path.clone()));
        }
        let expected = leaf_dim(old, &self.params);
        let mut sub = subtree;
        let mut values = BTreeMap::new();
        // Move subtree parameters into a namespace that cannot collide.
        sub.visit_mut(&mut |n| {
            if let Expr::ParamRef { name, .. } = n {
                let fresh = format!("__new_{name}");
                if let Some(v) = subtree_params.get(name.as_str()) {
                    values.insert(fresh.clone(), v.clone());
                }
                *name = fresh;
            }
        });
        let got = check_expr(&sub, expected, &values, schema, lib, path)?;
        if got != expected {
            return Err(TypeError {
                path: path.clone(),
                msg: format!("subtree has dimension {got}, leaf expects {expected}"),
            }
            .into());
        }
        let mut next = self.clone();
        next.params.extend(values);
        next.set_node(path, sub);
        next.renumber_params();
        Ok(next)
    }

    /// Append an action call (search's body-slot expansion).
    pub fn push_action(
        &self,
        action: Expr,
        action_params: &BTreeMap<String, Vec<f64>>,
        schema: &Schema,
        lib: &FunctionLibrary,
    ) -> Result<Program, EditError> {
        let mut next = self.clone();
        let mut action = action;
        action.visit_mut(&mut |n| {
            if let Expr::ParamRef { name, .. } = n {
                let fresh = format!("__new_{name}");
                if let Some(v) = action_params.get(name.as_str()) {
                    next.params.insert(fresh.clone(), v.clone());
                }
                *name = fresh;
            }
        });
        next.body.push(action);
        next.typecheck(schema, lib)?;
        next.renumber_params();
        Ok(next)
    }

    /// Rename parameters `p0, p1, …` by first occurrence and drop values
    /// of parameters no longer referenced.
    pub fn renumber_params(&mut self) {
        let order: Vec<String> = self.param_names().into_iter().map(String::from).collect();
        let rename: BTreeMap<String, String> = order
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), format!("p{i}")))
            .collect();
        let mut params = BTreeMap::new();
        for (old, new) in &rename {
            if let Some(v) = self.params.get(old) {
                params.insert(new.clone(), v.clone());
            }
        }
        for e in &mut self.body {
            e.visit_mut(&mut |n| {
                if let Expr::ParamRef { name, .. } = n {
                    *name = rename[name.as_str()].clone();
                }
            });
        }
        self.params = params;
    }

    /// Same program with every parameter replaced by its constant value.
    pub fn inlined(&self) -> Program {
        let mut out = self.clone();
        for e in &mut out.body {
            e.visit_mut(&mut |n| {
                if let Expr::ParamRef { name, .. } = n {
                    if let Some(v) = self.params.get(name.as_str()) {
                        *n = Expr::ConstVec(v.clone());
                    }
                }
            });
        }
        out.params.clear();
        out
    }

    /// Deduplication key: structure with commutative arguments sorted and
    /// parameters anonymised.
    pub fn canonical_key(&self, lib: &FunctionLibrary) -> String {
        let parts: Vec<String> = self.body.iter().map(|e| e.canonical(lib)).collect();
        format!("{:?}|{}", self.policy, parts.join(" "))
    }

    pub fn typecheck(&self, schema: &Schema, lib: &FunctionLibrary) -> Result<(), TypeError> {
        for (i, e) in self.body.iter().enumerate() {
            let path = NodePath::root(i);
            let Expr::ActionCall { name, arg } = e else {
                return Err(TypeError { path, msg: "body expressions must be action calls".into() });
            };
            let Some(dim) = schema.action_dim(name) else {
                return Err(TypeError { path, msg: format!("undeclared action `{name}`") });
            };
            let got = check_expr(arg, dim, &self.params, schema, lib, &path.child(0))?;
            if got != dim {
                return Err(TypeError {
                    path: path.child(0),
                    msg: format!("`{name}` takes dimension {dim}, argument has {got}"),
                });
            }
        }
        Ok(())
    }

    pub fn parse(
        text: &str,
        schema: &Schema,
        lib: &FunctionLibrary,
        policy: Option<ExecPolicy>,
    ) -> Result<Program, ParseError> {
        let tokens = tokenize(text)?;
        let mut p = Parser { tokens: &tokens, pos: 0, end: text.len() };
        let sexp = p.sexp()?;
        if let Some(tok) = p.tokens.get(p.pos) {
            return Err(ParseError::Syntax { pos: tok.pos, msg: "trailing input".into() });
        }
        let forms = match &sexp {
            Sexp::List(items, _) if matches!(items.first(), Some(Sexp::Atom(h, _)) if h == "do") => {
                items[1..].to_vec()
            }
            other => vec![other.clone()],
        };
        let mut body = Vec::new();
        for form in &forms {
            body.push(lower_action(form, schema, lib)?);
        }
        let mut params = BTreeMap::new();
        for (i, e) in body.iter().enumerate() {
            let Expr::ActionCall { name, arg } = e else { unreachable!() };
            let dim = schema.action_dim(name).expect("lowered actions are declared");
            infer_params(arg, dim, &mut params, lib, &NodePath::root(i).child(0))?;
        }
        let mut body = body;
        for e in &mut body {
            e.visit_mut(&mut |n| {
                if let Expr::ParamRef { name, dim } = n {
                    *dim = params[name.as_str()];
                }
            });
        }
        let program = Program {
            body,
            params: params.into_iter().map(|(k, d)| (k, vec![0.0; d])).collect(),
            policy: policy.unwrap_or_else(|| schema.default_policy()),
        };
        program.typecheck(schema, lib)?;
        Ok(program)
    }
}

fn leaf_dim(e: &Expr, params: &BTreeMap<String, Vec<f64>>) -> usize {
    match e {
        Expr::VarRef { dim, .. } => *dim,
        Expr::ParamRef { name, dim } => params.get(name).map_or(*dim, Vec::len),
        Expr::ConstVec(v) => v.len(),
        _ => unreachable!("not a leaf"),
    }
}

/// Check `e` against an expected output dimension; returns the actual
/// dimension.
fn check_expr(
    e: &Expr,
    expected: usize,
    params: &BTreeMap<String, Vec<f64>>,
    schema: &Schema,
    lib: &FunctionLibrary,
    path: &NodePath,
) -> Result<usize, TypeError> {
    let err = |msg: String| TypeError { path: path.clone(), msg };
    match e {
        Expr::ActionCall { name, .. } => Err(err(format!("action `{name}` used as a value"))),
        Expr::VarRef { name, dim } => match schema.var_dim(name) {
            None => Err(err(format!("undeclared variable `{name}`"))),
            Some(d) if d != *dim => Err(err(format!("`{name}` has dimension {d}, not {dim}"))),
            Some(d) => Ok(d),
        },
        Expr::ParamRef { name, dim } => match params.get(name) {
            None => Err(err(format!("parameter `{name}` has no value"))),
            Some(v) if v.len() != *dim => {
                Err(err(format!("parameter `{name}` holds {} values, declared {dim}", v.len())))
            }
            Some(_) => Ok(*dim),
        },
        Expr::ConstVec(v) if v.is_empty() => Err(err("empty constant".into())),
        Expr::ConstVec(v) => Ok(v.len()),
        Expr::FuncCall { func, args } => {
            let f = lib.get(func).ok_or_else(|| err(format!("unknown function `{func}`")))?;
            if args.len() != f.arity() {
                return Err(err(format!("`{func}` takes {} arguments, got {}", f.arity(), args.len())));
            }
            let known: Vec<Option<usize>> = args.iter().map(|a| synth(a, params, schema, lib)).collect();
            let dims = f
                .infer_arg_dims(expected, &known)
                .ok_or_else(|| err(format!("`{func}` cannot produce dimension {expected} here")))?;
            let mut actual = Vec::with_capacity(args.len());
            for (i, (a, &d)) in args.iter().zip(&dims).enumerate() {
                actual.push(check_expr(a, d, params, schema, lib, &path.child(i))?);
            }
            f.result_dim(&actual)
                .ok_or_else(|| err(format!("`{func}` arguments have incompatible dimensions {actual:?}")))
        }
    }
}

/// Bottom-up dimension when it is determined without context.
fn synth(
    e: &Expr,
    params: &BTreeMap<String, Vec<f64>>,
    schema: &Schema,
    lib: &FunctionLibrary,
) -> Option<usize> {
    match e {
        Expr::VarRef { name, .. } => schema.var_dim(name),
        Expr::ParamRef { name, .. } => params.get(name).map(Vec::len),
        Expr::ConstVec(v) => Some(v.len()),
        Expr::FuncCall { func, args } => {
            let dims: Option<Vec<usize>> = args.iter().map(|a| synth(a, params, schema, lib)).collect();
            lib.get(func)?.result_dim(&dims?)
        }
        Expr::ActionCall { .. } => None,
    }
}

/// Assign dimensions to freshly parsed parameters from their context.
fn infer_params(
    e: &Expr,
    expected: usize,
    dims: &mut BTreeMap<String, usize>,
    lib: &FunctionLibrary,
    path: &NodePath,
) -> Result<(), TypeError> {
    let err = |msg: String| TypeError { path: path.clone(), msg };
    match e {
        Expr::ParamRef { name, .. } => match dims.get(name) {
            Some(&d) if d != expected => {
                Err(err(format!("parameter `{name}` used with dimensions {d} and {expected}")))
            }
            _ => {
                dims.insert(name.clone(), expected);
                Ok(())
            }
        },
        Expr::FuncCall { func, args } => {
            let f = lib.get(func).ok_or_else(|| err(format!("unknown function `{func}`")))?;
            let known: Vec<Option<usize>> = args.iter().map(|a| synth_dims(a, dims, lib)).collect();
            let arg_dims = f
                .infer_arg_dims(expected, &known)
                .ok_or_else(|| err(format!("`{func}` cannot produce dimension {expected} here")))?;
            for (i, (a, d)) in args.iter().zip(arg_dims).enumerate() {
                infer_params(a, d, dims, lib, &path.child(i))?;
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

fn synth_dims(e: &Expr, dims: &BTreeMap<String, usize>, lib: &FunctionLibrary) -> Option<usize> {
    match e {
        Expr::VarRef { dim, .. } => Some(*dim),
        Expr::ParamRef { name, .. } => dims.get(name).copied(),
        Expr::ConstVec(v) => Some(v.len()),
        Expr::FuncCall { func, args } => {
            let d: Option<Vec<usize>> = args.iter().map(|a| synth_dims(a, dims, lib)).collect();
            lib.get(func)?.result_dim(&d?)
        }
        Expr::ActionCall { .. } => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Open,
    Close,
    OpenBracket,
    CloseBracket,
    Atom(String),
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    pos: usize,
}

fn tokenize(text: &str) -> Result<Vec<Token>, ParseError> {
    let mut out = Vec::new();
    let mut chars = text.char_indices().peekable();
    while let Some(&(pos, c)) = chars.peek() {
        let tok = match c {
            c if c.is_whitespace() => {
                chars.next();
                continue;
            }
            '(' => Tok::Open,
            ')' => Tok::Close,
            '[' => Tok::OpenBracket,
            ']' => Tok::CloseBracket,
            _ => {
                let mut end = pos;
                while let Some(&(i, c)) = chars.peek() {
                    if c.is_whitespace() || "()[]".contains(c) {
                        break;
                    }
                    end = i + c.len_utf8();
                    chars.next();
                }
                out.push(Token { tok: Tok::Atom(text[pos..end].to_string()), pos });
                continue;
            }
        };
        chars.next();
        out.push(Token { tok, pos });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
enum Sexp {
    Atom(String, usize),
    List(Vec<Sexp>, usize),
    Vector(Vec<f64>, usize),
}

impl Sexp {
    fn pos(&self) -> usize {
        match self {
            Sexp::Atom(_, p) | Sexp::List(_, p) | Sexp::Vector(_, p) => *p,
        }
    }
}

struct Parser<'a> {
    tokens: &'a [Token],
    pos: usize,
    end: usize,
}

impl Parser<'_> {
    fn next(&mut self) -> Result<&Token, ParseError> {
        let tok = self.tokens.get(self.pos).ok_or(ParseError::Syntax {
            pos: self.end,
            msg: "unexpected end of input".into(),
        })?;
        self.pos += 1;
        Ok(tok)
    }

    fn sexp(&mut self) -> Result<Sexp, ParseError> {
        let Token { tok, pos } = self.next()?.clone();
        match tok {
            Tok::Atom(a) => Ok(Sexp::Atom(a, pos)),
            Tok::Open => {
                let mut items = Vec::new();
                loop {
                    match self.tokens.get(self.pos).map(|t| &t.tok) {
                        Some(Tok::Close) => {
                            self.pos += 1;
                            return Ok(Sexp::List(items, pos));
                        }
                        Some(_) => items.push(self.sexp()?),
                        None => {
                            return Err(ParseError::Syntax { pos, msg: "unclosed `(`".into() })
                        }
                    }
                }
            }
            Tok::OpenBracket => {
                let mut values = Vec::new();
                loop {
                    let Token { tok, pos: p } = self.next()?.clone();
                    match tok {
                        Tok::CloseBracket => return Ok(Sexp::Vector(values, pos)),
                        Tok::Atom(a) => values.push(parse_number(&a).ok_or(ParseError::Syntax {
                            pos: p,
                            msg: format!("expected a number, found `{a}`"),
                        })?),
                        _ => {
                            return Err(ParseError::Syntax {
                                pos: p,
                                msg: "vectors may only contain numbers".into(),
                            })
                        }
                    }
                }
            }
            Tok::Close | Tok::CloseBracket => {
                Err(ParseError::Syntax { pos, msg: "unexpected closing bracket".into() })
            }
        }
    }
}

fn parse_number(a: &str) -> Option<f64> {
    let digits = a.strip_prefix(['-', '+']).unwrap_or(a);
    if !digits.starts_with(|c: char| c.is_ascii_digit() || c == '.') {
        return None;
    }
    a.parse().ok()
}

fn is_param_name(a: &str) -> bool {
    let digits = a.strip_prefix('p').or_else(|| a.strip_prefix("_t"));
    digits.is_some_and(|d| !d.is_empty() && d.chars().all(|c| c.is_ascii_digit()))
}

fn lower_action(s: &Sexp, schema: &Schema, lib: &FunctionLibrary) -> Result<Expr, ParseError> {
    let Sexp::List(items, pos) = s else {
        return Err(ParseError::Syntax { pos: s.pos(), msg: "expected an action call".into() });
    };
    match items.as_slice() {
        [Sexp::Atom(head, hpos), arg] => {
            if schema.action_dim(head).is_none() {
                return Err(ParseError::UnknownIdentifier { pos: *hpos, name: head.clone() });
            }
            Ok(Expr::action(head, lower_expr(arg, schema, lib)?))
        }
        _ => Err(ParseError::Syntax {
            pos: *pos,
            msg: "an action call has the form (action argument)".into(),
        }),
    }
}

fn lower_expr(s: &Sexp, schema: &Schema, lib: &FunctionLibrary) -> Result<Expr, ParseError> {
    match s {
        Sexp::Vector(v, pos) if v.is_empty() => {
            Err(ParseError::Syntax { pos: *pos, msg: "empty vector".into() })
        }
        Sexp::Vector(v, _) => Ok(Expr::ConstVec(v.clone())),
        Sexp::Atom(a, pos) => {
            if let Some(x) = parse_number(a) {
                Ok(Expr::ConstVec(vec![x]))
            } else if let Some(dim) = schema.var_dim(a) {
                Ok(Expr::var(a, dim))
            } else if is_param_name(a) {
                Ok(Expr::param(a, 0))
            } else {
                Err(ParseError::UnknownIdentifier { pos: *pos, name: a.clone() })
            }
        }
        Sexp::List(items, pos) => {
            let Some((Sexp::Atom(head, hpos), rest)) = items.split_first() else {
                return Err(ParseError::Syntax { pos: *pos, msg: "expected a function name".into() });
            };
            let Some(f) = lib.get(head) else {
                return Err(ParseError::UnknownIdentifier { pos: *hpos, name: head.clone() });
            };
            if rest.len() != f.arity() {
                return Err(ParseError::Syntax {
                    pos: *pos,
                    msg: format!("`{head}` takes {} arguments, got {}", f.arity(), rest.len()),
                });
            }
            let args = rest.iter().map(|a| lower_expr(a, schema, lib)).collect::<Result<_, _>>()?;
            Ok(Expr::call(f.symbol(), args))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn physics() -> Schema {
        Schema::new(
            [("x".to_string(), 1), ("v".to_string(), 1)],
            [("accel".to_string(), 1)],
        )
    }

    fn demo() -> Schema {
        Schema::new(
            [("loc".to_string(), 2), ("c1".to_string(), 2)],
            [("pick".to_string(), 2), ("place".to_string(), 2)],
        )
    }

    fn parse(text: &str, schema: &Schema) -> Result<Program, ParseError> {
        Program::parse(text, schema, &FunctionLibrary::standard(), None)
    }

    #[test]
    fn parses_vector_offset() {
        let p = parse("(place (+ loc [-0.05 1.17]))", &demo()).unwrap();
        assert_eq!(
            p.body[0],
            Expr::action(
                "place",
                Expr::call("+", vec![Expr::var("loc", 2), Expr::ConstVec(vec![-0.05, 1.17])])
            )
        );
    }

    #[test]
    fn parses_single_leaf() {
        let p = parse("(accel x)", &physics()).unwrap();
        assert_eq!(p.body, vec![Expr::action("accel", Expr::var("x", 1))]);
        assert_eq!(p.policy, ExecPolicy::RepeatBody);
    }

    #[test]
    fn registers_parameters() {
        let text = "(accel (+ (* p0 x) (* p1 v)))";
        let p = parse(text, &physics()).unwrap();
        assert_eq!(p.params.len(), 2);
        assert_eq!(p.params["p0"], vec![0.0]);
        assert_eq!(p.to_string(), text);
        assert_eq!(parse(&p.to_string(), &physics()).unwrap(), p);
    }

    #[test]
    fn infers_vector_parameter_dims() {
        let p = parse("(do (pick c1) (place (+ loc p0)))", &demo()).unwrap();
        assert_eq!(p.params["p0"].len(), 2);
        assert_eq!(p.policy, ExecPolicy::SinglePass);
        let q = parse("(pick (* p0 p1))", &demo()).unwrap();
        assert_eq!(q.params["p0"].len(), 1);
        assert_eq!(q.params["p1"].len(), 2);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(parse("(accel x", &physics()), Err(ParseError::Syntax { .. })));
        assert!(matches!(
            parse("(accel y)", &physics()),
            Err(ParseError::UnknownIdentifier { pos: 7, .. })
        ));
        assert!(matches!(
            parse("(jump x)", &physics()),
            Err(ParseError::UnknownIdentifier { .. })
        ));
        assert!(matches!(parse("(accel (+ x))", &physics()), Err(ParseError::Syntax { .. })));
        assert!(matches!(parse("(accel x) x", &physics()), Err(ParseError::Syntax { .. })));
        assert!(matches!(parse("(pick (+ loc 3.0))", &demo()), Err(ParseError::Type(_))));
    }

    #[test]
    fn depth_convention() {
        assert_eq!(Program::empty(ExecPolicy::RepeatBody).depth(), 0);
        assert_eq!(parse("(accel x)", &physics()).unwrap().depth(), 1);
        assert_eq!(parse("(accel (+ (* p0 x) (* p1 v)))", &physics()).unwrap().depth(), 3);
    }

    #[test]
    fn leaves_and_slots() {
        let p = parse("(accel x)", &physics()).unwrap();
        let leaves = p.leaves();
        assert_eq!(leaves.len(), 1);
        assert_eq!(leaves[0].0, NodePath { body: 0, route: vec![0] });
        assert_eq!(p.leaf_slots().len(), 1);

        let q = parse("(accel (+ p0 x))", &physics()).unwrap();
        let names: Vec<String> = q.leaves().iter().map(|(_, e)| e.to_string()).collect();
        assert_eq!(names, ["p0", "x"]);

        let empty = Program::empty(ExecPolicy::RepeatBody);
        assert!(empty.leaves().is_empty());
        assert_eq!(empty.leaf_slots(), vec![LeafPath::BodySlot]);
    }

    #[test]
    fn replace_leaf_examples() {
        let s = physics();
        let lib = FunctionLibrary::standard();
        let p = parse("(accel x)", &s).unwrap();
        let path = NodePath { body: 0, route: vec![0] };
        let sub = Expr::call("*", vec![Expr::param("q", 1), Expr::var("x", 1)]);
        let vals = BTreeMap::from([("q".to_string(), vec![0.5])]);
        let q = p.replace_leaf(&path, sub, &vals, &s, &lib).unwrap();
        assert_eq!(q.to_string(), "(accel (* p0 x))");
        assert_eq!(q.params["p0"], vec![0.5]);
        assert_eq!(p.to_string(), "(accel x)");

        let path = NodePath { body: 0, route: vec![0, 0] };
        let sub = Expr::call("+", vec![Expr::param("p0", 1), Expr::var("v", 1)]);
        let vals = BTreeMap::from([("p0".to_string(), vec![1.0])]);
        let r = q.replace_leaf(&path, sub, &vals, &s, &lib).unwrap();
        assert_eq!(r.to_string(), "(accel (* (+ p0 v) x))");
        assert_eq!(r.params.len(), 1);
        assert_eq!(r.params["p0"], vec![1.0]);

        let bad = Expr::ConstVec(vec![1.0, 2.0]);
        assert!(matches!(
            q.replace_leaf(&path, bad, &BTreeMap::new(), &s, &lib),
            Err(EditError::Type(_))
        ));
        let nowhere = NodePath { body: 0, route: vec![5] };
        assert!(matches!(
            q.replace_leaf(&nowhere, Expr::var("x", 1), &BTreeMap::new(), &s, &lib),
            Err(EditError::InvalidPath(_))
        ));
    }

    #[test]
    fn typecheck_examples() {
        let lib = FunctionLibrary::standard();
        let s = physics();
        let ok = Program::new(
            vec![Expr::action("accel", Expr::call("+", vec![Expr::var("x", 1), Expr::var("v", 1)]))],
            BTreeMap::new(),
            ExecPolicy::RepeatBody,
        );
        assert!(ok.typecheck(&s, &lib).is_ok());

        let bad = Program::new(
            vec![Expr::action(
                "pick",
                Expr::call("+", vec![Expr::var("loc", 2), Expr::ConstVec(vec![3.0])]),
            )],
            BTreeMap::new(),
            ExecPolicy::SinglePass,
        );
        let err = bad.typecheck(&demo(), &lib).unwrap_err();
        assert_eq!(err.path, NodePath { body: 0, route: vec![0] });

        let paddle = Schema::new([("y".to_string(), 1)], [("move".to_string(), 1)]);
        let p = Program::parse("(move (* p0 y))", &paddle, &lib, None).unwrap();
        assert!(p.typecheck(&paddle, &lib).is_ok());
    }

    #[test]
    fn canonical_key_ignores_commutative_order_and_param_names() {
        let lib = FunctionLibrary::standard();
        let s = physics();
        let a = parse("(accel (+ (* p0 x) (* p1 v)))", &s).unwrap();
        let b = parse("(accel (+ (* v p0) (* p1 x)))", &s).unwrap();
        let c = parse("(accel (- (* p0 x) (* p1 v)))", &s).unwrap();
        let d = parse("(accel (- (* p1 v) (* p0 x)))", &s).unwrap();
        assert_eq!(a.canonical_key(&lib), b.canonical_key(&lib));
        assert_ne!(c.canonical_key(&lib), d.canonical_key(&lib));
    }

    #[test]
    fn inlining_prints_values() {
        let p = parse("(accel (* p0 x))", &physics()).unwrap().with_param("p0", vec![-9.8]);
        assert_eq!(p.inlined().to_string(), "(accel (* -9.8 x))");
        let q = parse("(place (+ loc p0))", &demo()).unwrap().with_param("p0", vec![-0.05, 1.17]);
        assert_eq!(q.inlined().to_string(), "(place (+ loc [-0.05 1.17]))");
        assert_eq!(parse(&q.inlined().to_string(), &demo()).unwrap(), q.inlined());
    }

    fn arb_expr(depth: u32) -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            Just(Expr::var("x", 1)),
            Just(Expr::var("v", 1)),
            (0..4usize).prop_map(|i| Expr::param(&format!("p{i}"), 1)),
            (-1e3..1e3f64).prop_map(|c| Expr::ConstVec(vec![c])),
        ];
        leaf.prop_recursive(depth, 32, 2, |inner| {
            (prop_oneof![Just("+"), Just("-"), Just("*")], inner.clone(), inner)
                .prop_map(|(f, a, b)| Expr::call(f, vec![a, b]))
        })
    }

    fn arb_program() -> impl Strategy<Value = Program> {
        (arb_expr(4), proptest::collection::vec(-5.0..5.0f64, 4)).prop_map(|(e, vals)| {
            let mut p = Program::new(vec![Expr::action("accel", e)], BTreeMap::new(), ExecPolicy::RepeatBody);
            for (i, v) in vals.into_iter().enumerate() {
                p.params.insert(format!("p{i}"), vec![v]);
            }
            let used: Vec<String> = p.param_names().into_iter().map(String::from).collect();
            p.params.retain(|k, _| used.contains(k));
            p
        })
    }

    proptest! {
        #[test]
        fn print_parse_round_trip(p in arb_program()) {
            let s = physics();
            let lib = FunctionLibrary::standard();
            let back = Program::parse(&p.to_string(), &s, &lib, None).unwrap();
            prop_assert_eq!(&back.body, &p.body);
            let inl = p.inlined();
            prop_assert_eq!(Program::parse(&inl.to_string(), &s, &lib, None).unwrap(), inl);
        }

        #[test]
        fn replace_leaf_grows_leaves_by_arity_minus_one(p in arb_program(), pick in any::<prop::sample::Index>(), f in 0..3usize) {
            let s = physics();
            let lib = FunctionLibrary::standard();
            let leaves = p.leaves();
            let (path, _) = &leaves[pick.index(leaves.len())];
            let func = ["+", "-", "*"][f];
            let sub = Expr::call(func, vec![Expr::param("a", 1), Expr::var("v", 1)]);
            let vals = BTreeMap::from([("a".to_string(), vec![0.3])]);
            let q = p.replace_leaf(path, sub, &vals, &s, &lib).unwrap();
            prop_assert_eq!(q.leaves().len(), leaves.len() + 1);
            prop_assert!(q.depth() == p.depth() || q.depth() == p.depth() + 1);
            prop_assert!(q.typecheck(&s, &lib).is_ok());
            let names = q.param_names();
            for (i, n) in names.iter().enumerate() {
                prop_assert_eq!(*n, format!("p{i}"));
            }
            prop_assert_eq!(q.params.len(), names.len());
        }
    }
}
