//! Java 8 lexical analysis with normalization and literal replacement.
//!
//! The lexer drops whitespace and comments, keeps every other lexical
//! token with its 1-based source line, and leaves literals intact.
//! [`replace_literals`] then collapses numeric literals into `<num_val>`
//! and string/char literals into `<str_val>`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SOC: &str = "<soc>";
pub const EOC: &str = "<eoc>";
pub const NUM_VAL: &str = "<num_val>";
pub const STR_VAL: &str = "<str_val>";

/// The four reserved meta-tokens.
pub const META_TOKENS: [&str; 4] = [SOC, EOC, NUM_VAL, STR_VAL];

pub fn is_meta(text: &str) -> bool {
    META_TOKENS.contains(&text)
}

const KEYWORDS: &[&str] = &[
    "abstract",
    "assert",
    "boolean",
    "break",
    "byte",
    "case",
    "catch",
    "char",
    "class",
    "const",
    "continue",
    "default",
    "do",
    "double",
    "else",
    "enum",
    "extends",
    "final",
    "finally",
    "float",
    "for",
    "goto",
    "if",
    "implements",
    "import",
    "instanceof",
    "int",
    "interface",
    "long",
    "native",
    "new",
    "package",
    "private",
    "protected",
    "public",
    "return",
    "short",
    "static",
    "strictfp",
    "super",
    "switch",
    "synchronized",
    "this",
    "throw",
    "throws",
    "transient",
    "try",
    "void",
    "volatile",
    "while",
    "true",
    "false",
    "null",
];

// Longest first so greedy matching picks `>>>=` over `>>`.
const OPERATORS: &[&str] = &[
    ">>>=", "<<=", ">>=", ">>>", "->", "++", "--", "&&", "||", "==", "!=", "<=", ">=", "+=", "-=", "*=", "/=", "&=",
    "|=", "^=", "%=", "<<", ">>", "=", ">", "<", "!", "~", "?", ":", "+", "-", "*", "/", "&", "|", "^", "%",
];

const SEPARATORS: &[&str] = &["...", "::", "(", ")", "{", "}", "[", "]", ";", ",", ".", "@"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LiteralKind {
    Integer,
    Float,
    Char,
    Str,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenKind {
    Keyword,
    Identifier,
    Operator,
    Separator,
    /// Present only between [`tokenize`] and [`replace_literals`].
    Literal(LiteralKind),
    Meta,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub kind: TokenKind,
    pub text: String,
    pub line: u32,
}

impl Token {
    pub fn new(kind: TokenKind, text: impl Into<String>, line: u32) -> Self {
        Token { kind, text: text.into(), line }
    }

    pub fn meta(text: &str, line: u32) -> Self {
        debug_assert!(is_meta(text));
        Token::new(TokenKind::Meta, text, line)
    }

    pub fn is_meta(&self, text: &str) -> bool {
        self.kind == TokenKind::Meta && self.text == text
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenStream {
    pub tokens: Vec<Token>,
    pub source_path: Option<String>,
}

impl TokenStream {
    pub fn new(tokens: Vec<Token>) -> Self {
        TokenStream { tokens, source_path: None }
    }

    pub fn with_source(mut self, path: impl Into<String>) -> Self {
        self.source_path = Some(path.into());
        self
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.text.as_str()).collect()
    }

    /// Space-separated token texts on a single line, the corpus file format.
    pub fn to_corpus_line(&self) -> String {
        self.texts().join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LexError {
    #[error("unterminated string literal at {line}:{column}")]
    UnterminatedString { line: u32, column: u32 },
    #[error("unterminated character literal at {line}:{column}")]
    UnterminatedChar { line: u32, column: u32 },
    #[error("unterminated block comment at {line}:{column}")]
    UnterminatedComment { line: u32, column: u32 },
    #[error("illegal character {ch:?} at {line}:{column}")]
    IllegalChar { ch: char, line: u32, column: u32 },
    #[error("reserved marker {text} in source at {line}:{column}")]
    ReservedMarker { text: String, line: u32, column: u32 },
}

impl LexError {
    pub fn location(&self) -> (u32, u32) {
        match *self {
            LexError::UnterminatedString { line, column }
            | LexError::UnterminatedChar { line, column }
            | LexError::UnterminatedComment { line, column }
            | LexError::IllegalChar { line, column, .. }
            | LexError::ReservedMarker { line, column, .. } => (line, column),
        }
    }
}

/// Tokenizes Java source. Source text containing a meta-token spelling
/// (e.g. `<soc>`) outside literals and comments is rejected.
pub fn tokenize(source: &str) -> Result<TokenStream, LexError> {
    Lexer::new(source, false).run()
}

/// Like [`tokenize`], but meta-token spellings lex as [`TokenKind::Meta`].
/// Used for re-reading rendered corpus text and user-supplied contexts.
pub fn tokenize_with_markers(source: &str) -> Result<TokenStream, LexError> {
    Lexer::new(source, true).run()
}

struct Lexer<'a> {
    src: &'a str,
    chars: Vec<(usize, char)>,
    pos: usize,
    line: u32,
    column: u32,
    allow_markers: bool,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str, allow_markers: bool) -> Self {
        Lexer { src, chars: src.char_indices().collect(), pos: 0, line: 1, column: 1, allow_markers }
    }

    fn peek(&self, ahead: usize) -> Option<char> {
        self.chars.get(self.pos + ahead).map(|&(_, c)| c)
    }

    fn byte_offset(&self, pos: usize) -> usize {
        self.chars.get(pos).map_or(self.src.len(), |&(b, _)| b)
    }

    fn rest(&self) -> &'a str {
        &self.src[self.byte_offset(self.pos)..]
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek(0)?;
        self.pos += 1;
        match c {
            '\n' => {
                self.line += 1;
                self.column = 1;
            }
            // Lone CR is a line terminator too; CRLF counts once via the LF.
            '\r' if self.peek(0) != Some('\n') => {
                self.line += 1;
                self.column = 1;
            }
            _ => self.column += 1,
        }
        Some(c)
    }

    fn bump_n(&mut self, n: usize) {
        for _ in 0..n {
            self.bump();
        }
    }

    fn slice_from(&self, start: usize) -> &'a str {
        &self.src[self.byte_offset(start)..self.byte_offset(self.pos)]
    }

    fn run(mut self) -> Result<TokenStream, LexError> {
        let mut tokens = Vec::new();
        while let Some(c) = self.peek(0) {
            let (line, column) = (self.line, self.column);
            if c.is_whitespace() || c == '\u{feff}' {
                self.bump();
                continue;
            }
            if c == '/' && self.peek(1) == Some('/') {
                while let Some(c) = self.peek(0) {
                    if c == '\n' || c == '\r' {
                        break;
                    }
                    self.bump();
                }
                continue;
            }
            if c == '/' && self.peek(1) == Some('*') {
                self.bump_n(2);
                loop {
                    match self.peek(0) {
                        None => return Err(LexError::UnterminatedComment { line, column }),
                        Some('*') if self.peek(1) == Some('/') => {
                            self.bump_n(2);
                            break;
                        }
                        Some(_) => {
                            self.bump();
                        }
                    }
                }
                continue;
            }
            if c == '<' {
                if let Some(marker) = META_TOKENS.iter().find(|m| self.rest().starts_with(**m)) {
                    if !self.allow_markers {
                        return Err(LexError::ReservedMarker { text: marker.to_string(), line, column });
                    }
                    self.bump_n(marker.chars().count());
                    tokens.push(Token::meta(marker, line));
                    continue;
                }
            }
            let token = if is_ident_start(c) {
                self.identifier(line)
            } else if c.is_ascii_digit() || (c == '.' && self.peek(1).is_some_and(|d| d.is_ascii_digit())) {
                self.number(line)
            } else if c == '"' {
                self.string(line, column)?
            } else if c == '\'' {
                self.char_literal(line, column)?
            } else if let Some(tok) = self.punctuation(line) {
                tok
            } else {
                return Err(LexError::IllegalChar { ch: c, line, column });
            };
            tokens.push(token);
        }
        Ok(TokenStream::new(tokens))
    }

    fn identifier(&mut self, line: u32) -> Token {
        let start = self.pos;
        while self.peek(0).is_some_and(is_ident_part) {
            self.bump();
        }
        let text = self.slice_from(start);
        let kind = if KEYWORDS.contains(&text) { TokenKind::Keyword } else { TokenKind::Identifier };
        Token::new(kind, text, line)
    }

    fn digits(&mut self, radix: u32) {
        while self.peek(0).is_some_and(|c| c == '_' || c.is_digit(radix)) {
            self.bump();
        }
    }

    fn exponent(&mut self, markers: [char; 2]) -> bool {
        if self.peek(0).is_some_and(|c| markers.contains(&c)) {
            let sign = usize::from(matches!(self.peek(1), Some('+') | Some('-')));
            if self.peek(1 + sign).is_some_and(|c| c.is_ascii_digit()) {
                self.bump_n(1 + sign);
                self.digits(10);
                return true;
            }
        }
        false
    }

    fn number(&mut self, line: u32) -> Token {
        let start = self.pos;
        let mut float = false;
        let prefix = (self.peek(0), self.peek(1).map(|c| c.to_ascii_lowercase()));
        match prefix {
            (Some('0'), Some('x')) => {
                self.bump_n(2);
                self.digits(16);
                if self.peek(0) == Some('.') {
                    self.bump();
                    self.digits(16);
                    float = true;
                }
                float |= self.exponent(['p', 'P']);
            }
            (Some('0'), Some('b')) => {
                self.bump_n(2);
                self.digits(2);
            }
            _ => {
                self.digits(10);
                if self.peek(0) == Some('.') && self.peek(1) != Some('.') {
                    self.bump();
                    self.digits(10);
                    float = true;
                }
                float |= self.exponent(['e', 'E']);
            }
        }
        match self.peek(0) {
            Some('l') | Some('L') if !float => {
                self.bump();
            }
            Some('f') | Some('F') | Some('d') | Some('D') => {
                self.bump();
                float = true;
            }
            _ => {}
        }
        let kind = if float { LiteralKind::Float } else { LiteralKind::Integer };
        Token::new(TokenKind::Literal(kind), self.slice_from(start), line)
    }

    fn string(&mut self, line: u32, column: u32) -> Result<Token, LexError> {
        let start = self.pos;
        if self.rest().starts_with("\"\"\"") {
            // Text block (post-Java 8, lexed leniently).
            self.bump_n(3);
            loop {
                match self.peek(0) {
                    None => return Err(LexError::UnterminatedString { line, column }),
                    Some('\\') => self.bump_n(2),
                    Some('"') if self.rest().starts_with("\"\"\"") => {
                        self.bump_n(3);
                        break;
                    }
                    Some(_) => {
                        self.bump();
                    }
                }
            }
        } else {
            self.bump();
            loop {
                match self.peek(0) {
                    None | Some('\n') | Some('\r') => return Err(LexError::UnterminatedString { line, column }),
                    Some('\\') => {
                        self.bump();
                        if matches!(self.peek(0), None | Some('\n') | Some('\r')) {
                            return Err(LexError::UnterminatedString { line, column });
                        }
                        self.bump();
                    }
                    Some('"') => {
                        self.bump();
                        break;
                    }
                    Some(_) => {
                        self.bump();
                    }
                }
            }
        }
        Ok(Token::new(TokenKind::Literal(LiteralKind::Str), self.slice_from(start), line))
    }

    fn char_literal(&mut self, line: u32, column: u32) -> Result<Token, LexError> {
        let start = self.pos;
        self.bump();
        loop {
            match self.peek(0) {
                None | Some('\n') | Some('\r') => return Err(LexError::UnterminatedChar { line, column }),
                Some('\\') => {
                    self.bump();
                    if matches!(self.peek(0), None | Some('\n') | Some('\r')) {
                        return Err(LexError::UnterminatedChar { line, column });
                    }
                    self.bump();
                }
                Some('\'') => {
                    self.bump();
                    break;
                }
                Some(_) => {
                    self.bump();
                }
            }
        }
        Ok(Token::new(TokenKind::Literal(LiteralKind::Char), self.slice_from(start), line))
    }

    fn punctuation(&mut self, line: u32) -> Option<Token> {
        let rest = self.rest();
        let (kind, text) = SEPARATORS
            .iter()
            .filter(|s| s.len() > 1)
            .map(|s| (TokenKind::Separator, *s))
            .chain(OPERATORS.iter().map(|s| (TokenKind::Operator, *s)))
            .chain(SEPARATORS.iter().filter(|s| s.len() == 1).map(|s| (TokenKind::Separator, *s)))
            .filter(|(_, s)| rest.starts_with(*s))
            .max_by_key(|(_, s)| s.len())?;
        self.bump_n(text.len());
        Some(Token::new(kind, text, line))
    }
}

fn is_ident_start(c: char) -> bool {
    c == '_' || c == '$' || c.is_alphabetic()
}

fn is_ident_part(c: char) -> bool {
    c == '_' || c == '$' || c.is_alphanumeric()
}

/// Collapses literals into meta-tokens. Length-preserving and idempotent.
pub fn replace_literals(stream: TokenStream) -> TokenStream {
    let tokens = stream
        .tokens
        .into_iter()
        .map(|tok| match tok.kind {
            TokenKind::Literal(LiteralKind::Integer | LiteralKind::Float) => Token::meta(NUM_VAL, tok.line),
            TokenKind::Literal(LiteralKind::Char | LiteralKind::Str) => Token::meta(STR_VAL, tok.line),
            _ => tok,
        })
        .collect();
    TokenStream { tokens, source_path: stream.source_path }
}

/// Joins token texts with single spaces, breaking lines after `;`, `{` and `}`.
pub fn render(stream: &TokenStream) -> String {
    render_texts(stream.tokens.iter().map(|t| t.text.as_str()))
}

pub fn render_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> String {
    let mut out = String::new();
    let mut at_line_start = true;
    for text in texts {
        if !at_line_start {
            out.push(' ');
        }
        out.push_str(text);
        at_line_start = matches!(text, ";" | "{" | "}");
        if at_line_start {
            out.push('\n');
        }
    }
    out
}

impl fmt::Display for TokenStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render(self))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(src: &str) -> Vec<String> {
        tokenize(src).unwrap().tokens.into_iter().map(|t| t.text).collect()
    }

    #[test]
    fn drops_whitespace_and_comments() {
        let s = tokenize("int x = 1;\n// c\n").unwrap();
        assert_eq!(s.texts(), ["int", "x", "=", "1", ";"]);
        assert!(s.tokens.iter().all(|t| t.line == 1));
    }

    #[test]
    fn empty_input() {
        assert!(tokenize("").unwrap().is_empty());
        assert!(tokenize("  \n /* only */ // comment").unwrap().is_empty());
    }

    #[test]
    fn strings_and_block_comments() {
        assert_eq!(
            texts("String s = \"a b\"; /*x*/ s.length();"),
            ["String", "s", "=", "\"a b\"", ";", "s", ".", "length", "(", ")", ";"]
        );
    }

    #[test]
    fn line_numbers_follow_source() {
        let s = tokenize("class A {\r\n  /* two\n lines */ int f;\r}\n").unwrap();
        let lines: Vec<u32> = s.tokens.iter().map(|t| t.line).collect();
        assert_eq!(lines, [1, 1, 1, 3, 3, 3, 4]);
    }

    #[test]
    fn numeric_literal_forms() {
        let src = "0x1F 0b1010 017 1_000L 3.14 .5 1e10 2.5e-3f 0x1.8p3 7d 1.";
        let s = tokenize(src).unwrap();
        assert_eq!(s.len(), 11);
        let kinds: Vec<_> = s.tokens.iter().map(|t| t.kind).collect();
        use LiteralKind::*;
        let expect = [Integer, Integer, Integer, Integer, Float, Float, Float, Float, Float, Float, Float];
        for (k, e) in kinds.iter().zip(expect) {
            assert_eq!(*k, TokenKind::Literal(e));
        }
    }

    #[test]
    fn negative_number_is_operator_plus_literal() {
        assert_eq!(texts("x = -5;"), ["x", "=", "-", "5", ";"]);
    }

    #[test]
    fn longest_match_operators() {
        assert_eq!(
            texts("a >>>= b >> c -> d :: e ... f"),
            ["a", ">>>=", "b", ">>", "c", "->", "d", "::", "e", "...", "f"]
        );
        assert_eq!(texts("List<List<String>> x"), ["List", "<", "List", "<", "String", ">>", "x"]);
    }

    #[test]
    fn annotations_and_var_are_ordinary_tokens() {
        let s = tokenize("@Override var x").unwrap();
        assert_eq!(s.tokens[0].kind, TokenKind::Separator);
        assert_eq!(s.tokens[1].kind, TokenKind::Identifier);
        assert_eq!(s.tokens[2].kind, TokenKind::Identifier);
    }

    #[test]
    fn char_literals_with_escapes() {
        assert_eq!(texts(r"c = '\''; d = 'A';"), ["c", "=", r"'\''", ";", "d", "=", r"'A'", ";"]);
    }

    #[test]
    fn error_locations() {
        assert_eq!(tokenize("x = \"abc").unwrap_err(), LexError::UnterminatedString { line: 1, column: 5 });
        assert_eq!(tokenize("a\n  'b").unwrap_err(), LexError::UnterminatedChar { line: 2, column: 3 });
        assert_eq!(tokenize("a /* b").unwrap_err(), LexError::UnterminatedComment { line: 1, column: 3 });
        assert_eq!(tokenize("a # b").unwrap_err(), LexError::IllegalChar { ch: '#', line: 1, column: 3 });
    }

    #[test]
    fn markers_rejected_in_source() {
        let err = tokenize("int <soc> x;").unwrap_err();
        assert!(matches!(err, LexError::ReservedMarker { column: 5, .. }));
        // Inside a string or comment they are harmless.
        assert!(tokenize("s = \"<soc>\"; // <eoc>").is_ok());
        let s = tokenize_with_markers("<soc> int x ; <eoc>").unwrap();
        assert!(s.tokens[0].is_meta(SOC));
        assert!(s.tokens[4].is_meta(EOC));
    }

    #[test]
    fn replace_numeric_literal() {
        let s = replace_literals(tokenize("x = 42;").unwrap());
        assert_eq!(s.texts(), ["x", "=", NUM_VAL, ";"]);
    }

    #[test]
    fn replace_without_literals_is_identity() {
        let s = tokenize("if (b)").unwrap();
        assert_eq!(replace_literals(s.clone()), s);
    }

    #[test]
    fn replace_string_char_and_hex() {
        let s = replace_literals(tokenize("s = \"hi\"; c = 'a'; h = 0x1F;").unwrap());
        assert_eq!(s.texts(), ["s", "=", STR_VAL, ";", "c", "=", STR_VAL, ";", "h", "=", NUM_VAL, ";"]);
        assert!(s.tokens.iter().all(|t| !t.text.contains(char::is_whitespace)));
    }

    #[test]
    fn render_rules() {
        let s = TokenStream::new(vec![
            Token::new(TokenKind::Keyword, "int", 1),
            Token::new(TokenKind::Identifier, "x", 1),
            Token::new(TokenKind::Separator, ";", 1),
        ]);
        assert_eq!(render(&s), "int x ;\n");
        assert_eq!(render(&TokenStream::default()), "");
        assert_eq!(render_texts(["{", "a", "}", "b"]), "{\na }\nb");
    }
}
