"""
Statement-level control-flow graphs for a pragmatic C subset, built from source text.

The parser is deliberately shallow: comments, string contents and preprocessor lines
are stripped, the remaining text is tokenized, and a recursive statement walker emits
basic-block-like nodes. Fidelity target is CFG shape; anything it does not recognize
becomes a plain statement.
"""
import re

from .errors import SourceParseError
from .irgraph import BRANCH, CALL, PLAIN, RETURN, SOURCE, SWITCH, join_functions

_TOKEN_RE = re.compile(r'''
      [A-Za-z_]\w*
    | \d[\w.]*(?:[eEpP][-+]\d+)?\w*
    | \.\d\w*
    | ""|''
    | \.\.\.|<<=|>>=|->|\+\+|--|<<|>>|<=|>=|==|!=|&&|\|\||\+=|-=|\*=|/=|%=|&=|\^=|\|=|::
    | \S
''', re.VERBOSE)

# Words that look like calls when followed by '(' but are not
NON_CALLS = {
    'if', 'while', 'for', 'switch', 'return', 'sizeof', 'do', 'else', 'case', 'goto',
    '_Alignof', 'alignof', 'defined', '__attribute__', 'typeof', '__typeof__',
    'int', 'char', 'short', 'long', 'float', 'double', 'void', 'unsigned', 'signed',
    'struct', 'union', 'enum', 'const', 'volatile', 'static', 'extern', 'register',
}

KEYWORDS = NON_CALLS | {'break', 'continue', 'default', 'typedef', 'inline', 'auto'}

# Tokens allowed between a parameter list and a function body
_DEFINITION_SUFFIXES = {')', 'const', 'noexcept', 'override', 'final'}


def strip_source(text):
    """
    Removes comments, string/char literal contents and preprocessor lines.

    Line structure is preserved so later diagnostics can still count lines.

    Parameters:
    text (str): C source.

    Returns:
    str: Stripped source; string literals become "" and char literals ''.
    """
    out = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        nxt = text[i + 1] if i + 1 < n else ''
        if ch == '/' and nxt == '*':
            end = text.find('*/', i + 2)
            end = n if end < 0 else end + 2
            out.append('\n' * text.count('\n', i, end) or ' ')
            i = end
        elif ch == '/' and nxt == '/':
            while i < n and text[i] != '\n':
                # Line continuation extends a line comment
                if text[i] == '\\' and i + 1 < n and text[i + 1] == '\n':
                    out.append('\n')
                    i += 1
                i += 1
        elif ch in ('"', "'"):
            quote = ch
            i += 1
            while i < n and text[i] != quote and text[i] != '\n':
                i += 2 if text[i] == '\\' else 1
            i += 1
            out.append(quote * 2)
        else:
            out.append(ch)
            i += 1

    kept = []
    continuing = False
    for line in ''.join(out).split('\n'):
        directive = continuing or line.lstrip().startswith('#')
        continuing = directive and line.rstrip().endswith('\\')
        kept.append('' if directive else line)
    return '\n'.join(kept)


def tokenize(text):
    """Splits stripped C source into identifier, number, literal and punctuator tokens."""
    return _TOKEN_RE.findall(text)


def check_braces(tokens):
    depth = 0
    for tok in tokens:
        if tok == '{':
            depth += 1
        elif tok == '}':
            depth -= 1
            if depth < 0:
                raise SourceParseError('unbalanced braces: unexpected "}"')
    if depth:
        raise SourceParseError(f'unbalanced braces: {depth} unclosed "{{"')


def _matching(tokens, start, open_tok, close_tok):
    depth = 0
    for i in range(start, len(tokens)):
        if tokens[i] == open_tok:
            depth += 1
        elif tokens[i] == close_tok:
            depth -= 1
            if depth == 0:
                return i
    return len(tokens) - 1


def _matching_back(tokens, end, open_tok, close_tok):
    depth = 0
    for i in range(end, -1, -1):
        if tokens[i] == close_tok:
            depth += 1
        elif tokens[i] == open_tok:
            depth -= 1
            if depth == 0:
                return i
    return -1


def find_functions(tokens):
    """
    Locates top-level function definitions.

    Returns:
    list[tuple[str, list[str]]]: (name, body tokens without the outer braces) in source order.
    """
    functions = []
    depth = 0
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if tok == '{' and depth == 0:
            close = _matching(tokens, i, '{', '}')
            j = i - 1
            while j >= 0 and tokens[j] in _DEFINITION_SUFFIXES and tokens[j] != ')':
                j -= 1
            if j >= 0 and tokens[j] == ')':
                open_paren = _matching_back(tokens, j, '(', ')')
                name = tokens[open_paren - 1] if open_paren > 0 else ''
                if re.match(r'[A-Za-z_]\w*$', name) and name not in KEYWORDS:
                    functions.append((name, tokens[i + 1:close]))
            i = close + 1
            continue
        i += 1
    return functions


def has_call(tokens):
    """True when an identifier other than a keyword is immediately followed by '('."""
    for i in range(len(tokens) - 1):
        tok = tokens[i]
        if tokens[i + 1] == '(' and tok not in NON_CALLS and (tok[0].isalpha() or tok[0] == '_'):
            return True
    return False


class _Context(object):

    def __init__(self, kind, head=None):
        self.kind = kind  # 'loop' | 'switch'
        self.head = head
        self.breaks = []
        self.continues = []
        self.has_default = False


class FunctionGraphBuilder(object):
    """
    Walks one function body and emits nodes and edges.

    ``cur`` is the node currently accepting straight-line statements; when it is None,
    ``pending`` holds the nodes whose control falls through to the next statement.
    """

    def __init__(self, tokens, merge=True):
        self.tokens = tokens
        self.pos = 0
        self.merge = merge
        self.kinds = []
        self.sizes = []
        self.edges = set()
        self.cur = None
        self.pending = []
        self.contexts = []
        self.labels = {}
        self.fresh_case = None

    # Token access

    def peek(self, offset=0):
        i = self.pos + offset
        return self.tokens[i] if i < len(self.tokens) else None

    def advance(self):
        tok = self.peek()
        self.pos += 1
        return tok

    def accept(self, tok):
        if self.peek() == tok:
            self.pos += 1
            return True
        return False

    def paren_group(self):
        """Consumes '( ... )' and returns the inner tokens, or None when absent."""
        if self.peek() != '(':
            return None
        close = _matching(self.tokens, self.pos, '(', ')')
        inner = self.tokens[self.pos + 1:close]
        self.pos = close + 1
        return inner

    # Graph construction

    def new_node(self, kind=PLAIN, preds=()):
        node = len(self.kinds)
        self.kinds.append(kind)
        self.sizes.append(0)
        for p in preds:
            self.edges.add((p, node))
        return node

    def fall(self):
        srcs = [self.cur] if self.cur is not None else list(self.pending)
        self.cur, self.pending = None, []
        return srcs

    def start(self, kind=PLAIN, preds=None):
        self.cur = self.new_node(kind, self.fall() if preds is None else preds)
        if preds is not None:
            self.pending = []
        self.fresh_case = None
        return self.cur

    def open(self):
        if self.cur is None or (not self.merge and self.sizes[self.cur] > 0):
            self.start()
        return self.cur

    def add_statement(self, tokens, kind=None):
        node = self.open()
        self.sizes[node] += 1
        self.fresh_case = None
        if kind is not None:
            self.kinds[node] = kind
        elif has_call(tokens) and self.kinds[node] == PLAIN:
            self.kinds[node] = CALL
        return node

    def terminate(self):
        self.cur, self.pending = None, []

    def label_node(self, name):
        if name not in self.labels:
            self.labels[name] = self.new_node()
        return self.labels[name]

    def nearest(self, kind=None):
        for ctx in reversed(self.contexts):
            if kind is None or ctx.kind == kind:
                return ctx
        return None

    # Statements

    def build(self):
        """
        Parses the whole body.

        Returns:
        tuple[list[str], list[tuple[int, int]]]: node kinds and edges; node 0 is the entry.
        """
        if not self.tokens:
            self.new_node(RETURN)
            return self.kinds, []
        self.open()
        while self.peek() is not None:
            self.statement()
        if self.cur is not None or self.pending:
            node = self.open()
            if self.kinds[node] in (PLAIN, CALL):
                self.kinds[node] = RETURN
        return self.kinds, sorted(self.edges)

    def statement(self):
        tok = self.peek()
        if tok is None:
            return
        handler = getattr(self, f'_stmt_{tok}', None) if tok.isidentifier() else None
        if tok == '{':
            self.compound()
        elif tok == ';':
            self.advance()
        elif tok == '}':
            # Stray closer from a degraded construct
            self.advance()
        elif handler is not None:
            handler()
        elif tok.isidentifier() and self.peek(1) == ':' and tok not in KEYWORDS:
            self.advance()
            self.advance()
            target = self.label_node(tok)
            for p in self.fall():
                self.edges.add((p, target))
            self.cur = target
        else:
            self.expression()

    def compound(self):
        self.advance()
        while self.peek() is not None and self.peek() != '}':
            self.statement()
        self.accept('}')

    def collect(self):
        """Consumes tokens up to and including the statement's ';' and returns them."""
        start = self.pos
        depth = 0
        while self.peek() is not None:
            tok = self.peek()
            if tok in ('(', '['):
                depth += 1
            elif tok in (')', ']'):
                depth -= 1
            elif tok == '{':
                prev = self.tokens[self.pos - 1] if self.pos > start else None
                if depth <= 0 and prev not in ('=', ',', '(', 'return'):
                    # Macro-style block: emit what we have, the block parses next
                    break
                close = _matching(self.tokens, self.pos, '{', '}')
                self.pos = close + 1
                continue
            elif tok == '}' and depth <= 0:
                break
            elif tok == ';' and depth <= 0:
                self.advance()
                break
            self.advance()
        if self.pos == start:
            self.advance()
        return self.tokens[start:self.pos]

    def expression(self):
        self.add_statement(self.collect())

    def _stmt_if(self):
        self.advance()
        cond = self.paren_group()
        if cond is None:
            self.add_statement(['if'])
            return
        head = self.add_statement(cond, kind=BRANCH)
        self.terminate()
        self.start(preds=[head])
        self.statement()
        exits = self.fall()
        if self.accept('else'):
            self.start(preds=[head])
            self.statement()
            exits += self.fall()
        else:
            exits.append(head)
        self.pending = exits

    def _stmt_while(self):
        self.advance()
        cond = self.paren_group()
        header = self.start(kind=BRANCH)
        self.sizes[header] += 1
        self.terminate()
        ctx = _Context('loop', header)
        self.contexts.append(ctx)
        self.start(preds=[header])
        self.statement()
        for p in self.fall() + ctx.continues:
            self.edges.add((p, header))
        self.contexts.pop()
        self.pending = [header] + ctx.breaks

    def _stmt_do(self):
        self.advance()
        body = self.start()
        ctx = _Context('loop', body)
        self.contexts.append(ctx)
        self.statement()
        self.contexts.pop()
        if self.accept('while'):
            self.paren_group()
            self.accept(';')
        cond = self.new_node(BRANCH, self.fall() + ctx.continues)
        self.sizes[cond] += 1
        self.edges.add((cond, body))
        self.pending = [cond] + ctx.breaks

    def _stmt_for(self):
        self.advance()
        inner = self.paren_group() or []
        parts, part, depth = [], [], 0
        for tok in inner:
            if tok in ('(', '[', '{'):
                depth += 1
            elif tok in (')', ']', '}'):
                depth -= 1
            if tok == ';' and depth == 0:
                parts.append(part)
                part = []
            else:
                part.append(tok)
        parts.append(part)
        init, cond, step = (parts + [[], [], []])[:3]

        if init:
            self.add_statement(init)
        header = self.start(kind=BRANCH if cond else PLAIN)
        self.sizes[header] += 1
        self.terminate()
        ctx = _Context('loop', header)
        self.contexts.append(ctx)
        self.start(preds=[header])
        self.statement()
        self.contexts.pop()
        exits = self.fall() + ctx.continues
        if step:
            inc = self.new_node(CALL if has_call(step) else PLAIN, exits)
            self.sizes[inc] += 1
            exits = [inc]
        for p in exits:
            self.edges.add((p, header))
        self.pending = ([header] if cond else []) + ctx.breaks

    def _stmt_switch(self):
        self.advance()
        cond = self.paren_group()
        head = self.add_statement(cond or [], kind=SWITCH)
        self.terminate()
        ctx = _Context('switch', head)
        self.contexts.append(ctx)
        self.statement()
        self.contexts.pop()
        self.pending = self.fall() + ctx.breaks + ([] if ctx.has_default else [head])

    def _case_label(self, is_default):
        self.advance()
        depth = 0
        while self.peek() is not None:
            tok = self.advance()
            if tok == '?':
                depth += 1
            elif tok == ':':
                if depth == 0:
                    break
                depth -= 1
        ctx = self.nearest('switch')
        if ctx is None:
            self.start()
            return
        if is_default:
            ctx.has_default = True
        if self.fresh_case is not None and self.cur == self.fresh_case:
            self.edges.add((ctx.head, self.cur))
            return
        node = self.new_node(PLAIN, self.fall() + [ctx.head])
        self.cur = node
        self.fresh_case = node

    def _stmt_case(self):
        self._case_label(False)

    def _stmt_default(self):
        self._case_label(True)

    def _stmt_break(self):
        self.advance()
        self.accept(';')
        node = self.add_statement(['break'])
        ctx = self.nearest()
        if ctx is not None:
            ctx.breaks.append(node)
            self.terminate()

    def _stmt_continue(self):
        self.advance()
        self.accept(';')
        node = self.add_statement(['continue'])
        ctx = self.nearest('loop')
        if ctx is not None:
            ctx.continues.append(node)
            self.terminate()

    def _stmt_return(self):
        self.add_statement(self.collect(), kind=RETURN)
        self.terminate()

    def _stmt_goto(self):
        self.advance()
        name = self.advance()
        self.accept(';')
        node = self.add_statement(['goto'])
        if name is not None and name.isidentifier():
            self.edges.add((node, self.label_node(name)))
        self.terminate()

    def _stmt_else(self):
        # Dangling else outside an if: skip the keyword
        self.advance()


def _prepare(source_text):
    tokens = tokenize(strip_source(source_text))
    check_braces(tokens)
    return find_functions(tokens)


def source_cfg(source_text, merge=True):
    """
    Builds the source-side CFG of a translation unit.

    One subgraph per function definition, joined under a synthetic entry node the same
    way as the IR side.

    Parameters:
    source_text (str): C source.
    merge (bool): Merge straight-line statements into one node (default); False gives one
        node per statement.

    Returns:
    Cfg: Graph with origin 'source'.

    Raises:
    SourceParseError: If braces are unbalanced after stripping.
    """
    parts = [FunctionGraphBuilder(body, merge).build() for _, body in _prepare(source_text)]
    return join_functions(parts, SOURCE)


def source_function_cfgs(source_text, merge=True):
    """Returns one source CFG per function definition, keyed by function name."""
    return {name: join_functions([FunctionGraphBuilder(body, merge).build()], SOURCE)
            for name, body in _prepare(source_text)}
