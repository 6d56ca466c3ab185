"""
Textual IR parsing, statement canonicalization and IR-side control-flow graphs.

The vocabulary unit is the whole canonical statement: value names are abstracted
(``%ID``, ``@ID``, ``LBL``) while opcodes, types and literal constants are kept.
"""
import re
from dataclasses import dataclass

import networkx as nx

from .errors import IrParseError

# Coarse node/statement kinds shared with the source-side graphs
ENTRY, EXIT, BRANCH, SWITCH, CALL, RETURN, PLAIN = 'entry', 'exit', 'branch', 'switch', 'call', 'return', 'plain'
KINDS = (ENTRY, EXIT, BRANCH, SWITCH, CALL, RETURN, PLAIN)

SOURCE, IR = 'source', 'ir'

TERMINATORS = {'br', 'switch', 'ret', 'unreachable', 'indirectbr', 'invoke', 'resume', 'callbr',
               'catchswitch', 'catchret', 'cleanupret'}
CALL_MODIFIERS = {'tail', 'musttail', 'notail'}

# Name forms: named, numbered, or quoted
_NAME = r'(?:[-a-zA-Z$._][-a-zA-Z$._0-9]*|\d+|"[^"]*")'

# Named struct types are type tokens, not values
_TYPE_PREFIXES = ('%struct.', '%union.', '%class.', '%"struct.', '%"union.', '%"class.')

_TOKEN_RE = re.compile(
    r'(?P<string>c"[^"]*")'
    r'|(?P<label>label\s+%' + _NAME + r')'
    r'|(?P<local>%' + _NAME + r')'
    r'|(?P<global>@' + _NAME + r')'
)
_METADATA_TRAILER_RE = re.compile(r'(?:,\s*![-\w.]+\s+!(?:\d+|[-\w.]+|\{[^}]*\}))+\s*$')
_METADATA_ARG_RE = re.compile(r'metadata\s+!(?:\d+|[-\w.]+)')
_ATTR_GROUP_RE = re.compile(r'\s#\d+')
_LABEL_LINE_RE = re.compile(r'^(' + _NAME + r'):(?:\s|$)')
_LEGACY_LABEL_RE = re.compile(r'^;\s*<label>:(\d+)')
_LABEL_OPERAND_RE = re.compile(r'label\s+%(' + _NAME + r')')
_FUNCTION_NAME_RE = re.compile(r'@(' + _NAME + r')\s*\(')

ENTRY_BLOCK = '<entry>'


@dataclass(frozen=True)
class CanonStmt:
    """
    A canonicalized IR statement.

    Attributes:
    - text (str): Canonical statement text.
    - opcode (str): Leading operation token.
    - kind (str): entry | exit | branch | switch | call | return | plain.
    """
    text: str
    opcode: str
    kind: str


def _split_comment(line):
    in_string = False
    for i, ch in enumerate(line):
        if ch == '"':
            in_string = not in_string
        elif ch == ';' and not in_string:
            return line[:i]
    return line


def _substitute(match):
    if match.group('string'):
        return match.group('string')
    if match.group('label'):
        return 'label LBL'
    if match.group('local'):
        token = match.group('local')
        return token if token.startswith(_TYPE_PREFIXES) else '%ID'
    return '@ID'


def _opcode(text):
    tokens = text.split()
    if len(tokens) >= 3 and tokens[1] == '=':
        tokens = tokens[2:]
    while tokens and tokens[0] in CALL_MODIFIERS:
        tokens = tokens[1:]
    return tokens[0] if tokens else ''


def _kind(opcode, raw):
    if opcode == 'br':
        return BRANCH if re.search(r'\bbr\s+i1\b', raw) else PLAIN
    if opcode in ('switch', 'indirectbr', 'catchswitch'):
        return SWITCH
    if opcode == 'ret':
        return RETURN
    if opcode in ('unreachable', 'resume'):
        return EXIT
    if opcode in ('call', 'invoke', 'callbr'):
        return PLAIN if '@llvm.' in raw else CALL
    return PLAIN


def canonicalize(raw_statement):
    """
    Canonicalizes one IR statement.

    Local value names become ``%ID``, globals ``@ID``, label operands ``label LBL``;
    comments, metadata trailers and attribute-group references are dropped and
    whitespace is collapsed. Opcodes, types and literal constants are preserved.

    Parameters:
    raw_statement (str): A single non-empty statement line.

    Returns:
    CanonStmt: The canonical statement; idempotent under re-canonicalization.
    """
    line = _split_comment(raw_statement)
    line = _METADATA_TRAILER_RE.sub('', line.rstrip())
    line = _METADATA_ARG_RE.sub('metadata', line)
    line = _ATTR_GROUP_RE.sub('', line)
    line = _TOKEN_RE.sub(_substitute, line)
    text = ' '.join(line.split())
    opcode = _opcode(text)
    return CanonStmt(text=text, opcode=opcode, kind=_kind(opcode, raw_statement))


@dataclass(frozen=True)
class Block:
    """
    A basic block.

    Attributes:
    - block_id (str): Label without '%', or '<entry>' for an unlabeled entry block.
    - statements (tuple[CanonStmt]): Canonical statements in order.
    - successors (tuple[str]): Distinct successor block ids in terminator order.
    - raw (tuple[str]): Original statements, used by format_module.
    """
    block_id: str
    statements: tuple
    successors: tuple
    raw: tuple

    @property
    def kind(self):
        """Node kind taken from the terminator, falling back to call/plain."""
        if self.statements:
            last = self.statements[-1]
            if last.kind in (BRANCH, SWITCH, RETURN, EXIT):
                return last.kind
            if last.opcode in ('invoke', 'callbr'):
                return CALL
        return CALL if any(s.kind == CALL for s in self.statements) else PLAIN


@dataclass(frozen=True)
class Function:
    name: str
    header: str
    blocks: tuple


@dataclass(frozen=True)
class IrModule:
    """
    A parsed module: function definitions with their blocks.

    Invariants: block ids unique per function, every successor resolves within its
    function, the first block is the single entry block.
    """
    functions: tuple

    def statements(self):
        for fn in self.functions:
            for block in fn.blocks:
                yield from block.statements


def module_statements(module):
    """Iterates the canonical statements of every function, with multiplicity."""
    return module.statements()


class _FunctionParser(object):

    def __init__(self, header, lineno):
        match = _FUNCTION_NAME_RE.search(header)
        if match is None:
            raise IrParseError('function definition without a name', lineno)
        self.name = match.group(1)
        self.header = header.strip()
        self.start = lineno
        self.blocks = []  # [block_id, [(raw, lineno)]]

    def label(self, block_id, lineno):
        if any(b[0] == block_id for b in self.blocks):
            raise IrParseError(f'duplicate block label {block_id!r} in @{self.name}', lineno)
        self.blocks.append([block_id, []])

    def statement(self, raw, lineno):
        if not self.blocks:
            self.blocks.append([ENTRY_BLOCK, []])
        self.blocks[-1][1].append((raw, lineno))

    def finish(self):
        ids = {b[0] for b in self.blocks}
        blocks = []
        for block_id, items in self.blocks:
            statements = tuple(canonicalize(raw) for raw, _ in items)
            successors = []
            if items and statements[-1].opcode in TERMINATORS:
                raw, lineno = items[-1]
                for target in _LABEL_OPERAND_RE.findall(raw):
                    if target not in ids:
                        raise IrParseError(f'unknown block %{target} in @{self.name}', lineno)
                    if target not in successors:
                        successors.append(target)
            blocks.append(Block(block_id=block_id, statements=statements,
                                successors=tuple(successors), raw=tuple(raw for raw, _ in items)))
        return Function(name=self.name, header=self.header, blocks=tuple(blocks))


def parse_ir(ir):
    """
    Parses textual IR into functions, blocks and canonical statements.

    Parameters:
    ir (IrText | str): Textual IR.

    Returns:
    IrModule: The parsed module. Unrecognized statements are kept verbatim as plain.

    Raises:
    IrParseError: On an unterminated function or a reference to an unknown block.
    """
    text = ir if isinstance(ir, str) else ir.text
    functions = []
    current = None
    pending, pending_line, depth = None, None, 0

    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if current is None:
            if stripped.startswith('define '):
                if not stripped.endswith('{'):
                    raise IrParseError('function header must end with "{"', lineno)
                current = _FunctionParser(stripped, lineno)
            continue

        if pending is not None:
            # Continuation of a bracketed statement (switch case table)
            pending += ' ' + stripped
            depth += stripped.count('[') - stripped.count(']')
            if depth <= 0:
                current.statement(pending, pending_line)
                pending = None
            continue

        if stripped == '}':
            functions.append(current.finish())
            current = None
            continue
        if not stripped:
            continue
        legacy = _LEGACY_LABEL_RE.match(stripped)
        if legacy:
            current.label(legacy.group(1), lineno)
            continue
        if stripped.startswith(';'):
            continue
        label = _LABEL_LINE_RE.match(stripped)
        if label:
            current.label(label.group(1), lineno)
            continue

        body = _split_comment(stripped).rstrip()
        open_brackets = body.count('[') - body.count(']')
        if open_brackets > 0 and body.endswith('['):
            pending, pending_line, depth = stripped, lineno, open_brackets
            continue
        current.statement(stripped, lineno)

    if current is not None:
        raise IrParseError(f'unterminated function @{current.name}', current.start)
    return IrModule(functions=tuple(functions))


def format_module(module):
    """
    Prints a parsed module back to textual form (statements as originally written).

    parse_ir(format_module(m)) reproduces m's canonical form, blocks and successors.
    """
    lines = []
    for fn in module.functions:
        lines.append(fn.header)
        for block in fn.blocks:
            if block.block_id != ENTRY_BLOCK:
                lines.append(f'{block.block_id}:')
            lines.extend('  ' + raw for raw in block.raw)
        lines.append('}')
        lines.append('')
    return '\n'.join(lines)


@dataclass(frozen=True)
class Cfg:
    """
    Directed graph of kind-labeled nodes compared by the kernel.

    Attributes:
    - kinds (tuple[str]): kinds[i] is the label of node i; node ids are dense 0..n-1.
    - edges (tuple[tuple[int, int]]): Sorted, duplicate-free directed edges.
    - origin (str): 'source' or 'ir'.
    """
    kinds: tuple
    edges: tuple
    origin: str

    def __post_init__(self):
        n = len(self.kinds)
        edges = tuple(sorted(set((int(u), int(v)) for u, v in self.edges)))
        for u, v in edges:
            if not (0 <= u < n and 0 <= v < n):
                raise ValueError(f'edge ({u}, {v}) outside node range 0..{n - 1}')
        object.__setattr__(self, 'kinds', tuple(self.kinds))
        object.__setattr__(self, 'edges', edges)

    @property
    def nodes(self):
        return list(enumerate(self.kinds))

    def __len__(self):
        return len(self.kinds)

    def to_networkx(self):
        graph = nx.DiGraph()
        graph.add_nodes_from((i, {'kind': k}) for i, k in enumerate(self.kinds))
        graph.add_edges_from(self.edges)
        return graph


def join_functions(parts, origin):
    """
    Disjoint union of per-function graphs under one synthetic entry node.

    Parameters:
    parts (list[tuple[list[str], list[tuple[int, int]]]]): (kinds, edges) per function;
        local node 0 is the function's entry.
    origin (str): 'source' or 'ir'.

    Returns:
    Cfg: Node 0 is the synthetic entry with an edge to each function entry.
    """
    kinds, edges = [ENTRY], []
    for local_kinds, local_edges in parts:
        if not local_kinds:
            continue
        offset = len(kinds)
        kinds.extend(local_kinds)
        edges.append((0, offset))
        edges.extend((u + offset, v + offset) for u, v in local_edges)
    return Cfg(kinds=tuple(kinds), edges=tuple(edges), origin=origin)


def _function_part(fn):
    index = {b.block_id: i for i, b in enumerate(fn.blocks)}
    kinds = [b.kind for b in fn.blocks]
    edges = [(index[b.block_id], index[s]) for b in fn.blocks for s in b.successors]
    return kinds, edges


def ir_cfg(module):
    """
    Builds the module-level IR CFG: per-function block graphs joined under a synthetic entry.

    Edge count equals the sum of successor counts plus the number of functions.
    """
    return join_functions([_function_part(fn) for fn in module.functions], IR)


def ir_function_cfgs(module):
    """Returns one CFG per function (each with its own synthetic entry), keyed by name."""
    return {fn.name.strip('"'): join_functions([_function_part(fn)], IR) for fn in module.functions}
