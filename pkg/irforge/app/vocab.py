"""
Baseline statement vocabulary and out-of-vocabulary counting.
"""
import hashlib
import logging
from collections import Counter
from dataclasses import dataclass

from .errors import ConfigurationError, CorpusError, FitnessError, WorkspaceError
from .irgraph import module_statements
from .workspace import atomic_write_text

logger = logging.getLogger(__name__)

VOCAB_VERSION = 1
HEADER = '# irforge-vocabulary'

# Reference the baseline OOV count is measured against
CORPUS, PROGRAM = 'corpus', 'program'
BASELINE_MODES = (CORPUS, PROGRAM)


@dataclass(frozen=True)
class Vocabulary:
    """
    Canonical statements observed in the -O0 IR of the training programs.

    Attributes:
    - entries (dict[str, int]): Statement text -> id, ids dense from 0 in lexicographic order.
    - frequency (dict[str, int]): Statement text -> number of training programs containing it.
    - corpus_digest (str): Digest of the corpus the vocabulary was built from.
    - toolchain (str): Toolchain version string.
    - n_programs (int): Baseline modules that contributed.
    """
    entries: dict
    frequency: dict
    corpus_digest: str
    toolchain: str
    n_programs: int

    def __len__(self):
        return len(self.entries)

    def __contains__(self, text):
        return text in self.entries

    def lookup(self, text):
        return self.entries[text]

    def body(self):
        ordered = sorted(self.entries.items(), key=lambda kv: kv[1])
        return ''.join(f'{i}\t{self.frequency.get(text, 0)}\t{text}\n' for text, i in ordered)

    @property
    def digest(self):
        return hashlib.sha256(self.body().encode('utf-8')).hexdigest()

    def to_text(self):
        header = (f'{HEADER} {VOCAB_VERSION}\n'
                  f'# corpus {self.corpus_digest}\n'
                  f'# toolchain {self.toolchain}\n'
                  f'# programs {self.n_programs}\n'
                  f'# digest {self.digest}\n')
        return header + self.body()

    def save(self, path):
        atomic_write_text(path, self.to_text())

    @classmethod
    def load(cls, path):
        """
        Reads a vocabulary file and checks its digest header.

        Raises:
        WorkspaceError: On a version or digest mismatch or a malformed line.
        """
        meta, entries, frequency = {}, {}, {}
        with open(path, encoding='utf-8') as f:
            for lineno, line in enumerate(f, 1):
                line = line.rstrip('\n')
                if line.startswith('# '):
                    key, _, value = line[2:].partition(' ')
                    meta[key] = value
                    continue
                parts = line.split('\t', 2)
                if len(parts) != 3:
                    raise WorkspaceError(f'{path}:{lineno}: malformed vocabulary line')
                entries[parts[2]] = int(parts[0])
                frequency[parts[2]] = int(parts[1])
        if meta.get('irforge-vocabulary') != str(VOCAB_VERSION):
            raise WorkspaceError(f'vocabulary {path} has unsupported version')
        vocab = cls(entries=entries, frequency=frequency, corpus_digest=meta.get('corpus', ''),
                    toolchain=meta.get('toolchain', ''), n_programs=int(meta.get('programs', 0)))
        if vocab.digest != meta.get('digest'):
            raise WorkspaceError(f'vocabulary {path} does not match its digest header')
        return vocab


@dataclass(frozen=True)
class OovCount:
    """
    Statement occurrences of a module and how many of them are out of vocabulary.

    Attributes:
    - total_statements (int): Statements counted with multiplicity.
    - oov_occurrences (int): Occurrences absent from the vocabulary, 0 <= oov <= total.
    """
    total_statements: int
    oov_occurrences: int

    def __post_init__(self):
        if not 0 <= self.oov_occurrences <= self.total_statements:
            raise ValueError(f'invalid OOV count {self.oov_occurrences}/{self.total_statements}')


def build_vocab(modules, corpus_digest='', toolchain=''):
    """
    Builds the vocabulary from the -O0 modules of the training programs.

    Parameters:
    modules (Iterable[IrModule]): Successfully compiled baseline modules.
    corpus_digest (str): Recorded in the vocabulary header.
    toolchain (str): Recorded in the vocabulary header.

    Returns:
    Vocabulary: Ids assigned in lexicographic statement order.

    Raises:
    CorpusError: If there is no module at all.
    """
    frequency = Counter()
    n_programs = 0
    for module in modules:
        n_programs += 1
        frequency.update({stmt.text for stmt in module_statements(module)})
    if n_programs == 0:
        raise CorpusError('zero compilable programs: cannot build the vocabulary')
    entries = {text: i for i, text in enumerate(sorted(frequency))}
    logger.info('vocabulary: %d statements from %d programs', len(entries), n_programs)
    return Vocabulary(entries=entries, frequency=dict(frequency), corpus_digest=corpus_digest,
                      toolchain=toolchain, n_programs=n_programs)


def held_out_statements(vocab, baseline_module):
    """
    Statements that only the given program contributed to the vocabulary.

    Removing them yields the leave-one-out vocabulary used by the 'program' baseline mode.
    """
    return {stmt.text for stmt in module_statements(baseline_module)
            if vocab.frequency.get(stmt.text, 0) == 1}


def count_oov(module, vocab, held_out=frozenset()):
    """
    Counts statement occurrences absent from the vocabulary.

    Parameters:
    module (IrModule): Parsed module.
    vocab (Vocabulary): Baseline vocabulary.
    held_out (set[str]): Statements treated as absent (leave-one-out mode).

    Returns:
    OovCount: Totals with multiplicity.
    """
    total = oov = 0
    for stmt in module_statements(module):
        total += 1
        if stmt.text not in vocab.entries or stmt.text in held_out:
            oov += 1
    return OovCount(total_statements=total, oov_occurrences=oov)


def oov_ratio(base, opt, smoothing=True, as_fraction=False):
    """
    The OOV fitness multiplier unk_base / unk_opt.

    Parameters:
    base (OovCount): Count on the -O0 module.
    opt (OovCount): Count on the optimized module.
    smoothing (bool): Add one to numerator and denominator.
    as_fraction (bool): Use occurrences / total statements instead of raw occurrences.

    Returns:
    float: (base + 1) / (opt + 1) by default.

    Raises:
    FitnessError: Without smoothing, when the denominator is zero.
    """
    if as_fraction:
        b = base.oov_occurrences / base.total_statements if base.total_statements else 0.0
        o = opt.oov_occurrences / opt.total_statements if opt.total_statements else 0.0
    else:
        b, o = base.oov_occurrences, opt.oov_occurrences
    if smoothing:
        return (b + 1) / (o + 1)
    if o == 0:
        raise FitnessError('OOV ratio undefined: optimized module has no OOV statement (enable smoothing)')
    return b / o


def check_baseline_mode(mode):
    if mode not in BASELINE_MODES:
        raise ConfigurationError(f'unknown OOV baseline mode {mode!r}; expected one of {BASELINE_MODES}')
    return mode
