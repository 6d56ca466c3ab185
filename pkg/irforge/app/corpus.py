"""
Corpus ingestion, train/test splitting and validation-set sampling.

A corpus is a directory of C/C++ programs whose class label comes either from a
manifest (``relative/path<TAB>label`` per line) or from the parent directory name.
"""
import hashlib
import logging
import os
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import ConfigurationError, CorpusError, WorkspaceError
from .workspace import atomic_write_json, read_json

logger = logging.getLogger(__name__)

# Index format version written into corpus.json
INDEX_VERSION = 1

# Extensions ingested and the language they map to
SOURCE_EXTENSIONS = {'.c': 'c', '.cc': 'c++', '.cpp': 'c++', '.cxx': 'c++'}

TRAIN, TEST = 'train', 'test'
SPLIT_MODES = ('record', 'class')


@dataclass(frozen=True)
class ProgramRecord:
    """
    One program of the corpus.

    Attributes:
    - id (str): Relative path with '/' separators, unique within the corpus.
    - source_path (str): Absolute filesystem path.
    - class_label (str): Task identity (problem id).
    - content_hash (str): SHA-256 hex digest of the source bytes.
    - language (str): 'c' or 'c++' by extension.
    """
    id: str
    source_path: str
    class_label: str
    content_hash: str
    language: str = 'c'

    def read_source(self):
        with open(self.source_path, 'rb') as f:
            return f.read().decode('utf-8', errors='replace')


@dataclass
class IngestReport:
    """Files skipped during ingestion, with the reason for each."""
    skipped: list = field(default_factory=list)

    def skip(self, path, reason):
        logger.warning('skipping %s: %s', path, reason)
        self.skipped.append((path, reason))


@dataclass(frozen=True)
class Corpus:
    """
    Ordered program records and their train/test partition.

    Attributes:
    - root (str): Corpus directory.
    - records (tuple[ProgramRecord]): Sorted by id.
    - split (dict): record id -> 'train' | 'test'; every record in exactly one split.
    - split_mode (str): 'record' or 'class'.
    """
    root: str
    records: tuple
    split: dict
    split_mode: str = 'record'

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise CorpusError('duplicate record ids in corpus')
        if set(self.split) != set(ids) or not set(self.split.values()) <= {TRAIN, TEST}:
            raise CorpusError('every record must belong to exactly one split')

    def split_of(self, record_id):
        return self.split[record_id]

    @cached_property
    def _by_id(self):
        return {r.id: r for r in self.records}

    def record(self, record_id):
        return self._by_id[record_id]

    @property
    def train(self):
        return [r for r in self.records if self.split[r.id] == TRAIN]

    @property
    def test(self):
        return [r for r in self.records if self.split[r.id] == TEST]

    @property
    def class_labels(self):
        return sorted({r.class_label for r in self.records})

    @property
    def digest(self):
        """Digest over ids, labels, hashes and split; independent of the root path."""
        h = hashlib.sha256()
        for r in self.records:
            h.update(f'{r.id}\t{r.class_label}\t{r.content_hash}\t{self.split[r.id]}\n'.encode())
        return h.hexdigest()

    def to_dict(self):
        return {
            'version': INDEX_VERSION,
            'root': self.root,
            'split_mode': self.split_mode,
            'records': [
                {'id': r.id, 'source_path': r.source_path, 'class_label': r.class_label,
                 'content_hash': r.content_hash, 'language': r.language,
                 'split': self.split[r.id]}
                for r in self.records
            ],
        }

    def save(self, path):
        atomic_write_json(path, self.to_dict())

    @classmethod
    def load(cls, path):
        payload = read_json(path)
        if payload.get('version') != INDEX_VERSION:
            raise WorkspaceError(f'corpus index {path} has unsupported version {payload.get("version")}')
        records = tuple(
            ProgramRecord(id=r['id'], source_path=r['source_path'], class_label=r['class_label'],
                          content_hash=r['content_hash'], language=r.get('language', 'c'))
            for r in payload['records'])
        split = {r['id']: r['split'] for r in payload['records']}
        return cls(root=payload['root'], records=records, split=split,
                   split_mode=payload.get('split_mode', 'record'))


@dataclass(frozen=True)
class ValidationSet:
    """
    The GA validation subset P of the training split.

    Attributes:
    - member_ids (tuple[str]): Sorted subset of train record ids.
    - seed (int): RNG seed of the draw.
    - fraction (float): Requested fraction in (0, 1].
    """
    member_ids: tuple
    seed: int
    fraction: float

    def __len__(self):
        return len(self.member_ids)

    def save(self, path):
        atomic_write_json(path, {'members': list(self.member_ids), 'seed': self.seed,
                                 'fraction': self.fraction})

    @classmethod
    def load(cls, path):
        payload = read_json(path)
        return cls(member_ids=tuple(payload['members']), seed=payload['seed'],
                   fraction=payload['fraction'])


def content_hash(data):
    return hashlib.sha256(data).hexdigest()


def read_manifest(path):
    """
    Parses a manifest of ``relative/path<TAB>class_label`` lines.

    Blank lines and lines starting with '#' are ignored.

    Returns:
    dict: relative path (with '/') -> class label.
    """
    mapping = {}
    with open(path, encoding='utf-8') as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip('\n').rstrip('\r')
            if not line.strip() or line.lstrip().startswith('#'):
                continue
            parts = line.split('\t')
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise CorpusError(f'{path}:{lineno}: expected "path<TAB>class_label"')
            mapping[parts[0].replace(os.sep, '/')] = parts[1]
    return mapping


def _walk_sources(root):
    found = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in filenames:
            if os.path.splitext(name)[1].lower() in SOURCE_EXTENSIONS:
                rel = os.path.relpath(os.path.join(dirpath, name), root)
                found.append(rel.replace(os.sep, '/'))
    return sorted(found)


def ingest(root_path, manifest=None, split_mode='record', test_fraction=0.3, split_seed=0):
    """
    Ingests a directory of programs into a Corpus.

    Parameters:
    root_path (str): Corpus directory.
    manifest (str | None): Optional manifest file; without it the parent directory
        name is the class label.
    split_mode (str): 'record' (per-class seeded split) or 'class' (whole classes held out).
    test_fraction (float): Share of records (or classes) placed in the test split.
    split_seed (int): Seed of the split.

    Returns:
    tuple[Corpus, IngestReport]: The corpus (records ordered by relative path) and the
        files skipped on the way.

    Raises:
    CorpusError: If no program could be ingested.
    """
    root = os.path.abspath(root_path)
    if not os.path.isdir(root):
        raise CorpusError(f'corpus directory {root_path} does not exist')

    report = IngestReport()
    if manifest is not None:
        labels = read_manifest(manifest)
        candidates = sorted(labels)
    else:
        candidates = _walk_sources(root)
        labels = {}

    records = []
    for rel in candidates:
        path = os.path.join(root, *rel.split('/'))
        ext = os.path.splitext(rel)[1].lower()
        if ext not in SOURCE_EXTENSIONS:
            report.skip(rel, f'unsupported extension {ext!r}')
            continue
        try:
            with open(path, 'rb') as f:
                data = f.read()
        except OSError as e:
            report.skip(rel, f'unreadable: {e.strerror or e}')
            continue
        label = labels.get(rel)
        if label is None:
            parent = os.path.basename(os.path.dirname(path))
            label = parent if os.path.dirname(rel) else os.path.basename(root)
        records.append(ProgramRecord(id=rel, source_path=path, class_label=label,
                                     content_hash=content_hash(data),
                                     language=SOURCE_EXTENSIONS[ext]))

    if not records:
        raise CorpusError(f'empty corpus: no readable .c/.cpp files under {root_path}')

    split = split_corpus(records, split_mode, test_fraction, split_seed)
    return Corpus(root=root, records=tuple(records), split=split, split_mode=split_mode), report


def _round_half_up(x):
    return int(np.floor(x + 0.5))


def split_corpus(records, mode='record', test_fraction=0.3, seed=0):
    """
    Partitions records into train and test.

    In 'record' mode each class contributes round(test_fraction x size) of its records
    to test while keeping at least one record in train. In 'class' mode whole classes
    are held out, at least one class stays in train.

    Returns:
    dict: record id -> 'train' | 'test'.
    """
    if mode not in SPLIT_MODES:
        raise ConfigurationError(f'unknown split mode {mode!r}; expected one of {SPLIT_MODES}')
    if not 0.0 <= test_fraction < 1.0:
        raise ConfigurationError(f'test fraction must be in [0, 1), got {test_fraction}')

    rng = np.random.default_rng(seed)
    by_class = {}
    for r in records:
        by_class.setdefault(r.class_label, []).append(r.id)

    split = {r.id: TRAIN for r in records}
    if mode == 'class':
        classes = sorted(by_class)
        n_test = min(_round_half_up(test_fraction * len(classes)), len(classes) - 1)
        for idx in sorted(rng.permutation(len(classes))[:n_test]):
            for record_id in by_class[classes[idx]]:
                split[record_id] = TEST
        return split

    for label in sorted(by_class):
        ids = sorted(by_class[label])
        n_test = min(_round_half_up(test_fraction * len(ids)), len(ids) - 1)
        for idx in rng.permutation(len(ids))[:n_test]:
            split[ids[idx]] = TEST
    return split


def _largest_remainder(quotas, total):
    base = {k: int(np.floor(q)) for k, q in quotas.items()}
    left = total - sum(base.values())
    order = sorted(quotas, key=lambda k: (-(quotas[k] - base[k]), k))
    for k in order[:left]:
        base[k] += 1
    return base


def sample_validation(corpus, fraction=0.05, seed=0, stratified=False):
    """
    Draws the validation set P from the training split without replacement.

    Parameters:
    corpus (Corpus): Ingested corpus.
    fraction (float): Share of training programs, 0 < fraction <= 1.
    seed (int): 64-bit RNG seed.
    stratified (bool): Allocate the draw across classes by largest remainder.

    Returns:
    ValidationSet: round(fraction x |train|) members (minimum 1), sorted by id.
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigurationError(f'validation fraction must be in (0, 1], got {fraction}')
    train_ids = sorted(r.id for r in corpus.train)
    if not train_ids:
        raise CorpusError('the training split is empty')

    size = max(1, _round_half_up(fraction * len(train_ids)))
    rng = np.random.default_rng(seed)

    if not stratified:
        picked = rng.choice(len(train_ids), size=size, replace=False)
        members = [train_ids[i] for i in picked]
    else:
        by_class = {}
        for r in corpus.train:
            by_class.setdefault(r.class_label, []).append(r.id)
        quotas = {label: fraction * len(ids) for label, ids in by_class.items()}
        allocation = _largest_remainder(quotas, size)
        members = []
        for label in sorted(by_class):
            ids = sorted(by_class[label])
            picked = rng.choice(len(ids), size=allocation[label], replace=False)
            members.extend(ids[i] for i in picked)

    return ValidationSet(member_ids=tuple(sorted(members)), seed=seed, fraction=fraction)


def subsample_train(corpus, fraction, seed=0):
    """
    Returns the ids of a seeded per-class subsample of the training split.

    Every class keeps at least two programs when it has them, so triplets stay buildable.
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigurationError(f'training fraction must be in (0, 1], got {fraction}')
    rng = np.random.default_rng(seed)
    by_class = {}
    for r in corpus.train:
        by_class.setdefault(r.class_label, []).append(r.id)
    kept = []
    for label in sorted(by_class):
        ids = sorted(by_class[label])
        n = min(len(ids), max(2, _round_half_up(fraction * len(ids))))
        kept.extend(ids[i] for i in rng.choice(len(ids), size=n, replace=False))
    return sorted(kept)
