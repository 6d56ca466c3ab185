"""
Desk-scale embedding validator.

Programs are embedded by signed feature hashing (stripped source tokens, or canonical IR
statements), projected linearly, L2-normalized and trained with a triplet loss in which
IR views act as anchors for their own source. Retrieval quality on held-out sources is
measured with MAP@R and AP.
"""
import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, EmbeddingError, TrainingDivergedError
from .irgraph import module_statements
from .srcgraph import strip_source, tokenize

logger = logging.getLogger(__name__)

# Evaluation modes: which views feed the triplets besides source
SRC, SRC_O0, SRC_TOPK, SRC_LEVELS = 'src', 'src+o0', 'src+topk', 'src+levels'
MODES = (SRC, SRC_O0, SRC_TOPK, SRC_LEVELS)

# Below this norm a projection is treated as the zero vector
_EPS = 1e-12


@dataclass(frozen=True)
class EmbedSettings:
    """
    Attributes:
    - dim (int): Hashed feature dimension d.
    - projection (int): Embedding dimension e.
    - margin (float): Triplet margin m.
    - steps (int): Gradient descent steps.
    - lr (float): Learning rate.
    - hash_seed (int): Feature hashing seed.
    - levels (tuple[str]): Standard levels used by 'src+levels'.
    """
    dim: int = 2048
    projection: int = 128
    margin: float = 0.5
    steps: int = 200
    lr: float = 0.5
    hash_seed: int = 0
    levels: tuple = ('O1', 'O2', 'O3')

    @classmethod
    def from_config(cls, config):
        return cls(dim=config['EMBED_DIM'], projection=config['EMBED_PROJECTION'],
                   margin=config['EMBED_MARGIN'], steps=config['EMBED_STEPS'], lr=config['EMBED_LR'],
                   hash_seed=config['EMBED_HASH_SEED'], levels=tuple(config['EMBED_LEVELS']))


def source_tokens(text):
    return tokenize(strip_source(text))


def ir_tokens(module):
    return [stmt.text for stmt in module_statements(module)]


def hash_features(tokens, dim=2048, seed=0):
    """
    Signed feature hashing of a token bag.

    Each token is hashed with keyed BLAKE2b; the low bits pick the bucket and the top
    bit the sign. Platform and process independent for a fixed seed.

    Returns:
    numpy.ndarray: L2-normalized float vector of length dim (all zeros for no tokens).
    """
    key = int(seed).to_bytes(8, 'little', signed=False)
    vec = np.zeros(dim, dtype=np.float64)
    for token in tokens:
        h = int.from_bytes(hashlib.blake2b(token.encode('utf-8'), digest_size=8, key=key).digest(), 'little')
        vec[h % dim] += -1.0 if h >> 63 else 1.0
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


def _normalize_rows(z):
    norms = np.linalg.norm(z, axis=1)
    safe = np.where(norms > _EPS, norms, 1.0)
    return z / safe[:, None], norms


def triplet_loss(anchor, positive, negative, margin=0.5):
    """
    max(0, m + d(a, p) - d(a, n)) with squared Euclidean distance.

    Raises:
    EmbeddingError: If the vectors differ in dimension.
    """
    a, p, n = (np.asarray(x, dtype=float) for x in (anchor, positive, negative))
    if not a.shape == p.shape == n.shape:
        raise EmbeddingError(f'triplet dimension mismatch: {a.shape}, {p.shape}, {n.shape}')
    return max(0.0, float(margin + np.sum((a - p) ** 2) - np.sum((a - n) ** 2)))


@dataclass(frozen=True, eq=False)
class TripletBatch:
    """Row-aligned anchor, positive and negative feature matrices (n x d)."""
    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray

    def __post_init__(self):
        if not self.anchors.shape == self.positives.shape == self.negatives.shape:
            raise EmbeddingError('triplet batch matrices must share one shape')

    def __len__(self):
        return self.anchors.shape[0]


@dataclass(frozen=True, eq=False)
class TripletModel:
    """
    Linear projection trained with a triplet loss.

    Attributes:
    - projection (numpy.ndarray): d x e matrix W; embeddings are normalize(x @ W).
    - margin (float): Triplet margin.
    """
    projection: np.ndarray
    margin: float = 0.5

    @classmethod
    def initialize(cls, dim, projection, margin=0.5, seed=0):
        rng = np.random.default_rng(seed)
        return cls(projection=rng.normal(0.0, 1.0 / np.sqrt(dim), size=(dim, projection)), margin=margin)

    def embed(self, features):
        return _normalize_rows(np.atleast_2d(features) @ self.projection)[0]

    def losses(self, batch):
        a, p, n = (self.embed(m) for m in (batch.anchors, batch.positives, batch.negatives))
        return np.maximum(0.0, self.margin + np.sum((a - p) ** 2, axis=1) - np.sum((a - n) ** 2, axis=1))

    def loss(self, batch):
        return float(self.losses(batch).mean()) if len(batch) else 0.0


def loss_gradient(model, batch):
    """
    Analytic gradient of the mean triplet loss with respect to the projection.

    Inactive triplets (loss 0) contribute nothing. The gradient passes through the row
    normalization: for u = z / |z|, dL/dz = (g - (g . u) u) / |z|.

    Returns:
    numpy.ndarray: Same shape as model.projection.
    """
    W = model.projection
    za, zp, zn = batch.anchors @ W, batch.positives @ W, batch.negatives @ W
    ua, norm_a = _normalize_rows(za)
    up, norm_p = _normalize_rows(zp)
    un, norm_n = _normalize_rows(zn)

    losses = model.margin + np.sum((ua - up) ** 2, axis=1) - np.sum((ua - un) ** 2, axis=1)
    active = (losses > 0)[:, None]
    ga = np.where(active, 2.0 * (un - up), 0.0)
    gp = np.where(active, -2.0 * (ua - up), 0.0)
    gn = np.where(active, 2.0 * (ua - un), 0.0)

    def through_norm(g, u, norms):
        radial = np.sum(g * u, axis=1, keepdims=True) * u
        safe = np.where(norms > _EPS, norms, np.inf)[:, None]
        return (g - radial) / safe

    grad = (batch.anchors.T @ through_norm(ga, ua, norm_a)
            + batch.positives.T @ through_norm(gp, up, norm_p)
            + batch.negatives.T @ through_norm(gn, un, norm_n))
    return grad / max(1, len(batch))


def train(model, batch, steps=200, lr=0.5, seed=0, batch_size=None):
    """
    Plain gradient descent on the mean triplet loss.

    Parameters:
    model (TripletModel): Starting model.
    batch (TripletBatch): Training triplets, at least one.
    steps (int): Number of updates.
    lr (float): Learning rate; 0 leaves the model unchanged.
    seed (int): Seed of the minibatch draws when batch_size is set.
    batch_size (int | None): Full-batch descent when None.

    Returns:
    tuple[TripletModel, list[float]]: Trained model and the loss before each step plus the final loss.

    Raises:
    TrainingDivergedError: If the loss or the projection stops being finite.
    """
    if len(batch) == 0:
        raise EmbeddingError('no training triplets')
    rng = np.random.default_rng(seed)
    W = model.projection.copy()
    history = []
    for step in range(steps):
        current = TripletModel(projection=W, margin=model.margin)
        if batch_size is not None and batch_size < len(batch):
            rows = rng.choice(len(batch), size=batch_size, replace=False)
            sub = TripletBatch(batch.anchors[rows], batch.positives[rows], batch.negatives[rows])
        else:
            sub = batch
        history.append(current.loss(batch))
        if not np.isfinite(history[-1]):
            raise TrainingDivergedError(f'triplet loss is not finite at step {step} (lr={lr})')
        W = W - lr * loss_gradient(current, sub)
        if not np.all(np.isfinite(W)):
            raise TrainingDivergedError(f'projection is not finite after step {step} (lr={lr})')
    trained = TripletModel(projection=W, margin=model.margin)
    history.append(trained.loss(batch))
    if not np.isfinite(history[-1]):
        raise TrainingDivergedError(f'triplet loss is not finite after {steps} steps (lr={lr})')
    return trained, history


def average_precision(ranking, relevance):
    """
    Mean over relevant positions of precision at that position.

    Parameters:
    ranking (Sequence): Items in rank order.
    relevance (Sequence[bool] | set): Flags aligned with ranking, or the set of relevant items.

    Returns:
    float | None: AP in [0, 1]; None (skipped) when nothing is relevant.
    """
    if isinstance(relevance, (set, frozenset)):
        flags = [item in relevance for item in ranking]
    else:
        flags = [bool(r) for r in relevance]
    hits, total = 0, 0.0
    for i, rel in enumerate(flags, 1):
        if rel:
            hits += 1
            total += hits / i
    return total / hits if hits else None


@dataclass
class RetrievalResult:
    """
    Attributes:
    - map_at_r (float): Mean over queries of AP truncated at R.
    - ap (float): Mean full-ranking average precision over the same queries.
    - per_query (list[tuple[int, int, float, float]]): (query index, R, AP@R, AP).
    - skipped (list[int]): Queries whose class has no other member.
    """
    map_at_r: float
    ap: float
    per_query: list = field(default_factory=list)
    skipped: list = field(default_factory=list)


def _ranking(embeddings, query):
    dist = np.sum((embeddings - embeddings[query]) ** 2, axis=1)
    order = np.argsort(dist, kind='stable')
    return [int(i) for i in order if i != query]


def retrieval(embeddings, labels):
    """
    MAP@R and AP with every item as a query against all the others.

    Ranking is by ascending squared distance, ties broken by item index; the query is
    excluded from its own ranking.
    """
    embeddings = np.asarray(embeddings, dtype=float)
    labels = list(labels)
    if len(labels) != embeddings.shape[0]:
        raise EmbeddingError('one label per embedding is required')
    per_query, skipped = [], []
    for q in range(len(labels)):
        r = sum(1 for j, label in enumerate(labels) if j != q and label == labels[q])
        if r == 0:
            skipped.append(q)
            continue
        ranking = _ranking(embeddings, q)
        flags = [labels[i] == labels[q] for i in ranking]
        hits, ap_r = 0, 0.0
        for i, rel in enumerate(flags[:r], 1):
            if rel:
                hits += 1
                ap_r += hits / i
        per_query.append((q, r, ap_r / r, average_precision(ranking, flags)))
    if skipped:
        logger.info('%d queries skipped: their class has a single member', len(skipped))
    if not per_query:
        return RetrievalResult(map_at_r=0.0, ap=0.0, per_query=[], skipped=skipped)
    return RetrievalResult(map_at_r=float(np.mean([p[2] for p in per_query])),
                           ap=float(np.mean([p[3] for p in per_query])),
                           per_query=per_query, skipped=skipped)


def map_at_r(embeddings, labels):
    """MAP@R over all queries that have at least one same-class item."""
    return retrieval(embeddings, labels).map_at_r


@dataclass
class ProgramViews:
    """
    Feature vectors of one program.

    Attributes:
    - label (str): Class label.
    - source (numpy.ndarray): Source view.
    - ir (list[numpy.ndarray]): IR views used as extra anchors.
    """
    label: str
    source: np.ndarray
    ir: list = field(default_factory=list)


def build_triplets(views, mode, rng):
    """
    Builds the training triplets of a mode.

    Every mode contains one source triplet per program (anchor: its source, positive:
    another same-class source, negative: a source of a uniformly drawn other class).
    IR modes add one triplet per IR view (anchor: the IR, positive: the program's own
    source, negative: as above).

    Parameters:
    views (dict[str, ProgramViews]): Training programs by id.
    mode (str): One of src, src+o0, src+topk, src+levels.
    rng (numpy.random.Generator): Positive and negative draws.

    Returns:
    TripletBatch: Possibly empty when no class has two programs.
    """
    if mode not in MODES:
        raise ConfigurationError(f'unknown evaluation mode {mode!r}; expected one of {MODES}')
    ids = sorted(views)
    by_class = {}
    for pid in ids:
        by_class.setdefault(views[pid].label, []).append(pid)
    classes = sorted(by_class)

    def negative(label):
        others = [c for c in classes if c != label]
        if not others:
            return None
        members = by_class[others[rng.integers(len(others))]]
        return views[members[rng.integers(len(members))]].source

    anchors, positives, negatives = [], [], []
    for pid in ids:
        view = views[pid]
        mates = [m for m in by_class[view.label] if m != pid]
        if mates:
            neg = negative(view.label)
            if neg is not None:
                anchors.append(view.source)
                positives.append(views[mates[rng.integers(len(mates))]].source)
                negatives.append(neg)
        if mode != SRC:
            for ir in view.ir:
                neg = negative(view.label)
                if neg is not None:
                    anchors.append(ir)
                    positives.append(view.source)
                    negatives.append(neg)

    if not anchors:
        dim = len(next(iter(views.values())).source) if views else 0
        empty = np.zeros((0, dim))
        return TripletBatch(empty, empty, empty)
    return TripletBatch(np.array(anchors), np.array(positives), np.array(negatives))


@dataclass
class ModeEvaluation:
    mode: str
    result: RetrievalResult
    n_triplets: int
    losses: list
    excluded_classes: list


def evaluate_mode(mode, train_views, test_views, settings=EmbedSettings(), seed=0):
    """
    Trains on the training views of a mode and scores source retrieval on the test split.

    Test classes with fewer than two members are excluded with a notice.

    Returns:
    ModeEvaluation: MAP@R/AP on the test sources, triplet count and the loss history.
    """
    rng = np.random.default_rng(seed)
    batch = build_triplets(train_views, mode, rng)
    model = TripletModel.initialize(settings.dim, settings.projection, settings.margin, seed)
    if len(batch):
        model, losses = train(model, batch, settings.steps, settings.lr, seed)
    else:
        logger.warning('mode %s: no training triplets; evaluating the untrained projection', mode)
        losses = []

    counts = {}
    for view in test_views.values():
        counts[view.label] = counts.get(view.label, 0) + 1
    excluded = sorted(label for label, n in counts.items() if n < 2)
    if excluded:
        logger.warning('test classes with fewer than 2 programs excluded: %s', ', '.join(excluded))
    kept = [pid for pid in sorted(test_views) if counts[test_views[pid].label] >= 2]
    if not kept:
        return ModeEvaluation(mode=mode, result=RetrievalResult(0.0, 0.0), n_triplets=len(batch),
                              losses=losses, excluded_classes=excluded)
    embeddings = model.embed(np.array([test_views[pid].source for pid in kept]))
    result = retrieval(embeddings, [test_views[pid].label for pid in kept])
    return ModeEvaluation(mode=mode, result=result, n_triplets=len(batch), losses=losses,
                          excluded_classes=excluded)
