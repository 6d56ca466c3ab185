"""
Normalized shortest-path graph kernel over kind-labeled CFGs.

A graph is reduced to the multiset of (kind(u), kind(w), d(u, w)) over ordered node
pairs with a finite shortest path, stored as bucket counts. With Dirac kernels on both
the distance and the endpoint kinds, k(a, b) is the dot product of the bucket counts,
an exact integer.
"""
import logging
import math
from collections import Counter
from dataclasses import dataclass

import networkx as nx
import numpy as np

logger = logging.getLogger(__name__)

# Largest graph handled with the cubic all-pairs algorithm
DENSE_LIMIT = 512

# Kind used for every node when labels are ignored
UNLABELED = '*'


@dataclass(frozen=True)
class KernelSettings:
    """
    Options of the kernel.

    Attributes:
    - labeled (bool): Compare endpoint kinds; False ignores labels entirely.
    - directed (bool): Distances along edge direction; False treats edges as undirected.
    - max_nodes (int): Graphs above this size are truncated in BFS order from node 0.
    """
    labeled: bool = True
    directed: bool = True
    max_nodes: int = 4096

    @classmethod
    def from_config(cls, config):
        return cls(labeled=config['KERNEL_LABELED'], directed=config['KERNEL_DIRECTED'],
                   max_nodes=config['KERNEL_MAX_NODES'])

    def to_dict(self):
        return {'labeled': self.labeled, 'directed': self.directed, 'max_nodes': self.max_nodes}


@dataclass(frozen=True)
class SpGraph:
    """
    Bucketed pair-distance multiset of a graph.

    Attributes:
    - buckets (Counter): (kind_u, kind_w, d) -> number of ordered pairs; self pairs at d=0 included.
    - n_nodes (int): Nodes considered (after any truncation).
    """
    buckets: Counter
    n_nodes: int

    def __len__(self):
        return sum(self.buckets.values())


def _truncate(cfg, max_nodes):
    graph = cfg.to_networkx()
    order = list(nx.bfs_tree(graph, 0)) if len(cfg) else []
    seen = set(order)
    order.extend(i for i in range(len(cfg)) if i not in seen)
    keep = order[:max_nodes]
    logger.warning('graph of %d nodes truncated to %d (BFS order) for the kernel', len(cfg), max_nodes)
    sub = graph.subgraph(keep)
    mapping = {old: new for new, old in enumerate(keep)}
    return nx.relabel_nodes(sub, mapping, copy=True), [cfg.kinds[i] for i in keep]


def shortest_paths(cfg, settings=KernelSettings()):
    """
    Computes the pair-distance multiset of a CFG.

    All-pairs distances come from Floyd-Warshall for graphs up to 512 nodes and from
    per-source breadth-first search above that. Unreachable pairs are omitted.

    Parameters:
    cfg (Cfg): Graph with at least one node.
    settings (KernelSettings): Labeling, direction and node cap.

    Returns:
    SpGraph: Bucket counts keyed by (kind_u, kind_w, distance).
    """
    if len(cfg) > settings.max_nodes:
        graph, kinds = _truncate(cfg, settings.max_nodes)
    else:
        graph, kinds = cfg.to_networkx(), list(cfg.kinds)
    if not settings.directed:
        graph = graph.to_undirected()
    if not settings.labeled:
        kinds = [UNLABELED] * len(kinds)

    n = len(kinds)
    buckets = Counter()
    if n == 0:
        return SpGraph(buckets=buckets, n_nodes=0)

    if n <= DENSE_LIMIT:
        dist = nx.floyd_warshall_numpy(graph, nodelist=list(range(n)))
        alphabet = sorted(set(kinds))
        codes = np.array([alphabet.index(k) for k in kinds], dtype=np.int64)
        src, dst = np.nonzero(np.isfinite(dist))
        d = dist[src, dst].astype(np.int64)
        # One integer key per (kind_u, kind_w, d) bucket
        keys = (codes[src] * len(alphabet) + codes[dst]) * n + d
        values, counts = np.unique(keys, return_counts=True)
        for key, count in zip(values.tolist(), counts.tolist()):
            pair, distance = divmod(key, n)
            ku, kw = divmod(pair, len(alphabet))
            buckets[(alphabet[ku], alphabet[kw], distance)] = count
    else:
        for source in range(n):
            for target, distance in nx.single_source_shortest_path_length(graph, source).items():
                buckets[(kinds[source], kinds[target], distance)] += 1
    return SpGraph(buckets=buckets, n_nodes=n)


def sp_kernel(a, b):
    """
    Shortest-path kernel with Dirac length and label factors.

    Returns:
    int: Sum over shared buckets of count_a x count_b; 0 when either side is empty.
    """
    if len(a.buckets) > len(b.buckets):
        a, b = b, a
    return sum(count * b.buckets[key] for key, count in a.buckets.items() if key in b.buckets)


def normalized_kernel(a, b):
    """
    Cosine-normalized kernel value of two precomputed SpGraphs.

    Returns:
    float: k(a,b) / sqrt(k(a,a) k(b,b)) in [0, 1]; exactly 1.0 when Cauchy-Schwarz is
        tight and 0.0 when either self-kernel is zero.
    """
    kab = sp_kernel(a, b)
    kaa = sp_kernel(a, a)
    kbb = sp_kernel(b, b)
    if kaa == 0 or kbb == 0:
        return 0.0
    if kab * kab == kaa * kbb:
        return 1.0
    return min(1.0, kab / math.sqrt(kaa * kbb))


def similarity(src, ir, settings=KernelSettings()):
    """
    Normalized shortest-path similarity sim_G of two CFGs.

    Parameters:
    src (Cfg): Source-side graph.
    ir (Cfg): IR-side graph.
    settings (KernelSettings): Kernel options.

    Returns:
    float: Value in [0, 1], symmetric in its arguments.
    """
    return normalized_kernel(shortest_paths(src, settings), shortest_paths(ir, settings))


def function_similarity(src_cfgs, ir_cfgs, settings=KernelSettings()):
    """
    Mean similarity over source functions paired with the IR function of the same name.

    A source function without an IR counterpart scores 0.

    Parameters:
    src_cfgs (dict[str, Cfg]): Source CFG per function name.
    ir_cfgs (dict[str, Cfg]): IR CFG per function name.

    Returns:
    float: Mean in [0, 1]; 0.0 when the source has no functions.
    """
    if not src_cfgs:
        return 0.0
    scores = [similarity(cfg, ir_cfgs[name], settings) if name in ir_cfgs else 0.0
              for name, cfg in sorted(src_cfgs.items())]
    return float(sum(scores) / len(scores))
