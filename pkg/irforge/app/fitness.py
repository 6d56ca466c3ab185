"""
Per-program and sequence-level fitness.

score(p, v) = sim_G(source CFG of p, IR CFG of optimize(baseline(p), v)) x oov_ratio,
and F(v) is the arithmetic mean of the scores over the validation set. Faults inside
the pipeline zero the score of that pair and are recorded, never raised.
"""
import hashlib
import json
import logging
import math
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

from .compiler import OK, TIMEOUT
from .errors import ConfigurationError, FitnessError, IrParseError, SourceParseError
from .irgraph import ir_cfg, ir_function_cfgs, parse_ir
from .kernel import KernelSettings, function_similarity, normalized_kernel, shortest_paths
from .srcgraph import source_cfg, source_function_cfgs
from .vocab import PROGRAM, check_baseline_mode, count_oov, held_out_statements, oov_ratio
from .workspace import atomic_write_json

logger = logging.getLogger(__name__)

# Statuses beyond the compile outcomes
PARSE_ERROR, SOURCE_ERROR, ARITHMETIC_ERROR = 'parse_error', 'source_error', 'fitness_error'

# Where the source-side graph came from
FROM_SOURCE, FROM_O0_PROXY = 'source', 'o0-proxy'

MODULE, FUNCTION = 'module', 'function'
GRANULARITIES = (MODULE, FUNCTION)
SRC_PROXIES = ('o0', 'none')


@dataclass(frozen=True)
class FitnessSettings:
    """
    Everything besides the genome that determines a fitness value.

    Attributes:
    - kernel (KernelSettings): Kernel labeling, direction and node cap.
    - granularity (str): 'module' (one graph per module) or 'function' (name-matched pairs).
    - src_proxy (str): 'o0' substitutes the -O0 IR CFG when the source cannot be parsed; 'none' scores 0.
    - merge_statements (bool): Merge straight-line source statements into one node.
    - oov_smoothing (bool), oov_as_fraction (bool): OOV ratio options.
    - oov_baseline (str): 'corpus' (global vocabulary) or 'program' (leave-one-out).
    """
    kernel: KernelSettings = KernelSettings()
    granularity: str = MODULE
    src_proxy: str = 'o0'
    merge_statements: bool = True
    oov_smoothing: bool = True
    oov_as_fraction: bool = False
    oov_baseline: str = 'corpus'

    def __post_init__(self):
        if self.granularity not in GRANULARITIES:
            raise ConfigurationError(f'unknown kernel granularity {self.granularity!r}')
        if self.src_proxy not in SRC_PROXIES:
            raise ConfigurationError(f'unknown source proxy {self.src_proxy!r}; expected one of {SRC_PROXIES}')
        check_baseline_mode(self.oov_baseline)

    @classmethod
    def from_config(cls, config):
        return cls(kernel=KernelSettings.from_config(config),
                   granularity=config['KERNEL_GRANULARITY'], src_proxy=config['SRC_PROXY'],
                   merge_statements=config['MERGE_STATEMENTS'], oov_smoothing=config['OOV_SMOOTHING'],
                   oov_as_fraction=config['OOV_AS_FRACTION'], oov_baseline=config['OOV_BASELINE'])

    def to_dict(self):
        return asdict(self)

    def digest(self, *parts):
        """Digest of these settings together with catalog, vocabulary and toolchain identities."""
        payload = json.dumps([self.to_dict(), *parts], sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()


@dataclass(frozen=True)
class ProgramFitness:
    """
    Fitness detail of one (program, genome) pair.

    Attributes:
    - program_id (str): Corpus record id.
    - sim_g (float): Kernel similarity in [0, 1].
    - oov_base (int), oov_opt (int): OOV occurrences of the baseline and optimized modules.
    - score (float): sim_g x oov ratio, 0 on any fault.
    - status (str): ok or the fault.
    - src_origin (str): 'source' or 'o0-proxy'.
    """
    program_id: str
    sim_g: float
    oov_base: int
    oov_opt: int
    score: float
    status: str
    src_origin: str

    @classmethod
    def failed(cls, program_id, status, src_origin=FROM_SOURCE):
        return cls(program_id=program_id, sim_g=0.0, oov_base=0, oov_opt=0, score=0.0,
                   status=status, src_origin=src_origin)

    @classmethod
    def from_row(cls, row):
        return cls(program_id=row.program_id, sim_g=row.sim_g, oov_base=row.oov_base,
                   oov_opt=row.oov_opt, score=row.score, status=row.status, src_origin=row.src_origin)


@dataclass(frozen=True)
class FitnessReport:
    """
    Sequence-level fitness of one genome over a validation set.

    Attributes:
    - genome (str): Bit string of the genome.
    - per_program (tuple[ProgramFitness]): In validation-set order.
    - aggregate_F (float): Mean score over non-quarantined programs; failures count as 0.
    - failures (int): Pairs whose status is not ok.
    - quarantined (tuple[str]): Programs skipped because their baseline failed.
    - settings (str): Settings digest.
    """
    genome: str
    per_program: tuple
    aggregate_F: float
    failures: int
    quarantined: tuple
    settings: str

    def to_dict(self):
        return {
            'genome': self.genome,
            'aggregate_F': self.aggregate_F,
            'failures': self.failures,
            'quarantined': list(self.quarantined),
            'settings': self.settings,
            'fault_policy': 'failed (program, genome) pairs score 0 and stay in the mean',
            'per_program': [asdict(p) for p in self.per_program],
        }

    def save(self, path):
        atomic_write_json(path, self.to_dict())


def aggregate(results, genome, quarantined=(), settings=''):
    """
    Assembles a report from per-program results given in validation-set order.

    An empty result list (every program quarantined) gives F = 0 with a warning.
    """
    results = tuple(results)
    if results:
        value = math.fsum(r.score for r in results) / len(results)
    else:
        logger.warning('every validation program is quarantined; sequence fitness is 0')
        value = 0.0
    return FitnessReport(genome=genome, per_program=results, aggregate_F=value,
                         failures=sum(1 for r in results if r.status != OK),
                         quarantined=tuple(quarantined), settings=settings)


@dataclass(frozen=True)
class _Baseline:
    status: str
    ir: object = None
    module: object = None
    count: object = None
    held_out: frozenset = frozenset()


@dataclass(frozen=True)
class _SourceSide:
    origin: str
    graph: object = None  # SpGraph, or dict[str, Cfg] at function granularity
    status: str = OK


class FitnessEvaluator(object):
    """
    Evaluates genomes against programs with a bounded worker pool and layered memos.

    Per-program baselines and source graphs are computed once. Results are memoized
    in memory by (program, genome digest) and, when a persistent memo is given, in
    the workspace database. Only the calling thread touches the persistent memo.

    Attributes:
    - compiler (Compiler): Produces baseline and optimized IR.
    - catalog (FlagCatalog): Genome index space.
    - vocab (Vocabulary): Baseline vocabulary.
    - corpus (Corpus): Program records.
    - settings (FitnessSettings): Kernel and OOV options.
    - quarantined (frozenset[str]): Programs excluded from every aggregate.
    """

    def __init__(self, compiler, catalog, vocab, corpus, settings=FitnessSettings(), jobs=1,
                 memo=None, quarantined=frozenset(), fingerprint=''):
        self.compiler = compiler
        self.catalog = catalog
        self.vocab = vocab
        self.corpus = corpus
        self.settings = settings
        self.quarantined = frozenset(quarantined)
        self.memo = memo
        self.settings_digest = settings.digest(catalog.digest, vocab.digest, fingerprint)
        self._executor = ThreadPoolExecutor(max_workers=max(1, jobs), thread_name_prefix='fitness')
        self._lock = threading.Lock()
        self._baselines = {}
        self._sources = {}
        self._results = {}

    def close(self):
        self._executor.shutdown(wait=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # Per-program state, computed once

    def _baseline(self, record):
        with self._lock:
            cached = self._baselines.get(record.id)
        if cached is not None:
            return cached
        outcome = self.compiler.compile_baseline(record)
        if not outcome.ok:
            state = _Baseline(status=outcome.status)
        else:
            try:
                module = parse_ir(outcome.ir)
            except IrParseError as e:
                logger.warning('baseline IR of %s does not parse: %s', record.id, e)
                state = _Baseline(status=PARSE_ERROR)
            else:
                held = (frozenset(held_out_statements(self.vocab, module))
                        if self.settings.oov_baseline == PROGRAM else frozenset())
                state = _Baseline(status=OK, ir=outcome.ir, module=module,
                                  count=count_oov(module, self.vocab, held), held_out=held)
        with self._lock:
            self._baselines.setdefault(record.id, state)
        return state

    def _source_side(self, record, baseline):
        with self._lock:
            cached = self._sources.get(record.id)
        if cached is not None:
            return cached
        function_mode = self.settings.granularity == FUNCTION
        state = None
        if record.language == 'c':
            try:
                text = record.read_source()
                if function_mode:
                    graph = source_function_cfgs(text, self.settings.merge_statements)
                else:
                    graph = shortest_paths(source_cfg(text, self.settings.merge_statements),
                                           self.settings.kernel)
                state = _SourceSide(origin=FROM_SOURCE, graph=graph)
            except (SourceParseError, OSError) as e:
                reason = str(e)
        else:
            reason = f'{record.language} sources use the -O0 proxy'
        if state is None:
            if self.settings.src_proxy == 'o0':
                logger.warning('source graph of %s replaced by its -O0 IR graph: %s', record.id, reason)
                graph = (ir_function_cfgs(baseline.module) if function_mode
                         else shortest_paths(ir_cfg(baseline.module), self.settings.kernel))
                state = _SourceSide(origin=FROM_O0_PROXY, graph=graph)
            else:
                logger.warning('source graph of %s unavailable: %s', record.id, reason)
                state = _SourceSide(origin=FROM_SOURCE, status=SOURCE_ERROR)
        with self._lock:
            self._sources.setdefault(record.id, state)
        return state

    def baseline_status(self, record):
        return self._baseline(record).status

    # Fitness

    def program_fitness(self, record, vector):
        """
        Fitness of one program under one genome.

        Parameters:
        record (ProgramRecord): Program.
        vector (FlagVector): Genome.

        Returns:
        ProgramFitness: Score and detail; faults give score 0 with their status.
        """
        baseline = self._baseline(record)
        if baseline.status != OK:
            return ProgramFitness.failed(record.id, baseline.status)
        source = self._source_side(record, baseline)
        if source.status != OK:
            return ProgramFitness.failed(record.id, source.status, source.origin)

        outcome = self.compiler.optimize(baseline.ir, vector, self.catalog)
        if not outcome.ok:
            return ProgramFitness.failed(record.id, outcome.status, source.origin)
        try:
            module = parse_ir(outcome.ir)
        except IrParseError as e:
            logger.warning('optimized IR of %s does not parse: %s', record.id, e)
            return ProgramFitness.failed(record.id, PARSE_ERROR, source.origin)

        if self.settings.granularity == FUNCTION:
            sim = function_similarity(source.graph, ir_function_cfgs(module), self.settings.kernel)
        else:
            sim = normalized_kernel(source.graph, shortest_paths(ir_cfg(module), self.settings.kernel))

        opt_count = count_oov(module, self.vocab, baseline.held_out)
        try:
            ratio = oov_ratio(baseline.count, opt_count, smoothing=self.settings.oov_smoothing,
                              as_fraction=self.settings.oov_as_fraction)
        except FitnessError as e:
            logger.debug('%s: %s', record.id, e)
            return ProgramFitness.failed(record.id, ARITHMETIC_ERROR, source.origin)
        return ProgramFitness(program_id=record.id, sim_g=sim, oov_base=baseline.count.oov_occurrences,
                              oov_opt=opt_count.oov_occurrences, score=sim * ratio, status=OK,
                              src_origin=source.origin)

    def evaluate_many(self, vectors, program_ids):
        """
        Evaluates every (genome, program) pair at once through the worker pool.

        Parameters:
        vectors (list[FlagVector]): Genomes.
        program_ids (Iterable[str]): Validation programs, in report order.

        Returns:
        list[FitnessReport]: One report per genome, in input order.
        """
        program_ids = list(program_ids)
        active = [pid for pid in program_ids if pid not in self.quarantined]
        skipped = [pid for pid in program_ids if pid in self.quarantined]

        found = {}
        for vector in {v.digest: v for v in vectors}.values():
            with self._lock:
                for pid in active:
                    hit = self._results.get((pid, vector.digest))
                    if hit is not None:
                        found[(pid, vector.digest)] = hit
            missing = [pid for pid in active if (pid, vector.digest) not in found]
            if missing and self.memo is not None:
                for pid, row in self.memo.get_many(vector.digest, missing).items():
                    found[(pid, vector.digest)] = ProgramFitness.from_row(row)

        todo, seen = [], set()
        for vector in vectors:
            for pid in active:
                key = (pid, vector.digest)
                if key not in found and key not in seen:
                    seen.add(key)
                    todo.append((key, vector))
        futures = [(key, self._executor.submit(self.program_fitness, self.corpus.record(key[0]), vector))
                   for key, vector in todo]

        fresh = {}
        for key, future in futures:
            fresh[key] = future.result()
        with self._lock:
            self._results.update(found)
            self._results.update(fresh)
        if self.memo is not None and fresh:
            by_genome = {}
            for (pid, digest), result in fresh.items():
                # Timeouts depend on machine load and are retried next time
                if result.status != TIMEOUT:
                    by_genome.setdefault(digest, []).append(result)
            for digest, results in by_genome.items():
                self.memo.put_many(digest, results)

        found.update(fresh)
        return [aggregate([found[(pid, v.digest)] for pid in active], v.to_string(), skipped,
                          self.settings_digest)
                for v in vectors]

    def sequence_fitness(self, vector, validation):
        """
        Sequence fitness F of one genome over the validation set.

        Parameters:
        vector (FlagVector): Genome.
        validation (ValidationSet | Iterable[str]): Programs P.

        Returns:
        FitnessReport: Deterministic given caches and toolchain.
        """
        ids = validation.member_ids if hasattr(validation, 'member_ids') else list(validation)
        if not ids:
            raise ConfigurationError('the validation set is empty')
        return self.evaluate_many([vector], ids)[0]

    def batch_fitness(self, program_ids, on_reports=None):
        """
        Adapts the evaluator to the GA: list[FlagVector] -> list[float].

        on_reports, when given, receives the reports of each batch.
        """
        program_ids = list(program_ids)

        def fitness_fn(vectors):
            reports = self.evaluate_many(vectors, program_ids)
            if on_reports is not None:
                on_reports(reports)
            return [r.aggregate_F for r in reports]

        return fitness_fn


def report_path(reports_dir, generation, report):
    """reports/fitness/gen-NNNNNN/<genome digest>.json"""
    digest = hashlib.sha256(report.genome.encode('ascii')).hexdigest()
    return os.path.join(reports_dir, 'fitness', f'gen-{generation:06d}', digest[:16] + '.json')
