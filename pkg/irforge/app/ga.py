"""
Genetic search over flag subsets.

Genomes are binary vectors over the flag catalog. Each generation draws the parents by
roulette wheel, pairs them after a seeded shuffle, applies k-point crossover and flip-bit
mutation, evaluates the offspring and offers them to the global top-K archive.
"""
import glob
import hashlib
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigurationError, WorkspaceError
from .workspace import atomic_write_json, read_json, write_table

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
ARCHIVE_VERSION = 1

COUNT, BERNOULLI = 'count', 'bernoulli'
MUTATION_MODES = (COUNT, BERNOULLI)

TRACE_COLUMNS = ['generation', 'best_F', 'mean_F', 'archive_best_F']


class FlagVector(object):
    """
    Immutable genome: one bit per catalog flag.

    Attributes:
    - bits (numpy.ndarray): Read-only uint8 array of 0/1 values.
    """
    __slots__ = ('bits',)

    def __init__(self, bits):
        arr = np.array(bits, dtype=np.uint8).reshape(-1)
        if arr.size and arr.max() > 1:
            raise ValueError('genome elements must be 0 or 1')
        arr.setflags(write=False)
        self.bits = arr

    @classmethod
    def zeros(cls, length):
        return cls(np.zeros(length, dtype=np.uint8))

    @classmethod
    def from_string(cls, text):
        if set(text) - {'0', '1'}:
            raise ValueError(f'not a bit string: {text[:32]!r}')
        return cls([int(c) for c in text])

    @classmethod
    def from_flags(cls, catalog, flags):
        """Genome enabling exactly the named flags of a catalog."""
        bits = np.zeros(len(catalog), dtype=np.uint8)
        for flag in flags:
            bits[catalog.index(flag)] = 1
        return cls(bits)

    def __len__(self):
        return int(self.bits.size)

    def __eq__(self, other):
        return isinstance(other, FlagVector) and np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash(self.bits.tobytes())

    def __repr__(self):
        return f'FlagVector({self.to_string()})'

    @property
    def popcount(self):
        return int(self.bits.sum())

    def enabled_indices(self):
        return [int(i) for i in np.flatnonzero(self.bits)]

    def to_string(self):
        return ''.join('1' if b else '0' for b in self.bits)

    @property
    def digest(self):
        """Digest of the bit pattern; the cache and memo key of the genome."""
        return hashlib.sha256(self.to_string().encode('ascii')).hexdigest()

    def with_bit(self, index, value):
        bits = self.bits.copy()
        bits[index] = 1 if value else 0
        return FlagVector(bits)


@dataclass(frozen=True)
class GaConfig:
    """
    Parameters of one search.

    Attributes:
    - population_size (int): M, even.
    - generations (int): N, generations after the initial one.
    - crossover_points (int): k of k-point crossover.
    - crossover_prob (float): Chance that a parent pair crosses.
    - mutation_rate (float): Share of bits flipped per genome.
    - mutation_mode (str): 'count' flips exactly round(rate x L) bits, 'bernoulli' flips each bit with p=rate.
    - top_k (int): Archive capacity K.
    - init_density (float): rho, probability of a 1 in the initial population.
    - seed (int): RNG seed.
    """
    population_size: int = 20
    generations: int = 800
    crossover_points: int = 2
    crossover_prob: float = 0.4
    mutation_rate: float = 0.01
    mutation_mode: str = COUNT
    top_k: int = 6
    init_density: float = 0.25
    seed: int = 0

    @classmethod
    def from_config(cls, config, **overrides):
        values = dict(
            population_size=config['POPULATION_SIZE'], generations=config['GENERATIONS'],
            crossover_points=config['CROSSOVER_POINTS'], crossover_prob=config['CROSSOVER_PROB'],
            mutation_rate=config['MUTATION_RATE'], mutation_mode=config['MUTATION_MODE'],
            top_k=config['TOP_K'], init_density=config['INIT_DENSITY'], seed=config['SEED'])
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def validate(self):
        """
        Raises:
        ConfigurationError: On a probability outside [0, 1], odd M or a non-positive size.
        """
        for name in ('crossover_prob', 'mutation_rate', 'init_density'):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigurationError(f'{name} must be in [0, 1], got {value}')
        if self.population_size < 2 or self.population_size % 2:
            raise ConfigurationError(f'population size must be even and >= 2, got {self.population_size}')
        if self.generations < 0:
            raise ConfigurationError(f'generations must be >= 0, got {self.generations}')
        if self.top_k < 1:
            raise ConfigurationError(f'top-K must be >= 1, got {self.top_k}')
        if self.crossover_points < 1:
            raise ConfigurationError(f'crossover points must be >= 1, got {self.crossover_points}')
        if self.mutation_mode not in MUTATION_MODES:
            raise ConfigurationError(f'unknown mutation mode {self.mutation_mode!r}')
        return self

    def to_dict(self):
        return asdict(self)


@dataclass
class Population:
    individuals: list
    generation: int = 0
    fitness: list = None

    def __len__(self):
        return len(self.individuals)


@dataclass(frozen=True)
class ArchiveEntry:
    vector: FlagVector
    fitness: float
    generation: int
    seed: int


class Archive(object):
    """
    The global top-K genomes of a search.

    Entries stay sorted by descending fitness (earlier discovery first on ties) and hold
    distinct bit patterns. When full, a newcomer must beat the weakest entry.
    """

    def __init__(self, capacity):
        self.capacity = capacity
        self.entries = []

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def best(self):
        return self.entries[0] if self.entries else None

    @property
    def best_fitness(self):
        return self.entries[0].fitness if self.entries else 0.0

    def offer(self, vector, fitness, generation, seed=0):
        """
        Offers an evaluated genome.

        Returns:
        bool: Whether the archive changed.
        """
        if any(e.vector == vector for e in self.entries):
            return False
        if len(self.entries) >= self.capacity:
            if fitness <= self.entries[-1].fitness:
                return False
            self.entries.pop()
        self.entries.append(ArchiveEntry(vector=vector, fitness=float(fitness),
                                         generation=generation, seed=seed))
        self.entries.sort(key=lambda e: (-e.fitness, e.generation, e.vector.to_string()))
        return True

    def to_dict(self):
        return {
            'version': ARCHIVE_VERSION,
            'capacity': self.capacity,
            'entries': [{'rank': i + 1, 'genome': e.vector.to_string(), 'fitness': e.fitness,
                         'generation': e.generation, 'seed': e.seed, 'popcount': e.vector.popcount}
                        for i, e in enumerate(self.entries)],
        }

    @classmethod
    def from_dict(cls, payload):
        if payload.get('version') != ARCHIVE_VERSION:
            raise WorkspaceError('archive has an unsupported version')
        archive = cls(payload['capacity'])
        archive.entries = [ArchiveEntry(vector=FlagVector.from_string(e['genome']), fitness=e['fitness'],
                                        generation=e['generation'], seed=e['seed'])
                           for e in payload['entries']]
        return archive

    def save(self, path, catalog=None):
        payload = self.to_dict()
        if catalog is not None:
            payload['catalog_digest'] = catalog.digest
            for entry in payload['entries']:
                entry['flags'] = catalog.enabled_flags(FlagVector.from_string(entry['genome']))
        atomic_write_json(path, payload)

    @classmethod
    def load(cls, path):
        return cls.from_dict(read_json(path))


def _round_half_up(x):
    return int(np.floor(x + 0.5))


def init_population(cfg, length, rng):
    """
    Draws M genomes with each bit independently 1 with probability rho.

    Raises:
    ConfigurationError: If the catalog is empty.
    """
    if length == 0:
        raise ConfigurationError('the flag catalog is empty; nothing to search')
    bits = rng.random((cfg.population_size, length)) < cfg.init_density
    return Population(individuals=[FlagVector(row) for row in bits], generation=0)


def crossover(a, b, k_points, rng, cuts=None):
    """
    k-point crossover: the segments between alternating cut pairs are exchanged.

    Parameters:
    a, b (FlagVector): Parents of equal length L.
    k_points (int): Number of distinct cuts, drawn from 1..L-1.
    rng (numpy.random.Generator): Source of the cuts.
    cuts (list[int] | None): Explicit cut indices instead of drawn ones.

    Returns:
    tuple[FlagVector, FlagVector]: Offspring; {c[i], d[i]} == {a[i], b[i]} at every i.
    """
    if len(a) != len(b):
        raise ValueError(f'parents differ in length: {len(a)} != {len(b)}')
    length = len(a)
    if cuts is None:
        if not 0 < k_points < length:
            raise ConfigurationError(f'{k_points} crossover points need a genome longer than {length}')
        cuts = rng.choice(np.arange(1, length), size=k_points, replace=False)
    cuts = np.sort(np.asarray(cuts))
    swap = np.searchsorted(cuts, np.arange(length), side='right') % 2 == 1
    c = np.where(swap, b.bits, a.bits)
    d = np.where(swap, a.bits, b.bits)
    return FlagVector(c), FlagVector(d)


def mutate(vector, rate, rng, mode=COUNT):
    """
    Flip-bit mutation.

    In 'count' mode exactly round(rate x L) distinct positions are flipped; in
    'bernoulli' mode each bit flips independently with probability rate.
    """
    length = len(vector)
    if mode == COUNT:
        n = _round_half_up(rate * length)
        if n == 0:
            return vector
        flips = np.zeros(length, dtype=bool)
        flips[rng.choice(length, size=n, replace=False)] = True
    else:
        flips = rng.random(length) < rate
    return FlagVector(np.where(flips, 1 - vector.bits, vector.bits))


def select(population, fitnesses, rng):
    """
    Roulette-wheel selection of M individuals with replacement.

    P(i) = f_i / sum(f); uniform when the sum is zero. The generation index advances.
    """
    f = np.asarray(fitnesses, dtype=float)
    if f.size != len(population):
        raise ValueError('one fitness value per individual is required')
    if np.any(f < 0) or not np.all(np.isfinite(f)):
        raise ValueError('fitness values must be finite and non-negative')
    total = f.sum()
    p = f / total if total > 0 else None
    picked = rng.choice(len(population), size=len(population), replace=True, p=p)
    return Population(individuals=[population.individuals[i] for i in picked],
                      generation=population.generation + 1)


@dataclass(frozen=True)
class TraceRow:
    generation: int
    best_F: float
    mean_F: float
    archive_best_F: float

    def as_tuple(self):
        return (self.generation, self.best_F, self.mean_F, self.archive_best_F)


def smooth_trace(trace, window=10, column='best_F'):
    """Trailing moving average of one trace column, for plotting the fitness curve."""
    if window < 1:
        raise ConfigurationError(f'smoothing window must be >= 1, got {window}')
    values = np.array([getattr(row, column) for row in trace], dtype=float)
    smoothed = []
    for i in range(len(values)):
        lo = max(0, i - window + 1)
        smoothed.append(float(values[lo:i + 1].mean()))
    return smoothed


def write_trace(path, trace, fmt='tsv'):
    write_table(path, TRACE_COLUMNS, [row.as_tuple() for row in trace], fmt)


@dataclass
class SearchResult:
    archive: Archive
    trace: list = field(default_factory=list)
    population: Population = None


def _checkpoint_path(directory, generation):
    return os.path.join(directory, f'gen-{generation:06d}.json')


def latest_checkpoint(directory):
    paths = sorted(glob.glob(os.path.join(directory, 'gen-*.json')))
    return paths[-1] if paths else None


def _write_checkpoint(directory, guard, population, rng, archive, trace):
    atomic_write_json(_checkpoint_path(directory, population.generation), {
        'version': CHECKPOINT_VERSION,
        'guard': guard,
        'generation': population.generation,
        'individuals': [v.to_string() for v in population.individuals],
        'fitness': list(population.fitness),
        'rng': rng.bit_generator.state,
        'archive': archive.to_dict(),
        'trace': [row.as_tuple() for row in trace],
    })


def _restore(path, guard):
    payload = read_json(path)
    if payload.get('version') != CHECKPOINT_VERSION:
        raise WorkspaceError(f'checkpoint {path} has an unsupported version')
    if payload['guard'] != guard:
        raise ConfigurationError(
            f'checkpoint {os.path.basename(path)} was written by a search with other settings; '
            'rerun without --resume or restore the original settings')
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = payload['rng']
    population = Population(individuals=[FlagVector.from_string(s) for s in payload['individuals']],
                            generation=payload['generation'], fitness=list(payload['fitness']))
    trace = [TraceRow(*row) for row in payload['trace']]
    return population, rng, Archive.from_dict(payload['archive']), trace


def _evaluate(population, fitness_fn, archive, trace, seed):
    fitness = [float(f) for f in fitness_fn(population.individuals)]
    if len(fitness) != len(population):
        raise ValueError('fitness function must return one value per genome')
    population.fitness = fitness
    for vector, f in zip(population.individuals, fitness):
        archive.offer(vector, f, population.generation, seed)
    row = TraceRow(generation=population.generation, best_F=max(fitness),
                   mean_F=float(np.mean(fitness)), archive_best_F=archive.best_fitness)
    trace.append(row)
    logger.info('generation %d: best %.6f mean %.6f archive best %.6f',
                row.generation, row.best_F, row.mean_F, row.archive_best_F)
    return row


def run(cfg, length, fitness_fn, checkpoint_dir=None, resume=False, guard=None, on_generation=None):
    """
    Runs the genetic search.

    Generation 0 is the initial population. Every later generation selects parents by
    roulette wheel from the previous one, pairs them after a seeded shuffle, crosses
    each pair with probability p_c, mutates every individual and evaluates the result.
    Every evaluated genome is offered to the archive.

    Parameters:
    cfg (GaConfig): Search parameters.
    length (int): Catalog length L.
    fitness_fn (callable): list[FlagVector] -> list[float], one non-negative value per genome.
    checkpoint_dir (str | None): Directory receiving one checkpoint per generation.
    resume (bool): Continue from the latest checkpoint in checkpoint_dir.
    guard (dict | None): Settings a checkpoint must match to be resumed (catalog, fitness settings).
    on_generation (callable | None): Called with (population, trace_row) after each evaluation.

    Returns:
    SearchResult: Archive, trace (N+1 rows) and the final population.
    """
    cfg.validate()
    guard = dict(guard or {}, ga={k: v for k, v in cfg.to_dict().items() if k != 'generations'},
                 length=length)

    restored = latest_checkpoint(checkpoint_dir) if (resume and checkpoint_dir) else None
    if restored is not None:
        population, rng, archive, trace = _restore(restored, guard)
        logger.info('resuming from %s (generation %d)', os.path.basename(restored), population.generation)
    else:
        if resume:
            logger.warning('no checkpoint to resume from; starting a new search')
        rng = np.random.default_rng(cfg.seed)
        archive, trace = Archive(cfg.top_k), []
        population = init_population(cfg, length, rng)
        row = _evaluate(population, fitness_fn, archive, trace, cfg.seed)
        if checkpoint_dir:
            _write_checkpoint(checkpoint_dir, guard, population, rng, archive, trace)
        if on_generation:
            on_generation(population, row)

    while population.generation < cfg.generations:
        parents = select(population, population.fitness, rng)
        order = rng.permutation(len(parents))
        offspring = [parents.individuals[i] for i in order]
        for i in range(0, len(offspring) - 1, 2):
            if rng.random() < cfg.crossover_prob:
                offspring[i], offspring[i + 1] = crossover(offspring[i], offspring[i + 1],
                                                           cfg.crossover_points, rng)
        offspring = [mutate(v, cfg.mutation_rate, rng, cfg.mutation_mode) for v in offspring]
        population = Population(individuals=offspring, generation=parents.generation)

        row = _evaluate(population, fitness_fn, archive, trace, cfg.seed)
        if checkpoint_dir:
            _write_checkpoint(checkpoint_dir, guard, population, rng, archive, trace)
        if on_generation:
            on_generation(population, row)

    return SearchResult(archive=archive, trace=trace, population=population)
