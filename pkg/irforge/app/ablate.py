"""
Flag potency by leave-one-out: each enabled flag of a genome is cleared in turn and the
drop in sequence fitness is its contribution.
"""
import logging
from dataclasses import dataclass

from .errors import ConfigurationError, WorkspaceError
from .workspace import read_json, write_table

logger = logging.getLogger(__name__)

CATEGORIES = ('statement-simplify', 'source-proximate', 'cfg-simplify', 'other')

POTENCY_COLUMNS = ['rank', 'flag', 'category', 'fitness_with', 'fitness_without', 'delta']

# Written into every potency report
UNITS_NOTE = 'contributions are measured in sequence-fitness units on the validation set, not retrieval MAP'


def load_categories(path):
    """
    Reads the curated flag -> category map.

    Returns:
    dict[str, str]: Flag name to category; unlisted flags fall into the file's default.
    """
    try:
        payload = read_json(path)
    except (OSError, ValueError) as e:
        raise WorkspaceError(f'cannot read flag categories {path}: {e}') from e
    mapping = {}
    for category, flags in payload.get('categories', {}).items():
        if category not in CATEGORIES:
            raise ConfigurationError(f'{path}: unknown flag category {category!r}')
        for flag in flags:
            mapping[flag] = category
    return mapping


def category_of(flag, categories):
    return categories.get(flag, 'other')


@dataclass(frozen=True)
class PotencyRow:
    flag: str
    category: str
    fitness_with: float
    fitness_without: float

    @property
    def delta(self):
        return self.fitness_with - self.fitness_without


@dataclass(frozen=True)
class PotencyReport:
    """
    Leave-one-out contributions of the flags of one genome.

    Attributes:
    - genome (str): Bit string of the full genome.
    - fitness_with (float): F of the full genome.
    - rows (tuple[PotencyRow]): One per enabled flag, descending by delta.
    """
    genome: str
    fitness_with: float
    rows: tuple

    def table(self):
        return [(i + 1, r.flag, r.category, r.fitness_with, r.fitness_without, r.delta)
                for i, r in enumerate(self.rows)]

    def write(self, path, fmt='tsv'):
        write_table(path, POTENCY_COLUMNS, self.table(), fmt)

    def category_totals(self):
        totals = {c: 0.0 for c in CATEGORIES}
        for row in self.rows:
            totals[row.category] += row.delta
        return totals


def leave_one_out(evaluator, genome, program_ids, catalog, categories=None):
    """
    Measures each enabled flag's contribution to the sequence fitness.

    The full genome and every single-flag-cleared variant are evaluated in one batch,
    so the fitness memo and the worker pool amortize the work.

    Parameters:
    evaluator (FitnessEvaluator): Fitness of genomes over programs.
    genome (FlagVector): Genome with at least one enabled flag.
    program_ids (Iterable[str]): Validation programs.
    catalog (FlagCatalog): Flag names.
    categories (dict[str, str] | None): Flag category map.

    Returns:
    PotencyReport: popcount(genome) rows ordered by descending delta (catalog order on ties).
    """
    enabled = genome.enabled_indices()
    if not enabled:
        raise ConfigurationError('the genome enables no flag; nothing to ablate')
    categories = categories or {}
    variants = [genome.with_bit(i, 0) for i in enabled]
    reports = evaluator.evaluate_many([genome, *variants], program_ids)
    full = reports[0].aggregate_F

    rows = []
    for index, report in zip(enabled, reports[1:]):
        flag = catalog.flags[index]
        rows.append(PotencyRow(flag=flag, category=category_of(flag, categories),
                               fitness_with=full, fitness_without=report.aggregate_F))
    order = sorted(range(len(rows)), key=lambda k: (-rows[k].delta, k))
    logger.info('ablated %d flags; full-genome fitness %.6f', len(rows), full)
    return PotencyReport(genome=genome.to_string(), fitness_with=full, rows=tuple(rows[k] for k in order))
