"""
Command-line workflow: build, search, apply, eval, tune-k and ablate.

Every command opens one workspace, does its stage and publishes its artifacts
atomically, so any command can be rerun or resumed after an interruption.
"""
import functools
import glob
import logging
import os
from concurrent.futures import ThreadPoolExecutor

import click
from flask import render_template
from werkzeug.utils import secure_filename

from . import DEFAULT_CONFIG, create_app, current_workspace
from .ablate import UNITS_NOTE, leave_one_out, load_categories
from .compiler import OK, CompileOutcome, Compiler, FlagCatalog, enumerate_flags
from .corpus import SPLIT_MODES, TRAIN, Corpus, ValidationSet, ingest, sample_validation, subsample_train
from .embed import (MODES, SRC, SRC_LEVELS, SRC_O0, SRC_TOPK, EmbedSettings, ProgramViews,
                    evaluate_mode, hash_features, ir_tokens, source_tokens)
from .errors import EXIT_PARTIAL, ConfigurationError, IrForgeError, IrParseError
from .fitness import GRANULARITIES, PARSE_ERROR, SRC_PROXIES, FitnessEvaluator, FitnessSettings, report_path
from .ga import MUTATION_MODES, Archive, GaConfig, run, smooth_trace, write_trace
from .irgraph import parse_ir
from .models import SqlFitnessMemo, quarantined_ids, quarantined_programs, record_baseline, sync_programs
from .vocab import BASELINE_MODES, Vocabulary, build_vocab
from .workspace import FORMATS, atomic_write_text, write_table

logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = ['program', 'rank', 'file', 'status', 'digest']
EVAL_COLUMNS = ['mode', 'map_at_r', 'ap', 'n_triplets', 'n_queries', 'excluded_classes']
TUNE_K_COLUMNS = ['k', 'map_at_r', 'ap', 'n_triplets', 'n_queries', 'excluded_classes']


class CommandError(click.ClickException):
    """A pipeline error reported on stderr with the exit code of its class."""

    def __init__(self, error):
        super().__init__(str(error))
        self.exit_code = error.exit_code


def reports_errors(f):
    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except IrForgeError as e:
            raise CommandError(e) from e
    return wrapper


workspace_option = click.option('--workspace', '-w', required=True, type=click.Path(file_okay=False),
                                help='Workspace directory holding every artifact.')
jobs_option = click.option('--jobs', '-j', type=click.IntRange(min=1),
                           help='Worker-pool size (default: JOBS, the logical CPU count).')
format_option = click.option('--format', 'fmt', type=click.Choice(FORMATS), default='tsv', show_default=True,
                             help='Report format.')


def fitness_options(f):
    """
    Adds the kernel, source-graph and OOV switches of the fitness function.

    The wrapped command receives them as one ``fitness_overrides`` mapping of config
    keys; switches left off keep the configured value.
    """
    @functools.wraps(f)
    def wrapper(*args, unlabeled, undirected, granularity, src_proxy, no_smoothing, oov_as_fraction,
                oov_baseline, **kwargs):
        kwargs['fitness_overrides'] = {
            'KERNEL_LABELED': False if unlabeled else None,
            'KERNEL_DIRECTED': False if undirected else None,
            'KERNEL_GRANULARITY': granularity,
            'SRC_PROXY': src_proxy,
            'OOV_SMOOTHING': False if no_smoothing else None,
            'OOV_AS_FRACTION': True if oov_as_fraction else None,
            'OOV_BASELINE': oov_baseline,
        }
        return f(*args, **kwargs)

    options = [
        click.option('--unlabeled', is_flag=True, help='Ignore node kinds in the graph kernel.'),
        click.option('--undirected', is_flag=True, help='Measure shortest paths ignoring edge direction.'),
        click.option('--granularity', type=click.Choice(GRANULARITIES),
                     help='Compare whole modules or name-matched functions.'),
        click.option('--src-proxy', type=click.Choice(SRC_PROXIES),
                     help='Stand-in for a source graph that cannot be built: o0 uses the -O0 IR, none scores 0.'),
        click.option('--no-smoothing', is_flag=True, help='Use the raw OOV ratio without +1 smoothing.'),
        click.option('--oov-as-fraction', is_flag=True, help='Count OOV statements as a share of all statements.'),
        click.option('--oov-baseline', type=click.Choice(BASELINE_MODES),
                     help='Vocabulary of the whole corpus, or of the corpus without the scored program.'),
    ]
    for option in reversed(options):
        wrapper = option(wrapper)
    return wrapper


def open_workspace(ctx, workspace, **overrides):
    """
    Creates the application for a workspace and applies command-line overrides.

    Parameters:
    ctx (click.Context): Carries the configuration object chosen on the group.
    workspace (str): Workspace directory.
    overrides: Config keys; None values leave the configured value.

    Returns:
    Flask: The application; callers push its app context.
    """
    app = create_app(workspace, ctx.obj['config_object'])
    app.config.update({k: v for k, v in overrides.items() if v is not None})
    return app


def load_artifacts(layout, vocabulary=True):
    """Loads the corpus index, flag catalog and (optionally) vocabulary written by build."""
    corpus = Corpus.load(layout.require(layout.corpus_index, 'build'))
    catalog = FlagCatalog.load(layout.require(layout.catalog, 'build'))
    vocab = Vocabulary.load(layout.require(layout.vocabulary, 'build')) if vocabulary else None
    return corpus, catalog, vocab


def load_archive(layout):
    return Archive.load(layout.require(layout.archive, 'search'))


def make_evaluator(config, compiler, catalog, vocab, corpus, quarantined):
    evaluator = FitnessEvaluator(compiler, catalog, vocab, corpus, FitnessSettings.from_config(config),
                                 jobs=config['JOBS'], quarantined=quarantined,
                                 fingerprint=compiler.fingerprint)
    evaluator.memo = SqlFitnessMemo(evaluator.settings_digest)
    return evaluator


def compile_each(compiler, records, transforms, jobs):
    """
    Compiles the baseline of every record and applies each transform to it.

    Parameters:
    compiler (Compiler): Cache-backed compiler.
    records (list[ProgramRecord]): Programs.
    transforms (list[callable]): IrText -> CompileOutcome, applied to the baseline IR.
    jobs (int): Worker-pool size.

    Returns:
    dict[str, list[CompileOutcome]]: One outcome per transform, by record id. A failed
        baseline stands in for every transform of its program.
    """
    def job(record):
        baseline = compiler.compile_baseline(record)
        if not baseline.ok:
            return [baseline] * len(transforms)
        return [transform(baseline.ir) for transform in transforms]

    with ThreadPoolExecutor(max_workers=jobs, thread_name_prefix='compile') as pool:
        return dict(zip((r.id for r in records), pool.map(job, records)))


def genome_transforms(compiler, catalog, vectors):
    return [functools.partial(_optimize, compiler, catalog, v) for v in vectors]


def _optimize(compiler, catalog, vector, ir):
    return compiler.optimize(ir, vector, catalog)


def _level(compiler, syntax, level, ir):
    return compiler.optimize_level(ir, level, syntax)


def _as_outcome(ir):
    return CompileOutcome(status=OK, ir=ir)


# Features of the embedding validator

def source_features(record, settings):
    return hash_features(source_tokens(record.read_source()), settings.dim, settings.hash_seed)


def ir_features(outcomes, settings, program_id):
    features = []
    for outcome in outcomes:
        if not outcome.ok:
            logger.warning('no IR view of %s: %s', program_id, outcome.status)
            continue
        try:
            module = parse_ir(outcome.ir)
        except IrParseError as e:
            logger.warning('IR view of %s does not parse: %s', program_id, e)
            continue
        features.append(hash_features(ir_tokens(module), settings.dim, settings.hash_seed))
    return features


def evaluation_row(key, evaluation):
    return (key, evaluation.result.map_at_r, evaluation.result.ap, evaluation.n_triplets,
            len(evaluation.result.per_query), ','.join(evaluation.excluded_classes))


def _echo_table(title, key, columns, rows):
    entries = [dict(zip(['key', *columns[1:]], row)) for row in rows]
    excluded = sorted({c for row in rows for c in row[-1].split(',') if c})
    click.echo(render_template('eval_summary.txt', title=title, key=key, rows=entries, excluded=excluded))


@click.group()
@click.option('--config-object', default=DEFAULT_CONFIG, show_default=True, envvar='IRFORGE_CONFIG_OBJECT',
              help='Configuration class, as an import path.')
@click.version_option(version='1.0.0', prog_name='irforge')
@click.pass_context
def cli(ctx, config_object):
    """Search optimizer flag sets whose IR stays structurally close to the source."""
    ctx.ensure_object(dict)
    ctx.obj['config_object'] = config_object


@cli.command()
@click.option('--corpus', 'corpus_dir', required=True, type=click.Path(exists=True, file_okay=False),
              help='Directory of .c/.cpp programs, one subdirectory per class unless --manifest is given.')
@click.option('--manifest', type=click.Path(exists=True, dir_okay=False),
              help='File of "relative/path<TAB>label" lines.')
@workspace_option
@jobs_option
@click.option('--split-mode', type=click.Choice(SPLIT_MODES), help='Hold out records or whole classes.')
@click.option('--test-fraction', type=click.FloatRange(0.0, 1.0), help='Share of the test split.')
@click.pass_context
@reports_errors
def build(ctx, corpus_dir, manifest, workspace, jobs, split_mode, test_fraction):
    """Ingest the corpus, compile the -O0 baselines, build the vocabulary and the flag catalog."""
    app = open_workspace(ctx, workspace, JOBS=jobs, TEST_SPLIT_MODE=split_mode, TEST_FRACTION=test_fraction)
    with app.app_context():
        layout, config = current_workspace(), app.config
        compiler = Compiler.from_config(config, layout.cache_dir)
        corpus, ingested = ingest(corpus_dir, manifest, config['TEST_SPLIT_MODE'], config['TEST_FRACTION'],
                                  config['SPLIT_SEED'])
        corpus.save(layout.corpus_index)
        sync_programs(corpus)

        outcomes = compile_each(compiler, list(corpus.records), [_as_outcome], config['JOBS'])
        modules, compiled = [], 0
        for record in corpus.records:
            outcome = outcomes[record.id][0]
            module = None
            if outcome.ok:
                try:
                    module = parse_ir(outcome.ir)
                except IrParseError as e:
                    logger.warning('baseline IR of %s does not parse: %s', record.id, e)
                    outcome = CompileOutcome(status=PARSE_ERROR, stderr_excerpt=str(e)[:config['STDERR_EXCERPT']])
            record_baseline(record.id, outcome)
            if module is not None:
                compiled += 1
                if corpus.split_of(record.id) == TRAIN:
                    modules.append(module)

        vocab = build_vocab(modules, corpus.digest, compiler.toolchain.version)
        vocab.save(layout.vocabulary)
        catalog = enumerate_flags(compiler.toolchain, config['FLAG_ALLOW'], config['FLAG_DENY'])
        if not len(catalog):
            logger.warning('the flag catalog is empty; search will refuse to start')
        catalog.save(layout.catalog)

        quarantined = quarantined_programs()
        click.echo(render_template('build_summary.txt', corpus=corpus, catalog=catalog, vocab=vocab,
                                   compiled=compiled, quarantined=quarantined, stats=compiler.stats,
                                   skipped=ingested.skipped))
    if quarantined:
        ctx.exit(EXIT_PARTIAL)


@cli.command()
@workspace_option
@click.option('--gens', type=click.IntRange(min=0), help='Generations N after the initial one.')
@click.option('--pop', type=click.IntRange(min=2), help='Population size M (even).')
@click.option('--topk', type=click.IntRange(min=1), help='Archive size K.')
@click.option('--seed', type=int, help='GA and validation-set seed.')
@click.option('--val-frac', type=click.FloatRange(0.0, 1.0, min_open=True), help='Validation fraction of the training split.')
@click.option('--resume', is_flag=True, help='Continue from the latest checkpoint.')
@click.option('--verify-cache', is_flag=True, default=None, help='Recompile 1% of cache hits and compare digests.')
@click.option('--mutation-mode', type=click.Choice(MUTATION_MODES),
              help='Flip a fixed number of bits per child, or each bit independently.')
@jobs_option
@format_option
@fitness_options
@click.pass_context
@reports_errors
def search(ctx, workspace, gens, pop, topk, seed, val_frac, resume, verify_cache, mutation_mode, jobs, fmt,
           fitness_overrides):
    """Run the genetic search and write the top-K archive, the trace and the checkpoints."""
    app = open_workspace(ctx, workspace, JOBS=jobs, VERIFY_CACHE=verify_cache, MUTATION_MODE=mutation_mode,
                         **fitness_overrides)
    with app.app_context():
        layout, config = current_workspace(), app.config
        corpus, catalog, vocab = load_artifacts(layout)
        if not len(catalog):
            raise ConfigurationError('the flag catalog is empty; relax FLAG_ALLOW/FLAG_DENY and rerun build')
        cfg = GaConfig.from_config(config, generations=gens, population_size=pop, top_k=topk,
                                   seed=seed).validate()
        validation = sample_validation(corpus, val_frac if val_frac is not None else config['VALIDATION_FRACTION'],
                                       cfg.seed, config['VALIDATION_STRATIFIED'])
        validation.save(layout.validation)
        quarantined = quarantined_ids()

        compiler = Compiler.from_config(config, layout.cache_dir)
        evaluator = make_evaluator(config, compiler, catalog, vocab, corpus, quarantined)
        guard = {'catalog': catalog.digest, 'settings': evaluator.settings_digest,
                 'validation': list(validation.member_ids)}
        if not resume:
            for path in glob.glob(os.path.join(layout.checkpoints_dir, 'gen-*.json')):
                os.unlink(path)

        batch = []

        def on_reports(reports):
            batch[:] = reports

        def on_generation(population, row):
            if config['WRITE_FITNESS_REPORTS']:
                for report in batch:
                    report.save(report_path(layout.reports_dir, population.generation, report))

        with evaluator:
            result = run(cfg, len(catalog), evaluator.batch_fitness(validation.member_ids, on_reports),
                         checkpoint_dir=layout.checkpoints_dir, resume=resume, guard=guard,
                         on_generation=on_generation)

        result.archive.save(layout.archive, catalog)
        write_trace(layout.path('reports', f'trace.{fmt}'), result.trace, fmt)
        smoothed = smooth_trace(result.trace)
        write_table(layout.path('reports', f'fitness-curve.{fmt}'), ['generation', 'best_F_smoothed'],
                    [(row.generation, s) for row, s in zip(result.trace, smoothed)], fmt)
        logger.info('compiler cache: %(hits)d hits, %(misses)d misses, %(verified)d verified, '
                    '%(mismatches)d mismatches', compiler.stats)
        click.echo(render_template('search_summary.txt', cfg=cfg, trace=result.trace, archive=result.archive,
                                   smoothed=smoothed, catalog=catalog, validation=validation,
                                   quarantined=quarantined))
    if quarantined:
        ctx.exit(EXIT_PARTIAL)


@cli.command('apply')
@workspace_option
@click.option('--out', required=True, type=click.Path(file_okay=False), help='Directory receiving the IR files.')
@click.option('--topk', type=click.IntRange(min=1), help='Use the best K archive entries (default: all).')
@jobs_option
@format_option
@click.pass_context
@reports_errors
def apply_sequences(ctx, workspace, out, topk, jobs, fmt):
    """Compile every training program with each archived flag set."""
    app = open_workspace(ctx, workspace, JOBS=jobs)
    with app.app_context():
        layout, config = current_workspace(), app.config
        corpus, catalog, _ = load_artifacts(layout, vocabulary=False)
        entries = load_archive(layout).entries[:topk]
        quarantined = quarantined_ids()
        programs = [r for r in corpus.train if r.id not in quarantined]

        compiler = Compiler.from_config(config, layout.cache_dir)
        outcomes = compile_each(compiler, programs, genome_transforms(compiler, catalog, [e.vector for e in entries]),
                                config['JOBS'])

        rows, failures, distinct = [], 0, 0
        for record in programs:
            digests = set()
            for rank, outcome in enumerate(outcomes[record.id], 1):
                name = None
                if outcome.ok:
                    name = f'{secure_filename(record.id)}.rank{rank}.ll'
                    atomic_write_text(os.path.join(out, name), outcome.ir.text)
                    digests.add(outcome.ir.digest)
                else:
                    failures += 1
                    logger.warning('rank %d on %s failed (%s)', rank, record.id, outcome.status)
                rows.append((record.id, rank, name, outcome.status, outcome.ir.digest if outcome.ok else None))
            if len(digests) >= 2:
                distinct += 1
        write_table(os.path.join(out, f'manifest.{fmt}'), MANIFEST_COLUMNS, rows, fmt)
        click.echo(f'irforge apply: {len(rows) - failures} IR files for {len(programs)} programs x '
                   f'{len(entries)} sequences in {out}; {failures} failed; '
                   f'{distinct} programs with at least 2 distinct outputs')
    if failures or quarantined:
        ctx.exit(EXIT_PARTIAL)


def _split_records(corpus, quarantined, train_frac, seed):
    if train_frac is not None:
        train_ids = subsample_train(corpus, train_frac, seed)
    else:
        train_ids = [r.id for r in corpus.train]
    train = [corpus.record(pid) for pid in train_ids if pid not in quarantined]
    test = [r for r in corpus.test if r.id not in quarantined]
    return train, test


def _mode_transforms(mode, compiler, catalog, layout, settings, topk):
    if mode == SRC:
        return []
    if mode == SRC_O0:
        return [_as_outcome]
    if mode == SRC_LEVELS:
        return [functools.partial(_level, compiler, catalog.syntax, level) for level in settings.levels]
    entries = load_archive(layout).entries[:topk]
    return genome_transforms(compiler, catalog, [e.vector for e in entries])


@cli.command('eval')
@workspace_option
@click.option('--mode', 'modes', multiple=True, type=click.Choice(MODES),
              help='Training views; repeat for a comparison table (default: src, src+o0, src+topk).')
@click.option('--seed', type=int, default=0, show_default=True, help='Training and triplet seed.')
@click.option('--train-frac', type=click.FloatRange(0.0, 1.0, min_open=True),
              help='Per-class share of the training split to train on.')
@click.option('--topk', type=click.IntRange(min=1), help='Archive entries used by src+topk (default: all).')
@jobs_option
@format_option
@click.pass_context
@reports_errors
def evaluate(ctx, workspace, modes, seed, train_frac, topk, jobs, fmt):
    """Train the embedding validator per mode and report MAP@R and AP on the test split."""
    modes = modes or (SRC, SRC_O0, SRC_TOPK)
    app = open_workspace(ctx, workspace, JOBS=jobs)
    with app.app_context():
        layout, config = current_workspace(), app.config
        corpus, catalog, _ = load_artifacts(layout, vocabulary=False)
        settings = EmbedSettings.from_config(config)
        train, test = _split_records(corpus, quarantined_ids(), train_frac, seed)
        test_views = {r.id: ProgramViews(r.class_label, source_features(r, settings)) for r in test}
        sources = {r.id: source_features(r, settings) for r in train}
        compiler = None

        rows = []
        for mode in modes:
            if mode != SRC and compiler is None:
                compiler = Compiler.from_config(config, layout.cache_dir)
            transforms = _mode_transforms(mode, compiler, catalog, layout, settings, topk)
            outcomes = compile_each(compiler, train, transforms, config['JOBS']) if transforms else {}
            views = {r.id: ProgramViews(r.class_label, sources[r.id],
                                        ir_features(outcomes.get(r.id, []), settings, r.id))
                     for r in train}
            rows.append(evaluation_row(mode, evaluate_mode(mode, views, test_views, settings, seed)))

        write_table(layout.path('reports', f'eval.{fmt}'), EVAL_COLUMNS, rows, fmt)
        _echo_table(f'irforge eval: {len(train)} training / {len(test)} test programs, seed {seed}',
                    'mode', EVAL_COLUMNS, rows)


@cli.command('tune-k')
@workspace_option
@click.option('--max-k', type=click.IntRange(min=1), default=7, show_default=True, help='Largest K tried.')
@click.option('--seed', type=int, default=0, show_default=True, help='Training and triplet seed.')
@click.option('--train-frac', type=click.FloatRange(0.0, 1.0, min_open=True),
              help='Per-class share of the training split to train on.')
@jobs_option
@format_option
@click.pass_context
@reports_errors
def tune_k(ctx, workspace, max_k, seed, train_frac, jobs, fmt):
    """Evaluate src+topk for K = 1..max-k and report one row per K."""
    app = open_workspace(ctx, workspace, JOBS=jobs)
    with app.app_context():
        layout, config = current_workspace(), app.config
        corpus, catalog, _ = load_artifacts(layout, vocabulary=False)
        entries = load_archive(layout).entries
        if max_k > len(entries):
            logger.warning('the archive holds %d entries; K is tuned up to %d', len(entries), len(entries))
            max_k = len(entries)
        if max_k < 1:
            raise ConfigurationError('the archive is empty; run search first')
        settings = EmbedSettings.from_config(config)
        train, test = _split_records(corpus, quarantined_ids(), train_frac, seed)
        test_views = {r.id: ProgramViews(r.class_label, source_features(r, settings)) for r in test}
        compiler = Compiler.from_config(config, layout.cache_dir)
        outcomes = compile_each(compiler, train, genome_transforms(compiler, catalog, [e.vector for e in entries[:max_k]]),
                                config['JOBS'])
        sources = {r.id: source_features(r, settings) for r in train}
        per_rank = {r.id: [ir_features([o], settings, r.id) for o in outcomes[r.id]] for r in train}

        rows = []
        for k in range(1, max_k + 1):
            views = {r.id: ProgramViews(r.class_label, sources[r.id],
                                        [f for features in per_rank[r.id][:k] for f in features])
                     for r in train}
            rows.append(evaluation_row(k, evaluate_mode(SRC_TOPK, views, test_views, settings, seed)))

        write_table(layout.path('reports', f'tune-k.{fmt}'), TUNE_K_COLUMNS, rows, fmt)
        _echo_table(f'irforge tune-k: src+topk for K = 1..{max_k}, seed {seed}', 'K', TUNE_K_COLUMNS, rows)


@cli.command()
@workspace_option
@click.option('--rank', type=int, default=1, show_default=True, help='Archive rank of the genome to ablate.')
@jobs_option
@format_option
@fitness_options
@click.pass_context
@reports_errors
def ablate(ctx, workspace, rank, jobs, fmt, fitness_overrides):
    """Measure each enabled flag's contribution by leaving it out."""
    app = open_workspace(ctx, workspace, JOBS=jobs, **fitness_overrides)
    with app.app_context():
        layout, config = current_workspace(), app.config
        corpus, catalog, vocab = load_artifacts(layout)
        archive = load_archive(layout)
        if not 1 <= rank <= len(archive):
            raise ConfigurationError(f'rank {rank} is outside the archive (1..{len(archive)})')
        validation = ValidationSet.load(layout.require(layout.validation, 'search'))
        categories = load_categories(config['FLAG_CATEGORIES_PATH'])

        compiler = Compiler.from_config(config, layout.cache_dir)
        with make_evaluator(config, compiler, catalog, vocab, corpus, quarantined_ids()) as evaluator:
            report = leave_one_out(evaluator, archive.entries[rank - 1].vector, validation.member_ids,
                                   catalog, categories)
        report.write(layout.path('reports', f'potency-rank{rank}.{fmt}'), fmt)
        click.echo(render_template('potency_summary.txt', rank=rank, report=report,
                                   totals=report.category_totals(), note=UNITS_NOTE))
