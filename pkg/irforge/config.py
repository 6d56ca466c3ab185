import os

# Determine the base directory of the application
basedir = os.path.abspath(os.path.dirname(__file__))


class Config(object):
    """
    Base configuration class with common settings.

    Every key can be overridden by an ``IRFORGE_``-prefixed environment variable
    (``IRFORGE_CC`` -> ``CC``) or by an ``irforge.json`` file in the workspace.

    Attributes:
    - CC (str): Frontend binary emitting textual IR. Falls back to ``clang`` on PATH.
    - OPT (str): Standalone IR optimizer binary. Falls back to ``opt`` on PATH.
    - JOBS (int): Worker-pool size for compilation and fitness evaluation.
    - LOG_LEVEL (str): Level of the application logger.
    - BASELINE_TIMEOUT (float): Seconds allowed for one -O0 compilation.
    - OPTIMIZE_TIMEOUT (float): Seconds allowed for one optimizer invocation.
    - MEMORY_LIMIT_MB (int): Address-space cap applied to toolchain processes (0 disables).
    - STDERR_EXCERPT (int): Maximum number of stderr characters kept per failure.
    - VERIFY_CACHE (bool): Recompile a deterministic 1% of cache hits and compare digests.
    - FLAG_ALLOW (list): fnmatch patterns a flag must match to enter the catalog (empty = all).
    - FLAG_DENY (list): fnmatch patterns excluding flags from the catalog.
    - WRITE_FITNESS_REPORTS (bool): Write one JSON report per evaluated genome and generation.
    - FLAG_CATEGORIES_PATH (str): JSON map of flag name to potency category.
    - SQLALCHEMY_DATABASE_URI (str): Set per workspace by ``create_app``.
    """
    CC = None
    OPT = None
    JOBS = os.cpu_count() or 1
    LOG_LEVEL = 'INFO'

    BASELINE_TIMEOUT = 30.0
    OPTIMIZE_TIMEOUT = 60.0
    MEMORY_LIMIT_MB = 2048
    STDERR_EXCERPT = 2000
    VERIFY_CACHE = False

    FLAG_ALLOW = []
    FLAG_DENY = ['-print*', '-view-*', '-dot-*', '-*-print*', '-verify*', '-debugify',
                 '-check-debugify', '-strip-debug-declare', 'print*', 'view-*', 'dot-*',
                 '*-printer', 'verify', 'invalidate*', 'require*']

    # Corpus and validation set
    TEST_SPLIT_MODE = 'record'
    TEST_FRACTION = 0.3
    SPLIT_SEED = 0
    VALIDATION_FRACTION = 0.05
    VALIDATION_STRATIFIED = False

    # Genetic search (population M, generations N, archive size K)
    POPULATION_SIZE = 20
    GENERATIONS = 800
    CROSSOVER_POINTS = 2
    CROSSOVER_PROB = 0.4
    MUTATION_RATE = 0.01
    MUTATION_MODE = 'count'
    TOP_K = 6
    INIT_DENSITY = 0.25
    SEED = 0

    # Fitness: kernel, OOV and source-graph options
    KERNEL_LABELED = True
    KERNEL_DIRECTED = True
    KERNEL_MAX_NODES = 4096
    KERNEL_GRANULARITY = 'module'
    SRC_PROXY = 'o0'
    MERGE_STATEMENTS = True
    OOV_SMOOTHING = True
    OOV_AS_FRACTION = False
    OOV_BASELINE = 'corpus'
    WRITE_FITNESS_REPORTS = True

    # Embedding validator
    EMBED_DIM = 2048
    EMBED_PROJECTION = 128
    EMBED_MARGIN = 0.5
    EMBED_STEPS = 200
    EMBED_LR = 0.5
    EMBED_HASH_SEED = 0
    EMBED_LEVELS = ['O1', 'O2', 'O3']

    FLAG_CATEGORIES_PATH = os.path.join(basedir, 'app', 'data', 'flag_categories.json')

    SQLALCHEMY_DATABASE_URI = None
    SQLALCHEMY_TRACK_MODIFICATIONS = False


class DevelopmentConfig(Config):
    """
    Development-specific configuration class.

    Inherits from the base Config class and overrides or extends it with development-specific settings.

    Attributes:
    - DEBUG (bool): Enables verbose logging of cache and pipeline decisions.
    - LOG_LEVEL (str): Debug output includes cache hits and misses.
    """
    DEBUG = True
    LOG_LEVEL = 'DEBUG'


class ProductionConfig(Config):
    """
    Production-specific configuration class, the default for the command line.

    Attributes:
    - DEBUG (bool): Disables debug output.
    """
    DEBUG = False


class TestingConfig(Config):
    """
    Configuration used by the unit tests: a single worker and short timeouts.
    """
    TESTING = True
    JOBS = 1
    LOG_LEVEL = 'WARNING'
    BASELINE_TIMEOUT = 20.0
    OPTIMIZE_TIMEOUT = 20.0
