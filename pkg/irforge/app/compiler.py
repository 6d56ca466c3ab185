"""
Driver of the external LLVM toolchain with a content-addressed IR cache.

The frontend (``IRFORGE_CC``) emits the -O0 baseline IR of a program; the standalone
optimizer (``IRFORGE_OPT``) applies a flag subset to it. Every result is cached on
disk under ``cache/<first-2-hex>/<key>.ll`` with a JSON sidecar, published atomically.
"""
import fnmatch
import hashlib
import logging
import os
import platform
import re
import shutil
import subprocess
import threading
import time
from dataclasses import dataclass, field

try:
    import resource
except ImportError:  # not POSIX
    resource = None

from .errors import ConfigurationError, ToolchainError, WorkspaceError
from .workspace import atomic_write_json, atomic_write_text, read_json

logger = logging.getLogger(__name__)

# IR producers
BASELINE, OPTIMIZED = 'baseline', 'optimized'

# Compile outcome states
OK, COMPILE_ERROR, TIMEOUT = 'ok', 'compile_error', 'timeout'

# Pass invocation syntaxes of the optimizer
LEGACY, NEW_PM = 'legacy', 'new-pm'

# Standard optimization levels accepted by optimize_level
OPT_LEVELS = ('O1', 'O2', 'O3', 'Os', 'Oz')

CATALOG_VERSION = 1

# Frontend contract: human-readable IR, no optimization, no debug info. optnone is
# disabled so the optimizer actually transforms -O0 functions.
FRONTEND_ARGS = ['-S', '-emit-llvm', '-O0', '-Xclang', '-disable-O0-optnone', '-g0', '-o', '-']

REMEDIATION = ('set IRFORGE_CC to a clang binary and IRFORGE_OPT to the matching opt '
               'binary, or put both on PATH')

VERSION_RE = re.compile(r'LLVM version ([\w.\-+]+)')
TARGET_RE = re.compile(r'Default target:\s*(\S+)')


@dataclass(frozen=True)
class FlagCatalog:
    """
    Ordered optimizer flags forming the genome's index space.

    Attributes:
    - flags (tuple[str]): Flag names beginning with '-', unique, in the optimizer's listing order.
    - platform (str): Target triple or machine the catalog was taken on.
    - toolchain_version (str): Optimizer version string.
    - syntax (str): 'legacy' (``opt -flag``) or 'new-pm' (``opt -passes=``).
    """
    flags: tuple
    platform: str
    toolchain_version: str
    syntax: str = LEGACY

    def __post_init__(self):
        if len(set(self.flags)) != len(self.flags):
            raise ConfigurationError('flag catalog contains duplicate names')
        bad = [f for f in self.flags if not f.startswith('-')]
        if bad:
            raise ConfigurationError(f'flag names must begin with "-": {bad[:3]}')

    def __len__(self):
        return len(self.flags)

    @property
    def digest(self):
        h = hashlib.sha256()
        h.update(f'{self.syntax}\n{self.toolchain_version}\n'.encode())
        h.update('\n'.join(self.flags).encode())
        return h.hexdigest()

    def index(self, flag):
        return self.flags.index(flag)

    def enabled_flags(self, vector):
        """Returns the enabled flag names of a genome, in catalog order."""
        if len(vector) != len(self.flags):
            raise ConfigurationError(
                f'genome length {len(vector)} does not match catalog length {len(self.flags)}')
        return [self.flags[i] for i in vector.enabled_indices()]

    def to_dict(self):
        return {'version': CATALOG_VERSION, 'flags': list(self.flags), 'platform': self.platform,
                'toolchain_version': self.toolchain_version, 'syntax': self.syntax,
                'length': len(self.flags)}

    def save(self, path):
        atomic_write_json(path, self.to_dict())

    @classmethod
    def load(cls, path):
        payload = read_json(path)
        if payload.get('version') != CATALOG_VERSION:
            raise WorkspaceError(f'flag catalog {path} has unsupported version')
        return cls(flags=tuple(payload['flags']), platform=payload['platform'],
                   toolchain_version=payload['toolchain_version'],
                   syntax=payload.get('syntax', LEGACY))


def text_digest(text):
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


@dataclass(frozen=True)
class IrText:
    """
    Textual IR of one program.

    Attributes:
    - text (str): UTF-8 textual IR.
    - producer (str): 'baseline' or 'optimized'.
    - program_id (str): Corpus record id.
    - genome (str | None): Bit string of the genome for optimized IR, or the level name
      ('O2') for standard-level IR.
    - digest (str): SHA-256 of text.
    """
    text: str
    producer: str
    program_id: str
    genome: str = None
    digest: str = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, 'digest', text_digest(self.text))


@dataclass(frozen=True)
class CompileOutcome:
    """
    Result of one toolchain invocation.

    Attributes:
    - status (str): ok | compile_error | timeout.
    - ir (IrText | None): Present iff status is ok.
    - stderr_excerpt (str): Bounded diagnostics.
    - wall_time (float): Seconds spent, near zero on cache hits.
    - cached (bool): Whether the outcome came from the cache.
    """
    status: str
    ir: IrText = None
    stderr_excerpt: str = ''
    wall_time: float = 0.0
    cached: bool = False

    def __post_init__(self):
        if (self.ir is not None) != (self.status == OK):
            raise ValueError('CompileOutcome.ir must be present iff status is ok')

    @property
    def ok(self):
        return self.status == OK


class Toolchain(object):
    """
    Resolved frontend and optimizer binaries and their identity.

    Attributes:
    - cc (str): Frontend path.
    - opt (str): Optimizer path.
    """

    def __init__(self, cc, opt):
        self.cc = cc
        self.opt = opt
        self._lock = threading.Lock()
        self._version_text = None

    @classmethod
    def from_config(cls, config):
        """
        Resolves CC/OPT from configuration (IRFORGE_CC/IRFORGE_OPT) or PATH.

        Raises:
        ToolchainError: With a remediation hint when a binary is missing.
        """
        cc = _resolve(config.get('CC'), ('clang',))
        opt = _resolve(config.get('OPT'), ('opt',))
        missing = [name for name, path in (('IRFORGE_CC', cc), ('IRFORGE_OPT', opt)) if path is None]
        if missing:
            raise ToolchainError(f'{", ".join(missing)} not set and not found on PATH; {REMEDIATION}')
        return cls(cc, opt)

    def query(self, *args):
        try:
            proc = subprocess.run([self.opt, *args], capture_output=True, text=True, timeout=60)
        except (OSError, subprocess.TimeoutExpired) as e:
            raise ToolchainError(f'cannot run optimizer {self.opt}: {e}; {REMEDIATION}') from e
        return proc.stdout + proc.stderr

    @property
    def version_text(self):
        with self._lock:
            if self._version_text is None:
                self._version_text = self.query('--version')
        return self._version_text

    @property
    def version(self):
        match = VERSION_RE.search(self.version_text)
        return match.group(1) if match else self.version_text.strip().splitlines()[0]

    @property
    def platform(self):
        match = TARGET_RE.search(self.version_text)
        return match.group(1) if match else platform.machine()

    @property
    def fingerprint(self):
        """Digest identifying both binaries; part of every cache key."""
        try:
            cc_version = subprocess.run([self.cc, '--version'], capture_output=True, text=True,
                                        timeout=60).stdout
        except (OSError, subprocess.TimeoutExpired) as e:
            raise ToolchainError(f'cannot run frontend {self.cc}: {e}; {REMEDIATION}') from e
        return hashlib.sha256((cc_version + self.version_text).encode()).hexdigest()


def _resolve(configured, fallbacks):
    if configured:
        return configured if os.path.exists(configured) else shutil.which(configured)
    for name in fallbacks:
        path = shutil.which(name)
        if path:
            return path
    return None


def parse_legacy_help(text):
    """
    Extracts flag names from the "Optimizations available:" section of ``opt --help``.

    Multi-character pass names are listed as ``--adce`` since LLVM 10 and as ``-adce``
    before; both are returned with a single dash, the spelling ``opt`` accepts for passes.

    Returns:
    list[str]: Flags in listing order.
    """
    flags, indent = [], None
    for line in text.splitlines():
        stripped = line.strip()
        if indent is None:
            if stripped.startswith('Optimizations available'):
                indent = len(line) - len(line.lstrip())
            continue
        if not stripped:
            continue
        if len(line) - len(line.lstrip()) <= indent:
            break
        token = stripped.split()[0]
        name = token.lstrip('-').split('=')[0]
        if token.startswith('-') and name:
            flags.append('-' + name)
    return flags


def parse_print_passes(text):
    """
    Extracts transform pass names from ``opt --print-passes`` (new pass manager).

    Analyses, machine passes and parameterized variants are skipped.
    """
    flags, active = [], False
    for line in text.splitlines():
        if not line.startswith(' ') and line.rstrip().endswith(':'):
            header = line.strip().lower()
            active = header.endswith('passes:') and 'machine' not in header and 'params' not in header
            continue
        name = line.strip()
        if active and name:
            flags.append('-' + name.split('<')[0])
    return flags


def enumerate_flags(toolchain, allow=(), deny=()):
    """
    Lists the optimizer's transform flags for the host target.

    Parameters:
    toolchain (Toolchain): Resolved binaries.
    allow (list[str]): fnmatch patterns; when non-empty a flag must match one.
    deny (list[str]): fnmatch patterns excluding flags.

    Returns:
    FlagCatalog: Flags in the optimizer's own listing order.

    Raises:
    ToolchainError: If the optimizer cannot be run.
    """
    help_text = toolchain.query('--help')
    if 'Optimizations available' in help_text:
        syntax, raw = LEGACY, parse_legacy_help(help_text)
    else:
        syntax, raw = NEW_PM, parse_print_passes(toolchain.query('--print-passes'))

    seen, flags = set(), []
    for flag in raw:
        if flag in seen:
            continue
        seen.add(flag)
        if allow and not any(fnmatch.fnmatchcase(flag, p) for p in allow):
            continue
        if any(fnmatch.fnmatchcase(flag, p) for p in deny):
            continue
        flags.append(flag)

    catalog = FlagCatalog(flags=tuple(flags), platform=toolchain.platform,
                          toolchain_version=toolchain.version, syntax=syntax)
    logger.info('flag catalog: %d flags (%s syntax, LLVM %s)', len(catalog), syntax, catalog.toolchain_version)
    return catalog


class IrCache(object):
    """
    Content-addressed store of compile outcomes.

    Layout: ``<root>/<key[:2]>/<key>.ll`` plus ``<key>.json`` sidecar. The sidecar is
    published last, so its presence marks a complete entry. Readers never lock;
    writers of one key race harmlessly because both publish identical content.
    """

    def __init__(self, root):
        self.root = root

    def _paths(self, key):
        directory = os.path.join(self.root, key[:2])
        return os.path.join(directory, key + '.ll'), os.path.join(directory, key + '.json')

    def get(self, key):
        ir_path, meta_path = self._paths(key)
        if not os.path.exists(meta_path):
            return None
        try:
            meta = read_json(meta_path)
            if meta['status'] != OK:
                return CompileOutcome(status=meta['status'], stderr_excerpt=meta.get('stderr', ''),
                                      cached=True)
            with open(ir_path, encoding='utf-8') as f:
                text = f.read()
        except (OSError, ValueError, KeyError) as e:
            logger.warning('discarding unreadable cache entry %s: %s', key, e)
            return None
        ir = IrText(text=text, producer=meta['producer'], program_id=meta['program_id'],
                    genome=meta.get('genome'))
        if ir.digest != meta['digest']:
            logger.warning('cache entry %s does not match its recorded digest; recompiling', key)
            return None
        return CompileOutcome(status=OK, ir=ir, stderr_excerpt=meta.get('stderr', ''), cached=True)

    def put(self, key, outcome, program_id):
        ir_path, meta_path = self._paths(key)
        meta = {'status': outcome.status, 'stderr': outcome.stderr_excerpt, 'program_id': program_id}
        if outcome.ir is not None:
            atomic_write_text(ir_path, outcome.ir.text)
            meta.update(producer=outcome.ir.producer, genome=outcome.ir.genome, digest=outcome.ir.digest)
        atomic_write_json(meta_path, meta)


def _cache_key(*parts):
    return hashlib.sha256('\x1f'.join(str(p) for p in parts).encode()).hexdigest()


class Compiler(object):
    """
    Produces baseline and optimized IR through the cache.

    Public operations are safe to call from multiple worker threads.

    Attributes:
    - toolchain (Toolchain): Binaries in use.
    - cache (IrCache): Outcome store.
    - stats (dict): hits, misses, verified and mismatches counters.
    """

    def __init__(self, toolchain, cache, baseline_timeout=30.0, optimize_timeout=60.0,
                 memory_limit_mb=2048, stderr_limit=2000, verify_cache=False):
        self.toolchain = toolchain
        self.cache = cache
        self.baseline_timeout = baseline_timeout
        self.optimize_timeout = optimize_timeout
        self.memory_limit_mb = memory_limit_mb
        self.stderr_limit = stderr_limit
        self.verify_cache = verify_cache
        self.stats = {'hits': 0, 'misses': 0, 'verified': 0, 'mismatches': 0}
        self._lock = threading.Lock()
        self._fingerprint = None

    @classmethod
    def from_config(cls, config, cache_dir):
        return cls(Toolchain.from_config(config), IrCache(cache_dir),
                   baseline_timeout=config['BASELINE_TIMEOUT'],
                   optimize_timeout=config['OPTIMIZE_TIMEOUT'],
                   memory_limit_mb=config['MEMORY_LIMIT_MB'],
                   stderr_limit=config['STDERR_EXCERPT'],
                   verify_cache=config['VERIFY_CACHE'])

    @property
    def fingerprint(self):
        with self._lock:
            if self._fingerprint is None:
                self._fingerprint = self.toolchain.fingerprint
        return self._fingerprint

    def _count(self, name):
        with self._lock:
            self.stats[name] += 1

    def _memory_cap(self):
        """Returns the preexec_fn capping a child's address space, or None when uncapped."""
        if not self.memory_limit_mb or resource is None:
            return None
        cap = self.memory_limit_mb * 1024 * 1024

        def limit():
            try:
                resource.setrlimit(resource.RLIMIT_AS, (cap, cap))
            except (OSError, ValueError):
                # Cap above the inherited hard limit; keep the inherited one
                pass

        return limit

    def _run(self, cmd, stdin_text, timeout):
        """
        Runs one toolchain command.

        Returns:
        tuple[str, str, str, float]: status, stdout, stderr excerpt, wall time.
        """
        start = time.monotonic()
        try:
            proc = subprocess.Popen(cmd, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                    stderr=subprocess.PIPE, text=True, encoding='utf-8',
                                    errors='replace', preexec_fn=self._memory_cap())
        except OSError as e:
            raise ToolchainError(f'cannot execute {cmd[0]}: {e}; {REMEDIATION}') from e
        try:
            stdout, stderr = proc.communicate(stdin_text, timeout=timeout)
        except subprocess.TimeoutExpired:
            proc.kill()
            _, stderr = proc.communicate()
            return TIMEOUT, '', f'timed out after {timeout:g}s\n{stderr}'[:self.stderr_limit], \
                time.monotonic() - start
        status = OK if proc.returncode == 0 else COMPILE_ERROR
        excerpt = (stderr or '')[:self.stderr_limit]
        if status == COMPILE_ERROR and not excerpt:
            excerpt = f'{os.path.basename(cmd[0])} exited with status {proc.returncode}'
        return status, stdout, excerpt, time.monotonic() - start

    def _through_cache(self, key, program_id, produce):
        start = time.monotonic()
        hit = self.cache.get(key)
        if hit is not None:
            if self.verify_cache and int(key[:8], 16) % 100 == 0:
                return self._verify(key, program_id, hit, produce)
            self._count('hits')
            logger.debug('cache hit %s (%s)', key[:12], program_id)
            ir = hit.ir
            if ir is not None and ir.program_id != program_id:
                # Identical sources share a baseline entry
                ir = IrText(text=ir.text, producer=ir.producer, program_id=program_id, genome=ir.genome)
            return CompileOutcome(status=hit.status, ir=ir, stderr_excerpt=hit.stderr_excerpt,
                                  wall_time=time.monotonic() - start, cached=True)
        self._count('misses')
        outcome = produce()
        if outcome.status != TIMEOUT:
            self.cache.put(key, outcome, program_id)
        return outcome

    def _verify(self, key, program_id, hit, produce):
        fresh = produce()
        self._count('verified')
        if fresh.status == TIMEOUT:
            return hit
        same = fresh.status == hit.status and (fresh.ir is None or fresh.ir.digest == hit.ir.digest)
        if not same:
            self._count('mismatches')
            logger.warning('cache verification mismatch for %s (%s); replacing entry', key[:12], program_id)
            self.cache.put(key, fresh, program_id)
        return fresh

    def compile_baseline(self, record):
        """
        Emits the -O0 baseline IR of a program.

        The frontend output is passed once through the optimizer without passes so that
        it is printed exactly as every later optimizer run prints it.

        Parameters:
        record (ProgramRecord): Program to compile.

        Returns:
        CompileOutcome: ok, compile_error or timeout (the latter two quarantine the program).
        """
        key = _cache_key('baseline', self.fingerprint, record.content_hash, record.language)

        def produce():
            status, out, err, wall = self._run([self.toolchain.cc, *FRONTEND_ARGS, record.source_path],
                                               None, self.baseline_timeout)
            if status != OK:
                return CompileOutcome(status=status, stderr_excerpt=err, wall_time=wall)
            status, text, err2, wall2 = self._run([self.toolchain.opt, '-S', '-o', '-', '-'],
                                                  out, self.baseline_timeout)
            if status != OK:
                return CompileOutcome(status=status, stderr_excerpt=err2, wall_time=wall + wall2)
            ir = IrText(text=text, producer=BASELINE, program_id=record.id)
            return CompileOutcome(status=OK, ir=ir, stderr_excerpt=err, wall_time=wall + wall2)

        outcome = self._through_cache(key, record.id, produce)
        if not outcome.ok:
            logger.warning('baseline of %s failed (%s): %s', record.id, outcome.status,
                           outcome.stderr_excerpt.splitlines()[0] if outcome.stderr_excerpt else '')
        return outcome

    def _pass_args(self, catalog, flags):
        if catalog.syntax == NEW_PM:
            return [f'-passes={",".join(f.lstrip("-") for f in flags)}'] if flags else []
        return list(flags)

    def optimize(self, ir, vector, catalog):
        """
        Applies the enabled flags of a genome to baseline IR with one optimizer run.

        Flags are passed once each, in catalog order.

        Parameters:
        ir (IrText): Baseline IR.
        vector (FlagVector): Genome over the catalog.
        catalog (FlagCatalog): Flag index space.

        Returns:
        CompileOutcome: Optimized IR, or the compile_error/timeout fault.
        """
        if ir.producer != BASELINE:
            raise ConfigurationError('optimize expects baseline IR')
        flags = catalog.enabled_flags(vector)
        key = _cache_key('optimize', self.fingerprint, catalog.digest, ir.digest, vector.digest)
        cmd = [self.toolchain.opt, '-S', *self._pass_args(catalog, flags), '-o', '-', '-']

        def produce():
            status, text, err, wall = self._run(cmd, ir.text, self.optimize_timeout)
            if status != OK:
                return CompileOutcome(status=status, stderr_excerpt=err, wall_time=wall)
            out = IrText(text=text, producer=OPTIMIZED, program_id=ir.program_id,
                         genome=vector.to_string())
            return CompileOutcome(status=OK, ir=out, stderr_excerpt=err, wall_time=wall)

        return self._through_cache(key, ir.program_id, produce)

    def optimize_level(self, ir, level, catalog_syntax=LEGACY):
        """
        Applies a standard optimization level (O1, O2, O3, Os, Oz) to baseline IR.
        """
        if level not in OPT_LEVELS:
            raise ConfigurationError(f'unknown optimization level {level!r}; expected one of {OPT_LEVELS}')
        if ir.producer != BASELINE:
            raise ConfigurationError('optimize_level expects baseline IR')
        args = [f'-passes=default<{level}>'] if catalog_syntax == NEW_PM else [f'-{level}']
        key = _cache_key('level', self.fingerprint, catalog_syntax, ir.digest, level)
        cmd = [self.toolchain.opt, '-S', *args, '-o', '-', '-']

        def produce():
            status, text, err, wall = self._run(cmd, ir.text, self.optimize_timeout)
            if status != OK:
                return CompileOutcome(status=status, stderr_excerpt=err, wall_time=wall)
            out = IrText(text=text, producer=OPTIMIZED, program_id=ir.program_id, genome=level)
            return CompileOutcome(status=OK, ir=out, stderr_excerpt=err, wall_time=wall)

        return self._through_cache(key, ir.program_id, produce)
