import json
import os
import tempfile
from dataclasses import dataclass

from .errors import WorkspaceError

# Layout marker and the version it records
MARKER_FILE = 'irforge-workspace.json'
LAYOUT_VERSION = 1

# Report formats accepted by --format
FORMATS = ('tsv', 'json')


@dataclass(frozen=True)
class WorkspaceLayout:
    """
    Directory layout of a workspace.

    Attributes:
    - root (str): Absolute workspace directory; every command reads and writes only below it.
    """
    root: str

    def __post_init__(self):
        object.__setattr__(self, 'root', os.path.abspath(self.root))

    def path(self, *parts):
        """
        Joins parts below the workspace root, refusing paths that escape it.

        Returns:
        str: Absolute path inside the workspace.
        """
        full = os.path.abspath(os.path.join(self.root, *parts))
        if os.path.commonpath([full, self.root]) != self.root:
            raise WorkspaceError(f'{full} is outside the workspace {self.root}')
        return full

    @property
    def database(self):
        return self.path('workspace.db')

    @property
    def corpus_index(self):
        return self.path('corpus.json')

    @property
    def catalog(self):
        return self.path('catalog.json')

    @property
    def vocabulary(self):
        return self.path('vocabulary.txt')

    @property
    def validation(self):
        return self.path('validation.json')

    @property
    def archive(self):
        return self.path('archive.json')

    @property
    def cache_dir(self):
        return self.path('cache')

    @property
    def checkpoints_dir(self):
        return self.path('checkpoints')

    @property
    def reports_dir(self):
        return self.path('reports')

    def ensure(self):
        """
        Creates the directory skeleton and the versioned layout marker.

        Raises:
        WorkspaceError: If the marker names another layout version.
        """
        for directory in (self.root, self.cache_dir, self.checkpoints_dir, self.reports_dir):
            os.makedirs(directory, exist_ok=True)

        marker = self.path(MARKER_FILE)
        if os.path.exists(marker):
            with open(marker, encoding='utf-8') as f:
                version = json.load(f).get('layout')
            if version != LAYOUT_VERSION:
                raise WorkspaceError(
                    f'workspace layout {version} is not supported (expected {LAYOUT_VERSION})')
        else:
            atomic_write_json(marker, {'layout': LAYOUT_VERSION})

    def require(self, path, produced_by):
        """Raises WorkspaceError naming the command that produces a missing artifact."""
        if not os.path.exists(path):
            raise WorkspaceError(
                f'{os.path.relpath(path, self.root)} is missing; run `irforge {produced_by}` first')
        return path


def atomic_write_bytes(path, data):
    """
    Publishes data under path atomically: write to a temporary name, then rename.

    Parameters:
    path (str): Destination file.
    data (bytes): Content.
    """
    directory = os.path.dirname(path) or '.'
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix='.tmp-', suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode('utf-8'))


def dump_json(payload):
    """Serializes payload deterministically (sorted keys, fixed indent, trailing newline)."""
    return json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=False) + '\n'


def atomic_write_json(path, payload):
    atomic_write_text(path, dump_json(payload))


def read_json(path):
    with open(path, encoding='utf-8') as f:
        return json.load(f)


def _cell(value):
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return ''
    return str(value)


def format_table(columns, rows, fmt='tsv'):
    """
    Renders rows as a delimited table or a JSON list of objects.

    Parameters:
    columns (list[str]): Column names.
    rows (list[tuple]): Row values in column order.
    fmt (str): 'tsv' or 'json'.

    Returns:
    str: The rendered table.
    """
    if fmt == 'json':
        return dump_json([dict(zip(columns, row)) for row in rows])
    if fmt != 'tsv':
        raise WorkspaceError(f'unknown report format {fmt!r}; expected one of {FORMATS}')
    lines = ['\t'.join(columns)]
    lines.extend('\t'.join(_cell(v) for v in row) for row in rows)
    return '\n'.join(lines) + '\n'


def write_table(path, columns, rows, fmt='tsv'):
    atomic_write_text(path, format_table(columns, rows, fmt))
