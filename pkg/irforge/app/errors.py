"""Exception hierarchy shared by the pipeline stages and mapped to exit codes by the CLI."""

# Exit codes
EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_USAGE = 2


class IrForgeError(Exception):
    """Base class of every error raised on purpose by irforge."""
    exit_code = EXIT_PARTIAL


class ConfigurationError(IrForgeError):
    """Invalid option, parameter range or workspace state."""
    exit_code = EXIT_USAGE


class ToolchainError(IrForgeError):
    """The frontend or optimizer binary cannot be found or queried."""
    exit_code = EXIT_USAGE


class CorpusError(IrForgeError):
    """Empty corpus, malformed manifest or zero compilable programs."""


class WorkspaceError(IrForgeError):
    """A workspace artifact is missing, of another layout version or corrupt."""


class IrParseError(IrForgeError):
    """Textual IR outside the supported grammar."""

    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f'line {line}: {message}' if line is not None else message)


class SourceParseError(IrForgeError):
    """Source text the C-subset parser cannot turn into a CFG."""


class FitnessError(IrForgeError):
    """Fitness arithmetic that is undefined under the selected options."""


class EmbeddingError(IrForgeError):
    """Shape mismatch or invalid input to the embedding validator."""


class TrainingDivergedError(EmbeddingError):
    """Triplet training produced a non-finite loss."""
