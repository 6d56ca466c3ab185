import json

from flask import Flask, current_app
from flask_sqlalchemy import SQLAlchemy

from .workspace import WorkspaceLayout

# Configuration loaded when no other object is named
DEFAULT_CONFIG = 'config.ProductionConfig'

# Optional per-workspace overrides, JSON mapping of config keys
WORKSPACE_CONFIG_FILE = 'irforge.json'

# Environment prefix: IRFORGE_CC -> CC, IRFORGE_OPT -> OPT
ENV_PREFIX = 'IRFORGE'

# Workspace database holding the program table and the fitness memo
db = SQLAlchemy()


def create_app(workspace, config_object=DEFAULT_CONFIG):
    """
    Creates the application bound to one workspace directory.

    The application is used headless: it carries the layered configuration, the
    logger every module logs through, the workspace database and the report templates.

    Parameters:
    workspace (str): Workspace root directory, created if missing.
    config_object (str | object): Configuration class or import path.

    Returns:
    Flask: The configured application.
    """
    app = Flask(__name__)

    # Class defaults, then IRFORGE_* environment, then the workspace file
    app.config.from_object(config_object)
    app.config.from_prefixed_env(ENV_PREFIX)

    layout = WorkspaceLayout(workspace)
    layout.ensure()
    app.config.from_file(layout.path(WORKSPACE_CONFIG_FILE), load=json.load, silent=True)

    app.config['SQLALCHEMY_DATABASE_URI'] = 'sqlite:///' + layout.database
    app.extensions['irforge.workspace'] = layout

    db.init_app(app)
    configure_logging(app)

    with app.app_context():
        from . import models  # noqa: F401  (registers the tables)
        db.create_all()

    return app


def configure_logging(app):
    """
    Sets the level of the application logger.

    Module loggers (``app.compiler``, ``app.ga``, ...) are children of ``app.logger``
    and share its handler.

    Parameters:
    app: The Flask application instance.
    """
    app.logger.setLevel(app.config.get('LOG_LEVEL', 'INFO'))


def current_workspace():
    """Returns the WorkspaceLayout of the active application."""
    return current_app.extensions['irforge.workspace']
