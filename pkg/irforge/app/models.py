from app import db
from sqlalchemy.sql import func

# Constant for default datetime
DT = func.now()

# Baseline compilation states of a program
PENDING, OK = 'pending', 'ok'


class BaseModel(db.Model):
    """
    Base class for all SQLAlchemy models in the workspace database.

    Attributes:
    - id (int): Primary key for the model.
    - created_at (datetime): Timestamp of when the record was created, set by default to the current time.
    - updated_at (datetime): Timestamp of the last update to the record, updated automatically to the current time on record update.

    This class is abstract and is intended to be inherited by other models.
    """
    __abstract__ = True

    id = db.Column(db.Integer, primary_key=True, nullable=False)
    created_at = db.Column(db.DateTime(timezone=True), default=DT)
    updated_at = db.Column(db.DateTime(timezone=True), default=DT, onupdate=DT)


class Program(BaseModel):
    """
    One corpus record and the outcome of its baseline (-O0) compilation.

    Programs whose baseline failed are the run's quarantine list: search, apply
    and eval skip them.

    Attributes:
    - record_id (String): Stable corpus id (relative source path).
    - class_label (String): Task identity.
    - split (String): 'train' or 'test'.
    - content_hash (String): SHA-256 of the source bytes.
    - status (String): pending | ok | compile_error | timeout.
    - baseline_digest (String): Digest of the baseline IR when status is ok.
    - stderr_excerpt (Text): Bounded compiler diagnostics for failures.
    """
    __tablename__ = 'programs'

    record_id = db.Column(db.String(1024), unique=True, nullable=False)
    class_label = db.Column(db.String(255), nullable=False)
    split = db.Column(db.String(8), nullable=False)
    content_hash = db.Column(db.String(64), nullable=False)
    status = db.Column(db.String(16), nullable=False, default=PENDING)
    baseline_digest = db.Column(db.String(64))
    stderr_excerpt = db.Column(db.Text)

    def __repr__(self):
        return f"Program {self.id}: {self.record_id} [{self.split}] {self.status}"

    @property
    def quarantined(self):
        return self.status not in (PENDING, OK)


class FitnessMemo(BaseModel):
    """
    Persistent memo of one (program, genome) fitness evaluation.

    The settings digest covers the catalog, vocabulary and kernel/OOV options, so a
    memo row never answers for a differently configured evaluation.

    Attributes:
    - program_id (String): Corpus record id.
    - genome (String): Hex digest of the genome bit pattern.
    - settings (String): Digest of the evaluation settings.
    - sim_g (Float), oov_base (Integer), oov_opt (Integer), score (Float): Result detail.
    - status (String): ok or the fault that zeroed the score.
    - src_origin (String): 'source' or 'o0-proxy'.
    """
    __tablename__ = 'fitness_memo'
    __table_args__ = (db.UniqueConstraint('program_id', 'genome', 'settings'),)

    program_id = db.Column(db.String(1024), nullable=False)
    genome = db.Column(db.String(64), nullable=False, index=True)
    settings = db.Column(db.String(64), nullable=False)
    sim_g = db.Column(db.Float, nullable=False)
    oov_base = db.Column(db.Integer, nullable=False)
    oov_opt = db.Column(db.Integer, nullable=False)
    score = db.Column(db.Float, nullable=False)
    status = db.Column(db.String(32), nullable=False)
    src_origin = db.Column(db.String(16), nullable=False)

    def __repr__(self):
        return f"FitnessMemo {self.id}: {self.program_id} {self.genome[:12]} score={self.score}"


def sync_programs(corpus):
    """
    Mirrors the corpus index into the program table.

    Rows whose content hash changed go back to pending; rows no longer in the
    corpus are deleted.

    Parameters:
    corpus (Corpus): The ingested corpus.
    """
    existing = {p.record_id: p for p in Program.query.all()}
    wanted = set()
    for record in corpus.records:
        wanted.add(record.id)
        row = existing.get(record.id)
        if row is None:
            db.session.add(Program(record_id=record.id, class_label=record.class_label,
                                   split=corpus.split_of(record.id), content_hash=record.content_hash))
            continue
        row.class_label = record.class_label
        row.split = corpus.split_of(record.id)
        if row.content_hash != record.content_hash:
            row.content_hash = record.content_hash
            row.status, row.baseline_digest, row.stderr_excerpt = PENDING, None, None
    for record_id, row in existing.items():
        if record_id not in wanted:
            db.session.delete(row)
    db.session.commit()


def record_baseline(record_id, outcome):
    """
    Stores the baseline compile outcome of one program.

    Parameters:
    record_id (str): Corpus record id.
    outcome (CompileOutcome): Result of compile_baseline.
    """
    row = Program.query.filter_by(record_id=record_id).one()
    row.status = outcome.status
    row.baseline_digest = outcome.ir.digest if outcome.ir is not None else None
    row.stderr_excerpt = outcome.stderr_excerpt or None
    db.session.commit()


def quarantined_programs():
    """Returns the programs whose baseline compilation failed, ordered by record id."""
    return Program.query.filter(Program.status.notin_([PENDING, OK])).order_by(Program.record_id).all()


def quarantined_ids():
    return {row.record_id for row in quarantined_programs()}


class SqlFitnessMemo(object):
    """
    Fitness memo store backed by the FitnessMemo table.

    Only the thread that owns the application context reads or writes it; the
    fitness worker pool hands results back before they are stored.
    """

    def __init__(self, settings_digest):
        self.settings = settings_digest

    def get_many(self, genome, program_ids):
        rows = FitnessMemo.query.filter(
            FitnessMemo.genome == genome,
            FitnessMemo.settings == self.settings,
            FitnessMemo.program_id.in_(list(program_ids)),
        ).all()
        return {row.program_id: row for row in rows}

    def put_many(self, genome, results):
        for result in results:
            db.session.add(FitnessMemo(
                program_id=result.program_id, genome=genome, settings=self.settings,
                sim_g=result.sim_g, oov_base=result.oov_base, oov_opt=result.oov_opt,
                score=result.score, status=result.status, src_origin=result.src_origin))
        db.session.commit()
