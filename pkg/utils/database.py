"""Run registry helpers for pegnn.

Utilities provided:
- create the SQLite engine of the run registry
- create sessions
- append ``RunRecord`` rows for CLI invocations

The registry file defaults to `database/runs.db` (configurable via the
`PEGNN_REGISTRY_FILE` environment variable). The engine is created on first
use, after the parent directory exists, so importing this module never
touches the filesystem.

Copyright (c) Bryn Gwalad 2025
"""

import logging
import os
from datetime import datetime
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv
from sqlalchemy.engine import Engine
from sqlmodel import Session, SQLModel, create_engine, select

# Load environment variables from .env if present
load_dotenv()

from pegnn.models import RunRecord, utcnow

logger = logging.getLogger("pegnn.registry")

_engines = {}


def registry_file() -> str:
    return os.getenv("PEGNN_REGISTRY_FILE", "database/runs.db")


def get_engine() -> Engine:
    """Engine for the current registry file, created once per path."""
    path = registry_file()
    if path not in _engines:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        _engines[path] = create_engine(f"sqlite:///{path}", echo=False)
    return _engines[path]


def init_db() -> None:
    """Create the registry tables from SQLModel metadata."""
    SQLModel.metadata.create_all(get_engine())


def get_session() -> Session:
    return Session(get_engine())


def log_run(
    command: str,
    status: str,
    exit_code: Optional[int] = None,
    manifest_path: Optional[str] = None,
    started_at: Optional[datetime] = None,
    finished_at: Optional[datetime] = None,
    session: Optional[Session] = None,
) -> Optional[RunRecord]:
    """Append a RunRecord. If a Session is provided it will be used,
    otherwise a short-lived one will be created.

    Registry failures are logged and swallowed; the registry is an audit trail
    and never decides whether a command succeeded.
    """
    entry = RunRecord(
        command=command,
        status=status,
        exit_code=exit_code,
        manifest_path=manifest_path,
        started_at=started_at or utcnow(),
        finished_at=finished_at or utcnow(),
    )
    own_session = False
    try:
        if session is None:
            init_db()
            session = get_session()
            own_session = True
        session.add(entry)
        session.commit()
        session.refresh(entry)
        return entry
    except Exception:
        logger.exception("could not record %s run in the registry", command)
        return None
    finally:
        if own_session and session is not None:
            session.close()


def list_runs(command: Optional[str] = None, session: Optional[Session] = None) -> List[RunRecord]:
    """Registry rows in insertion order, optionally for one command."""
    own_session = session is None
    session = session or get_session()
    try:
        statement = select(RunRecord).order_by(RunRecord.id)
        if command is not None:
            statement = statement.where(RunRecord.command == command)
        return list(session.exec(statement).all())
    finally:
        if own_session:
            session.close()
