"""
Run Registry Connection Management
Engine and session handling for the run registry database
"""
import logging
import os
from contextlib import contextmanager

from dotenv import load_dotenv
from sqlalchemy import create_engine
from sqlalchemy.orm import declarative_base, sessionmaker

load_dotenv()

logger = logging.getLogger(__name__)

DEFAULT_DATABASE_URL = 'sqlite:///sop_runs.db'

# Base class for all registry models
Base = declarative_base()

_engines = {}


def database_url():
    """Registry URL from SOP_DATABASE_URL, defaulting to a local SQLite file"""
    return os.getenv('SOP_DATABASE_URL') or DEFAULT_DATABASE_URL


def get_engine(url=None):
    """One engine per URL, created on first use"""
    url = url or database_url()
    if url not in _engines:
        _engines[url] = create_engine(url, pool_pre_ping=True, echo=False)
    return _engines[url]


def init_db(url=None):
    """Create all registry tables (idempotent)"""
    import app.models  # noqa: F401  registers the models
    engine = get_engine(url)
    Base.metadata.create_all(bind=engine)
    logger.debug("run registry ready at %s", engine.url)
    return engine


@contextmanager
def get_db(url=None):
    """
    Session scope for registry writes

    Usage:
        with get_db() as db:
            db.add(record)
    Commits on success, rolls back on error.
    """
    db = sessionmaker(autocommit=False, autoflush=False, bind=init_db(url))()
    try:
        yield db
        db.commit()
    except Exception:
        db.rollback()
        raise
    finally:
        db.close()
