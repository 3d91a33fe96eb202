"""
Logging Setup
Single stream handler for the CLI; level from SOP_LOG_LEVEL or --log-level
"""
import logging
import os

from dotenv import load_dotenv

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'


def configure_logging(level=None):
    """Configure the root logger once; later calls only change the level"""
    load_dotenv()
    level = (level or os.getenv('SOP_LOG_LEVEL') or 'INFO').upper()
    root = logging.getLogger()
    if not any(getattr(h, '_sop_handler', False) for h in root.handlers):
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handler._sop_handler = True
        root.addHandler(handler)
    root.setLevel(getattr(logging, level, logging.INFO))
    return root
