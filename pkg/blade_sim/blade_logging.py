"""
Logging setup for blade-sim (plain or JSON lines)
"""
import logging

from pythonjsonlogger import jsonlogger

PLAIN_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
JSON_FIELDS = '%(asctime)s %(name)s %(levelname)s %(message)s'


def setup_logging(level: str = "INFO", json_format: bool = False) -> None:
    """Configure the root logger once; later calls only adjust the level"""
    root = logging.getLogger()
    root.setLevel(level.upper())

    if getattr(setup_logging, "_configured", False):
        return

    handler = logging.StreamHandler()
    if json_format:
        handler.setFormatter(jsonlogger.JsonFormatter(JSON_FIELDS))
    else:
        handler.setFormatter(logging.Formatter(PLAIN_FORMAT))
    root.addHandler(handler)
    setup_logging._configured = True
