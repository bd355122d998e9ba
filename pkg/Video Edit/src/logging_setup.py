#!/usr/bin/env python3
"""
Logging setup
Coloured console output plus an optional JSON-lines file for structured events
"""

import json
import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Iterator, List, Optional

import colorlog

# Attributes every LogRecord has; anything else came in through `extra=`
_RESERVED = set(vars(logging.LogRecord("", 0, "", 0, "", (), None))) | {"message", "asctime"}


class JsonLinesFormatter(logging.Formatter):
    """Formats a record and its `extra` fields as one JSON object"""

    def format(self, record: logging.LogRecord) -> str:
        payload = {
            "time": self.formatTime(record, "%Y-%m-%dT%H:%M:%S"),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }
        for key, value in record.__dict__.items():
            if key not in _RESERVED and not key.startswith("_"):
                payload[key] = value
        return json.dumps(payload, default=str, sort_keys=True)


class EventFilter(logging.Filter):
    """Passes only records that carry an `event` attribute"""

    def filter(self, record: logging.LogRecord) -> bool:
        return hasattr(record, "event")


class EventCollector(logging.Handler):
    """In-memory handler that keeps structured events (used by tests and harnesses)"""

    def __init__(self, level: int = logging.DEBUG):
        super().__init__(level)
        self.addFilter(EventFilter())
        self.events: List[Dict] = []

    def emit(self, record: logging.LogRecord) -> None:
        fields = {k: v for k, v in record.__dict__.items() if k not in _RESERVED and not k.startswith("_")}
        self.events.append(fields)

    def count(self, event: str, **match) -> int:
        return sum(
            1 for e in self.events
            if e.get("event") == event and all(e.get(k) == v for k, v in match.items())
        )


@contextmanager
def collect_events() -> Iterator[EventCollector]:
    """Attach an EventCollector to the root logger for the duration of the block"""
    root = logging.getLogger()
    previous_level = root.level
    collector = EventCollector()
    root.addHandler(collector)
    root.setLevel(logging.DEBUG)
    try:
        yield collector
    finally:
        root.removeHandler(collector)
        root.setLevel(previous_level)


def setup_logging(level: str = "INFO", log_file: Optional[str] = None,
                  events_file: Optional[str] = None) -> logging.Logger:
    """
    Configure the package logger

    Args:
        level: Console level name
        log_file: Optional plain-text log file (everything at DEBUG)
        events_file: Optional JSON-lines file receiving structured events only

    Returns:
        The configured root logger
    """
    root = logging.getLogger()
    root.setLevel(logging.DEBUG)
    for handler in list(root.handlers):
        if getattr(handler, "_video_edit", False):
            root.removeHandler(handler)
            handler.close()

    console = colorlog.StreamHandler()
    console.setLevel(getattr(logging, level.upper(), logging.INFO))
    console.setFormatter(colorlog.ColoredFormatter(
        "%(log_color)s%(levelname)-8s%(reset)s %(name)s: %(message)s",
        log_colors={
            "DEBUG": "cyan",
            "INFO": "green",
            "WARNING": "yellow",
            "ERROR": "red",
            "CRITICAL": "red,bg_white",
        },
    ))
    console._video_edit = True
    root.addHandler(console)

    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_file, encoding="utf-8")
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        file_handler._video_edit = True
        root.addHandler(file_handler)

    if events_file:
        Path(events_file).parent.mkdir(parents=True, exist_ok=True)
        events_handler = logging.FileHandler(events_file, encoding="utf-8")
        events_handler.setLevel(logging.DEBUG)
        events_handler.addFilter(EventFilter())
        events_handler.setFormatter(JsonLinesFormatter())
        events_handler._video_edit = True
        root.addHandler(events_handler)

    return root
