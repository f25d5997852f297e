"""Where send-task notifications go.

The engine renders a record per send-task activation and hands it to a
sink. Delivery is fire-and-record: a sink failure is the sink's problem,
never the process's.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Protocol

import httpx

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NotificationRecord:
    instance_id: str
    task_id: str
    subject: str
    body: str
    timestamp: str  # ISO-8601, UTC


def now_iso() -> str:
    return datetime.now(timezone.utc).isoformat()


def record_json(record: NotificationRecord) -> dict:
    raw = asdict(record)
    return {
        "instanceId": raw["instance_id"],
        "taskId": raw["task_id"],
        "subject": raw["subject"],
        "body": raw["body"],
        "timestamp": raw["timestamp"],
    }


def record_from_json(obj: dict) -> NotificationRecord:
    return NotificationRecord(
        instance_id=obj["instanceId"],
        task_id=obj["taskId"],
        subject=obj["subject"],
        body=obj["body"],
        timestamp=obj["timestamp"],
    )


class NotificationSink(Protocol):
    def deliver(self, record: NotificationRecord) -> None: ...


class MemorySink:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._records: list[NotificationRecord] = []

    def deliver(self, record: NotificationRecord) -> None:
        with self._lock:
            self._records.append(record)

    def records(self) -> list[NotificationRecord]:
        with self._lock:
            return list(self._records)


class FileSink:
    """Appends one JSON object per line."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self._lock = threading.Lock()

    def deliver(self, record: NotificationRecord) -> None:
        line = json.dumps(record_json(record), sort_keys=True)
        with self._lock:
            with self.path.open("a", encoding="utf-8") as handle:
                handle.write(line + "\n")

    def records(self) -> list[NotificationRecord]:
        if not self.path.exists():
            return []
        out = []
        with self.path.open(encoding="utf-8") as handle:
            for line in handle:
                if line.strip():
                    out.append(record_from_json(json.loads(line)))
        return out


class WebhookSink:
    """POSTs {subject, body, instanceId} to a configured URL."""

    def __init__(self, url: str, timeout_s: float = 5.0) -> None:
        self.url = url
        self._timeout_s = timeout_s

    def deliver(self, record: NotificationRecord) -> None:
        httpx.post(
            self.url,
            json={
                "subject": record.subject,
                "body": record.body,
                "instanceId": record.instance_id,
            },
            timeout=self._timeout_s,
        )


class FanoutSink:
    """Delivers to several sinks; one failing sink must not starve the rest."""

    def __init__(self, sinks: Iterable[NotificationSink]) -> None:
        self.sinks = list(sinks)

    def deliver(self, record: NotificationRecord) -> None:
        for sink in self.sinks:
            try:
                sink.deliver(record)
            except Exception:
                log.warning("notification sink %r failed", sink, exc_info=True)
