"""Pluggable experiment-tracking frontends.

A frontend receives three kinds of events from a training run: ``run_start``,
``epoch_end`` (once per epoch, metrics payload), and ``run_end`` (summary).
Implementations must never let a delivery failure reach the training loop;
errors are logged as warnings. ``create_hybrid_frontend`` fans events out to
several frontends with per-child fault isolation.
"""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path
from typing import Iterable, Mapping, Protocol, runtime_checkable

import requests

logger = logging.getLogger(__name__)


@runtime_checkable
class Frontend(Protocol):
    def on_run_start(self, meta: Mapping) -> None: ...

    def on_epoch_end(self, metrics: Mapping) -> None: ...

    def on_run_end(self, summary: Mapping) -> None: ...


class NullFrontend:
    """Discards every event."""

    def on_run_start(self, meta: Mapping) -> None:
        pass

    def on_epoch_end(self, metrics: Mapping) -> None:
        pass

    def on_run_end(self, summary: Mapping) -> None:
        pass


def _jsonable(payload: Mapping) -> dict:
    out = {}
    for key, value in payload.items():
        try:
            json.dumps(value)
            out[key] = value
        except TypeError:
            out[key] = repr(value)
    return out


class FileFrontend:
    """Appends one JSON object per event to a line-delimited log file."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def _write(self, kind: str, payload: Mapping) -> None:
        record = {"kind": kind, "timestamp": time.time(), "payload": _jsonable(payload)}
        try:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")
        except OSError as err:
            logger.warning("file frontend could not append to %s: %s", self.path, err)

    def on_run_start(self, meta: Mapping) -> None:
        self._write("run_start", meta)

    def on_epoch_end(self, metrics: Mapping) -> None:
        self._write("epoch_end", metrics)

    def on_run_end(self, summary: Mapping) -> None:
        self._write("run_end", summary)


def read_events(path: str | Path) -> list[dict]:
    """Replay a file-frontend log into a list of event dicts."""
    events = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            events.append(json.loads(line))
    return events


class HttpFrontend:
    """Tracking client speaking an MLflow-compatible REST wire format.

    ``run_start`` creates a run, ``epoch_end`` logs a metric batch,
    ``run_end`` marks the run finished. Requests are retried once and then
    logged as warnings; the training loop is never interrupted.
    """

    def __init__(
        self,
        base_url: str,
        experiment: str,
        create_path: str = "/api/2.0/mlflow/runs/create",
        log_path: str = "/api/2.0/mlflow/runs/log-batch",
        update_path: str = "/api/2.0/mlflow/runs/update",
        timeout: float = 5.0,
        session: requests.Session | None = None,
    ) -> None:
        self.base_url = base_url.rstrip("/")
        self.experiment = experiment
        self.create_path = create_path
        self.log_path = log_path
        self.update_path = update_path
        self.timeout = timeout
        self.session = session or requests.Session()
        self.run_id: str | None = None

    def _post(self, path: str, payload: dict) -> dict | None:
        url = self.base_url + path
        for attempt in (1, 2):
            try:
                response = self.session.post(url, json=payload, timeout=self.timeout)
                response.raise_for_status()
                try:
                    return response.json()
                except ValueError:
                    return {}
            except Exception as err:
                if attempt == 2:
                    logger.warning("tracking request to %s failed: %s", url, err)
        return None

    def on_run_start(self, meta: Mapping) -> None:
        payload = {
            "experiment_id": self.experiment,
            "start_time": int(time.time() * 1000),
            "tags": [{"key": str(k), "value": str(v)} for k, v in meta.items()],
        }
        response = self._post(self.create_path, payload)
        if response:
            self.run_id = response.get("run", {}).get("info", {}).get("run_id")

    def on_epoch_end(self, metrics: Mapping) -> None:
        timestamp = int(time.time() * 1000)
        step = int(metrics.get("epoch", 0))
        numeric = [
            {"key": str(k), "value": float(v), "timestamp": timestamp, "step": step}
            for k, v in metrics.items()
            if isinstance(v, (int, float))
        ]
        self._post(self.log_path, {"run_id": self.run_id, "metrics": numeric})

    def on_run_end(self, summary: Mapping) -> None:
        self._post(
            self.update_path,
            {
                "run_id": self.run_id,
                "status": "FINISHED",
                "end_time": int(time.time() * 1000),
            },
        )


class HybridFrontend:
    """Fans events out to child frontends in order; one failure never blocks the rest."""

    def __init__(self, children: Iterable[Frontend]) -> None:
        self.children = list(children)

    def _dispatch(self, method: str, payload: Mapping) -> None:
        for child in self.children:
            try:
                getattr(child, method)(payload)
            except Exception as err:
                logger.warning("frontend %r failed on %s: %s", child, method, err)

    def on_run_start(self, meta: Mapping) -> None:
        self._dispatch("on_run_start", meta)

    def on_epoch_end(self, metrics: Mapping) -> None:
        self._dispatch("on_epoch_end", metrics)

    def on_run_end(self, summary: Mapping) -> None:
        self._dispatch("on_run_end", summary)


def create_hybrid_frontend(frontends: Iterable[Frontend]) -> HybridFrontend:
    """Combine several frontends into one fan-out frontend."""
    return HybridFrontend(frontends)
