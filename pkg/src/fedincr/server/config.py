"""Server configuration file (UTF-8 JSON)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ConfigError
from .service import TaskConfig, load_api_keys
from .validation import ValidationSet


@dataclass
class TaskEntry:
    task_id: str
    validation_set_path: Path
    dsc_threshold: float = 0.5
    merge_alpha: float = 0.5
    initial_package_path: Path | None = None


@dataclass
class ServerConfig:
    store_path: Path
    api_keys_path: Path
    port: int = 8000
    host: str = "127.0.0.1"
    tasks: list[TaskEntry] = field(default_factory=list)

    def api_keys(self) -> dict[str, str]:
        try:
            return load_api_keys(self.api_keys_path)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def task_configs(self) -> dict[str, TaskConfig]:
        return {
            t.task_id: TaskConfig(t.task_id, ValidationSet.from_directory(t.validation_set_path), t.dsc_threshold, t.merge_alpha)
            for t in self.tasks
        }


def _path(base: Path, value) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


def load_config(path) -> ServerConfig:
    """Parse a config file; relative paths resolve against the file's directory.

    Malformed JSON raises :class:`ConfigError` naming the line and column.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    base = path.parent
    try:
        tasks = []
        for t in raw.get("tasks", []):
            entry = TaskEntry(
                task_id=str(t["task_id"]),
                validation_set_path=_path(base, t["validation_set_path"]),
                dsc_threshold=float(t.get("dsc_threshold", 0.5)),
                merge_alpha=float(t.get("merge_alpha", 0.5)),
                initial_package_path=_path(base, t["initial_package_path"]) if t.get("initial_package_path") else None,
            )
            if not 0.0 < entry.dsc_threshold < 1.0 or not 0.0 <= entry.merge_alpha <= 1.0:
                raise ConfigError(f"{path}: task {entry.task_id!r} has an out-of-range threshold or alpha")
            tasks.append(entry)
        cfg = ServerConfig(
            store_path=_path(base, raw["store_path"]),
            api_keys_path=_path(base, raw["api_keys_path"]),
            port=int(raw.get("port", 8000)),
            host=str(raw.get("host", "127.0.0.1")),
            tasks=tasks,
        )
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise ConfigError(f"{path}: invalid config: {exc!r}") from exc
    if not tasks:
        raise ConfigError(f"{path}: no tasks configured")
    return cfg
