"""Line-oriented ``key = value`` files with ``[section]`` headers.

Comments start with ``#``. Every value remembers its line so validation errors
can point at ``path:line``.
"""

from __future__ import annotations

from pathlib import Path
from typing import Callable

from .errors import ConfigError


class Section:
    def __init__(self, path, name: str):
        self.path = path
        self.name = name
        self.values: dict[str, tuple[str, int]] = {}
        self._used: set[str] = set()

    def __contains__(self, key: str) -> bool:
        return key in self.values

    def line(self, key: str) -> int | None:
        return self.values[key][1] if key in self.values else None

    def _fail(self, key: str, msg: str):
        line = self.line(key)
        where = f"{self.path}:{line}" if line else f"{self.path}"
        raise ConfigError(f"{where}: [{self.name}] {key}: {msg}")

    def get_str(self, key: str, default: str | None = None, check: Callable | None = None) -> str:
        if key not in self.values:
            if default is None:
                raise ConfigError(f"{self.path}: [{self.name}] missing required key {key!r}")
            return default
        self._used.add(key)
        value = self.values[key][0]
        if check is not None:
            try:
                check(value)
            except (ValueError, TypeError) as exc:
                self._fail(key, str(exc))
        return value

    def _convert(self, key, default, conv, kind):
        if key not in self.values:
            if default is None:
                raise ConfigError(f"{self.path}: [{self.name}] missing required key {key!r}")
            return default
        self._used.add(key)
        try:
            return conv(self.values[key][0])
        except ValueError:
            self._fail(key, f"expected {kind}, got {self.values[key][0]!r}")

    def get_int(self, key: str, default: int | None = None) -> int:
        return self._convert(key, default, int, "an integer")

    def get_float(self, key: str, default: float | None = None) -> float:
        return self._convert(key, default, float, "a number")

    def get_bool(self, key: str, default: bool | None = None) -> bool:
        def conv(s):
            low = s.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(s)

        return self._convert(key, default, conv, "a boolean")

    def get_ints(self, key: str, default: list[int] | None = None) -> list[int]:
        return self._convert(key, default, lambda s: [int(x) for x in s.split(",")], "comma-separated integers")

    def check_unused(self) -> None:
        extra = sorted(set(self.values) - self._used)
        if extra:
            self._fail(extra[0], "unknown key")


class KvFile:
    def __init__(self, path):
        self.path = path
        self._sections: dict[str, Section] = {}

    def sections(self) -> list[str]:
        return list(self._sections)

    def section(self, name: str) -> Section:
        return self._sections.get(name) or Section(self.path, name)

    def has(self, name: str) -> bool:
        return name in self._sections


def parse_kv(text: str, path="<string>") -> KvFile:
    out = KvFile(path)
    current = out._sections.setdefault("", Section(path, ""))
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]") or len(line) < 3:
                raise ConfigError(f"{path}:{n}: malformed section header {raw.strip()!r}")
            name = line[1:-1].strip()
            if name in out._sections and out._sections[name].values:
                raise ConfigError(f"{path}:{n}: duplicate section [{name}]")
            current = out._sections.setdefault(name, Section(path, name))
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{path}:{n}: expected 'key = value', got {raw.strip()!r}")
        if key in current.values:
            raise ConfigError(f"{path}:{n}: duplicate key {key!r}")
        current.values[key] = (value.strip(), n)
    if not out._sections[""].values:
        del out._sections[""]
    return out


def parse_kv_file(path) -> KvFile:
    return parse_kv(Path(path).read_text(), path)


def render_kv(sections: dict[str, dict]) -> str:
    chunks = []
    for name, values in sections.items():
        lines = [f"[{name}]"] if name else []
        for k, v in values.items():
            if isinstance(v, (list, tuple)):
                v = ", ".join(str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{k} = {v}")
        chunks.append("\n".join(lines))
    return "\n\n".join(chunks) + "\n"
