"""Plain ``key=value`` text files used for manifests, configs and reports."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping


def format_kv(kv: Mapping[str, object]) -> str:
    lines = []
    for key, value in kv.items():
        if "=" in key or "\n" in key:
            raise ValueError(f"illegal key {key!r}")
        text = str(value)
        if "\n" in text:
            raise ValueError(f"value for {key!r} spans lines")
        lines.append(f"{key}={text}")
    return "\n".join(lines) + "\n"


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def write_kv(path: Path, kv: Mapping[str, object]) -> None:
    Path(path).write_text(format_kv(kv), encoding="utf-8")


def read_kv(path: Path) -> dict[str, str]:
    return parse_kv(Path(path).read_text(encoding="utf-8"))
