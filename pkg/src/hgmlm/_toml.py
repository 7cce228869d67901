"""Minimal TOML writing (reading goes through tomli/tomllib directly)."""

from __future__ import annotations


def dumps(table: dict) -> str:
    """Serialize a flat table (str/int/float/bool/list values, one level of sub-tables)."""
    lines = []
    subtables = []
    for key, value in table.items():
        if isinstance(value, dict):
            subtables.append((key, value))
        else:
            lines.append(f"{key} = {_format(value)}")
    for name, sub in subtables:
        lines.append("")
        lines.append(f"[{name}]")
        for key, value in sub.items():
            lines.append(f"{key} = {_format(value)}")
    return "\n".join(lines) + "\n"


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_format(v) for v in value) + "]"
    raise TypeError(f"cannot serialize {type(value).__name__} to TOML")
