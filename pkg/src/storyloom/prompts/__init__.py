"""Versioned prompt templates.

Templates are data files with ``{name}`` placeholders. Rendering substitutes
only bare lowercase placeholders, so JSON examples embedded in template text
pass through untouched. A placeholder left unfilled is an error.
"""

from __future__ import annotations

import re
from functools import lru_cache
from importlib import resources

TEMPLATE_VERSION = "1"

_PLACEHOLDER_RE = re.compile(r"\{([a-z][a-z0-9_]*)\}")


@lru_cache(maxsize=None)
def load(name: str) -> str:
    return (resources.files(__package__) / "templates" / f"{name}.txt").read_text(encoding="utf-8")


def render(name: str, **fields) -> str:
    text = load(name)

    def substitute(match: re.Match) -> str:
        key = match.group(1)
        if key not in fields:
            raise KeyError(f"template {name!r} placeholder {{{key}}} was not provided")
        return str(fields[key])

    return _PLACEHOLDER_RE.sub(substitute, text)


def placeholders(name: str) -> tuple[str, ...]:
    return tuple(sorted(set(_PLACEHOLDER_RE.findall(load(name)))))
