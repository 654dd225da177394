"""Tolerant JSON extraction from model output (prose and code fences allowed)."""

from __future__ import annotations

import json
from typing import Any, Optional


def extract_first_json(text: str) -> Optional[Any]:
    """Return the first parseable JSON object or array embedded in `text`,
    or None. Scans for balanced braces/brackets so surrounding prose and
    ```json fences are ignored."""
    for start, opener, closer in _candidate_spans(text):
        depth = 0
        in_string = False
        escape = False
        for i in range(start, len(text)):
            c = text[i]
            if in_string:
                if escape:
                    escape = False
                elif c == "\\":
                    escape = True
                elif c == '"':
                    in_string = False
                continue
            if c == '"':
                in_string = True
            elif c == opener:
                depth += 1
            elif c == closer:
                depth -= 1
                if depth == 0:
                    chunk = text[start : i + 1]
                    try:
                        return json.loads(chunk)
                    except json.JSONDecodeError:
                        break
        # unbalanced or invalid: try the next opener
    return None


def _candidate_spans(text):
    for i, c in enumerate(text):
        if c == "{":
            yield i, "{", "}"
        elif c == "[":
            yield i, "[", "]"
