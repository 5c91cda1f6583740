from __future__ import annotations

import hashlib
import json
import os
from collections.abc import Sequence
from pathlib import Path
from typing import Any, Mapping


class TuningSet(Sequence):
    """Ordered tuning examples; each is a record of named text fields with a stable id."""

    def __init__(self, examples: Sequence[Mapping[str, Any]], ids: Sequence[str] | None = None):
        if not examples:
            raise ValueError("tuning set must contain at least one example")
        self.examples = [dict(e) for e in examples]
        self.ids = [str(i) for i in ids] if ids is not None else [str(i) for i in range(len(examples))]
        if len(self.ids) != len(self.examples):
            raise ValueError("one id per example is required")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("example ids must be unique")
        names = set(self.examples[0])
        for i, e in enumerate(self.examples):
            if set(e) != names:
                raise ValueError(
                    f"example {self.ids[i]} has fields {sorted(e)}, expected {sorted(names)}"
                )
            for k, v in e.items():
                if not isinstance(v, str):
                    raise ValueError(f"example {self.ids[i]} field {k!r} is not a string")
        self.fields = sorted(names)

    def __len__(self) -> int:
        return len(self.examples)

    def __getitem__(self, i):
        return self.examples[i]

    def fingerprint(self) -> str:
        blob = json.dumps([self.ids, self.examples], sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    @classmethod
    def from_jsonl(cls, path: str | os.PathLike) -> TuningSet:
        """One JSON object per line; ``id`` is optional and defaults to the line number."""
        examples, ids = [], []
        with Path(path).open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as e:
                    raise ValueError(f"{path}:{lineno}: {e}") from e
                if not isinstance(record, dict):
                    raise ValueError(f"{path}:{lineno}: expected a JSON object")
                ids.append(str(record.pop("id", lineno)))
                examples.append(record)
        return cls(examples, ids)

    def to_jsonl(self, path: str | os.PathLike) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            for i, e in zip(self.ids, self.examples):
                fh.write(json.dumps({"id": i, **e}) + "\n")
