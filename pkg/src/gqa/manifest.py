"""Dataset manifest: a versioned JSON document describing a synthesized set.

Layout (``format_version`` 1)::

    {
      "format_version": 1,
      "name": str,
      "seed": int,
      "levels": int,
      "references": [{"id", "path", "l_r", "points"}],
      "lists": [{"id", "reference", "dtype", "seed",
                 "levels": [{"level", "path", "params", "points", "pseudo_mos"?}]}]
    }

Paths are relative to the manifest's directory.  Key order is fixed by the
writer and floats use ``repr`` so write -> read -> write is byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .cloud import load_cloud
from .distort import EXTERNAL_ONLY, level_param
from .errors import DataError

FORMAT_VERSION = 1


@dataclass
class ReferenceEntry:
    id: str
    path: str
    l_r: float
    points: int

    def to_dict(self):
        return {"id": self.id, "path": self.path, "l_r": self.l_r, "points": self.points}


@dataclass
class LevelEntry:
    level: int
    path: str
    params: dict
    points: int
    pseudo_mos: float | None = None

    def to_dict(self):
        d = {"level": self.level, "path": self.path, "params": self.params, "points": self.points}
        if self.pseudo_mos is not None:
            d["pseudo_mos"] = self.pseudo_mos
        return d


@dataclass
class ListEntry:
    id: str
    reference: str
    dtype: str
    seed: int
    levels: list

    def to_dict(self):
        return {"id": self.id, "reference": self.reference, "dtype": self.dtype, "seed": self.seed,
                "levels": [lv.to_dict() for lv in self.levels]}


@dataclass
class Manifest:
    name: str
    seed: int
    levels: int
    references: list
    lists: list
    root: Path = field(default=Path("."), compare=False)

    def to_json(self) -> str:
        doc = {
            "format_version": FORMAT_VERSION,
            "name": self.name,
            "seed": self.seed,
            "levels": self.levels,
            "references": [r.to_dict() for r in self.references],
            "lists": [lst.to_dict() for lst in self.lists],
        }
        return json.dumps(doc, indent=2) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path, check_files: bool = True) -> "Manifest":
        path = Path(path)
        if not path.exists():
            raise DataError(f"{path}: manifest not found")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid manifest JSON ({exc})") from None
        if doc.get("format_version") != FORMAT_VERSION:
            raise DataError(f"{path}: unsupported manifest version {doc.get('format_version')!r}")
        try:
            refs = [ReferenceEntry(r["id"], r["path"], r["l_r"], r["points"]) for r in doc["references"]]
            lists = [
                ListEntry(lst["id"], lst["reference"], lst["dtype"], lst["seed"], [
                    LevelEntry(lv["level"], lv["path"], lv["params"], lv["points"], lv.get("pseudo_mos"))
                    for lv in lst["levels"]
                ])
                for lst in doc["lists"]
            ]
            m = cls(doc["name"], doc["seed"], doc["levels"], refs, lists, root=path.parent)
        except (KeyError, TypeError) as exc:
            raise DataError(f"{path}: malformed manifest ({exc})") from None
        if check_files:
            m.validate()
        return m

    # ------------------------------------------------------------------

    def reference(self, ref_id: str) -> ReferenceEntry:
        for r in self.references:
            if r.id == ref_id:
                return r
        raise DataError(f"manifest has no reference {ref_id!r}")

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def load_level(self, entry: LevelEntry):
        return load_cloud(self.resolve(entry.path))

    def load_level_path(self, rel: str):
        return load_cloud(self.resolve(rel))

    def validate(self) -> None:
        """Check files exist and stored params match the level schedule."""
        ref_ids = set()
        for r in self.references:
            if not self.resolve(r.path).exists():
                raise DataError(f"missing reference file {r.path}")
            ref_ids.add(r.id)
        for lst in self.lists:
            if lst.reference not in ref_ids:
                raise DataError(f"list {lst.id} names unknown reference {lst.reference!r}")
            ref = self.reference(lst.reference)
            for lv in lst.levels:
                if not self.resolve(lv.path).exists():
                    raise DataError(f"missing cloud file {lv.path}")
                if lv.level == 0 or lst.dtype in EXTERNAL_ONLY:
                    continue
                expected = level_param(lst.dtype, lv.level, ref.l_r, self.levels)
                if expected != lv.params:
                    raise DataError(f"list {lst.id} level {lv.level}: params do not match schedule")

    def split_references(self, seed: int, test_fraction: float = 0.1):
        """Seeded reference-level train/test split (at least one of each when
        there are two or more references)."""
        from .rng import generator

        ids = [r.id for r in self.references]
        order = generator(seed, "split").permutation(len(ids))
        n_test = int(round(test_fraction * len(ids)))
        if len(ids) >= 2:
            n_test = min(max(n_test, 1), len(ids) - 1)
        test = sorted(ids[i] for i in order[:n_test])
        train = sorted(ids[i] for i in order[n_test:])
        return train, test

    def lists_for(self, ref_ids=None, dtypes=None):
        out = []
        for lst in self.lists:
            if ref_ids is not None and lst.reference not in ref_ids:
                continue
            if dtypes is not None and lst.dtype not in dtypes:
                continue
            out.append(lst)
        return out
