"""Fixed per-class feature centroids ("semantic anchors") and the registry they live in.

Every class the detector will ever see gets one immutable anchor vector; the
`unknown` class has one from the moment a topology is created. The registry only
grows: anchors registered earlier are never moved, rescaled, or reordered when
new classes arrive.

Anchor files are line-delimited JSON, one record per anchor:

    {"name": "<class name>", "vector": [<float>, ...]}

Lines starting with ``#`` are comments. A record named exactly ``unknown`` is
mandatory. Files written by :meth:`SemanticTopology.save` carry an extra
``class_id`` field so a save/load round trip is exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

UNKNOWN_NAME = "unknown"

#: class_id of the `unknown` anchor in every topology built by this module.
UNKNOWN_ID = 0

_ZERO_NORM_EPS = 1e-12


class TopologyError(ValueError):
    """Rejected registration or malformed topology state."""


class AnchorFileError(TopologyError):
    """Anchor file missing, unparsable, or violating the format contract."""


def _as_anchor_vector(vector, dim: int | None, normalize: bool) -> np.ndarray:
    vec = np.asarray(vector, dtype=np.float64)
    if vec.ndim != 1:
        raise TopologyError(f"anchor vector must be 1-d, got shape {vec.shape}")
    if dim is not None and vec.shape[0] != dim:
        raise TopologyError(
            f"anchor vector has dimension {vec.shape[0]}, topology dimension is {dim}"
        )
    if not np.all(np.isfinite(vec)):
        raise TopologyError("anchor vector contains non-finite values")
    if normalize:
        norm = float(np.linalg.norm(vec))
        if norm < _ZERO_NORM_EPS:
            raise TopologyError("cannot unit-normalize a zero anchor vector")
        vec = vec / norm
    else:
        vec = vec.copy()
    vec.flags.writeable = False
    return vec


@dataclass(frozen=True)
class SemanticAnchor:
    """One fixed feature-space centroid: an id, a class name, and its vector."""

    class_id: int
    class_name: str
    vector: np.ndarray  # read-only float64, length = topology dim

    def distance_to(self, point: np.ndarray) -> float:
        return float(np.linalg.norm(np.asarray(point, dtype=np.float64) - self.vector))


class SemanticTopology:
    """Append-only registry of semantic anchors, `unknown` first.

    class_ids are contiguous from 0 in registration order. The `unknown`
    anchor always has ``class_id == UNKNOWN_ID == 0``: pass its vector at
    construction, or register it as the first anchor of an empty topology.
    No other anchor can be registered before it.
    """

    def __init__(self, dim: int, unknown_vector=None, normalize: bool = True,
                 source: str = "manual"):
        if dim < 1:
            raise TopologyError(f"topology dimension must be >= 1, got {dim}")
        self.dim = int(dim)
        self.normalize = bool(normalize)
        self.source = source
        self._anchors: list[SemanticAnchor] = []
        self._by_name: dict[str, int] = {}
        if unknown_vector is not None:
            self._append(UNKNOWN_NAME, unknown_vector)

    # -- registration ---------------------------------------------------

    def _append(self, name: str, vector) -> int:
        vec = _as_anchor_vector(vector, self.dim, self.normalize)
        class_id = len(self._anchors)
        self._anchors.append(SemanticAnchor(class_id, name, vec))
        self._by_name[name] = class_id
        return class_id

    def register_anchor(self, name: str, vector) -> int:
        """Register a new class anchor; returns its class_id.

        Rejects duplicate names and wrong-dimension vectors without touching
        existing state.
        """
        if not name:
            raise TopologyError("anchor name must be non-empty")
        if name in self._by_name:
            raise TopologyError(f"anchor name already registered: {name!r}")
        if not self._anchors and name != UNKNOWN_NAME:
            raise TopologyError(
                f"the first registered anchor must be {UNKNOWN_NAME!r}, got {name!r}"
            )
        return self._append(name, vector)

    # -- lookups ----------------------------------------------------------

    def __len__(self) -> int:
        return len(self._anchors)

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    @property
    def unknown_id(self) -> int:
        return UNKNOWN_ID

    @property
    def anchors(self) -> tuple[SemanticAnchor, ...]:
        return tuple(self._anchors)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(a.class_name for a in self._anchors)

    @property
    def object_class_ids(self) -> tuple[int, ...]:
        """All registered class_ids except `unknown`, in registration order."""
        return tuple(a.class_id for a in self._anchors if a.class_id != UNKNOWN_ID)

    def anchor(self, key: int | str) -> SemanticAnchor:
        """Look up an anchor by class_id or by class name."""
        if isinstance(key, str):
            key = self.id_of(key)
        if not 0 <= key < len(self._anchors):
            raise TopologyError(f"unknown class_id {key}")
        return self._anchors[key]

    def vector(self, key: int | str) -> np.ndarray:
        return self.anchor(key).vector

    def id_of(self, name: str) -> int:
        try:
            return self._by_name[name]
        except KeyError:
            raise TopologyError(f"no anchor registered for name {name!r}") from None

    def name_of(self, class_id: int) -> str:
        return self.anchor(class_id).class_name

    # -- persistence ------------------------------------------------------

    def save(self, path) -> None:
        """Write the topology as an anchor file with explicit class_ids."""
        path = Path(path)
        with path.open("w", encoding="utf-8") as fh:
            for a in self._anchors:
                record = {
                    "class_id": a.class_id,
                    "name": a.class_name,
                    "vector": [float(v) for v in a.vector],
                }
                fh.write(json.dumps(record) + "\n")


def generate_random_anchors(names: Sequence[str], dim: int, seed: int,
                            normalize: bool = True) -> SemanticTopology:
    """Build a topology of uniform-random unit anchors: one per name plus `unknown`.

    Each vector is drawn componentwise uniform in [-1, 1] and scaled to unit
    norm; the draw order is `unknown` first, then ``names`` in order, so the
    result is fully determined by ``seed``.
    """
    if not names:
        raise TopologyError("names must be non-empty")
    if len(set(names)) != len(names):
        raise TopologyError("names contain duplicates")
    if UNKNOWN_NAME in names:
        raise TopologyError(f"{UNKNOWN_NAME!r} is registered implicitly, do not list it")
    rng = np.random.default_rng(seed)

    def draw() -> np.ndarray:
        while True:
            vec = rng.uniform(-1.0, 1.0, size=dim)
            norm = np.linalg.norm(vec)
            if norm >= _ZERO_NORM_EPS:
                return vec / norm

    topo = SemanticTopology(dim, unknown_vector=draw(), normalize=normalize,
                            source=f"random(seed={seed})")
    for name in names:
        topo.register_anchor(name, draw())
    return topo


def _parse_anchor_lines(path: Path) -> list[tuple[int, dict]]:
    records = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            try:
                obj = json.loads(stripped)
            except json.JSONDecodeError as exc:
                raise AnchorFileError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict) or "name" not in obj or "vector" not in obj:
                raise AnchorFileError(
                    f"{path}:{lineno}: record must be an object with 'name' and 'vector'"
                )
            if not isinstance(obj["name"], str) or not obj["name"]:
                raise AnchorFileError(f"{path}:{lineno}: 'name' must be a non-empty string")
            vec = obj["vector"]
            if (not isinstance(vec, list) or not vec
                    or not all(isinstance(v, (int, float)) and not isinstance(v, bool)
                               for v in vec)):
                raise AnchorFileError(
                    f"{path}:{lineno}: 'vector' must be a non-empty array of reals"
                )
            records.append((lineno, obj))
    return records


def load_anchors(path, normalize: bool = False) -> SemanticTopology:
    """Load a topology from an anchor file.

    The dimension is inferred from the first record and every record must
    match it. Records may carry explicit ``class_id`` fields (as written by
    :meth:`SemanticTopology.save`); those ids are honored and must be unique
    and contiguous from 0. Files without ids (e.g. straight out of the
    anchor-export tool) get ids assigned with `unknown` first, then file order.

    Vectors are ingested verbatim by default so that save -> load round trips
    are bit-exact; pass ``normalize=True`` to unit-normalize on ingest.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"anchor file not found: {path}")
    records = _parse_anchor_lines(path)
    if not records:
        raise AnchorFileError(f"{path}: no anchor records")

    dim = len(records[0][1]["vector"])
    names_seen: set[str] = set()
    for lineno, obj in records:
        if len(obj["vector"]) != dim:
            raise AnchorFileError(
                f"{path}:{lineno}: ragged dimensions, expected {dim} got {len(obj['vector'])}"
            )
        if obj["name"] in names_seen:
            raise AnchorFileError(f"{path}:{lineno}: duplicate anchor name {obj['name']!r}")
        names_seen.add(obj["name"])
    if UNKNOWN_NAME not in names_seen:
        raise AnchorFileError(f"{path}: mandatory {UNKNOWN_NAME!r} record is missing")

    has_ids = ["class_id" in obj for _, obj in records]
    if any(has_ids) and not all(has_ids):
        raise AnchorFileError(f"{path}: mix of records with and without class_id")

    if all(has_ids):
        ids = [int(obj["class_id"]) for _, obj in records]
        if sorted(ids) != list(range(len(records))):
            raise AnchorFileError(f"{path}: class_ids must be unique and contiguous from 0")
        ordered = [obj for _, obj in sorted(records, key=lambda r: int(r[1]["class_id"]))]
        if ordered[0]["name"] != UNKNOWN_NAME:
            raise AnchorFileError(
                f"{path}: class_id 0 must be the {UNKNOWN_NAME!r} anchor, got {ordered[0]['name']!r}"
            )
    else:
        unknown_rec = next(obj for _, obj in records if obj["name"] == UNKNOWN_NAME)
        ordered = [unknown_rec] + [obj for _, obj in records if obj["name"] != UNKNOWN_NAME]

    topo = SemanticTopology(dim, unknown_vector=ordered[0]["vector"],
                            normalize=normalize, source=f"file({path})")
    for obj in ordered[1:]:
        topo.register_anchor(obj["name"], obj["vector"])
    return topo
