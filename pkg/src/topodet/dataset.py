"""Instance records, JSONL file IO, and the synthetic Gaussian benchmark.

Every object instance is a flat feature vector with a class name and a
center-format box; one instance per image keeps localization trivial so the
open-world metrics are driven entirely by classification behavior.

File formats (one JSON object per line, # comments and blank lines allowed):

* dataset:    {"image_id": int, "class": str, "input": [...], "box": [x,y,w,h]?}
* proposals:  {"image_id": int, "objectness": real, "input": [...], "box": [...]}
* detections: {"image_id": int, "class": str, "score": real, "box": [...]}
* ground truth: {"image_id": int, "class": str, "box": [...]}
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .metrics import Detection, GroundTruth
from .openworld import OpenWorldError, Proposal
from .topology import UNKNOWN_NAME

VOC_CLASS_NAMES = (
    "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat",
    "chair", "cow", "diningtable", "dog", "horse", "motorbike", "person",
    "pottedplant", "sheep", "sofa", "train", "tvmonitor",
)


class DatasetError(ValueError):
    """Malformed records; messages carry file and line number."""


@dataclass(frozen=True)
class AnnotatedInstance:
    """One labeled object: a feature vector plus its box, alone in its image."""

    image_id: int
    class_name: str
    input: tuple[float, ...]
    box: tuple[float, float, float, float] | None = None

    @property
    def input_array(self) -> np.ndarray:
        return np.asarray(self.input, dtype=np.float64)

    @property
    def box_array(self) -> np.ndarray | None:
        return None if self.box is None else np.asarray(self.box, dtype=np.float64)


# -- JSONL plumbing ----------------------------------------------------------


def _read_jsonl(path) -> Iterator[tuple[int, dict]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            try:
                obj = json.loads(stripped)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise DatasetError(f"{path}:{lineno}: record must be a JSON object")
            yield lineno, obj


def _field(obj: dict, name: str, where: str):
    if name not in obj:
        raise DatasetError(f"{where}: missing field {name!r}")
    return obj[name]


def _int_field(obj: dict, name: str, where: str) -> int:
    value = _field(obj, name, where)
    if isinstance(value, bool) or not isinstance(value, int):
        raise DatasetError(f"{where}: field {name!r} must be an integer")
    return value


def _str_field(obj: dict, name: str, where: str) -> str:
    value = _field(obj, name, where)
    if not isinstance(value, str) or not value:
        raise DatasetError(f"{where}: field {name!r} must be a non-empty string")
    return value


def _real(value, what: str, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not np.isfinite(value):
        raise DatasetError(f"{where}: {what} must be a finite real")
    return float(value)


def _vector_field(obj: dict, name: str, where: str) -> tuple[float, ...]:
    value = _field(obj, name, where)
    if not isinstance(value, list) or not value:
        raise DatasetError(f"{where}: field {name!r} must be a non-empty array")
    return tuple(_real(v, f"{name}[{i}]", where) for i, v in enumerate(value))


def _box_field(obj: dict, where: str, positive_extent: bool) -> tuple[float, float, float, float]:
    value = _field(obj, "box", where)
    if not isinstance(value, list) or len(value) != 4:
        raise DatasetError(f"{where}: field 'box' must be [x, y, w, h]")
    box = tuple(_real(v, f"box[{i}]", where) for i, v in enumerate(value))
    if positive_extent and (box[2] <= 0 or box[3] <= 0):
        raise DatasetError(f"{where}: box width and height must be positive")
    return box


def load_instances(path) -> list[AnnotatedInstance]:
    out = []
    for lineno, obj in _read_jsonl(path):
        where = f"{path}:{lineno}"
        box = _box_field(obj, where, positive_extent=True) if "box" in obj else None
        out.append(AnnotatedInstance(
            image_id=_int_field(obj, "image_id", where),
            class_name=_str_field(obj, "class", where),
            input=_vector_field(obj, "input", where),
            box=box,
        ))
    return out


def save_instances(path, instances: Sequence[AnnotatedInstance]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for inst in instances:
            rec = {"image_id": inst.image_id, "class": inst.class_name,
                   "input": list(inst.input)}
            if inst.box is not None:
                rec["box"] = list(inst.box)
            fh.write(json.dumps(rec) + "\n")


def load_proposals(path) -> list[Proposal]:
    out = []
    for lineno, obj in _read_jsonl(path):
        where = f"{path}:{lineno}"
        try:
            out.append(Proposal(
                image_id=_int_field(obj, "image_id", where),
                objectness=_real(_field(obj, "objectness", where), "objectness", where),
                input=_vector_field(obj, "input", where),
                box=_box_field(obj, where, positive_extent=True),
            ))
        except OpenWorldError as exc:
            raise DatasetError(f"{where}: {exc}") from None
    return out


def save_proposals(path, proposals: Sequence[Proposal]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for prop in proposals:
            rec = {"image_id": prop.image_id, "objectness": prop.objectness,
                   "input": list(prop.input), "box": list(prop.box)}
            fh.write(json.dumps(rec) + "\n")


def load_ground_truth(path) -> list[GroundTruth]:
    out = []
    for lineno, obj in _read_jsonl(path):
        where = f"{path}:{lineno}"
        out.append(GroundTruth(
            image_id=_int_field(obj, "image_id", where),
            class_name=_str_field(obj, "class", where),
            box=_box_field(obj, where, positive_extent=False),
        ))
    return out


def save_ground_truth(path, gts: Sequence[GroundTruth]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for gt in gts:
            rec = {"image_id": gt.image_id, "class": gt.class_name, "box": list(gt.box)}
            fh.write(json.dumps(rec) + "\n")


def load_detections(path) -> list[Detection]:
    out = []
    for lineno, obj in _read_jsonl(path):
        where = f"{path}:{lineno}"
        out.append(Detection(
            image_id=_int_field(obj, "image_id", where),
            class_name=_str_field(obj, "class", where),
            score=_real(_field(obj, "score", where), "score", where),
            box=_box_field(obj, where, positive_extent=False),
        ))
    return out


def save_detections(path, detections: Sequence[Detection]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for det in detections:
            rec = {"image_id": det.image_id, "class": det.class_name,
                   "score": det.score, "box": list(det.box)}
            fh.write(json.dumps(rec) + "\n")


# -- synthetic benchmark -------------------------------------------------------


@dataclass(frozen=True)
class ToyBenchmark:
    train: list[AnnotatedInstance]
    eval: list[AnnotatedInstance]
    proposals: list[Proposal]
    means: dict[str, np.ndarray]


def make_toy_benchmark(schedule: Sequence[Sequence[str]], input_dim: int = 16,
                       sigma: float = 0.5, radius: float = 2.25,
                       train_per_class: int = 200, eval_per_class: int = 100,
                       seed: int = 0) -> ToyBenchmark:
    """Isotropic Gaussian classes on mutually orthogonal mean directions.

    ``schedule`` lists the class names introduced by each incremental task.
    Class means are random orthonormal directions scaled by ``radius``, so any
    two means sit radius*sqrt(2) apart, comfortably beyond 4*sigma at the
    defaults. Every training image also carries background proposals: one
    drawn from a class of a later task when one exists (high objectness) and
    one near-origin noise vector (low objectness), boxed far away from the
    image's annotated box so unknown-proposal mining at zero overlap accepts
    them. The whole benchmark is a pure function of its arguments.
    """
    names: list[str] = []
    task_of: dict[str, int] = {}
    for t, task_classes in enumerate(schedule):
        if not task_classes:
            raise DatasetError(f"task {t + 1} introduces no classes")
        for name in task_classes:
            if name == UNKNOWN_NAME:
                raise DatasetError(f"{UNKNOWN_NAME!r} cannot appear in a task schedule")
            if name in task_of:
                raise DatasetError(f"class {name!r} appears twice in the schedule")
            names.append(name)
            task_of[name] = t
    if len(names) > input_dim:
        raise DatasetError(
            f"{len(names)} classes need {len(names)} orthogonal directions "
            f"but input_dim is {input_dim}")
    if min(train_per_class, eval_per_class) < 1 or sigma <= 0 or radius <= 0:
        raise DatasetError("counts must be >= 1 and sigma, radius positive")

    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((input_dim, len(names))))
    means = {name: radius * q[:, i] for i, name in enumerate(names)}

    def random_box(low: float, high: float) -> tuple[float, float, float, float]:
        # unit-scale geometry keeps box-regression targets inside smooth-L1's
        # quadratic zone, so default learning rates train without blowing up
        x, y = rng.uniform(low, high, size=2)
        w, h = rng.uniform(0.04, 0.12, size=2)
        return (float(x), float(y), float(w), float(h))

    def draw(name: str) -> tuple[float, ...]:
        return tuple(means[name] + sigma * rng.standard_normal(input_dim))

    next_id = 0
    train: list[AnnotatedInstance] = []
    proposals: list[Proposal] = []
    for name in names:
        later = [n for n in names if task_of[n] > task_of[name]]
        for _ in range(train_per_class):
            inst = AnnotatedInstance(image_id=next_id, class_name=name,
                                     input=draw(name), box=random_box(0.2, 0.8))
            train.append(inst)
            # background region disjoint from the annotated box by construction
            if later:
                future = later[rng.integers(len(later))]
                proposals.append(Proposal(
                    image_id=next_id, objectness=float(rng.uniform(0.7, 0.95)),
                    input=draw(future), box=random_box(1.2, 1.8)))
            proposals.append(Proposal(
                image_id=next_id, objectness=float(rng.uniform(0.05, 0.3)),
                input=tuple(sigma * rng.standard_normal(input_dim)),
                box=random_box(1.2, 1.8)))
            next_id += 1

    eval_instances: list[AnnotatedInstance] = []
    for name in names:
        for _ in range(eval_per_class):
            eval_instances.append(AnnotatedInstance(
                image_id=next_id, class_name=name,
                input=draw(name), box=random_box(0.2, 0.8)))
            next_id += 1

    return ToyBenchmark(train=train, eval=eval_instances,
                        proposals=proposals, means=means)
