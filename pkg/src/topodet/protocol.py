"""Open-world life cycle: task schedule, incremental training, exemplar
memory, stabilization finetuning, and time-point evaluation.

A DetectorState carries everything that evolves across tasks: the growing
anchor topology, model parameters, the unmasked classifier slots, and the
exemplar store. run_task advances it by one task; evaluate_time_point scores
it against held-out data where classes from future tasks count as `unknown`.

Class-id bookkeeping: the topology assigns `unknown` id 0 and object classes
1..C in registration order; classifier heads put object class c at slot c-1
and `unknown` at the final slot C_max.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import model as M
from .config import ConfigError, ExperimentConfig
from .dataset import AnnotatedInstance
from .metrics import (Detection, GroundTruth, MetricsRecord, compute_aose,
                      compute_map, compute_wi)
from .openworld import Proposal, ensemble_predict, select_unknown_proposals
from .topology import UNKNOWN_NAME, SemanticTopology

logger = logging.getLogger(__name__)


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSchedule:
    """Ordered class-arrival plan; task sets are disjoint, `unknown` excluded."""

    tasks: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        seen: set[str] = set()
        for t, names in enumerate(self.tasks, start=1):
            for name in names:
                if not isinstance(name, str) or not name:
                    raise ProtocolError(f"task {t}: class names must be non-empty strings")
                if name == UNKNOWN_NAME:
                    raise ProtocolError(f"task {t}: {UNKNOWN_NAME!r} cannot be scheduled")
                if name in seen:
                    raise ProtocolError(f"class {name!r} appears in two tasks")
                seen.add(name)

    @staticmethod
    def from_lists(tasks: Sequence[Sequence[str]]) -> "TaskSchedule":
        return TaskSchedule(tuple(tuple(t) for t in tasks))

    @staticmethod
    def from_file(path) -> "TaskSchedule":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"no such schedule file: {path}")
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
        if not isinstance(raw, dict) or "tasks" not in raw:
            raise ProtocolError(f"{path}: schedule file must map 'tasks' to a list of lists")
        tasks = raw["tasks"]
        if not isinstance(tasks, list) or not all(isinstance(t, list) for t in tasks):
            raise ProtocolError(f"{path}: 'tasks' must be a list of class-name lists")
        try:
            return TaskSchedule.from_lists(tasks)
        except ProtocolError as exc:
            raise ProtocolError(f"{path}: {exc}") from None

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def task_names(self, t: int) -> tuple[str, ...]:
        if not 1 <= t <= self.num_tasks:
            raise ProtocolError(f"task index {t} outside 1..{self.num_tasks}")
        return self.tasks[t - 1]

    def known_at(self, t: int) -> tuple[str, ...]:
        """Classes of tasks 1..t in schedule order; t=0 gives the empty set."""
        if not 0 <= t <= self.num_tasks:
            raise ProtocolError(f"task index {t} outside 0..{self.num_tasks}")
        return tuple(name for task in self.tasks[:t] for name in task)

    def unknown_at(self, t: int) -> tuple[str, ...]:
        """Scheduled classes still unseen after task t."""
        if not 0 <= t <= self.num_tasks:
            raise ProtocolError(f"task index {t} outside 0..{self.num_tasks}")
        return tuple(name for task in self.tasks[t:] for name in task)

    def all_names(self) -> tuple[str, ...]:
        return self.known_at(self.num_tasks)


class ExemplarStore:
    """Bounded per-class replay memory with seeded uniform selection."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ProtocolError("exemplar capacity must be >= 1")
        self.capacity = capacity
        self._buffers: dict[str, list[AnnotatedInstance]] = {}

    @property
    def classes(self) -> tuple[str, ...]:
        return tuple(self._buffers)

    def get(self, name: str) -> list[AnnotatedInstance]:
        return list(self._buffers.get(name, ()))

    @property
    def total(self) -> int:
        return sum(len(b) for b in self._buffers.values())

    def update(self, task_data: Sequence[AnnotatedInstance], seed) -> "ExemplarStore":
        """Fill buffers for classes not seen before; existing buffers untouched.

        For each new class, min(capacity, available) instances are sampled
        uniformly without replacement; classes are processed in sorted name
        order so selection depends only on (data, seed). Unknown-labeled
        instances are never stored.
        """
        grouped: dict[str, list[AnnotatedInstance]] = {}
        for inst in task_data:
            if inst.class_name != UNKNOWN_NAME:
                grouped.setdefault(inst.class_name, []).append(inst)
        rng = np.random.default_rng(seed)
        for name in sorted(grouped):
            if name in self._buffers:
                continue
            pool = grouped[name]
            take = min(self.capacity, len(pool))
            idx = sorted(rng.choice(len(pool), size=take, replace=False).tolist())
            self._buffers[name] = [pool[i] for i in idx]
        return self


def update_exemplars(store: ExemplarStore, task_data: Sequence[AnnotatedInstance],
                     seed) -> ExemplarStore:
    return store.update(task_data, seed)


@dataclass
class DetectorState:
    """Everything that evolves across tasks, plus the fixed anchor bank."""

    schedule: TaskSchedule
    anchor_bank: SemanticTopology     # source of anchor vectors, never trained
    topology: SemanticTopology        # grows as tasks register their classes
    params: M.ModelParams
    exemplars: ExemplarStore
    known_slots: set[int] = field(default_factory=set)
    tasks_run: int = 0

    def slot_of(self, name: str) -> int:
        if name == UNKNOWN_NAME:
            return self.params.unknown_slot
        return self.topology.id_of(name) - 1

    def name_of_slot(self, slot: int) -> str:
        if slot == self.params.unknown_slot:
            return UNKNOWN_NAME
        return self.topology.name_of(slot + 1)

    def anchor_vector(self, name: str) -> np.ndarray:
        return self.topology.vector(name)


def init_detector(config: ExperimentConfig, schedule: TaskSchedule,
                  anchor_bank: SemanticTopology) -> DetectorState:
    """Build the task-0 state and fail fast on config/schedule inconsistencies."""
    names = schedule.all_names()
    missing = [n for n in names if n not in anchor_bank.names]
    if missing:
        raise ProtocolError(
            f"anchor source has no vector for scheduled class {missing[0]!r}")
    if len(names) > config.model.max_classes:
        raise ProtocolError(
            f"schedule introduces {len(names)} classes but model.max_classes "
            f"is {config.model.max_classes}")
    topology = SemanticTopology(anchor_bank.dim,
                                unknown_vector=anchor_bank.vector(UNKNOWN_NAME),
                                normalize=False, source=anchor_bank.source)
    params = M.init_params(config.model.input_dim, config.model.hidden,
                           config.model.feature_dim, anchor_bank.dim,
                           config.model.max_classes, seed=config.seed)
    return DetectorState(schedule=schedule, anchor_bank=anchor_bank,
                         topology=topology, params=params,
                         exemplars=ExemplarStore(config.exemplars.capacity))


def mine_unknown_instances(train_data: Sequence[AnnotatedInstance],
                           proposals: Sequence[Proposal],
                           k: int, overlap_thresh: float) -> list[AnnotatedInstance]:
    """Relabel each image's qualifying background proposals as `unknown`.

    Proposals are grouped by image; per image the top-k by objectness whose
    IoU with every annotated box of that image stays at or below the
    threshold become unknown-labeled training instances.
    """
    boxes_by_image: dict[int, list] = {}
    for inst in train_data:
        if inst.box is not None:
            boxes_by_image.setdefault(inst.image_id, []).append(inst.box)
    props_by_image: dict[int, list[Proposal]] = {}
    for prop in proposals:
        props_by_image.setdefault(prop.image_id, []).append(prop)

    mined: list[AnnotatedInstance] = []
    for image_id in sorted(props_by_image):
        props = props_by_image[image_id]
        gt_boxes = boxes_by_image.get(image_id, [])
        for idx in select_unknown_proposals(props, gt_boxes, k, overlap_thresh):
            prop = props[idx]
            mined.append(AnnotatedInstance(image_id=image_id, class_name=UNKNOWN_NAME,
                                           input=prop.input, box=prop.box))
    return mined


def _instance_anchor(state: DetectorState, name: str,
                     config: ExperimentConfig) -> np.ndarray | None:
    if name == UNKNOWN_NAME and not config.sa_applies_to_unknown():
        return None
    return state.anchor_vector(name)


def _train_instances(state: DetectorState, instances: Sequence[AnnotatedInstance],
                     config: ExperimentConfig, epochs: int, lr: float,
                     rng: np.random.Generator, freeze_extractor: bool = False,
                     weights: M.LossWeights | None = None) -> None:
    """Mini-batch momentum SGD over shuffled epochs; mutates state.params.

    Per-instance gradients are accumulated sequentially and averaged, so one
    parameter step is taken per batch; the final batch of an epoch may be
    smaller than optimizer.batch_size.
    """
    if not instances or epochs == 0:
        return
    if weights is None:
        w_sa, w_se, w_roi, w_reg = config.effective_weights()
        weights = M.LossWeights(sa=w_sa, cls_sem=w_se, cls_roi=w_roi, reg=w_reg)
    known_mask = M.slot_mask(sorted(state.known_slots), state.params.num_slots)
    batch_size = config.optimizer.batch_size
    velocity = None
    for _ in range(epochs):
        order = rng.permutation(len(instances))
        for start in range(0, len(order), batch_size):
            chunk = order[start:start + batch_size]
            grads = state.params.zeros_like()
            for i in chunk:
                inst = instances[i]
                trace = M.forward(state.params, inst.input_array, known_mask)
                M.total_loss(state.params, trace, state.slot_of(inst.class_name),
                             _instance_anchor(state, inst.class_name, config),
                             inst.box_array, weights, out_grads=grads)
            grads.iscale(1.0 / len(chunk))
            if freeze_extractor:
                for block in (*grads.ext_w, *grads.ext_b):
                    block.fill(0.0)
            state.params, velocity = M.sgd_step(state.params, grads, lr,
                                                config.optimizer.momentum, velocity)


def run_task(state: DetectorState, task_index: int,
             train_data: Sequence[AnnotatedInstance],
             config: ExperimentConfig) -> DetectorState:
    """Advance the detector by one task: register anchors, unmask slots,
    train, refresh the exemplar store, then stabilize against the old anchors.

    ``train_data`` holds the task's labeled instances plus any pre-mined
    unknown-labeled instances (see mine_unknown_instances). Labels outside
    the task's class set are rejected.
    """
    if task_index != state.tasks_run + 1:
        raise ProtocolError(
            f"tasks must run in order: expected task {state.tasks_run + 1}, "
            f"got {task_index}")
    task_classes = state.schedule.task_names(task_index)
    allowed = set(task_classes) | {UNKNOWN_NAME}
    for inst in train_data:
        if inst.class_name not in allowed:
            raise ProtocolError(
                f"instance labeled {inst.class_name!r} is outside task "
                f"{task_index}'s classes")

    if not task_classes:
        state.tasks_run = task_index
        return state

    for name in task_classes:
        class_id = state.topology.register_anchor(name, state.anchor_bank.vector(name))
        state.known_slots.add(class_id - 1)
    state.known_slots.add(state.params.unknown_slot)

    rng = np.random.default_rng([config.seed, task_index, 1])
    _train_instances(state, list(train_data), config,
                     config.optimizer.epochs, config.optimizer.lr, rng)

    labeled = [inst for inst in train_data if inst.class_name != UNKNOWN_NAME]
    state.exemplars.update(labeled, seed=[config.seed, task_index, 2])

    old_classes = state.schedule.known_at(task_index - 1)
    if old_classes and config.optimizer.finetune_epochs > 0:
        finetune_stabilize(state, state.exemplars, labeled, config)

    state.tasks_run = task_index
    return state


def finetune_stabilize(state: DetectorState, exemplars: ExemplarStore,
                       new_task_data: Sequence[AnnotatedInstance],
                       config: ExperimentConfig) -> DetectorState:
    """Re-pull old-class features toward their fixed anchors after a task.

    Trains on a class-balanced union: each old class contributes its stored
    exemplars, each new class an equal-size seeded subsample, all under the
    full training objective. Old classes with an empty buffer produce a
    warning and are skipped.
    """
    task_index = state.tasks_run + 1
    old_classes = state.schedule.known_at(task_index - 1)
    pools: dict[str, list[AnnotatedInstance]] = {}
    for name in old_classes:
        buffer = exemplars.get(name)
        if not buffer:
            logger.warning("no exemplars stored for known class %r; "
                           "stabilizing without it", name)
            continue
        pools[name] = buffer
    for inst in new_task_data:
        if inst.class_name != UNKNOWN_NAME:
            pools.setdefault(inst.class_name, []).append(inst)
    if not pools:
        return state

    per_class = min(len(pool) for pool in pools.values())
    per_class = min(per_class, config.exemplars.capacity)
    rng = np.random.default_rng([config.seed, task_index, 3])
    balanced: list[AnnotatedInstance] = []
    for name in sorted(pools):
        pool = pools[name]
        idx = sorted(rng.choice(len(pool), size=per_class, replace=False).tolist())
        balanced.extend(pool[i] for i in idx)

    w_sa, w_se, w_roi, w_reg = config.effective_weights()
    if config.ablation.plain_finetune:
        w_sa = 0.0
    _train_instances(state, balanced, config, config.optimizer.finetune_epochs,
                     config.optimizer.finetune_lr, rng,
                     freeze_extractor=config.optimizer.freeze_extractor_in_finetune,
                     weights=M.LossWeights(sa=w_sa, cls_sem=w_se, cls_roi=w_roi,
                                           reg=w_reg))
    return state


# -- inference and evaluation --------------------------------------------------


@dataclass(frozen=True)
class InstancePrediction:
    image_id: int
    true_name: str                   # label as annotated in the eval file
    pred_name: str
    score: float
    box: tuple[float, float, float, float]
    f_hat: np.ndarray


def predict_instances(state: DetectorState, eval_data: Sequence[AnnotatedInstance],
                      mode: str = "ensemble") -> list[InstancePrediction]:
    """Classify each held-out instance; its own box stands in for localization.

    ``mode`` selects the posterior: 'ensemble' multiplies the two heads,
    'roi' / 'sem' use a single head (the classifier-ablation variants).
    """
    if mode not in ("ensemble", "roi", "sem"):
        raise ProtocolError(f"unknown inference mode {mode!r}")
    known_mask = M.slot_mask(sorted(state.known_slots), state.params.num_slots)
    out = []
    for inst in eval_data:
        if inst.box is None:
            raise ProtocolError(
                f"evaluation instance {inst.image_id} has no box annotation")
        trace = M.forward(state.params, inst.input_array, known_mask)
        if mode == "ensemble":
            slot, score, _ = ensemble_predict(trace.p_roi, trace.p_sem)
        else:
            post = trace.p_roi if mode == "roi" else trace.p_sem
            slot = int(np.argmax(post))
            score = float(post[slot])
        out.append(InstancePrediction(
            image_id=inst.image_id, true_name=inst.class_name,
            pred_name=state.name_of_slot(slot), score=score,
            box=inst.box, f_hat=trace.f_hat))
    return out


def relabel_for_time_point(name: str, known: Sequence[str]) -> str:
    return name if name in known else UNKNOWN_NAME


def evaluate_time_point(state: DetectorState, eval_data: Sequence[AnnotatedInstance],
                        schedule: TaskSchedule, t: int,
                        config: ExperimentConfig,
                        predictions: Sequence[InstancePrediction] | None = None,
                        ) -> MetricsRecord:
    """Score the detector after task t; future-task classes count as unknown.

    mAP is split into previously-known classes (tasks < t), the current
    task's classes, and their union, mirroring the incremental reporting
    convention. Precomputed ``predictions`` may be passed to avoid a second
    forward pass when the caller also wants the raw features.
    """
    if predictions is None:
        predictions = predict_instances(state, eval_data, config.inference_mode())
    known = schedule.known_at(t)
    gts = [GroundTruth(image_id=p.image_id,
                       class_name=relabel_for_time_point(p.true_name, known),
                       box=p.box)
           for p in predictions]
    dets = [Detection(image_id=p.image_id, class_name=p.pred_name,
                      score=p.score, box=p.box)
            for p in predictions]

    mc = config.metrics
    wi = compute_wi(dets, gts, known_set=known, iou_thresh=mc.iou_thresh,
                    recall_level=mc.wi_recall_level)
    a_ose = compute_aose(dets, gts, known_set=known, iou_thresh=mc.iou_thresh,
                         score_thresh=mc.aose_score_thresh)
    prev = schedule.known_at(t - 1)
    curr = schedule.task_names(t)
    splits = {}
    for key, classes in (("prev", prev), ("curr", curr), ("both", known)):
        if classes:
            splits[key] = compute_map(dets, gts, classes=classes,
                                      iou_thresh=mc.iou_thresh,
                                      use_11point=mc.use_11point).mean
        else:
            splits[key] = None
    return MetricsRecord(wi=wi, a_ose=a_ose, map_prev=splits["prev"],
                         map_curr=splits["curr"], map_both=splits["both"])


def mean_own_anchor_distance(state: DetectorState,
                             instances: Sequence[AnnotatedInstance],
                             class_names: Sequence[str]) -> float:
    """Mean ||f_hat - anchor(label)|| over instances of the given classes."""
    wanted = set(class_names)
    known_mask = M.slot_mask(sorted(state.known_slots), state.params.num_slots)
    distances = []
    for inst in instances:
        if inst.class_name not in wanted:
            continue
        trace = M.forward(state.params, inst.input_array, known_mask)
        distances.append(float(np.linalg.norm(
            trace.f_hat - state.anchor_vector(inst.class_name))))
    if not distances:
        raise ProtocolError("no instances of the requested classes")
    return float(np.mean(distances))
