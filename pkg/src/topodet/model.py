"""Trainable detection head: feature extractor, semantic projector, dual
classifiers, and box regressor, with hand-derived gradients.

The extractor is a small tanh MLP standing in for a full backbone: it maps a
raw input vector (dim ``p``) to an RoI-style feature ``f`` (dim ``d``). A
single linear layer (the semantic projector) aligns ``f`` with the anchor
dimension ``n``, giving the semantic feature ``f_hat``. Two classifier heads
score the same label layout -- slots ``0 .. C_max-1`` for object classes in
registration order, the final slot for `unknown` -- one from ``f``, one from
``f_hat``. A 4-way linear head regresses center-format boxes from ``f``.

All gradients are derived by hand and checked against central finite
differences in the test suite; there is deliberately no autodiff here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

#: value written into masked (unseen-class) logit slots; large enough that the
#: masked softmax mass underflows to zero in float64.
MASK_VALUE = -1e10

#: below this distance the anchor-pull gradient is treated as singular (zero).
EPS_SINGULAR = 1e-12

CHECKPOINT_MAGIC = b"TDCKPT1\n"


class ModelError(ValueError):
    """Bad shapes, non-finite numbers, or labels outside the known set."""


@dataclass(frozen=True)
class LossWeights:
    """Weights of the four terms of the training objective (all 1 by default)."""

    sa: float = 1.0
    cls_sem: float = 1.0
    cls_roi: float = 1.0
    reg: float = 1.0

    def __post_init__(self):
        for name in ("sa", "cls_sem", "cls_roi", "reg"):
            if getattr(self, name) < 0:
                raise ModelError(f"loss weight {name} must be >= 0")


@dataclass
class ModelParams:
    """All parameter blocks of the head.

    ``ext_w[i]`` has shape (dims[i+1], dims[i]) for dims = [p, *hidden, d];
    every extractor layer but the last is followed by tanh. ``proj_w`` is
    (d, n), the classifier heads are (C_max+1, d) and (C_max+1, n), and the
    box head is (4, d).
    """

    ext_w: list[np.ndarray]
    ext_b: list[np.ndarray]
    proj_w: np.ndarray
    proj_b: np.ndarray
    roi_w: np.ndarray
    roi_b: np.ndarray
    sem_w: np.ndarray
    sem_b: np.ndarray
    box_w: np.ndarray
    box_b: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.ext_w[0].shape[1]

    @property
    def feature_dim(self) -> int:
        return self.ext_w[-1].shape[0]

    @property
    def anchor_dim(self) -> int:
        return self.proj_w.shape[1]

    @property
    def num_slots(self) -> int:
        return self.roi_w.shape[0]

    @property
    def max_classes(self) -> int:
        return self.num_slots - 1

    @property
    def unknown_slot(self) -> int:
        return self.max_classes

    def named_blocks(self) -> Iterator[tuple[str, np.ndarray]]:
        for i, (w, b) in enumerate(zip(self.ext_w, self.ext_b)):
            yield f"ext_w{i}", w
            yield f"ext_b{i}", b
        yield "proj_w", self.proj_w
        yield "proj_b", self.proj_b
        yield "roi_w", self.roi_w
        yield "roi_b", self.roi_b
        yield "sem_w", self.sem_w
        yield "sem_b", self.sem_b
        yield "box_w", self.box_w
        yield "box_b", self.box_b

    def copy(self) -> "ModelParams":
        return ModelParams(
            ext_w=[w.copy() for w in self.ext_w],
            ext_b=[b.copy() for b in self.ext_b],
            proj_w=self.proj_w.copy(), proj_b=self.proj_b.copy(),
            roi_w=self.roi_w.copy(), roi_b=self.roi_b.copy(),
            sem_w=self.sem_w.copy(), sem_b=self.sem_b.copy(),
            box_w=self.box_w.copy(), box_b=self.box_b.copy(),
        )

    def zeros_like(self) -> "ModelParams":
        out = self.copy()
        for _, arr in out.named_blocks():
            arr.fill(0.0)
        return out

    def iadd(self, other: "ModelParams", scale: float = 1.0) -> "ModelParams":
        for (_, a), (_, b) in zip(self.named_blocks(), other.named_blocks()):
            a += scale * b
        return self

    def iscale(self, scale: float) -> "ModelParams":
        for _, arr in self.named_blocks():
            arr *= scale
        return self

    def to_flat(self) -> np.ndarray:
        return np.concatenate([arr.ravel() for _, arr in self.named_blocks()])

    def from_flat(self, flat: np.ndarray) -> "ModelParams":
        out = self.zeros_like()
        offset = 0
        for _, arr in out.named_blocks():
            arr[...] = flat[offset:offset + arr.size].reshape(arr.shape)
            offset += arr.size
        if offset != flat.size:
            raise ModelError(f"flat vector has {flat.size} entries, expected {offset}")
        return out

    def allfinite(self) -> bool:
        return all(np.all(np.isfinite(arr)) for _, arr in self.named_blocks())


def init_params(input_dim: int, hidden: Sequence[int], feature_dim: int,
                anchor_dim: int, max_classes: int, seed: int) -> ModelParams:
    """Seeded uniform(+-1/sqrt(fan_in)) weights, zero biases."""
    if min(input_dim, feature_dim, anchor_dim) < 1 or max_classes < 1:
        raise ModelError("all model dimensions must be positive")
    rng = np.random.default_rng(seed)

    def linear(out_dim: int, in_dim: int) -> tuple[np.ndarray, np.ndarray]:
        limit = 1.0 / np.sqrt(in_dim)
        return rng.uniform(-limit, limit, size=(out_dim, in_dim)), np.zeros(out_dim)

    dims = [input_dim, *hidden, feature_dim]
    ext_w, ext_b = [], []
    for i in range(len(dims) - 1):
        w, b = linear(dims[i + 1], dims[i])
        ext_w.append(w)
        ext_b.append(b)
    slots = max_classes + 1
    proj_wt, proj_b = linear(anchor_dim, feature_dim)
    roi_w, roi_b = linear(slots, feature_dim)
    sem_w, sem_b = linear(slots, anchor_dim)
    box_w, box_b = linear(4, feature_dim)
    return ModelParams(ext_w=ext_w, ext_b=ext_b,
                       proj_w=proj_wt.T.copy(), proj_b=proj_b,
                       roi_w=roi_w, roi_b=roi_b,
                       sem_w=sem_w, sem_b=sem_b,
                       box_w=box_w, box_b=box_b)


# -- forward pass ----------------------------------------------------------


def slot_mask(known_slots, num_slots: int) -> np.ndarray:
    """Normalize a known-slot specification into a boolean mask of length num_slots."""
    if isinstance(known_slots, (set, frozenset)):
        known_slots = sorted(known_slots)
    known = np.asarray(known_slots)
    if known.dtype == bool:
        if known.shape != (num_slots,):
            raise ModelError(f"boolean mask must have length {num_slots}")
        return known.copy()
    mask = np.zeros(num_slots, dtype=bool)
    for s in np.atleast_1d(known).astype(int):
        if not 0 <= s < num_slots:
            raise ModelError(f"slot {s} outside 0..{num_slots - 1}")
        mask[s] = True
    return mask


def mask_unseen_logits(logits: np.ndarray, known_slots) -> np.ndarray:
    """Replace logits of slots outside the known set with a large negative value."""
    mask = slot_mask(known_slots, len(logits))
    out = np.array(logits, dtype=np.float64)
    out[~mask] = MASK_VALUE
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits)
    e = np.exp(z)
    return e / np.sum(e)


@dataclass
class ForwardTrace:
    """Cached activations of one forward pass, enough to backprop from."""

    input: np.ndarray
    hidden: list[np.ndarray]      # tanh outputs of each hidden layer
    f: np.ndarray                 # RoI-style feature (d,)
    f_hat: np.ndarray             # semantic feature (n,)
    roi_logits: np.ndarray        # raw, unmasked (C_max+1,)
    sem_logits: np.ndarray
    known_mask: np.ndarray        # boolean (C_max+1,)
    p_roi: np.ndarray             # masked-softmax posteriors
    p_sem: np.ndarray
    box: np.ndarray               # center-format [x, y, w, h] prediction


def forward(params: ModelParams, input, known_slots) -> ForwardTrace:
    """Run the head on one input vector under the given known-slot mask."""
    x = np.asarray(input, dtype=np.float64)
    if x.shape != (params.input_dim,):
        raise ModelError(f"input shape {x.shape} != ({params.input_dim},)")
    if not np.all(np.isfinite(x)):
        raise ModelError("non-finite input rejected")
    mask = slot_mask(known_slots, params.num_slots)

    h = x
    hidden = []
    for w, b in zip(params.ext_w[:-1], params.ext_b[:-1]):
        h = np.tanh(w @ h + b)
        hidden.append(h)
    f = params.ext_w[-1] @ h + params.ext_b[-1]
    f_hat = params.proj_w.T @ f + params.proj_b
    roi_logits = params.roi_w @ f + params.roi_b
    sem_logits = params.sem_w @ f_hat + params.sem_b
    p_roi = softmax(mask_unseen_logits(roi_logits, mask))
    p_sem = softmax(mask_unseen_logits(sem_logits, mask))
    box = params.box_w @ f + params.box_b
    return ForwardTrace(input=x, hidden=hidden, f=f, f_hat=f_hat,
                        roi_logits=roi_logits, sem_logits=sem_logits,
                        known_mask=mask, p_roi=p_roi, p_sem=p_sem, box=box)


# -- loss terms --------------------------------------------------------------


def loss_sa(f_hat: np.ndarray, anchor: np.ndarray) -> float:
    """Euclidean distance between a semantic feature and its class anchor."""
    f_hat = np.asarray(f_hat, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    if f_hat.shape != anchor.shape:
        raise ModelError(f"shape mismatch {f_hat.shape} vs {anchor.shape}")
    return float(np.linalg.norm(f_hat - anchor))


def grad_loss_sa(f_hat: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    """d/d f_hat of loss_sa; zero at the singular point f_hat == anchor."""
    f_hat = np.asarray(f_hat, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    diff = f_hat - anchor
    dist = np.linalg.norm(diff)
    if dist < EPS_SINGULAR:
        return np.zeros_like(diff)
    return diff / dist


def loss_cls(masked_logits: np.ndarray, label: int) -> float:
    """Softmax cross-entropy over masked logits; the label slot must be unmasked."""
    logits = np.asarray(masked_logits, dtype=np.float64)
    if not 0 <= label < len(logits):
        raise ModelError(f"label {label} outside logit range")
    if logits[label] == MASK_VALUE:
        raise ModelError(f"label {label} is a masked (unseen) slot")
    z = logits - np.max(logits)
    return float(np.log(np.sum(np.exp(z))) - z[label])


def grad_loss_cls(masked_logits: np.ndarray, label: int) -> np.ndarray:
    """d loss_cls / d logits = softmax(masked) - onehot(label)."""
    logits = np.asarray(masked_logits, dtype=np.float64)
    if logits[label] == MASK_VALUE:
        raise ModelError(f"label {label} is a masked (unseen) slot")
    g = softmax(logits)
    g[label] -= 1.0
    return g


def _check_target_box(target_box: np.ndarray) -> np.ndarray:
    box = np.asarray(target_box, dtype=np.float64)
    if box.shape != (4,):
        raise ModelError(f"target box must be [x, y, w, h], got shape {box.shape}")
    if box[2] <= 0 or box[3] <= 0:
        raise ModelError("target box width and height must be positive")
    return box


def loss_reg(pred_box: np.ndarray, target_box: np.ndarray) -> float:
    """Smooth-L1 (transition 1.0) summed over the 4 center-format coordinates."""
    target = _check_target_box(target_box)
    delta = np.asarray(pred_box, dtype=np.float64) - target
    absd = np.abs(delta)
    per_coord = np.where(absd < 1.0, 0.5 * delta ** 2, absd - 0.5)
    return float(np.sum(per_coord))


def grad_loss_reg(pred_box: np.ndarray, target_box: np.ndarray) -> np.ndarray:
    """d loss_reg / d pred_box: delta inside the quadratic zone, +-1 outside."""
    target = _check_target_box(target_box)
    delta = np.asarray(pred_box, dtype=np.float64) - target
    return np.where(np.abs(delta) < 1.0, delta, np.sign(delta))


# -- composite objective ------------------------------------------------------


def total_loss(params: ModelParams, trace: ForwardTrace, label: int,
               anchor: np.ndarray | None, target_box,
               weights: LossWeights = LossWeights(),
               out_grads: ModelParams | None = None) -> tuple[float, ModelParams]:
    """Weighted sum of the four loss terms plus its full parameter gradient.

    ``label`` is a classifier slot (object class slot or the unknown slot).
    ``anchor = None`` skips the anchor term for this instance (used when the
    unknown anchor is disabled); ``target_box = None`` skips the box term.
    Gradients are accumulated into ``out_grads`` when given, else into a fresh
    zero block set that is returned.
    """
    if not 0 <= label < params.num_slots:
        raise ModelError(f"label {label} outside slot range")
    if not trace.known_mask[label]:
        raise ModelError(f"label {label} is a masked (unseen) slot")
    grads = out_grads if out_grads is not None else params.zeros_like()
    mask_ind = trace.known_mask.astype(np.float64)
    loss = 0.0

    g_fhat = np.zeros_like(trace.f_hat)
    g_f = np.zeros_like(trace.f)

    if weights.sa > 0.0 and anchor is not None:
        loss += weights.sa * loss_sa(trace.f_hat, anchor)
        g_fhat += weights.sa * grad_loss_sa(trace.f_hat, anchor)

    if weights.cls_sem > 0.0:
        masked_sem = mask_unseen_logits(trace.sem_logits, trace.known_mask)
        loss += weights.cls_sem * loss_cls(masked_sem, label)
        g_sem_logits = weights.cls_sem * grad_loss_cls(masked_sem, label) * mask_ind
        grads.sem_w += np.outer(g_sem_logits, trace.f_hat)
        grads.sem_b += g_sem_logits
        g_fhat += params.sem_w.T @ g_sem_logits

    if weights.cls_roi > 0.0:
        masked_roi = mask_unseen_logits(trace.roi_logits, trace.known_mask)
        loss += weights.cls_roi * loss_cls(masked_roi, label)
        g_roi_logits = weights.cls_roi * grad_loss_cls(masked_roi, label) * mask_ind
        grads.roi_w += np.outer(g_roi_logits, trace.f)
        grads.roi_b += g_roi_logits
        g_f += params.roi_w.T @ g_roi_logits

    if weights.reg > 0.0 and target_box is not None:
        loss += weights.reg * loss_reg(trace.box, target_box)
        g_box = weights.reg * grad_loss_reg(trace.box, target_box)
        grads.box_w += np.outer(g_box, trace.f)
        grads.box_b += g_box
        g_f += params.box_w.T @ g_box

    # semantic projector: f_hat = proj_w^T f + proj_b
    grads.proj_w += np.outer(trace.f, g_fhat)
    grads.proj_b += g_fhat
    g_f += params.proj_w @ g_fhat

    # extractor backprop through the tanh stack
    delta = g_f
    prev = trace.hidden[-1] if trace.hidden else trace.input
    grads.ext_w[-1] += np.outer(delta, prev)
    grads.ext_b[-1] += delta
    delta_h = params.ext_w[-1].T @ delta
    for i in range(len(trace.hidden) - 1, -1, -1):
        h_i = trace.hidden[i]
        delta_a = delta_h * (1.0 - h_i ** 2)
        prev = trace.hidden[i - 1] if i > 0 else trace.input
        grads.ext_w[i] += np.outer(delta_a, prev)
        grads.ext_b[i] += delta_a
        delta_h = params.ext_w[i].T @ delta_a

    return float(loss), grads


# -- optimizer ----------------------------------------------------------------


def sgd_step(params: ModelParams, grads: ModelParams, lr: float, momentum: float,
             velocity: ModelParams | None = None) -> tuple[ModelParams, ModelParams]:
    """Classic momentum SGD: v' = momentum*v + g; p' = p - lr*v'.

    Returns the updated params and velocity. A zero velocity is created when
    none is passed. Non-finite gradients reject the whole step.
    """
    for name, arr in grads.named_blocks():
        if not np.all(np.isfinite(arr)):
            raise ModelError(f"non-finite gradient in block {name}; step rejected")
    if velocity is None:
        velocity = params.zeros_like()
    new_velocity = velocity.copy().iscale(momentum).iadd(grads)
    new_params = params.copy().iadd(new_velocity, scale=-lr)
    return new_params, new_velocity


# -- checkpointing -------------------------------------------------------------


def save_checkpoint(path, params: ModelParams, extra: dict | None = None) -> None:
    """Binary checkpoint: magic, sorted-key JSON header, raw float64 LE blocks.

    Deliberately avoids zip containers so two identical saves are byte-identical.
    """
    blocks = list(params.named_blocks())
    header = {
        "version": 1,
        "blocks": [{"name": name, "shape": list(arr.shape)} for name, arr in blocks],
        "extra": extra or {},
    }
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(payload + b"\n")
        for _, arr in blocks:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    path = Path(path)
    with path.open("rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ModelError(f"{path}: not a checkpoint file")
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("version") != 1:
            raise ModelError(f"{path}: unsupported checkpoint version {header.get('version')}")
        arrays = {}
        for spec in header["blocks"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise ModelError(f"{path}: truncated block {spec['name']}")
            arrays[spec["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise ModelError(f"{path}: trailing bytes after last block")

    ext_w, ext_b = [], []
    for i in range(sum(1 for name in arrays if name.startswith("ext_w"))):
        ext_w.append(arrays[f"ext_w{i}"])
        ext_b.append(arrays[f"ext_b{i}"])
    params = ModelParams(ext_w=ext_w, ext_b=ext_b,
                         proj_w=arrays["proj_w"], proj_b=arrays["proj_b"],
                         roi_w=arrays["roi_w"], roi_b=arrays["roi_b"],
                         sem_w=arrays["sem_w"], sem_b=arrays["sem_b"],
                         box_w=arrays["box_w"], box_b=arrays["box_b"])
    return params, header["extra"]
