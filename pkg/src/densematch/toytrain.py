"""A desk-scale detection trainer for comparing matching/loss recipes.

Each synthetic scene is seen through a simulated encoder that emits a fixed
number of query vectors: four box logits and one confidence logit per
query, together with noisy cues about the query's own localization error.
Queries seeded from targets carry a systematic box bias plus noise; the
rest are distractors.  The learned decoder is shared by every query and
scene::

    box  = sigmoid(box_logits + box_gain * hint + box_bias)
    p    = sigmoid(conf_weights . [conf_logit, mean|hint|] + conf_bias)

Training follows the DETR recipe: Hungarian matching on the decoded
queries, the classification loss on every query (matched ones are
positives with ``q`` = live IoU, detached), L1 on matched boxes, plain
gradient descent under the flat-cosine schedule.  Losses are summed over
the queries and targets of an image and averaged over images, so images
with more targets deliver more supervision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .densify import AugPolicy, ImageAnnotations, apply_policy
from .geometry import Box, Target, pairwise_iou
from .losses import LossParams, LossVariant, loss_terms, sigmoid
from .matching import CostWeights, cost_from_arrays, hungarian
from .schedule import AugState, ScheduleConfig, aug_at, lr_at, progress

_LOGIT_CLIP = 1e-6


def _logit(x):
    x = np.clip(np.asarray(x, dtype=float), _LOGIT_CLIP, 1.0 - _LOGIT_CLIP)
    return np.log(x) - np.log1p(-x)


# -- model -----------------------------------------------------------------------------


@dataclass
class ToyModel:
    box_gain: np.ndarray = field(default_factory=lambda: np.zeros(4))
    box_bias: np.ndarray = field(default_factory=lambda: np.zeros(4))
    conf_weights: np.ndarray = field(default_factory=lambda: np.zeros(2))
    conf_bias: float = 0.0

    N_PARAMS = 11

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.box_gain, self.box_bias, self.conf_weights, [self.conf_bias]])

    @classmethod
    def from_vector(cls, theta) -> "ToyModel":
        theta = np.asarray(theta, dtype=float)
        return cls(theta[0:4].copy(), theta[4:8].copy(), theta[8:10].copy(), float(theta[10]))


@dataclass(frozen=True)
class Queries:
    """Encoder output for one image: ``M`` query vectors plus their cues."""

    box_logits: np.ndarray  # (M, 4)
    conf_logits: np.ndarray  # (M,)
    hints: np.ndarray  # (M, 4) noisy observation of each query's box-logit error

    def __len__(self) -> int:
        return len(self.conf_logits)

    def features(self) -> np.ndarray:
        return np.stack([self.conf_logits, np.abs(self.hints).mean(axis=1)], axis=1)


def decode(model: ToyModel, queries: Queries) -> Tuple[np.ndarray, np.ndarray]:
    """Decoded ``(boxes (M, 4), probabilities (M,))``."""
    z = queries.box_logits + model.box_gain * queries.hints + model.box_bias
    s = queries.features() @ model.conf_weights + model.conf_bias
    return sigmoid(z), sigmoid(s)


# -- task ------------------------------------------------------------------------------


@dataclass(frozen=True)
class ToyTask:
    """The synthetic world: scene layout and the simulated encoder."""

    n_queries: int = 50
    n_train_scenes: int = 16
    n_eval_scenes: int = 32
    min_targets: int = 2
    max_targets: int = 6
    min_size: float = 0.08
    max_size: float = 0.3
    box_bias: Tuple[float, float, float, float] = (0.4, -0.4, 0.6, 0.6)
    box_noise: float = 0.25
    hint_noise: float = 0.15
    fg_conf_mean: float = 1.0
    bg_conf_mean: float = -1.0
    conf_noise: float = 0.75
    encoder_recall: float = 1.0


def make_scene(rng: np.random.Generator, n_targets: int, task: ToyTask, image_id=0) -> ImageAnnotations:
    sizes = rng.uniform(task.min_size, task.max_size, size=(n_targets, 2))
    centers = sizes / 2 + rng.uniform(0.0, 1.0, size=(n_targets, 2)) * (1.0 - sizes)
    targets = tuple(Target(Box(cx, cy, w, h)) for (cx, cy), (w, h) in zip(centers, sizes))
    return ImageAnnotations(image_id, (640, 640), targets)


def encode(rng: np.random.Generator, scene: ImageAnnotations, task: ToyTask) -> Queries:
    """Simulated encoder: one query per target (up to ``n_queries``), the rest distractors."""
    m = task.n_queries
    tboxes = np.array([t.box.as_tuple() for t in scene.targets]).reshape(-1, 4)
    seen = rng.random(len(tboxes)) < task.encoder_recall
    tboxes = tboxes[seen][:m]
    n_fg = len(tboxes)
    noise = rng.normal(0.0, task.box_noise, size=(m, 4))
    hints = noise + rng.normal(0.0, task.hint_noise, size=(m, 4))
    sizes = rng.uniform(task.min_size, task.max_size, size=(m, 2))
    centers = sizes / 2 + rng.uniform(0.0, 1.0, size=(m, 2)) * (1.0 - sizes)
    box_logits = _logit(np.hstack([centers, sizes]))
    conf = rng.normal(task.bg_conf_mean, task.conf_noise, size=m)
    if n_fg:
        fg_rows = rng.permutation(m)[:n_fg]
        box_logits[fg_rows] = _logit(tboxes[:n_fg]) + np.asarray(task.box_bias) + noise[fg_rows]
        conf[fg_rows] += task.fg_conf_mean - task.bg_conf_mean
    return Queries(box_logits, conf, hints)


# -- config / trace ----------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    loss: LossParams = field(default_factory=lambda: LossParams.default(LossVariant.MAL))
    dense_o2o: bool = True
    policy: AugPolicy = field(default_factory=AugPolicy)
    schedule: ScheduleConfig = field(
        default_factory=lambda: ScheduleConfig(total_epochs=24, warmup_epochs_lr=1, base_lr=0.01, min_lr=0.005)
    )
    cost: CostWeights = field(default_factory=CostWeights)
    lambda_cls: float = 1.0
    lambda_l1: float = 5.0
    steps_per_epoch: int = 5
    batch_size: int = 4
    seed: int = 0
    eval_iou: float = 0.5
    task: ToyTask = field(default_factory=ToyTask)

    def __post_init__(self):
        if self.lambda_cls <= 0 or self.lambda_l1 <= 0:
            raise ValueError("loss weights must be positive")
        if self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("steps_per_epoch and batch_size must be >= 1")


def arm_config(arm: str, seed: int = 0, **overrides) -> TrainConfig:
    """``baseline``: VFL with plain one-to-one matching.  ``deim``: MAL with dense O2O."""
    if arm == "baseline":
        cfg = TrainConfig(loss=LossParams.default(LossVariant.VFL), dense_o2o=False, seed=seed)
    elif arm == "deim":
        cfg = TrainConfig(loss=LossParams.default(LossVariant.MAL), dense_o2o=True, seed=seed)
    else:
        raise ValueError(f"unknown arm {arm!r}; expected 'baseline' or 'deim'")
    return replace(cfg, **overrides) if overrides else cfg


TRACE_FIELDS = ("epoch", "lr", "total_loss", "cls_loss", "box_loss", "toy_ap", "mean_iou", "positives_per_image")


@dataclass
class TrainTrace:
    epoch: List[int] = field(default_factory=list)
    lr: List[float] = field(default_factory=list)
    total_loss: List[float] = field(default_factory=list)
    cls_loss: List[float] = field(default_factory=list)
    box_loss: List[float] = field(default_factory=list)
    toy_ap: List[float] = field(default_factory=list)
    mean_iou: List[float] = field(default_factory=list)
    positives_per_image: List[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.epoch)

    def rows(self):
        for i in range(len(self)):
            yield {k: getattr(self, k)[i] for k in TRACE_FIELDS}

    def epochs_to_reach(self, ap: float) -> Optional[int]:
        """Number of epochs after which toy-AP first reaches ``ap``; ``None`` if never."""
        for i, v in enumerate(self.toy_ap):
            if v >= ap:
                return i + 1
        return None


class DivergenceError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"loss became non-finite ({value}) at step {step}")
        self.step = step


# -- loss and gradient -------------------------------------------------------------------


@dataclass(frozen=True)
class ImageLoss:
    cls: float
    box: float
    grad: np.ndarray
    n_positives: int
    matched_iou: np.ndarray


def match_image(model: ToyModel, queries: Queries, targets: np.ndarray, cost: CostWeights):
    """Hungarian assignment of decoded queries to ``targets``; returns ``(pred_idx, target_idx)``."""
    if len(targets) == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    boxes, p = decode(model, queries)
    c = cost_from_arrays(boxes, np.repeat(p[:, None], len(targets), axis=1), targets, cost)
    result = hungarian(c)
    return result.prediction_indices(), result.target_indices()


def image_loss(
    model: ToyModel,
    queries: Queries,
    targets: np.ndarray,
    cfg: TrainConfig,
    matching: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    q_override: Optional[np.ndarray] = None,
) -> ImageLoss:
    """Loss of one image and its gradient with respect to the decoder parameters.

    ``matching`` and ``q_override`` freeze the assignment and the soft
    labels, which the finite-difference check needs; by default both are
    computed from the current parameters.
    """
    targets = np.asarray(targets, dtype=float).reshape(-1, 4)
    if matching is None:
        matching = match_image(model, queries, targets, cfg.cost)
    pi, ti = matching
    boxes, p = decode(model, queries)
    m = len(queries)
    y = np.zeros(m, dtype=int)
    y[pi] = 1
    q = np.zeros(m)
    matched_iou = np.array([pairwise_iou(boxes[i], targets[j])[0, 0] for i, j in zip(pi, ti)])
    q[pi] = matched_iou if q_override is None else q_override
    cls_vals, dcls_dp = loss_terms(cfg.loss, p, q, y)
    ds = cfg.lambda_cls * dcls_dp * p * (1.0 - p)

    diff = boxes[pi] - targets[ti]
    box_val = cfg.lambda_l1 * np.abs(diff).sum()
    dz = np.zeros((m, 4))
    dz[pi] = cfg.lambda_l1 * np.sign(diff) * boxes[pi] * (1.0 - boxes[pi])

    feats = queries.features()
    grad = np.concatenate(
        [(dz * queries.hints).sum(axis=0), dz.sum(axis=0), feats.T @ ds, [ds.sum()]]
    )
    return ImageLoss(
        cls=float(cfg.lambda_cls * cls_vals.sum()),
        box=float(box_val),
        grad=grad,
        n_positives=len(pi),
        matched_iou=matched_iou,
    )


def query_gradients(model: ToyModel, queries: Queries, targets, cfg: TrainConfig, matching, q_fixed):
    """Gradient of the image loss with respect to each query's box and confidence logits."""
    targets = np.asarray(targets, dtype=float).reshape(-1, 4)
    pi, ti = matching
    boxes, p = decode(model, queries)
    m = len(queries)
    y = np.zeros(m, dtype=int)
    y[pi] = 1
    q = np.zeros(m)
    q[pi] = q_fixed
    _, dcls_dp = loss_terms(cfg.loss, p, q, y)
    ds = cfg.lambda_cls * dcls_dp * p * (1.0 - p)
    dz = np.zeros((m, 4))
    dz[pi] = cfg.lambda_l1 * np.sign(boxes[pi] - targets[ti]) * boxes[pi] * (1.0 - boxes[pi])
    return dz, ds * model.conf_weights[0]


# -- evaluation ------------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalMetrics:
    precision: float
    recall: float
    toy_ap: float
    mean_iou: float


def evaluate_detections(
    detections: Sequence[Tuple[np.ndarray, np.ndarray]],
    scene_targets: Sequence[np.ndarray],
    iou_threshold: float = 0.5,
) -> EvalMetrics:
    """Greedy confidence-ordered evaluation pooled over images.

    ``detections[k]`` is ``(boxes, scores)`` for image ``k``.  Within an
    image, predictions are visited by descending score and each claims the
    unclaimed target it overlaps most if that IoU reaches the threshold.
    Toy-AP is the area under the resulting precision-recall steps:
    ``sum(precision at each true positive) / n_targets``.
    """
    records = []
    n_targets = 0
    ious_tp = []
    for k, ((boxes, scores), targets) in enumerate(zip(detections, scene_targets)):
        targets = np.asarray(targets, dtype=float).reshape(-1, 4)
        boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
        scores = np.asarray(scores, dtype=float).ravel()
        n_targets += len(targets)
        iou = pairwise_iou(boxes, targets)
        claimed = np.zeros(len(targets), dtype=bool)
        for i in np.argsort(-scores, kind="stable"):
            tp = False
            if len(targets):
                cand = np.where(claimed, -1.0, iou[i])
                j = int(np.argmax(cand))
                if cand[j] >= iou_threshold:
                    claimed[j] = True
                    tp = True
                    ious_tp.append(iou[i, j])
            records.append((-scores[i], k, i, tp))
    if not records or n_targets == 0:
        return EvalMetrics(0.0, 0.0, 0.0, 0.0)
    records.sort(key=lambda r: (r[0], r[1], r[2]))
    hits = np.array([r[3] for r in records], dtype=float)
    cum_tp = np.cumsum(hits)
    precision_at = cum_tp / np.arange(1, len(hits) + 1)
    ap = float(precision_at[hits == 1].sum() / n_targets)
    n_tp = int(cum_tp[-1])
    return EvalMetrics(
        precision=n_tp / len(hits),
        recall=n_tp / n_targets,
        toy_ap=ap,
        mean_iou=float(np.mean(ious_tp)) if ious_tp else 0.0,
    )


def evaluate(
    model: ToyModel, scenes: Sequence[Tuple[Queries, np.ndarray]], iou_threshold: float = 0.5
) -> EvalMetrics:
    """Toy-AP of ``model`` on ``(queries, target_boxes)`` pairs."""
    dets = [decode(model, q) for q, _ in scenes]
    return evaluate_detections(dets, [t for _, t in scenes], iou_threshold)


# -- training -----------------------------------------------------------------------------------


def _target_array(scene: ImageAnnotations) -> np.ndarray:
    return np.array([t.box.as_tuple() for t in scene.targets]).reshape(-1, 4)


@dataclass(frozen=True)
class TaskData:
    train_scenes: Tuple[ImageAnnotations, ...]
    train_queries: Tuple[Queries, ...]
    eval_set: Tuple[Tuple[Queries, np.ndarray], ...]


def build_task(task: ToyTask, task_seed: int) -> TaskData:
    rng = np.random.default_rng([int(task_seed), 0])
    counts = rng.integers(task.min_targets, task.max_targets + 1, size=task.n_train_scenes + task.n_eval_scenes)
    scenes = [make_scene(rng, int(n), task, image_id=i) for i, n in enumerate(counts)]
    enc = np.random.default_rng([int(task_seed), 1])
    queries = [encode(enc, s, task) for s in scenes]
    n = task.n_train_scenes
    return TaskData(
        tuple(scenes[:n]),
        tuple(queries[:n]),
        tuple((q, _target_array(s)) for q, s in zip(queries[n:], scenes[n:])),
    )


def train(cfg: TrainConfig, task_seed: Optional[int] = None, model: Optional[ToyModel] = None) -> TrainTrace:
    """Run one training arm and return its per-epoch trace.

    ``task_seed`` fixes the synthetic world (defaults to ``cfg.seed``);
    ``cfg.seed`` drives augmentation and the encoder on densified images.
    """
    task_seed = cfg.seed if task_seed is None else task_seed
    data = build_task(cfg.task, task_seed)
    model = model or ToyModel()
    theta = model.to_vector()
    sched = cfg.schedule
    policy = replace(cfg.policy, seed=cfg.seed)
    trace = TrainTrace()
    n_train = len(data.train_scenes)
    batches = [range(i, min(i + cfg.batch_size, n_train)) for i in range(0, n_train, cfg.batch_size)]
    step_index = 0
    for epoch in range(sched.total_epochs):
        flags = aug_at(epoch, sched) if cfg.dense_o2o else AugState(False, False)
        sums = {"cls": 0.0, "box": 0.0, "pos": 0.0, "images": 0}
        for step in range(cfg.steps_per_epoch):
            lr = lr_at(progress(epoch, step, cfg.steps_per_epoch, sched.total_epochs), sched)
            cur = ToyModel.from_vector(theta)
            grad = np.zeros_like(theta)
            cls_total = box_total = 0.0
            n_images = 0
            enc_rng = np.random.default_rng([int(cfg.seed), 2, step_index])
            for b, idx in enumerate(batches):
                batch = [data.train_scenes[i] for i in idx]
                aug = apply_policy(batch, policy, flags, batch_index=step_index * len(batches) + b)
                for k, scene in enumerate(aug):
                    # Untouched images keep their fixed encoder output.
                    queries = data.train_queries[idx[k]] if scene is batch[k] else encode(enc_rng, scene, cfg.task)
                    res = image_loss(cur, queries, _target_array(scene), cfg)
                    grad += res.grad
                    cls_total += res.cls
                    box_total += res.box
                    sums["pos"] += res.n_positives
                    n_images += 1
            total = (cls_total + box_total) / n_images
            if not math.isfinite(total):
                raise DivergenceError(step_index, total)
            theta = theta - lr * grad / n_images
            sums["cls"] += cls_total / n_images
            sums["box"] += box_total / n_images
            sums["images"] += n_images
            step_index += 1
        metrics = evaluate(ToyModel.from_vector(theta), data.eval_set, cfg.eval_iou)
        trace.epoch.append(epoch)
        trace.lr.append(lr_at((epoch + 1) / sched.total_epochs, sched))
        trace.cls_loss.append(sums["cls"] / cfg.steps_per_epoch)
        trace.box_loss.append(sums["box"] / cfg.steps_per_epoch)
        trace.total_loss.append(trace.cls_loss[-1] + trace.box_loss[-1])
        trace.toy_ap.append(metrics.toy_ap)
        trace.mean_iou.append(metrics.mean_iou)
        trace.positives_per_image.append(sums["pos"] / sums["images"])
    return trace


# -- gradient check ------------------------------------------------------------------------------


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    n_points: int
    n_checked: int
    worst: str


def _rel_error(a, b, floor: float) -> np.ndarray:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(
    cfg: TrainConfig, n_points: int = 5, seed: int = 0, h: float = 1e-5, floor: float = 1e-2
) -> GradCheckReport:
    """Compare analytic image-loss gradients with central finite differences.

    Each point is a fresh random scene, encoder output and decoder
    parameter vector.  Matching and the soft labels ``q`` are frozen at the
    base point (they are detached in training).  Checked: every decoder
    parameter and every query's box and confidence logits.  Relative error
    is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    rng = np.random.default_rng([int(seed), 7])
    worst, worst_where, checked = 0.0, "", 0
    for k in range(n_points):
        n_t = int(rng.integers(cfg.task.min_targets, cfg.task.max_targets + 1))
        scene = make_scene(rng, n_t, cfg.task)
        queries = encode(rng, scene, cfg.task)
        targets = _target_array(scene)
        theta = rng.normal(0.0, 0.5, size=ToyModel.N_PARAMS)
        model = ToyModel.from_vector(theta)
        matching = match_image(model, queries, targets, cfg.cost)
        base = image_loss(model, queries, targets, cfg, matching)
        q_fixed = base.matched_iou

        def f_theta(t):
            r = image_loss(ToyModel.from_vector(t), queries, targets, cfg, matching, q_fixed)
            return r.cls + r.box

        numeric = np.empty_like(theta)
        for i in range(len(theta)):
            e = np.zeros_like(theta)
            e[i] = h
            numeric[i] = (f_theta(theta + e) - f_theta(theta - e)) / (2 * h)
        errs = _rel_error(base.grad, numeric, floor)
        checked += errs.size
        if errs.max() > worst:
            worst, worst_where = float(errs.max()), f"point {k}, decoder param {int(errs.argmax())}"

        dz, ds = query_gradients(model, queries, targets, cfg, matching, q_fixed)

        def f_query(box_logits, conf_logits):
            qq = Queries(box_logits, conf_logits, queries.hints)
            r = image_loss(model, qq, targets, cfg, matching, q_fixed)
            return r.cls + r.box

        num_dz = np.empty_like(dz)
        for idx in np.ndindex(*dz.shape):
            bp, bm = queries.box_logits.copy(), queries.box_logits.copy()
            bp[idx] += h
            bm[idx] -= h
            num_dz[idx] = (f_query(bp, queries.conf_logits) - f_query(bm, queries.conf_logits)) / (2 * h)
        num_ds = np.empty_like(ds)
        for i in range(len(ds)):
            cp, cm = queries.conf_logits.copy(), queries.conf_logits.copy()
            cp[i] += h
            cm[i] -= h
            num_ds[i] = (f_query(queries.box_logits, cp) - f_query(queries.box_logits, cm)) / (2 * h)
        for name, a, n in (("query box logit", dz, num_dz), ("query conf logit", ds, num_ds)):
            errs = _rel_error(a, n, floor)
            checked += errs.size
            if errs.max() > worst:
                worst, worst_where = float(errs.max()), f"point {k}, {name} {np.unravel_index(errs.argmax(), errs.shape)}"
    return GradCheckReport(worst, n_points, checked, worst_where)
