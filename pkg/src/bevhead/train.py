"""Losses, quality labels and the SGD training loop."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from bevhead import nn
from bevhead.assign import (
    AssignmentPlan,
    AttributeGroup,
    GROUPS,
    Phase,
    SwitchState,
    assign_baseline,
    assign_dar_dynamic,
    assign_dar_static,
    assign_multipos,
    candidate_pixels,
    parse_groups,
    switch_update,
)
from bevhead.decode import decode_at, iou_to_unit
from bevhead.geometry import iou_bev_pairs
from bevhead.head import (
    HeadConfigError,
    HeadParams,
    HeadSpec,
    IqpMode,
    head_backward_sparse,
    head_forward_sparse,
    init_params,
)
from bevhead.scene import BevGrid, Frame, point_count_map, rasterize_features

STRATEGIES = ("baseline", "multipos", "dar_static", "dar_dynamic", "dar_switch")
LOG_COLUMNS = ("epoch", "phase", "loss_total", "loss_hm", "loss_reg", "loss_obj", "loss_iou", "ema_center_iou")


class TrainingError(RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    strategy: str = "dar_switch"
    dar_groups: frozenset = frozenset({AttributeGroup.XY})
    n: int = 4
    k: int = 4
    iou_th: float = 0.6
    ema_decay: float = 0.9
    switch_trigger: str = "measured"  # or "predicted"
    multipos_radius: int = 1
    iqp: IqpMode = IqpMode.V2
    iou_branch: bool = True
    iou_positives: str = "center"  # or "dar"
    obj_thresh: float = 0.2
    channels: int = 16
    num_classes: int = 3
    epochs: int = 8
    batch_size: int = 4
    lr: float = 5e-3
    momentum: float = 0.9
    clip: float = 5.0
    w_hm: float = 1.0
    w_reg: float = 2.0
    w_obj: float = 1.0
    w_iou: float = 1.0
    range_scale: float = 50.0
    weight_ema: float = 0.99  # decay of the evaluation-weight average; 0 keeps the raw weights

    def __post_init__(self):
        object.__setattr__(self, "iqp", IqpMode(self.iqp))
        object.__setattr__(self, "dar_groups", parse_groups(self.dar_groups))
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if AttributeGroup.XY not in self.dar_groups:
            raise ValueError("dar_groups must contain xy")
        if self.switch_trigger not in ("measured", "predicted"):
            raise ValueError("switch_trigger must be 'measured' or 'predicted'")
        if self.iou_positives not in ("center", "dar"):
            raise ValueError("iou_positives must be 'center' or 'dar'")
        if self.n < 1 or self.k < 1 or self.multipos_radius < 0:
            raise ValueError("n and k must be >= 1, multipos_radius >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr <= 0 or not 0 <= self.momentum < 1 or self.clip <= 0:
            raise ValueError("lr and clip must be positive, momentum in [0, 1)")
        if not 0.0 <= self.iou_th <= 1.0:
            raise ValueError("iou_th must lie in [0, 1]")
        if not 0.0 <= self.weight_ema < 1.0:
            raise ValueError("weight_ema must lie in [0, 1)")
        if self.switch_trigger == "predicted" and not self.head_spec().has_iou:
            raise ValueError("a predicted-IoU switch trigger needs an IoU branch")

    def head_spec(self) -> HeadSpec:
        return HeadSpec(self.channels, self.num_classes, self.iqp, self.iou_branch)


# --------------------------------------------------------------------------- losses


def iou_labels(iou_gt) -> np.ndarray:
    """Quality regression target in tanh space: 2 * IoU - 1."""
    return 2.0 * np.asarray(iou_gt, dtype=np.float64) - 1.0


def measured_iou(outputs, frame: Frame, gt_idx, ii, jj, grid: BevGrid) -> np.ndarray:
    """BEV IoU between the box decoded at each pixel and the paired ground truth."""
    gt_idx = np.asarray(gt_idx, dtype=np.int64)
    if len(gt_idx) == 0:
        return np.zeros(0)
    pred = decode_at(outputs, ii, jj, grid)
    return iou_bev_pairs(pred, frame.box_array()[gt_idx])


@dataclass
class LossBreakdown:
    total: float = 0.0
    hm: float = 0.0
    reg: float = 0.0
    obj: float = 0.0
    iou: float = 0.0
    per_group: dict = field(default_factory=dict)


class _GradBuffer:
    """Upstream gradients matching the layout of dense or sparse outputs."""

    def __init__(self, outputs):
        self.outputs = outputs
        self.sparse = hasattr(outputs, "values")
        self.data: dict[str, np.ndarray] = {}

    def add(self, branch: str, ii, jj, g: np.ndarray) -> None:
        o = self.outputs
        if self.sparse:
            buf = self.data.setdefault(branch, np.zeros_like(o.values[branch]))
            np.add.at(buf, o.columns(ii, jj), g)
        else:
            full = getattr(o, branch)
            buf = self.data.setdefault(branch, np.zeros_like(full))
            for c in range(g.shape[1]):
                np.add.at(buf[c], (np.asarray(ii), np.asarray(jj)), g[:, c])


def iou_positive_pixels(plan: AssignmentPlan, mode: str = "center"):
    """(gt, i, j) of the pixels supervising the quality branch."""
    if mode == "dar":
        s = plan.groups[AttributeGroup.XY]
        return s.gt, s.i, s.j
    rows = [(g, c[0], c[1]) for g, c in enumerate(plan.centers) if c is not None]
    if not rows:
        z = np.zeros(0, dtype=np.int64)
        return z, z, z
    a = np.array(rows, dtype=np.int64)
    return a[:, 0], a[:, 1], a[:, 2]


def loss_total(outputs, plan: AssignmentPlan, frame: Frame, grid: BevGrid, config: TrainConfig):
    """Weighted sum of heatmap, regression, objectness and quality losses.

    Returns (LossBreakdown, upstream gradient dict for the head's reverse pass).
    """
    br = LossBreakdown()
    grads = _GradBuffer(outputs)

    br.hm, g_hm = nn.focal_loss(outputs.conf_logit, plan.heatmap)
    grads.data["conf_logit"] = config.w_hm * g_hm

    norm = max(1, plan.num_positive)
    for group in GROUPS:
        s = plan.groups[group]
        if len(s) == 0:
            br.per_group[group.value] = 0.0
            continue
        pred = outputs.gather(group.value, s.i, s.j)
        loss, g = nn.weighted_l1(pred, s.target, s.weight, norm)
        br.per_group[group.value] = loss
        br.reg += loss
        grads.add(group.value, s.i, s.j, config.w_reg * g)

    if outputs.obj_logit is not None:
        target = (plan.heatmap.max(axis=0, keepdims=True) >= config.obj_thresh).astype(np.float64)
        br.obj, g_obj = nn.bce_with_logits(outputs.obj_logit, target)
        grads.data["obj_logit"] = config.w_obj * g_obj

    if outputs.iou is not None:
        gt_idx, ii, jj = iou_positive_pixels(plan, config.iou_positives)
        if len(gt_idx):
            label = iou_labels(measured_iou(outputs, frame, gt_idx, ii, jj, grid))
            pred = outputs.gather("iou", ii, jj)
            br.iou, g = nn.weighted_l1(pred, label[:, None], np.ones(len(gt_idx)), len(gt_idx))
            grads.add("iou", ii, jj, config.w_iou * g)

    br.total = config.w_hm * br.hm + config.w_reg * br.reg + config.w_obj * br.obj + config.w_iou * br.iou
    return br, grads.data


# --------------------------------------------------------------------------- training


@dataclass
class TrainState:
    params: HeadParams
    velocity: dict[str, np.ndarray]
    step: int = 0
    switch: SwitchState = field(default_factory=SwitchState)
    seed: int = 0
    average: dict[str, np.ndarray] | None = None

    def eval_params(self) -> HeadParams:
        """Weights used for inference: the running average when one is kept."""
        if self.average is None:
            return self.params
        return HeadParams(self.params.spec, {k: v.copy() for k, v in self.average.items()})

    def update_average(self, decay: float) -> None:
        if decay <= 0.0:
            return
        if self.average is None:
            self.average = {k: v.copy() for k, v in self.params.tensors.items()}
            return
        # short warm-up so early steps do not anchor the average to the init
        d = min(decay, (1.0 + self.step) / (10.0 + self.step))
        for k, v in self.params.tensors.items():
            a = self.average[k]
            a *= d
            a += (1.0 - d) * v


@dataclass
class _FrameData:
    frame: Frame
    X: np.ndarray
    count_map: np.ndarray
    candidates: list  # per GT, list of pixels (empty when the center is off-grid)
    query: np.ndarray
    fixed_plan: AssignmentPlan | None


def prepare_frames(frames, grid: BevGrid, config: TrainConfig) -> list[_FrameData]:
    out = []
    for fr in frames:
        X = rasterize_features(fr, grid, config.channels, range_scale=config.range_scale).data
        counts = point_count_map(fr, grid)
        cands = [candidate_pixels(g.box, grid) for g in fr.gts]
        pts = [p for c in cands for p in c]
        query = np.array(sorted(set(pts)), dtype=np.int64).reshape(-1, 2)
        plan = None
        if config.strategy == "baseline":
            plan = assign_baseline(fr, grid, config.num_classes)
        elif config.strategy == "multipos":
            plan = assign_multipos(fr, grid, config.multipos_radius, config.num_classes)
        elif config.strategy == "dar_static":
            plan = assign_dar_static(fr, grid, config.dar_groups, config.n, config.num_classes, counts)
        out.append(_FrameData(fr, X, counts, cands, query, plan))
    return out


def _quality_fn(outputs, fd: _FrameData, grid):
    def quality(g, pool):
        pool = np.asarray(pool, dtype=np.int64).reshape(-1, 2)
        return measured_iou(outputs, fd.frame, np.full(len(pool), g), pool[:, 0], pool[:, 1], grid)

    return quality


def _center_quality(outputs, plan, fd, grid, trigger):
    gt_idx, ii, jj = iou_positive_pixels(plan, "center")
    if len(gt_idx) == 0:
        return []
    if trigger == "predicted":
        return iou_to_unit(outputs.gather("iou", ii, jj)[:, 0]).tolist()
    return measured_iou(outputs, fd.frame, gt_idx, ii, jj, grid).tolist()


def frame_step(params: HeadParams, fd: _FrameData, grid: BevGrid, config: TrainConfig, switch: SwitchState):
    """Forward, assign, loss and reverse pass for one frame.

    Returns (LossBreakdown, parameter gradients, center qualities).
    """
    outputs, cache = head_forward_sparse(fd.X, params, fd.query)
    plan = fd.fixed_plan
    if plan is None:
        dynamic = config.strategy == "dar_dynamic" or switch.phase is Phase.DYNAMIC
        if dynamic:
            plan = assign_dar_dynamic(
                fd.frame, grid, config.dar_groups, config.k, _quality_fn(outputs, fd, grid), config.num_classes
            )
        else:
            plan = assign_dar_static(fd.frame, grid, config.dar_groups, switch.k, config.num_classes, fd.count_map)
    br, upstream = loss_total(outputs, plan, fd.frame, grid, config)
    pgrads = head_backward_sparse(cache, upstream)
    quality = _center_quality(outputs, plan, fd, grid, config.switch_trigger)
    return br, pgrads, quality


def init_state(config: TrainConfig, seed: int) -> TrainState:
    params = init_params(config.head_spec(), seed)
    velocity = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    switch = SwitchState(ema_decay=config.ema_decay, iou_th=config.iou_th, k=config.n)
    return TrainState(params, velocity, 0, switch, seed)


def _sgd(state: TrainState, grads: dict[str, np.ndarray], config: TrainConfig) -> float:
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    scale = min(1.0, config.clip / norm) if norm > 0 else 1.0
    for name, g in grads.items():
        v = state.velocity[name]
        v *= config.momentum
        v += scale * g
        state.params.tensors[name] -= config.lr * v
    return norm


def train_run(frames, config: TrainConfig, seed: int, grid: BevGrid = BevGrid(), state: TrainState | None = None):
    """SGD over ``frames`` for ``config.epochs`` epochs.

    Frames are shuffled per epoch with a seeded generator and grouped into
    minibatches; gradients are summed in batch order and averaged.  The
    switch EMA advances once per step from the mean center quality of that
    step's frames.  Returns (TrainState, per-epoch log rows).
    """
    frames = list(frames)
    if not frames:
        raise ValueError("training needs at least one frame")
    if state is None:
        state = init_state(config, seed)
    data = prepare_frames(frames, grid, config)
    rng = np.random.default_rng([seed, 7])
    logs = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(data))
        sums = {"total": 0.0, "hm": 0.0, "reg": 0.0, "obj": 0.0, "iou": 0.0}
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            acc: dict[str, np.ndarray] = {}
            qualities = []
            for f in batch:
                br, pgrads, q = frame_step(state.params, data[f], grid, config, state.switch)
                if not math.isfinite(br.total):
                    raise TrainingError(f"non-finite loss on frame {data[f].frame.frame_id}", state.step + 1)
                for k in sums:
                    sums[k] += getattr(br, k)
                for name, g in pgrads.items():
                    if name in acc:
                        acc[name] += g
                    else:
                        acc[name] = g.copy()
                qualities += q
            for g in acc.values():
                g /= len(batch)
            state.step += 1
            norm = _sgd(state, acc, config)
            if not math.isfinite(norm):
                raise TrainingError("non-finite gradient", state.step)
            state.update_average(config.weight_ema)
            if qualities and config.strategy == "dar_switch":
                state.switch = switch_update(state.switch, float(np.mean(qualities)))
            elif qualities:
                # keep the EMA as a training diagnostic for every strategy
                state.switch = replace(
                    state.switch,
                    ema_center_iou=state.switch.ema_decay * state.switch.ema_center_iou
                    + (1 - state.switch.ema_decay) * float(np.mean(qualities)),
                )
        row = {
            "epoch": epoch,
            "phase": state.switch.phase.value if config.strategy == "dar_switch" else config.strategy,
            "loss_total": sums["total"] / len(data),
            "loss_hm": sums["hm"] / len(data),
            "loss_reg": sums["reg"] / len(data),
            "loss_obj": sums["obj"] / len(data),
            "loss_iou": sums["iou"] / len(data),
            "ema_center_iou": state.switch.ema_center_iou,
        }
        logs.append(row)
    return state, logs


def logs_to_csv(logs, path=None, header_comment: str | None = None) -> str:
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for row in logs:
        w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in LOG_COLUMNS])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(path, params: HeadParams, meta: dict | None = None) -> None:
    spec = params.spec
    doc = {
        "format": "bevhead-checkpoint/1",
        "spec": {"channels": spec.channels, "num_classes": spec.num_classes, "iqp": spec.iqp.value, "iou_branch": spec.iou_branch},
        "meta": meta or {},
        "tensors": {
            name: {"shape": list(t.shape), "data": t.ravel().tolist()} for name, t in sorted(params.tensors.items())
        },
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":")), encoding="utf-8")


def load_checkpoint(path) -> tuple[HeadParams, dict]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        spec = HeadSpec(**doc["spec"])
        tensors = {
            name: np.asarray(rec["data"], dtype=np.float64).reshape(rec["shape"]) for name, rec in doc["tensors"].items()
        }
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise HeadConfigError(f"{path}: unreadable checkpoint ({exc})") from exc
    return HeadParams(spec, tensors), doc.get("meta", {})


def config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["iqp"] = config.iqp.value
    d["dar_groups"] = ",".join(sorted(g.value for g in config.dar_groups))
    return d
