"""Center-based detection head with two-conv branches.

Every branch is ``conv3x3 -> ReLU -> conv3x3``; the hidden conv keeps the
feature width ``F`` and the output conv maps to the branch width.  The
quality branch has three topologies:

``off``
    the quality branch (if present) reads the shared features directly;
``v1``
    objectness is the channel-wise max of the class logits, so
    ``sigmoid(obj) == max_c conf_c``;
``v2``
    objectness comes from its own two-conv branch.

In ``v1`` and ``v2`` the quality branch reads ``sigmoid(obj) * X`` and its
output is squashed by ``tanh`` into (-1, 1).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from bevhead import nn


class IqpMode(str, enum.Enum):
    OFF = "off"
    V1 = "v1"
    V2 = "v2"


BRANCH_WIDTHS = {"conf": None, "obj": 1, "xy": 2, "z": 1, "lwh": 3, "theta": 2, "iou": 1}
REGRESSION_BRANCHES = ("xy", "z", "lwh", "theta")


class HeadConfigError(ValueError):
    pass


@dataclass(frozen=True)
class HeadSpec:
    channels: int = 16
    num_classes: int = 3
    iqp: IqpMode = IqpMode.V2
    iou_branch: bool = True  # only consulted when iqp is off

    def __post_init__(self):
        object.__setattr__(self, "iqp", IqpMode(self.iqp))
        if self.channels < 1 or self.num_classes < 1:
            raise HeadConfigError("channels and num_classes must be positive")

    @property
    def has_iou(self) -> bool:
        return self.iqp is not IqpMode.OFF or self.iou_branch

    @property
    def gated(self) -> bool:
        return self.iqp is not IqpMode.OFF

    def branches(self) -> list[str]:
        out = ["conf"]
        if self.iqp is IqpMode.V2:
            out.append("obj")
        out += list(REGRESSION_BRANCHES)
        if self.has_iou:
            out.append("iou")
        return out

    def width(self, branch: str) -> int:
        return self.num_classes if branch == "conf" else BRANCH_WIDTHS[branch]

    def stem_branches(self) -> list[str]:
        """Branches whose hidden conv reads the shared features directly."""
        return [b for b in self.branches() if not (b == "iou" and self.gated)]

    def shapes(self) -> dict[str, tuple[int, ...]]:
        F = self.channels
        out = {}
        for b in self.branches():
            out[f"{b}.w1"] = (F, F, 3, 3)
            out[f"{b}.b1"] = (F,)
            out[f"{b}.w2"] = (self.width(b), F, 3, 3)
            out[f"{b}.b2"] = (self.width(b),)
        return out


@dataclass
class HeadParams:
    spec: HeadSpec
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        expected = self.spec.shapes()
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise HeadConfigError(f"parameter set mismatch (missing {missing}, unexpected {extra})")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise HeadConfigError(f"{name}: expected shape {shape}, got {self.tensors[name].shape}")
            if not np.all(np.isfinite(self.tensors[name])):
                raise HeadConfigError(f"{name}: non-finite values")

    def copy(self) -> "HeadParams":
        return HeadParams(self.spec, {k: v.copy() for k, v in self.tensors.items()})

    def count(self, branch: str | None = None) -> int:
        return sum(v.size for k, v in self.tensors.items() if branch is None or k.split(".")[0] == branch)

    def __getitem__(self, key):
        return self.tensors[key]


def init_params(spec: HeadSpec, seed: int = 0, prior: float = 0.1) -> HeadParams:
    """He-normal hidden kernels, small output kernels, heatmap bias at ``prior``."""
    rng = np.random.default_rng(seed)
    F = spec.channels
    tensors = {}
    bias0 = float(np.log(prior / (1.0 - prior)))
    for name, shape in spec.shapes().items():
        branch, kind = name.split(".")
        if kind == "w1":
            tensors[name] = rng.normal(0.0, np.sqrt(2.0 / (9 * F)), size=shape)
        elif kind == "w2":
            tensors[name] = rng.normal(0.0, 0.01, size=shape)
        elif kind == "b2" and branch in ("conf", "obj"):
            tensors[name] = np.full(shape, bias0)
        else:
            tensors[name] = np.zeros(shape)
    return HeadParams(spec, tensors)


@dataclass
class HeadOutputs:
    conf_logit: np.ndarray  # (C, H, W)
    conf: np.ndarray  # (C, H, W), sigmoid
    obj_logit: np.ndarray | None  # (1, H, W)
    xy: np.ndarray
    z: np.ndarray
    lwh: np.ndarray
    theta: np.ndarray
    iou: np.ndarray | None  # (1, H, W), tanh

    @property
    def obj_prob(self) -> np.ndarray | None:
        return None if self.obj_logit is None else nn.sigmoid(self.obj_logit)

    def regression(self, branch: str) -> np.ndarray:
        return getattr(self, branch)

    def gather(self, branch: str, ii, jj) -> np.ndarray:
        """Values of ``branch`` at pixels (ii, jj) as a (K, width) array."""
        return getattr(self, branch)[:, np.asarray(ii, dtype=np.int64), np.asarray(jj, dtype=np.int64)].T

    @property
    def shape(self) -> tuple[int, int]:
        return self.conf.shape[1:]


def _check(X, params):
    spec = params.spec
    if X.ndim != 3:
        raise HeadConfigError(f"features must be (F, H, W), got shape {X.shape}")
    if X.shape[0] != spec.channels:
        raise HeadConfigError(f"features have {X.shape[0]} channels, head expects {spec.channels}")
    if not np.all(np.isfinite(X)):
        raise HeadConfigError("features contain non-finite values")


def _stack(params, branches, key):
    return np.concatenate([params.tensors[f"{b}.{key}"] for b in branches], axis=0)


def _dense_stem(X, params, branches):
    """Dense two-conv branches reading X; returns (raw outputs, cache)."""
    F = params.spec.channels
    pre1, c1 = nn.conv3x3_forward(X, _stack(params, branches, "w1"), _stack(params, branches, "b1"))
    hidden = nn.relu(pre1)
    raw, c2 = {}, {}
    for k, b in enumerate(branches):
        raw[b], c2[b] = nn.conv3x3_forward(hidden[k * F : (k + 1) * F], params[f"{b}.w2"], params[f"{b}.b2"])
    return raw, (branches, c1, pre1, c2)


def _dense_stem_backward(cache, d_raw, spec, pgrads, need_input):
    branches, c1, pre1, c2 = cache
    F = spec.channels
    H, W = pre1.shape[1:]
    d_hidden = np.zeros((len(branches) * F, H, W))
    for k, b in enumerate(branches):
        g = d_raw.get(b)
        if g is None:
            g = np.zeros((spec.width(b), H, W))
        dh, pgrads[f"{b}.w2"], pgrads[f"{b}.b2"] = nn.conv3x3_backward(g, c2[b])
        d_hidden[k * F : (k + 1) * F] = dh
    d_pre1 = nn.relu_backward(d_hidden, pre1)
    dx, dw1, db1 = nn.conv3x3_backward(d_pre1, c1, need_input=need_input)
    for k, b in enumerate(branches):
        pgrads[f"{b}.w1"] = dw1[k * F : (k + 1) * F]
        pgrads[f"{b}.b1"] = db1[k * F : (k + 1) * F]
    return dx


def _objectness(spec, raw):
    if spec.iqp is IqpMode.V1:
        return nn.channel_max(raw["conf"])
    if spec.iqp is IqpMode.V2:
        return raw["obj"], None
    return None, None


def _obj_to_conf(spec, d_raw, d_obj, arg):
    if spec.iqp is IqpMode.V1:
        extra = nn.channel_max_backward(d_obj, arg, spec.num_classes)
        d_raw["conf"] = extra if d_raw.get("conf") is None else d_raw["conf"] + extra
    elif spec.iqp is IqpMode.V2:
        d_raw["obj"] = d_obj


def head_forward(X: np.ndarray, params: HeadParams, iqp_mode: IqpMode | str | None = None):
    """Dense head outputs for one feature map.  Returns (HeadOutputs, cache)."""
    spec = params.spec
    if iqp_mode is not None and IqpMode(iqp_mode) is not spec.iqp:
        raise HeadConfigError(f"parameters were built for iqp={spec.iqp.value}, not {IqpMode(iqp_mode).value}")
    _check(X, params)
    raw, stem_cache = _dense_stem(X, params, spec.stem_branches())
    obj_logit, arg = _objectness(spec, raw)

    gate = None
    iou = None
    cache_iou = None
    if spec.gated:
        gated, gate = nn.gate_forward(obj_logit, X)
        pre_i, ci1 = nn.conv3x3_forward(gated, params["iou.w1"], params["iou.b1"])
        v, ci2 = nn.conv3x3_forward(nn.relu(pre_i), params["iou.w2"], params["iou.b2"])
        iou = np.tanh(v)
        cache_iou = (ci1, pre_i, ci2)
    elif spec.has_iou:
        iou = np.tanh(raw["iou"])

    out = HeadOutputs(
        conf_logit=raw["conf"],
        conf=nn.sigmoid(raw["conf"]),
        obj_logit=obj_logit,
        xy=raw["xy"],
        z=raw["z"],
        lwh=raw["lwh"],
        theta=raw["theta"],
        iou=iou,
    )
    cache = {"X": X, "spec": spec, "stem": stem_cache, "arg": arg, "gate": gate, "iou_cache": cache_iou, "iou": iou}
    return out, cache


def head_backward(cache, grads: dict[str, np.ndarray], need_input: bool = False):
    """Reverse pass of :func:`head_forward`.

    ``grads`` maps output names to upstream gradients: ``conf_logit``,
    ``obj_logit``, ``xy``, ``z``, ``lwh``, ``theta`` and ``iou`` (gradient
    with respect to the tanh output).  Missing entries count as zero.
    Returns (parameter gradients, d X or None).
    """
    spec: HeadSpec = cache["spec"]
    X = cache["X"]
    H, W = X.shape[1:]
    pgrads: dict[str, np.ndarray] = {}
    dX = np.zeros_like(X) if need_input else None

    d_raw = {b: grads.get(b) for b in REGRESSION_BRANCHES}
    d_raw["conf"] = grads.get("conf_logit")
    d_obj = grads.get("obj_logit")
    d_obj = np.zeros((1, H, W)) if d_obj is None else np.array(d_obj, dtype=np.float64)

    if spec.gated:
        d_iou = grads.get("iou")
        if d_iou is None:
            d_iou = np.zeros((1, H, W))
        ci1, pre_i, ci2 = cache["iou_cache"]
        dv = nn.tanh_backward(d_iou, cache["iou"])
        dh, pgrads["iou.w2"], pgrads["iou.b2"] = nn.conv3x3_backward(dv, ci2)
        dgated, pgrads["iou.w1"], pgrads["iou.b1"] = nn.conv3x3_backward(nn.relu_backward(dh, pre_i), ci1)
        d_logit, dx_gate = nn.gate_backward(dgated, cache["gate"], X)
        d_obj = d_obj + d_logit
        if need_input:
            dX += dx_gate
    elif spec.has_iou and grads.get("iou") is not None:
        d_raw["iou"] = nn.tanh_backward(grads["iou"], cache["iou"])

    _obj_to_conf(spec, d_raw, d_obj, cache["arg"])
    dx_stem = _dense_stem_backward(cache["stem"], d_raw, spec, pgrads, need_input)
    if need_input:
        dX += dx_stem
    return pgrads, dX


# --------------------------------------------------------------------------- sparse path


@dataclass
class SparseOutputs:
    """Dense class/objectness maps plus per-branch values at a pixel set.

    Training only needs regression and quality outputs at candidate pixels,
    so they are evaluated there alone; the numbers equal the dense head's.
    """

    conf_logit: np.ndarray
    conf: np.ndarray
    obj_logit: np.ndarray | None
    pixels: np.ndarray  # (K, 2) unique, lexicographic
    values: dict[str, np.ndarray]  # branch -> (K, width); iou is post-tanh
    index: np.ndarray  # (H, W) column of each queried pixel, -1 elsewhere

    @property
    def obj_prob(self) -> np.ndarray | None:
        return None if self.obj_logit is None else nn.sigmoid(self.obj_logit)

    @property
    def iou(self):
        return self.values.get("iou")

    @property
    def shape(self) -> tuple[int, int]:
        return self.conf.shape[1:]

    def columns(self, ii, jj) -> np.ndarray:
        cols = self.index[np.asarray(ii, dtype=np.int64), np.asarray(jj, dtype=np.int64)]
        if np.any(cols < 0):
            raise KeyError("pixel was not part of the sparse query set")
        return cols

    def gather(self, branch: str, ii, jj) -> np.ndarray:
        if branch in ("conf", "conf_logit", "obj_logit"):
            return getattr(self, branch)[:, np.asarray(ii, dtype=np.int64), np.asarray(jj, dtype=np.int64)].T
        return self.values[branch][self.columns(ii, jj)]


def _neighborhood(pixels: np.ndarray, H: int, W: int) -> np.ndarray:
    d = np.array([(a, b) for a in (-1, 0, 1) for b in (-1, 0, 1)])
    nb = (pixels[:, None, :] + d[None]).reshape(-1, 2)
    ok = (nb[:, 0] >= 0) & (nb[:, 0] < H) & (nb[:, 1] >= 0) & (nb[:, 1] < W)
    return np.unique(nb[ok], axis=0)


class _SparseStack:
    """Two-conv branches evaluated only at query pixels S.

    The hidden layer lives on the 3x3 dilation N of S; the output conv reads
    it through a neighbor table so no full-size buffer is materialized.
    """

    def __init__(self, params, branches, inp_pf, qS, qN, nbr, offs, size):
        F = params.spec.channels
        self.branches = branches
        self.F = F
        self.qN, self.nbr, self.offs, self.size = qN, nbr, offs, size
        self.colsN = nn.gather_cols(inp_pf, qN, offs)
        self.w1 = np.concatenate([nn.kernel_matrix(params[f"{b}.w1"]) for b in branches], axis=0)
        b1 = np.concatenate([params[f"{b}.b1"] for b in branches])
        self.pre = self.w1 @ self.colsN + b1[:, None]
        h = np.zeros((len(branches) * F, len(qN) + 1))
        h[:, :-1] = nn.relu(self.pre)
        KS = nbr.shape[1]
        # (nb, F, 9, KS) -> per branch (9 F, KS) tap-major
        taps = h[:, nbr].reshape(len(branches), F, 9, KS)
        self.colsS, self.w2, self.out = {}, {}, {}
        for r, b in enumerate(branches):
            cs = taps[r].transpose(1, 0, 2).reshape(9 * F, KS)
            self.colsS[b] = cs
            self.w2[b] = nn.kernel_matrix(params[f"{b}.w2"])
            self.out[b] = (self.w2[b] @ cs + params[f"{b}.b2"][:, None]).T

    def backward(self, d_out, pgrads, need_input=False):
        F, nb = self.F, len(self.branches)
        KS = self.nbr.shape[1]
        KN1 = len(self.qN) + 1
        dtaps = np.zeros((nb, F, 9, KS))
        for r, b in enumerate(self.branches):
            g = d_out.get(b)
            if g is None:
                g = np.zeros((KS, self.w2[b].shape[0]))
            gt = g.T
            pgrads[f"{b}.w2"] = nn.kernel_from_matrix(gt @ self.colsS[b].T, F)
            pgrads[f"{b}.b2"] = gt.sum(axis=1)
            dtaps[r] = (self.w2[b].T @ gt).reshape(9, F, KS).transpose(1, 0, 2)
        rows = nb * F
        flat = (np.arange(rows)[:, None, None] * KN1 + self.nbr[None]).ravel()
        dh = np.bincount(flat, weights=dtaps.ravel(), minlength=rows * KN1).reshape(rows, KN1)[:, :-1]
        dpre = dh * (self.pre > 0)
        dw1 = dpre @ self.colsN.T
        db1 = dpre.sum(axis=1)
        for r, b in enumerate(self.branches):
            pgrads[f"{b}.w1"] = nn.kernel_from_matrix(dw1[r * F : (r + 1) * F], F)
            pgrads[f"{b}.b1"] = db1[r * F : (r + 1) * F]
        if need_input:
            return nn.scatter_cols(self.w1.T @ dpre, self.qN, self.offs, self.size)
        return None


def head_forward_sparse(X: np.ndarray, params: HeadParams, pixels):
    """Class/objectness maps densely, everything else at ``pixels`` only.

    ``pixels`` is a (K, 2) array or a callable mapping the (C, H, W)
    confidence map to one.  Returns (SparseOutputs, cache).
    """
    spec = params.spec
    _check(X, params)
    F, H, W = X.shape
    dense = ["conf"] + (["obj"] if spec.iqp is IqpMode.V2 else [])
    raw, stem_cache = _dense_stem(X, params, dense)
    obj_logit, arg = _objectness(spec, raw)
    conf = nn.sigmoid(raw["conf"])
    if callable(pixels):
        pixels = pixels(conf)
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    if len(pixels) and (pixels.min() < 0 or pixels[:, 0].max() >= H or pixels[:, 1].max() >= W):
        raise HeadConfigError("query pixel outside the feature map")
    pixels = np.unique(pixels, axis=0) if len(pixels) else pixels
    index = np.full((H, W), -1, dtype=np.int64)
    index[pixels[:, 0], pixels[:, 1]] = np.arange(len(pixels))
    size = (H + 2) * (W + 2)
    offs = nn.tap_offsets(W)
    qS = nn.flat_index(pixels[:, 0], pixels[:, 1], W)
    nbh = _neighborhood(pixels, H, W) if len(pixels) else pixels
    qN = nn.flat_index(nbh[:, 0], nbh[:, 1], W)
    nbr = nn.neighbor_table(qS, qN, offs, size)

    sparse_branches = list(REGRESSION_BRANCHES) + (["iou"] if spec.has_iou and not spec.gated else [])
    xpf = nn.pad_flat(X)
    stack = _SparseStack(params, sparse_branches, xpf, qS, qN, nbr, offs, size)
    values = {b: stack.out[b] for b in REGRESSION_BRANCHES}
    gate = iou_stack = None
    if spec.gated:
        gated, gate = nn.gate_forward(obj_logit, X)
        iou_stack = _SparseStack(params, ["iou"], nn.pad_flat(gated), qS, qN, nbr, offs, size)
        values["iou"] = np.tanh(iou_stack.out["iou"])
    elif spec.has_iou:
        values["iou"] = np.tanh(stack.out["iou"])

    out = SparseOutputs(
        conf_logit=raw["conf"],
        conf=conf,
        obj_logit=obj_logit,
        pixels=pixels,
        values=values,
        index=index,
    )
    cache = {
        "X": X,
        "spec": spec,
        "stem": stem_cache,
        "arg": arg,
        "gate": gate,
        "stack": stack,
        "iou_stack": iou_stack,
        "iou": values.get("iou"),
    }
    return out, cache


def head_backward_sparse(cache, grads: dict[str, np.ndarray]):
    """Parameter gradients for :func:`head_forward_sparse`.

    Dense entries ``conf_logit`` / ``obj_logit`` are (C|1, H, W) maps; branch
    entries are (K, width) arrays aligned with ``SparseOutputs.pixels``.
    """
    spec: HeadSpec = cache["spec"]
    X = cache["X"]
    F, H, W = X.shape
    pgrads: dict[str, np.ndarray] = {}
    d_obj = grads.get("obj_logit")
    d_obj = np.zeros((1, H, W)) if d_obj is None else np.array(d_obj, dtype=np.float64)

    d_sparse = {b: grads.get(b) for b in REGRESSION_BRANCHES}
    if spec.gated:
        g = grads.get("iou")
        if g is not None:
            dv = nn.tanh_backward(g, cache["iou"])
            dpf = cache["iou_stack"].backward({"iou": dv}, pgrads, need_input=True)
        else:
            dpf = cache["iou_stack"].backward({}, pgrads, need_input=True)
        dgated = dpf.reshape(F, H + 2, W + 2)[:, 1:-1, 1:-1]
        d_logit, _ = nn.gate_backward(dgated, cache["gate"], X)
        d_obj = d_obj + d_logit
    elif spec.has_iou and grads.get("iou") is not None:
        d_sparse["iou"] = nn.tanh_backward(grads["iou"], cache["iou"])
    cache["stack"].backward(d_sparse, pgrads)

    d_raw = {"conf": grads.get("conf_logit")}
    _obj_to_conf(spec, d_raw, d_obj, cache["arg"])
    _dense_stem_backward(cache["stem"], d_raw, spec, pgrads, need_input=False)
    return pgrads
