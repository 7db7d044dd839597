"""Neighbor-pooling two-layer network with exact manual gradients.

Scoring an image x against a neighborhood {z_1..z_m}:

    v_x = relu(W_x^T x + b_x)
    v_z = elementwise max_i relu(W_z^T z_i + b_z)
    s   = W_y^T [v_x; v_z (; tag_vector)] + b_y

The loss is a sum of independent one-vs-all logistic terms realized as a
numerically stable softplus. Backpropagation routes the pooled gradient to
the argmax neighbor per hidden coordinate (first index on ties). Dropout is
inverted (scaled at train time) and never applied at evaluation. All math
runs in float64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .util import FormatError, ValidationError

CHECKPOINT_MAGIC = b"NLPM"
CHECKPOINT_VERSION = 1

PARAM_NAMES = ("w_x", "b_x", "w_z", "b_z", "w_y", "b_y")


@dataclass
class ModelConfig:
    """Architecture knobs: hidden width, dropout, optional binary tag-vector
    extension appended after the pooled hidden states (widens W_y)."""

    h: int = 500
    dropout_p: float = 0.5
    use_tag_vector: bool = False
    tag_width: int = 0

    def __post_init__(self):
        if not (0.0 <= self.dropout_p < 1.0):
            raise ValidationError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.use_tag_vector and self.tag_width < 1:
            raise ValidationError("tag-vector extension needs tag_width >= 1")
        if not self.use_tag_vector:
            self.tag_width = 0

    @property
    def ext_width(self) -> int:
        return self.tag_width if self.use_tag_vector else 0


@dataclass
class ModelParams:
    """The six learnable arrays; W_y spans [v_x; v_z (; tag block)] rows."""

    w_x: np.ndarray  # (d, h)
    b_x: np.ndarray  # (h,)
    w_z: np.ndarray  # (d, h)
    b_z: np.ndarray  # (h,)
    w_y: np.ndarray  # (2h + ext, L)
    b_y: np.ndarray  # (L,)

    @property
    def d(self) -> int:
        return self.w_x.shape[0]

    @property
    def h(self) -> int:
        return self.w_x.shape[1]

    @property
    def n_labels(self) -> int:
        return self.w_y.shape[1]

    @property
    def ext_width(self) -> int:
        return self.w_y.shape[0] - 2 * self.h

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "ModelParams":
        return ModelParams(**{name: getattr(self, name).copy() for name in PARAM_NAMES})

    def check_shapes(self) -> None:
        d, h, L = self.d, self.h, self.n_labels
        expect = {
            "w_x": (d, h),
            "b_x": (h,),
            "w_z": (d, h),
            "b_z": (h,),
            "w_y": (2 * h + self.ext_width, L),
            "b_y": (L,),
        }
        for name, shape in expect.items():
            if getattr(self, name).shape != shape:
                raise ValidationError(f"{name} has shape {getattr(self, name).shape}, want {shape}")
        if self.ext_width < 0:
            raise ValidationError("w_y narrower than 2h rows")
        for name in PARAM_NAMES:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValidationError(f"non-finite entries in {name}")


def zeros_like_params(params: ModelParams) -> ModelParams:
    return ModelParams(**{n: np.zeros_like(getattr(params, n)) for n in PARAM_NAMES})


def init_params(d: int, h: int, n_labels: int, seed: int, ext_width: int = 0) -> ModelParams:
    """He-style init: weights ~ N(0, sqrt(2 / fan_in)), biases zero."""
    if min(d, h, n_labels) < 1:
        raise ValidationError("d, h and n_labels must be >= 1")
    rng = np.random.default_rng(seed)
    fan_y = 2 * h + ext_width
    return ModelParams(
        w_x=rng.normal(0.0, np.sqrt(2.0 / d), size=(d, h)),
        b_x=np.zeros(h),
        w_z=rng.normal(0.0, np.sqrt(2.0 / d), size=(d, h)),
        b_z=np.zeros(h),
        w_y=rng.normal(0.0, np.sqrt(2.0 / fan_y), size=(fan_y, n_labels)),
        b_y=np.zeros(n_labels),
    )


# ---------------------------------------------------------------------------
# forward / backward, single example


@dataclass
class ForwardCache:
    """Everything backward() needs from the matching forward() call."""

    x: np.ndarray
    z: np.ndarray  # (m, d), possibly m = 0
    tag_vector: np.ndarray | None
    pre_x: np.ndarray
    pre_z: np.ndarray  # (m, h)
    v_x: np.ndarray
    v_z: np.ndarray
    z_argmax: np.ndarray  # (h,) winner neighbor per coordinate, -1 when m = 0
    mask_x: np.ndarray | None
    mask_z: np.ndarray | None
    u: np.ndarray  # concatenated (post-dropout) input of the output layer
    scores: np.ndarray
    train: bool
    dropout_p: float


def _as_neighbor_matrix(neighbors, d: int) -> np.ndarray:
    z = np.asarray(neighbors, dtype=np.float64)
    if z.size == 0:
        return np.zeros((0, d))
    if z.ndim == 1:
        z = z[None, :]
    if z.ndim != 2 or z.shape[1] != d:
        raise ValidationError(f"neighbor features must be (m, {d}), got {z.shape}")
    return z


def make_dropout_masks(h: int, p: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Inverted-dropout masks for (v_x, v_z): entries 0 or 1/(1-p)."""
    keep = 1.0 - p
    mask_x = (rng.random(h) < keep) / keep
    mask_z = (rng.random(h) < keep) / keep
    return mask_x, mask_z


def forward(
    params: ModelParams,
    x_features,
    neighbor_features,
    tag_vector=None,
    train: bool = False,
    dropout_p: float = 0.0,
    rng: np.random.Generator | None = None,
    dropout_masks: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[np.ndarray, ForwardCache]:
    """Score one image against one neighborhood.

    ``neighbor_features`` is an (m, d) array; m = 0 is the degenerate mode
    with a zero neighbor hidden state. In train mode inverted dropout with
    probability ``dropout_p`` is applied to v_x and v_z, drawing masks from
    ``rng`` unless ``dropout_masks`` pins them.
    """
    d, h = params.d, params.h
    x = np.asarray(x_features, dtype=np.float64)
    if x.shape != (d,):
        raise ValidationError(f"x has shape {x.shape}, want ({d},)")
    z = _as_neighbor_matrix(neighbor_features, d)
    if not np.all(np.isfinite(x)) or not np.all(np.isfinite(z)):
        raise ValidationError("non-finite input features")

    ext = params.ext_width
    if ext:
        if tag_vector is None:
            raise ValidationError(f"model expects a {ext}-wide tag vector")
        tag_vector = np.asarray(tag_vector, dtype=np.float64)
        if tag_vector.shape != (ext,):
            raise ValidationError(f"tag vector has shape {tag_vector.shape}, want ({ext},)")
    elif tag_vector is not None:
        raise ValidationError("model has no tag-vector block")

    pre_x = params.w_x.T @ x + params.b_x
    v_x = np.maximum(pre_x, 0.0)
    m = z.shape[0]
    if m:
        pre_z = z @ params.w_z + params.b_z  # (m, h)
        act = np.maximum(pre_z, 0.0)
        z_argmax = np.argmax(act, axis=0)
        v_z = act[z_argmax, np.arange(h)]
    else:
        pre_z = np.zeros((0, h))
        z_argmax = np.full(h, -1, dtype=np.int64)
        v_z = np.zeros(h)

    mask_x = mask_z = None
    vx_out, vz_out = v_x, v_z
    if train and dropout_p > 0.0:
        if dropout_masks is not None:
            mask_x, mask_z = dropout_masks
        else:
            if rng is None:
                raise ValidationError("train-mode dropout needs an rng or explicit masks")
            mask_x, mask_z = make_dropout_masks(h, dropout_p, rng)
        vx_out = v_x * mask_x
        vz_out = v_z * mask_z

    parts = [vx_out, vz_out] + ([tag_vector] if ext else [])
    u = np.concatenate(parts)
    scores = params.w_y.T @ u + params.b_y
    cache = ForwardCache(
        x=x,
        z=z,
        tag_vector=tag_vector if ext else None,
        pre_x=pre_x,
        pre_z=pre_z,
        v_x=v_x,
        v_z=v_z,
        z_argmax=z_argmax,
        mask_x=mask_x,
        mask_z=mask_z,
        u=u,
        scores=scores,
        train=train,
        dropout_p=dropout_p,
    )
    return scores, cache


def backward(params: ModelParams, cache: ForwardCache, dscores) -> ModelParams:
    """Exact gradients of whatever scalar produced ``dscores``.

    The pooled gradient reaches only the argmax neighbor per hidden
    coordinate; dropout masks recorded in the cache are respected.
    """
    h = params.h
    dscores = np.asarray(dscores, dtype=np.float64)
    if dscores.shape != (params.n_labels,):
        raise ValidationError(f"dscores has shape {dscores.shape}, want ({params.n_labels},)")
    if cache.u.shape[0] != params.w_y.shape[0] or cache.x.shape[0] != params.d:
        raise ValidationError("cache does not match these parameters")

    g_wy = np.outer(cache.u, dscores)
    g_by = dscores.copy()
    du = params.w_y @ dscores
    dvx = du[:h]
    dvz = du[h : 2 * h]
    if cache.mask_x is not None:
        dvx = dvx * cache.mask_x
        dvz = dvz * cache.mask_z

    dpre_x = dvx * (cache.pre_x > 0.0)
    g_wx = np.outer(cache.x, dpre_x)
    g_bx = dpre_x.copy()

    m = cache.z.shape[0]
    if m:
        dmat = np.zeros((m, h))
        dmat[cache.z_argmax, np.arange(h)] = dvz
        dpre_z = dmat * (cache.pre_z > 0.0)
        g_wz = cache.z.T @ dpre_z
        g_bz = dpre_z.sum(axis=0)
    else:
        g_wz = np.zeros_like(params.w_z)
        g_bz = np.zeros_like(params.b_z)

    return ModelParams(w_x=g_wx, b_x=g_bx, w_z=g_wz, b_z=g_bz, w_y=g_wy, b_y=g_by)


# ---------------------------------------------------------------------------
# loss


def _sigmoid(t: np.ndarray) -> np.ndarray:
    # tanh form is stable for large |t|
    return 0.5 * (1.0 + np.tanh(0.5 * t))


def loss_and_grad_scores(scores, label_set: Iterable[int]) -> tuple[float, np.ndarray]:
    """Sum of one-vs-all logistic terms: sum_c softplus(-y_c * s_c) with
    y_c = +1 for present labels, -1 otherwise. Returns (loss, dloss/dscores)."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1:
        raise ValidationError("scores must be 1-D; use batch_loss_and_grad for batches")
    if not np.all(np.isfinite(s)):
        raise ValidationError("non-finite scores")
    y = np.full(s.shape, -1.0)
    for c in label_set:
        c = int(c)
        if c < 0 or c >= s.shape[0]:
            raise ValidationError(f"label id {c} out of score range [0, {s.shape[0]})")
        y[c] = 1.0
    t = -y * s
    loss = float(np.logaddexp(0.0, t).sum())
    dscores = -y * _sigmoid(t)
    return loss, dscores


def batch_loss_and_grad(scores: np.ndarray, y_signs: np.ndarray) -> tuple[float, np.ndarray]:
    """Batched loss: ``scores`` (B, L), ``y_signs`` (B, L) of +-1.

    Returns the SUM of per-example losses and its gradient; callers divide
    by the batch size for the mean reduction.
    """
    t = -y_signs * scores
    loss = float(np.logaddexp(0.0, t).sum())
    dscores = -y_signs * _sigmoid(t)
    return loss, dscores


def label_sign_matrix(label_sets: Sequence[Iterable[int]], n_labels: int) -> np.ndarray:
    y = np.full((len(label_sets), n_labels), -1.0)
    for row, labels in enumerate(label_sets):
        for c in labels:
            y[row, int(c)] = 1.0
    return y


def l2_term(params: ModelParams, lam: float) -> tuple[float, ModelParams]:
    """(lam/2) * (||W_x||^2 + ||W_z||^2 + ||W_y||^2); biases excluded."""
    if lam < 0:
        raise ValidationError("lambda must be >= 0")
    penalty = 0.5 * lam * sum(
        float(np.sum(np.square(getattr(params, n)))) for n in ("w_x", "w_z", "w_y")
    )
    grads = zeros_like_params(params)
    grads.w_x += lam * params.w_x
    grads.w_z += lam * params.w_z
    grads.w_y += lam * params.w_y
    return penalty, grads


# ---------------------------------------------------------------------------
# neighborhood-averaged scoring and attribution


def score_image(
    params: ModelParams,
    x_features,
    sampled_neighborhoods: Sequence[Sequence[int]],
    features_lookup,
    tag_vector=None,
) -> np.ndarray:
    """Average evaluation-mode forward scores over sampled neighborhoods.

    ``features_lookup`` maps an image id to its feature vector (mapping or
    callable).
    """
    if not sampled_neighborhoods:
        raise ValidationError("need at least one sampled neighborhood")
    get = features_lookup.__getitem__ if isinstance(features_lookup, Mapping) else features_lookup
    total = np.zeros(params.n_labels)
    for subset in sampled_neighborhoods:
        z = np.stack([np.asarray(get(i), dtype=np.float64) for i in subset])
        scores, _ = forward(params, x_features, z, tag_vector=tag_vector, train=False)
        total += scores
    return total / len(sampled_neighborhoods)


@dataclass
class Attribution:
    """Per-label score decomposition along the row blocks of W_y."""

    image_part: np.ndarray
    neighbor_part: np.ndarray
    bias: np.ndarray
    tag_part: np.ndarray | None = None

    def total(self) -> np.ndarray:
        out = self.image_part + self.neighbor_part + self.bias
        if self.tag_part is not None:
            out = out + self.tag_part
        return out


def attribute_scores(params: ModelParams, cache: ForwardCache) -> Attribution:
    """Split cached evaluation scores into image / neighbor / (tag) / bias parts."""
    if cache.train:
        raise ValidationError("attribution requires an evaluation-mode cache")
    h = params.h
    image_part = params.w_y[:h].T @ cache.v_x
    neighbor_part = params.w_y[h : 2 * h].T @ cache.v_z
    tag_part = None
    if params.ext_width:
        tag_part = params.w_y[2 * h :].T @ cache.tag_vector
    return Attribution(
        image_part=image_part, neighbor_part=neighbor_part, bias=params.b_y.copy(), tag_part=tag_part
    )


# ---------------------------------------------------------------------------
# batched fast path (training / bulk evaluation); must agree with forward()


@dataclass
class BatchCache:
    x: np.ndarray  # (B, d)
    z: np.ndarray | None  # (B, m, d) or None for the degenerate group
    tag: np.ndarray | None  # (B, ext)
    pre_x: np.ndarray
    pre_z: np.ndarray | None
    z_argmax: np.ndarray | None
    mask_x: np.ndarray | None  # (B, h)
    mask_z: np.ndarray | None
    u: np.ndarray  # (B, 2h + ext)


def forward_batch(
    params: ModelParams,
    x: np.ndarray,
    z: np.ndarray | None,
    tag: np.ndarray | None = None,
    masks: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[np.ndarray, BatchCache]:
    """Vectorized forward over a batch with uniform neighborhood size.

    ``z`` is (B, m, d) or None for an all-degenerate batch; ``masks`` are
    per-example inverted-dropout masks (train mode) or None (evaluation).
    """
    h = params.h
    b = x.shape[0]
    pre_x = x @ params.w_x + params.b_x
    v_x = np.maximum(pre_x, 0.0)
    if z is not None and z.shape[1] > 0:
        pre_z = np.einsum("bmd,dh->bmh", z, params.w_z) + params.b_z
        act = np.maximum(pre_z, 0.0)
        z_argmax = np.argmax(act, axis=1)  # (B, h)
        v_z = np.take_along_axis(act, z_argmax[:, None, :], axis=1)[:, 0, :]
    else:
        pre_z = None
        z_argmax = None
        v_z = np.zeros((b, h))
    if masks is not None:
        v_x = v_x * masks[0]
        v_z = v_z * masks[1]
    parts = [v_x, v_z] + ([tag] if params.ext_width else [])
    u = np.concatenate(parts, axis=1)
    scores = u @ params.w_y + params.b_y
    cache = BatchCache(
        x=x,
        z=z,
        tag=tag if params.ext_width else None,
        pre_x=pre_x,
        pre_z=pre_z,
        z_argmax=z_argmax,
        mask_x=None if masks is None else masks[0],
        mask_z=None if masks is None else masks[1],
        u=u,
    )
    return scores, cache


def backward_batch(params: ModelParams, cache: BatchCache, dscores: np.ndarray) -> ModelParams:
    """Gradients summed over the batch (fixed reduction order)."""
    h = params.h
    g_wy = cache.u.T @ dscores
    g_by = dscores.sum(axis=0)
    du = dscores @ params.w_y.T
    dvx = du[:, :h]
    dvz = du[:, h : 2 * h]
    if cache.mask_x is not None:
        dvx = dvx * cache.mask_x
        dvz = dvz * cache.mask_z
    dpre_x = dvx * (cache.pre_x > 0.0)
    g_wx = cache.x.T @ dpre_x
    g_bx = dpre_x.sum(axis=0)
    if cache.z is not None and cache.z.shape[1] > 0:
        dmat = np.zeros(cache.pre_z.shape)
        np.put_along_axis(dmat, cache.z_argmax[:, None, :], dvz[:, None, :], axis=1)
        dpre_z = dmat * (cache.pre_z > 0.0)
        g_wz = np.einsum("bmd,bmh->dh", cache.z, dpre_z)
        g_bz = dpre_z.sum(axis=(0, 1))
    else:
        g_wz = np.zeros_like(params.w_z)
        g_bz = np.zeros_like(params.b_z)
    return ModelParams(w_x=g_wx, b_x=g_bx, w_z=g_wz, b_z=g_bz, w_y=g_wy, b_y=g_by)


# ---------------------------------------------------------------------------
# checkpoint IO: binary arrays + JSON sidecar


def save_checkpoint(path, params: ModelParams, meta: dict | None = None) -> None:
    params.check_shapes()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(
            struct.pack(
                "<IIIII",
                CHECKPOINT_VERSION,
                params.d,
                params.h,
                params.n_labels,
                params.ext_width,
            )
        )
        for name in PARAM_NAMES:
            f.write(np.ascontiguousarray(getattr(params, name), dtype="<f8").tobytes())
    sidecar = {"d": params.d, "h": params.h, "n_labels": params.n_labels,
               "ext_width": params.ext_width}
    sidecar.update(meta or {})
    with open(str(path) + ".json", "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        version, d, h, n_labels, ext = struct.unpack("<IIIII", f.read(20))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        shapes = {
            "w_x": (d, h),
            "b_x": (h,),
            "w_z": (d, h),
            "b_z": (h,),
            "w_y": (2 * h + ext, n_labels),
            "b_y": (n_labels,),
        }
        arrays = {}
        for name, shape in shapes.items():
            count = int(np.prod(shape))
            buf = f.read(count * 8)
            if len(buf) != count * 8:
                raise FormatError(f"{path}: truncated array {name}")
            arrays[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    params = ModelParams(**arrays)
    sidecar_path = str(path) + ".json"
    meta = {}
    try:
        with open(sidecar_path, "r", encoding="utf-8") as f:
            meta = json.load(f)
    except FileNotFoundError:
        pass
    return params, meta
