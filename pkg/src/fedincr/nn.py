"""Minimal numpy kernel for a compact U-shaped segmentation network.

The network is a fixed family: one 3x3 convolution + ReLU per encoder level,
2x max-pool between levels, nearest-neighbour 2x upsampling with skip
concatenation on the way back up, and a 1x1 classification head. Activations
are kept channels-last internally; the public ``forward`` takes and returns
channels-first tensors ``[N, C, H, W]``.

All arithmetic follows the dtype of the weights (float32 in normal use,
float64 for finite-difference checks).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product
from typing import Iterator, Sequence

import numpy as np

from .errors import CacheError, DescriptorError, EmptyInputError, NumericError, ShapeError

_TAPS = tuple(product(range(3), range(3)))


@dataclass(frozen=True)
class ArchDescriptor:
    """Architecture plus the preprocessing parameters a model needs.

    ``encoder_channels`` has ``n_levels + 1`` entries; the last one is the
    bottleneck width. ``canonical_resolution`` is the in-plane mm/pixel the
    network was trained at.
    """

    input_size: tuple[int, int] = (64, 64)
    n_classes: int = 5
    encoder_channels: tuple[int, ...] = (8, 16, 32)
    n_levels: int = 2
    canonical_resolution: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))

    def validate(self) -> None:
        h, w = self.input_size
        if self.n_levels < 1:
            raise DescriptorError("n_levels must be >= 1")
        step = 2**self.n_levels
        if h <= 0 or w <= 0 or h % step or w % step:
            raise DescriptorError(f"input size {self.input_size} not divisible by {step}")
        if self.n_classes < 2:
            raise DescriptorError("n_classes must be >= 2")
        if len(self.encoder_channels) != self.n_levels + 1:
            raise DescriptorError("encoder_channels needs n_levels + 1 entries")
        if any(c < 1 for c in self.encoder_channels):
            raise DescriptorError("channel counts must be positive")
        if not self.canonical_resolution > 0:
            raise DescriptorError("canonical_resolution must be positive")

    def parameter_specs(self) -> list[tuple[str, tuple[int, ...]]]:
        """Ordered (name, shape) list; this order defines the weight blob layout."""
        self.validate()
        ch = self.encoder_channels
        specs: list[tuple[str, tuple[int, ...]]] = []
        for i in range(self.n_levels + 1):
            cin = 1 if i == 0 else ch[i - 1]
            specs.append((f"enc{i}.weight", (ch[i], cin, 3, 3)))
            specs.append((f"enc{i}.bias", (ch[i],)))
        for i in reversed(range(self.n_levels)):
            specs.append((f"dec{i}.weight", (ch[i], ch[i + 1] + ch[i], 3, 3)))
            specs.append((f"dec{i}.bias", (ch[i],)))
        specs.append(("head.weight", (self.n_classes, ch[0], 1, 1)))
        specs.append(("head.bias", (self.n_classes,)))
        return specs

    def n_parameters(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.parameter_specs())

    def to_dict(self) -> dict:
        return {
            "input_size": list(self.input_size),
            "n_classes": self.n_classes,
            "encoder_channels": list(self.encoder_channels),
            "n_levels": self.n_levels,
            "canonical_resolution": self.canonical_resolution,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchDescriptor":
        try:
            desc = cls(
                input_size=tuple(d["input_size"]),
                n_classes=int(d["n_classes"]),
                encoder_channels=tuple(d["encoder_channels"]),
                n_levels=int(d["n_levels"]),
                canonical_resolution=float(d.get("canonical_resolution", 1.0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DescriptorError(f"malformed descriptor: {exc}") from exc
        desc.validate()
        return desc


class NetworkWeights:
    """Ordered named parameter arrays matching an :class:`ArchDescriptor`."""

    def __init__(self, descriptor: ArchDescriptor, params: dict[str, np.ndarray]):
        specs = descriptor.parameter_specs()
        if [n for n, _ in specs] != list(params):
            raise ShapeError("parameter names do not match descriptor order")
        for name, shape in specs:
            if params[name].shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {params[name].shape}")
        self.descriptor = descriptor
        self.params = params

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def items(self):
        return self.params.items()

    def values(self):
        return self.params.values()

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).dtype

    def n_parameters(self) -> int:
        return sum(a.size for a in self.params.values())

    def map(self, fn) -> "NetworkWeights":
        return NetworkWeights(self.descriptor, {k: fn(v) for k, v in self.params.items()})

    def astype(self, dtype) -> "NetworkWeights":
        return self.map(lambda a: a.astype(dtype))

    def copy(self) -> "NetworkWeights":
        return self.map(np.copy)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.params.values()])

    def to_blob(self) -> bytes:
        return self.flat().astype("<f4").tobytes()

    @classmethod
    def from_flat(cls, descriptor: ArchDescriptor, flat: np.ndarray) -> "NetworkWeights":
        specs = descriptor.parameter_specs()
        total = sum(int(np.prod(s)) for _, s in specs)
        if flat.size != total:
            raise ShapeError(f"expected {total} values, got {flat.size}")
        params, pos = {}, 0
        for name, shape in specs:
            n = int(np.prod(shape))
            params[name] = flat[pos : pos + n].reshape(shape).copy()
            pos += n
        return cls(descriptor, params)

    @classmethod
    def from_blob(cls, descriptor: ArchDescriptor, blob: bytes) -> "NetworkWeights":
        return cls.from_flat(descriptor, np.frombuffer(blob, dtype="<f4").astype(np.float32))

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.params.values())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, NetworkWeights):
            return NotImplemented
        return (
            self.descriptor == other.descriptor
            and list(self.params) == list(other.params)
            and all(
                a.dtype == b.dtype and a.tobytes() == b.tobytes()
                for a, b in zip(self.params.values(), other.params.values())
            )
        )

    def __repr__(self) -> str:
        return f"NetworkWeights({self.n_parameters()} params, dtype={self.dtype})"


def build_network(descriptor: ArchDescriptor, seed: int) -> NetworkWeights:
    """He-normal weights, zero biases, drawn in parameter order from ``seed``."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in descriptor.parameter_specs():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
    return NetworkWeights(descriptor, params)


# --- layers (channels-last) -------------------------------------------------


def _im2col(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((n, h, w, 9, c), dtype=x.dtype)
    for k, (dy, dx) in enumerate(_TAPS):
        cols[:, :, :, k, :] = xp[:, dy : dy + h, dx : dx + w, :]
    return cols.reshape(n * h * w, 9 * c)


def _col2im(dcols: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    n, h, w, c = shape
    dcols = dcols.reshape(n, h, w, 9, c)
    dxp = np.zeros((n, h + 2, w + 2, c), dtype=dcols.dtype)
    for k, (dy, dx) in enumerate(_TAPS):
        dxp[:, dy : dy + h, dx : dx + w, :] += dcols[:, :, :, k, :]
    return dxp[:, 1:-1, 1:-1, :]


def _conv_matrix(w: np.ndarray) -> np.ndarray:
    cout, cin = w.shape[:2]
    return w.transpose(2, 3, 1, 0).reshape(9 * cin, cout)


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    n, h, wd, _ = x.shape
    cols = _im2col(x)
    out = cols @ _conv_matrix(w) + b
    return out.reshape(n, h, wd, w.shape[0]), cols


def _conv_backward(dout: np.ndarray, cols: np.ndarray, w: np.ndarray, x_shape):
    cout, cin = w.shape[:2]
    d2 = dout.reshape(-1, cout)
    dw = (cols.T @ d2).reshape(3, 3, cin, cout).transpose(3, 2, 0, 1)
    db = d2.sum(axis=0)
    dx = _col2im(d2 @ _conv_matrix(w).T, x_shape)
    return dx, dw, db


def _pool_forward(x: np.ndarray):
    n, h, w, c = x.shape
    blocks = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _pool_backward(dout: np.ndarray, idx: np.ndarray) -> np.ndarray:
    n, h2, w2, c = dout.shape
    d = np.zeros((n, h2, w2, c, 4), dtype=dout.dtype)
    np.put_along_axis(d, idx[..., None], dout[..., None], axis=-1)
    return d.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h2, 2 * w2, c)


def _upsample(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=1).repeat(2, axis=2)


def _upsample_backward(dout: np.ndarray) -> np.ndarray:
    n, h, w, c = dout.shape
    return dout.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


@dataclass
class ForwardCache:
    """Activations recorded by :func:`forward`; consumed once by :func:`backward`."""

    token: tuple
    weights_ref: list = field(repr=False)
    layers: dict = field(repr=False)


def _token(weights: NetworkWeights) -> tuple:
    return tuple((k, id(v), v.shape) for k, v in weights.items())


def forward(weights: NetworkWeights, batch: np.ndarray, keep_cache: bool = True):
    """Per-pixel class logits ``[N, C, H, W]`` for a ``[N, 1, H, W]`` batch.

    Returns ``(logits, cache)``; ``cache`` is None when ``keep_cache`` is false.
    """
    desc = weights.descriptor
    batch = np.asarray(batch)
    if batch.ndim != 4 or batch.shape[1] != 1 or tuple(batch.shape[2:]) != desc.input_size:
        raise ShapeError(f"expected [N, 1, {desc.input_size[0]}, {desc.input_size[1]}], got {list(batch.shape)}")
    dtype = weights.dtype
    x = batch.astype(dtype, copy=False).transpose(0, 2, 3, 1)
    L = desc.n_levels
    layers: dict = {}
    skips = []
    for i in range(L + 1):
        z, cols = _conv_forward(x, weights[f"enc{i}.weight"], weights[f"enc{i}.bias"])
        a = np.maximum(z, 0)
        layers[f"enc{i}"] = (x.shape, cols, z > 0)
        if i < L:
            skips.append(a)
            x, idx = _pool_forward(a)
            layers[f"pool{i}"] = idx
        else:
            x = a
    for i in reversed(range(L)):
        cat = np.concatenate([_upsample(x), skips[i]], axis=-1)
        z, cols = _conv_forward(cat, weights[f"dec{i}.weight"], weights[f"dec{i}.bias"])
        layers[f"dec{i}"] = (cat.shape, cols, z > 0)
        x = np.maximum(z, 0)
    n, h, w, c0 = x.shape
    hw = weights["head.weight"].reshape(desc.n_classes, c0)
    logits = x.reshape(-1, c0) @ hw.T + weights["head.bias"]
    layers["head"] = x
    logits = logits.reshape(n, h, w, desc.n_classes).transpose(0, 3, 1, 2)
    cache = ForwardCache(_token(weights), list(weights.values()), layers) if keep_cache else None
    return np.ascontiguousarray(logits), cache


def backward(weights: NetworkWeights, cache: ForwardCache, dlogits: np.ndarray) -> NetworkWeights:
    """Exact gradients of the loss with respect to every parameter."""
    if cache is None or cache.token != _token(weights):
        raise CacheError("forward cache does not belong to these weights")
    desc = weights.descriptor
    L = desc.n_levels
    layers = cache.layers
    grads: dict[str, np.ndarray] = {}
    a = layers["head"]
    n, h, w, c0 = a.shape
    C = desc.n_classes
    d = np.asarray(dlogits, dtype=weights.dtype).transpose(0, 2, 3, 1).reshape(-1, C)
    grads["head.weight"] = (d.T @ a.reshape(-1, c0)).reshape(C, c0, 1, 1)
    grads["head.bias"] = d.sum(axis=0)
    dx = (d @ weights["head.weight"].reshape(C, c0)).reshape(n, h, w, c0)
    dskips: dict[int, np.ndarray] = {}
    for i in range(L):
        shape, cols, mask = layers[f"dec{i}"]
        dz = dx * mask
        dcat, grads[f"dec{i}.weight"], grads[f"dec{i}.bias"] = _conv_backward(
            dz, cols, weights[f"dec{i}.weight"], shape
        )
        c_up = desc.encoder_channels[i + 1]
        dskips[i] = dcat[..., c_up:]
        dx = _upsample_backward(dcat[..., :c_up])
    for i in reversed(range(L + 1)):
        if i < L:
            dx = _pool_backward(dx, layers[f"pool{i}"]) + dskips[i]
        shape, cols, mask = layers[f"enc{i}"]
        dz = dx * mask
        dx, grads[f"enc{i}.weight"], grads[f"enc{i}.bias"] = _conv_backward(
            dz, cols, weights[f"enc{i}.weight"], shape
        )
    ordered = {name: grads[name].astype(weights.dtype, copy=False) for name in weights}
    return NetworkWeights(desc, ordered)


# --- loss -------------------------------------------------------------------


def compute_class_weights(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Inverse-frequency weights ``N / (C_present * n_c)``; absent classes get 0."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise EmptyInputError("no labelled pixels")
    counts = np.bincount(labels.ravel().astype(np.int64), minlength=n_classes)[:n_classes]
    present = counts > 0
    if not present.any():
        raise EmptyInputError("no labelled pixels")
    w = np.zeros(n_classes, dtype=np.float64)
    w[present] = counts.sum() / (present.sum() * counts[present])
    return w


def boundary_weight_map(targets: np.ndarray, radius: int = 2, factor: float = 2.0) -> np.ndarray:
    """Per-pixel multiplier: ``factor`` within ``radius`` px of an inter-class boundary."""
    from scipy import ndimage

    t = np.asarray(targets)
    edge = np.zeros(t.shape, dtype=bool)
    edge[..., 1:, :] |= t[..., 1:, :] != t[..., :-1, :]
    edge[..., :-1, :] |= t[..., 1:, :] != t[..., :-1, :]
    edge[..., :, 1:] |= t[..., :, 1:] != t[..., :, :-1]
    edge[..., :, :-1] |= t[..., :, 1:] != t[..., :, :-1]
    yy, xx = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    disk = (yy**2 + xx**2) <= radius**2
    struct = disk.reshape((1,) * (t.ndim - 2) + disk.shape)
    near = ndimage.binary_dilation(edge, structure=struct)
    return np.where(near, factor, 1.0)


def weighted_cross_entropy(
    logits: np.ndarray,
    targets: np.ndarray,
    class_weights: Sequence[float],
    pixel_weights: np.ndarray | None = None,
):
    """Mean over pixels of ``w[y] * -log softmax(logits)[y]`` and its gradient."""
    logits = np.asarray(logits)
    if not np.isfinite(logits).all():
        raise NumericError("non-finite logits")
    targets = np.asarray(targets).astype(np.int64)
    n, C = logits.shape[:2]
    if targets.shape != (n,) + logits.shape[2:]:
        raise ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    cw = np.asarray(class_weights, dtype=logits.dtype)
    if cw.shape != (C,):
        raise ShapeError("class weight length must equal n_classes")
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    denom = expd.sum(axis=1, keepdims=True)
    logp = shifted - np.log(denom)
    picked = np.take_along_axis(logp, targets[:, None], axis=1)[:, 0]
    wpix = cw[targets]
    if pixel_weights is not None:
        wpix = wpix * np.asarray(pixel_weights, dtype=logits.dtype)
    count = targets.size
    loss = float(-(wpix * picked).sum() / count)
    grad = expd / denom
    onehot = np.zeros_like(grad)
    np.put_along_axis(onehot, targets[:, None], 1.0, axis=1)
    grad = (grad - onehot) * (wpix[:, None] / count)
    return loss, grad.astype(logits.dtype, copy=False)


# --- optimiser ---------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, weights: NetworkWeights, **hyper) -> "AdamState":
        m = {k: np.zeros_like(v) for k, v in weights.items()}
        v = {k: np.zeros_like(a) for k, a in weights.items()}
        return cls(m=m, v=v, **hyper)


def adam_step(weights: NetworkWeights, grads: NetworkWeights, state: AdamState):
    """One bias-corrected Adam update. Returns new ``(weights, state)``; inputs untouched."""
    if state.t < 0:
        raise ValueError("adam step counter must be >= 0")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_w, new_m, new_v = {}, {}, {}
    for name, w in weights.items():
        g = grads[name]
        if g.shape != w.shape or state.m[name].shape != w.shape:
            raise ShapeError(f"{name}: gradient/state shape mismatch")
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_w[name] = (w - step).astype(w.dtype, copy=False)
        new_m[name] = m.astype(w.dtype, copy=False)
        new_v[name] = v.astype(w.dtype, copy=False)
    new_state = AdamState(new_m, new_v, t, state.lr, state.beta1, state.beta2, state.eps)
    return NetworkWeights(weights.descriptor, new_w), new_state


# --- helpers -----------------------------------------------------------------


def predict(weights: NetworkWeights, batch: np.ndarray, chunk: int = 16) -> np.ndarray:
    """Argmax labels ``[N, H, W]``; ties resolve to the lowest class id."""
    out = []
    for start in range(0, len(batch), chunk):
        logits, _ = forward(weights, batch[start : start + chunk], keep_cache=False)
        out.append(logits.argmax(axis=1))
    if not out:
        return np.zeros((0,) + weights.descriptor.input_size, dtype=np.int64)
    return np.concatenate(out).astype(np.uint8)


def dataset_loss(weights, inputs, targets, class_weights, pixel_weights=None, chunk: int = 16) -> float:
    """Loss over a whole set, evaluated in chunks and averaged per pixel."""
    total, count = 0.0, 0
    for s in range(0, len(inputs), chunk):
        logits, _ = forward(weights, inputs[s : s + chunk], keep_cache=False)
        pw = None if pixel_weights is None else pixel_weights[s : s + chunk]
        loss, _ = weighted_cross_entropy(logits, targets[s : s + chunk], class_weights, pw)
        n = targets[s : s + chunk].size
        total += loss * n
        count += n
    return total / count


def train(
    weights: NetworkWeights,
    inputs: np.ndarray,
    targets: np.ndarray,
    *,
    epochs: int,
    batch_size: int,
    rng: np.random.Generator,
    class_weights: np.ndarray | None = None,
    pixel_weights: np.ndarray | None = None,
    state: AdamState | None = None,
    lr: float = 1e-3,
    shuffle: bool = True,
    track_loss: bool = False,
):
    """Mini-batch Adam over ``inputs``/``targets``.

    Returns ``(weights, state, losses)``. With ``track_loss`` the list holds the
    full-set loss before training followed by one value per epoch.
    """
    if class_weights is None:
        class_weights = compute_class_weights(targets, weights.descriptor.n_classes)
    if state is None:
        state = AdamState.zeros_like(weights, lr=lr)
    losses: list[float] = []
    if track_loss:
        losses.append(dataset_loss(weights, inputs, targets, class_weights, pixel_weights))
    n = len(inputs)
    for _ in range(epochs):
        order = rng.permutation(n) if shuffle else np.arange(n)
        for s in range(0, n, batch_size):
            idx = order[s : s + batch_size]
            logits, cache = forward(weights, inputs[idx])
            pw = None if pixel_weights is None else pixel_weights[idx]
            _, dlogits = weighted_cross_entropy(logits, targets[idx], class_weights, pw)
            grads = backward(weights, cache, dlogits)
            weights, state = adam_step(weights, grads, state)
        if track_loss:
            losses.append(dataset_loss(weights, inputs, targets, class_weights, pixel_weights))
    return weights, state, losses
