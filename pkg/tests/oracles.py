"""Independent reference implementations used as test oracles."""

from __future__ import annotations

import numpy as np
from shapely import contains_xy, distance, points
from shapely.geometry import LinearRing, Polygon

from fedincr import nn


def probe(weights: nn.NetworkWeights, x: np.ndarray, loss_of_logits):
    """``(loss, activation signature)``: the signature lists ReLU on/off masks and max-pool winners."""
    logits, cache = nn.forward(weights, x)
    sig = []
    for key, val in sorted(cache.layers.items()):
        if key.startswith(("enc", "dec")):
            sig.append(val[2])
        elif key.startswith("pool"):
            sig.append(val)
    return loss_of_logits(logits), sig


def _same(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return all(np.array_equal(p, q) for p, q in zip(a, b))


def fd_gradients(weights: nn.NetworkWeights, x: np.ndarray, loss_of_logits, h: float = 1e-3, min_h: float = 1e-8) -> dict[str, np.ndarray]:
    """Central differences of ``loss_of_logits(forward(weights, x))`` for every parameter (float64 weights).

    The network is piecewise smooth: a step that moves a ReLU across zero or
    changes a max-pool winner measures the slope of a neighbouring piece.
    Such coordinates are re-measured with a halved step until the probes keep
    the activation pattern of the unperturbed point. Within one piece the
    estimate is Richardson-extrapolated from steps ``h`` and ``h / 2``, which
    cancels the O(h^2) truncation term that dominates for tiny gradients.
    """
    _, base = probe(weights, x, loss_of_logits)
    out = {}
    for name, arr in weights.items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]

            def central(step):
                arr[idx] = orig + step
                fp, sp = probe(weights, x, loss_of_logits)
                arr[idx] = orig - step
                fm, sm = probe(weights, x, loss_of_logits)
                arr[idx] = orig
                return (fp - fm) / (2 * step), _same(sp, base) and _same(sm, base)

            step = h
            while True:
                d1, ok1 = central(step)
                d2, ok2 = central(step / 2)
                if (ok1 and ok2) or step / 2 < min_h:
                    break
                step /= 2
            g[idx] = (4 * d2 - d1) / 3
        out[name] = g
    return out


def max_relative_error(analytic: nn.NetworkWeights, numeric: dict[str, np.ndarray]) -> float:
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst


def dice_sets(a: np.ndarray, b: np.ndarray) -> float:
    """DSC from explicit coordinate sets."""
    sa = {tuple(i) for i in np.argwhere(a)}
    sb = {tuple(i) for i in np.argwhere(b)}
    if not sa and not sb:
        return 1.0
    return 2 * len(sa & sb) / (len(sa) + len(sb))


def point_in_polygon_mask(poly_xy: np.ndarray, dims) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-centre inside test and distance of each centre to the curve."""
    h, w = dims
    yy, xx = np.mgrid[:h, :w].astype(np.float64)
    inside = contains_xy(Polygon(poly_xy), xx.ravel(), yy.ravel()).reshape(h, w)
    ring = LinearRing(poly_xy)
    dist = distance(ring, points(np.stack([xx.ravel(), yy.ravel()], axis=1))).reshape(h, w)
    return inside, dist


def disk(dims, cy, cx, r) -> np.ndarray:
    yy, xx = np.mgrid[: dims[0], : dims[1]]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def random_gradient_check(seed: int, desc: nn.ArchDescriptor | None = None) -> tuple[float, int]:
    """``(max relative error, n_params)`` for a random compact net on 16x16 inputs."""
    rng = np.random.default_rng(seed)
    if desc is None:
        levels = int(rng.integers(1, 3))
        desc = nn.ArchDescriptor(
            input_size=(16, 16),
            n_classes=int(rng.integers(2, 5)),
            encoder_channels=tuple(int(c) for c in rng.integers(2, 5, levels + 1)),
            n_levels=levels,
        )
    w = nn.build_network(desc, seed).astype(np.float64)
    w = w.map(lambda a: a + (0.05 * rng.standard_normal(a.shape) if a.ndim == 1 else 0.0))
    x = rng.standard_normal((2, 1, 16, 16))
    y = rng.integers(0, desc.n_classes, (2, 16, 16))
    cw = nn.compute_class_weights(y, desc.n_classes)

    def loss(logits):
        return nn.weighted_cross_entropy(logits, y, cw)[0]

    logits, cache = nn.forward(w, x)
    _, dlogits = nn.weighted_cross_entropy(logits, y, cw)
    analytic = nn.backward(w, cache, dlogits)
    numeric = fd_gradients(w, x, loss)
    return max_relative_error(analytic, numeric), desc.n_parameters()
