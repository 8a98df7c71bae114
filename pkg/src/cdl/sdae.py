"""Sigmoid stacked autoencoder: forward evaluation, dropout, analytic gradients.

The network has an even number L of sigmoid layers; the first L/2 encode a
content row into a low-dimensional code, the last L/2 reconstruct the input.
``gradients`` returns the exact ascent direction of the joint training
objective (weight decay, code-vs-item-factor coupling, reconstruction error),
assembled by reverse accumulation through the sigmoid chain.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .exceptions import ArgumentError, NumericError, ShapeError


@dataclass
class SdaeNetwork:
    """Weights and biases of an even-depth sigmoid network.

    ``weights[l]`` has shape (width_l, width_{l+1}); ``biases[l]`` has length
    width_{l+1}.  All values must be finite.
    """

    weights: list
    biases: list

    def __post_init__(self):
        L = len(self.weights)
        if L != len(self.biases):
            raise ArgumentError("weights and biases must have one entry per layer")
        if L < 2 or L % 2:
            raise ArgumentError(f"layer count must be even and >= 2, got {L}")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        for l, (w, b) in enumerate(zip(self.weights, self.biases), start=1):
            if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
                raise ShapeError(f"layer {l}: weight {w.shape} and bias {b.shape} mismatch")
            if l > 1 and self.weights[l - 2].shape[1] != w.shape[0]:
                raise ShapeError(f"layer {l}: input width does not match layer {l - 1}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise NumericError(f"layer {l}: non-finite parameter")

    @property
    def num_layers(self):
        return len(self.weights)

    @property
    def middle(self):
        return len(self.weights) // 2

    @property
    def widths(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def code_size(self):
        return self.weights[self.middle - 1].shape[1]

    def copy(self):
        return SdaeNetwork([w.copy() for w in self.weights],
                           [b.copy() for b in self.biases])

    def squared_norm(self):
        """Sum of squared weights and biases over all layers.

        Overflow to inf is legal here; the training loop's divergence policy
        handles it.
        """
        with np.errstate(over="ignore"):
            return float(
                sum(np.sum(w * w) for w in self.weights)
                + sum(np.sum(b * b) for b in self.biases)
            )


@dataclass
class ForwardTrace:
    """Per-layer outputs of one forward pass.

    ``layer_outputs[l]`` is the value propagated to the next layer (dropout
    applied where a mask exists); ``raw_outputs[l]`` is the plain sigmoid
    activation.  The two lists share objects at layers without a mask.
    """

    layer_outputs: list
    raw_outputs: list


@dataclass
class DropoutMask:
    """Inverted-scaling dropout masks for the hidden, non-code layers.

    ``scales[l]`` holds 0 or 1/keep entries; layers 0, L/2, and L never get a
    mask.  Rate 0 yields all-ones masks, reproducing the unmasked forward
    pass bit-exactly.
    """

    scales: dict = field(default_factory=dict)
    rate: float = 0.0
    seed: int = 0

    def scale_rows(self, layer, rows=None):
        arr = self.scales.get(layer)
        if arr is None or rows is None:
            return arr
        return arr[rows]


def dropout_mask(widths, num_rows, rate, seed):
    """Draw masks for every hidden layer except the code layer."""
    if not 0.0 <= rate < 1.0:
        raise ArgumentError(f"dropout rate must lie in [0, 1), got {rate}")
    L = len(widths) - 1
    rng = np.random.default_rng(seed)
    scales = {}
    for l in range(1, L):
        if l == L // 2:
            continue
        keep = rng.random((num_rows, widths[l])) >= rate
        scales[l] = keep / (1.0 - rate)
    return DropoutMask(scales, rate, seed)


def init_network(widths, seed, lambda_w=1.0):
    """Gaussian weight init with per-layer scale min(lambda_w**-0.5, fan_in**-0.5)
    and zero biases.  Deterministic per seed."""
    widths = [int(w) for w in widths]
    L = len(widths) - 1
    if L < 2 or L % 2:
        raise ArgumentError(f"layer count must be even and >= 2, got {L}")
    if min(widths) < 1:
        raise ArgumentError("all layer widths must be positive")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for l in range(1, L + 1):
        scale = min(lambda_w ** -0.5, widths[l - 1] ** -0.5)
        weights.append(rng.normal(0.0, scale, size=(widths[l - 1], widths[l])))
        biases.append(np.zeros(widths[l]))
    return SdaeNetwork(weights, biases)


def sample_network(widths, lambda_w, rng):
    """Draw weights and biases from the N(0, 1/lambda_w) prior (used when
    synthesizing data, where biases are random too)."""
    widths = [int(w) for w in widths]
    L = len(widths) - 1
    if L < 2 or L % 2:
        raise ArgumentError(f"layer count must be even and >= 2, got {L}")
    scale = lambda_w ** -0.5
    weights = [rng.normal(0.0, scale, size=(widths[l - 1], widths[l]))
               for l in range(1, L + 1)]
    biases = [rng.normal(0.0, scale, size=widths[l]) for l in range(1, L + 1)]
    return SdaeNetwork(weights, biases)


def _as_matrix(x):
    """Accept ContentMatrix, scipy sparse, or ndarray; return a 2-D operand."""
    if hasattr(x, "matrix"):
        return x.matrix
    if sp.issparse(x):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    return arr


def _dense_rows(m, rows):
    part = m[rows]
    if sp.issparse(part):
        return part.toarray()
    return part


def forward(net, x0, mask=None):
    """Row-wise forward pass; returns the full :class:`ForwardTrace`.

    ``mask`` applies inverted-scaling dropout to its layers (training path);
    without a mask every activation is the plain sigmoid.
    """
    X = _as_matrix(x0)
    if X.shape[1] != net.widths[0]:
        raise ShapeError(
            f"input width {X.shape[1]} does not match network input {net.widths[0]}"
        )
    outputs = [X]
    raws = [X]
    cur = X
    for l in range(1, net.num_layers + 1):
        act = expit(cur @ net.weights[l - 1] + net.biases[l - 1])
        scale = mask.scale_rows(l) if mask is not None else None
        out = act * scale if scale is not None else act
        raws.append(act)
        outputs.append(out)
        cur = out
    return ForwardTrace(outputs, raws)


def _half_forward(net, x, depth):
    arr = _as_matrix(x)
    if arr.shape[1] != net.widths[0]:
        raise ShapeError(
            f"input width {arr.shape[1]} does not match network input {net.widths[0]}"
        )
    cur = arr
    for l in range(1, depth + 1):
        cur = expit(cur @ net.weights[l - 1] + net.biases[l - 1])
    return cur


def encode(net, x):
    """Middle-layer code of the (corrupted) content rows; 1-D in, 1-D out."""
    one_row = np.ndim(x) == 1 and not sp.issparse(x) and not hasattr(x, "matrix")
    out = _half_forward(net, x, net.middle)
    return out[0] if one_row else out


def reconstruct(net, x):
    """Final-layer reconstruction of the (corrupted) content rows."""
    one_row = np.ndim(x) == 1 and not sp.issparse(x) and not hasattr(x, "matrix")
    out = _half_forward(net, x, net.num_layers)
    return out[0] if one_row else out


def gradients(net, x0, xc, item_factors, lambda_v, lambda_n, lambda_w,
              mask=None, batch_size=None):
    """Exact gradients of the joint objective w.r.t. every weight and bias.

    The objective terms seen by the network are
    ``-lambda_w/2 (|W|^2 + |b|^2) - lambda_v/2 sum_j |code_j - v_j|^2
    - lambda_n/2 sum_j |recon_j - xc_j|^2``;
    the returned arrays are ascent directions for that sum.  Items are
    processed in fixed batch order so the reduction is deterministic.

    Args:
        x0: corrupted input rows (items x vocab), sparse or dense.
        xc: clean content rows of the same shape.
        item_factors: items x code_size matrix the codes are pulled toward.
        mask: optional DropoutMask drawn for all rows of x0.
        batch_size: row-batch size bounding peak memory; None = one batch.
    """
    X0 = _as_matrix(x0)
    Xc = _as_matrix(xc)
    V = np.asarray(item_factors, dtype=np.float64)
    L = net.num_layers
    mid = net.middle
    num_rows = X0.shape[0]
    if X0.shape[1] != net.widths[0]:
        raise ShapeError(f"corrupted input width {X0.shape[1]} != {net.widths[0]}")
    if Xc.shape != (num_rows, net.widths[L]):
        raise ShapeError(f"clean content shape {Xc.shape} != {(num_rows, net.widths[L])}")
    if V.shape != (num_rows, net.code_size):
        raise ShapeError(f"item factor shape {V.shape} != {(num_rows, net.code_size)}")

    grads_w = [-lambda_w * w for w in net.weights]
    grads_b = [-lambda_w * b for b in net.biases]
    step = num_rows if batch_size is None else int(batch_size)
    for start in range(0, num_rows, max(step, 1)):
        rows = slice(start, min(start + step, num_rows))
        batch_scales = None
        if mask is not None and mask.scales:
            batch_scales = {l: arr[rows] for l, arr in mask.scales.items()}
        trace = _forward_batch(net, X0[rows], batch_scales)
        outs, raws = trace.layer_outputs, trace.raw_outputs
        for l in range(1, L + 1):
            if not np.isfinite(raws[l]).all():
                raise NumericError(f"non-finite activation at layer {l}")
        g = lambda_n * (outs[L] - _dense_rows(Xc, rows))
        for l in range(L, 0, -1):
            if l == mid:
                g = g + lambda_v * (outs[l] - V[rows])
            if batch_scales is not None and l in batch_scales:
                g = g * batch_scales[l]
            delta = g * raws[l] * (1.0 - raws[l])
            grads_w[l - 1] -= outs[l - 1].T @ delta
            grads_b[l - 1] -= delta.sum(axis=0)
            if l > 1:
                g = delta @ net.weights[l - 1].T
    return grads_w, grads_b


def _forward_batch(net, X, batch_scales):
    outputs = [X]
    raws = [X]
    cur = X
    for l in range(1, net.num_layers + 1):
        act = expit(cur @ net.weights[l - 1] + net.biases[l - 1])
        out = act * batch_scales[l] if batch_scales and l in batch_scales else act
        raws.append(act)
        outputs.append(out)
        cur = out
    return ForwardTrace(outputs, raws)


def coupling_residuals(net, x0, xc, item_factors, batch_size=None):
    """Squared-residual sums (sum |code - v|^2, sum |recon - xc|^2) over all
    rows, evaluated without dropout."""
    X0 = _as_matrix(x0)
    Xc = _as_matrix(xc)
    V = np.asarray(item_factors, dtype=np.float64)
    num_rows = X0.shape[0]
    step = num_rows if batch_size is None else int(batch_size)
    enc_ss = 0.0
    rec_ss = 0.0
    for start in range(0, num_rows, max(step, 1)):
        rows = slice(start, min(start + step, num_rows))
        trace = _forward_batch(net, X0[rows], None)
        enc_diff = trace.layer_outputs[net.middle] - V[rows]
        rec_diff = trace.layer_outputs[net.num_layers] - _dense_rows(Xc, rows)
        enc_ss += float(np.sum(enc_diff * enc_diff))
        rec_ss += float(np.sum(rec_diff * rec_diff))
    return enc_ss, rec_ss


def save_network(net, path, config=None):
    """Checkpoint the network, optionally embedding the hyperparameter
    config text; the round trip through load_network is bit-exact."""
    arrays = {}
    for l in range(1, net.num_layers + 1):
        arrays[f"weight_{l}"] = net.weights[l - 1]
        arrays[f"bias_{l}"] = net.biases[l - 1]
    if config is not None:
        arrays["config"] = np.asarray(str(config))
    np.savez(path, widths=np.asarray(net.widths, dtype=np.int64), **arrays)


def load_network(path):
    with np.load(path) as blob:
        widths = blob["widths"]
        L = len(widths) - 1
        weights = [blob[f"weight_{l}"] for l in range(1, L + 1)]
        biases = [blob[f"bias_{l}"] for l in range(1, L + 1)]
    return SdaeNetwork(weights, biases)


def load_network_config(path):
    """Config text embedded in a checkpoint, or None if absent."""
    with np.load(path) as blob:
        if "config" in blob.files:
            return str(blob["config"])
    return None
