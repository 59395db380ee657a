"""Feed-forward LIF network with a spike-rate readout and manual BPTT.

Each hidden block is ``linear -> batch norm -> LIF -> dropout``; the readout
averages the last block's spikes over time, then applies
``batch norm -> dropout -> linear``. Arrays inside the network are
time-major, ``(T, B, n)``; public entry points take ``(B, T, F)`` inputs.

LIF recurrence (u_0 = s_0 = 0, t = 1..T)::

    u_t = alpha * u_{t-1} + drive_t - v_th * s_{t-1}
    s_t = 1[u_t >= v_th]

Forward modes:

``train``
    dropout active, batch norm on batch statistics (unless frozen).
``eval``
    no dropout, batch norm on running statistics.
``soft``
    as ``train`` but the spike indicator is replaced in the forward pass by
    ``clip((u - v_th) / (2 h) + 1/2, 0, 1)`` (``h`` the boxcar half-width),
    which makes the loss piecewise smooth; only used to check gradients.

Flat parameter layout (``LAYOUT_VERSION``): for each hidden layer ``l`` in
order ``hidden{l}.w`` (n_out x n_in), ``hidden{l}.bn_gamma``,
``hidden{l}.bn_beta``; then ``readout.bn_gamma``, ``readout.bn_beta``,
``readout.w`` (C x n_last), ``readout.b``. Matrices are row-major.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np

from .core_math import NumericalError, RngStream, log_softmax, softmax

LAYOUT_VERSION = "snnflat-v1"

Mode = Literal["train", "eval", "soft"]
_MODES = ("train", "eval", "soft")


@dataclass(frozen=True)
class LifLayerConfig:
    n_in: int
    n_out: int
    alpha: float = 0.9
    v_th: float = 1.0
    dropout_p: float = 0.0
    boxcar_halfwidth: float = 0.5
    boxcar_gain: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not self.v_th > 0:
            raise ValueError("v_th must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")
        if not (self.boxcar_halfwidth > 0 and self.boxcar_gain > 0):
            raise ValueError("boxcar half-width and gain must be positive")


@dataclass(frozen=True)
class Architecture:
    """Network dimensions and fixed (non-trained) hyperparameters."""

    n_features: int
    num_classes: int
    hidden: tuple[int, ...] = (128, 128)
    alpha: tuple[float, ...] = (0.9, 0.9)
    v_th: float = 1.0
    dropout_p: float = 0.0
    readout_dropout_p: float | None = None
    boxcar_halfwidth: float = 0.5
    boxcar_gain: float = 0.5
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        alpha = tuple(float(a) for a in np.broadcast_to(self.alpha, len(self.hidden)))
        object.__setattr__(self, "alpha", alpha)
        if self.readout_dropout_p is None:
            object.__setattr__(self, "readout_dropout_p", self.dropout_p)
        if not self.hidden:
            raise ValueError("need at least one hidden layer")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if not 0.0 <= self.readout_dropout_p < 1.0:
            raise ValueError("readout_dropout_p must lie in [0, 1)")
        self.layers()  # validates the per-layer settings

    def layers(self) -> list[LifLayerConfig]:
        sizes = (self.n_features,) + self.hidden
        return [
            LifLayerConfig(sizes[i], sizes[i + 1], self.alpha[i], self.v_th, self.dropout_p,
                           self.boxcar_halfwidth, self.boxcar_gain)
            for i in range(len(self.hidden))
        ]

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        entries = []
        for i, cfg in enumerate(self.layers()):
            entries += [(f"hidden{i}.w", (cfg.n_out, cfg.n_in)),
                        (f"hidden{i}.bn_gamma", (cfg.n_out,)),
                        (f"hidden{i}.bn_beta", (cfg.n_out,))]
        n_last = self.hidden[-1]
        entries += [("readout.bn_gamma", (n_last,)), ("readout.bn_beta", (n_last,)),
                    ("readout.w", (self.num_classes, n_last)), ("readout.b", (self.num_classes,))]
        return entries

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.layout())

    def to_dict(self) -> dict:
        return {
            "n_features": self.n_features, "num_classes": self.num_classes,
            "hidden": list(self.hidden), "alpha": list(self.alpha), "v_th": self.v_th,
            "dropout_p": self.dropout_p, "readout_dropout_p": self.readout_dropout_p,
            "boxcar_halfwidth": self.boxcar_halfwidth, "boxcar_gain": self.boxcar_gain,
            "bn_momentum": self.bn_momentum, "bn_eps": self.bn_eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        d = dict(d)
        d["hidden"] = tuple(d["hidden"])
        d["alpha"] = tuple(d["alpha"])
        return cls(**d)


class NetworkParams(dict):
    """Ordered mapping of parameter name to array, following the flat layout."""

    def copy(self) -> "NetworkParams":
        return NetworkParams({k: v.copy() for k, v in self.items()})

    def __eq__(self, other) -> bool:
        if not isinstance(other, dict) or list(self) != list(other):
            return False
        return all(np.array_equal(self[k], other[k]) for k in self)

    __hash__ = None


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm site; gamma/beta live in the params."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    frozen: bool = False

    def copy(self) -> "BatchNormState":
        return replace(self, running_mean=self.running_mean.copy(), running_var=self.running_var.copy())


def init_bn_states(arch: Architecture, frozen: bool = False) -> list[BatchNormState]:
    """One state per hidden block plus one for the readout, in layer order."""
    sizes = list(arch.hidden) + [arch.hidden[-1]]
    return [BatchNormState(np.zeros(n), np.ones(n), arch.bn_momentum, arch.bn_eps, frozen) for n in sizes]


def init_params(arch: Architecture, rng: RngStream) -> NetworkParams:
    """Fan-based uniform weights in +-sqrt(6/(n_in+n_out)); gamma=1, beta=0, bias=0."""
    params = NetworkParams()
    for name, shape in arch.layout():
        if name.endswith(".w"):
            n_out, n_in = shape
            bound = np.sqrt(6.0 / (n_in + n_out))
            u = rng.split(name).uniform(shape)
            params[name] = (2.0 * u - 1.0) * bound
        elif name.endswith("bn_gamma"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return params


def flatten(params: NetworkParams) -> np.ndarray:
    return np.concatenate([np.ravel(v) for v in params.values()])


def unflatten(vector, arch: Architecture) -> NetworkParams:
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != (arch.num_params,):
        raise ValueError(f"expected a flat vector of length {arch.num_params}, got shape {vector.shape}")
    params = NetworkParams()
    offset = 0
    for name, shape in arch.layout():
        size = int(np.prod(shape))
        params[name] = vector[offset:offset + size].reshape(shape).copy()
        offset += size
    return params


# ---------------------------------------------------------------------------
# LIF dynamics
# ---------------------------------------------------------------------------


def boxcar_surrogate(u, config: LifLayerConfig):
    """Surrogate spike derivative: ``gain`` on the closed window ``|u - v_th| <= h``."""
    inside = np.abs(np.asarray(u) - config.v_th) <= config.boxcar_halfwidth
    return np.where(inside, config.boxcar_gain, 0.0)


def soft_spike(u, config: LifLayerConfig):
    return np.clip((u - config.v_th) / (2.0 * config.boxcar_halfwidth) + 0.5, 0.0, 1.0)


def soft_spike_grad(u, config: LifLayerConfig):
    x = (u - config.v_th) / (2.0 * config.boxcar_halfwidth) + 0.5
    return np.where((x > 0.0) & (x < 1.0), 1.0 / (2.0 * config.boxcar_halfwidth), 0.0)


def lif_forward(config: LifLayerConfig, drive: np.ndarray, soft: bool = False):
    """Run the membrane recurrence over the leading (time) axis of ``drive``.

    Returns ``(spikes, membranes)`` with the shape of ``drive``. Hard spikes
    are exactly 0.0 or 1.0.
    """
    drive = np.asarray(drive, dtype=np.float64)
    membranes = np.empty_like(drive)
    spikes = np.empty_like(drive)
    u = np.zeros(drive.shape[1:])
    s = np.zeros(drive.shape[1:])
    alpha, v_th = config.alpha, config.v_th
    for t in range(drive.shape[0]):
        u = alpha * u + drive[t] - v_th * s
        s = soft_spike(u, config) if soft else (u >= v_th).astype(np.float64)
        membranes[t] = u
        spikes[t] = s
    return spikes, membranes


def lif_backward(config: LifLayerConfig, membranes: np.ndarray, grad_spikes: np.ndarray,
                 soft: bool = False) -> np.ndarray:
    """Backpropagate ``dL/ds_t`` through the recurrence to ``dL/d drive_t``.

    The reset term ``-v_th * s_{t-1}`` is differentiated like any other path.
    """
    dsdu = soft_spike_grad(membranes, config) if soft else boxcar_surrogate(membranes, config)
    grad_drive = np.empty_like(grad_spikes)
    gu_next = np.zeros(grad_spikes.shape[1:])
    alpha, v_th = config.alpha, config.v_th
    for t in range(grad_spikes.shape[0] - 1, -1, -1):
        gs = grad_spikes[t] - v_th * gu_next
        gu = gs * dsdu[t] + alpha * gu_next
        grad_drive[t] = gu
        gu_next = gu
    return grad_drive


# ---------------------------------------------------------------------------
# Batch norm and dropout
# ---------------------------------------------------------------------------


@dataclass
class _BnCache:
    xhat: np.ndarray
    invstd: np.ndarray
    batch_stats: bool
    mean: np.ndarray
    var: np.ndarray
    count: int


def _bn_forward(x2d, gamma, beta, state: BatchNormState, use_batch: bool):
    if use_batch:
        mean = x2d.mean(axis=0)
        var = x2d.var(axis=0)
    else:
        mean, var = state.running_mean, state.running_var
    invstd = 1.0 / np.sqrt(var + state.eps)
    xhat = (x2d - mean) * invstd
    return gamma * xhat + beta, _BnCache(xhat, invstd, use_batch, mean, var, x2d.shape[0])


def _bn_backward(dy, gamma, cache: _BnCache):
    dgamma = np.sum(dy * cache.xhat, axis=0)
    dbeta = np.sum(dy, axis=0)
    dxhat = dy * gamma
    if cache.batch_stats:
        m = cache.count
        dx = (cache.invstd / m) * (m * dxhat - dxhat.sum(axis=0)
                                  - cache.xhat * np.sum(dxhat * cache.xhat, axis=0))
    else:
        dx = dxhat * cache.invstd
    return dx, dgamma, dbeta


def _dropout_mask(shape, p: float, rng: RngStream | None):
    """Inverted-dropout mask (kept entries scaled by 1/(1-p)), or None."""
    if p <= 0.0:
        return None
    if rng is None:
        raise ValueError("dropout in training mode requires an RngStream")
    keep = 1.0 - p
    return (rng.uniform(shape) <= keep) / keep


# ---------------------------------------------------------------------------
# Network forward / backward
# ---------------------------------------------------------------------------


@dataclass
class LayerTrace:
    inputs: np.ndarray  # (T, B, n_in), after the previous block's dropout
    drive: np.ndarray  # (T, B, n) pre-norm linear output
    bn: _BnCache
    membranes: np.ndarray
    spikes: np.ndarray  # raw spikes, before dropout
    mask: np.ndarray | None


@dataclass
class ForwardTrace:
    """Everything the backward pass needs, plus inspection helpers."""

    mode: str
    layers: list[LayerTrace] = field(default_factory=list)
    rate: np.ndarray | None = None  # (B, n_last) spike count / T of raw spikes
    readout_input: np.ndarray | None = None  # time average of dropped-out spikes
    readout_bn: _BnCache | None = None
    readout_mask: np.ndarray | None = None
    features: np.ndarray | None = None  # (B, n_last) input to the final linear map
    logits: np.ndarray | None = None

    def bn_batch_stats(self) -> list[tuple[np.ndarray, np.ndarray, int] | None]:
        """``(mean, var, count)`` per batch-norm site, None where running stats were used."""
        caches = [lt.bn for lt in self.layers] + [self.readout_bn]
        return [(c.mean, c.var, c.count) if c.batch_stats else None for c in caches]


def _check_inputs(arch: Architecture, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] == 0 or x.shape[2] != arch.n_features:
        raise ValueError(f"expected input of shape (B>0, T, {arch.n_features}), got {x.shape}")
    return x


def network_forward(arch: Architecture, params: NetworkParams, bn_states: list[BatchNormState],
                    x, mode: Mode = "eval", rng: RngStream | None = None):
    """Forward pass on a batch ``x`` of shape (B, T, F); returns ``(logits, trace)``."""
    if mode not in _MODES:
        raise ValueError(f"unknown mode {mode!r}")
    x = _check_inputs(arch, x)
    training = mode != "eval"
    soft = mode == "soft"
    B, T, _ = x.shape
    trace = ForwardTrace(mode)

    h = np.ascontiguousarray(x.transpose(1, 0, 2))
    for i, cfg in enumerate(arch.layers()):
        state = bn_states[i]
        drive = h @ params[f"hidden{i}.w"].T
        y, cache = _bn_forward(drive.reshape(T * B, cfg.n_out), params[f"hidden{i}.bn_gamma"],
                               params[f"hidden{i}.bn_beta"], state, training and not state.frozen)
        spikes, membranes = lif_forward(cfg, y.reshape(T, B, cfg.n_out), soft=soft)
        mask = _dropout_mask(spikes.shape, cfg.dropout_p, rng.split("dropout", i) if rng else None) \
            if training else None
        trace.layers.append(LayerTrace(h, drive, cache, membranes, spikes, mask))
        h = spikes * mask if mask is not None else spikes

    trace.rate = trace.layers[-1].spikes.mean(axis=0)
    trace.readout_input = h.mean(axis=0)
    state = bn_states[-1]
    r, trace.readout_bn = _bn_forward(trace.readout_input, params["readout.bn_gamma"],
                                      params["readout.bn_beta"], state, training and not state.frozen)
    if training:
        trace.readout_mask = _dropout_mask(r.shape, arch.readout_dropout_p,
                                           rng.split("dropout", "readout") if rng else None)
    if trace.readout_mask is not None:
        r = r * trace.readout_mask
    trace.features = r
    trace.logits = r @ params["readout.w"].T + params["readout.b"]
    return trace.logits, trace


def network_backward(arch: Architecture, params: NetworkParams, trace: ForwardTrace,
                     grad_logits: np.ndarray) -> NetworkParams:
    """Reverse-mode pass through readout, time average, LIF (BPTT), BN and linear maps."""
    soft = trace.mode == "soft"
    grads = NetworkParams({name: None for name, _ in arch.layout()})
    grads["readout.w"] = grad_logits.T @ trace.features
    grads["readout.b"] = grad_logits.sum(axis=0)
    g = grad_logits @ params["readout.w"]
    if trace.readout_mask is not None:
        g = g * trace.readout_mask
    g, grads["readout.bn_gamma"], grads["readout.bn_beta"] = _bn_backward(
        g, params["readout.bn_gamma"], trace.readout_bn)

    layers = arch.layers()
    T = trace.layers[0].spikes.shape[0]
    grad_spikes = np.broadcast_to(g / T, (T,) + g.shape)
    for i in range(len(layers) - 1, -1, -1):
        cfg, lt = layers[i], trace.layers[i]
        if lt.mask is not None:
            grad_spikes = grad_spikes * lt.mask
        gy = lif_backward(cfg, lt.membranes, grad_spikes, soft=soft)
        Tn, B, n = gy.shape
        gdrive, grads[f"hidden{i}.bn_gamma"], grads[f"hidden{i}.bn_beta"] = _bn_backward(
            gy.reshape(Tn * B, n), params[f"hidden{i}.bn_gamma"], lt.bn)
        inputs2d = lt.inputs.reshape(Tn * B, cfg.n_in)
        grads[f"hidden{i}.w"] = gdrive.T @ inputs2d
        if i > 0:
            grad_spikes = (gdrive @ params[f"hidden{i}.w"]).reshape(Tn, B, cfg.n_in)
    return grads


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-example cross-entropy ``-log softmax(z)_y``."""
    logp = log_softmax(logits, axis=1)
    return -logp[np.arange(len(labels)), labels]


def loss_and_gradients(arch: Architecture, params: NetworkParams, bn_states: list[BatchNormState],
                       x, labels, mode: Mode = "train", rng: RngStream | None = None):
    """Mean cross-entropy and its flat (surrogate) gradient.

    Returns ``(loss, grad, trace)``; ``grad`` follows the flat layout.
    """
    labels = np.asarray(labels)
    logits, trace = network_forward(arch, params, bn_states, x, mode, rng)
    if labels.shape != (logits.shape[0],):
        raise ValueError("labels must have one entry per example")
    if not np.isfinite(logits).all():
        raise NumericalError("non-finite logits in forward pass")
    loss = float(cross_entropy(logits, labels).mean())
    grad_logits = softmax(logits, axis=1)
    grad_logits[np.arange(len(labels)), labels] -= 1.0
    grad_logits /= len(labels)
    grads = network_backward(arch, params, trace, grad_logits)
    return loss, flatten(grads), trace


def update_running_stats(bn_states: list[BatchNormState], trace: ForwardTrace) -> list[BatchNormState]:
    """Momentum update of running statistics from a train-mode trace.

    Frozen states (and sites that used running statistics) are returned
    unchanged. Running variance uses the unbiased batch estimate.
    """
    out = []
    for state, stats in zip(bn_states, trace.bn_batch_stats()):
        if state.frozen or stats is None:
            out.append(state)
            continue
        mean, var, count = stats
        unbiased = var * count / max(count - 1, 1)
        m = state.momentum
        out.append(replace(state,
                           running_mean=(1 - m) * state.running_mean + m * mean,
                           running_var=(1 - m) * state.running_var + m * unbiased))
    return out


def predict_proba(arch: Architecture, params: NetworkParams, bn_states: list[BatchNormState],
                  x, chunk: int = 256) -> np.ndarray:
    """Eval-mode class probabilities, evaluated in chunks of examples."""
    x = _check_inputs(arch, x)
    out = [softmax(network_forward(arch, params, bn_states, x[i:i + chunk], "eval")[0], axis=1)
           for i in range(0, x.shape[0], chunk)]
    return np.concatenate(out, axis=0)


def predict_log_proba(arch: Architecture, params: NetworkParams, bn_states: list[BatchNormState],
                      x, chunk: int = 256) -> np.ndarray:
    x = _check_inputs(arch, x)
    out = [log_softmax(network_forward(arch, params, bn_states, x[i:i + chunk], "eval")[0], axis=1)
           for i in range(0, x.shape[0], chunk)]
    return np.concatenate(out, axis=0)


def calibrate_bn(arch: Architecture, params: NetworkParams, bn_states: list[BatchNormState],
                 x, chunk: int = 128) -> list[BatchNormState]:
    """Set running statistics to the exact dataset statistics of each site.

    Sites are calibrated in layer order, each using the already calibrated
    statistics of the sites before it (no dropout). The returned states keep
    the ``frozen`` flag of the inputs. Variances are population variances.
    """
    x = _check_inputs(arch, x)
    states = [st.copy() for st in bn_states]
    layers = arch.layers()
    for site in range(len(layers) + 1):
        total = sq = None
        count = 0
        for i in range(0, x.shape[0], chunk):
            h = np.ascontiguousarray(x[i:i + chunk].transpose(1, 0, 2))
            for j, cfg in enumerate(layers):
                drive = h @ params[f"hidden{j}.w"].T
                flat = drive.reshape(-1, cfg.n_out)
                if j == site:
                    break
                y, _ = _bn_forward(flat, params[f"hidden{j}.bn_gamma"], params[f"hidden{j}.bn_beta"],
                                    states[j], use_batch=False)
                h, _ = lif_forward(cfg, y.reshape(drive.shape))
            else:
                flat = h.mean(axis=0)
            total = flat.sum(axis=0) if total is None else total + flat.sum(axis=0)
            sq = (flat * flat).sum(axis=0) if sq is None else sq + (flat * flat).sum(axis=0)
            count += flat.shape[0]
        mean = total / count
        states[site] = replace(states[site], running_mean=mean,
                               running_var=np.maximum(sq / count - mean * mean, 0.0))
    return states


def eval_logits_multi(arch: Architecture, thetas, bn_states: list[BatchNormState], x,
                      block_bytes: int = 16 << 20) -> np.ndarray:
    """Eval-mode logits for several flat parameter vectors on one batch.

    ``thetas`` is (S, D); returns (S, B, C). Equivalent to ``S`` calls of
    :func:`network_forward` in eval mode, vectorised over the sample axis
    (in blocks bounded by ``block_bytes`` of activations).
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    if thetas.shape[1] != arch.num_params:
        raise ValueError(f"expected parameter vectors of length {arch.num_params}")
    x = _check_inputs(arch, x)
    B, T, _ = x.shape
    per_sample = T * B * max(arch.hidden) * 8 * 3
    block = max(1, block_bytes // per_sample)
    return np.concatenate([_eval_logits_block(arch, thetas[i:i + block], bn_states, x)
                           for i in range(0, thetas.shape[0], block)], axis=0)


def _eval_logits_block(arch, thetas, bn_states, x):
    S = thetas.shape[0]
    B, T, F = x.shape
    views, offset = {}, 0
    for name, shape in arch.layout():
        size = int(np.prod(shape))
        views[name] = thetas[:, offset:offset + size].reshape((S,) + shape)
        offset += size

    h = x.transpose(1, 0, 2).reshape(1, T * B, F)
    for i, cfg in enumerate(arch.layers()):
        st = bn_states[i]
        scale = views[f"hidden{i}.bn_gamma"] / np.sqrt(st.running_var + st.eps)
        shift = views[f"hidden{i}.bn_beta"] - st.running_mean * scale
        drive = np.matmul(h, views[f"hidden{i}.w"].transpose(0, 2, 1))
        drive *= scale[:, None, :]
        drive += shift[:, None, :]
        drive = np.ascontiguousarray(drive.reshape(S, T, B, cfg.n_out).transpose(1, 0, 2, 3))
        spikes = np.empty(drive.shape, dtype=bool)
        u = np.zeros((S, B, cfg.n_out))
        s = np.zeros((S, B, cfg.n_out), dtype=bool)
        for t in range(T):
            # same rounding as alpha * u + drive - v_th * s
            u *= cfg.alpha
            u += drive[t]
            np.subtract(u, cfg.v_th, out=u, where=s)
            np.greater_equal(u, cfg.v_th, out=s)
            spikes[t] = s
        h = spikes.transpose(1, 0, 2, 3).reshape(S, T * B, cfg.n_out).astype(np.float64)

    rate = h.reshape(S, T, B, -1).mean(axis=1)
    st = bn_states[-1]
    r = (rate - st.running_mean) / np.sqrt(st.running_var + st.eps)
    r = r * views["readout.bn_gamma"][:, None, :] + views["readout.bn_beta"][:, None, :]
    return np.matmul(r, views["readout.w"].transpose(0, 2, 1)) + views["readout.b"][:, None, :]
