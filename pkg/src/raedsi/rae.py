"""Recurrent autoencoder (LSTM encoder, stacked-LSTM decoder) in numpy.

Forward and backward passes are written out by hand. Gate weights of a
layer are stored fused as one ``(4 N_h, N_h + N_d)`` matrix in gate order
``[forget, input, output, candidate]``; the individual ``W_f``, ``W_i``,
``W_o``, ``W_x`` matrices are views into it. Columns ``[:N_h]`` act on the
previous hidden state and ``[N_h:]`` on the input, matching ``[h_{t-1}, x_t]``.

Internally sequences are laid out time-major, ``(N_t, batch, features)``.
Data vectors use the package layout ``(batch, N_QoI, N_t)`` at the API.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.special import expit

from .core import DataVector, Ensemble, SchemaError, select_hm

log = logging.getLogger(__name__)

N_DECODER_LAYERS = 3


class TrainingDivergedError(ArithmeticError):
    """Loss or gradients became non-finite during training."""


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------


@dataclass
class LstmLayerWeights:
    """Weights of one LSTM layer, shared by every time step."""

    W: np.ndarray  # (4 n_h, n_h + n_d)
    b: np.ndarray  # (4 n_h,)

    def __post_init__(self):
        if self.W.ndim != 2 or self.W.shape[0] % 4:
            raise SchemaError(f"fused LSTM weight has bad shape {self.W.shape}")
        if self.b.shape != (self.W.shape[0],):
            raise SchemaError("LSTM bias shape mismatch")

    @classmethod
    def from_gates(cls, W_f, W_i, W_o, W_x, b_f, b_i, b_o, b_c) -> "LstmLayerWeights":
        return cls(np.vstack([W_f, W_i, W_o, W_x]).astype(float),
                   np.concatenate([b_f, b_i, b_o, b_c]).astype(float))

    @property
    def n_h(self) -> int:
        return self.W.shape[0] // 4

    @property
    def n_d(self) -> int:
        return self.W.shape[1] - self.n_h

    def _gate(self, k):
        h = self.n_h
        return self.W[k * h:(k + 1) * h]

    def _bias(self, k):
        h = self.n_h
        return self.b[k * h:(k + 1) * h]

    W_f = property(lambda self: self._gate(0))
    W_i = property(lambda self: self._gate(1))
    W_o = property(lambda self: self._gate(2))
    W_x = property(lambda self: self._gate(3))
    b_f = property(lambda self: self._bias(0))
    b_i = property(lambda self: self._bias(1))
    b_o = property(lambda self: self._bias(2))
    b_c = property(lambda self: self._bias(3))


@dataclass
class RaeWeights:
    """All trainable parameters plus per-quantity normalisation bounds.

    ``params`` maps names to arrays::

        enc.W, enc.b                 encoder LSTM      (N_d = N_QoI)
        enc_dense.W, enc_dense.b     (N_l, N_t N_h), (N_l,)
        dec0.W .. dec2.W, .b         decoder LSTMs     (N_d = N_l, N_h, N_h)
        dec_dense.W, dec_dense.b     (N_QoI, N_h), (N_QoI,)
    """

    params: dict
    n_qoi: int
    n_t: int
    n_h: int
    n_l: int
    norm_min: np.ndarray = field(default=None)
    norm_max: np.ndarray = field(default=None)

    def __post_init__(self):
        q, t, h, l = self.n_qoi, self.n_t, self.n_h, self.n_l
        expected = {
            "enc.W": (4 * h, h + q), "enc.b": (4 * h,),
            "enc_dense.W": (l, t * h), "enc_dense.b": (l,),
            "dec0.W": (4 * h, h + l), "dec0.b": (4 * h,),
            "dec_dense.W": (q, h), "dec_dense.b": (q,),
        }
        for k in range(1, N_DECODER_LAYERS):
            expected[f"dec{k}.W"] = (4 * h, 2 * h)
            expected[f"dec{k}.b"] = (4 * h,)
        if set(self.params) != set(expected):
            raise SchemaError(f"parameter names {sorted(self.params)} != {sorted(expected)}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise SchemaError(f"{name} has shape {self.params[name].shape}, expected {shape}")
        if self.norm_min is None:
            self.norm_min = -np.ones(q)
            self.norm_max = np.ones(q)
        self.norm_min = np.asarray(self.norm_min, dtype=float)
        self.norm_max = np.asarray(self.norm_max, dtype=float)
        if np.any(self.norm_max <= self.norm_min):
            raise SchemaError("normalisation max must exceed min for every quantity")

    def layer(self, name: str) -> LstmLayerWeights:
        return LstmLayerWeights(self.params[f"{name}.W"], self.params[f"{name}.b"])

    @property
    def encoder(self) -> LstmLayerWeights:
        return self.layer("enc")

    @property
    def decoder(self) -> list[LstmLayerWeights]:
        return [self.layer(f"dec{k}") for k in range(N_DECODER_LAYERS)]

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def names(self) -> list[str]:
        return sorted(self.params)

    def copy(self) -> "RaeWeights":
        return RaeWeights({k: v.copy() for k, v in self.params.items()}, self.n_qoi, self.n_t,
                          self.n_h, self.n_l, self.norm_min.copy(), self.norm_max.copy())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in self.names()])

    def with_flat(self, vec: np.ndarray) -> "RaeWeights":
        out = self.copy()
        pos = 0
        for k in self.names():
            n = out.params[k].size
            out.params[k] = np.asarray(vec[pos:pos + n], dtype=float).reshape(out.params[k].shape)
            pos += n
        return out


def init_weights(n_qoi: int, n_t: int, n_h: int, n_l: int, rng: np.random.Generator) -> RaeWeights:
    """Matrices uniform in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``; biases zero."""

    def uni(rows, fan_in):
        lim = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-lim, lim, size=(rows, fan_in))

    p = {
        "enc.W": uni(4 * n_h, n_h + n_qoi),
        "enc.b": np.zeros(4 * n_h),
        "enc_dense.W": uni(n_l, n_t * n_h),
        "enc_dense.b": np.zeros(n_l),
        "dec0.W": uni(4 * n_h, n_h + n_l),
        "dec0.b": np.zeros(4 * n_h),
    }
    for k in range(1, N_DECODER_LAYERS):
        p[f"dec{k}.W"] = uni(4 * n_h, 2 * n_h)
        p[f"dec{k}.b"] = np.zeros(4 * n_h)
    p["dec_dense.W"] = uni(n_qoi, n_h)
    p["dec_dense.b"] = np.zeros(n_qoi)
    return RaeWeights(p, n_qoi, n_t, n_h, n_l)


# ---------------------------------------------------------------------------
# LSTM cell and layer
# ---------------------------------------------------------------------------


def lstm_cell_forward(w: LstmLayerWeights, x_t, h_prev, c_prev):
    """One LSTM step for a single vector or a batch of row vectors.

    Returns ``(h_t, c_t, cache)`` where ``cache`` holds the gate activations,
    the concatenated input ``[h_prev, x_t]`` and ``c_prev``.
    """
    x_t, h_prev, c_prev = (np.asarray(a, dtype=float) for a in (x_t, h_prev, c_prev))
    h = w.n_h
    if x_t.shape[-1] != w.n_d or h_prev.shape[-1] != h or c_prev.shape[-1] != h:
        raise SchemaError("LSTM cell input shapes do not match the weights")
    z = np.concatenate([h_prev, x_t], axis=-1)
    a = z @ w.W.T + w.b
    f = expit(a[..., :h])
    i = expit(a[..., h:2 * h])
    o = expit(a[..., 2 * h:3 * h])
    cbar = np.tanh(a[..., 3 * h:])
    c_t = f * c_prev + i * cbar
    h_t = o * np.tanh(c_t)
    cache = {"z": z, "f": f, "i": i, "o": o, "cbar": cbar, "c_prev": c_prev, "c": c_t}
    return h_t, c_t, cache


@numba.njit(cache=True)
def _backward_loop(dhs, W_h, gates, cs, tcs, dA):
    T, B, H = dhs.shape
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        for n in range(B):
            for k in range(H):
                f = gates[t, n, k]
                i = gates[t, n, H + k]
                o = gates[t, n, 2 * H + k]
                cbar = gates[t, n, 3 * H + k]
                tc = tcs[t, n, k]
                dh = dhs[t, n, k] + dh_next[n, k]
                dc = dc_next[n, k] + dh * o * (1.0 - tc * tc)
                dA[t, n, k] = dc * cs[t, n, k] * f * (1.0 - f)
                dA[t, n, H + k] = dc * cbar * i * (1.0 - i)
                dA[t, n, 2 * H + k] = dh * tc * o * (1.0 - o)
                dA[t, n, 3 * H + k] = dc * i * (1.0 - cbar * cbar)
                dc_next[n, k] = dc * f
        dh_next = np.dot(dA[t], W_h)


def _lstm_layer_forward(W, b, xs=None, x_const=None):
    """Run one layer over time.

    Exactly one of ``xs`` (``(T, B, D)``) or ``x_const`` (``(B, D)`` fed at
    every step, as ``(x_const, T)``) is given. Returns ``(hs, cache)``.
    """
    H = W.shape[0] // 4
    # sigmoid(a) = 0.5 + 0.5 tanh(a / 2): one tanh call covers all four gates
    scale = np.ones(4 * H)
    scale[:3 * H] = 0.5
    Ws = W * scale[:, None]
    bs = b * scale
    W_h, W_in = Ws[:, :H], Ws[:, H:]
    if xs is not None:
        T, B, _ = xs.shape
        ax = (xs.reshape(T * B, -1) @ W_in.T).reshape(T, B, 4 * H)
        ax += bs
    else:
        x_const, T = x_const
        B = x_const.shape[0]
        ax = np.broadcast_to(x_const @ W_in.T + bs, (T, B, 4 * H))
    gates = np.empty((T, B, 4 * H))
    cs = np.zeros((T + 1, B, H))
    hs = np.zeros((T + 1, B, H))
    tcs = np.empty((T, B, H))
    W_hT = np.ascontiguousarray(W_h.T)
    for t in range(T):
        g = gates[t]
        np.dot(hs[t], W_hT, out=g)
        g += ax[t]
        np.tanh(g, out=g)
        s3 = g[:, :3 * H]
        s3 *= 0.5
        s3 += 0.5
        c = cs[t + 1]
        np.multiply(g[:, :H], cs[t], out=c)
        c += g[:, H:2 * H] * g[:, 3 * H:]
        np.tanh(c, out=tcs[t])
        np.multiply(g[:, 2 * H:3 * H], tcs[t], out=hs[t + 1])
    cache = (gates, cs, hs, tcs, xs, x_const)
    return hs[1:], cache


def _lstm_layer_backward(W, cache, dhs):
    """Backprop through one layer. ``dhs`` is ``(T, B, H)``.

    Returns ``(dW, db, dx)``; ``dx`` is ``(T, B, D)`` for sequence input or
    ``(B, D)`` (summed over time) for repeated constant input.
    """
    gates, cs, hs, tcs, xs, x_const = cache
    T, B, H = dhs.shape
    W_h, W_in = W[:, :H], W[:, H:]
    dA = np.empty((T, B, 4 * H))
    _backward_loop(np.ascontiguousarray(dhs), np.ascontiguousarray(W_h), gates, cs, tcs, dA)
    dA2 = dA.reshape(T * B, 4 * H)
    dW = np.empty_like(W)
    dW[:, :H] = dA2.T @ hs[:-1].reshape(T * B, H)
    db = dA2.sum(axis=0)
    if xs is not None:
        dW[:, H:] = dA2.T @ xs.reshape(T * B, -1)
        dx = (dA2 @ W_in).reshape(T, B, -1)
    else:
        dsum = dA.sum(axis=0)
        dW[:, H:] = dsum.T @ x_const
        dx = dsum @ W_in
    return dW, db, dx


# ---------------------------------------------------------------------------
# Encoder / decoder / loss
# ---------------------------------------------------------------------------


def _as_batch(d_norm, n_qoi, n_t):
    d = np.asarray(d_norm, dtype=float)
    single = d.ndim == 2
    if single:
        d = d[None]
    if d.shape[1:] != (n_qoi, n_t):
        raise SchemaError(f"normalised data shape {d.shape[1:]} != {(n_qoi, n_t)}")
    return d, single


def _encode(w: RaeWeights, d):
    """``d``: ``(B, N_QoI, N_t)`` normalised. Returns ``(xi, cache)``."""
    p = w.params
    xs = np.ascontiguousarray(d.transpose(2, 0, 1))
    hs, c_lstm = _lstm_layer_forward(p["enc.W"], p["enc.b"], xs=xs)
    T, B, H = hs.shape
    flat = hs.transpose(1, 0, 2).reshape(B, T * H)
    xi = flat @ p["enc_dense.W"].T + p["enc_dense.b"]
    return xi, (c_lstm, flat)


def _decode(w: RaeWeights, xi):
    """``xi``: ``(B, N_l)``. Returns ``(y, cache)`` with ``y`` as ``(N_t, B, N_QoI)``."""
    p = w.params
    caches = []
    hs, c = _lstm_layer_forward(p["dec0.W"], p["dec0.b"], x_const=(xi, w.n_t))
    caches.append(c)
    for k in range(1, N_DECODER_LAYERS):
        hs, c = _lstm_layer_forward(p[f"dec{k}.W"], p[f"dec{k}.b"], xs=hs)
        caches.append(c)
    y = np.tanh(hs @ p["dec_dense.W"].T + p["dec_dense.b"])
    return y, (caches, hs)


def encoder_forward(w: RaeWeights, d_norm) -> np.ndarray:
    """Latent vector(s) for normalised data of shape ``(N_QoI, N_t)`` or a batch."""
    d, single = _as_batch(d_norm, w.n_qoi, w.n_t)
    xi, _ = _encode(w, d)
    return xi[0] if single else xi


def decoder_forward(w: RaeWeights, xi) -> np.ndarray:
    """Normalised reconstruction ``(N_QoI, N_t)`` (or a batch) in ``(-1, 1)``."""
    xi = np.asarray(xi, dtype=float)
    single = xi.ndim == 1
    xi = np.atleast_2d(xi)
    if xi.shape[1] != w.n_l:
        raise SchemaError(f"latent length {xi.shape[1]} != {w.n_l}")
    y, _ = _decode(w, xi)
    out = y.transpose(1, 2, 0)
    return out[0] if single else out


def rae_loss(w: RaeWeights, batch) -> float:
    """Mean over members of the squared L2 reconstruction error (normalised units)."""
    d, _ = _as_batch(batch, w.n_qoi, w.n_t)
    xi, _ = _encode(w, d)
    y, _ = _decode(w, xi)
    r = y.transpose(1, 2, 0) - d
    return float(np.sum(r * r) / d.shape[0])


def rae_backprop(w: RaeWeights, batch):
    """Exact gradient of :func:`rae_loss`. Returns ``(loss, grads)``."""
    p = w.params
    d, _ = _as_batch(batch, w.n_qoi, w.n_t)
    B = d.shape[0]
    xi, (c_enc, flat) = _encode(w, d)
    y, (c_dec, h_last) = _decode(w, xi)
    target = d.transpose(2, 0, 1)
    r = y - target
    loss = float(np.sum(r * r) / B)

    g = {}
    dpre = (2.0 / B) * r * (1.0 - y * y)  # (T, B, Q)
    T, _, Q = dpre.shape
    H = w.n_h
    g["dec_dense.W"] = dpre.reshape(T * B, Q).T @ h_last.reshape(T * B, H)
    g["dec_dense.b"] = dpre.sum(axis=(0, 1))
    dh = dpre @ p["dec_dense.W"]
    for k in range(N_DECODER_LAYERS - 1, -1, -1):
        dW, db, dh = _lstm_layer_backward(p[f"dec{k}.W"], c_dec[k], dh)
        g[f"dec{k}.W"], g[f"dec{k}.b"] = dW, db
    dxi = dh  # summed over the repeated time steps
    g["enc_dense.W"] = dxi.T @ flat
    g["enc_dense.b"] = dxi.sum(axis=0)
    dflat = dxi @ p["enc_dense.W"]
    dhs = np.ascontiguousarray(dflat.reshape(B, T, H).transpose(1, 0, 2))
    dW, db, _ = _lstm_layer_backward(p["enc.W"], c_enc, dhs)
    g["enc.W"], g["enc.b"] = dW, db
    return loss, g


# ---------------------------------------------------------------------------
# ADAM
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict):
    """Bias-corrected ADAM update, applied in place. Returns ``(state, params)``."""
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for k, g in grads.items():
        if k not in state.m:
            state.m[k] = np.zeros_like(g)
            state.v[k] = np.zeros_like(g)
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[k] -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state, params


def clip_by_global_norm(grads: dict, max_norm: float) -> float:
    norm = float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# Normalisation, training and the parameterisation wrapper
# ---------------------------------------------------------------------------


def normalization_bounds(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-quantity min / max over members and time.

    A constant quantity gets a symmetric unit-free margin so the map stays
    invertible; its normalised value is then 0.
    """
    lo = values.min(axis=(0, 2))
    hi = values.max(axis=(0, 2))
    flat = hi - lo <= 1e-12 * np.maximum(1.0, np.abs(hi))
    margin = np.maximum(np.abs(hi), 1.0)
    lo = np.where(flat, lo - margin, lo)
    hi = np.where(flat, hi + margin, hi)
    return lo, hi


def normalize(values, lo, hi):
    return 2.0 * (values - lo[:, None]) / (hi - lo)[:, None] - 1.0


def denormalize(values, lo, hi):
    return lo[:, None] + 0.5 * (values + 1.0) * (hi - lo)[:, None]


@dataclass
class RaeConfig:
    n_hidden: int = 50
    n_latent: int = 31
    epochs: int = 500
    batch_size: int = 32
    lr: float = 1e-3
    clip_norm: float = 5.0

    def validate(self):
        for name in ("n_hidden", "n_latent", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


@dataclass
class TrainResult:
    weights: RaeWeights
    loss_history: list


def train_rae(e: Ensemble, config: RaeConfig, rng: np.random.Generator,
              weights: RaeWeights | None = None) -> TrainResult:
    """Min-max normalise per quantity, then shuffled mini-batch ADAM."""
    config.validate()
    if e.n_r < config.batch_size:
        raise ValueError(f"ensemble size {e.n_r} < batch size {config.batch_size}")
    lo, hi = normalization_bounds(e.values)
    x = normalize(e.values, lo, hi)
    if weights is None:
        weights = init_weights(e.schema.n_qoi, e.schema.n_t, config.n_hidden,
                               config.n_latent, rng)
    weights.norm_min, weights.norm_max = lo, hi
    state = AdamState(lr=config.lr)
    history = []
    n = e.n_r
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = rae_backprop(weights, x[idx])
            gnorm = clip_by_global_norm(grads, config.clip_norm)
            if not (np.isfinite(loss) and np.isfinite(gnorm)):
                raise TrainingDivergedError(
                    f"non-finite loss/gradient at epoch {epoch}, batch starting {start}: "
                    f"loss={loss}, grad_norm={gnorm}"
                )
            adam_step(state, weights.params, grads)
            total += loss * len(idx)
        history.append(total / n)
        if epoch % 50 == 0 or epoch == config.epochs - 1:
            log.debug("epoch %d loss %.6g", epoch, history[-1])
    return TrainResult(weights, history)


class RaeParameterization:
    """Encode / decode physical data vectors through trained RAE weights."""

    tag = "RAE"

    def __init__(self, weights: RaeWeights, schema=None):
        self.weights = weights
        self.schema = schema

    @property
    def n_latent(self) -> int:
        return self.weights.n_l

    def _values(self, d):
        if isinstance(d, (DataVector, Ensemble)):
            if self.schema is not None and d.schema != self.schema:
                raise SchemaError("data schema does not match the trained RAE")
            return d.values
        return np.asarray(d, dtype=float)

    def encode(self, d) -> np.ndarray:
        v = self._values(d)
        w = self.weights
        return encoder_forward(w, normalize(v, w.norm_min, w.norm_max))

    def decode(self, xi) -> np.ndarray:
        w = self.weights
        return denormalize(decoder_forward(w, xi), w.norm_min, w.norm_max)

    def decode_selected(self, xi, obs) -> np.ndarray:
        return select_hm(self.decode(np.atleast_2d(xi)), obs)


def rae_encode(w: RaeWeights, d) -> np.ndarray:
    return RaeParameterization(w).encode(d)


def rae_decode(w: RaeWeights, xi, schema=None):
    """Physical-unit reconstruction; a :class:`DataVector` when ``schema`` is given."""
    out = RaeParameterization(w).decode(xi)
    if schema is not None and out.ndim == 2:
        return DataVector(schema, out)
    return out
