"""Differentiable building blocks with hand-written gradients.

Everything runs in float64 on plain numpy arrays. Layers cache whatever their
backward pass needs during forward; gradients accumulate into ParamTensor.grad
until zero_grad(). There is no graph machinery: each layer knows its own
backward, and models chain them explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, TrainingError


class ParamTensor:
    """Named trainable array plus its gradient accumulator (always same shape)."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value) -> None:
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(self.value)):
            raise ConfigError(f"non-finite initial value for parameter {name!r}")
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"ParamTensor({self.name!r}, shape={self.value.shape})"


class SequenceBatch:
    """Right-padded batch of frame sequences with a validity mask.

    data: batch x frames x dims float64. mask: batch x frames bool, True for
    real frames. Padded slots are forced to zero on construction so downstream
    ops may rely on it.
    """

    def __init__(self, data, mask) -> None:
        data = np.asarray(data, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        if data.ndim != 3:
            raise ConfigError(f"sequence data must be 3-D, got shape {data.shape}")
        if mask.shape != data.shape[:2]:
            raise ConfigError(
                f"mask shape {mask.shape} does not match data shape {data.shape[:2]}"
            )
        if data.shape[1] == 0 or not mask.any(axis=1).all():
            raise DomainError("every batch row needs at least one real frame")
        if not np.all(np.isfinite(data[mask])):
            raise DomainError("non-finite values in sequence batch")
        self.data = np.where(mask[:, :, None], data, 0.0)
        self.mask = mask

    @classmethod
    def from_sequences(cls, seqs: list[np.ndarray]) -> "SequenceBatch":
        """Stack variable-length (frames x dims) arrays, right-padding with zeros."""
        if not seqs:
            raise DomainError("empty sequence list")
        dims = {s.shape[1] for s in seqs}
        if len(dims) != 1:
            raise ConfigError(f"inconsistent feature dims in batch: {sorted(dims)}")
        tmax = max(s.shape[0] for s in seqs)
        data = np.zeros((len(seqs), tmax, dims.pop()), dtype=np.float64)
        mask = np.zeros((len(seqs), tmax), dtype=bool)
        for i, s in enumerate(seqs):
            data[i, : s.shape[0]] = s
            mask[i, : s.shape[0]] = True
        return cls(data, mask)

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    @property
    def frames(self) -> int:
        return self.data.shape[1]

    @property
    def dims(self) -> int:
        return self.data.shape[2]


def glorot_uniform(rng: np.random.Generator, dout: int, din: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (din + dout))
    return rng.uniform(-limit, limit, size=(dout, din))


def affine_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """y = x W^T + b for a single vector or a batch of row vectors."""
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if weight.ndim != 2 or bias.shape != (weight.shape[0],):
        raise ConfigError(
            f"affine shapes inconsistent: W {weight.shape}, b {bias.shape}"
        )
    if x.shape[-1] != weight.shape[1]:
        raise ConfigError(
            f"affine input dim {x.shape[-1]} does not match W {weight.shape}"
        )
    return x @ weight.T + bias


def affine_backward(
    dy: np.ndarray, x: np.ndarray, weight: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dx, dW, db) of a scalar through y = x W^T + b."""
    dy2 = np.atleast_2d(np.asarray(dy, dtype=np.float64))
    x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    dx = dy2 @ weight
    dw = dy2.T @ x2
    db = dy2.sum(axis=0)
    if np.ndim(dy) == 1:
        dx = dx[0]
    return dx, dw, db


class Affine:
    """Affine layer owning its parameters; forward caches the input for backward."""

    def __init__(self, name: str, din: int, dout: int, rng: np.random.Generator) -> None:
        self.weight = ParamTensor(f"{name}.W", glorot_uniform(rng, dout, din))
        self.bias = ParamTensor(f"{name}.b", np.zeros(dout))
        self._x: np.ndarray | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return affine_forward(x, self.weight.value, self.bias.value)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise TrainingError(f"backward before forward on {self.weight.name}")
        dx, dw, db = affine_backward(dy, self._x, self.weight.value)
        self.weight.grad += dw
        self.bias.grad += db
        return dx

    @property
    def params(self) -> list[ParamTensor]:
        return [self.weight, self.bias]


def masked_mean_pool(batch: SequenceBatch) -> np.ndarray:
    """Per-row arithmetic mean over real frames only."""
    counts = batch.mask.sum(axis=1)
    if np.any(counts == 0):
        raise DomainError("all-masked row in mean pooling")
    return batch.data.sum(axis=1) / counts[:, None]


def masked_mean_pool_backward(dpooled: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Spread pooled gradient uniformly over each row's real frames."""
    counts = mask.sum(axis=1)
    return dpooled[:, None, :] * (mask[:, :, None] / counts[:, None, None])


class MaskedMeanPool:
    """Stateless pooling with the mask cached between forward and backward."""

    def __init__(self) -> None:
        self._mask: np.ndarray | None = None

    def forward(self, batch: SequenceBatch) -> np.ndarray:
        self._mask = batch.mask
        return masked_mean_pool(batch)

    def backward(self, dpooled: np.ndarray) -> np.ndarray:
        return masked_mean_pool_backward(dpooled, self._mask)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class _LstmDirection:
    """One direction of the BLSTM: stacked-gate weights, standard cell.

    Gate order along the 4H axis is [input, forget, output, candidate].
    Masked frames leave hidden and cell state untouched and emit zeros, so
    after the full sweep the state equals the state at the boundary frame
    (last real frame when run forward, first real frame when run reversed).
    """

    def __init__(self, name: str, input_dim: int, hidden: int, rng: np.random.Generator) -> None:
        h = hidden
        self.hidden = h
        bias = np.zeros(4 * h)
        bias[h : 2 * h] = 1.0  # forget gate opens by default
        self.w = ParamTensor(f"{name}.W", glorot_uniform(rng, 4 * h, input_dim))
        self.u = ParamTensor(f"{name}.U", glorot_uniform(rng, 4 * h, h))
        self.b = ParamTensor(f"{name}.b", bias)
        self._cache: list[tuple] | None = None
        self._steps: list[int] | None = None

    @property
    def params(self) -> list[ParamTensor]:
        return [self.w, self.u, self.b]

    def forward(
        self, data: np.ndarray, mask: np.ndarray, reverse: bool
    ) -> tuple[np.ndarray, np.ndarray]:
        nb, nt, _ = data.shape
        h = self.hidden
        outputs = np.zeros((nb, nt, h))
        hs = np.zeros((nb, h))
        cs = np.zeros((nb, h))
        steps = list(range(nt - 1, -1, -1)) if reverse else list(range(nt))
        # input projection has no recurrence; hoist it out of the time loop
        xw = (data.reshape(nb * nt, -1) @ self.w.value.T).reshape(nb, nt, 4 * h)
        cache = []
        for t in steps:
            m = mask[:, t].astype(np.float64)[:, None]
            a = xw[:, t, :] + hs @ self.u.value.T + self.b.value
            gi = _sigmoid(a[:, 0 * h : 1 * h])
            gf = _sigmoid(a[:, 1 * h : 2 * h])
            go = _sigmoid(a[:, 2 * h : 3 * h])
            gc = np.tanh(a[:, 3 * h : 4 * h])
            c_cand = gf * cs + gi * gc
            tanh_c = np.tanh(c_cand)
            h_cand = go * tanh_c
            cache.append((hs, cs, gi, gf, go, gc, tanh_c, m))
            cs = m * c_cand + (1.0 - m) * cs
            hs = m * h_cand + (1.0 - m) * hs
            outputs[:, t, :] = m * h_cand
        self._cache = cache
        self._steps = steps
        return outputs, hs

    def backward(
        self, d_outputs: np.ndarray, d_final: np.ndarray, data: np.ndarray
    ) -> np.ndarray:
        if self._cache is None:
            raise TrainingError(f"backward before forward on {self.w.name}")
        nb, nt, _ = data.shape
        h = self.hidden
        da_all = np.zeros((nb, nt, 4 * h))
        h_prev_all = np.zeros((nb, nt, h))
        dh_carry = d_final.copy()
        dc_carry = np.zeros_like(d_final)
        for t, step in zip(reversed(self._steps), reversed(self._cache)):
            h_prev, c_prev, gi, gf, go, gc, tanh_c, m = step
            dh_total = d_outputs[:, t, :] * m + dh_carry
            dh_cand = dh_total * m
            dh_pass = dh_total * (1.0 - m)
            dc_cand = dc_carry * m
            dc_pass = dc_carry * (1.0 - m)

            d_go = dh_cand * tanh_c
            dc_cand = dc_cand + dh_cand * go * (1.0 - tanh_c * tanh_c)
            d_gf = dc_cand * c_prev
            d_gi = dc_cand * gc
            d_gc = dc_cand * gi
            dc_prev = dc_cand * gf

            da = np.concatenate(
                [
                    d_gi * gi * (1.0 - gi),
                    d_gf * gf * (1.0 - gf),
                    d_go * go * (1.0 - go),
                    d_gc * (1.0 - gc * gc),
                ],
                axis=1,
            )
            da_all[:, t, :] = da
            h_prev_all[:, t, :] = h_prev
            dh_carry = da @ self.u.value + dh_pass
            dc_carry = dc_prev + dc_pass
        # parameter/input gradients have no recurrence; accumulate in bulk
        da_flat = da_all.reshape(nb * nt, 4 * h)
        self.w.grad += da_flat.T @ data.reshape(nb * nt, -1)
        self.u.grad += da_flat.T @ h_prev_all.reshape(nb * nt, h)
        self.b.grad += da_flat.sum(axis=0)
        return (da_flat @ self.w.value).reshape(nb, nt, -1)


class Blstm:
    """Single-layer bidirectional LSTM over a masked sequence batch.

    outputs[:, t, :] concatenates the forward hidden at t with the backward
    hidden at t; final concatenates the forward state at the last real frame
    with the backward state at the first real frame.
    """

    def __init__(self, name: str, input_dim: int, hidden: int, rng: np.random.Generator) -> None:
        if hidden <= 0:
            raise ConfigError(f"BLSTM hidden size must be positive, got {hidden}")
        self.hidden = hidden
        self.input_dim = input_dim
        self.fw = _LstmDirection(f"{name}.fw", input_dim, hidden, rng)
        self.bw = _LstmDirection(f"{name}.bw", input_dim, hidden, rng)
        self._data: np.ndarray | None = None

    @property
    def params(self) -> list[ParamTensor]:
        return self.fw.params + self.bw.params

    def forward(self, batch: SequenceBatch) -> tuple[np.ndarray, np.ndarray]:
        if batch.dims != self.input_dim:
            raise ConfigError(
                f"BLSTM expects input dim {self.input_dim}, got {batch.dims}"
            )
        self._data = batch.data
        out_f, final_f = self.fw.forward(batch.data, batch.mask, reverse=False)
        out_b, final_b = self.bw.forward(batch.data, batch.mask, reverse=True)
        outputs = np.concatenate([out_f, out_b], axis=2)
        final = np.concatenate([final_f, final_b], axis=1)
        return outputs, final

    def backward(self, d_outputs: np.ndarray, d_final: np.ndarray) -> np.ndarray:
        h = self.hidden
        dx_f = self.fw.backward(d_outputs[:, :, :h], d_final[:, :h], self._data)
        dx_b = self.bw.backward(d_outputs[:, :, h:], d_final[:, h:], self._data)
        return dx_f + dx_b


def blstm_forward(seq: SequenceBatch, blstm: Blstm) -> tuple[np.ndarray, np.ndarray]:
    """Functional entry point; see Blstm.forward."""
    return blstm.forward(seq)


@dataclass
class AdamState:
    """Bias-corrected Adam state; moment buffers are keyed by parameter name."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")


def adam_step(params: list[ParamTensor], state: AdamState) -> None:
    """One in-place Adam update: w -= lr * m_hat / (sqrt(v_hat) + eps)."""
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient for parameter {p.name!r}")
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for p in params:
        m = state.m.setdefault(p.name, np.zeros_like(p.value))
        v = state.v.setdefault(p.name, np.zeros_like(p.value))
        m *= state.beta1
        m += (1.0 - state.beta1) * p.grad
        v *= state.beta2
        v += (1.0 - state.beta2) * p.grad**2
        p.value -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class GradCheckReport:
    """Per-parameter max relative error between analytic and central differences."""

    per_param: dict[str, float]
    max_rel_err: float


def _rel_err(analytic: float, numeric: float) -> float:
    # the 1e-4 floor turns the comparison absolute for gradients below the
    # central-difference resolution (rounding noise ~ |f| * eps / h)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-4)


def grad_check(
    loss_fn, params: list[ParamTensor], h: float = 1e-5
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    loss_fn() must zero nothing itself: it runs a fresh forward+backward,
    accumulating gradients into the given params, and returns the scalar loss.
    Gradients are zeroed here before the analytic call.
    """
    if not params:
        return GradCheckReport(per_param={}, max_rel_err=0.0)
    for p in params:
        p.zero_grad()
    loss_fn()
    analytic = {p.name: p.grad.copy() for p in params}
    per_param: dict[str, float] = {}
    worst = 0.0
    for p in params:
        flat = p.value.reshape(-1)
        aflat = analytic[p.name].reshape(-1)
        p_worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn()
            flat[i] = orig - h
            lm = loss_fn()
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * h)
            p_worst = max(p_worst, _rel_err(aflat[i], numeric))
        per_param[p.name] = p_worst
        worst = max(worst, p_worst)
    # restore analytic grads so the caller sees a consistent state
    for p in params:
        p.grad[...] = analytic[p.name]
    return GradCheckReport(per_param=per_param, max_rel_err=worst)
