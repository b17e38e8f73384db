"""Toy gradual-pruning training: LSTM/CIFG with projection on a delayed-echo task.

Gradients come from hand-written backpropagation through time (layer norm is
off for this path). Pruned blocks keep their retained values and receive no
updates; every mask update re-ranks all blocks, so a pruned block can return.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import TypedDict

import numpy as np

from .cells import CellKind, CifgWeights, LayerNormParams, LstmWeights, init_cell, run_sequence, sigmoid
from .errors import NumericError, ValidationError
from .pruning import PruningGroup, PruningSchedule, PruningState, apply_mask, mask_gradients, sparsity_at_step

logger = logging.getLogger(__name__)

Params = dict[str, np.ndarray]

MAX_DEMO_HIDDEN = 64
DEMO_SCHEDULE = PruningSchedule(0.0, 0.5, start_step=50, end_step=250, mask_update_interval=25)


class TrainLogEntry(TypedDict):
    step: int
    loss: float
    target: float
    sparsity: float
    churn: int
    recovered: int


@dataclass(frozen=True)
class TrainConfig:
    kind: CellKind = CellKind.LSTM
    layers: int = 1
    input_width: int = 4
    hidden: int = 16
    projection: int = 8
    delay: int = 2
    sequence_length: int = 12
    steps: int = 400
    learning_rate: float = 0.01
    block: tuple[int, int] = (4, 1)
    schedule: PruningSchedule = DEMO_SCHEDULE
    prunable_matrices: tuple[str, ...] = ("W", "R")
    seed: int = 0

    def __post_init__(self) -> None:
        errors = []
        if self.kind not in (CellKind.LSTM, CellKind.CIFG):
            errors.append(f"training supports lstm and cifg cells, got {self.kind}")
        else:
            object.__setattr__(self, "kind", CellKind(self.kind))
        if self.layers not in (1, 2):
            errors.append(f"layers must be 1 or 2, got {self.layers}")
        if not 0 < self.hidden <= MAX_DEMO_HIDDEN:
            errors.append(f"hidden must be in 1..{MAX_DEMO_HIDDEN}, got {self.hidden}")
        if min(self.input_width, self.projection, self.sequence_length, self.steps) < 1:
            errors.append("input_width, projection, sequence_length and steps must be positive")
        if not 0 <= self.delay < self.sequence_length:
            errors.append(f"delay must be in [0, sequence_length), got {self.delay}")
        br, bc = self.block
        if self.hidden % br or self.input_width % bc or self.projection % bc:
            errors.append(f"block {br}x{bc} does not tile the {self.hidden}-row gate matrices")
        if not self.learning_rate > 0:
            errors.append("learning_rate must be positive")
        if not self.prunable_matrices or not set(self.prunable_matrices) <= {"W", "R"}:
            errors.append(f"prunable_matrices must pick from W and R, got {list(self.prunable_matrices)}")
        if errors:
            raise ValidationError("invalid training config", errors)

    @property
    def gates(self) -> tuple[str, ...]:
        return LstmWeights.gates if self.kind is CellKind.LSTM else CifgWeights.gates

    def layer_input(self, layer: int) -> int:
        return self.input_width if layer == 0 else self.projection

    def prunable(self) -> list[str]:
        return [f"{n}.{m}_{g}" for n in range(self.layers) for m in self.prunable_matrices for g in self.gates]


def delayed_echo(rng: np.random.Generator, length: int, width: int, delay: int) -> tuple[np.ndarray, np.ndarray]:
    """Random inputs and the same inputs shifted `delay` steps later (zeros before)."""
    xs = rng.standard_normal((length, width))
    ys = np.zeros_like(xs)
    ys[delay:] = xs[: length - delay]
    return xs, ys


def init_params(config: TrainConfig, rng: np.random.Generator) -> Params:
    params: Params = {}
    for n in range(config.layers):
        cell = init_cell(
            config.kind, rng, config.layer_input(n), config.hidden, config.projection,
            layer_norm_enabled=False, dtype=np.float64,
        )
        for g in config.gates:
            params[f"{n}.W_{g}"] = cell.W[g]
            params[f"{n}.R_{g}"] = cell.R[g]  # type: ignore[union-attr]
            params[f"{n}.b_{g}"] = cell.b[g]
        params[f"{n}.W_proj"] = cell.W_proj  # type: ignore[assignment]
    limit = 1.0 / np.sqrt(config.projection)
    params["readout.V"] = rng.uniform(-limit, limit, (config.input_width, config.projection))
    params["readout.b"] = np.zeros(config.input_width)
    return params


def to_cells(params: Params, config: TrainConfig) -> list[LstmWeights | CifgWeights]:
    """The trained stack as ordinary float cells."""
    cls = LstmWeights if config.kind is CellKind.LSTM else CifgWeights
    return [
        cls(
            W={g: params[f"{n}.W_{g}"] for g in config.gates},
            R={g: params[f"{n}.R_{g}"] for g in config.gates},
            b={g: params[f"{n}.b_{g}"] for g in config.gates},
            ln={g: LayerNormParams.identity(config.hidden, enabled=False) for g in config.gates},
            W_proj=params[f"{n}.W_proj"],
        )
        for n in range(config.layers)
    ]


def predict(params: Params, config: TrainConfig, xs: np.ndarray) -> np.ndarray:
    """Readout of the stack run through the regular cell step functions."""
    hs: list[np.ndarray] = list(xs)
    for cell in to_cells(params, config):
        hs = run_sequence(cell, hs)
    return np.array([params["readout.V"] @ h + params["readout.b"] for h in hs])


def _layer_forward(p: Params, n: int, config: TrainConfig, xs: list[np.ndarray]) -> tuple[list[np.ndarray], list[dict]]:
    lstm = config.kind is CellKind.LSTM
    c = np.zeros(config.hidden)
    h = np.zeros(config.projection)
    hs, cache = [], []
    for x in xs:
        a = {g: p[f"{n}.W_{g}"] @ x + p[f"{n}.R_{g}"] @ h + p[f"{n}.b_{g}"] for g in config.gates}
        f = sigmoid(a["f"])
        i = sigmoid(a["i"]) if lstm else 1.0 - f
        z = np.tanh(a["z"])
        o = sigmoid(a["o"])
        c_new = i * z + f * c
        tc = np.tanh(c_new)
        m = o * tc
        cache.append(dict(x=x, h_prev=h, c_prev=c, i=i, f=f, z=z, o=o, tc=tc, m=m))
        c, h = c_new, p[f"{n}.W_proj"] @ m
        hs.append(h)
    return hs, cache


def _layer_backward(
    p: Params, n: int, config: TrainConfig, cache: list[dict], dhs: list[np.ndarray], grads: Params
) -> list[np.ndarray]:
    lstm = config.kind is CellKind.LSTM
    dh_next = np.zeros(config.projection)
    dc_next = np.zeros(config.hidden)
    dxs: list[np.ndarray] = [np.empty(0)] * len(cache)
    for t in reversed(range(len(cache))):
        k = cache[t]
        dh = dhs[t] + dh_next
        grads[f"{n}.W_proj"] += np.outer(dh, k["m"])
        dm = p[f"{n}.W_proj"].T @ dh
        do = dm * k["tc"]
        dc = dc_next + dm * k["o"] * (1.0 - k["tc"] ** 2)
        di = dc * k["z"]
        df = dc * k["c_prev"]
        da = {
            "z": dc * k["i"] * (1.0 - k["z"] ** 2),
            "o": do * k["o"] * (1.0 - k["o"]),
        }
        if lstm:
            da["i"] = di * k["i"] * (1.0 - k["i"])
        else:
            df = df - di  # i = 1 - f
        da["f"] = df * k["f"] * (1.0 - k["f"])
        dx = np.zeros_like(k["x"])
        dh_prev = np.zeros(config.projection)
        for g in config.gates:
            grads[f"{n}.W_{g}"] += np.outer(da[g], k["x"])
            grads[f"{n}.R_{g}"] += np.outer(da[g], k["h_prev"])
            grads[f"{n}.b_{g}"] += da[g]
            dx += p[f"{n}.W_{g}"].T @ da[g]
            dh_prev += p[f"{n}.R_{g}"].T @ da[g]
        dc_next = dc * k["f"]
        dh_next = dh_prev
        dxs[t] = dx
    return dxs


def loss_and_grads(params: Params, config: TrainConfig, xs: np.ndarray, ys: np.ndarray) -> tuple[float, Params]:
    """Mean over steps of 0.5 * ||readout - target||^2, with exact gradients."""
    caches = []
    hs: list[np.ndarray] = list(xs)
    for n in range(config.layers):
        hs, cache = _layer_forward(params, n, config, hs)
        caches.append(cache)
    steps = len(xs)
    V, b = params["readout.V"], params["readout.b"]
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    loss = 0.0
    dhs = []
    for h, y in zip(hs, ys):
        err = V @ h + b - y
        loss += 0.5 * float(err @ err) / steps
        dy = err / steps
        grads["readout.V"] += np.outer(dy, h)
        grads["readout.b"] += dy
        dhs.append(V.T @ dy)
    for n in reversed(range(config.layers)):
        dhs = _layer_backward(params, n, config, caches[n], dhs, grads)
    return loss, grads


def gradient_check(
    params: Params,
    config: TrainConfig,
    xs: np.ndarray,
    ys: np.ndarray,
    *,
    eps: float = 1e-6,
    samples: int = 8,
    seed: int = 0,
) -> float:
    """Largest relative gap between analytic and central-difference gradients over sampled entries."""
    rng = np.random.default_rng(seed)
    _, grads = loss_and_grads(params, config, xs, ys)
    worst = 0.0
    for name, value in params.items():
        for idx in rng.integers(0, value.size, size=min(samples, value.size)):
            shifted = {k: v.copy() for k, v in params.items()}
            flat = shifted[name].reshape(-1)
            flat[idx] += eps
            up, _ = loss_and_grads(shifted, config, xs, ys)
            flat[idx] -= 2 * eps
            down, _ = loss_and_grads(shifted, config, xs, ys)
            numeric = (up - down) / (2 * eps)
            analytic = float(grads[name].reshape(-1)[idx])
            worst = max(worst, abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-5))
    return worst


class Adam:
    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: Params = {}
        self.v: Params = {}
        self.t = 0

    def updates(self, grads: Params) -> Params:
        self.t += 1
        out = {}
        for k, g in grads.items():
            m = self.m[k] = self.beta1 * self.m.get(k, np.zeros_like(g)) + (1 - self.beta1) * g
            v = self.v[k] = self.beta2 * self.v.get(k, np.zeros_like(g)) + (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1**self.t)
            v_hat = v / (1 - self.beta2**self.t)
            out[k] = -self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)
        return out


@dataclass(frozen=True)
class TrainResult:
    log: list[TrainLogEntry]
    group: PruningGroup
    params: Params

    @property
    def final_sparsity(self) -> float:
        return self.group.sparsity


def _flips(before: PruningGroup, after: PruningGroup) -> tuple[int, int]:
    churn = recovered = 0
    for k, s in after.states.items():
        old = before.states[k].mask
        churn += int(np.count_nonzero(old != s.mask))
        recovered += int(np.count_nonzero(~old & s.mask))
    return churn, recovered


def effective_params(params: Params, group: PruningGroup) -> Params:
    out = dict(params)
    for k, s in group.states.items():
        out[k] = apply_mask(s)
    return out


def demo_train(config: TrainConfig) -> TrainResult:
    """Train with gradual block pruning; one log entry per mask update step."""
    rng = np.random.default_rng(config.seed)
    params = init_params(config, rng)
    group = PruningGroup(
        "cells",
        {k: PruningState.start(params.pop(k), config.schedule, config.block) for k in config.prunable()},
    )
    adam = Adam(config.learning_rate)
    log: list[TrainLogEntry] = []
    interval = config.schedule.mask_update_interval
    for t in range(config.steps):
        updated = group.maybe_update(t)
        churn, recovered = _flips(group, updated)
        group = updated
        xs, ys = delayed_echo(rng, config.sequence_length, config.input_width, config.delay)
        loss, grads = loss_and_grads(effective_params(params, group), config, xs, ys)
        if not np.isfinite(loss):
            raise NumericError("training loss diverged", step=t, hint="lower the learning rate")
        steps = adam.updates(grads)
        for k in params:
            params[k] = params[k] + steps[k]
        group = replace(
            group,
            states={
                k: replace(s, retained=s.retained + mask_gradients(steps[k], s.mask, s.block_shape))
                for k, s in group.states.items()
            },
        )
        if t % interval == 0:
            entry = TrainLogEntry(
                step=t,
                loss=loss,
                target=sparsity_at_step(config.schedule, t),
                sparsity=group.sparsity,
                churn=churn,
                recovered=recovered,
            )
            log.append(entry)
            logger.info(
                "step %d: loss %.5f, sparsity %.3f (target %.3f), %d flips, %d recovered",
                t, loss, entry["sparsity"], entry["target"], churn, recovered,
            )
    return TrainResult(log, group, effective_params(params, group))
