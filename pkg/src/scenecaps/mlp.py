"""Small deterministic dense regression networks.

Hand-rolled on numpy so that training is bit-reproducible from a seed on a
given platform, which the persistence and acceptance contracts rely on.
Hidden layers use tanh, the output layer is affine, and the only optimizer
is plain stochastic gradient descent.  Dropout operates on whole input
groups (one group per feeding capsule) to simulate occlusion.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 32
    learning_rate: float = 0.05
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs <= 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise ValueError("epochs, batch size and learning rate must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout probability must lie in [0, 1)")


class RegressionModel:
    """Dense tanh network defined by its layer widths and a seed."""

    def __init__(self, widths: Sequence[int], seed: int = 0) -> None:
        widths = [int(w) for w in widths]
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ValueError(f"invalid layer widths {widths}")
        self.widths = widths
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    @property
    def output_dim(self) -> int:
        return self.widths[-1]

    def copy(self) -> "RegressionModel":
        dup = RegressionModel.__new__(RegressionModel)
        dup.widths = list(self.widths)
        dup.seed = self.seed
        dup.weights = [w.copy() for w in self.weights]
        dup.biases = [b.copy() for b in self.biases]
        return dup

    # ------------------------------------------------------------------
    # forward / backward

    def _forward(self, x: np.ndarray) -> list[np.ndarray]:
        """Activations per layer for a batch; last entry is the output."""
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = z if i == last else np.tanh(z)
            acts.append(h)
        return acts

    def infer(self, x) -> np.ndarray:
        """Deterministic forward pass; accepts a single vector or a batch."""
        arr = np.asarray(x, dtype=float)
        single = arr.ndim == 1
        if single:
            arr = arr[None, :]
        if arr.shape[1] != self.input_dim:
            raise ValueError(f"expected input dim {self.input_dim}, got {arr.shape[1]}")
        out = self._forward(arr)[-1]
        return out[0] if single else out

    def _gradients(self, x: np.ndarray, y: np.ndarray):
        """Mean-squared-error gradients for a batch."""
        acts = self._forward(x)
        n = x.shape[0]
        delta = 2.0 * (acts[-1] - y) / (n * y.shape[1])
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.biases)
        for i in range(len(self.weights) - 1, -1, -1):
            grads_w[i] = acts[i].T @ delta
            grads_b[i] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.weights[i].T) * (1.0 - acts[i] ** 2)
        return grads_w, grads_b

    def loss(self, x: np.ndarray, y: np.ndarray) -> float:
        pred = self._forward(np.asarray(x, dtype=float))[-1]
        return float(np.mean((pred - np.asarray(y, dtype=float)) ** 2))

    # ------------------------------------------------------------------
    # persistence

    def to_json(self) -> dict:
        return {
            "v": 1,
            "widths": self.widths,
            "seed": self.seed,
            "activation": "tanh",
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_json(cls, data: dict) -> "RegressionModel":
        if data.get("v") != 1:
            raise ValueError(f"unsupported model version {data.get('v')!r}")
        model = cls(data["widths"], data["seed"])
        for i, (fan_in, fan_out) in enumerate(zip(model.widths[:-1], model.widths[1:])):
            model.weights[i] = np.array(data["weights"][i]).reshape(fan_in, fan_out)
            model.biases[i] = np.array(data["biases"][i])
        return model


def route_widths(input_dim: int, output_dim: int, layers: int = 4) -> list[int]:
    """Layer widths for capsule routes: hidden width twice the larger side."""
    hidden = 2 * max(input_dim, output_dim)
    return [input_dim] + [hidden] * (layers - 1) + [output_dim]


def train(
    model: RegressionModel,
    data,
    cfg: TrainConfig = TrainConfig(),
    groups: Sequence[Sequence[int]] | None = None,
) -> tuple[RegressionModel, float]:
    """SGD training on (input, target) pairs; returns a new model and loss.

    groups partitions the input slots; with dropout enabled, whole groups
    are zeroed per sample during training only.
    """
    if isinstance(data, tuple) and len(data) == 2:
        xs, ys = data
    else:
        if len(data) == 0:
            raise ValueError("training data must not be empty")
        xs = [d[0] for d in data]
        ys = [d[1] for d in data]
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    if x.shape[0] == 0:
        raise ValueError("training data must not be empty")
    if x.shape[1] != model.input_dim or y.shape[1] != model.output_dim:
        raise ValueError(
            f"data dims {x.shape[1]}->{y.shape[1]} do not match model "
            f"{model.input_dim}->{model.output_dim}"
        )

    trained = model.copy()
    initial = trained.loss(x, y)
    rng = np.random.default_rng(cfg.seed)
    n = x.shape[0]
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            bx = x[idx]
            if cfg.dropout > 0.0 and groups:
                bx = bx.copy()
                for g in groups:
                    drop = rng.random(len(idx)) < cfg.dropout
                    if drop.any():
                        bx[np.ix_(drop, list(g))] = 0.0
            gw, gb = trained._gradients(bx, y[idx])
            for i in range(len(trained.weights)):
                trained.weights[i] -= cfg.learning_rate * gw[i]
                trained.biases[i] -= cfg.learning_rate * gb[i]
        if not all(np.all(np.isfinite(w)) for w in trained.weights):
            raise RuntimeError(
                f"training diverged (non-finite weights, lr={cfg.learning_rate})"
            )
    final = trained.loss(x, y)
    if not np.isfinite(final):
        raise RuntimeError("training diverged (non-finite loss)")
    if final > initial and initial > 1e-12:
        # The contract is monotone improvement on the training set; plain
        # SGD can regress on pathological rates, surface that loudly.
        raise RuntimeError(
            f"training worsened the loss ({initial:.6f} -> {final:.6f})"
        )
    return trained, final


def infer(model: RegressionModel, x) -> np.ndarray:
    return model.infer(x)


def gradient_check(
    model: RegressionModel, x, eps: float = 1e-5, target=None
) -> float:
    """Max relative deviation of analytic gradients from central differences."""
    if not 0.0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if target is None:
        rng = np.random.default_rng(model.seed + 1)
        target = rng.uniform(-1, 1, size=(arr.shape[0], model.output_dim))
    y = np.asarray(target, dtype=float)
    analytic_w, analytic_b = model._gradients(arr, y)

    worst = 0.0
    probe = model.copy()
    for li in range(len(model.weights)):
        for param, grads in ((probe.weights, analytic_w), (probe.biases, analytic_b)):
            flat = param[li].ravel()
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + eps
                hi = probe.loss(arr, y)
                flat[j] = orig - eps
                lo = probe.loss(arr, y)
                flat[j] = orig
                numeric = (hi - lo) / (2 * eps)
                exact = grads[li].ravel()[j]
                # The floor keeps finite-difference cancellation noise on
                # near-zero gradients from dominating the relative error.
                scale = max(abs(numeric), abs(exact), 1e-6)
                worst = max(worst, abs(numeric - exact) / scale)
    return worst
