"""Desk-scale cosine-prototype classifier: a frozen unit-norm class-prototype
matrix plus a small tanh MLP encoder, with closed-form forward pass,
cross-entropy loss, and hand-derived gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError
from .params import ParamSet

COS_EPS = 1e-12  # added inside the sqrt of the embedding norm


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture of the trainable encoder (activation is tanh throughout,
    logit scale is fixed, not trained)."""

    input_dim: int
    embed_dim: int
    hidden_dims: tuple[int, ...] = (32, 32)
    logit_scale: float = 10.0

    def __post_init__(self):
        dims = (self.input_dim, self.embed_dim, *self.hidden_dims)
        if any(int(d) < 1 for d in dims):
            raise ConfigError(f"all encoder dims must be >= 1, got {dims}")
        if not self.logit_scale > 0:
            raise ConfigError(f"logit_scale must be > 0, got {self.logit_scale}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        sizes = [self.input_dim, *self.hidden_dims, self.embed_dim]
        return list(zip(sizes[:-1], sizes[1:]))

    @property
    def layer_names(self) -> list[tuple[str, str]]:
        n_hidden = len(self.hidden_dims)
        names = [(f"W{i + 1}", f"b{i + 1}") for i in range(n_hidden)]
        names.append(("W_out", "b_out"))
        return names


class Prototypes:
    """Frozen K x D matrix of unit-norm class prototype rows."""

    __slots__ = ("matrix",)

    def __init__(self, matrix: np.ndarray):
        m = np.asarray(matrix, dtype=np.float64)
        if m.ndim != 2:
            raise ConfigError("prototype matrix must be 2-D (K x D)")
        norms = np.linalg.norm(m, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-12):
            raise ConfigError("prototype rows must have unit norm")
        self.matrix = m
        self.matrix.setflags(write=False)

    @property
    def n_classes(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def min_pairwise_angle(self) -> float:
        """Smallest angle (radians) between any two prototype rows; reported
        as a sanity diagnostic since near-parallel rows are not guarded."""
        cos = self.matrix @ self.matrix.T
        np.fill_diagonal(cos, -1.0)
        return float(np.arccos(np.clip(np.max(cos), -1.0, 1.0)))


def init_prototypes(n_classes: int, dim: int, seed: int) -> Prototypes:
    """Seeded standard-normal rows, normalized to unit length."""
    if n_classes < 2 or dim < 2:
        raise ConfigError("need n_classes >= 2 and dim >= 2")
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((n_classes, dim))
    m /= np.linalg.norm(m, axis=1, keepdims=True)
    return Prototypes(m)


@dataclass
class ForwardCache:
    """Everything the backward pass needs, for a batch of inputs."""

    inputs: np.ndarray             # (n, d_in)
    activations: list[np.ndarray]  # hidden tanh outputs, one per hidden layer
    embeddings: np.ndarray         # (n, D) raw encoder output V
    norms: np.ndarray              # (n,) eps-guarded embedding norms
    unit_embeddings: np.ndarray    # (n, D) V / norm
    cosines: np.ndarray            # (n, K)
    logits: np.ndarray             # (n, K) = scale * cosines
    probs: np.ndarray              # (n, K) softmax rows
    guarded: np.ndarray            # (n,) True where the eps guard dominated


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


class CosineClassifier:
    """Frozen prototypes plus a trainable encoder; parameters are passed in
    explicitly so the classifier itself stays immutable."""

    def __init__(self, config: EncoderConfig, prototypes: Prototypes):
        if prototypes.dim != config.embed_dim:
            raise ConfigError(
                f"prototype dim {prototypes.dim} != embed_dim {config.embed_dim}"
            )
        self.config = config
        self.prototypes = prototypes

    # -- parameters ---------------------------------------------------------

    def init_params(self, seed: int) -> ParamSet:
        """Weights ~ N(0, 1/fan_in), biases zero, seeded."""
        rng = np.random.default_rng(seed)
        entries = []
        for (w_name, b_name), (fan_in, fan_out) in zip(
            self.config.layer_names, self.config.layer_dims
        ):
            w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
            entries.append((w_name, w))
            entries.append((b_name, np.zeros(fan_out)))
        return ParamSet(entries)

    # -- forward ------------------------------------------------------------

    def forward(self, params: ParamSet, x: np.ndarray) -> ForwardCache:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[1] != self.config.input_dim:
            raise ConfigError(
                f"input dim {x.shape[1]} != configured {self.config.input_dim}"
            )
        names = self.config.layer_names
        a = x
        activations: list[np.ndarray] = []
        for w_name, b_name in names[:-1]:
            z = a @ params[w_name] + params[b_name]
            a = np.tanh(z)
            activations.append(a)
        w_name, b_name = names[-1]
        v = a @ params[w_name] + params[b_name]

        vsq = np.sum(v * v, axis=1)
        norms = np.sqrt(vsq + COS_EPS)
        guarded = vsq < COS_EPS
        u = v / norms[:, None]
        cosines = u @ self.prototypes.matrix.T
        logits = self.config.logit_scale * cosines
        probs = _softmax_rows(logits)
        return ForwardCache(
            inputs=x,
            activations=activations,
            embeddings=v,
            norms=norms,
            unit_embeddings=u,
            cosines=cosines,
            logits=logits,
            probs=probs,
            guarded=guarded,
        )

    def predict(self, params: ParamSet, x: np.ndarray):
        """Argmax class over cosine similarity; ties go to the lowest index."""
        cache = self.forward(params, x)
        pred = np.argmax(cache.cosines, axis=1)
        return int(pred[0]) if np.asarray(x).ndim == 1 else pred

    def confidence(self, params: ParamSet, x: np.ndarray):
        """Maximum class probability."""
        cache = self.forward(params, x)
        conf = cache.probs.max(axis=1)
        return float(conf[0]) if np.asarray(x).ndim == 1 else conf

    # -- loss / gradients -----------------------------------------------------

    def ce_loss_and_grad(
        self, params: ParamSet, x: np.ndarray, y: np.ndarray
    ) -> tuple[float, ParamSet]:
        """Mean cross-entropy over the batch and its gradient, backpropagated
        through softmax, the eps-guarded cosine, and the MLP."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        y = np.atleast_1d(np.asarray(y, dtype=np.int64))
        n = x.shape[0]
        if n == 0:
            raise ValueError("cross-entropy over an empty batch")
        k = self.prototypes.n_classes
        if y.min() < 0 or y.max() >= k:
            raise ValueError(f"labels must lie in [0, {k}), got {y.min()}..{y.max()}")

        cache = self.forward(params, x)
        logits = cache.logits
        lse = np.log(np.sum(np.exp(logits - logits.max(axis=1, keepdims=True)), axis=1))
        lse += logits.max(axis=1)
        loss = float(np.mean(lse - logits[np.arange(n), y]))

        # dL/dlogits for the mean loss
        dlogits = cache.probs.copy()
        dlogits[np.arange(n), y] -= 1.0
        dlogits /= n

        s = self.config.logit_scale
        du = s * (dlogits @ self.prototypes.matrix)          # (n, D)
        v, norms = cache.embeddings, cache.norms
        # u = v / sqrt(v'v + eps):  dv = du/n - v (v . du) / n^3
        dv = du / norms[:, None] - v * (np.sum(du * v, axis=1) / norms**3)[:, None]

        names = self.config.layer_names
        grads: dict[str, np.ndarray] = {}
        a_prev = cache.activations[-1] if cache.activations else cache.inputs
        w_name, b_name = names[-1]
        grads[w_name] = a_prev.T @ dv
        grads[b_name] = dv.sum(axis=0)
        da = dv @ params[w_name].T

        for idx in range(len(names) - 2, -1, -1):
            a_l = cache.activations[idx]
            dz = da * (1.0 - a_l * a_l)
            a_in = cache.activations[idx - 1] if idx > 0 else cache.inputs
            w_name, b_name = names[idx]
            grads[w_name] = a_in.T @ dz
            grads[b_name] = dz.sum(axis=0)
            if idx > 0:
                da = dz @ params[w_name].T

        ordered = ParamSet(
            ((name, grads[name]) for name in params.names), check_finite=False
        )
        return loss, ordered


LossAndGrad = Callable[[ParamSet], tuple[float, ParamSet]]


def grad_check(
    loss_and_grad: LossAndGrad,
    params: ParamSet,
    n_coords: int = 10,
    h: float = 1e-5,
    seed: int = 0,
) -> float:
    """Compare analytic gradients against central finite differences on
    ``n_coords`` uniformly sampled coordinates per layer.

    Returns the max relative error with denominator
    max(|analytic|, |numeric|, 1e-8).  Deterministic given the seed.
    """
    if n_coords < 1:
        raise ValueError("n_coords must be >= 1")
    _, analytic = loss_and_grad(params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, tensor in params.items():
        size = tensor.size
        take = min(n_coords, size)
        coords = rng.choice(size, size=take, replace=False)
        for flat_idx in coords:
            idx = np.unravel_index(flat_idx, tensor.shape)
            perturbed = {n: t.copy() for n, t in params.items()}
            perturbed[name][idx] += h
            plus, _ = loss_and_grad(ParamSet(perturbed, check_finite=False))
            perturbed[name][idx] -= 2 * h
            minus, _ = loss_and_grad(ParamSet(perturbed, check_finite=False))
            numeric = (plus - minus) / (2 * h)
            a = float(analytic[name][idx])
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
