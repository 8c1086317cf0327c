"""Step-synchronous multi-source training: adaptive source enrichment (SAE),
sign-alignment regularization against the detached mean update vector (OPA),
AdamW updates, and Beta-weighted historical moving averages.

Each global step first freezes the mean update vector computed from all
sources' parameters, then lets every source draw its batch, enrich it with
confident foreign samples, and take one optimizer step.  Sources own
independent RNG streams, so the per-source phase is order-independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Batch, Dataset, endless_batches
from .errors import ConfigError, NumericsError
from .model import CosineClassifier
from .params import ParamSet, mean_set, per_layer_dot, sign_conflict_rate

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

SIGN_MODES = ("layer_dot", "elementwise")


@dataclass
class HarmonyConfig:
    """Training-stage hyperparameters.

    ``lam`` weights the sign-alignment loss (0 disables OPA), ``beta``
    shapes the Beta(beta, beta) step weighting of the historical average
    (0.5 is U-shaped, 1 is uniform), and ``trim_ratio`` is carried along for
    the merging stage.
    """

    lam: float = 0.5
    sign_mode: str = "elementwise"
    beta: float = 0.5
    steps: int = 500
    batch_size: int = 24
    lr: float = 2e-3
    weight_decay: float = 0.1
    trim_ratio: float = 0.2
    sae: bool = True
    val_check_every: int = 10
    seed: int = 42

    def validate(self) -> None:
        if self.lam < 0 or self.lam > 1:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.sign_mode not in SIGN_MODES:
            raise ConfigError(f"sign_mode must be one of {SIGN_MODES}")
        if not self.beta > 0:
            raise ConfigError(f"beta must be > 0, got {self.beta}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if not 0.0 <= self.trim_ratio < 1.0:
            raise ConfigError(f"trim_ratio must lie in [0, 1), got {self.trim_ratio}")
        if self.val_check_every < 1:
            raise ConfigError("val_check_every must be >= 1")


# -- step weighting -----------------------------------------------------------


def beta_weight(t: int, n_steps: int, beta: float) -> float:
    """Unnormalized Beta(beta, beta) density at x = (t + 0.5)/(n_steps + 1);
    the normalizing constant cancels in the moving-average normalization.

    Computed as (x (1-x))**(beta-1) so the weights are exactly symmetric in
    t <-> n_steps - t.
    """
    if not 0 <= t <= n_steps:
        raise ValueError(f"step index {t} outside [0, {n_steps}]")
    if not beta > 0:
        raise ValueError("beta must be > 0")
    total = float(n_steps + 1)
    u = t + 0.5
    w = total - u
    return float(((u / total) * (w / total)) ** (beta - 1.0))


# -- SAE ------------------------------------------------------------------------


def adaptive_threshold(clf: CosineClassifier, params: ParamSet, batch: Batch) -> float:
    """Mean max-softmax confidence of the model on its own raw batch."""
    if len(batch) == 0:
        raise ValueError("adaptive threshold of an empty batch")
    conf = clf.confidence(params, batch.x)
    return float(np.mean(conf))


@dataclass
class EnrichStats:
    admitted: int = 0
    admitted_corrupted: int = 0
    admitted_clean: int = 0
    foreign_total: int = 0
    foreign_corrupted: int = 0
    foreign_clean: int = 0


def enrich_batch(
    clf: CosineClassifier,
    params: ParamSet,
    own: Batch,
    foreign: Sequence[Batch],
    tau: float,
) -> tuple[Batch, EnrichStats]:
    """Admit foreign samples whose confidence under this source's model is
    strictly above tau; original labels are kept and admitted samples follow
    the native batch in (source, within-batch) order."""
    stats = EnrichStats()
    parts = [own]
    for other in foreign:
        if len(other) == 0:
            continue
        conf = clf.confidence(params, other.x)
        keep = conf > tau
        stats.foreign_total += len(other)
        n_corr = int(np.count_nonzero(other.corrupted))
        stats.foreign_corrupted += n_corr
        stats.foreign_clean += len(other) - n_corr
        if keep.any():
            admitted = Batch(other.x[keep], other.y[keep], other.corrupted[keep])
            stats.admitted += len(admitted)
            adm_corr = int(np.count_nonzero(admitted.corrupted))
            stats.admitted_corrupted += adm_corr
            stats.admitted_clean += len(admitted) - adm_corr
            parts.append(admitted)
    return Batch.concat(parts) if len(parts) > 1 else own, stats


# -- OPA ------------------------------------------------------------------------


def sign_loss_and_grad(
    v_i: ParamSet, v_bar: ParamSet, mode: str = "layer_dot"
) -> tuple[float, ParamSet]:
    """Hinge penalty on update directions opposing the (detached) mean update
    vector, with its gradient w.r.t. the source's parameters.

    layer_dot: per-layer scalar hinge max(0, -<v_i^l, vbar^l>), averaged over
    layers.  elementwise: per-coordinate hinge on -v_i*vbar, averaged within
    each layer then over layers.  The subgradient at an exact zero is 0.
    """
    v_i.require_congruent(v_bar)
    if mode not in SIGN_MODES:
        raise ConfigError(f"sign_mode must be one of {SIGN_MODES}")
    n_layers = len(v_i)
    loss = 0.0
    grads = []
    if mode == "layer_dot":
        dots = per_layer_dot(v_i, v_bar)
        for (name, dot), (_, vb) in zip(dots, v_bar.items()):
            if -dot > 0.0:
                loss += -dot
                grads.append((name, -vb / n_layers))
            else:
                grads.append((name, np.zeros_like(vb)))
        loss /= n_layers
    else:
        for (name, vi), (_, vb) in zip(v_i.items(), v_bar.items()):
            prod = vi * vb
            active = prod < 0.0
            d_l = vi.size
            loss += float(np.sum(np.where(active, -prod, 0.0))) / d_l
            grads.append((name, np.where(active, -vb, 0.0) / (n_layers * d_l)))
        loss /= n_layers
    return loss, ParamSet(grads, check_finite=False)


def total_loss_and_grad(
    clf: CosineClassifier,
    params: ParamSet,
    batch_x: np.ndarray,
    batch_y: np.ndarray,
    lam: float = 0.0,
    theta0: ParamSet | None = None,
    v_bar: ParamSet | None = None,
    sign_mode: str = "layer_dot",
) -> tuple[float, ParamSet]:
    """Cross-entropy plus lam * sign loss; v_bar is treated as a constant."""
    ce, grads = clf.ce_loss_and_grad(params, batch_x, batch_y)
    if lam == 0.0 or v_bar is None:
        return ce, grads
    if theta0 is None:
        raise ValueError("sign loss requires theta0")
    sign_loss, sign_grads = sign_loss_and_grad(params - theta0, v_bar, sign_mode)
    return ce + lam * sign_loss, grads + lam * sign_grads


# -- optimizer ------------------------------------------------------------------


@dataclass
class AdamWState:
    m: ParamSet
    v: ParamSet
    t: int = 0

    @classmethod
    def init(cls, params: ParamSet) -> "AdamWState":
        return cls(m=params.zeros_like(), v=params.zeros_like(), t=0)


def adamw_step(
    state: AdamWState,
    params: ParamSet,
    grads: ParamSet,
    lr: float,
    weight_decay: float,
) -> ParamSet:
    """One decoupled-weight-decay adaptive-moment step; mutates ``state`` and
    returns the updated parameters."""
    params.require_congruent(grads)
    state.t += 1
    bc1 = 1.0 - ADAM_BETA1**state.t
    bc2 = 1.0 - ADAM_BETA2**state.t
    new_entries = []
    m_entries, v_entries = [], []
    for (name, theta), (_, g) in zip(params.items(), grads.items()):
        m = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        step = m_hat / (np.sqrt(v_hat) + ADAM_EPS) + weight_decay * theta
        new_entries.append((name, theta - lr * step))
        m_entries.append((name, m))
        v_entries.append((name, v))
    state.m = ParamSet(m_entries, check_finite=False)
    state.v = ParamSet(v_entries, check_finite=False)
    return ParamSet(new_entries, check_finite=False)


# -- trainers --------------------------------------------------------------------


@dataclass
class SourceTrainer:
    """Per-source state: live parameters, optimizer moments, and the running
    Beta-weighted historical average."""

    source_id: int
    params: ParamSet
    opt: AdamWState
    ma_params: ParamSet
    weight_sum: float

    @classmethod
    def init(cls, source_id: int, theta0: ParamSet, gamma0: float) -> "SourceTrainer":
        # The t=0 snapshot is the shared initialization, absorbed with gamma_0.
        return cls(
            source_id=source_id,
            params=theta0.copy(),
            opt=AdamWState.init(theta0),
            ma_params=theta0.copy(),
            weight_sum=gamma0,
        )


def ma_update(trainer: SourceTrainer, gamma_t: float, theta_new: ParamSet) -> None:
    """Online Beta-weighted average: with W' = W + gamma, the accumulator
    becomes (W/W') * old + (gamma/W') * new.  All-zero weight sums defer the
    update so the accumulator stays at the initialization snapshot."""
    if gamma_t < 0:
        raise ValueError("gamma_t must be >= 0")
    new_sum = trainer.weight_sum + gamma_t
    if new_sum == 0.0:
        return
    keep = trainer.weight_sum / new_sum
    blend = gamma_t / new_sum
    trainer.ma_params = keep * trainer.ma_params + blend * theta_new
    trainer.weight_sum = new_sum


@dataclass
class StepContext:
    """Frozen per-step quantities shared by all sources."""

    step: int
    v_bar: ParamSet
    batches: list[Batch]


@dataclass
class TrainResult:
    theta0: ParamSet
    ma_params: list[ParamSet]       # historically averaged models, per source
    final_params: list[ParamSet]    # raw end-of-training parameters
    best_params: list[ParamSet] | None = None   # best-on-validation snapshots
    best_val_acc: list[float] | None = None
    log: list[dict] = field(default_factory=list)


def _pooled_val_accuracy(clf: CosineClassifier, params: ParamSet, val: Dataset) -> float:
    pred = clf.predict(params, val.x)
    return float(np.mean(pred == val.y))


def train_all(
    train_views: Sequence[Dataset],
    clf: CosineClassifier,
    theta0: ParamSet,
    config: HarmonyConfig,
    val_view: Dataset | None = None,
) -> TrainResult:
    """Run the full training stage over all sources.

    Every global step: (1) compute each source's update vector against the
    shared initialization and freeze their mean; (2) draw one batch per
    source; (3) per source, enrich the batch, take one AdamW step on
    CE + lam * sign loss, and fold the new parameters into the historical
    average with the Beta step weight.

    ``val_view`` (pooled training-domain validation split) enables tracking
    of each source's best-on-validation snapshot every ``val_check_every``
    steps.
    """
    config.validate()
    n_sources = len(train_views)
    if n_sources < 1:
        raise ConfigError("need at least one source")

    n_steps = config.steps
    gamma0 = beta_weight(0, n_steps, config.beta)
    trainers = [SourceTrainer.init(i, theta0, gamma0) for i in range(n_sources)]
    streams = [
        endless_batches(view, config.batch_size, (config.seed, i))
        for i, view in enumerate(train_views)
    ]

    track_best = val_view is not None and len(val_view) > 0
    best_params: list[ParamSet] | None = None
    best_acc: list[float] | None = None
    if track_best:
        acc0 = [_pooled_val_accuracy(clf, theta0, val_view)] * n_sources
        best_params = [theta0.copy() for _ in range(n_sources)]
        best_acc = list(acc0)

    log: list[dict] = []
    for step in range(1, n_steps + 1):
        v_list = [tr.params - theta0 for tr in trainers]
        v_bar = mean_set(v_list)
        gamma_t = beta_weight(step, n_steps, config.beta)
        ctx = StepContext(step=step, v_bar=v_bar, batches=[next(s) for s in streams])

        for i, trainer in enumerate(trainers):
            own = ctx.batches[i]
            tau = adaptive_threshold(clf, trainer.params, own)
            if config.sae and n_sources > 1:
                foreign = [ctx.batches[j] for j in range(n_sources) if j != i]
                enriched, stats = enrich_batch(clf, trainer.params, own, foreign, tau)
            else:
                enriched, stats = own, EnrichStats()

            ce, grads = clf.ce_loss_and_grad(trainer.params, enriched.x, enriched.y)
            sign_loss, sign_grads = sign_loss_and_grad(
                v_list[i], ctx.v_bar, config.sign_mode
            )
            if config.lam > 0.0:
                grads = grads + config.lam * sign_grads
            total = ce + config.lam * sign_loss

            if not np.isfinite(total):
                raise NumericsError(
                    f"non-finite loss at step {step}, source {i}",
                    diagnostic={
                        "step": step,
                        "source": i,
                        "ce_loss": ce,
                        "sign_loss": sign_loss,
                        "tau": tau,
                        "batch_size": len(enriched),
                    },
                )

            trainer.params = adamw_step(
                trainer.opt, trainer.params, grads, config.lr, config.weight_decay
            )
            ma_update(trainer, gamma_t, trainer.params)

            log.append(
                {
                    "step": step,
                    "source": i,
                    "ce_loss": ce,
                    "sign_loss": sign_loss,
                    "tau": tau,
                    "admitted": stats.admitted,
                    "admitted_corrupted": stats.admitted_corrupted,
                    "admitted_clean": stats.admitted_clean,
                    "foreign_corrupted": stats.foreign_corrupted,
                    "foreign_clean": stats.foreign_clean,
                    "sign_conflict_rate": sign_conflict_rate(v_list[i], ctx.v_bar),
                }
            )

        if track_best and (step % config.val_check_every == 0 or step == n_steps):
            for i, trainer in enumerate(trainers):
                acc = _pooled_val_accuracy(clf, trainer.params, val_view)
                if acc > best_acc[i]:
                    best_acc[i] = acc
                    best_params[i] = trainer.params.copy()

    return TrainResult(
        theta0=theta0,
        ma_params=[tr.ma_params for tr in trainers],
        final_params=[tr.params for tr in trainers],
        best_params=best_params,
        best_val_acc=best_acc,
        log=log,
    )
