"""Composite loss, gradients, optimizer loop and free-running rollout.

All losses work on normalized maps ``y = (T - t_floor) / span``:

    l_rmse    = mean over samples of sqrt(mean over pixels of (y' - y_true)^2)
    l_physics = mean of ((y' - y) - kappa * lap(y'))^2,   kappa = alpha * dt / pitch^2
    total     = l_rmse + lam * l_physics

The physics term is the two-frame heat-equation residual multiplied by
dt / span, so ``lam`` is dimensionless.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from ..fields import FieldKind, FieldSequence, ScalarField
from . import autodiff as ad
from .network import ArchConfig, ConcatMode, Graph, Normalization, SurrogateModel, check_shape, init_model

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message, model: SurrogateModel, history: list[dict]):
        super().__init__(message)
        self.model = model
        self.history = history


class RolloutError(RuntimeError):
    def __init__(self, step: int, reason: str = "non-finite prediction"):
        super().__init__(f"rollout failed at step {step}: {reason}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.1
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch: int = 8
    epochs: int = 100
    max_steps: int | None = None
    early_stop_patience: int = 10
    lr_decay: float = 0.9
    lr_decay_every: int = 20
    noise_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")

    @classmethod
    def full_scale_preset(cls, **overrides) -> TrainConfig:
        """Full-scale settings (lr 1e-6, batch 50, 100 epochs)."""
        return replace(cls(lr=1e-6, batch=50, epochs=100), **overrides)

    def to_record(self) -> dict:
        return asdict(self)


@dataclass
class PairSet:
    """Normalized training records stacked as (N, H, W) arrays.

    ``query_clean`` is the un-augmented query used by the physics residual;
    ``kappa`` is alpha * dt / pitch^2 for the frames' spacing and grid.
    """
    query: np.ndarray
    source: np.ndarray
    target_ref: np.ndarray
    truth: np.ndarray
    kappa: float
    query_clean: np.ndarray | None = None

    def __post_init__(self):
        if self.query_clean is None:
            self.query_clean = self.query

    def __len__(self):
        return self.query.shape[0]

    def take(self, idx) -> PairSet:
        return PairSet(self.query[idx], self.source[idx], self.target_ref[idx], self.truth[idx],
                       self.kappa, self.query_clean[idx])


def _loss_nodes(graph: Graph, batch: PairSet, lam: float, rng=None):
    pred = graph.run(batch.query, batch.source, batch.target_ref, rng)
    err = ad.sub(pred, ad.constant(batch.truth, "truth"), "err")
    per_sample = ad.sqrt(ad.mean_sq_per_sample(err, "mse"), "rmse")
    l_rmse = ad.mean(per_sample, "l_rmse")
    step = ad.sub(pred, ad.constant(batch.query_clean, "query"), "dT")
    resid = ad.sub(step, ad.scale(ad.laplacian(pred), batch.kappa, "diffusion"), "residual")
    l_phys = ad.mean(ad.mean_sq_per_sample(resid, "res_sq"), "l_physics")
    total = ad.add(l_rmse, ad.scale(l_phys, lam, "weighted_physics"), "total") if lam else l_rmse
    return total, l_rmse, l_phys, pred


def loss(model: SurrogateModel, batch: PairSet, cfg: TrainConfig, rng=None) -> dict[str, float]:
    """Composite loss on one batch (inference mode unless ``rng`` drives dropout)."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    total, l_rmse, l_phys, _ = _loss_nodes(Graph(model), batch, cfg.lam, rng)
    return {"total": float(total.value), "l_rmse": float(l_rmse.value),
            "l_physics": float(l_phys.value)}


def gradients(model: SurrogateModel, batch: PairSet, cfg: TrainConfig, rng=None):
    """Exact gradient of the composite loss with respect to the flat parameter vector.

    Returns ``(grad, losses)``. Pass ``rng`` to train with dropout; the same
    seed reproduces the same masks, which is what finite-difference checks use.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    grad = np.zeros_like(model.params)
    graph = Graph(model, grad)
    total, l_rmse, l_phys, _ = _loss_nodes(graph, batch, cfg.lam, rng)
    if not np.isfinite(total.value):
        raise FloatingPointError("non-finite loss")
    ad.backward(total)
    return grad, {"total": float(total.value), "l_rmse": float(l_rmse.value),
                  "l_physics": float(l_phys.value)}


def evaluate_losses(model: SurrogateModel, data: PairSet, cfg: TrainConfig, chunk: int = 32) -> dict:
    """Sample-weighted mean of the loss terms over a whole PairSet."""
    sums = {"total": 0.0, "l_rmse": 0.0, "l_physics": 0.0}
    n = len(data)
    for start in range(0, n, chunk):
        part = data.take(slice(start, min(n, start + chunk)))
        vals = loss(model, part, cfg)
        for k in sums:
            sums[k] += vals[k] * len(part)
    return {k: v / n for k, v in sums.items()}


class Adam:
    def __init__(self, n: int, cfg: TrainConfig):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0
        self.b1, self.b2, self.eps = cfg.beta1, cfg.beta2, cfg.eps

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float):
        self.t += 1
        self.m *= self.b1
        self.m += (1 - self.b1) * grad
        self.v *= self.b2
        self.v += (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        params -= lr * mhat / (np.sqrt(vhat) + self.eps)


def augment_inputs(batch: PairSet, sigma: float, rng: np.random.Generator) -> PairSet:
    """Gaussian noise on the three inputs, clamped to [0, 1]; the target is untouched."""
    if sigma == 0:
        return batch

    def noisy(a):
        return np.clip(a + rng.normal(0.0, sigma, a.shape), 0.0, 1.0)

    return PairSet(noisy(batch.query), noisy(batch.source), noisy(batch.target_ref),
                   batch.truth, batch.kappa, batch.query_clean)


def train(train_set: PairSet, arch: ArchConfig, cfg: TrainConfig, val_set: PairSet | None = None,
          norm: Normalization | None = None, init: SurrogateModel | None = None):
    """Adam on the composite loss with shuffling, input noise, step decay and early stopping.

    Returns ``(model, history)`` where the model holds the parameters of the
    best validation epoch (last epoch when there is no validation set).
    """
    if len(train_set) < 1:
        raise ValueError("need at least one training sample")
    check_shape(arch, train_set.query.shape[1:])
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    model = init.copy() if init is not None else init_model(arch, int(seeds[0].generate_state(1)[0]), norm)
    shuffle_rng, noise_rng, drop_rng = (np.random.default_rng(s) for s in seeds[1:])
    opt = Adam(model.param_count, cfg)
    history: list[dict] = []
    best = (math.inf, model.copy())
    stale = 0
    steps = 0
    lr = cfg.lr
    n = len(train_set)
    for epoch in range(cfg.epochs):
        if epoch and epoch % cfg.lr_decay_every == 0:
            lr *= cfg.lr_decay
        order = shuffle_rng.permutation(n)
        sums = {"total": 0.0, "l_rmse": 0.0, "l_physics": 0.0}
        seen = 0
        for start in range(0, n, cfg.batch):
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
            idx = order[start:start + cfg.batch]
            batch = augment_inputs(train_set.take(idx), cfg.noise_sigma, noise_rng)
            try:
                grad, vals = gradients(model, batch, cfg, drop_rng)
            except (FloatingPointError, ad.NonFiniteActivation) as exc:
                raise TrainingDiverged(f"training diverged at step {steps}: {exc}", best[1],
                                       history) from exc
            if not np.all(np.isfinite(grad)):
                raise TrainingDiverged(f"non-finite gradient at step {steps}", best[1], history)
            opt.step(model.params, grad, lr)
            steps += 1
            for k in sums:
                sums[k] += vals[k] * len(idx)
            seen += len(idx)
        if seen == 0:
            break
        row = {"epoch": epoch, "steps": steps, "lr": lr}
        row.update({f"train_{k}": v / seen for k, v in sums.items()})
        if val_set is not None and len(val_set):
            vals = evaluate_losses(model, val_set, cfg)
            row.update({f"val_{k}": v for k, v in vals.items()})
            score = vals["total"]
        else:
            score = row["train_total"]
        if not math.isfinite(score):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}", best[1], history)
        history.append(row)
        log.info("epoch %d steps %d train %.5f score %.5f", epoch, steps, row["train_total"], score)
        if score < best[0]:
            best = (score, model.copy())
            stale = 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                log.info("early stop after %d stale epochs", stale)
                break
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
    final = best[1] if val_set is not None and len(val_set) else model
    return final, history


def rollout(model: SurrogateModel, start: ScalarField, pair: tuple[ScalarField, ScalarField],
            n_steps: int, frame_dt: float = 1e-3) -> FieldSequence:
    """Free-running prediction: each output becomes the next query; the pair stays fixed.

    Returns ``n_steps + 1`` frames including ``start``.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    source, target = pair
    if not start.spec == source.spec == target.spec:
        raise ValueError("start map and reference pair must share one grid spec")
    check_shape(model.arch, start.spec.shape)
    n = model.norm
    graph = Graph(model)
    s, t = n.forward(source.values)[None], n.forward(target.values)[None]
    arch = model.arch
    cache = arch.use_pair_conditioning and arch.concat_mode is ConcatMode.FeatureLevel
    feats = graph.encode_pair(s, t) if cache else None
    y = n.forward(start.values)[None]
    frames = [start.with_values(start.values, FieldKind.TemperatureC)]
    for k in range(1, n_steps + 1):
        try:
            y = graph.run(y, s, t, pair_features=feats).value
        except ad.NonFiniteActivation as exc:
            raise RolloutError(k, str(exc)) from exc
        T = n.inverse(y[0])
        if not np.all(np.isfinite(T)):
            raise RolloutError(k)
        frames.append(ScalarField(start.spec, FieldKind.TemperatureC, np.maximum(T, -273.15)))
    return FieldSequence(tuple(frames), frame_dt)
