"""Comparison methods: source-only training with a softmax-threshold
rejector, MMD feature alignment, and domain-classifier alignment through a
gradient reversal layer.

All three train a K-way network (no unknown column) and reject at test
time with :func:`threshold_predict`. They share the iteration schedule of
:func:`osbp.model.schedule`, so with a zero alignment weight each one
reproduces :func:`train_source_only` exactly under the same seed. Target
batches are forwarded without updating batch-norm running statistics for
the same reason.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import nn
from .data import Dataset, OpenSetScenario
from .errors import ConfigError, ShapeError, ValidationError
from .model import (
    OSBPModel,
    TrainConfig,
    _check_scenario,
    argmax_labels,
    classify,
    optimizer_step,
    schedule,
    update,
)

DEFAULT_SIGMAS = (0.1, 0.05, 0.01, 0.0001, 0.00001)


@dataclass
class RejectorConfig:
    threshold: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.threshold < 1.0:
            raise ConfigError(f"threshold must lie in [0, 1), got {self.threshold}")


@dataclass
class MMDConfig:
    sigmas: Sequence[float] = DEFAULT_SIGMAS
    weight: float = 1.0

    def __post_init__(self):
        self.sigmas = tuple(float(s) for s in self.sigmas)
        if not self.sigmas or any(s <= 0 for s in self.sigmas):
            raise ConfigError(f"MMD needs at least one positive sigma, got {self.sigmas}")
        if self.weight < 0:
            raise ConfigError(f"MMD weight must be >= 0, got {self.weight}")


@dataclass
class DomainHeadSpec:
    hidden: int = 100
    grl_weight: float = 1.0

    def __post_init__(self):
        if self.hidden < 1:
            raise ConfigError(f"domain head width must be >= 1, got {self.hidden}")
        if self.grl_weight < 0:
            raise ConfigError(f"domain head grl weight must be >= 0, got {self.grl_weight}")


@dataclass
class BaselineStats:
    L_s: float
    L_align: float = 0.0
    domain_acc: float | None = None


def threshold_predict(probs, cfg: RejectorConfig | float = 0.1) -> np.ndarray:
    """Argmax over K known classes, or ``K`` when the top probability is below the threshold."""
    threshold = cfg.threshold if isinstance(cfg, RejectorConfig) else float(cfg)
    probs = np.asarray(probs, dtype=np.float64)
    labels = argmax_labels(probs)
    labels[probs.max(axis=1) < threshold] = probs.shape[1]
    return labels


def rejecting_predictor(model: OSBPModel, cfg: RejectorConfig | float = 0.1) -> Callable:
    return lambda x: threshold_predict(classify(model, x), cfg)


# ---------------------------------------------------------------------------
# MMD
# ---------------------------------------------------------------------------


def _sq_dists(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def mmd2_and_grad(a, b, sigmas: Sequence[float]):
    """Biased squared MMD summed over RBF kernels, with gradients for both inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"mmd2 needs two batches of equal width, got {a.shape} and {b.shape}")
    if len(a) == 0 or len(b) == 0:
        raise ValidationError("mmd2 needs non-empty batches")
    n, m = len(a), len(b)
    d_aa, d_bb, d_ab = _sq_dists(a, a), _sq_dists(b, b), _sq_dists(a, b)
    value = 0.0
    grad_a = np.zeros_like(a)
    grad_b = np.zeros_like(b)
    for sigma in sigmas:
        s2 = 2.0 * sigma * sigma
        k_aa, k_bb, k_ab = np.exp(-d_aa / s2), np.exp(-d_bb / s2), np.exp(-d_ab / s2)
        value += k_aa.mean() + k_bb.mean() - 2.0 * k_ab.mean()
        # d k(x, y) / dx = -k(x, y) (x - y) / sigma^2
        c = 2.0 / (sigma * sigma)
        grad_a -= c / (n * n) * (k_aa.sum(1)[:, None] * a - k_aa @ a)
        grad_a += c / (n * m) * (k_ab.sum(1)[:, None] * a - k_ab @ b)
        grad_b -= c / (m * m) * (k_bb.sum(1)[:, None] * b - k_bb @ b)
        grad_b += c / (n * m) * (k_ab.sum(0)[:, None] * b - k_ab.T @ a)
    return float(value), grad_a, grad_b


def mmd2(a, b, cfg: MMDConfig | None = None) -> float:
    return mmd2_and_grad(a, b, (cfg or MMDConfig()).sigmas)[0]


# ---------------------------------------------------------------------------
# trainers
# ---------------------------------------------------------------------------


def _closed_set(model: OSBPModel):
    if model.open_set:
        raise ValidationError("baselines train a K-way network; build it with open_set=False")


def _epoch_means(rows: list[BaselineStats]) -> BaselineStats:
    accs = [r.domain_acc for r in rows if r.domain_acc is not None]
    return BaselineStats(
        float(np.mean([r.L_s for r in rows])),
        float(np.mean([r.L_align for r in rows])),
        float(np.mean(accs)) if accs else None,
    )


def _run(steps, step_fn, sink):
    history, acc, current = [], [], 0
    for epoch, s_idx, t_idx in steps:
        if epoch != current:
            history.append(_epoch_means(acc))
            if sink:
                sink(current, history[-1])
            acc, current = [], epoch
        acc.append(step_fn(s_idx, t_idx))
    if acc:
        history.append(_epoch_means(acc))
        if sink:
            sink(current, history[-1])
    return history


def train_source_only(model: OSBPModel, source: Dataset, cfg: TrainConfig,
                      n_target: int = 0, sink=None) -> list[BaselineStats]:
    """Cross-entropy on source samples only.

    ``n_target`` only sets the epoch length, so that runs line up
    iteration-for-iteration with the adaptation trainers on the same
    scenario.
    """
    cfg.validate()
    _closed_set(model)
    if len(source) == 0:
        raise ValidationError("source set is empty")
    xs, ys = source.features, source.labels

    def step(s_idx, _):
        model.train()
        f, g_trace = model.generator.forward(xs[s_idx])
        out, c_trace = model.classifier.forward(f)
        loss, grad = nn.cross_entropy(nn.softmax(out), ys[s_idx])
        model.generator.backward(g_trace, model.classifier.backward(c_trace, grad))
        update(model, cfg)
        return BaselineStats(loss)

    return _run(schedule(len(xs), n_target, cfg), step, sink)


def train_mmd(model: OSBPModel, scenario: OpenSetScenario, cfg: TrainConfig,
              mmd: MMDConfig | None = None, sink=None) -> list[BaselineStats]:
    """Source cross-entropy plus weighted MMD between G(source) and G(target)."""
    cfg.validate()
    _closed_set(model)
    _check_scenario(scenario)
    mmd = mmd or MMDConfig()
    xs, ys = scenario.source.features, scenario.source.labels
    xt = scenario.target_features

    def step(s_idx, t_idx):
        model.train()
        fs, s_trace = model.generator.forward(xs[s_idx])
        ft, t_trace = model.generator.forward(xt[t_idx], update_stats=False)
        out, c_trace = model.classifier.forward(fs)
        loss, grad = nn.cross_entropy(nn.softmax(out), ys[s_idx])
        g_fs = model.classifier.backward(c_trace, grad)
        value, ga, gb = mmd2_and_grad(fs, ft, mmd.sigmas)
        model.generator.backward(s_trace, g_fs + mmd.weight * ga)
        model.generator.backward(t_trace, mmd.weight * gb)
        update(model, cfg)
        return BaselineStats(loss, value)

    return _run(schedule(len(xs), len(xt), cfg), step, sink)


def build_domain_head(feature_width: int, spec: DomainHeadSpec, cfg: TrainConfig) -> nn.LayerStack:
    rng = np.random.default_rng([cfg.seed, 2])
    return nn.LayerStack([
        nn.GradReversal(spec.grl_weight),
        nn.Affine(feature_width, spec.hidden, rng),
        nn.LeakyReLU(cfg.slope),
        nn.Affine(spec.hidden, 2, rng),
    ])


def train_bp(model: OSBPModel, scenario: OpenSetScenario, cfg: TrainConfig,
             head: DomainHeadSpec | None = None, sink=None,
             domain_head: nn.LayerStack | None = None) -> list[BaselineStats]:
    """Source cross-entropy plus a source-vs-target classifier on G's output.

    The domain head starts with a gradient reversal layer, so the head
    learns to tell the domains apart while G is pushed to confuse it.
    Pass ``domain_head`` to keep a handle on the trained head.
    """
    cfg.validate()
    _closed_set(model)
    _check_scenario(scenario)
    head = head or DomainHeadSpec()
    xs, ys = scenario.source.features, scenario.source.labels
    xt = scenario.target_features
    feat_width = model.generator.out_width or model.in_width
    dom = domain_head if domain_head is not None else build_domain_head(feat_width, head, cfg)

    def step(s_idx, t_idx):
        model.train()
        fs, s_trace = model.generator.forward(xs[s_idx])
        ft, t_trace = model.generator.forward(xt[t_idx], update_stats=False)
        out, c_trace = model.classifier.forward(fs)
        loss, grad = nn.cross_entropy(nn.softmax(out), ys[s_idx])
        g_fs = model.classifier.backward(c_trace, grad)

        ns = len(s_idx)
        d_out, d_trace = dom.forward(np.vstack([fs, ft]))
        d_probs = nn.softmax(d_out)
        d_labels = np.concatenate([np.zeros(ns, np.int64), np.ones(len(t_idx), np.int64)])
        d_loss, d_grad = nn.cross_entropy(d_probs, d_labels)
        d_in = dom.backward(d_trace, d_grad)
        model.generator.backward(s_trace, g_fs + d_in[:ns])
        model.generator.backward(t_trace, d_in[ns:])
        update(model, cfg, extra=dom.params())
        acc = float(np.mean(argmax_labels(d_probs) == d_labels))
        return BaselineStats(loss, d_loss, acc)

    return _run(schedule(len(xs), len(xt), cfg), step, sink)
