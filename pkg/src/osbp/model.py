"""Open-set adversarial training with a K+1-way classifier.

The generator ``G`` maps inputs to features and the classifier ``C`` maps
features to ``K + 1`` logits, the last one standing for "unknown". Each
training step classifies a labeled source batch with cross-entropy and
pushes ``C`` to output probability ``t`` for "unknown" on a target batch,
while a gradient reversal layer between ``G`` and ``C`` on the target path
makes ``G`` push that probability away from ``t``.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import nn
from .data import OpenSetScenario, epoch_plan, iterations_per_epoch
from .errors import ConfigError, FormatError, ShapeError, ValidationError

CHECKPOINT_FORMAT = "osbp-checkpoint"
CHECKPOINT_VERSION = 1

# stream ids keep source and target shuffles independent
SOURCE_STREAM = 0
TARGET_STREAM = 1


@dataclass
class TrainConfig:
    t: float = 0.5
    optimizer: str = "sgd"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 500
    seed: int = 0
    grl_weight: float = 1.0
    hidden: tuple = (100, 100)
    classifier_hidden: tuple = ()
    batchnorm: bool = True
    slope: float = 0.01
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    dropout: float = 0.0
    # stacks ("generator", "classifier") whose parameters are not updated
    freeze: tuple = ()

    def validate(self):
        if not 0.0 < self.t < 1.0:
            raise ConfigError(f"t must lie strictly between 0 and 1, got {self.t}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.grl_weight < 0:
            raise ConfigError(f"grl_weight must be >= 0, got {self.grl_weight}")
        if any(h < 1 for h in self.hidden) or any(h < 1 for h in self.classifier_hidden):
            raise ConfigError("hidden widths must be >= 1")
        for name in self.freeze:
            if name not in ("generator", "classifier"):
                raise ConfigError(f"cannot freeze unknown stack {name!r}")
        return self


@dataclass
class StepStats:
    L_s: float
    L_adv: float
    mean_p_unknown: float


class OSBPModel:
    """Generator and classifier stacks for ``K`` known classes.

    With ``open_set=True`` the classifier has ``K + 1`` outputs and column
    ``K`` is the unknown class; baselines build the same network with
    ``open_set=False`` and ``K`` outputs.
    """

    def __init__(self, generator: nn.LayerStack, classifier: nn.LayerStack, K: int,
                 open_set: bool = True, grl_weight: float = 1.0):
        n_out = K + 1 if open_set else K
        if classifier.out_width != n_out:
            raise ShapeError(f"classifier has {classifier.out_width} outputs, expected {n_out}")
        if generator.out_width is not None and classifier.in_width is not None \
                and generator.out_width != classifier.in_width:
            raise ShapeError(
                f"generator output width {generator.out_width} does not match "
                f"classifier input width {classifier.in_width}"
            )
        self.generator = generator
        self.classifier = classifier
        self.K = K
        self.open_set = open_set
        self.reversal = nn.GradReversal(grl_weight)

    @property
    def in_width(self):
        return self.generator.in_width

    @property
    def n_outputs(self):
        return self.classifier.out_width

    def train(self):
        self.generator.train()
        self.classifier.train()
        return self

    def eval(self):
        self.generator.eval()
        self.classifier.eval()
        return self

    def params(self) -> list[nn.Param]:
        return self.generator.params() + self.classifier.params()

    def clone(self) -> "OSBPModel":
        return copy.deepcopy(self)


def _hidden_block(layers, n_in, width, cfg, rng):
    layers.append(nn.Affine(n_in, width, rng))
    if cfg.batchnorm:
        layers.append(nn.BatchNorm(width, cfg.bn_momentum, cfg.bn_eps))
    layers.append(nn.LeakyReLU(cfg.slope))
    if cfg.dropout > 0:
        layers.append(nn.Dropout(cfg.dropout, seed=int(rng.integers(2**31))))


def build_model(in_width: int, K: int, cfg: TrainConfig | None = None,
                open_set: bool = True) -> OSBPModel:
    """Fully-connected ``G`` and ``C`` initialized from ``cfg.seed``.

    ``G`` and ``C`` draw from separate seeded streams so the generator's
    initial weights do not depend on the classifier's output width.
    """
    cfg = (cfg or TrainConfig()).validate()
    g_rng = np.random.default_rng([cfg.seed, 0])
    c_rng = np.random.default_rng([cfg.seed, 1])
    g_layers: list[nn.Layer] = []
    width = in_width
    for h in cfg.hidden:
        _hidden_block(g_layers, width, h, cfg, g_rng)
        width = h
    c_layers: list[nn.Layer] = []
    for h in cfg.classifier_hidden:
        _hidden_block(c_layers, width, h, cfg, c_rng)
        width = h
    c_layers.append(nn.Affine(width, K + 1 if open_set else K, c_rng))
    return OSBPModel(nn.LayerStack(g_layers), nn.LayerStack(c_layers), K, open_set, cfg.grl_weight)


def logits(model: OSBPModel, batch) -> np.ndarray:
    """Eval-mode forward through ``G`` then ``C``; the model's mode is restored."""
    modes = model.generator.training, model.classifier.training
    model.eval()
    try:
        features = model.generator(batch)
        if features.shape[1] != (model.classifier.in_width or features.shape[1]):
            raise ShapeError("generator output does not fit the classifier")
        return model.classifier(features)
    finally:
        model.generator.training, model.classifier.training = modes


def features(model: OSBPModel, batch) -> np.ndarray:
    modes = model.generator.training
    model.generator.eval()
    try:
        return model.generator(batch)
    finally:
        model.generator.training = modes


def classify(model: OSBPModel, batch) -> np.ndarray:
    """Class probabilities; for an open-set model column ``K`` is p(unknown)."""
    return nn.softmax(logits(model, batch))


def argmax_labels(probs: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. ties go to the lowest label
    return np.argmax(probs, axis=1).astype(np.int64)


def predict(model: OSBPModel, batch) -> np.ndarray:
    """Labels in ``0..K``; ``K`` means unknown."""
    return argmax_labels(classify(model, batch))


def optimizer_step(params, cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        nn.sgd_momentum_step(params, cfg.lr, cfg.momentum)
    else:
        nn.adam_step(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)


def update(model: OSBPModel, cfg: TrainConfig, extra=()):
    """Apply one optimizer step to every non-frozen parameter and clear all grads."""
    params = list(extra)
    for name in ("generator", "classifier"):
        stack = getattr(model, name)
        if name in cfg.freeze:
            stack.zero_grad()
        else:
            params.extend(stack.params())
    optimizer_step(params, cfg)


def source_backward(model: OSBPModel, xs, ys) -> float:
    """Cross-entropy on a labeled source batch; gradients flow into G and C."""
    f, g_trace = model.generator.forward(xs)
    out, c_trace = model.classifier.forward(f)
    loss, grad = nn.cross_entropy(nn.softmax(out), ys)
    model.generator.backward(g_trace, model.classifier.backward(c_trace, grad))
    return loss


def adversarial_backward(model: OSBPModel, xt, t: float) -> tuple[float, np.ndarray]:
    """Target path G -> reversal -> C with the unknown-probability loss.

    C receives the plain gradient and G the reversed one. Returns the loss
    and the per-sample unknown probabilities.
    """
    K = model.K
    f, g_trace = model.generator.forward(xt)
    out, c_trace = model.classifier.forward(model.reversal.forward(f, True)[0])
    probs = nn.softmax(out)
    loss, p_grad = nn.adv_bce(probs[:, K], t)
    grad = model.classifier.backward(c_trace, nn.softmax_column_backward(probs, K, p_grad))
    model.generator.backward(g_trace, model.reversal.backward(None, grad))
    return loss, probs[:, K]


def osbp_step(model: OSBPModel, xs, ys, xt, cfg: TrainConfig) -> StepStats:
    """One simultaneous update of G and C on a source and a target minibatch."""
    if not 0.0 < cfg.t < 1.0:
        raise ConfigError(f"t must lie strictly between 0 and 1, got {cfg.t}")
    if not model.open_set:
        raise ValidationError("osbp_step needs a model with an unknown column")
    if len(xs) == 0 or len(xt) == 0:
        raise ValidationError("source and target batches must be non-empty")
    model.train()
    model.reversal.weight = cfg.grl_weight

    L_s = source_backward(model, xs, ys)
    L_adv, p_unknown = adversarial_backward(model, xt, cfg.t)
    update(model, cfg)
    return StepStats(L_s, L_adv, float(p_unknown.mean()))


def schedule(n_source: int, n_target: int, cfg: TrainConfig):
    """Yield ``(epoch, source_idx, target_idx)`` for every iteration of a run.

    An epoch has ``ceil(max(n_source, n_target) / m)`` iterations and the
    smaller set is cycled with a fresh shuffle. With ``n_target == 0`` the
    target indices are ``None``.
    """
    m = cfg.batch_size
    n_it = iterations_per_epoch(n_source, n_target, m)
    for epoch in range(cfg.epochs):
        src = epoch_plan(n_source, m, n_it, cfg.seed, SOURCE_STREAM, epoch)
        tgt = epoch_plan(n_target, m, n_it, cfg.seed, TARGET_STREAM, epoch) if n_target else [None] * n_it
        for s_idx, t_idx in zip(src, tgt):
            yield epoch, s_idx, t_idx


def _check_scenario(scenario: OpenSetScenario):
    if len(scenario.source) == 0 or len(scenario.target) == 0:
        raise ValidationError("scenario has an empty source or target set")


def train(model: OSBPModel, scenario: OpenSetScenario, cfg: TrainConfig,
          sink: Callable[[int, StepStats], None] | None = None) -> list[StepStats]:
    """Run the adversarial minibatch loop; returns per-epoch mean statistics."""
    cfg.validate()
    _check_scenario(scenario)
    xs, ys = scenario.source.features, scenario.source.labels
    xt = scenario.target_features
    history: list[StepStats] = []
    acc: list[StepStats] = []
    current = 0

    def close_epoch(epoch):
        mean = StepStats(*(float(np.mean([getattr(s, k) for s in acc]))
                           for k in ("L_s", "L_adv", "mean_p_unknown")))
        history.append(mean)
        acc.clear()
        if sink is not None:
            sink(epoch, mean)

    for epoch, s_idx, t_idx in schedule(len(xs), len(xt), cfg):
        if epoch != current:
            close_epoch(current)
            current = epoch
        acc.append(osbp_step(model, xs[s_idx], ys[s_idx], xt[t_idx], cfg))
    if acc:
        close_epoch(current)
    return history


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _dump_stack(stack: nn.LayerStack) -> list[dict]:
    out = []
    for layer in stack.layers:
        entry = {"spec": layer.spec()}
        entry["params"] = {p.name: {"shape": list(p.shape), "data": p.value.ravel().tolist()}
                           for p in layer.params()}
        entry["buffers"] = {k: v.tolist() for k, v in layer.buffers().items()}
        out.append(entry)
    return out


def _load_stack(entries: list[dict], where: str) -> nn.LayerStack:
    layers = []
    for i, entry in enumerate(entries):
        try:
            layer = nn.layer_from_spec(entry["spec"])
        except (KeyError, ValidationError, ConfigError) as exc:
            raise FormatError(f"{where} layer {i}: bad spec ({exc})") from None
        for p in layer.params():
            stored = entry["params"].get(p.name)
            if stored is None or tuple(stored["shape"]) != p.shape:
                raise FormatError(f"{where} layer {i}: parameter {p.name!r} missing or mis-shaped")
            p.value[...] = np.array(stored["data"], dtype=np.float64).reshape(p.shape)
        for name, buf in layer.buffers().items():
            buf[...] = np.array(entry["buffers"][name], dtype=np.float64)
        layers.append(layer)
    return nn.LayerStack(layers)


def save_checkpoint(path, model: OSBPModel, meta: dict | None = None):
    """Write layer specs, parameters and running statistics as JSON.

    Floats are written with Python's shortest round-trip repr, so reloading
    restores every float64 bit-exactly.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "K": model.K,
        "open_set": model.open_set,
        "grl_weight": model.reversal.weight,
        "generator": _dump_stack(model.generator),
        "classifier": _dump_stack(model.classifier),
        "meta": meta or {},
    }
    with open(path, "w") as f:
        json.dump(doc, f)
        f.write("\n")


def load_checkpoint(path) -> tuple[OSBPModel, dict]:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not a checkpoint ({exc})") from None
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint format/version")
    model = OSBPModel(
        _load_stack(doc["generator"], "generator"),
        _load_stack(doc["classifier"], "classifier"),
        doc["K"],
        doc["open_set"],
        doc.get("grl_weight", 1.0),
    )
    return model.eval(), doc.get("meta", {})


def compare_architecture(expected: OSBPModel, actual: OSBPModel) -> str | None:
    """Describe the first layer where two models' specs differ, or ``None``."""
    for name in ("generator", "classifier"):
        a = getattr(expected, name).spec()
        b = getattr(actual, name).spec()
        for i in range(max(len(a), len(b))):
            sa = a[i] if i < len(a) else None
            sb = b[i] if i < len(b) else None
            if sa != sb:
                return f"{name} layer {i}: expected {sa}, checkpoint has {sb}"
    return None


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["hidden"] = list(cfg.hidden)
    d["classifier_hidden"] = list(cfg.classifier_hidden)
    d["freeze"] = list(cfg.freeze)
    return d
