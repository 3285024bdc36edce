"""Balanced sampling, the optimisation loop, evaluation and ablation arms."""

import csv
import json
import math
import os
from dataclasses import dataclass, field, asdict, fields, replace

import numpy as np
import torch

from . import metrics
from .asyirm import AngularConfig, LossSwitches, LossWeights, total_loss
from .errors import ConfigError, MetricError, NonFiniteLossError
from .mmsd import Decoupler, MMSDConfig, mmsd_total
from .model import LINEAR, RADIAL, REVERSED, ModelConfig, RiseModel, config_hash, save_checkpoint
from .numerics import DTYPE

IRM_TYPES = ("asym", "sym-linear", "reversed-asym", "none")
_HEAD_FOR_IRM = {"asym": RADIAL, "sym-linear": LINEAR, "reversed-asym": REVERSED, "none": LINEAR}


@dataclass(frozen=True)
class Ablation:
    """Switches for the ablation arms.

    ``asyirm=False`` is the plain-ERM head: linear classifier, no gradient
    alignment, no angular term (same as ``irm_type="none"``). ``align=False``
    keeps the radial head but drops the alignment penalty.
    """

    asyirm: bool = True
    mmsd: bool = True
    irm_type: str = "asym"
    align: bool = True
    angular: bool = True
    second_order: bool = True
    mix_domain: str = "freq"
    target: str = "HF&LF"
    shuffle: bool = True
    stop_grad: bool = False

    def __post_init__(self):
        if self.irm_type not in IRM_TYPES:
            raise ConfigError(f"irm_type must be one of {IRM_TYPES}")
        MMSDConfig(mix_domain=self.mix_domain, target=self.target)

    @property
    def effective_irm(self):
        return self.irm_type if self.asyirm else "none"

    def head(self):
        return _HEAD_FOR_IRM[self.effective_irm]

    def switches(self):
        on = self.effective_irm != "none"
        return LossSwitches(irm=on and self.align, angular=on and self.angular,
                            second_order=self.second_order)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-5
    weight_decay: float = 1e-3
    decoupled_decay: bool = False
    batch_size: int = 24
    epochs: int = 60
    seed: int = 0
    radius_init: float = 0.0
    threshold: str = metrics.EER_POLICY
    freq_radius: float = 1.0
    hidden: int = 64
    feat_dim: int = 32
    grid: tuple = (8, 8)
    modulation: float = 0.5
    weights: LossWeights = field(default_factory=LossWeights)
    angular_cfg: AngularConfig = field(default_factory=AngularConfig)
    ablation: Ablation = field(default_factory=Ablation)

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size <= 0 or self.epochs <= 0:
            raise ConfigError("learning rate, batch size and epochs must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight decay must be non-negative")
        if self.threshold not in (metrics.EER_POLICY, metrics.FIXED_POLICY):
            raise ConfigError(f"unknown threshold policy {self.threshold!r}")

    def to_flat(self):
        """Flat ``{"dotted.key": value}`` view used by config files."""
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("weights", "angular_cfg", "ablation"):
                out.update({f"{f.name}.{k}": x for k, x in asdict(v).items()})
            else:
                out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_flat(cls, flat):
        top, nested = {}, {"weights": {}, "angular_cfg": {}, "ablation": {}}
        names = {f.name for f in fields(cls)}
        for key, value in flat.items():
            head, _, rest = key.partition(".")
            if rest:
                if head not in nested:
                    raise ConfigError(f"unknown config key {key!r}")
                nested[head][rest] = value
            elif key in names:
                top[key] = tuple(value) if key == "grid" else value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        try:
            return cls(weights=LossWeights(**nested["weights"]),
                       angular_cfg=AngularConfig(**nested["angular_cfg"]),
                       ablation=Ablation(**nested["ablation"]), **top)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def model_config(self, n_modalities, in_dim):
        return ModelConfig(n_modalities=n_modalities, in_dim=in_dim, grid=tuple(self.grid),
                           modulation=self.modulation, hidden=self.hidden,
                           feat_dim=self.feat_dim, classifier=self.ablation.head(),
                           radius_init=self.radius_init)

    def mmsd_config(self):
        a = self.ablation
        return MMSDConfig(freq_radius=self.freq_radius, mix_domain=a.mix_domain,
                          target=a.target, shuffle=a.shuffle, stop_grad=a.stop_grad)


# ---------------------------------------------------------------- sampling

def balanced_batches(samples, batch_size, rng):
    """One epoch of index batches balanced over domains and, within a domain,
    over classes (the odd sample alternates between classes).

    The epoch has ``len(samples) // batch_size`` batches; groups smaller than
    their share are cycled with a fresh shuffle each pass.
    """
    doms = np.unique(samples.domain)
    n_dom = len(doms)
    if batch_size % n_dom:
        raise ConfigError(f"batch size {batch_size} is not divisible by {n_dom} domains")
    per_dom = batch_size // n_dom
    if per_dom < 2:
        raise ConfigError(f"batch size {batch_size} leaves fewer than 2 samples per domain")
    groups = {}
    for e in doms:
        for y in (0, 1):
            idx = np.flatnonzero((samples.domain == e) & (samples.y == y))
            if idx.size == 0:
                raise ConfigError(f"domain {e} has no samples of class {y}")
            groups[e, y] = [idx, rng.permutation(idx), 0]

    def take(key, k):
        idx, order, pos = groups[key]
        out = []
        while k > 0:
            if pos == len(order):
                order, pos = rng.permutation(idx), 0
            step = min(k, len(order) - pos)
            out.append(order[pos:pos + step])
            pos += step
            k -= step
        groups[key][1:] = [order, pos]
        return out

    n_batches = max(1, len(samples) // batch_size)
    for b in range(n_batches):
        batch = []
        for j, e in enumerate(doms):
            extra = (b + j) % 2
            n_live = per_dom // 2 + (per_dom % 2) * extra
            batch += take((e, 0), n_live) + take((e, 1), per_dom - n_live)
        yield np.concatenate(batch)


# ---------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state, lr, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8,
              decoupled=False):
    """In-place Adam update with bias correction.

    Weight decay is added to the gradient (L2 style) unless ``decoupled``, in
    which case parameters shrink by ``lr * weight_decay`` directly.
    """
    params, grads = list(params), list(grads)
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    if len(state.m) != len(params) or any(m.shape != p.shape for m, p in zip(state.m, params)):
        raise ConfigError("optimiser state does not match the parameters")
    b1, b2 = betas
    state.step += 1
    c1, c2 = 1 - b1 ** state.step, 1 - b2 ** state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            g = torch.zeros_like(p) if g is None else g
            if weight_decay and not decoupled:
                g = g + weight_decay * p
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            if weight_decay and decoupled:
                p.mul_(1 - lr * weight_decay)
            p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + eps))
    return params


# ---------------------------------------------------------------- evaluation

@dataclass
class MetricsReport:
    hter: float
    auc: float
    threshold: float
    policy: str
    far: float
    frr: float
    protocol: str
    config_hash: str
    epochs: list = field(default_factory=list)

    def __post_init__(self):
        if not 0 <= self.hter <= 1 or not 0 <= self.auc <= 1:
            raise MetricError("metric outside its valid range")

    def to_json(self):
        return asdict(self)

    def to_text(self):
        rows = [("protocol", self.protocol), ("HTER", f"{self.hter:.4f}"),
                ("AUC", f"{self.auc:.4f}"), ("FAR", f"{self.far:.4f}"),
                ("FRR", f"{self.frr:.4f}"),
                ("threshold", f"{self.threshold:.6g} ({self.policy})"),
                ("config", self.config_hash), ("epochs", str(len(self.epochs)))]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows) + "\n"


def scores_for(model, samples, chunk=2048):
    out = [model.spoof_score(samples.x[i:i + chunk], samples.mask[i:i + chunk])
           for i in range(0, len(samples), chunk)]
    return np.concatenate(out)


def evaluate(model, samples, policy=metrics.EER_POLICY, protocol="", cfg_hash="", epochs=()):
    scores = scores_for(model, samples)
    labels = samples.y
    auc = metrics.auc_rank(scores, labels)
    thr = metrics.resolve_threshold(scores, labels, policy)
    far, frr = metrics.error_rates(scores, labels, thr)
    return MetricsReport((far + frr) / 2, auc, thr, policy, far, frr, protocol, cfg_hash,
                         list(epochs))


def modality_features(model, samples, chunk=2048):
    """Pooled per-modality encoder features, one ``(N, C)`` block per modality."""
    blocks = None
    with torch.no_grad():
        for i in range(0, len(samples), chunk):
            out = model(samples.x[i:i + chunk], samples.mask[i:i + chunk])
            part = [p.numpy() for p in out["pooled"]]
            blocks = part if blocks is None else [np.vstack([a, b]) for a, b in zip(blocks, part)]
    return blocks


# ---------------------------------------------------------------- training

@dataclass
class RunResult:
    report: MetricsReport
    model: RiseModel
    decoupler: Decoupler
    config: TrainConfig


def run_hash(config, protocol_name):
    return config_hash({"train": config.to_flat(), "protocol": protocol_name})


def _write_trace(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def train_model(config, train, log=None):
    """Fit a model on ``train``; returns ``(model, decoupler, epoch_rows)``.

    Deterministic given ``config.seed``: model initialisation, batching and
    MMSD mixing all draw from seed-derived generators.
    """
    n_mod, in_dim = train.x.shape[1], train.x.shape[2]
    model = RiseModel(config.model_config(n_mod, in_dim), seed=config.seed)
    decoupler = Decoupler(config.feat_dim, n_mod)
    gen = torch.Generator().manual_seed(config.seed + 1)
    for lin in decoupler.modules():
        if isinstance(lin, torch.nn.Linear):
            bound = 1.0 / math.sqrt(lin.in_features)
            with torch.no_grad():
                lin.weight.copy_((torch.rand(lin.weight.shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound)
                lin.bias.zero_()
    use_mmsd = config.ablation.mmsd
    params = list(model.parameters()) + (list(decoupler.parameters()) if use_mmsd else [])
    state = AdamState()
    batch_rng = np.random.default_rng([config.seed, 11])
    mix_rng = np.random.default_rng([config.seed, 12])
    switches = config.ablation.switches()
    mcfg = config.mmsd_config()
    rows = []
    for epoch in range(config.epochs):
        sums, n_steps = {}, 0
        for step, idx in enumerate(balanced_batches(train, config.batch_size, batch_rng)):
            batch = train.subset(idx)
            out = model(batch.x, batch.mask)
            l_mmsd = None
            if use_mmsd:
                l_mmsd, _ = mmsd_total(out["maps"], decoupler, mix_rng, mcfg)
            loss, parts, _ = total_loss(out, batch.y, batch.domain, model, config.weights,
                                        config.angular_cfg, switches, l_mmsd)
            if not torch.isfinite(loss):
                dump = {"epoch": epoch, "step": step,
                        "parts": {k: float(v.detach()) for k, v in parts.items()},
                        "radii": model.radii()}
                raise NonFiniteLossError(f"non-finite loss at epoch {epoch} step {step}", dump)
            for p in params:
                p.grad = None
            loss.backward()
            adam_step(params, [p.grad for p in params], state, config.lr,
                      config.weight_decay, decoupled=config.decoupled_decay)
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + float(v.detach())
            sums["total"] = sums.get("total", 0.0) + float(loss.detach())
            n_steps += 1
        row = {"epoch": epoch, **{k: v / n_steps for k, v in sums.items()}}
        radii = model.radii()
        if radii:
            row["radius_global"] = radii[-1]
        rows.append(row)
        if log:
            log(row)
    return model, decoupler, rows


def run_experiment(config, dataset, protocol, out_dir=None, log=None):
    """Train on the protocol's sources and evaluate on its targets."""
    from .synthdata import apply_protocol

    split_rng = np.random.default_rng([config.seed, 10])
    train, evaluation = apply_protocol(dataset, protocol, split_rng)
    model, decoupler, rows = train_model(config, train, log)
    h = run_hash(config, protocol.name)
    report = evaluate(model, evaluation, config.threshold, protocol.name, h, rows)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        _write_trace(os.path.join(out_dir, "trace.csv"), rows)
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            json.dump(report.to_json(), fh, indent=2, sort_keys=True)
        with open(os.path.join(out_dir, "report.txt"), "w") as fh:
            fh.write(report.to_text())
        save_checkpoint(os.path.join(out_dir, "model"), model, config.seed,
                        {"config_hash": h, "train_config": config.to_flat()})
    return RunResult(report, model, decoupler, config)


# ---------------------------------------------------------------- ablation arms

def coarse_arms():
    """The 2x2 grid over the two components."""
    return {
        "baseline": Ablation(asyirm=False, mmsd=False),
        "asyirm": Ablation(asyirm=True, mmsd=False),
        "mmsd": Ablation(asyirm=False, mmsd=True),
        "full": Ablation(),
    }


def fine_arms():
    """Head variants plus the mixing/target/shuffle grid of the pretext task."""
    arms = {
        "irm-vanilla": Ablation(irm_type="sym-linear"),
        "irm-reversed": Ablation(irm_type="reversed-asym"),
        "no-align": Ablation(align=False),
        "no-angular": Ablation(angular=False),
    }
    # under spatial mixing "LF"/"HF" address the inner disc / outer ring
    for mix in ("spatial", "freq"):
        for target in ("HF", "LF", "HF&LF", "modality"):
            for shuffle in (False, True):
                tag = f"{mix[0].upper()}-{target}-{'shuf' if shuffle else 'noshuf'}"
                arms[tag] = Ablation(mix_domain=mix, target=target, shuffle=shuffle)
    return arms


def with_ablation(config, ablation, seed=None):
    return replace(config, ablation=ablation, seed=config.seed if seed is None else seed)
