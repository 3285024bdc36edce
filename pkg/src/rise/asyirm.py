"""Asymmetric IRM losses: radial cross-entropy, gradient alignment, angular
separation, and the weighted total objective."""

from dataclasses import dataclass

import torch

from .errors import ConfigError, ContractError
from .numerics import DTYPE, grad, l2_norm, softmax_ce


@dataclass(frozen=True)
class AngularConfig:
    q_pos: float = 0.9
    q_neg: float = 0.3
    tau: float = 0.1

    def __post_init__(self):
        if not (-1 <= self.q_neg < self.q_pos <= 1):
            raise ConfigError("need -1 <= q_neg < q_pos <= 1")
        if self.tau <= 0:
            raise ConfigError("temperature must be positive")


@dataclass(frozen=True)
class LossWeights:
    irm: float = 0.5
    ang: float = 0.5
    mmsd: float = 1.0
    aux: float = 1.0

    def __post_init__(self):
        if min(self.irm, self.ang, self.mmsd, self.aux) < 0:
            raise ConfigError("loss weights must be non-negative")


@dataclass
class DomainGradient:
    domain: int
    branch: str
    g: torch.Tensor


def radial_ce(logits, labels):
    """Mean two-class cross-entropy on branch logits."""
    return softmax_ce(logits, labels, reduction="mean")


def domain_gradients(features, labels, domains, classifier, branch="global",
                     build_graph=True):
    """Average feature gradient of the classification loss, per domain.

    ``g_e = mean_{i in e} d CE(classifier(z_i), y_i) / d z_i``. With
    ``build_graph`` the result stays differentiable w.r.t. the encoder and
    the classifier; otherwise features are detached first, so only the
    classifier parameters can receive gradient from a penalty built on it.
    """
    domains = torch.as_tensor(domains)
    labels = torch.as_tensor(labels, dtype=torch.long)
    ids = torch.unique(domains, sorted=True)
    if len(ids) < 2:
        raise ContractError("domain gradients need at least two domains in the batch")
    z = features
    if not (build_graph and features.requires_grad):
        z = features.detach().requires_grad_(True)
    per_sample = softmax_ce(classifier(z), labels)
    counts = torch.stack([(domains == e).sum() for e in ids]).to(DTYPE)
    slot = torch.searchsorted(ids, domains)
    # each row's gradient lands in its own row of dz, pre-scaled by 1/n_e
    weighted = (per_sample / counts[slot]).sum()
    dz = grad(weighted, z, build_graph=True)
    return [DomainGradient(int(e), branch, dz[domains == e].sum(dim=0))
            for e in ids]


def irm_penalty(gradients):
    """Sum over branches of ``sum_{i<j} |g_i - g_j|^2`` across domains."""
    by_branch = {}
    for dg in gradients:
        by_branch.setdefault(dg.branch, []).append(dg)
    total = torch.zeros((), dtype=DTYPE)
    for items in by_branch.values():
        if len(items) < 2:
            raise ContractError("irm_penalty needs at least two domains per branch")
        items = sorted(items, key=lambda dg: dg.domain)
        for i in range(len(items)):
            for j in range(i + 1, len(items)):
                diff = items[i].g - items[j].g
                total = total + (diff * diff).sum()
    return total


def angular_loss(features, domains, cfg=AngularConfig()):
    """Hinge loss on pairwise cosines of L2-normalised features.

    Same-domain pairs are pulled above ``q_pos``, cross-domain pairs pushed
    below ``q_neg``; each hinge mean is divided by ``tau``. An empty pair set
    contributes zero.
    """
    domains = torch.as_tensor(domains)
    norm = l2_norm(features, dim=-1, keepdim=True)
    unit = features / torch.clamp(norm, min=1e-12)
    cos = unit @ unit.T
    n = features.shape[0]
    upper = torch.triu(torch.ones(n, n, dtype=torch.bool), diagonal=1)
    same = domains[:, None] == domains[None, :]
    pos, neg = upper & same, upper & ~same
    loss = torch.zeros((), dtype=DTYPE)
    if pos.any():
        loss = loss + torch.relu(cfg.q_pos - cos[pos]).mean() / cfg.tau
    if neg.any():
        loss = loss + torch.relu(cos[neg] - cfg.q_neg).mean() / cfg.tau
    return loss


@dataclass(frozen=True)
class LossSwitches:
    irm: bool = True
    angular: bool = True
    second_order: bool = True


def total_loss(outputs, labels, domains, model, weights=LossWeights(),
               angular_cfg=AngularConfig(), switches=LossSwitches(), mmsd=None):
    """Weighted objective ``L_CLS + l1 L_IRM + l2 L_ang + l3 L_MMSD + l4 L_aux``.

    Returns ``(total, parts, raw)``: ``parts`` holds the weighted terms
    (they sum to ``total``), ``raw`` the unweighted ones.
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    domains = torch.as_tensor(domains)
    branches = [("global", outputs["global_feature"], outputs["global_logits"],
                 model.global_classifier)]
    branches += [(f"m{m}", z, lg, clf) for m, (z, lg, clf) in enumerate(
        zip(outputs["features"], outputs["logits"], model.classifiers))]

    zero = torch.zeros((), dtype=DTYPE)
    raw = {"cls": zero, "irm": zero, "ang": zero, "mmsd": zero, "aux": zero}
    raw["cls"] = sum(radial_ce(lg, labels) for _, _, lg, _ in branches)
    multi_domain = len(torch.unique(domains)) >= 2
    if switches.irm and weights.irm > 0 and multi_domain:
        grads = []
        for name, z, _, clf in branches:
            grads += domain_gradients(z, labels, domains, clf, name,
                                      build_graph=switches.second_order)
        raw["irm"] = irm_penalty(grads)
    if switches.angular and weights.ang > 0:
        raw["ang"] = sum(angular_loss(z, domains, angular_cfg) for _, z, _, _ in branches)
    if mmsd is not None:
        raw["mmsd"] = mmsd
    raw["aux"] = softmax_ce(outputs["aux_logits"], labels, reduction="mean")

    parts = {
        "cls": raw["cls"],
        "irm": weights.irm * raw["irm"],
        "ang": weights.ang * raw["ang"],
        "mmsd": weights.mmsd * raw["mmsd"],
        "aux": weights.aux * raw["aux"],
    }
    total = parts["cls"] + parts["irm"] + parts["ang"] + parts["mmsd"] + parts["aux"]
    return total, parts, raw
