"""Forward path: per-modality token encoders, projectors and radial heads.

Each modality vector is lifted to a token map, encoded token-wise by a small
MLP and mean-pooled. Per-modality branches project the pooled feature and
classify it radially; the global branch projects the concatenation of all
pooled features. An auxiliary linear head reads the same concatenation.
"""

import hashlib
import json
import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DimensionError
from .numerics import DTYPE, gelu, l2_norm, softplus
from .synthdata import token_pattern

RADIAL = "radial"
REVERSED = "reversed"
LINEAR = "linear"


@dataclass
class ModelConfig:
    n_modalities: int = 3
    in_dim: int = 16
    grid: tuple = (8, 8)
    modulation: float = 0.5
    hidden: int = 64
    feat_dim: int = 32
    classifier: str = RADIAL
    radius_init: float = 0.0
    gelu: str = "none"  # "tanh" selects the tanh approximation

    def to_json(self):
        out = asdict(self)
        out["grid"] = list(self.grid)
        return out


def _init_affine(layer, gen):
    bound = 1.0 / math.sqrt(layer.in_features)
    with torch.no_grad():
        layer.weight.copy_((torch.rand(layer.weight.shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound)
        layer.bias.zero_()


class Encoder(nn.Module):
    """Token-wise two-layer perceptron ``d -> hidden -> feat_dim``."""

    def __init__(self, in_dim, hidden, out_dim, approximate="none"):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden, dtype=DTYPE)
        self.fc2 = nn.Linear(hidden, out_dim, dtype=DTYPE)
        self.approximate = approximate

    def forward(self, tokens):
        if tokens.shape[-1] != self.fc1.in_features:
            raise DimensionError(
                f"encoder expects {self.fc1.in_features} channels, got {tokens.shape[-1]}")
        return self.fc2(gelu(self.fc1(tokens), self.approximate))


class Projector(nn.Module):
    """Linear -> GELU -> Linear with a bottleneck of a quarter of the width."""

    def __init__(self, width, approximate="none"):
        super().__init__()
        hidden = max(1, width // 4)
        self.fc1 = nn.Linear(width, hidden, dtype=DTYPE)
        self.fc2 = nn.Linear(hidden, width, dtype=DTYPE)
        self.approximate = approximate

    def forward(self, z):
        return self.fc2(gelu(self.fc1(z), self.approximate))


class RadialClassifier(nn.Module):
    """Spherical decision boundary of radius ``softplus(s)`` around the origin.

    Logits are ``(r - |z|, |z| - r)`` for (live, spoof); ``reversed=True``
    swaps them so that spoofs are expected inside the sphere.
    """

    def __init__(self, init=0.0, reversed=False):
        super().__init__()
        self.raw = nn.Parameter(torch.tensor(float(init), dtype=DTYPE))
        self.reversed = reversed

    @property
    def radius(self):
        return softplus(self.raw)

    def forward(self, z):
        return radial_logits(z, self.radius, self.reversed)


class LinearClassifier(nn.Module):
    """Hyperplane head producing two logits."""

    def __init__(self, width):
        super().__init__()
        self.fc = nn.Linear(width, 2, dtype=DTYPE)

    def forward(self, z):
        return self.fc(z)


def radial_logits(z, radius, reversed=False):
    norm = l2_norm(z, dim=-1)
    live = radius - norm
    logits = torch.stack([live, -live], dim=-1)
    return logits.flip(-1) if reversed else logits


def make_classifier(kind, width, radius_init=0.0):
    if kind == RADIAL:
        return RadialClassifier(radius_init)
    if kind == REVERSED:
        return RadialClassifier(radius_init, reversed=True)
    if kind == LINEAR:
        return LinearClassifier(width)
    raise ConfigError(f"unknown classifier kind {kind!r}")


class RiseModel(nn.Module):
    def __init__(self, config=None, seed=0):
        super().__init__()
        self.config = cfg = config or ModelConfig()
        act = cfg.gelu
        m, c = cfg.n_modalities, cfg.feat_dim
        self.encoders = nn.ModuleList(Encoder(cfg.in_dim, cfg.hidden, c, act) for _ in range(m))
        self.projectors = nn.ModuleList(Projector(c, act) for _ in range(m))
        self.classifiers = nn.ModuleList(
            make_classifier(cfg.classifier, c, cfg.radius_init) for _ in range(m))
        self.global_projector = Projector(m * c, act)
        self.global_classifier = make_classifier(cfg.classifier, m * c, cfg.radius_init)
        self.aux = nn.Linear(m * c, 2, dtype=DTYPE)
        pattern = token_pattern(tuple(cfg.grid), cfg.in_dim)
        self.register_buffer("pattern", torch.as_tensor(pattern, dtype=DTYPE))
        gen = torch.Generator().manual_seed(int(seed))
        for mod in self.modules():
            if isinstance(mod, nn.Linear):
                _init_affine(mod, gen)

    def lift(self, x):
        """``(B, M, d)`` vectors -> ``(B, M, H, W, d)`` token maps."""
        return x[:, :, None, None, :] * (1.0 + self.config.modulation * self.pattern)

    def encode(self, x_m, m):
        """Token features of modality ``m`` for raw vectors ``(B, d)``."""
        x_m = torch.as_tensor(x_m, dtype=DTYPE)
        if x_m.shape[-1] != self.config.in_dim:
            raise DimensionError(f"modality input has width {x_m.shape[-1]}")
        tokens = x_m[:, None, None, :] * (1.0 + self.config.modulation * self.pattern)
        return self.encoders[m](tokens)

    def forward(self, x, mask=None):
        x = torch.as_tensor(x, dtype=DTYPE)
        if x.dim() != 3 or x.shape[1] != self.config.n_modalities or x.shape[2] != self.config.in_dim:
            raise DimensionError(f"expected (B, {self.config.n_modalities}, "
                                 f"{self.config.in_dim}) input, got {tuple(x.shape)}")
        if mask is not None:
            # missing modalities are represented by all-zero inputs
            x = x * torch.as_tensor(mask, dtype=DTYPE)[:, :, None]
        maps = [self.encode(x[:, m], m) for m in range(self.config.n_modalities)]
        pooled = [t.mean(dim=(1, 2)) for t in maps]
        feats = [proj(u) for proj, u in zip(self.projectors, pooled)]
        logits = [clf(z) for clf, z in zip(self.classifiers, feats)]
        joint = torch.cat(pooled, dim=-1)
        z_global = self.global_projector(joint)
        return {
            "maps": maps,
            "pooled": pooled,
            "features": feats,
            "logits": logits,
            "joint": joint,
            "global_feature": z_global,
            "global_logits": self.global_classifier(z_global),
            "aux_logits": self.aux(joint),
        }

    def spoof_score(self, x, mask=None):
        """Spoof probability of the global branch; no graph is recorded."""
        with torch.no_grad():
            out = self.forward(x, mask)
            return torch.softmax(out["global_logits"], dim=-1)[:, 1].numpy()

    def radii(self):
        clfs = list(self.classifiers) + [self.global_classifier]
        return [float(c.radius.detach()) for c in clfs if isinstance(c, RadialClassifier)]


# ---------------------------------------------------------------- checkpoints

def config_hash(obj):
    blob = json.dumps(obj, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(prefix, model, seed=0, extra=None):
    """Write ``<prefix>.bin`` (float64 parameters, state-dict order) and
    ``<prefix>.json`` (names, shapes, seed, config and its hash)."""
    state = model.state_dict()
    names = [k for k in state if k != "pattern"]
    flat = np.concatenate([state[k].detach().numpy().reshape(-1) for k in names])
    manifest = {
        "format": "rise-checkpoint", "version": 1, "seed": int(seed),
        "model_config": model.config.to_json(),
        "config_hash": config_hash(model.config.to_json()),
        "tensors": [{"name": k, "shape": list(state[k].shape)} for k in names],
        "n_values": int(flat.size), "dtype": "<f8",
    }
    if extra:
        manifest["extra"] = extra
    with open(f"{prefix}.bin", "wb") as fh:
        fh.write(flat.astype("<f8").tobytes())
    with open(f"{prefix}.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def load_checkpoint(prefix):
    with open(f"{prefix}.json") as fh:
        manifest = json.load(fh)
    cfg_obj = dict(manifest["model_config"])
    cfg_obj["grid"] = tuple(cfg_obj["grid"])
    model = RiseModel(ModelConfig(**cfg_obj), seed=manifest["seed"])
    flat = np.fromfile(f"{prefix}.bin", dtype="<f8")
    if flat.size != manifest["n_values"]:
        raise ConfigError(f"checkpoint {prefix}.bin is truncated")
    state, pos = {}, 0
    for entry in manifest["tensors"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        state[entry["name"]] = torch.as_tensor(
            flat[pos:pos + size].reshape(entry["shape"]), dtype=DTYPE)
        pos += size
    state["pattern"] = model.pattern
    model.load_state_dict(state)
    return model, manifest
