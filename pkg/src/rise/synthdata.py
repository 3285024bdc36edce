"""Synthetic multimodal, multi-domain live/spoof data.

Live samples are isotropic Gaussians around a domain offset, spoof samples a
Gaussian mixture over attack types whose second moment is an isotropic floor
plus a low-rank sum of attack directions. Each domain applies its own
orthogonal transform and offset per modality, draws its own spoof noise
floors and sees its own subset of attacks. One attack is held back from
every source domain so that target domains contain an unseen attack.

Arrays use the layout ``x[n, m, j]`` (sample, modality, feature).
"""

import json
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.linalg import expm

from .errors import ConfigError

MODALITIES = ("RGB", "DEP", "IR")


@dataclass(frozen=True)
class AttackComponent:
    prior: float
    direction: np.ndarray  # concatenated over modalities, length M*d
    attack_id: int = 0

    def __post_init__(self):
        if not 0.0 <= self.prior <= 1.0:
            raise ConfigError(f"attack prior {self.prior} outside [0, 1]")
        if np.linalg.norm(self.direction) <= 0:
            raise ConfigError("attack direction must be nonzero")

    def block(self, n_modalities):
        return np.asarray(self.direction).reshape(n_modalities, -1)


@dataclass
class DomainSpec:
    domain_id: int
    transforms: np.ndarray  # (M, d, d), orthogonal
    offsets: np.ndarray  # (M, d)
    sigma0: float
    sigma_eff: np.ndarray  # (M,)
    attacks: list
    availability: np.ndarray = None

    def __post_init__(self):
        self.transforms = np.asarray(self.transforms, dtype=float)
        self.offsets = np.asarray(self.offsets, dtype=float)
        self.sigma_eff = np.asarray(self.sigma_eff, dtype=float)
        m, d, _ = self.transforms.shape
        if self.availability is None:
            self.availability = np.ones(m, dtype=bool)
        eye = np.eye(d)
        for q in self.transforms:
            if np.abs(q.T @ q - eye).max() > 1e-10:
                raise ConfigError("domain transform is not orthogonal")
        if self.sigma0 <= 0 or np.any(self.sigma_eff < self.sigma0):
            raise ConfigError("need sigma_eff >= sigma0 > 0")
        if self.attacks:
            total = sum(a.prior for a in self.attacks)
            if abs(total - 1.0) > 1e-9:
                raise ConfigError(f"attack priors sum to {total}, not 1")

    @property
    def n_modalities(self):
        return self.transforms.shape[0]

    @property
    def dim(self):
        return self.transforms.shape[1]

    def to_json(self):
        return {
            "domain_id": int(self.domain_id),
            "transforms": self.transforms.tolist(),
            "offsets": self.offsets.tolist(),
            "sigma0": float(self.sigma0),
            "sigma_eff": self.sigma_eff.tolist(),
            "attacks": [{"attack_id": int(a.attack_id), "prior": float(a.prior),
                         "direction": np.asarray(a.direction).tolist()}
                        for a in self.attacks],
            "availability": self.availability.astype(bool).tolist(),
        }

    @classmethod
    def from_json(cls, obj):
        attacks = [AttackComponent(a["prior"], np.asarray(a["direction"]), a["attack_id"])
                   for a in obj["attacks"]]
        return cls(obj["domain_id"], np.asarray(obj["transforms"]),
                   np.asarray(obj["offsets"]), obj["sigma0"],
                   np.asarray(obj["sigma_eff"]), attacks,
                   np.asarray(obj["availability"], dtype=bool))


@dataclass
class SyntheticSample:
    x: np.ndarray  # (M, d), or (M, H, W, d) in token mode
    label: int
    domain: int
    attack: int
    mask: np.ndarray

    def __post_init__(self):
        if (self.attack >= 0) != (self.label == 1):
            raise ConfigError("attack index must be >= 0 exactly for spoofs")


@dataclass
class SampleSet:
    """A column-oriented batch of samples."""

    x: np.ndarray
    y: np.ndarray
    domain: np.ndarray
    attack: np.ndarray
    mask: np.ndarray

    def __len__(self):
        return len(self.y)

    def subset(self, idx):
        idx = np.asarray(idx)
        return SampleSet(self.x[idx], self.y[idx], self.domain[idx],
                         self.attack[idx], self.mask[idx])

    def sample(self, i):
        return SyntheticSample(self.x[i], int(self.y[i]), int(self.domain[i]),
                               int(self.attack[i]), self.mask[i])

    @staticmethod
    def concat(parts):
        parts = list(parts)
        return SampleSet(*(np.concatenate([getattr(p, f) for p in parts])
                           for f in ("x", "y", "domain", "attack", "mask")))


def _mask_for(spec, n):
    return np.tile(spec.availability.astype(bool), (n, 1))


def _apply_domain(spec, latent):
    # latent (n, M, d) -> Q_m latent_m + b_m, with unavailable modalities zeroed
    x = np.einsum("mij,nmj->nmi", spec.transforms, latent) + spec.offsets
    x[:, ~spec.availability, :] = 0.0
    return x


def sample_live(spec, rng, n=None):
    """Live draws ``x_m = Q_m(sigma0 * xi) + b_m``.

    Returns a :class:`SyntheticSample` when ``n`` is None, else a
    :class:`SampleSet` of ``n`` draws.
    """
    k = 1 if n is None else n
    xi = rng.standard_normal((k, spec.n_modalities, spec.dim))
    x = _apply_domain(spec, spec.sigma0 * xi)
    out = SampleSet(x, np.zeros(k, dtype=np.int64), np.full(k, spec.domain_id),
                    np.full(k, -1, dtype=np.int64), _mask_for(spec, k))
    return out.sample(0) if n is None else out


def sample_spoof(spec, rng, n=None):
    """Spoof draws: ``k ~ pi`` then ``x_m = Q_m(mu_{k,m} + sigma_eff_m * xi) + b_m``."""
    if not spec.attacks:
        raise ConfigError(f"domain {spec.domain_id} has no attack components")
    count = 1 if n is None else n
    priors = np.array([a.prior for a in spec.attacks])
    which = rng.choice(len(spec.attacks), size=count, p=priors / priors.sum())
    means = np.stack([a.block(spec.n_modalities) for a in spec.attacks])[which]
    xi = rng.standard_normal((count, spec.n_modalities, spec.dim))
    latent = means + spec.sigma_eff[None, :, None] * xi
    x = _apply_domain(spec, latent)
    ids = np.array([a.attack_id for a in spec.attacks])[which]
    out = SampleSet(x, np.ones(count, dtype=np.int64), np.full(count, spec.domain_id),
                    ids.astype(np.int64), _mask_for(spec, count))
    return out.sample(0) if n is None else out


def spoof_second_moment(spec):
    """Closed-form ``E[(x-b)(x-b)^T | spoof]`` over the concatenated modalities.

    Equals ``Qdiag (sigma_eff_multi + sum_k pi_k mu_k mu_k^T) Qdiag^T`` where
    ``Qdiag`` is the block-diagonal stack of the per-modality transforms.
    """
    m, d = spec.n_modalities, spec.dim
    floor = np.diag(np.repeat(spec.sigma_eff ** 2, d))
    spikes = sum(a.prior * np.outer(a.direction, a.direction) for a in spec.attacks)
    qdiag = np.zeros((m * d, m * d))
    for i in range(m):
        qdiag[i * d:(i + 1) * d, i * d:(i + 1) * d] = spec.transforms[i]
    return qdiag @ (floor + spikes) @ qdiag.T


def random_rotation(rng, d, angle):
    """Orthogonal matrix ``expm(angle * A)`` with A a random unit-scale skew matrix."""
    a = rng.standard_normal((d, d))
    a = (a - a.T) / np.sqrt(2 * d)
    return expm(angle * a)


@dataclass
class BenchmarkConfig:
    seed: int = 0
    n_domains: int = 4
    n_per_domain: int = 2000
    n_attacks: int = 4
    dim: int = 16
    n_modalities: int = 3
    targets: tuple = (3,)
    sigma0: float = 0.3
    eps_range: tuple = (0.05, 0.6)  # sigma_eff^2 = sigma0^2 * (1 + eps)
    attack_norm: float = 2.0
    attack_modalities: int = 2  # modalities an attack leaves traces in
    rotation_angle: float = 0.6
    offset_scale: float = 0.5
    shift: str = "transform"  # or "variance"
    attacks_per_source: int = 2
    unseen_prior: float = 0.5
    unseen_modalities: int = None  # modalities the reserved attack touches; default attack_modalities

    def to_json(self):
        out = asdict(self)
        out["targets"] = list(self.targets)
        out["eps_range"] = list(self.eps_range)
        return out


@dataclass
class Benchmark:
    config: BenchmarkConfig
    specs: dict
    domains: dict  # domain id -> SampleSet
    unseen_attacks: tuple = field(default_factory=tuple)

    @property
    def seed(self):
        return self.config.seed

    def domain_ids(self):
        return sorted(self.domains)


def _attack_directions(rng, cfg):
    m, d = cfg.n_modalities, cfg.dim
    dirs = []
    for k in range(cfg.n_attacks):
        width = cfg.attack_modalities
        if k == cfg.n_attacks - 1 and cfg.unseen_modalities is not None:
            width = cfg.unseen_modalities
        touched = rng.choice(m, size=min(width, m), replace=False)
        mu = np.zeros((m, d))
        for i in touched:
            v = rng.standard_normal(d)
            mu[i] = v / np.linalg.norm(v)
        mu *= cfg.attack_norm / np.sqrt(len(touched))
        dirs.append(mu.reshape(-1))
    return dirs


def build_benchmark(seed=0, n_domains=4, n_per_domain=2000, n_attacks=4, dim=16,
                    n_modalities=3, **overrides):
    """Deterministic synthetic benchmark with ``n_domains`` domains.

    The last attack id is reserved for the target domains (``targets``); the
    sources share the others in distinct subsets. Each domain is class
    balanced.
    """
    cfg = BenchmarkConfig(seed=seed, n_domains=n_domains, n_per_domain=n_per_domain,
                          n_attacks=n_attacks, dim=dim, n_modalities=n_modalities,
                          **overrides)
    cfg.targets = tuple(int(t) for t in cfg.targets)
    if n_domains < 3:
        raise ConfigError("need at least 3 domains")
    if n_attacks < 2:
        raise ConfigError("need at least 2 attacks (one is reserved as unseen)")
    if any(t < 0 or t >= n_domains for t in cfg.targets):
        raise ConfigError(f"targets {cfg.targets} outside 0..{n_domains - 1}")
    sources = [e for e in range(n_domains) if e not in cfg.targets]
    if not sources:
        raise ConfigError("no source domains left")

    rng = np.random.default_rng(seed)
    dirs = _attack_directions(rng, cfg)
    unseen = n_attacks - 1
    seen = list(range(n_attacks - 1))
    per_source = max(1, min(cfg.attacks_per_source, len(seen)))

    specs = {}
    for e in range(n_domains):
        if e in cfg.targets:
            rest = [k for k in seen]
            ids = [unseen] + rest
            priors = [cfg.unseen_prior] + [(1 - cfg.unseen_prior) / len(rest)] * len(rest)
        else:
            start = sources.index(e)
            ids = [seen[(start + j) % len(seen)] for j in range(per_source)]
            priors = [1.0 / len(ids)] * len(ids)
        attacks = [AttackComponent(p, dirs[k], k) for k, p in zip(ids, priors)]
        if cfg.shift == "transform":
            q = np.stack([random_rotation(rng, dim, cfg.rotation_angle)
                          for _ in range(n_modalities)])
            b = cfg.offset_scale * rng.standard_normal((n_modalities, dim)) / np.sqrt(dim)
            sigma0 = cfg.sigma0
        elif cfg.shift == "variance":
            q = np.stack([np.eye(dim)] * n_modalities)
            b = np.zeros((n_modalities, dim))
            sigma0 = cfg.sigma0 * float(rng.uniform(0.6, 1.4))
        else:
            raise ConfigError(f"unknown shift family {cfg.shift!r}")
        eps = rng.uniform(*cfg.eps_range, size=n_modalities)
        sigma_eff = sigma0 * np.sqrt(1.0 + eps)
        specs[e] = DomainSpec(e, q, b, sigma0, sigma_eff, attacks)

    domains = {}
    for e in range(n_domains):
        drng = np.random.default_rng([seed, e])
        n_live = n_per_domain // 2
        live = sample_live(specs[e], drng, n_live)
        spoof = sample_spoof(specs[e], drng, n_per_domain - n_live)
        both = SampleSet.concat([live, spoof])
        domains[e] = both.subset(drng.permutation(len(both)))
    return Benchmark(cfg, specs, domains, (unseen,))


# ---------------------------------------------------------------- protocols

@dataclass(frozen=True)
class Protocol:
    name: str
    sources: tuple
    targets: tuple
    train_drop_prob: float = 0.0
    train_drop_modalities: tuple = (1, 2)
    test_missing: tuple = ()

    def __post_init__(self):
        if set(self.sources) & set(self.targets):
            raise ConfigError("source and target domains overlap")
        if not self.sources or not self.targets:
            raise ConfigError("protocol needs sources and targets")
        if not 0.0 <= self.train_drop_prob <= 1.0:
            raise ConfigError("drop probability outside [0, 1]")


def modality_index(name):
    key = str(name).strip().upper()
    aliases = {"D": "DEP", "DEPTH": "DEP", "I": "IR", "INFRARED": "IR", "R": "RGB"}
    key = aliases.get(key, key)
    if key.isdigit():
        return int(key)
    if key not in MODALITIES:
        raise ConfigError(f"unknown modality {name!r}")
    return MODALITIES.index(key)


def complete_protocol(target, n_domains=4):
    sources = tuple(e for e in range(n_domains) if e != target)
    return Protocol("complete", sources, (target,))


def missing_test_protocol(target, drop, n_domains=4):
    missing = tuple(sorted(modality_index(m) for m in drop))
    sources = tuple(e for e in range(n_domains) if e != target)
    return Protocol("missing-test", sources, (target,), test_missing=missing)


def missing_train_protocol(target, drop_prob=0.7, n_domains=4):
    sources = tuple(e for e in range(n_domains) if e != target)
    return Protocol("missing-train", sources, (target,), train_drop_prob=drop_prob)


def limited_sources_protocol(sources, targets):
    return Protocol("limited-sources", tuple(sources), tuple(targets))


def zero_modalities(samples, modalities):
    """Copy of ``samples`` with the given modalities zeroed and unmasked."""
    x = samples.x.copy()
    mask = samples.mask.copy()
    for m in modalities:
        x[:, m] = 0.0
        mask[:, m] = False
    return SampleSet(x, samples.y.copy(), samples.domain.copy(), samples.attack.copy(), mask)


def apply_protocol(dataset, protocol, rng):
    """Split a benchmark into (train, eval) sample sets under ``protocol``.

    Train-time dropping: each training sample is hit with probability
    ``train_drop_prob``; a hit drops one of the droppable modalities or all of
    them, chosen uniformly. Dropped modalities are zeroed.
    """
    known = set(dataset.domains)
    if not (set(protocol.sources) | set(protocol.targets)) <= known:
        raise ConfigError(f"protocol {protocol.name} references unknown domains")
    n_mod = dataset.config.n_modalities
    if any(m >= n_mod for m in protocol.test_missing + protocol.train_drop_modalities):
        raise ConfigError("protocol references a modality index out of range")

    train = SampleSet.concat([dataset.domains[e] for e in protocol.sources])
    if protocol.train_drop_prob > 0:
        x, mask = train.x.copy(), train.mask.copy()
        hit = rng.random(len(train)) < protocol.train_drop_prob
        droppable = list(protocol.train_drop_modalities)
        choices = [[m] for m in droppable] + ([droppable] if len(droppable) > 1 else [])
        pick = rng.integers(len(choices), size=len(train))
        for i in np.flatnonzero(hit):
            for m in choices[pick[i]]:
                x[i, m] = 0.0
                mask[i, m] = False
        train = SampleSet(x, train.y, train.domain, train.attack, mask)
    evaluation = SampleSet.concat([dataset.domains[e] for e in protocol.targets])
    if protocol.test_missing:
        evaluation = zero_modalities(evaluation, protocol.test_missing)
    return train, evaluation


def holdout_split(samples, fraction, rng):
    """Stratified (domain, label) split into (fit, held-out)."""
    keep, hold = [], []
    for e in np.unique(samples.domain):
        for y in (0, 1):
            idx = np.flatnonzero((samples.domain == e) & (samples.y == y))
            idx = rng.permutation(idx)
            n_hold = int(round(fraction * len(idx)))
            hold.append(idx[:n_hold])
            keep.append(idx[n_hold:])
    return samples.subset(np.sort(np.concatenate(keep))), samples.subset(np.sort(np.concatenate(hold)))


# ------------------------------------------------------------- token lifting

def token_pattern(grid, dim, seed=1234):
    """Fixed smooth spatial modulation ``s[h, w, c]`` with zero mean per channel."""
    h, w = grid
    rng = np.random.default_rng(seed)
    hh, ww = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    pattern = np.empty((h, w, dim))
    for c in range(dim):
        fh, fw = rng.integers(0, 2, size=2)
        if fh == 0 and fw == 0:
            fh = 1
        phase = rng.uniform(0, 2 * np.pi)
        pattern[:, :, c] = np.cos(2 * np.pi * (fh * hh + fw * ww) + phase)
    return pattern


def lift_to_tokens(x, grid=(8, 8), modulation=0.5, pattern=None):
    """Lift vectors ``(..., d)`` to token maps ``(..., H, W, d)``.

    Token ``(h, w)`` is ``x * (1 + modulation * s[h, w])``; the zero-mean
    pattern keeps the DC band equal to ``x``.
    """
    x = np.asarray(x, dtype=float)
    if pattern is None:
        pattern = token_pattern(grid, x.shape[-1])
    return x[..., None, None, :] * (1.0 + modulation * pattern)


# ------------------------------------------------------------------ file I/O

DATASET_FORMAT = "rise-dataset"
DATASET_VERSION = 1


def _columns(samples):
    n = len(samples)
    return np.concatenate([
        samples.x.reshape(n, -1), samples.y[:, None].astype(float),
        samples.domain[:, None].astype(float), samples.attack[:, None].astype(float),
        samples.mask.astype(float)], axis=1)


def save_dataset(path, dataset):
    """Write one JSON header line followed by little-endian float64 rows.

    Each row is ``x (M*d) | label | domain | attack | mask (M)``; domains
    are stored one after another in ascending id order.
    """
    cfg = dataset.config
    ids = dataset.domain_ids()
    header = {
        "format": DATASET_FORMAT, "version": DATASET_VERSION,
        "seed": int(cfg.seed), "n_modalities": cfg.n_modalities, "dim": cfg.dim,
        "n_attacks": cfg.n_attacks, "modalities": list(MODALITIES[:cfg.n_modalities]),
        "row_layout": ["x", "label", "domain", "attack", "mask"],
        "row_width": cfg.n_modalities * cfg.dim + 3 + cfg.n_modalities,
        "dtype": "<f8",
        "domains": [{"id": int(e), "rows": len(dataset.domains[e])} for e in ids],
        "unseen_attacks": [int(k) for k in dataset.unseen_attacks],
        "config": cfg.to_json(),
        "specs": [dataset.specs[e].to_json() for e in ids],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for e in ids:
            fh.write(_columns(dataset.domains[e]).astype("<f8").tobytes())
    return header


def load_dataset(path):
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("format") != DATASET_FORMAT:
            raise ConfigError(f"{path} is not a {DATASET_FORMAT} file")
        payload = np.frombuffer(fh.read(), dtype="<f8")
    m, d, width = header["n_modalities"], header["dim"], header["row_width"]
    rows = payload.reshape(-1, width)
    cfg_obj = dict(header["config"])
    cfg_obj["targets"] = tuple(cfg_obj["targets"])
    cfg_obj["eps_range"] = tuple(cfg_obj["eps_range"])
    cfg = BenchmarkConfig(**cfg_obj)
    specs = {s["domain_id"]: DomainSpec.from_json(s) for s in header["specs"]}
    domains, start = {}, 0
    for entry in header["domains"]:
        block = rows[start:start + entry["rows"]]
        start += entry["rows"]
        domains[entry["id"]] = SampleSet(
            block[:, :m * d].reshape(-1, m, d).copy(),
            block[:, m * d].astype(np.int64), block[:, m * d + 1].astype(np.int64),
            block[:, m * d + 2].astype(np.int64), block[:, m * d + 3:].astype(bool))
    return Benchmark(cfg, specs, domains, tuple(header["unseen_attacks"]))
