"""Synergy disentanglement pretext tasks on encoder token maps.

Token maps of two modalities from independently shuffled batches are split
into low/high frequency bands and recombined across samples and modalities.
Each position then takes one of four candidates (two pure, two mixed), token
order is permuted, and lightweight heads must recover which modality each
band came from and where each token originally sat.
"""

import json
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import DimensionError, ConfigError
from .numerics import DTYPE, fft2, ifft2, gelu, softmax_ce

PURE_M, PURE_M2, MIX_M_FROM_M2, MIX_M2_FROM_M = range(4)


@dataclass
class FrequencyMask:
    """Binary disc ``V(u, v) = [dist((u, v), center) < radius]``.

    In centred mode the disc lives on the DC-shifted spectrum (``center``
    defaults to the grid centre, so radius 1 keeps only the DC bin);
    :attr:`applied` is the same mask moved back to unshifted FFT order.
    """

    grid: tuple
    radius: float = 1.0
    center: tuple = None
    centered: bool = True
    values: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        h, w = self.grid
        if self.center is None:
            self.center = (h // 2, w // 2) if self.centered else (0, 0)
        u, v = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        dist = np.hypot(u - self.center[0], v - self.center[1])
        self.values = dist < self.radius

    @property
    def applied(self):
        v = self.values
        return np.fft.ifftshift(v) if self.centered else v

    def tensor(self):
        return torch.as_tensor(self.applied, dtype=DTYPE)[:, :, None]


def freq_split(maps, mask):
    """Split ``(..., H, W, C)`` maps into (low, high) real maps; low + high = maps."""
    if tuple(maps.shape[-3:-1]) != tuple(mask.grid):
        raise DimensionError(f"map grid {tuple(maps.shape[-3:-1])} != mask grid {mask.grid}")
    spec = fft2(maps)
    v = mask.tensor()
    return ifft2(spec * v), ifft2(spec * (1 - v))


def cross_mix(z_a, z_b, mask):
    """Band swap between two maps.

    Returns ``(a_low + b_high, b_low + a_high)`` built in the spectral domain,
    i.e. ``F^-1(F(a) V + F(b)(1-V))`` and its converse.
    """
    if z_a.shape != z_b.shape:
        raise DimensionError("cross_mix needs maps of equal shape")
    v = mask.tensor()
    sa, sb = fft2(z_a), fft2(z_b)
    return ifft2(sa * v + sb * (1 - v)), ifft2(sb * v + sa * (1 - v))


@dataclass
class MixRecipe:
    """Origin bookkeeping for one pair stream ``(m, m2)``.

    ``choice[b, p]`` is the candidate used at original position ``p``;
    ``perm[b, q]`` is the original position of the token shown at slot ``q``.
    Label arrays are indexed by slot (i.e. already permuted).
    """

    modalities: tuple
    grid: tuple
    choice: np.ndarray
    perm: np.ndarray
    low_origin: np.ndarray
    high_origin: np.ndarray
    position: np.ndarray  # (B, P, 2) normalised original coordinates

    def derive_labels(self):
        """Recompute slot labels from ``choice`` and ``perm`` alone."""
        m, m2 = self.modalities
        low_by_choice = np.array([m, m2, m, m2])
        high_by_choice = np.array([m, m2, m2, m])
        choice_at_slot = np.take_along_axis(self.choice, self.perm, axis=1)
        return (low_by_choice[choice_at_slot], high_by_choice[choice_at_slot],
                grid_coordinates(self.grid)[self.perm])

    def unshuffle(self, tokens):
        """Inverse permutation: slot order back to original position order."""
        inv = np.argsort(self.perm, axis=1)
        idx = torch.as_tensor(inv)[:, :, None].expand(-1, -1, tokens.shape[-1])
        return torch.gather(tokens, 1, idx)

    def to_json(self):
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                for k, v in self.__dict__.items()}


def grid_coordinates(grid):
    """Cell-centre coordinates ``((h + .5) / H, (w + .5) / W)`` in raster order."""
    h, w = grid
    hh, ww = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    return np.stack([hh.ravel(), ww.ravel()], axis=-1)


def sample_and_shuffle(candidates, modalities, rng, shuffle=True):
    """Pick one of four candidate tokens per position, then permute positions.

    ``candidates`` is a list of four ``(B, H, W, C)`` maps ordered as
    (pure m, pure m2, m low + m2 high, m2 low + m high). ``shuffle=False``
    keeps the identity permutation.
    """
    shapes = {tuple(c.shape) for c in candidates}
    if len(candidates) != 4 or len(shapes) != 1:
        raise DimensionError("need four candidate maps of identical shape")
    b, h, w, c = candidates[0].shape
    p = h * w
    stack = torch.stack([cand.reshape(b, p, c) for cand in candidates], dim=0)
    choice = rng.integers(0, 4, size=(b, p))
    picked = stack[torch.as_tensor(choice), torch.arange(b)[:, None], torch.arange(p)[None, :]]
    if shuffle:
        perm = np.argsort(rng.random((b, p)), axis=1)
    else:
        perm = np.tile(np.arange(p), (b, 1))
    idx = torch.as_tensor(perm)[:, :, None].expand(-1, -1, c)
    tokens = torch.gather(picked, 1, idx)
    recipe = MixRecipe(tuple(modalities), (h, w), choice, perm, None, None, None)
    recipe.low_origin, recipe.high_origin, recipe.position = recipe.derive_labels()
    return tokens, recipe


class _Head(nn.Module):
    def __init__(self, width, hidden, out):
        super().__init__()
        self.fc1 = nn.Linear(width, hidden, dtype=DTYPE)
        self.fc2 = nn.Linear(hidden, out, dtype=DTYPE)

    def forward(self, x):
        return self.fc2(gelu(self.fc1(x)))


class Decoupler(nn.Module):
    """Per-modality low/high origin classifiers plus a shared position regressor."""

    def __init__(self, width, n_modalities, hidden=32):
        super().__init__()
        self.n_modalities = n_modalities
        self.low = nn.ModuleList(_Head(width, hidden, n_modalities) for _ in range(n_modalities))
        self.high = nn.ModuleList(_Head(width, hidden, n_modalities) for _ in range(n_modalities))
        self.pos = _Head(width, hidden, 2)


def _check(tokens, recipe):
    if tokens.shape[:2] != recipe.low_origin.shape:
        raise DimensionError("recipe does not match the token sequence")


def freq_origin_loss(tokens, recipe, decoupler, use_low=True, use_high=True):
    """Cross-entropy of the stream's own-modality heads on band origins.

    Returns ``(L_low, L_high, L_low + L_high)``, each averaged over slots and
    batch. The heads belong to the stream's first modality.
    """
    _check(tokens, recipe)
    m = recipe.modalities[0]
    zero = torch.zeros((), dtype=DTYPE)
    flat = tokens.reshape(-1, tokens.shape[-1])
    low = high = zero
    if use_low:
        low = softmax_ce(decoupler.low[m](flat), recipe.low_origin.reshape(-1), "mean")
    if use_high:
        high = softmax_ce(decoupler.high[m](flat), recipe.high_origin.reshape(-1), "mean")
    return low, high, low + high


def position_loss(tokens, recipe, decoupler):
    """Mean over slots of the squared L2 error of regressed original coordinates."""
    _check(tokens, recipe)
    pred = decoupler.pos(tokens)
    target = torch.as_tensor(recipe.position, dtype=DTYPE)
    return ((pred - target) ** 2).sum(-1).mean()


@dataclass(frozen=True)
class MMSDConfig:
    freq_radius: float = 1.0
    centered: bool = True
    mix_domain: str = "freq"  # or "spatial"
    target: str = "HF&LF"  # HF, LF, HF&LF, modality
    shuffle: bool = True
    stop_grad: bool = False
    spatial_radius: float = None  # disc radius for spatial mixing; default grid/4

    def __post_init__(self):
        if self.mix_domain not in ("freq", "spatial"):
            raise ConfigError(f"unknown mix domain {self.mix_domain!r}")
        if self.target not in ("HF", "LF", "HF&LF", "modality"):
            raise ConfigError(f"unknown disentangle target {self.target!r}")


def _spatial_split(maps, grid, radius):
    # spatial analogue of the frequency mask: a disc of tokens around the centre
    mask = FrequencyMask(grid, radius, centered=False, center=(grid[0] / 2 - 0.5, grid[1] / 2 - 0.5))
    v = torch.as_tensor(mask.values, dtype=DTYPE)[:, :, None]
    return maps * v, maps * (1 - v)


def mmsd_total(maps, decoupler, rng, cfg=MMSDConfig(), mask=None, dump=None):
    """Full pretext objective ``L_pos + sum_m (L_low^m + L_high^m)`` over all
    ordered modality pairs.

    ``maps`` is the list of per-modality ``(B, H, W, C)`` encoder maps.
    Returns ``(total, parts)``. ``dump``, when a list, receives per-stream
    recipes for inspection.
    """
    n_mod = len(maps)
    b, h, w, _ = maps[0].shape
    if cfg.stop_grad:
        maps = [t.detach() for t in maps]
    if cfg.mix_domain == "freq":
        mask = mask or FrequencyMask((h, w), cfg.freq_radius, centered=cfg.centered)
        # band parts are linear in the map, so mixing = adding split parts
        bands = [freq_split(t, mask) for t in maps]
    else:
        radius = cfg.spatial_radius or min(h, w) / 4
        bands = [_spatial_split(t, (h, w), radius) for t in maps]

    use_low = cfg.target in ("LF", "HF&LF", "modality")
    use_high = cfg.target in ("HF", "HF&LF")
    zero = torch.zeros((), dtype=DTYPE)
    low_terms = [zero] * n_mod
    high_terms = [zero] * n_mod
    pos = zero
    for m in range(n_mod):
        for m2 in range(n_mod):
            if m == m2:
                continue
            pi, pj = rng.permutation(b), rng.permutation(b)
            lo_a, hi_a = (t[torch.as_tensor(pi)] for t in bands[m])
            lo_b, hi_b = (t[torch.as_tensor(pj)] for t in bands[m2])
            cands = [lo_a + hi_a, lo_b + hi_b, lo_a + hi_b, lo_b + hi_a]
            tokens, recipe = sample_and_shuffle(cands, (m, m2), rng, shuffle=cfg.shuffle)
            lo, hi, _ = freq_origin_loss(tokens, recipe, decoupler, use_low, use_high)
            low_terms[m] = low_terms[m] + lo
            high_terms[m] = high_terms[m] + hi
            if cfg.shuffle:
                pos = pos + position_loss(tokens, recipe, decoupler)
            if dump is not None:
                dump.append(recipe)
    parts = {"pos": pos}
    for m in range(n_mod):
        parts[f"low{m}"] = low_terms[m]
        parts[f"high{m}"] = high_terms[m]
    total = pos + sum(low_terms[m] + high_terms[m] for m in range(n_mod))
    return total, parts


def dump_recipes(path_prefix, recipes, maps=None, mask=None):
    """Debug sidecar: ``<prefix>.json`` with recipes, ``<prefix>.npz`` with spectra."""
    with open(f"{path_prefix}.json", "w") as fh:
        json.dump({"format": "rise-mmsd-dump", "version": 1,
                   "recipes": [r.to_json() for r in recipes]}, fh)
    if maps is not None:
        arrays = {}
        for m, t in enumerate(maps):
            spec = fft2(t.detach()).numpy()
            arrays[f"spectrum{m}"] = spec
        if mask is not None:
            arrays["mask"] = mask.applied
        np.savez(f"{path_prefix}.npz", **arrays)
