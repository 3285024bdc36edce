"""The MMSD pretext task on two toy token maps: band split, cross-modal band
swap, four-candidate sampling and the recovery targets."""

import numpy as np
import torch

from rise.mmsd import Decoupler, FrequencyMask, cross_mix, freq_split, mmsd_total, sample_and_shuffle

h = w = 4
mask = FrequencyMask((h, w), radius=1.0)
print("DC-only mask on the centred spectrum:\n", mask.values.astype(int))

rng = np.random.default_rng(0)
rgb = torch.tensor(rng.standard_normal((2, h, w, 3)) + 2.0)  # strong mean, i.e. DC
depth = torch.tensor(rng.standard_normal((2, h, w, 3)))
low, high = freq_split(rgb, mask)
print("low band is the per-channel map mean:", torch.allclose(low[0], rgb[0].mean(dim=(0, 1))))

mixed, _ = cross_mix(rgb, depth, mask)
print("rgb low + depth high keeps rgb's mean:", torch.allclose(mixed.mean(dim=(1, 2)), rgb.mean(dim=(1, 2))))

tokens, recipe = sample_and_shuffle([rgb, depth, mixed, cross_mix(rgb, depth, mask)[1]], (0, 1), rng)
print("candidate per original position (sample 0):\n", recipe.choice[0].reshape(h, w))
print("low-band origin at each shown slot:", recipe.low_origin[0])
print("original coordinates of the first three slots:\n", recipe.position[0, :3])

dec = Decoupler(3, 2)
total, parts = mmsd_total([rgb, depth], dec, rng)
print({k: round(float(v), 4) for k, v in parts.items()}, "total", round(float(total), 4))
