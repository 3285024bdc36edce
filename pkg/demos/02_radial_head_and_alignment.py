"""Radial logits, the per-domain gradient alignment penalty and the angular loss
on a handful of hand-made features."""

import math

import numpy as np
import torch

from rise.asyirm import AngularConfig, angular_loss, domain_gradients, irm_penalty, radial_ce
from rise.model import RadialClassifier

clf = RadialClassifier(0.0)
print(f"initial radius softplus(0) = {clf.radius.item():.4f} (ln 2 = {math.log(2):.4f})")

z = torch.tensor([[0.0, 0.0], [0.3, 0.4], [1.2, 0.9], [0.0, 2.0]], dtype=torch.float64)
print("logits (live, spoof):\n", clf(z).detach().numpy().round(3))
print("CE with labels live, live, spoof, spoof:", radial_ce(clf(z), [0, 0, 1, 1]).item())

# two domains that need the same radius give aligned gradients; a shifted one does not
same = torch.tensor([[0.1, 0.0], [2.0, 0.0], [0.0, 0.1], [0.0, 2.0]], dtype=torch.float64)
shifted = torch.tensor([[0.1, 0.0], [2.0, 0.0], [0.6, 0.0], [0.0, 0.9]], dtype=torch.float64)
labels, domains = [0, 1, 0, 1], [0, 0, 1, 1]
for name, feats in (("aligned", same), ("shifted", shifted)):
    gs = domain_gradients(feats, labels, domains, clf)
    print(f"{name}: penalty {irm_penalty(gs).item():.4f}")

cfg = AngularConfig()
rng = np.random.default_rng(0)
clustered = np.r_[rng.normal([3, 0, 0], 0.1, (4, 3)), rng.normal([0, 3, 0], 0.1, (4, 3))]
mixed = rng.standard_normal((8, 3))
doms = [0] * 4 + [1] * 4
for name, f in (("domain-clustered", clustered), ("random", mixed)):
    print(f"angular loss, {name} features: {angular_loss(torch.tensor(f), doms, cfg).item():.3f}")
