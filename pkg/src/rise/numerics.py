"""Differentiable tensor primitives used by every loss in the package.

Everything runs in float64 on top of ``torch`` autograd, which provides
reverse-mode differentiation with reverse-over-reverse support
(``create_graph``). Token maps use the layout ``(..., H, W, C)``: the 2-D
transforms act on the two spatial axes, independently per channel.
"""

import torch
import torch.nn.functional as F

from .errors import ContractError, DimensionError

DTYPE = torch.float64

GELU_EXACT = "none"
GELU_TANH = "tanh"


def as_tensor(x, requires_grad=False):
    t = torch.as_tensor(x, dtype=DTYPE)
    if requires_grad:
        t = t.clone().requires_grad_(True)
    return t


def matmul(a, b):
    """Matrix product with an explicit inner-dimension check."""
    if a.dim() < 1 or b.dim() < 1:
        raise DimensionError("matmul needs at least 1-D operands")
    inner_b = b.shape[0] if b.dim() == 1 else b.shape[-2]
    if a.shape[-1] != inner_b:
        raise DimensionError(
            f"inner dimensions disagree: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def gelu(x, approximate=GELU_EXACT):
    """Gaussian error linear unit; erf form by default, tanh form on request."""
    return F.gelu(x, approximate=approximate)


def l2_norm(z, dim=-1, keepdim=False):
    """Euclidean norm along ``dim``.

    The gradient at ``z = 0`` is the zero vector (a valid subgradient)
    instead of the NaN that ``sqrt`` would produce.
    """
    sq = (z * z).sum(dim=dim, keepdim=keepdim)
    positive = sq > 0
    safe = torch.where(positive, sq, torch.ones_like(sq))
    return torch.where(positive, torch.sqrt(safe), torch.zeros_like(sq))


def softplus(s):
    """ln(1 + e^s), evaluated stably; strictly positive for finite s."""
    s = torch.as_tensor(s, dtype=DTYPE)
    # logaddexp(0, s) avoids overflow and keeps e^-40 from rounding to 0
    return torch.logaddexp(torch.zeros_like(s), s)


def softmax_ce(logits, label, reduction="none"):
    """Cross-entropy ``-log softmax(logits)[label]`` over the last axis.

    ``logits`` is ``(C,)`` or ``(N, C)``; ``label`` an int or ``(N,)`` ints.
    """
    if logits.shape[-1] < 2:
        raise ContractError("softmax_ce needs at least two logits")
    label = torch.as_tensor(label, dtype=torch.long)
    n_classes = logits.shape[-1]
    if label.numel() and (label.min() < 0 or label.max() >= n_classes):
        raise IndexError(f"label out of range for {n_classes} classes")
    logp = torch.log_softmax(logits, dim=-1)
    if logits.dim() == 1:
        loss = -logp[label]
    else:
        loss = -logp.gather(-1, label.reshape(-1, 1)).squeeze(-1)
    if reduction == "mean":
        return loss.mean()
    if reduction == "sum":
        return loss.sum()
    return loss


def fft2(tokens):
    """2-D DFT over the spatial axes of a ``(..., H, W, C)`` token map."""
    if tokens.dim() < 3:
        raise DimensionError("token map must have shape (..., H, W, C)")
    return torch.fft.fft2(tokens.to(DTYPE), dim=(-3, -2))


def ifft2(spectrum, real=True):
    """Inverse of :func:`fft2`. By default the imaginary residue is dropped."""
    out = torch.fft.ifft2(spectrum, dim=(-3, -2))
    return out.real if real else out


def grad(loss, wrt, build_graph=False):
    """Reverse-mode gradients of a scalar ``loss`` w.r.t. each tensor in ``wrt``.

    With ``build_graph`` the returned gradients are themselves differentiable,
    so penalties built from them can be back-propagated (second order).
    Parameters that do not influence ``loss`` get a zero gradient.
    """
    if loss.numel() != 1:
        raise ContractError(f"grad needs a scalar loss, got shape {tuple(loss.shape)}")
    single = isinstance(wrt, torch.Tensor)
    params = [wrt] if single else list(wrt)
    grads = torch.autograd.grad(
        loss.reshape(()), params, create_graph=build_graph,
        retain_graph=True, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for g, p in zip(grads, params)]
    return grads[0] if single else grads
