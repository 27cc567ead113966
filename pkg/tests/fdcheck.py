"""Central-difference gradient checks for piecewise-smooth networks.

A finite difference across a LeakyReLU kink measures a chord, not the
gradient, so each probe also records the sign pattern of every activation
input at both ends and reports whether the probe stayed on one smooth piece.
"""

import contextlib

import torch
import torch.nn as nn


@contextlib.contextmanager
def record_signs(module: nn.Module):
    signs = []

    def hook(_, inputs):
        signs.append(inputs[0].detach() > 0)

    handles = [m.register_forward_pre_hook(hook) for m in module.modules() if isinstance(m, (nn.LeakyReLU, nn.ReLU))]
    try:
        yield signs
    finally:
        for h in handles:
            h.remove()


def _split(out):
    return out if isinstance(out, tuple) else (out, None)


def probe(module: nn.Module, param: torch.Tensor, idx, f, h: float = 1e-3):
    """Return ``(finite_difference, smooth)`` for coordinate ``idx`` of ``param``.

    ``f`` returns the objective, or ``(objective, branch)`` where ``branch``
    names any further piece (e.g. the active side of a hinge) that must also
    agree at both ends.
    """
    with torch.no_grad():
        orig = param[idx].item()
        param[idx] = orig + h
        with record_signs(module) as s_up:
            up, b_up = _split(f())
        param[idx] = orig - h
        with record_signs(module) as s_dn:
            dn, b_dn = _split(f())
        param[idx] = orig
    smooth = len(s_up) == len(s_dn) and all(torch.equal(a, b) for a, b in zip(s_up, s_dn))
    smooth = smooth and b_up == b_dn
    return (float(up) - float(dn)) / (2 * h), smooth
