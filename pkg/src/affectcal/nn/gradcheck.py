from __future__ import annotations

import numpy as np

from ..datamodel import ClassPriorTable
from .losses import LossSpec
from .network import NetworkSpec, NetworkState, backward, forward, init_state
from .train import _flat_loss, loss_value

REL_FLOOR = 1e-8


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """|a - n| / max(|a| + |n|, REL_FLOOR), elementwise."""
    return np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), REL_FLOOR)


def grad_check(spec: NetworkSpec, loss: LossSpec, x, y, state: NetworkState | None = None,
               seed: int = 0, priors: ClassPriorTable | None = None, h: float = 1e-5) -> float:
    """Largest relative error between backprop and central differences over all parameters.

    ReLU on/off patterns are pinned at the unperturbed point, so a
    pre-activation lying within ``h`` of zero cannot put the two difference
    probes on different linear pieces.
    """
    loss = loss.resolve(priors)
    state = init_state(spec, seed) if state is None else state.copy()
    fwd = forward(state, spec, x)
    _, g = _flat_loss(fwd, loss, y, None)
    grads = backward(state, spec, fwd, g.reshape(fwd.logits.shape))
    gates = fwd.relu_gates() if spec.activation == "relu" else None
    worst = 0.0
    for name, p in state.params.items():
        numeric = np.empty_like(p)
        flat = p.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_value(state, spec, loss, x, y, relu_gates=gates)
            flat[i] = orig - h
            down = loss_value(state, spec, loss, x, y, relu_gates=gates)
            flat[i] = orig
            num_flat[i] = (up - down) / (2.0 * h)
        worst = max(worst, float(relative_error(grads[name], numeric).max(initial=0.0)))
    return worst
