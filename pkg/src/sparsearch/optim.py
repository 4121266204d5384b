"""Weight optimizer (NAG) and structure optimizer (APG-NAG).

APG-NAG folds the L1 proximal map into a momentum recursion:

    z = lam - lr * grad
    v = S(z, lr * gamma) - lam + momentum * v_prev
    lam = S(z, lr * gamma) + momentum * v

where S is the soft-threshold operator, so factors reach exactly zero.
gamma may be per-coordinate (budget-adjusted). Non-finite gradients raise:
divergence should surface, not be clipped away.
"""

from __future__ import annotations

import numpy as np


class DivergenceError(RuntimeError):
    """Raised when training produces non-finite gradients or losses."""


def soft_threshold(z, alpha):
    """sign(z) * max(|z| - alpha, 0), exact zeros inside the threshold."""
    alpha = np.asarray(alpha)
    if np.any(alpha < 0):
        raise ValueError("soft threshold requires alpha >= 0")
    z = np.asarray(z)
    return np.sign(z) * np.maximum(np.abs(z) - alpha, 0.0)


def lasso_reference(a, gamma):
    """Closed-form argmin of 0.5*(x-a)^2 + gamma*|x|."""
    return soft_threshold(a, gamma)


def nag_update(w, grad, velocity, lr, momentum):
    """One Nesterov step, in place on w and velocity."""
    velocity *= momentum
    velocity += grad
    w -= lr * (grad + momentum * velocity)


def apg_nag_update(lam, grad, velocity, lr, gamma, momentum):
    """One APG-NAG step, in place on lam and velocity."""
    z = lam - lr * grad
    st = soft_threshold(z, lr * gamma)
    v_new = st - lam + momentum * velocity
    lam[:] = st + momentum * v_new
    velocity[:] = v_new


class Nag:
    """NAG over named weight tensors; decay hits "weight" entries only.

    Momentum buffers are keyed by name and persist across hard prunes of
    other parameters; buffers of deleted weights are simply never touched
    again.
    """

    def __init__(self, lr, momentum=0.9, weight_decay=0.0):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {}

    def step(self, params):
        for name, tensor, kind in params:
            if tensor.grad is None:
                continue
            grad = tensor.grad
            if not np.isfinite(grad).all():
                raise DivergenceError(f"non-finite gradient for {name}")
            if self.weight_decay and kind == "weight":
                grad = grad + 2.0 * self.weight_decay * tensor.data
            v = self.velocity.get(name)
            if v is None:
                v = self.velocity[name] = np.zeros_like(tensor.data)
            nag_update(tensor.data, grad, v, self.lr, self.momentum)

    @staticmethod
    def zero_grad(params):
        for _, tensor, _ in params:
            tensor.grad = None

    def state_arrays(self):
        return {f"nag.{k}": v for k, v in self.velocity.items()}

    def load_state(self, arrays):
        self.velocity = {k[len("nag."):]: v.copy()
                         for k, v in arrays.items() if k.startswith("nag.")}


class ApgNag:
    """APG-NAG over named factor tables."""

    def __init__(self, lr, momentum=0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity = {}

    def step(self, name, lam_tensor, gamma_eff):
        if lam_tensor.grad is None:
            return
        grad = lam_tensor.grad
        if not np.isfinite(grad).all():
            raise DivergenceError(f"non-finite gradient for {name}")
        v = self.velocity.get(name)
        if v is None:
            v = self.velocity[name] = np.zeros_like(lam_tensor.data)
        apg_nag_update(lam_tensor.data, grad, v, self.lr, gamma_eff, self.momentum)

    def clear_pruned(self, name, lam_tensor, active_mask):
        """Zero factors and buffers of hard-pruned edges so zeros stay absorbing."""
        lam_tensor.data[~active_mask] = 0.0
        v = self.velocity.get(name)
        if v is not None:
            v[~active_mask] = 0.0

    def state_arrays(self):
        return {f"apg.{k}": v for k, v in self.velocity.items()}

    def load_state(self, arrays):
        self.velocity = {k[len("apg."):]: v.copy()
                         for k, v in arrays.items() if k.startswith("apg.")}


def schedule_lr(schedule, base_lr, epoch, total_epochs):
    if schedule == "constant":
        return base_lr
    if schedule == "linear-decay":
        if total_epochs <= 0:
            return base_lr
        return base_lr * max(0.0, 1.0 - epoch / total_epochs)
    raise ValueError(f"unknown lr schedule {schedule!r}")
