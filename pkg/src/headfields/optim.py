"""Adam optimizer and finite-difference gradient verification."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


def log_linear_lr(base=1e-3, final=1e-4):
    """Learning rate decayed log-linearly from `base` to `final` over a run.

    Returns lr(step, total_steps); constant `base` when total_steps == 0.
    """

    def schedule(step, total_steps):
        if total_steps <= 0:
            return base
        frac = min(max(step / total_steps, 0.0), 1.0)
        return base * (final / base) ** frac

    return schedule


class Adam:
    """Standard Adam (bias-corrected) over a name -> Tensor parameter dict.

    beta defaults follow common practice: (0.9, 0.999), eps 1e-8. Moments
    are allocated lazily in the parameter dtype; the update runs with
    in-place numpy ops to keep large voxel-grid steps cheap.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr=None):
        """One Adam update from the accumulated .grad fields."""
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        inv_sqrt_bc2 = 1.0 / np.sqrt(bc2)
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                g = 0.0
                m, v = self.m[k], self.v[k]
                m *= self.beta1
                v *= self.beta2
            else:
                m, v = self.m[k], self.v[k]
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * (g * g)
            denom = np.sqrt(v)
            denom *= inv_sqrt_bc2
            denom += self.eps
            upd = m / denom
            upd *= lr / bc1
            p.value -= upd

    def state_tensors(self):
        """Moment arrays plus the step counter, for checkpointing."""
        out = {}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        out["adam.t"] = np.array([float(self.t)], dtype=np.float32)
        return out

    def load_state(self, tensors):
        for k in self.params:
            self.m[k] = tensors[f"adam.m.{k}"].astype(self.m[k].dtype).reshape(self.m[k].shape)
            self.v[k] = tensors[f"adam.v.{k}"].astype(self.v[k].dtype).reshape(self.v[k].shape)
        self.t = int(tensors["adam.t"][0])


def finite_diff_check(fn, params, eps=1e-4, probes_per_param=5, rng=None):
    """Max relative error between backprop and central finite differences.

    `fn()` rebuilds the graph from the current parameter values and returns
    a scalar Tensor. For each parameter a few coordinates are probed
    (all of them when the tensor is small). Relative error is measured
    against max(|analytic|, |numeric|, 1e-8) per probe.
    """
    rng = rng or np.random.default_rng(0)
    loss = fn()
    ad.backward(loss)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.value))
                for k, p in params.items()}

    worst = 0.0
    for k, p in params.items():
        flat = p.value.reshape(-1)
        n = flat.size
        if n <= probes_per_param:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=probes_per_param, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            with ad.no_grad():
                fp = float(fn().value)
            flat[c] = orig - eps
            with ad.no_grad():
                fm = float(fn().value)
            flat[c] = orig
            numeric = (fp - fm) / (2 * eps)
            a = float(analytic[k].reshape(-1)[c])
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
