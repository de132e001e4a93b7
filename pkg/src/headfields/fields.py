"""Landmark-centered local deformation fields.

Each facial landmark carries a small MLP that predicts a translation for
nearby observed-space points; per-field outputs are scaled by a
thresholded Gaussian of the distance to the landmark and summed into a
single observed-to-canonical translation. Points beyond the Gaussian
cutoff never query an MLP, so background stays exactly rigid.

A single wide MLP with a matched parameter budget is provided as the
global-field baseline variant.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

OMEGA_P_DIM = 32
OMEGA_A_DIM = 16
POSE_DIM = 6


# -- positional encoding ----------------------------------------------


@dataclass
class EncodingConfig:
    """Sinusoidal encoding with a coarse-to-fine annealing window.

    Frequencies are 2^j * pi for j in [0, n_freqs). Band j is scaled by
    a cosine-smoothed window weight clamp(alpha - j, 0, 1); alpha ramps
    from 0 to n_freqs during training so high frequencies fade in. The
    raw coordinates are prepended so a closed window still carries
    position.
    """

    n_freqs: int = 10
    alpha: float = 10.0

    @property
    def out_dim(self):
        return 3 + 6 * self.n_freqs

    def band_weights(self, dtype=np.float64):
        j = np.arange(self.n_freqs, dtype=dtype)
        x = np.clip(self.alpha - j, 0.0, 1.0)
        return (0.5 * (1.0 - np.cos(np.pi * x))).astype(dtype)

    def frequencies(self, dtype=np.float64):
        return (np.pi * 2.0 ** np.arange(self.n_freqs)).astype(dtype)


def encode(x, cfg):
    """Encode positions (N, 3): [x, w_0 sin(f_0 x), w_0 cos(f_0 x), ...].

    Accepts an ndarray (returns an ndarray) or a Tensor (stays on the
    tape, differentiable w.r.t. x).
    """
    if isinstance(x, Tensor):
        w = cfg.band_weights(x.value.dtype)
        freqs = cfg.frequencies(x.value.dtype)
        parts = [x]
        for j in range(cfg.n_freqs):
            xb = ad.mul(x, float(freqs[j]))
            parts.append(ad.mul(ad.sin(xb), float(w[j])))
            parts.append(ad.mul(ad.cos(xb), float(w[j])))
        return ad.concat(parts, axis=-1)

    x = np.asarray(x)
    w = cfg.band_weights(x.dtype)
    freqs = cfg.frequencies(x.dtype)
    xb = x[..., None, :] * freqs[:, None]            # (N, n_freqs, 3)
    enc = np.concatenate([np.sin(xb), np.cos(xb)], axis=-1)  # (N, nf, 6)
    enc *= w[:, None]
    return np.concatenate([x, enc.reshape(*x.shape[:-1], 6 * cfg.n_freqs)], axis=-1)


# -- MLPs ---------------------------------------------------------------


def init_mlp(rng, sizes, dtype=np.float64, zero_last=True):
    """Fan-in-scaled uniform init; optional zero final layer.

    Zeroing the last layer makes a fresh deformation field start as the
    identity warp (plus centroid deltas), which keeps early training
    stable.
    """
    params = {}
    n_layers = len(sizes) - 1
    for i in range(n_layers):
        fan_in = sizes[i]
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(sizes[i], sizes[i + 1]))
        if zero_last and i == n_layers - 1:
            w = np.zeros_like(w)
        params[f"w{i}"] = ad.parameter(w, dtype=dtype)
        params[f"b{i}"] = ad.parameter(np.zeros(sizes[i + 1]), dtype=dtype)
    return params


def mlp_forward(params, x, final_activation=None):
    """Linear stack with LeakyReLU between layers."""
    n_layers = len(params) // 2
    h = x
    for i in range(n_layers):
        h = ad.linear(h, params[f"w{i}"], params[f"b{i}"])
        if i < n_layers - 1:
            h = ad.leaky_relu(h)
    if final_activation is not None:
        h = final_activation(h)
    return h


def mlp_param_count(params):
    return sum(int(p.value.size) for p in params.values())


# -- spatial weighting ---------------------------------------------------


def local_weight(sq_dist, R=0.03, tau=1e-4, s=0.02):
    """Thresholded, scaled Gaussian support weight.

    W = max(exp(-d^2 / (2 R^2)) - tau, 0) * s. Exactly zero at and
    beyond the cutoff radius R * sqrt(2 ln(1/tau)). Accepts squared
    distances as ndarray or Tensor.
    """
    inv = -1.0 / (2.0 * R * R)
    if isinstance(sq_dist, Tensor):
        g = ad.exp(ad.mul(sq_dist, inv))
        return ad.mul(ad.maximum(ad.sub(g, tau), 0.0), s)
    return np.maximum(np.exp(sq_dist * inv) - tau, 0.0) * s


def cutoff_radius(R=0.03, tau=1e-4):
    """Distance past which the support weight is exactly zero."""
    return R * np.sqrt(2.0 * np.log(1.0 / tau))


# -- frame conditioning ---------------------------------------------------


@dataclass
class FrameContext:
    """Everything a deformation query needs to know about one frame."""

    e: np.ndarray                 # (E,) expression code
    pose: np.ndarray              # (6,) head rotation + jaw, radians
    omega_p: Tensor               # (OMEGA_P_DIM,) deformation latent code
    omega_a: Tensor               # (OMEGA_A_DIM,) appearance latent code
    lm_deformed: np.ndarray       # (N_l, 3) landmark positions this frame
    lm_canonical: np.ndarray      # (N_l, 3) zero-expression landmark positions
    e_overrides: dict = None      # field id -> replacement expression vector

    def field_expression(self, l):
        if self.e_overrides and l in self.e_overrides:
            return np.asarray(self.e_overrides[l], dtype=self.e.dtype)
        return self.e


# -- the field ensemble ---------------------------------------------------


@dataclass
class FieldEnsemble:
    fields: list                   # N_l dicts of MLP tensors
    mask: np.ndarray               # (N_l, E) binary attention mask
    enc: EncodingConfig = field(default_factory=EncodingConfig)
    R: float = 0.03
    tau: float = 1e-4
    s: float = 0.02

    @property
    def num_fields(self):
        return len(self.fields)

    @property
    def cutoff(self):
        return cutoff_radius(self.R, self.tau)

    def named_parameters(self):
        out = {}
        for l, f in enumerate(self.fields):
            for k, p in f.items():
                out[f"field{l:02d}.{k}"] = p
        return out

    def param_count(self):
        return sum(mlp_param_count(f) for f in self.fields)


def field_input_dim(E, enc):
    return enc.out_dim + E + POSE_DIM + OMEGA_P_DIM


def make_ensemble(rng, E, mask, enc=None, R=0.03, tau=1e-4, s=0.02,
                  hidden=40, dtype=np.float64):
    enc = enc or EncodingConfig()
    n_fields = mask.shape[0]
    in_dim = field_input_dim(E, enc)
    fields = [init_mlp(rng, (in_dim, hidden, hidden, 3), dtype=dtype)
              for _ in range(n_fields)]
    return FieldEnsemble(fields=fields, mask=mask.astype(np.float64), enc=enc,
                         R=R, tau=tau, s=s)


def _field_mlp_input(ens, offsets, e_masked, pose, omega_p, n, dtype):
    """Assemble one field's MLP input for n points.

    `offsets` may be an ndarray (encoded off-tape, the common case) or a
    Tensor (kept differentiable for warped intersection points).
    """
    if isinstance(offsets, Tensor):
        enc = encode(offsets, ens.enc)
        cond = np.broadcast_to(
            np.concatenate([e_masked, pose]).astype(dtype), (n, e_masked.size + pose.size))
        return ad.concat([enc, Tensor(np.ascontiguousarray(cond)),
                          ad.broadcast_rows(omega_p, n)], axis=1)
    enc = encode(offsets.astype(dtype), ens.enc)
    cond = np.concatenate([e_masked, pose]).astype(dtype)
    const = np.concatenate([enc, np.broadcast_to(cond, (n, cond.size))], axis=1)
    return ad.concat([Tensor(np.ascontiguousarray(const)),
                      ad.broadcast_rows(omega_p, n)], axis=1)


def local_deform(ens, l, x, ctx):
    """One field's translation at points x (no spatial weighting).

    t_l = MLP(encode(x - c_l), e o A_l, pose, omega_p) + (c_l_canonical -
    c_l_deformed). Callers are expected to prune x to the cutoff ball.
    """
    dtype = ens.fields[l]["w0"].value.dtype
    c_def = ctx.lm_deformed[l]
    delta = (ctx.lm_canonical[l] - c_def).astype(dtype)
    e_masked = (ctx.field_expression(l) * ens.mask[l]).astype(dtype)
    if isinstance(x, Tensor):
        n = x.value.shape[0]
        offsets = ad.sub(x, c_def.astype(dtype))
    else:
        n = x.shape[0]
        offsets = x - c_def
    inp = _field_mlp_input(ens, offsets, e_masked, ctx.pose.astype(dtype),
                           ctx.omega_p, n, dtype)
    out = mlp_forward(ens.fields[l], inp)
    return ad.add(out, delta)


def blend(ens, x, ctx):
    """Weighted sum of in-range local fields: returns (t, x_can).

    Fields whose cutoff ball does not contain a point are skipped
    entirely (their weight is exactly zero), which matches the dense sum
    while avoiding the MLP query.
    """
    xv = x.value if isinstance(x, Tensor) else np.asarray(x)
    n = xv.shape[0]
    dtype = ens.fields[0]["w0"].value.dtype
    cut2 = float(ens.cutoff) ** 2

    diff = xv[:, None, :] - ctx.lm_deformed[None, :, :]
    d2 = np.einsum("nlj,nlj->nl", diff, diff)

    pieces, rows = [], []
    for l in range(ens.num_fields):
        sel = np.nonzero(d2[:, l] < cut2)[0]
        if sel.size == 0:
            continue
        if isinstance(x, Tensor):
            x_sel = ad.take_rows(x, sel)
            off = ad.sub(x_sel, ctx.lm_deformed[l].astype(dtype))
            sq = ad.tsum(ad.mul(off, off), axis=1)
            w = local_weight(sq, ens.R, ens.tau, ens.s)
            t_l = local_deform(ens, l, x_sel, ctx)
            pieces.append(ad.mul(t_l, ad.reshape(w, (-1, 1))))
        else:
            w = local_weight(d2[sel, l], ens.R, ens.tau, ens.s).astype(dtype)
            t_l = local_deform(ens, l, xv[sel], ctx)
            pieces.append(ad.mul(t_l, w[:, None]))
        rows.append(sel)

    if not pieces:
        t = Tensor(np.zeros((n, 3), dtype=dtype))
    else:
        base = Tensor(np.zeros((n, 3), dtype=dtype))
        t = ad.index_add(base, np.concatenate(rows), ad.concat(pieces, axis=0))
    x_can = ad.add(t, x if isinstance(x, Tensor) else xv.astype(dtype))
    return t, x_can


# -- global-field baseline -------------------------------------------------


@dataclass
class GlobalField:
    params: dict
    enc: EncodingConfig
    E: int

    def named_parameters(self):
        return {f"global.{k}": p for k, p in self.params.items()}

    def param_count(self):
        return mlp_param_count(self.params)


def matched_hidden_width(in_dim, target_params):
    """Hidden width of a 3-layer MLP with ~target_params parameters."""
    # params(H) = in*H + H + H^2 + H + 3H + 3
    a, b, c = 1.0, in_dim + 5.0, 3.0 - target_params
    h = (-b + np.sqrt(b * b - 4 * a * c)) / 2
    return max(int(round(h)), 8)


def make_global_field(rng, E, target_params, enc=None, dtype=np.float64):
    enc = enc or EncodingConfig()
    in_dim = field_input_dim(E, enc)
    hidden = matched_hidden_width(in_dim, target_params)
    params = init_mlp(rng, (in_dim, hidden, hidden, 3), dtype=dtype)
    return GlobalField(params=params, enc=enc, E=E)


def global_deform(gf, x, ctx):
    """Single unmasked field over the full volume: returns (t, x_can)."""
    dtype = gf.params["w0"].value.dtype
    if isinstance(x, Tensor):
        n = x.value.shape[0]
        offsets = x
    else:
        n = np.asarray(x).shape[0]
        offsets = np.asarray(x)
    e_full = ctx.e.astype(dtype)
    fake_ens = FieldEnsemble(fields=[gf.params], mask=np.ones((1, gf.E)), enc=gf.enc)
    inp = _field_mlp_input(fake_ens, offsets, e_full, ctx.pose.astype(dtype),
                           ctx.omega_p, n, dtype)
    t = mlp_forward(gf.params, inp)
    x_can = ad.add(t, x if isinstance(x, Tensor) else np.asarray(x).astype(dtype))
    return t, x_can
