"""Reverse-mode gradients for the polynomial block, checked by differences.

Gradients are derived stage by stage (mixer transpose-application, the
Hadamard product rule, combine fan-out) so the cost stays O(N * D * d) with
structured mixers and the package needs no autodiff dependency.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .block import (
    PadreBlock,
    PadreTrace,
    RMS_EPS,
    WMode,
    clone_block,
    combine_weight,
    forward,
    iter_parameters,
)
from .tensor import Mixer, MixerKind, PadMode, Side, apply_mixer, apply_mixer_transpose


@dataclass
class GradBundle:
    """Vector-Jacobian products; each entry mirrors its primal's shape."""

    d_x: np.ndarray
    mixers: dict[str, dict[str, np.ndarray]]
    d_w: np.ndarray
    d_l: np.ndarray | None = None
    d_u: np.ndarray | None = None
    d_v: np.ndarray | None = None

    def by_label(self) -> dict[str, np.ndarray]:
        out = {}
        for name, parts in self.mixers.items():
            for pname, arr in parts.items():
                out[f"{name}.{pname}"] = arr
        out["W"] = self.d_w
        if self.d_l is not None:
            out["L"] = self.d_l
        if self.d_u is not None:
            out["U"] = self.d_u
            out["V"] = self.d_v
        return out


def _pad_like(m: Mixer, x: np.ndarray, axes) -> np.ndarray:
    circ = m.padding == PadMode.CIRCULAR
    pad = [(0, 0)] * x.ndim
    if m.kind == MixerKind.CONV1D:
        k = m.kernel.shape[0]
        a = k // 2
        pad[axes] = (a, k - 1 - a)
    else:
        kh, kw = m.kernel.shape
        pad[axes[0]] = (kh // 2, kh - 1 - kh // 2)
        pad[axes[1]] = (kw // 2, kw - 1 - kw // 2)
    return np.pad(x, pad, mode="wrap" if circ else "constant")


def mixer_param_grad(m: Mixer, x_in: np.ndarray, g_out: np.ndarray) -> dict[str, np.ndarray]:
    """Gradient of sum(g_out * apply(m, x_in)) w.r.t. the mixer parameters."""
    k, token = m.kind, m.side == Side.TOKEN
    if k == MixerKind.IDENTITY:
        return {}
    if k == MixerKind.DENSE:
        return {"mat": g_out @ x_in.T if token else x_in.T @ g_out}
    if k == MixerKind.DIAGONAL:
        return {"diag": (g_out * x_in).sum(axis=1 if token else 0)}
    if k == MixerKind.LOW_RANK:
        if token:
            rx = m.right @ x_in
            return {"left": g_out @ rx.T, "right": (m.left.T @ g_out) @ x_in.T}
        xl = x_in @ m.left
        return {"left": x_in.T @ (g_out @ m.right.T), "right": xl.T @ g_out}
    if k == MixerKind.CONV1D:
        axis = 0 if token else 1
        xp = _pad_like(m, x_in, axis)
        n = x_in.shape[axis]
        dk = np.empty(m.kernel.shape[0])
        sl = [slice(None), slice(None)]
        for j in range(dk.shape[0]):
            sl[axis] = slice(j, j + n)
            dk[j] = np.sum(g_out * xp[tuple(sl)])
        return {"kernel": dk}
    # CONV2D
    n, dch = x_in.shape
    if token:
        xg = x_in.reshape(m.grid_h, m.grid_w, dch)
        gg = g_out.reshape(m.grid_h, m.grid_w, dch)
        axes = (0, 1)
    else:
        xg = x_in.reshape(n, m.grid_h, m.grid_w)
        gg = g_out.reshape(n, m.grid_h, m.grid_w)
        axes = (1, 2)
    xp = _pad_like(m, xg, axes)
    kh, kw = m.kernel.shape
    dk = np.empty((kh, kw))
    sl = [slice(None)] * 3
    for r in range(kh):
        sl[axes[0]] = slice(r, r + m.grid_h)
        for c in range(kw):
            sl[axes[1]] = slice(c, c + m.grid_w)
            dk[r, c] = np.sum(gg * xp[tuple(sl)])
    return {"kernel": dk}


def _rms_backward(m_pre: np.ndarray, g: np.ndarray, eps: float = RMS_EPS) -> np.ndarray:
    dch = m_pre.shape[1]
    s = np.sqrt(np.mean(m_pre * m_pre, axis=1, keepdims=True) + eps)
    dot = np.sum(g * m_pre, axis=1, keepdims=True)
    return g / s - m_pre * dot / (dch * s ** 3)


def backward(block: PadreBlock, trace: PadreTrace, upstream: np.ndarray) -> GradBundle:
    """Vector-Jacobian products of the block output against x and all parameters."""
    d = block.degree
    if upstream.shape != trace.output.shape:
        raise ValueError(f"upstream shape {upstream.shape} != output {trace.output.shape}")
    mixer_grads: dict[str, dict[str, np.ndarray]] = {}

    def acc(name: str, grads: dict[str, np.ndarray]) -> None:
        slot = mixer_grads.setdefault(name, {})
        for pname, arr in grads.items():
            slot[pname] = slot[pname] + arr if pname in slot else arr

    d_u = d_v = None
    if block.resize_left is not None:
        pv = trace.pre_resize @ block.resize_right
        d_u = upstream @ pv.T
        d_v = (block.resize_left @ trace.pre_resize).T @ upstream
        g_p = block.resize_left.T @ upstream @ block.resize_right.T
    else:
        g_p = upstream

    d_l = g_p.copy() if block.bias is not None else None
    d_w = np.zeros_like(block.weights)
    d_z = [np.zeros_like(g_p) for _ in range(d)]
    for i in block.degree_mask:
        prod = g_p * trace.z[i - 1]
        if block.w_mode == WMode.FULL:
            d_w[:, :, i - 1] = prod
        elif block.w_mode == WMode.CHANNEL_BROADCAST:
            d_w[:, i - 1] = prod.sum(axis=0)
        else:
            d_w[i - 1] = prod.sum()
        d_z[i - 1] += g_p * combine_weight(block, i)

    d_y = [np.zeros_like(g_p) for _ in range(d)]
    for i in range(d - 1, 0, -1):          # stage producing Z_{i+1} (index i)
        g_z = d_z[i]
        zd = apply_mixer(block.inter_channel[i - 1], trace.z[i - 1])
        t = apply_mixer(block.inter_token[i - 1], zd)
        d_t = g_z * trace.y[i]
        d_y[i] += g_z * t
        acc(f"C{i}", mixer_param_grad(block.inter_token[i - 1], zd, d_t))
        d_zd = apply_mixer_transpose(block.inter_token[i - 1], d_t)
        acc(f"D{i}", mixer_param_grad(block.inter_channel[i - 1], trace.z[i - 1], d_zd))
        d_z[i - 1] += apply_mixer_transpose(block.inter_channel[i - 1], d_zd)
    d_y[0] += d_z[0]

    d_x = np.zeros_like(trace.x)
    for i in range(d):
        g_y = d_y[i]
        g_m = _rms_backward(trace.y_raw[i], g_y) if block.normalize_y else g_y
        xb = apply_mixer(block.channel_mixers[i], trace.x)
        acc(f"A{i + 1}", mixer_param_grad(block.token_mixers[i], xb, g_m))
        g_xb = apply_mixer_transpose(block.token_mixers[i], g_m)
        acc(f"B{i + 1}", mixer_param_grad(block.channel_mixers[i], trace.x, g_xb))
        d_x += apply_mixer_transpose(block.channel_mixers[i], g_xb)

    return GradBundle(d_x=d_x, mixers=mixer_grads, d_w=d_w, d_l=d_l, d_u=d_u, d_v=d_v)


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------

@dataclass
class GradReport:
    max_rel_err: float
    failures: int
    probes: int
    fail_tol: float

    @property
    def passed(self) -> bool:
        return self.failures == 0


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(1e-8, abs(a) + abs(b))


def finite_difference_report(loss_fn, targets: list[tuple[str, np.ndarray]],
                             analytic: dict[str, np.ndarray], probes: int,
                             step: float, seed: int, fail_tol: float) -> GradReport:
    """Probe random scalar entries of ``targets`` with central differences.

    ``targets`` holds mutable arrays that ``loss_fn`` reads; entries are
    perturbed in place and restored.  Probes are distributed uniformly over
    all scalars.
    """
    rng = np.random.default_rng(seed)
    sizes = np.array([arr.size for _, arr in targets])
    cum = np.cumsum(sizes)
    total = int(cum[-1])
    max_rel, failures = 0.0, 0
    for _ in range(probes):
        flat = int(rng.integers(total))
        t = int(np.searchsorted(cum, flat, side="right"))
        idx = flat - (cum[t - 1] if t else 0)
        label, arr = targets[t]
        orig = arr.flat[idx]
        arr.flat[idx] = orig + step
        hi = loss_fn()
        arr.flat[idx] = orig - step
        lo = loss_fn()
        arr.flat[idx] = orig
        fd = (hi - lo) / (2 * step)
        an = analytic[label].flat[idx]
        rel = relative_error(fd, an)
        max_rel = max(max_rel, rel)
        failures += rel >= fail_tol
    return GradReport(max_rel_err=max_rel, failures=failures, probes=probes,
                      fail_tol=fail_tol)


def upstream_probe(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Small-magnitude upstream for finite-difference probing.

    The VJP check is scale-equivariant, and a small loss keeps difference
    noise on near-cancelled gradients inside the absolute floor of the
    relative-error metric.
    """
    size = int(np.prod(shape))
    return rng.uniform(-1.0, 1.0, size=shape) * (0.01 / size)


def gradcheck(block: PadreBlock, x: np.ndarray, probes: int = 200, step: float = 1e-4,
              seed: int = 0, fail_tol: float = 1e-5) -> GradReport:
    """Compare ``backward`` against central differences on random scalars."""
    rng = np.random.default_rng(seed)
    work = clone_block(block)
    xw = np.array(x, dtype=np.float64, copy=True)
    out, trace = forward(work, xw)
    g_up = upstream_probe(rng, out.shape)
    bundle = backward(work, trace, g_up)
    analytic = bundle.by_label()
    analytic["x"] = bundle.d_x
    targets = iter_parameters(work) + [("x", xw)]
    base = out.copy()

    # centered loss: subtracting the base output cancels the large constant
    # term whose rounding would otherwise dominate the difference quotient
    def loss() -> float:
        return float(np.sum(g_up * (forward(work, xw)[0] - base)))

    return finite_difference_report(loss, targets, analytic, probes, step,
                                    seed + 1, fail_tol)
