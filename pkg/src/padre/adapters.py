"""Reference implementations of six attention(-replacement) schemes, plus
machine-checked reductions of each to polynomial-cascade primitives.

Each scheme gets a direct forward pass written in the scheme's own natural
factorization, and (where the reduction is exact) an evaluation *plan* built
solely from structured mixers, Hadamard cascades, and weighted combines.
The plan and the direct pass are independent computational routes; their
agreement on random inputs is the equivalence certificate.

* SimA's column normalizers are not polynomial, so its plan divides each
  cascade by the input-dependent l1-norm pair: a rational-form combine.
* The selective state-space scheme is approximated (not matched) by a
  first-order surrogate; the surrogate itself is the degree-3 object.
* Softmax attention is not polynomial at any degree; it is approximated by
  a Taylor-truncated rational form with an a-priori remainder bound.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import (
    FlopLedger,
    LayoutError,
    Mixer,
    ShapeError,
    Side,
    apply_mixer,
    hadamard,
)

L1_EPS = 1e-12


class NormalizationError(ValueError):
    """A column produced an l1 norm too small to normalize by."""


class InstabilityError(ArithmeticError):
    """A truncated-series denominator collapsed below the stability floor."""


class EquivalenceError(ValueError):
    """Plan and direct evaluations disagree beyond tolerance."""

    def __init__(self, max_deviation: float, tol: float):
        self.max_deviation = max_deviation
        super().__init__(f"plan deviates from direct forward by {max_deviation:.3e} "
                         f"(tolerance {tol:.0e})")


# ---------------------------------------------------------------------------
# Cascade plans
# ---------------------------------------------------------------------------

@dataclass
class PlanCascade:
    """One Hadamard cascade Z_1 = Y_1, Z_{j+1} = (C_j Z_j D_j) * Y_{j+1}."""

    token: list[Mixer]
    channel: list[Mixer]
    inter_token: list[Mixer]
    inter_channel: list[Mixer]
    weight: float = 1.0

    def top_tap(self, x: np.ndarray, ledger: FlopLedger | None = None) -> np.ndarray:
        z = None
        for j in range(len(self.token)):
            y = apply_mixer(self.token[j], apply_mixer(self.channel[j], x, ledger), ledger)
            if z is None:
                z = y
            else:
                t = apply_mixer(self.inter_channel[j - 1], z, ledger)
                t = apply_mixer(self.inter_token[j - 1], t, ledger)
                z = hadamard(t, y, ledger)
        return z


@dataclass
class PadrePlan:
    """A weighted sum of cascades, optionally divided by per-cascade scalars.

    ``normalizers`` (when set) computes one positive denominator per cascade
    from the input, which places the plan in the rational extension of the
    polynomial form.
    """

    n_tokens: int
    n_channels: int
    cascades: list[PlanCascade]
    normalizers: Callable[[np.ndarray], np.ndarray] | None = None

    def evaluate(self, x: np.ndarray, ledger: FlopLedger | None = None) -> np.ndarray:
        out = np.zeros((self.n_tokens, self.n_channels))
        etas = self.normalizers(x) if self.normalizers is not None else None
        for idx, cascade in enumerate(self.cascades):
            w = cascade.weight if etas is None else cascade.weight / etas[idx]
            out += w * cascade.top_tap(x, ledger)
        if ledger is not None:
            ledger.add("combine", len(self.cascades) * out.size)
        return out


def verify_plan(direct_fn, plan: PadrePlan, trials: int = 100, seed: int = 0,
                tol: float = 1e-10) -> float:
    """Compare the two routes on random inputs; raises on disagreement."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        x = rng.uniform(-1.0, 1.0, size=(plan.n_tokens, plan.n_channels))
        ref = direct_fn(x)
        got = plan.evaluate(x)
        scale = max(float(np.max(np.abs(ref))), 1e-12)
        worst = max(worst, float(np.max(np.abs(ref - got))) / scale)
    if worst > tol:
        raise EquivalenceError(worst, tol)
    return worst


def _broadcast_column(weight_matrix: np.ndarray, col: int, n_channels: int) -> Mixer:
    """Channel mixer sending X to (X @ w)[:, col] broadcast to every channel."""
    left = weight_matrix[:, col:col + 1]
    right = np.ones((1, n_channels))
    return Mixer.low_rank(Side.CHANNEL, left, right)


def _token_sum(n_tokens: int) -> Mixer:
    """Rank-1 all-ones token mixer: every output row is the column sum."""
    return Mixer.low_rank(Side.TOKEN, np.ones((n_tokens, 1)), np.ones((1, n_tokens)))


def _qkv_cascades(w_q, w_k, w_v, n_tokens: int, weight: float) -> list[PlanCascade]:
    """Cascades realizing Q (K^T V) as a sum of D degree-3 Hadamard chains.

    Chain i: Y1 broadcasts column i of K, Y2 = V, Y3 broadcasts column i of
    Q; the token-sum mixer between degrees 2 and 3 turns Y1*Y2 into the
    row-broadcast of row i of K^T V.
    """
    d_ch = w_q.shape[0]
    ident_t, ident_c = Mixer.identity(Side.TOKEN, n_tokens), Mixer.identity(Side.CHANNEL, d_ch)
    out = []
    for i in range(d_ch):
        out.append(PlanCascade(
            token=[ident_t, ident_t, ident_t],
            channel=[_broadcast_column(w_k, i, d_ch), Mixer.dense(Side.CHANNEL, w_v),
                     _broadcast_column(w_q, i, d_ch)],
            inter_token=[ident_t, _token_sum(n_tokens)],
            inter_channel=[ident_c, ident_c],
            weight=weight,
        ))
    return out


# ---------------------------------------------------------------------------
# SimA: l1-column-normalized Q K^T V
# ---------------------------------------------------------------------------

@dataclass
class SimaParams:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray


def _l1_cols(a: np.ndarray, what: str) -> np.ndarray:
    norms = np.sum(np.abs(a), axis=0)
    if np.min(norms) <= L1_EPS:
        raise NormalizationError(f"zero-norm column in {what}")
    return norms


def sima_forward(p: SimaParams, x: np.ndarray,
                 ledger: FlopLedger | None = None) -> np.ndarray:
    q, k, v = x @ p.w_q, x @ p.w_k, x @ p.w_v
    qh = q / _l1_cols(q, "Q")[None, :]
    kh = k / _l1_cols(k, "K")[None, :]
    out = qh @ (kh.T @ v)
    if ledger is not None:
        n, d = x.shape
        ledger.add("channel_mix", 3 * n * d * d)   # projections
        ledger.add("combine", 2 * n * d)           # column normalizations
        ledger.add("token_mix", 2 * n * d * d)     # K^T V then Q(K^T V)
    return out


def sima_numerator(p: SimaParams, x: np.ndarray) -> np.ndarray:
    """The unnormalized part: Q (K^T V), homogeneous of degree 3."""
    q, k, v = x @ p.w_q, x @ p.w_k, x @ p.w_v
    return q @ (k.T @ v)


def sima_as_padre(p: SimaParams, n_tokens: int, verify_trials: int = 100,
                  seed: int = 0, tol: float = 1e-10) -> PadrePlan:
    """Cascade plan for SimA; per-cascade l1 normalizers form the denominator."""

    def normalizers(x: np.ndarray) -> np.ndarray:
        return _l1_cols(x @ p.w_q, "Q") * _l1_cols(x @ p.w_k, "K")

    plan = PadrePlan(
        n_tokens=n_tokens, n_channels=p.w_q.shape[0],
        cascades=_qkv_cascades(p.w_q, p.w_k, p.w_v, n_tokens, 1.0),
        normalizers=normalizers,
    )
    verify_plan(lambda x: sima_forward(p, x), plan, verify_trials, seed, tol)
    return plan


# ---------------------------------------------------------------------------
# Conv2Former-style convolutional modulation: DConv(W1 X) * (W2 X)
# ---------------------------------------------------------------------------

@dataclass
class Conv2FormerParams:
    w1: np.ndarray
    w2: np.ndarray
    kernel: np.ndarray
    grid_h: int
    grid_w: int

    def __post_init__(self):
        if self.kernel.ndim != 2:
            raise ShapeError("depthwise kernel must be 2-D")


def _dconv_grid(x: np.ndarray, kernel: np.ndarray, h: int, w: int) -> np.ndarray:
    """Same-size zero-padded spatial correlation, one shared kernel per channel."""
    n, d = x.shape
    if h * w != n:
        raise LayoutError(f"grid {h}x{w} does not cover N={n}")
    kh, kw = kernel.shape
    g = x.reshape(h, w, d)
    gp = np.pad(g, ((kh // 2, kh - 1 - kh // 2), (kw // 2, kw - 1 - kw // 2), (0, 0)))
    out = np.zeros_like(g)
    for r in range(kh):
        for c in range(kw):
            out += kernel[r, c] * gp[r:r + h, c:c + w]
    return out.reshape(n, d)


def conv2former_forward(p: Conv2FormerParams, x: np.ndarray,
                        ledger: FlopLedger | None = None) -> np.ndarray:
    a = _dconv_grid(x @ p.w1, p.kernel, p.grid_h, p.grid_w)
    v = x @ p.w2
    if ledger is not None:
        n, d = x.shape
        ledger.add("channel_mix", 2 * n * d * d)
        ledger.add("token_mix", Mixer.conv2d(Side.TOKEN, p.kernel, p.grid_h,
                                             p.grid_w).macs_per_vector() * d)
        ledger.add("hadamard", n * d)
    return a * v


def conv2former_as_padre(p: Conv2FormerParams, verify_trials: int = 100,
                         seed: int = 0, tol: float = 1e-10) -> PadrePlan:
    n = p.grid_h * p.grid_w
    d_ch = p.w1.shape[0]
    cascade = PlanCascade(
        token=[Mixer.conv2d(Side.TOKEN, p.kernel, p.grid_h, p.grid_w),
               Mixer.identity(Side.TOKEN, n)],
        channel=[Mixer.dense(Side.CHANNEL, p.w1), Mixer.dense(Side.CHANNEL, p.w2)],
        inter_token=[Mixer.identity(Side.TOKEN, n)],
        inter_channel=[Mixer.identity(Side.CHANNEL, d_ch)],
    )
    plan = PadrePlan(n_tokens=n, n_channels=d_ch, cascades=[cascade])
    verify_plan(lambda x: conv2former_forward(p, x), plan, verify_trials, seed, tol)
    return plan


# ---------------------------------------------------------------------------
# Hyena-style gated long-convolution recurrence
# ---------------------------------------------------------------------------

@dataclass
class HyenaParams:
    order: int
    projections: list[np.ndarray]   # order+1 maps, each L x M
    filters: list[np.ndarray]       # order causal kernels, each length L

    def __post_init__(self):
        if len(self.projections) != self.order + 1 or len(self.filters) != self.order:
            raise ShapeError("need order+1 projections and order filters")
        lengths = {p.shape[0] for p in self.projections} | {h.shape[0] for h in self.filters}
        if len(lengths) != 1:
            raise ShapeError("projections and filters must share output length L")


def causal_conv(h: np.ndarray, z: np.ndarray) -> np.ndarray:
    """(h * z)_t = sum_{s<=t} h_{t-s} z_s with zero history."""
    if h.shape != z.shape:
        raise ShapeError("filter and signal lengths differ")
    return np.convolve(h, z)[:z.shape[0]]


def hyena_project(p: HyenaParams, chi: np.ndarray) -> list[np.ndarray]:
    return [proj @ chi for proj in p.projections]


def hyena_forward_recurrence(p: HyenaParams, xs: list[np.ndarray]) -> np.ndarray:
    """Evaluate the gating recurrence z^{n+1} = x^n * (h^n conv z^n)."""
    if len(xs) != p.order + 1:
        raise ShapeError(f"need {p.order + 1} projected signals, got {len(xs)}")
    z = xs[0]
    for n in range(1, p.order + 1):
        z = xs[n] * causal_conv(p.filters[n - 1], z)
    return z


def hyena_forward(p: HyenaParams, chi: np.ndarray) -> np.ndarray:
    return hyena_forward_recurrence(p, hyena_project(p, chi))


def hyena_forward_closed(p: HyenaParams, chi: np.ndarray, size_cap: int = 16) -> np.ndarray:
    """Explicit monomial-sum evaluation: y = sum_m eta_m * prod_j chi_{m_j}.

    The coefficient of one multi-index is built by chaining, per level, a
    causal convolution of the previous level with that level's projection
    column.  Exponential in the input size; oracle use only.
    """
    seq_len = p.projections[0].shape[0]
    m_dim = chi.shape[0]
    if seq_len > size_cap or m_dim > size_cap:
        raise ShapeError(f"closed-form evaluation capped at size {size_cap}")
    y = np.zeros(seq_len)
    for multi in itertools.product(range(m_dim), repeat=p.order + 1):
        w = p.projections[0][:, multi[0]]
        for lvl in range(1, p.order + 1):
            w = p.projections[lvl][:, multi[lvl]] * causal_conv(p.filters[lvl - 1], w)
        y += w * math.prod(chi[j] for j in multi)
    return y


# ---------------------------------------------------------------------------
# Selective state-space scan (Mamba-style) and its first-order surrogate
# ---------------------------------------------------------------------------

@dataclass
class MambaParams:
    a_diag: np.ndarray       # strictly negative diagonal of A
    w_b: np.ndarray          # N_s x L
    w_c: np.ndarray          # L x N_s
    delta_u: np.ndarray      # rank-1 gate factors: W_delta = u v^T
    delta_v: np.ndarray
    beta: float = 1.0
    pi_param: float = 0.0

    def __post_init__(self):
        if np.max(self.a_diag) >= 0:
            raise ShapeError("state matrix diagonal must be strictly negative")


def mamba_delta(p: MambaParams, x: np.ndarray, delta_scale: float) -> float:
    """Scalar step size: scaled softplus of a linear gate of the input.

    The rank-1 gate matrix u v^T reduces to the scalar (x . u) * sum(v); the
    softplus keeps the step nonnegative.
    """
    gate = float(x @ p.delta_u) * float(np.sum(p.delta_v))
    z = p.beta * (p.pi_param + gate)
    return delta_scale * float(np.logaddexp(0.0, z)) / p.beta


def _mamba_bc(p: MambaParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return p.w_b @ x, x @ p.w_c


def mamba_forward(p: MambaParams, x: np.ndarray, delta_scale: float = 1.0) -> np.ndarray:
    """Exact scan with exponential discretization and input-dependent B, C, delta.

    The input is a scalar sequence of length L; B, C and delta are functions
    of the whole sequence, so the discretized transition is constant along
    the scan.
    """
    delta = mamba_delta(p, x, delta_scale)
    b, c = _mamba_bc(p, x)
    a_bar = np.exp(delta * p.a_diag)
    b_bar = (np.expm1(delta * p.a_diag) / p.a_diag) * b
    return _scan(a_bar, b_bar, c, x)


def mamba_padre_approx(p: MambaParams, x: np.ndarray, delta_scale: float = 1.0,
                       frozen_delta: float | None = None) -> np.ndarray:
    """First-order surrogate: A_bar ~ I + delta A, B_bar ~ delta B.

    With ``frozen_delta`` the step is treated as a constant coefficient and
    the map is a homogeneous degree-3 polynomial of the input sequence.
    """
    delta = mamba_delta(p, x, delta_scale) if frozen_delta is None else frozen_delta
    b, c = _mamba_bc(p, x)
    a_bar = 1.0 + delta * p.a_diag
    b_bar = delta * b
    return _scan(a_bar, b_bar, c, x)


def _scan(a_bar: np.ndarray, b_bar: np.ndarray, c: np.ndarray, x: np.ndarray) -> np.ndarray:
    h = np.zeros_like(a_bar)
    out = np.empty_like(x)
    for t in range(x.shape[0]):
        h = a_bar * h + b_bar * x[t]
        out[t] = c @ h
    return out


# ---------------------------------------------------------------------------
# Castling-style linear attention with an auxiliary depthwise path
# ---------------------------------------------------------------------------

@dataclass
class CastlingParams:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    dw: Mixer                # depthwise token-side convolution operator

    def __post_init__(self):
        if self.dw.side != Side.TOKEN:
            raise ShapeError("the depthwise operator must act on the token side")


def castling_forward(p: CastlingParams, x: np.ndarray,
                     ledger: FlopLedger | None = None) -> np.ndarray:
    """O = (1/pi) Q (K^T V) + (I/2 + M_DW) V, in factorized O(N D^2) order."""
    q, k, v = x @ p.w_q, x @ p.w_k, x @ p.w_v
    out = (q @ (k.T @ v)) / math.pi + 0.5 * v + apply_mixer(p.dw, v, ledger)
    if ledger is not None:
        n, d = x.shape
        ledger.add("channel_mix", 3 * n * d * d)
        ledger.add("token_mix", 2 * n * d * d)
        ledger.add("combine", 2 * n * d)
    return out


def castling_as_padre(p: CastlingParams, verify_trials: int = 100, seed: int = 0,
                      tol: float = 1e-10) -> PadrePlan:
    """Degree-3 cascades for the kernelized term plus two degree-1 branches."""
    n = p.dw.dim
    d_ch = p.w_q.shape[0]
    cascades = _qkv_cascades(p.w_q, p.w_k, p.w_v, n, 1.0 / math.pi)
    cascades.append(PlanCascade(
        token=[Mixer.identity(Side.TOKEN, n)],
        channel=[Mixer.dense(Side.CHANNEL, p.w_v)],
        inter_token=[], inter_channel=[], weight=0.5,
    ))
    cascades.append(PlanCascade(
        token=[p.dw],
        channel=[Mixer.dense(Side.CHANNEL, p.w_v)],
        inter_token=[], inter_channel=[], weight=1.0,
    ))
    plan = PadrePlan(n_tokens=n, n_channels=d_ch, cascades=cascades)
    verify_plan(lambda x: castling_forward(p, x), plan, verify_trials, seed, tol)
    return plan


# ---------------------------------------------------------------------------
# Softmax attention and its truncated-series rational approximation
# ---------------------------------------------------------------------------

@dataclass
class AttnParams:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    d_k: int

    def __post_init__(self):
        if self.d_k <= 0:
            raise ShapeError("head dimension must be positive")


def _attn_logits(p: AttnParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    q, k = x @ p.w_q, x @ p.w_k
    return q @ k.T / math.sqrt(p.d_k), x @ p.w_v


def softmax_attention(p: AttnParams, x: np.ndarray) -> np.ndarray:
    logits, v = _attn_logits(p, x)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return (e / e.sum(axis=1, keepdims=True)) @ v


def exp_taylor(logits: np.ndarray, degree: int) -> np.ndarray:
    out = np.ones_like(logits)
    term = np.ones_like(logits)
    for l in range(1, degree + 1):
        term = term * logits / l
        out = out + term
    return out


def taylor_remainder_bound(l_bound: float, degree: int) -> float:
    """A-priori truncation error of exp on [-L, L]: e^L L^{d+1} / (d+1)!."""
    return math.exp(l_bound) * l_bound ** (degree + 1) / math.factorial(degree + 1)


def attention_rational_approx(p: AttnParams, x: np.ndarray,
                              taylor_degree: int) -> tuple[np.ndarray, float]:
    """Attention with each exp replaced by its degree-d truncation.

    Returns the approximation and the per-exponential remainder bound at the
    measured logit magnitude.
    """
    logits, v = _attn_logits(p, x)
    l_bound = float(np.max(np.abs(logits)))
    t = exp_taylor(logits, taylor_degree)
    den = t.sum(axis=1)
    if np.min(np.abs(den)) < 1e-12:
        raise InstabilityError("truncated-series denominator below 1e-12")
    out = (t @ v) / den[:, None]
    return out, taylor_remainder_bound(l_bound, taylor_degree)
