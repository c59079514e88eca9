"""Cross-modal cascades: Hadamard chains that interleave per-mode features.

Every registered mode is first projected to one common N' x D' shape, then
contributes its own bank of per-degree linear features.  A mode sequence
like "aab" selects which mode feeds each level of the cascade, so the top
tap is jointly homogeneous: scaling mode a by alpha and mode b by beta
scales an "aab" tap by alpha^2 * beta.  Sequences that never mix modes are
rejected outright when more than one mode is registered, since they add no
cross-terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .block import _random_mixer, _square_grid, _uniform
from .tensor import (
    FlopLedger,
    Mixer,
    MixerKind,
    ShapeError,
    Side,
    apply_mixer,
    hadamard,
)


class TrivialSequenceError(ValueError):
    """A mode sequence uses a single mode although several are registered."""


class MissingModeError(KeyError):
    """An input for a registered mode was not supplied."""


@dataclass(frozen=True)
class ModeSequence:
    labels: tuple[str, ...]

    @classmethod
    def parse(cls, text: str) -> "ModeSequence":
        return cls(tuple(text))


@dataclass
class ModeSpec:
    """Input shape of one mode plus its projection to the common shape."""

    n_in: int
    d_in: int
    proj_left: np.ndarray | None = None    # N' x N_m, None when already N'
    proj_right: np.ndarray | None = None   # D_m x D', None when already D'


@dataclass(eq=False)
class MultimodalBlock:
    degree: int
    n_out: int
    d_out: int
    modes: dict[str, ModeSpec]
    banks: dict[str, tuple[list[Mixer], list[Mixer]]]   # per mode: token/channel per degree
    inter_token: list[Mixer]
    inter_channel: list[Mixer]
    sequences: list[ModeSequence]
    weights: dict[int, np.ndarray]    # per sequence index: D' x d combine weights
    bias: np.ndarray | None = None

    def __post_init__(self):
        d = self.degree
        if d < 1:
            raise ShapeError("degree must be >= 1")
        if len(self.inter_token) != d - 1 or len(self.inter_channel) != d - 1:
            raise ShapeError("need d-1 inter-degree mixer pairs")
        for mode, (tok, ch) in self.banks.items():
            if len(tok) != d or len(ch) != d:
                raise ShapeError(f"mode {mode!r} needs {d} token and channel mixers")
        for seq in self.sequences:
            if len(seq.labels) != d:
                raise ShapeError(f"sequence {seq.labels} length != degree {d}")
            unknown = set(seq.labels) - set(self.modes)
            if unknown:
                raise ShapeError(f"sequence uses unregistered modes {sorted(unknown)}")
            if len(self.modes) > 1 and len(set(seq.labels)) < 2:
                raise TrivialSequenceError(
                    f"sequence {''.join(seq.labels)} has no cross-terms"
                )


@dataclass
class MultimodalTrace:
    projected: dict[str, np.ndarray]
    features: dict[str, list[np.ndarray]]
    taps: list[list[np.ndarray]]     # per sequence: Z_1..Z_d
    output: np.ndarray


def multimodal_forward(block: MultimodalBlock, inputs: dict[str, np.ndarray],
                       ledger: FlopLedger | None = None) -> tuple[np.ndarray, MultimodalTrace]:
    missing = set(block.modes) - set(inputs)
    if missing:
        raise MissingModeError(f"missing inputs for modes {sorted(missing)}")
    projected: dict[str, np.ndarray] = {}
    for mode, spec in block.modes.items():
        x = inputs[mode]
        if x.shape != (spec.n_in, spec.d_in):
            raise ShapeError(f"mode {mode!r} input shape {x.shape} != "
                             f"({spec.n_in}, {spec.d_in})")
        if spec.proj_left is not None:
            x = spec.proj_left @ x
            if ledger is not None:
                ledger.add("resize", spec.proj_left.shape[0] * spec.n_in * spec.d_in)
        if spec.proj_right is not None:
            if ledger is not None:
                ledger.add("resize", x.shape[0] * spec.d_in * spec.proj_right.shape[1])
            x = x @ spec.proj_right
        if x.shape != (block.n_out, block.d_out):
            raise ShapeError(f"mode {mode!r} projects to {x.shape}, expected "
                             f"({block.n_out}, {block.d_out})")
        projected[mode] = x

    features: dict[str, list[np.ndarray]] = {}
    for mode, (tok, ch) in block.banks.items():
        ys = []
        for i in range(block.degree):
            t = apply_mixer(ch[i], projected[mode], ledger)
            ys.append(apply_mixer(tok[i], t, ledger))
        features[mode] = ys

    out = np.zeros((block.n_out, block.d_out))
    taps: list[list[np.ndarray]] = []
    for s_idx, seq in enumerate(block.sequences):
        z = features[seq.labels[0]][0]
        chain = [z]
        for i in range(1, block.degree):
            t = apply_mixer(block.inter_channel[i - 1], z, ledger)
            t = apply_mixer(block.inter_token[i - 1], t, ledger)
            z = hadamard(t, features[seq.labels[i]][i], ledger)
            chain.append(z)
        taps.append(chain)
        w = block.weights[s_idx]
        for i, zi in enumerate(chain):
            out += w[None, :, i] * zi
        if ledger is not None:
            ledger.add("combine", block.degree * out.size)
    if block.bias is not None:
        out = out + block.bias
    return out, MultimodalTrace(projected=projected, features=features, taps=taps,
                                output=out)


def build_multimodal(mode_shapes: dict[str, tuple[int, int]], n_out: int, d_out: int,
                     degree: int, sequences: list[str], seed: int = 0) -> MultimodalBlock:
    """Seeded block: dense projections where shapes differ, mixed-kind banks."""
    rng = np.random.default_rng(seed)
    modes, banks = {}, {}
    kinds = [MixerKind.DENSE, MixerKind.DIAGONAL, MixerKind.LOW_RANK,
             MixerKind.CONV1D, MixerKind.IDENTITY]

    def pick(side: Side, dim: int) -> Mixer:
        grid = _square_grid(dim)
        menu = kinds + ([MixerKind.CONV2D] if grid else [])
        kind = menu[int(rng.integers(len(menu)))]
        return _random_mixer(rng, side, dim, kind, grid)

    for mode, (n_in, d_in) in mode_shapes.items():
        modes[mode] = ModeSpec(
            n_in=n_in, d_in=d_in,
            proj_left=None if n_in == n_out else _uniform(rng, (n_out, n_in), n_in),
            proj_right=None if d_in == d_out else _uniform(rng, (d_in, d_out), d_in),
        )
        banks[mode] = (
            [pick(Side.TOKEN, n_out) for _ in range(degree)],
            [pick(Side.CHANNEL, d_out) for _ in range(degree)],
        )
    return MultimodalBlock(
        degree=degree, n_out=n_out, d_out=d_out, modes=modes, banks=banks,
        inter_token=[pick(Side.TOKEN, n_out) for _ in range(degree - 1)],
        inter_channel=[pick(Side.CHANNEL, d_out) for _ in range(degree - 1)],
        sequences=[ModeSequence.parse(s) for s in sequences],
        weights={i: _uniform(rng, (d_out, degree), 1) for i in range(len(sequences))},
    )


def multimodal_config(block: MultimodalBlock, seed: int | None = None) -> dict:
    cfg = {
        "degree": block.degree,
        "target": [block.n_out, block.d_out],
        "modes": {m: [s.n_in, s.d_in] for m, s in block.modes.items()},
        "sequences": ["".join(s.labels) for s in block.sequences],
    }
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def multimodal_from_config(cfg: dict) -> MultimodalBlock:
    return build_multimodal(
        mode_shapes={m: (int(n), int(d)) for m, (n, d) in cfg["modes"].items()},
        n_out=int(cfg["target"][0]), d_out=int(cfg["target"][1]),
        degree=int(cfg["degree"]), sequences=list(cfg["sequences"]),
        seed=int(cfg.get("seed", 0)),
    )
