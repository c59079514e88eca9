"""Polynomial drop-in token mixing: blocks, oracles, adapters, benchmarks."""

from .tensor import (
    FlopLedger,
    LayoutError,
    Mixer,
    MixerKind,
    NumericError,
    PadMode,
    ShapeError,
    Side,
    apply_mixer,
    apply_mixer_transpose,
    hadamard,
    mixer_as_dense,
)
from .block import (
    Grid,
    PadreBlock,
    PadreTrace,
    Seq1d,
    WMode,
    build_conv_instance,
    forward,
    load_block,
    param_count,
    random_block,
    rms_normalize_rows,
    save_block,
)
from .grad import GradBundle, GradReport, backward, gradcheck
from .oracle import (
    MultiIndex,
    NotPolynomialError,
    PolyCoeffs,
    assert_homogeneous,
    extract_coeffs,
    max_effective_degree,
)
from .rational import RationalPadreBlock, rational_forward, rational_gradcheck
from .multimodal import MultimodalBlock, build_multimodal, multimodal_forward
from .bench import BenchRecord, ScalingFit, emit_csv, fit_scaling, run_bench

__version__ = "0.1.0"
