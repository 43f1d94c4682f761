"""Diagnostics and band-wise rescale calibration for rotary position
interpolation under post-training quantization."""

from .bands import BandPartition, band_freq_stats, band_of_pair, band_rows, partition_log_freq
from .diagnostics import (
    ActivationCache,
    DiagnosticsReport,
    aggregate_report,
    compute_report,
    interpolation_pressure,
    quantile,
    tir_activation,
    tir_weight,
)
from .evaluator import (
    BackendError,
    ExternalEvaluator,
    LogitDistortionEvaluator,
    ModelBundle,
    ObjectiveSpec,
    OutlierSpec,
    ProtocolError,
    logit_mse,
    synth_model,
)
from .io import (
    MalformedHeaderError,
    OverlappingOffsetsError,
    PlanFormatError,
    PlanVersionError,
    TensorFileError,
    TruncatedPayloadError,
    patch_checkpoint,
    read_bundle,
    read_plan,
    read_report,
    read_tensors,
    write_bundle,
    write_plan,
    write_report,
    write_tensors,
)
from .quant import QuantSpec, QuantizedTensor, dequantize, fake_quant, quantize_rtn
from .rope import (
    PairVector,
    RoPEConfig,
    ScalingScheme,
    pair_frequencies,
    phase_deviation,
    rotate_pair,
    rotate_vector,
    scaled_phase,
)
from .search import (
    NonFiniteObjective,
    ScalePlan,
    SearchConfig,
    SearchError,
    SearchStageError,
    apply_scale_plan,
    band_window,
    build_grid,
    coordinate_search,
    default_lengths,
    gamma_bound,
    joint_search,
    run_qroar,
)

__version__ = "0.1.0"

__all__ = [
    "ActivationCache",
    "BackendError",
    "BandPartition",
    "DiagnosticsReport",
    "ExternalEvaluator",
    "LogitDistortionEvaluator",
    "MalformedHeaderError",
    "ModelBundle",
    "NonFiniteObjective",
    "ObjectiveSpec",
    "OutlierSpec",
    "OverlappingOffsetsError",
    "PairVector",
    "PlanFormatError",
    "PlanVersionError",
    "ProtocolError",
    "QuantSpec",
    "QuantizedTensor",
    "RoPEConfig",
    "ScalePlan",
    "ScalingScheme",
    "SearchConfig",
    "SearchError",
    "SearchStageError",
    "TensorFileError",
    "TruncatedPayloadError",
    "aggregate_report",
    "apply_scale_plan",
    "band_freq_stats",
    "band_of_pair",
    "band_rows",
    "band_window",
    "build_grid",
    "compute_report",
    "coordinate_search",
    "default_lengths",
    "dequantize",
    "fake_quant",
    "gamma_bound",
    "interpolation_pressure",
    "joint_search",
    "logit_mse",
    "pair_frequencies",
    "partition_log_freq",
    "patch_checkpoint",
    "phase_deviation",
    "quantile",
    "quantize_rtn",
    "read_bundle",
    "read_plan",
    "read_report",
    "read_tensors",
    "rotate_pair",
    "rotate_vector",
    "run_qroar",
    "scaled_phase",
    "synth_model",
    "tir_activation",
    "tir_weight",
    "write_bundle",
    "write_plan",
    "write_report",
    "write_tensors",
]
