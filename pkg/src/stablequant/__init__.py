"""Post-training quantization calibration toolkit with layer-adaptive clipping."""

from .calibrators import (
    CalibMethod,
    CalibResult,
    CalibrationError,
    calibrate,
    calibrate_clipped_mse,
    calibrate_entropy,
    calibrate_max,
    calibrate_mse,
    calibrate_percentile,
    scale_calibration,
)
from .dataio import (
    ActivationDump,
    CacheEntry,
    CalibrationCache,
    FormatError,
    read_cache,
    read_dump,
    read_report,
    write_cache,
    write_dump,
    write_report,
)
from .histogram import ActivationHistogram, HistogramCollector, HistogramError, clip_histogram, histogram_of
from .metrics import decode_greedy, token_error_rate
from .quant import QTensor, QuantizationError, QuantParams, fake_quantize, quantize, quantize_weights
from .refnet import DevSet, RefNet, RefNetSpec, TokenErrorEvaluator, build_refnet, evaluate
from .search import SearchConfig, SearchError, SearchReport, run_stablequant, select_layers

__version__ = "0.1.0"
