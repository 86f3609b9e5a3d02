from .fid import (  # noqa: F401
    ExtractorUnavailable, FIDError, GaussianStats, StatsAccumulator, available_extractors,
    fid_protocol, frechet_distance, get_extractor, stats_from_features,
)
from .normality import NormalityResult, k2_test, normality_suite  # noqa: F401
from .quality import (  # noqa: F401
    Histogram, local_noise_rms_density, patch_rmse_density, psnr, psnr_per_image,
)
from .report import MetricReport  # noqa: F401
from .tradeoff import (  # noqa: F401
    SIGMA_Z_GRID, TradeoffCurve, TradeoffPoint, tradeoff_sweep,
)
