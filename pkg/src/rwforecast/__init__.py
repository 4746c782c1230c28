"""Density forecasts of an index futures price from option cross-sections.

Risk-neutral densities from four characteristic-function models and a
spline-based nonparametric estimator are tilted by a risk-preference kernel,
corrected for investor sentiment measured from volatility, volume and skew
proxies, and scored out of sample.
"""
from .calibration import CalibrationConfig, calibrate
from .char_models import Bates, Heston, Lognormal, VarianceGamma, density_from_model, price_european_call
from .density import DensityGrid, GridSpec, crra_adjust
from .errors import ConfigError, DataError, ForecastError, NumericalError, StudyAbort
from .evaluation import ForecastRecord, ifs, log_score, recalibrate, summarize
from .sentiment import SentimentState, real_world_density

__all__ = [
    "Bates", "CalibrationConfig", "ConfigError", "DataError", "DensityGrid", "ForecastError", "ForecastRecord",
    "GridSpec", "Heston", "Lognormal", "NumericalError", "SentimentState", "StudyAbort", "VarianceGamma",
    "calibrate", "crra_adjust", "density_from_model", "ifs", "log_score", "price_european_call",
    "real_world_density", "recalibrate", "summarize",
]

__version__ = "0.1.0"
