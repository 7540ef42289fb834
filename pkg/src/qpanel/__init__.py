"""Two-step minimum distance quantile regression for grouped and panel data."""

__version__ = "0.1.0"

from .estimator import QuantileMDRegressor, estimate
from .exceptions import ConfigError, DataError, IdentificationError, NumericalError, QPanelError
from .instruments import InstrumentSpec
from .md import MdEstimate, MdResults, clp_fit, ls_one_step, md_fit
from .panel import GroupedPanel, QuantileGrid, filter_min_dof, group_means, load_csv, within_demean
from .qr import FirstStageFit, QrFit, fit_first_stage, fit_ols_first_stage, fit_qr

__all__ = [
    "__version__",
    "QuantileMDRegressor",
    "estimate",
    "ConfigError",
    "DataError",
    "IdentificationError",
    "NumericalError",
    "QPanelError",
    "InstrumentSpec",
    "MdEstimate",
    "MdResults",
    "clp_fit",
    "ls_one_step",
    "md_fit",
    "GroupedPanel",
    "QuantileGrid",
    "filter_min_dof",
    "group_means",
    "load_csv",
    "within_demean",
    "FirstStageFit",
    "QrFit",
    "fit_first_stage",
    "fit_ols_first_stage",
    "fit_qr",
]
