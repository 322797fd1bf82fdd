"""Downlink max-min power control for cell-free massive MIMO.

Submodules: ``scenario`` (data generation), ``se`` (closed-form SE and the
feasible set), ``autodiff`` (reverse-mode tape), ``nn`` (PAPC transformer and
FCN baseline), ``optim`` (ADAM and APG), ``trainer`` and ``cli``.
"""
from .errors import ConfigError, DataError, NumericError, PapcError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "NumericError", "PapcError", "__version__"]
