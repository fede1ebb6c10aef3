"""NV-13C Landau-Zener polarization transfer, ODNMR signal processing and
sensitivity budgets."""

__version__ = "0.1.0"
