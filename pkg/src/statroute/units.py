"""dB/linear conversions shared by every module.

All power-like quantities are carried in dB (dBW for powers) and converted
here only, so the ``kappa = ln(10)/10`` factor lives in exactly one place.
"""
import numpy as np

KAPPA = 0.1 * np.log(10.0)


def db_to_lin(x_db):
    return np.exp(KAPPA * np.asarray(x_db, dtype=float))


def lin_to_db(x):
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise ValueError("linear quantity must be positive to convert to dB")
    return np.log(x) / KAPPA


def ln_to_db(x_ln):
    """Natural-log value -> dB (10*log10)."""
    return np.asarray(x_ln, dtype=float) / KAPPA


def db_to_ln(x_db):
    return KAPPA * np.asarray(x_db, dtype=float)
