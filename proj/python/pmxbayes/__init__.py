"""Bayesian inference for PK/PD compartment models.

The heavy lifting happens in the compiled ``_core`` extension: closed-form
one- and two-compartment event-schedule solvers, a coupled PK/PD neutropenia
model, a NUTS sampler with dual-averaging step-size and diagonal mass-matrix
adaptation, and rank-normalized R-hat / ESS / PSIS-LOO diagnostics.

Datasets are NONMEM-style event schedules passed either as a CSV path or as a
dict of columns (ID, TIME, AMT, RATE, II, EVID, CMT, ADDL, SS, DV, plus
covariates such as WT)::

    import pmxbayes as pmx

    data = "sim.csv"                       # or a dict of columns
    fit = pmx.fit("twocpt", data, chains=4, seed=1)
    rows = pmx.summarize(fit["draws"], fit["params"])
"""

from ._core import (
    IoError,
    NumericalError,
    ValidationError,
    builtin_models,
    ess_bulk,
    ess_tail,
    fit,
    psis_loo,
    rhat,
    simulate,
    solve_fk,
    solve_onecpt,
    solve_twocpt,
    summarize,
)

__all__ = [
    "IoError",
    "NumericalError",
    "ValidationError",
    "builtin_models",
    "ess_bulk",
    "ess_tail",
    "fit",
    "psis_loo",
    "rhat",
    "simulate",
    "solve_fk",
    "solve_onecpt",
    "solve_twocpt",
    "summarize",
]

__version__ = "0.1.0"
