"""Python bindings for the wuglab experiment core."""

from ._core import (
    CONFIG_SCHEMA,
    BpeModel,
    Corpus,
    binomial_test,
    conditions,
    emit_reports,
    fit_bpe,
    generate_corpus,
    gradient_check,
    hbm_posterior,
    jonckheere_terpstra,
    kl_divergence,
    log_marginal_likelihood,
    manipulation_check,
    mann_whitney_u,
    run_matrix,
    tost_equivalence,
)

__all__ = [
    "CONFIG_SCHEMA",
    "BpeModel",
    "Corpus",
    "binomial_test",
    "conditions",
    "emit_reports",
    "fit_bpe",
    "generate_corpus",
    "gradient_check",
    "hbm_posterior",
    "jonckheere_terpstra",
    "kl_divergence",
    "log_marginal_likelihood",
    "manipulation_check",
    "mann_whitney_u",
    "run_matrix",
    "tost_equivalence",
]
