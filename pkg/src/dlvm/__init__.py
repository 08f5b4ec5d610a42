"""Exact-likelihood tools for deep latent variable models.

Modules:

* :mod:`dlvm.autodiff` -- reverse-mode differentiation on numpy arrays
* :mod:`dlvm.distributions` -- densities, samplers and stable log-sum-exp
* :mod:`dlvm.model` -- decoder/encoder parametrisations and the linear-Gaussian oracle
* :mod:`dlvm.training` -- ELBO, importance-weighted bounds and Adam training
* :mod:`dlvm.blowup` -- unbounded-likelihood witnesses and the variance-floor bound
* :mod:`dlvm.mixture` -- finite-mixture EM and the likelihood upper bound
* :mod:`dlvm.imputation` -- pseudo-Gibbs and Metropolis-within-Gibbs imputation
* :mod:`dlvm.stats` -- Wilcoxon signed-rank test and result tables
* :mod:`dlvm.data` -- IDX/CSV loading and synthetic generators
* :mod:`dlvm.cli` -- the ``dlvm`` command
"""

__version__ = "0.1.0"
