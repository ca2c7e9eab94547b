"""pderom: latent-space surrogates for time-dependent PDEs.

The package trains a mesh-free decoder and a latent dynamics network
against built-in differentiable finite-difference solvers, then
forecasts new initial conditions by inverting the decoder and
integrating the latent ODE.
"""

from . import diffmath

__version__ = "0.1.0"

__all__ = ["diffmath", "__version__"]
