"""Multiple small and large solutions of oscillating nonsmooth elliptic inclusions.

Numerical toolkit for -Δu ∈ ∂F(u) + λ∂G(u) on bounded domains with zero
Dirichlet data, where F oscillates near zero or near infinity.
"""

from .function_model import *  # noqa: F401,F403
from .discretization import *  # noqa: F401,F403
from .energy_minimizer import *  # noqa: F401,F403
from .oscillation_analysis import *  # noqa: F401,F403
from .cascade import *  # noqa: F401,F403

from . import function_model, discretization, energy_minimizer, oscillation_analysis, cascade

__version__ = "0.1.0"

__all__ = (function_model.__all__ + discretization.__all__ + energy_minimizer.__all__
           + oscillation_analysis.__all__ + cascade.__all__)
