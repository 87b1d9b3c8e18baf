"""hydrocal: tidal-channel study pipeline.

Stepwise-controllable 1D shallow-water solver, design-of-experiment
sampling, PCA + sparse polynomial-chaos surrogates, generalized Sobol
sensitivity indices and 3D-VAR calibration, wired together by a CLI.
"""

__version__ = "0.1.0"
