"""Simulation and estimation toolkit for entangled-pair scattering halo magnetometry.

The package is organised as a chain of stages:

* :mod:`halotomo.model` -- constants, field model and closed-form physics.
* :mod:`halotomo.simulate` -- Monte Carlo halo shots, interrogation and detection.
* :mod:`halotomo.reconstruct` -- time-of-flight inversion and halo normalisation.
* :mod:`halotomo.correlate` -- angular binning, g2 correlators, parity, bootstrap.
* :mod:`halotomo.estimate` -- Ramsey / parity fits and 3D field maps.
* :mod:`halotomo.cli` -- configuration, orchestration and file formats.
"""

__version__ = "0.1.0"
