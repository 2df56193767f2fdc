"""Soft continuum rod control stack.

Library layout:

* :mod:`softrod.liegroup`   -- SO(3)/SE(3) primitives
* :mod:`softrod.rodmodel`   -- collocation-discretized rod dynamics
* :mod:`softrod.statics`    -- static solves and linearization
* :mod:`softrod.integrator` -- implicit stiff time integration
* :mod:`softrod.surrogate`  -- ansatz-network surrogate and its training
* :mod:`softrod.estimator`  -- unscented Kalman filter with compliance state
* :mod:`softrod.controller` -- evolutionary MPC and pressure actuator model
* :mod:`softrod.optimize`   -- particle swarm optimizer and identification
* :mod:`softrod.experiments`/:mod:`softrod.cli` -- experiment runner and CLI
"""

__version__ = "0.1.0"
