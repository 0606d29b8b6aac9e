"""Biventricular cardiac electromechanics with a 0D closed-loop circulation.

Library layout:

- :mod:`cardioem.mesh`        hexahedral geometries, refinement, intergrid transfer
- :mod:`cardioem.fem`         Q1 finite-element kernels and linear solvers
- :mod:`cardioem.fibers`      rule-based myocardial fiber generation
- :mod:`cardioem.ep`          monodomain electrophysiology
- :mod:`cardioem.activation`  active-force state dynamics
- :mod:`cardioem.mechanics`   hyperelastic mechanics and boundary conditions
- :mod:`cardioem.circulation` lumped-parameter closed-loop circulation
- :mod:`cardioem.coupling`    3D-0D volume-constrained coupling and time stepping
- :mod:`cardioem.preflow`     simulation initialization pipeline
- :mod:`cardioem.postio`      biomarkers, file output, configuration
"""

__version__ = "0.1.0"
