"""Finite-orbit analytics for nonuniformly hyperbolic systems: splittings,
hyperbolic times, block sets and certified local unstable manifolds."""

__version__ = "0.1.0"
