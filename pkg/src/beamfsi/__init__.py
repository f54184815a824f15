"""Desk-scale simulator for an elastic beam between two incompressible fluids.

A compression-penalized elastic beam spans a rectangular box and separates two
viscous incompressible fluids.  Time stepping is by minimizing movements with
a time-delayed inertial term; every step solves a convex minimization over
divergence-free velocity fields coupled to the beam through its trace.  The
package also ships the supporting operators (a staggered-grid divergence
solver on subgraph domains, a solenoidal extension of interface fields) and a
pressure-difference reconstruction, each with numerically checked invariants.
"""

__version__ = "0.1.0"
