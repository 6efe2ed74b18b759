"""Polynomial feedback laws for the controlled Fokker-Planck equation.

Pipeline: finite-difference bilinear model (``fp_model``), restriction to the
mass-zero subspace (``projection``), bilinear balanced truncation
(``reduction``), Riccati equation (``riccati``), higher-order value-function
tensors (``tensors``), closed-loop simulation (``control``), an open-loop
benchmark (``openloop``) and experiment orchestration (``harness``).
"""
__version__ = "0.1.0"
