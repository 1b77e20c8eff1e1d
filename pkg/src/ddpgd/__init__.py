"""Overlapping Schwarz domain decomposition with PGD local surrogate models.

Offline, every subdomain gets a separated (PGD) surrogate of its local
parametric problem, one per interface trace basis function plus one for the
source. Online, the interface system is solved by matrix-free GMRES where each
operator application is just a linear combination of cached surrogate
evaluations.
"""
from .linalg import GmresConfig, SparseMatrix, gmres, spd_solve
from .mesh import StructuredMesh, assemble_load, assemble_mass, assemble_stiffness
from .offline import Subdomain, SurrogateModel, build_surrogate, load_model, save_model
from .online import SchwarzProblem, reconstruct_global, solve_interface
from .pgd import PgdConfig, SeparatedProblem, SeparatedTerm, pgd_solve
from .reference import alternating_schwarz, full_order_solve, rel_l2_error, rel_linf_error
from .separated import ParamAxis, ParamGrid, SeparatedTensor, compress

__version__ = "0.1.0"
