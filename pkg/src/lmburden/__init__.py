"""Locational marginal burden: how energy burden responds to demand through
the LMPs of a parameterized DC optimal power flow."""

__version__ = "0.1.0"

from .burden import BurdenVector, LmbResult, compute_lmb, lmb_fd_check, lmb_matrix, static_burden
from .caseio import IncomeTable, Report, parse_case, parse_income, write_case, write_report
from .grid import Bus, Generator, Line, Network, generator_incidence, normalize, ptdf
from .pricing import RetailConfig, lmps, retail_model0, retail_model1, retail_model2
from .qp import OpfSolution, QpForm, SolverOptions, Theta, assemble, kkt_residual, solve
from .sensitivity import check_regularity, fd_oracle, kkt_jacobian, solution_jacobian

__all__ = [
    "Bus", "Line", "Generator", "Network", "ptdf", "generator_incidence", "normalize",
    "parse_case", "write_case", "parse_income", "IncomeTable", "Report", "write_report",
    "Theta", "QpForm", "OpfSolution", "SolverOptions", "assemble", "solve", "kkt_residual",
    "kkt_jacobian", "check_regularity", "solution_jacobian", "fd_oracle",
    "lmps", "RetailConfig", "retail_model0", "retail_model1", "retail_model2",
    "static_burden", "lmb_matrix", "compute_lmb", "lmb_fd_check", "BurdenVector", "LmbResult",
]
