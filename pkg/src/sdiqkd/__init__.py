"""Key-rate certification for prepare-and-measure QKD whose only device
assumption is a bound on the overlaps of the prepared states."""

from .channel import ChannelModel, RoundLog, blinding_scenario, noisy_statistics, simulate
from .moments import LEVELS, build_problem
from .optimize import keyrate_at, optimize_mu, sweep, threshold_eta
from .protocol import GramConstraint, ProtocolSpec, StatTable, gram_matrix, ideal_statistics, sift
from .sdp import solve, verify_certificate
from .security import KeyRateReport, asymptotic_report, certify_counts, clopper_pearson

__all__ = [
    "ChannelModel", "GramConstraint", "KeyRateReport", "LEVELS", "ProtocolSpec", "RoundLog", "StatTable",
    "asymptotic_report", "blinding_scenario", "build_problem", "certify_counts", "clopper_pearson",
    "gram_matrix", "ideal_statistics", "keyrate_at", "noisy_statistics", "optimize_mu", "simulate",
    "sift", "solve", "sweep", "threshold_eta", "verify_certificate",
]  # fmt: skip
