"""Covert optimization: keeping a learner's minimizer hidden from a query eavesdropper."""

from .oracle import OracleChain, reference_chain, respond, validate_fosd
from .finite_mdp import FiniteMdpSpec, reference_finite_spec, solve_backward_dp
from .cmdp import CmdpSpec, reference_cmdp, solve_cmdp, lp_occupation_oracle, simulate_cmdp
from .spga import SpgaConfig, run_spga, extract_thresholds
from .covert_sgd import required_updates, run_protocol, eavesdropper_estimate
from .fedsim import FedConfig, EavesdropperConfig, run_experiment

__version__ = "0.1.0"
