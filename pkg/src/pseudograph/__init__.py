"""Enlarged pseudographs of semi-concave functions on flat tori, their images
under Tonelli flows, and the Lax-Oleinik semigroups that produce them."""
from __future__ import annotations

from .cloud import FIBER, GRAPH, PhasePointCloud
from .errors import *  # noqa: F401,F403
from .flow import FlowConfig, PhaseLoop, flow_cloud, flow_point, loop_action, tangent_flow
from .hamiltonian import CompactTube, TonelliHamiltonian, hessian_bounds, make_hamiltonian
from .laxoleinik import SectionSamples, derivative_of, minimal_action, negative_semigroup, positive_semigroup
from .semiconcave import MinBranchFunction, enlarged_pseudograph_sample, make_function, superdifferential

__version__ = "0.1.0"
