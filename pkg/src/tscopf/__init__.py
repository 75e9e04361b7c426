"""Stability-constrained optimal dispatch for grid-type feedback systems.

Pipeline: load a case and fault scenario, solve power flows, reformulate
the post-fault swing dynamics into linear-plus-sector-nonlinearity form,
certify a quadratic Lyapunov function through the circle-criterion LMI,
and solve dispatch problems whose constraints keep the fault-cleared
state inside the certified invariant set.
"""

from .gridcase import (AdmittanceMatrix, Branch, Bus, CaseError, FaultSpec,
                       Generator, Limits, Load, PowerCase, build_admittance,
                       case_from_dict, load_case, load_scenario,
                       scenario_from_dict)
from .powerflow import (Injections, NonConvergence, SingularJacobian,
                        SteadyState, dispatch_injections, injection_p,
                        injection_q, line_flow_sq, nominal_injections,
                        pf_jacobian, pf_residual, solve_pf)
from .lure import (LureSystem, SectorBounds, build_lure, design_sectors,
                   phi_eval, phi_vec, polytope_bounds, rhs_lure)
from .certify import (CertificateMismatch, InvariantLevel,
                      QuadraticCertificate, check_wdot_negative,
                      grid_invariant_level, invariant_set_contains,
                      load_certificate, save_certificate, solve_lmi,
                      w_min_bruteforce, w_min_closed_form, w_value,
                      wdot_value)
from .sdp import LmiInfeasible
from .fault import (FaultClearedState, FaultScenario, disturbance_term,
                    fault_cleared_closed, fault_cleared_taylor, k_factor,
                    make_scenario)
from .simulate import (Trajectory, Verdict, assess_stability, rhs,
                       simulate_fault, simulate_nominal, w_along)
from .nlp import (ConstraintBlock, NlpOptions, NlpProblem, OptSolution,
                  check_derivatives, solve_nlp)

__version__ = "0.1.0"
