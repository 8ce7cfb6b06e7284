"""1D state space machinery: ZOH discretization, LTI oracles, selective scan."""

from .lti import discretize_zoh, lti_conv_kernel, lti_scan, lti_scan_via_kernel, zoh_factor
from .s6 import SsmParams, s6_forward, selective_scan, stack_params, stacked_s6

__all__ = [
    "SsmParams",
    "discretize_zoh",
    "lti_conv_kernel",
    "lti_scan",
    "lti_scan_via_kernel",
    "s6_forward",
    "selective_scan",
    "stack_params",
    "stacked_s6",
    "zoh_factor",
]
