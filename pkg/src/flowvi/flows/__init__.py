from flowvi.flows.autoregressive import IAF, MADE, MAF, made_masks
from flowvi.flows.base import INVERTIBLE_KINDS, KINDS, FlowLayer
from flowvi.flows.coupling import AffineCoupling, RLSplineCoupling, RQSplineCoupling
from flowvi.flows.oracle import SingularJacobianError, fd_jacobian, numeric_logdet_oracle
from flowvi.flows.residual import PlanarFlow, RadialFlow, SylvesterFlow, householder_q
from flowvi.flows.stack import (
    FlowStack,
    build_layer,
    build_stack,
    constrain_params,
    flow_forward,
    flow_inverse,
    perturb_parameters,
    stack_forward,
    stack_inverse,
)
