"""Problem instances implementing the biased-oracle contract."""

from ..errors import ConfigError
from .cso import CsoInstance, cso_toy, cso_linear, cso_nonconvex
from .sinkhorn import SinkhornInstance, load_regression_csv, synthetic_regression
from .queueing import QueueInstance, ServiceLaw, queue_f2, lindley_step
from .ubsr import UbsrInstance, ubsr_toy

__all__ = [
    "CsoInstance",
    "cso_toy",
    "cso_linear",
    "cso_nonconvex",
    "SinkhornInstance",
    "load_regression_csv",
    "synthetic_regression",
    "QueueInstance",
    "ServiceLaw",
    "queue_f2",
    "lindley_step",
    "UbsrInstance",
    "ubsr_toy",
    "make_instance",
]


def make_instance(kind: str, **params):
    """Instance factory used by the CLI config surface."""
    kind = kind.lower()
    if kind in ("cso_toy", "cso-toy"):
        return cso_toy(**params)
    if kind in ("cso_linear", "cso-linear"):
        return cso_linear(**params)
    if kind in ("cso_nonconvex", "cso-nonconvex"):
        return cso_nonconvex(**params)
    if kind in ("sinkhorn", "sinkhorn_dro", "sinkhorn-dro"):
        return SinkhornInstance.from_params(**params)
    if kind in ("queue", "queue_f2", "queue-f2"):
        return queue_f2(**params)
    if kind in ("ubsr", "ubsr_toy", "ubsr-toy"):
        return ubsr_toy(**params)
    raise ConfigError(f"unknown instance kind {kind!r}")
