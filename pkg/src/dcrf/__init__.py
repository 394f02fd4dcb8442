"""Fully connected binary CRFs over metadata similarity graphs.

Mean-field inference unrolled for a fixed number of steps, trained end to end
with a class-balanced cross-entropy + ranking loss, and checked against exact
enumeration on small graphs.
"""

__version__ = "0.1.0"

from dcrf.core import (ConfigurationError, CrfParams, assignment_score, assignment_scores,
                       unary_potentials)
from dcrf.kernels import (KernelMatrix, KernelSet, build_kernel_set, gaussian_text_kernel,
                          jaccard_distance, jaccard_kernel, sparsify_topk)
from dcrf.meanfield import (MeanFieldConfig, MeanFieldTrace, combine_and_transform,
                            init_marginals, message_pass, mf_step, run_inference,
                            variational_free_energy)
from dcrf.oracle import ExactResult, exact_inference, kl_q_from_p

__all__ = [
    "ConfigurationError", "CrfParams", "assignment_score", "assignment_scores",
    "unary_potentials", "KernelMatrix", "KernelSet", "build_kernel_set",
    "gaussian_text_kernel", "jaccard_distance", "jaccard_kernel", "sparsify_topk",
    "MeanFieldConfig", "MeanFieldTrace", "combine_and_transform", "init_marginals",
    "message_pass", "mf_step", "run_inference", "variational_free_energy",
    "ExactResult", "exact_inference", "kl_q_from_p",
]
