import math

import torch

from dagen.base.errors import DagenError


def relative_error(analytic, numeric, floor=1e-2):
    """|a - n| / max(|a|, |n|, floor); below the floor the error is absolute, so
    gradients smaller than the floor pass on an absolute difference"""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def max_gradient_error(functional, tensors, epsilon=1e-4, floor=1e-2, error=DagenError):
    """compare autograd gradients of a scalar functional with central differences.

    :param functional: callable without arguments returning a scalar tensor
    :param tensors: leaf tensors (inputs and parameters) requiring grad, 64 bit
    :return: the maximum relative error over all elements
    """
    value = functional()
    if not bool(torch.isfinite(value)):
        raise error("gradient check on a non-finite value")
    analytic = torch.autograd.grad(value, tensors, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for tensor, grad in zip(tensors, analytic):
            if grad is None:
                grad = torch.zeros_like(tensor)
            flat = tensor.view(-1)
            flat_grad = grad.reshape(-1)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + epsilon
                plus = functional().item()
                flat[i] = original - epsilon
                minus = functional().item()
                flat[i] = original
                numeric = (plus - minus) / (2 * epsilon)
                if not (math.isfinite(plus) and math.isfinite(minus)):
                    raise error("gradient check hit a non-finite value")
                worst = max(worst, relative_error(flat_grad[i].item(), numeric, floor))
    return worst
