"""Sign-gradient adversarial attacks under an L-infinity budget.

Budgets are expressed in the [-1, 1] pixel scale. Every output satisfies
``max|x_adv - x| <= epsilon`` exactly, evaluated in float64.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ._validation import check_images, check_labels, to_nchw, to_nhwc


@dataclass(frozen=True)
class AttackSpec:
    epsilon: float = 0.1
    steps: int = 7
    step_size: float | None = None
    targeted: bool = False

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.targeted:
            raise NotImplementedError("targeted attacks are not supported")

    @property
    def alpha(self):
        return self.step_size if self.step_size is not None else 2.5 * self.epsilon / self.steps


def _as_module(model):
    module = getattr(model, "module_", model)
    if not isinstance(module, torch.nn.Module):
        raise TypeError("model must be a fitted LogitClassifier or a torch module")
    return module


def input_gradient(module, x, y):
    """Gradient of the mean cross-entropy with respect to the input batch."""
    x = x.detach().requires_grad_(True)
    loss = F.cross_entropy(module(x), y)
    (grad,) = torch.autograd.grad(loss, x)
    return grad


def project(x_adv, x, epsilon):
    """Clip to the epsilon-ball around ``x`` and to [-1, 1].

    The budget is checked on the exact (float64) difference, so rounding of
    ``x +- epsilon`` in a narrower type can overshoot by one ulp; such
    entries are nudged toward ``x`` until ``|x_adv - x| <= epsilon`` holds.
    """
    x_adv = torch.minimum(torch.maximum(x_adv, x - epsilon), x + epsilon).clamp(-1.0, 1.0)

    def over(a):
        return (a.double() - x.double()).abs() > epsilon

    mask = over(x_adv)
    while bool(mask.any()):
        x_adv = torch.where(mask, torch.nextafter(x_adv, x), x_adv)
        mask = over(x_adv)
    return x_adv


def fgsm_tensor(module, x, y, epsilon):
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    if epsilon == 0:
        return x.detach().clone()
    grad = input_gradient(module, x, y)
    return project(x.detach() + epsilon * grad.sign(), x.detach(), epsilon)


def pgd_tensor(module, x, y, spec):
    x = x.detach()
    x_adv = x.clone()
    if spec.epsilon == 0:
        return x_adv
    for _ in range(spec.steps):
        grad = input_gradient(module, x_adv, y)
        x_adv = project(x_adv + spec.alpha * grad.sign(), x, spec.epsilon)
    return x_adv


def _run(model, X, y, attack, batch_size=256):
    # Examples are attacked independently, so batching only bounds memory.
    module = _as_module(model)
    dtype = next(module.parameters()).dtype
    X = check_images(X, dtype=torch.empty((), dtype=dtype).numpy().dtype)
    y = check_labels(y, X.shape[0])
    was_training = module.training
    module.eval()
    try:
        out = [attack(module, to_nchw(X[s : s + batch_size], dtype), torch.from_numpy(y[s : s + batch_size]))
               for s in range(0, X.shape[0], batch_size)]
    finally:
        module.train(was_training)
    return to_nhwc(torch.cat(out)) if out else X.copy()


def fgsm(model, X, y, epsilon):
    """Untargeted fast gradient sign attack: ``clip(x + eps * sign(grad), -1, 1)``."""
    return _run(model, X, y, lambda m, x, t: fgsm_tensor(m, x, t, epsilon))


def pgd(model, X, y, spec):
    """Iterated sign-gradient steps, each projected to the epsilon-ball and [-1, 1]."""
    return _run(model, X, y, lambda m, x, t: pgd_tensor(m, x, t, spec))
