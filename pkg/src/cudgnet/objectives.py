"""Loss functions: adversarial generator objective, MC task objective, KL, InfoNCE."""
from __future__ import annotations

import torch
import torch.nn.functional as F

NCE_VARIANTS = ("all_but_self", "exclude_positive")


def soft_cross_entropy(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of ``-sum(target * log_softmax(logits))``; ``target`` may be soft."""
    if target.dim() == 1:
        target = F.one_hot(target.long(), logits.shape[-1]).to(logits.dtype)
    return -(target * F.log_softmax(logits, dim=-1)).sum(dim=-1).mean()


def embedding_divergence(z: torch.Tensor, z_plus: torch.Tensor) -> torch.Tensor:
    """Batch mean of the squared L2 distance between paired embeddings."""
    return (z - z_plus).pow(2).sum(dim=-1).mean()


def generator_adv_loss(logits_plus, y_plus, z, z_plus, beta: float) -> torch.Tensor:
    """Negated adversarial objective, ``-(CE(S+) - beta * ||z - z+||^2)``.

    Minimising this maximises the task loss on the generated domain while the
    embedding-distance term keeps it semantically close to the source. Only the
    generator's parameters should be stepped on it.
    """
    if beta < 0:
        raise ValueError("beta must be non-negative")
    return -(soft_cross_entropy(logits_plus, y_plus) - beta * embedding_divergence(z, z_plus))


def kl_diag_gaussian(mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """Elementwise mean of KL(N(mu, sigma^2) || N(0, 1))."""
    if (sigma <= 0).any():
        raise ValueError("sigma must be strictly positive")
    return 0.5 * (mu.pow(2) + sigma.pow(2) - 1.0 - 2.0 * torch.log(sigma)).mean()


def info_nce(z: torch.Tensor, z_plus: torch.Tensor, temperature: float = 0.1, *,
             normalize: bool = True, variant: str = "all_but_self") -> torch.Tensor:
    """Contrastive loss over the ``2N`` views of a batch.

    Each view's positive is its counterpart in the other view. With
    ``variant="all_but_self"`` the denominator runs over every other view
    (positive included); ``"exclude_positive"`` drops the positive from it.
    """
    if z.shape != z_plus.shape:
        raise ValueError("z and z_plus must have the same shape")
    n = z.shape[0]
    if n < 2:
        raise ValueError("info_nce needs a batch of at least 2 (no negatives otherwise)")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if variant not in NCE_VARIANTS:
        raise ValueError(f"variant must be one of {NCE_VARIANTS}")
    views = torch.cat([z, z_plus], dim=0)
    if normalize:
        views = F.normalize(views, dim=1)
    sim = views @ views.t() / temperature
    idx = torch.arange(2 * n, device=z.device)
    pos = (idx + n) % (2 * n)
    mask = torch.eye(2 * n, dtype=torch.bool, device=z.device)
    if variant == "exclude_positive":
        mask[idx, pos] = True
    denom = torch.logsumexp(sim.masked_fill(mask, float("-inf")), dim=1)
    return (denom - sim[idx, pos]).mean()


def mc_task_loss(model, x, y, K: int = 2, *, kl_weight: float = 1.0, **forward_kwargs):
    """Monte-Carlo estimate of the fictitious-domain objective.

    Averages the soft cross-entropy of ``K`` perturbed forward passes (each
    redraws the Gaussian noise, the mixing weights and the mixup coefficient)
    and adds the KL of the predicted perturbation against N(0, I). ``model``
    is any callable returning an object with ``logits``, ``y_plus`` and
    ``params`` in perturbed mode.

    Returns ``(loss, parts)`` where ``parts`` holds ``ce``, ``kl`` and the
    ``outputs`` of every draw.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    outputs = [model(x, mode="perturbed", y=y, **forward_kwargs) for _ in range(K)]
    ce = sum(soft_cross_entropy(o.logits, o.y_plus) for o in outputs) / K
    params = outputs[0].params
    kl = kl_diag_gaussian(params.mu, params.sigma)
    return ce + kl_weight * kl, {"ce": ce, "kl": kl, "outputs": outputs}


def total_loss(task_loss, nce_loss, w1: float):
    if w1 < 0:
        raise ValueError("w1 must be non-negative")
    return task_loss + w1 * nce_loss
