"""Self-contained verification of the loss implementations.

Each property compares the production path against an independent oracle:
the kernel/trace form for linear HSIC, central finite differences for
gradients, and direct recomputation for the closed-form cases. Used by the
``losses-check`` CLI command and the test suite.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from . import losses as L


def kernel_hsic_oracle(x: np.ndarray, y: np.ndarray) -> float:
    """trace(H K H L) / (n-1)^2 with linear kernels and explicit centering."""
    n = x.shape[0]
    k = x @ x.T
    l = y @ y.T
    h = np.eye(n) - np.ones((n, n)) / n
    return float(np.trace(h @ k @ h @ l) / (n - 1) ** 2)


def check_hsic_oracle(trials: int = 100, seed: int = 0) -> bool:
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        n = int(rng.integers(2, 17))
        d = int(rng.integers(1, 9))
        x = rng.normal(size=(n, d))
        y = rng.normal(size=(n, d))
        ours = float(L.hsic_loss(torch.from_numpy(x), torch.from_numpy(y)))
        oracle = kernel_hsic_oracle(x, y)
        denom = max(abs(oracle), 1e-12)
        if abs(ours - oracle) / denom >= 1e-8:
            return False
    return True


def _finite_difference_grad(fn, x: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        up = fn(x).item()
        flat[i] = orig - h
        down = fn(x).item()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def _grad_matches(fn, x: torch.Tensor, rtol: float = 1e-4) -> bool:
    xg = x.clone().requires_grad_(True)
    fn(xg).backward()
    analytic = xg.grad
    numeric = _finite_difference_grad(fn, x.clone())
    denom = max(float(numeric.norm()), 1e-8)
    return float((analytic - numeric).norm()) / denom < rtol


def check_gradients(trials: int = 20, seed: int = 0) -> bool:
    rng = np.random.default_rng(seed)
    weights = L.LossWeights()
    for _ in range(trials):
        n = int(rng.integers(2, 9))
        d = int(rng.integers(2, 17))
        k = int(rng.integers(1, 5))
        pred = torch.from_numpy(rng.normal(size=(n, d)))
        target = torch.from_numpy(rng.normal(size=(n, d)))
        q = torch.from_numpy(rng.normal(size=(n, d)))
        pos = torch.from_numpy(rng.normal(size=(n, d)))
        neg = torch.from_numpy(rng.normal(size=(n, k, d)))
        x = torch.from_numpy(rng.normal(size=(n, d)))
        y = torch.from_numpy(rng.normal(size=(n, d)))
        logits = torch.from_numpy(rng.normal(size=n))
        labels = torch.from_numpy(rng.integers(0, 2, size=n).astype(np.float64))

        checks = [
            (lambda p: L.reconstruction_loss(p, target), pred),
            (lambda qq: L.alignment_loss(qq, pos, neg, tau=0.5), q),
            (lambda xx: L.hsic_loss(xx, y), x),
            (lambda z: L.modality_bce_loss(z, labels), logits),
            (
                lambda p: L.total_loss(
                    L.reconstruction_loss(p, target),
                    L.alignment_loss(q, pos, neg, tau=0.5),
                    L.hsic_loss(x, y),
                    L.modality_bce_loss(logits, labels),
                    weights,
                ),
                pred,
            ),
        ]
        if not all(_grad_matches(fn, arg) for fn, arg in checks):
            return False
    return True


def check_alignment_values() -> bool:
    d = 4
    q = torch.eye(1, d, dtype=torch.float64)
    p = torch.zeros(1, d, dtype=torch.float64)
    p[0, 1] = 1.0  # orthogonal to q -> similarity 0
    n1 = torch.zeros(1, 1, d, dtype=torch.float64)
    n1[0, 0, 2] = 1.0
    one_neg = float(L.alignment_loss(q, p, n1, tau=1.0))
    n3 = torch.zeros(1, 3, d, dtype=torch.float64)
    n3[0, 0, 2] = n3[0, 1, 3] = 1.0
    n3[0, 2, 2] = -1.0
    three_neg = float(L.alignment_loss(q, p, n3, tau=1.0))
    return (
        math.isclose(one_neg, math.log(2), rel_tol=1e-12)
        and math.isclose(three_neg, math.log(4), rel_tol=1e-12)
    )


def check_bce_values() -> bool:
    zeros = float(
        L.modality_bce_loss(
            torch.zeros(5, dtype=torch.float64),
            torch.tensor([0, 1, 0, 1, 1], dtype=torch.float64),
        )
    )
    single = float(
        L.modality_bce_loss(
            torch.tensor([math.log(3)], dtype=torch.float64),
            torch.ones(1, dtype=torch.float64),
        )
    )
    return math.isclose(zeros, math.log(2), rel_tol=1e-12) and math.isclose(
        single, -math.log(0.75), rel_tol=1e-12
    )


def check_total_linearity(seed: int = 0) -> bool:
    rng = np.random.default_rng(seed)
    w = L.LossWeights(*rng.uniform(0, 2, size=4))
    comps = [torch.tensor(v) for v in rng.normal(size=4) ** 2]
    total = float(L.total_loss(*comps, w))
    manual = (
        w.lambda_rec * float(comps[0])
        + w.lambda_align * float(comps[1])
        + w.lambda_hsic * float(comps[2])
        + w.lambda_cls * float(comps[3])
    )
    return math.isclose(total, manual, rel_tol=1e-12)


CHECKS = [
    ("hsic_kernel_oracle", check_hsic_oracle),
    ("finite_difference_gradients", check_gradients),
    ("alignment_closed_form", check_alignment_values),
    ("bce_closed_form", check_bce_values),
    ("total_loss_linearity", check_total_linearity),
]


def run_all(verbose: bool = False) -> bool:
    ok = True
    for name, fn in CHECKS:
        passed = fn()
        ok = ok and passed
        if verbose:
            print(f"{'PASS' if passed else 'FAIL'} {name}")
    return ok
