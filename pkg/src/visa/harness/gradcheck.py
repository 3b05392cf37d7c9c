"""Central finite differences against autograd for every differentiable operation.

Each target builds a tiny double-precision instance and returns a scalar
closure plus the tensors to differentiate. The checker perturbs every entry
of every tensor by +-h and compares with the analytic gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch

from visa.dlfm import GCN, LocalFusion, build_graph, gcn_refine, select_neighbors
from visa.encoder import EncoderConfig, ViewDecoupledEncoder
from visa.etgm import Expert, RoutingResult, load_balance_loss
from visa.losses import id_loss, ortho_loss, triplet_loss, view_loss

DEFAULT_TOLERANCE = 1e-4
STEP = 1e-6

Problem = Tuple[Callable[[], torch.Tensor], List[torch.Tensor]]


@dataclass
class GradcheckResult:
    target: str
    max_rel_error: float
    tolerance: float
    num_entries: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.target:<18} max rel err {self.max_rel_error:.3e} (tol {self.tolerance:g})"


def numeric_grad(fn: Callable[[], torch.Tensor], t: torch.Tensor, h: float = STEP) -> torch.Tensor:
    grad = torch.zeros_like(t)
    flat = t.data.view(-1)
    g = grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        up = fn().item()
        flat[i] = orig - h
        down = fn().item()
        flat[i] = orig
        g[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    scale = max(analytic.abs().max().item(), numeric.abs().max().item(), 1e-10)
    return (analytic - numeric).abs().max().item() / scale


def check(fn: Callable[[], torch.Tensor], tensors: Sequence[torch.Tensor]) -> Tuple[float, int]:
    for t in tensors:
        t.grad = None
    fn().backward()
    worst, count = 0.0, 0
    with torch.no_grad():
        for t in tensors:
            analytic = t.grad if t.grad is not None else torch.zeros_like(t)
            worst = max(worst, relative_error(analytic, numeric_grad(fn, t)))
            count += t.numel()
    return worst, count


def _gen(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed)


def _randn(*shape: int, seed: int, scale: float = 1.0) -> torch.Tensor:
    return (torch.randn(*shape, generator=_gen(seed), dtype=torch.float64) * scale).requires_grad_(True)


def _perturb_params(module: torch.nn.Module, seed: int, scale: float = 0.3) -> List[torch.Tensor]:
    """Move parameters off their small init so every path has non-trivial gradients."""
    g = _gen(seed)
    params = []
    with torch.no_grad():
        for p in module.parameters():
            p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
            params.append(p)
    return params


def encoder_problem() -> Problem:
    torch.manual_seed(0)
    cfg = EncoderConfig(dim=8, depth=1, heads=2, patch_size=4, img_size=(8, 4), in_chans=3)
    enc = ViewDecoupledEncoder(cfg).double()
    params = _perturb_params(enc, 1)
    pixels = torch.rand(2, 3, 8, 4, generator=_gen(2), dtype=torch.float64)
    views = torch.tensor([0, 1])

    def fn() -> torch.Tensor:
        out = enc(pixels, views)
        return out.z_inv.sum() + out.z_spe.sum()

    return fn, params


def expert_problem() -> Problem:
    torch.manual_seed(0)
    expert = Expert(dim=8, num_tokens=2, heads=2).double()
    params = _perturb_params(expert, 3)
    z = _randn(2, 3, 8, seed=4)
    w = torch.randn(2, 2, 8, generator=_gen(5), dtype=torch.float64)
    return (lambda: (expert(z) * w).sum()), params + [z]


def load_balance_problem() -> Problem:
    logits = _randn(6, 5, seed=6)

    def fn() -> torch.Tensor:
        probs = logits.softmax(-1)
        routing = RoutingResult(probs=probs, selected=probs.argmax(-1, keepdim=True), weights=torch.ones(6, 1))
        return load_balance_loss(routing)

    return fn, [logits]


def gcn_problem() -> Problem:
    torch.manual_seed(0)
    gcn = GCN(dim=6, num_layers=2).double()
    params = _perturb_params(gcn, 7)
    query = _randn(6, seed=8)
    patches = _randn(5, 6, seed=9)
    w = torch.randn(6, generator=_gen(10), dtype=torch.float64)

    def fn() -> torch.Tensor:
        sel = select_neighbors(query, patches, 3)
        return (gcn_refine(build_graph(query, sel, patches), gcn) * w).sum()

    return fn, params + [query, patches]


def fusion_problem() -> Problem:
    torch.manual_seed(0)
    fusion = LocalFusion(dim=8, heads=2, mlp_ratio=2.0, out_dim=4, readout="mean").double()
    params = _perturb_params(fusion, 11)
    q_inv, q_spe, cls = _randn(2, 2, 8, seed=12), _randn(2, 2, 8, seed=13), _randn(2, 8, seed=14)
    w = torch.randn(2, 4, generator=_gen(15), dtype=torch.float64)
    return (lambda: (fusion(q_inv, q_spe, cls) * w).sum()), params + [q_inv, q_spe, cls]


def id_problem() -> Problem:
    logits = _randn(4, 5, seed=16)
    labels = torch.tensor([0, 3, 1, 4])
    return (lambda: id_loss(logits, labels, 0.1)), [logits]


def triplet_problem() -> Problem:
    feats = _randn(6, 4, seed=17)
    labels = torch.tensor([0, 0, 1, 1, 2, 2])
    return (lambda: triplet_loss(feats, labels, margin=5.0) + triplet_loss(feats, labels, 0.3, True)), [feats]


def view_problem() -> Problem:
    logits = _randn(5, seed=18)
    views = torch.tensor([0, 1, 1, 0, 1])
    return (lambda: view_loss(logits, views)), [logits]


def ortho_problem() -> Problem:
    a, b = _randn(4, 6, seed=19), _randn(4, 6, seed=20)
    return (lambda: ortho_loss(a, b)), [a, b]


TARGETS: Dict[str, Callable[[], Problem]] = {
    "encoder": encoder_problem,
    "expert_forward": expert_problem,
    "load_balance_loss": load_balance_problem,
    "gcn_refine": gcn_problem,
    "fuse_local": fusion_problem,
    "id_loss": id_problem,
    "triplet_loss": triplet_problem,
    "view_loss": view_problem,
    "ortho_loss": ortho_problem,
}


def gradcheck(targets: Optional[Sequence[str]] = None, tolerance: float = DEFAULT_TOLERANCE) -> List[GradcheckResult]:
    """Run the requested targets (all by default); failures are entries, not exceptions."""
    names = list(TARGETS) if not targets else list(targets)
    results = []
    for name in names:
        if name not in TARGETS:
            raise KeyError(f"unknown gradcheck target {name!r}; choose from {sorted(TARGETS)}")
        fn, tensors = TARGETS[name]()
        err, n = check(fn, tensors)
        results.append(GradcheckResult(name, err, tolerance, n))
    return results
