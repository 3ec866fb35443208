"""Quick oracle and invariant checks runnable without pytest (``tsssl selftest``)."""

from __future__ import annotations

import math
import time

import numpy as np

from . import augment as A
from . import autodiff as ad
from . import nn
from .autodiff import Tensor, grad_check
from .contrastive import ContrastiveBatch, ContrastiveConfig, encode_series, init_contrastive, nt_xent_loss
from .evaluate import auroc_ovr, compute_metrics, cross_entropy_loss
from .generative import MaeConfig, init_mae, mae_forward_batch, reconstruction_loss


def _nt_xent_loops(za, zp, tau):
    z = np.concatenate([za, zp])
    n2 = len(z)
    total = 0.0
    for i in range(n2):
        j = (i + n2 // 2) % n2
        cos = lambda u, v: float(u @ v) / math.sqrt(float(u @ u) * float(v @ v))
        den = sum(math.exp(cos(z[i], z[k]) / tau) for k in range(n2) if k != i)
        total -= math.log(math.exp(cos(z[i], z[j]) / tau) / den)
    return total / n2


def _checks():
    rng = np.random.default_rng(0)

    def nt_xent_oracle():
        worst = 0.0
        for _ in range(20):
            n = int(rng.integers(2, 9))
            za, zp = rng.normal(size=(n, 8)), rng.normal(size=(n, 8))
            got = nt_xent_loss(ContrastiveBatch(Tensor(za), Tensor(zp)), 0.5).item()
            worst = max(worst, abs(got - _nt_xent_loops(za, zp, 0.5)))
        return worst <= 1e-10, f"max |diff| {worst:.2e}"

    def nt_xent_degenerate():
        e = Tensor(np.ones((2, 4)))
        v = nt_xent_loss(ContrastiveBatch(e, e), 0.5).item()
        return abs(v - math.log(3)) <= 1e-9, f"{v:.12f} vs ln 3"

    def contrastive_grad():
        cfg = ContrastiveConfig(arch=nn.ArchConfig(patch_len=4, model_dim=8, n_heads=2, mlp_dim=8), projection_dim=4)
        p = init_contrastive(2, cfg, 0)
        x = rng.normal(size=(3, 2, 8))
        xv = x + 0.3 * rng.normal(size=x.shape)
        f = lambda: nt_xent_loss(ContrastiveBatch(encode_series(x, p, cfg), encode_series(xv, p, cfg)), 0.5)
        err = grad_check(f, p, max_coords=3)
        return err <= 1e-4, f"max rel err {err:.2e}"

    def mae_grad():
        cfg = MaeConfig(arch=nn.ArchConfig(patch_len=4, model_dim=8, n_heads=2, mlp_dim=8), mask_ratio=0.5)
        p = init_mae(2, cfg, 0)
        x = rng.normal(size=(2, 2, 16))
        plans = [A.sample_mask(4, 0.5, s) for s in (1, 2)]
        f = lambda: reconstruction_loss(mae_forward_batch(x, p, cfg, plans))
        err = grad_check(f, p, max_coords=3)
        return err <= 1e-4, f"max rel err {err:.2e}"

    def patch_algebra():
        x = rng.normal(size=(3, 200))
        from .data import TimeSeriesSample

        s = TimeSeriesSample(x)
        back = A.unpatchify(A.patchify(s, 10)).values
        plan = A.sample_mask(20, 0.75, 0)
        ok = back.tobytes() == x.tobytes() and len(plan.visible_idx) == 5 and len(plan.masked_idx) == 15
        return ok, "20 patches, 5 visible"

    def metric_oracles():
        auc = auroc_ovr(np.array([[0.9, 0.1], [0.6, 0.4], [0.65, 0.35], [0.2, 0.8]]), np.array([0, 0, 1, 1]), 2)
        rep = compute_metrics([0, 0, 1, 1, 2], [0, 1, 1, 1, 2], np.eye(3)[[0, 1, 1, 1, 2]], 3)
        ce = cross_entropy_loss(Tensor(np.zeros((4, 6))), [0, 1, 2, 3]).item()
        ok = auc == 0.75 and abs(rep.f1 - 0.8222) < 1e-4 and abs(ce - math.log(6)) < 1e-9
        return ok, f"auroc {auc}, macro-F1 {rep.f1:.4f}, CE {ce:.10f}"

    def softmax_invariants():
        x = rng.normal(size=(4, 7)) * 10
        y = ad.softmax(Tensor(x)).data
        y2 = ad.softmax(Tensor(x + 123.0)).data
        err = max(np.abs(y.sum(-1) - 1).max(), np.abs(y - y2).max())
        return err <= 1e-12, f"max err {err:.1e}"

    return [
        ("NT-Xent vs double-loop oracle", nt_xent_oracle),
        ("NT-Xent degenerate case = ln 3", nt_xent_degenerate),
        ("gradient check: NT-Xent through encoder+projection", contrastive_grad),
        ("gradient check: reconstruction through MAE", mae_grad),
        ("patch/mask algebra", patch_algebra),
        ("metric oracles", metric_oracles),
        ("softmax sums/shift invariance", softmax_invariants),
    ]


def run_selftest(verbose: bool = True) -> bool:
    all_ok = True
    for name, check in _checks():
        t0 = time.perf_counter()
        try:
            ok, detail = check()
        except Exception as exc:  # report, keep going
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= bool(ok)
        if verbose:
            print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail} ({time.perf_counter() - t0:.2f}s)")
    return all_ok
