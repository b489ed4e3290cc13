"""Verify every analytic gradient against central finite differences.

Two layers of checking:
 1. the closed-form task-loss gradient w.r.t. embeddings, over a grid of
    batch sizes, dims, temperatures, and seeds;
 2. full-model backprop (every parameter, including temperature and the
    projection/fusion heads) on a width-8 model, for each distillation
    term alone and for the unified FD+ICL+CRD set.

Run: python demos/02_gradient_check.py
"""

import time

from clipkd import grad_check_report

start = time.perf_counter()
report = grad_check_report()
elapsed = time.perf_counter() - start

width = max(len(name) for name in report.blocks)
print(f"{'check':{width}s}  {'max rel err':>12s}  {'max abs err':>12s}  {'tol':>8s}")
for name, (rel, absolute, tol) in report.blocks.items():
    flag = "ok" if rel <= tol else "FAIL"
    print(f"{name:{width}s}  {rel:12.3e}  {absolute:12.3e}  {tol:8.0e}  {flag}")

print(f"\n{len(report.blocks)} checks in {elapsed:.1f}s")
print(f"max relative error: {report.max_relative_error:.3e}")
print("PASSED" if report.passed else "FAILED")
