"""Check the hand-derived gradients against central finite differences.

The reduced network is the acceptance target. On the larger desk network
some dense-layer gradient components are tiny, so roundoff in the
difference quotient grows as h shrinks; the sweep below shows it.
"""
from stridecnn.gradcheck import gradient_check
from stridecnn.network import DESK_CONFIG, REDUCED_CONFIG
from stridecnn.tensor import make_rng

result = gradient_check(make_rng(0), REDUCED_CONFIG)
print(f"reduced: {result.n_coords} coordinates, worst relative error {result.worst_rel_error:.2e} "
      f"-> {'PASS' if result.passed else 'FAIL'}")
for tensor, err in sorted(result.per_tensor.items()):
    print(f"    {tensor:8s} {err:.2e}")

print("desk network, worst relative error by step size:")
for h in (1e-7, 1e-6, 1e-5):
    r = gradient_check(make_rng(0), DESK_CONFIG, h=h)
    print(f"    h = {h:.0e}: {r.worst_rel_error:.2e} at {r.worst_coord}")
