"""Turn annotated heel-strike strides into fixed-length network inputs.

Generates a small synthetic recording, redefines the strides at mid-stance,
and prints what each definition leaves behind.
"""
import numpy as np

from stridecnn.data import generate_synthetic
from stridecnn.preprocessing import detect_heelstrike, detect_midstance, preprocess
from stridecnn.tensor import make_rng

table = generate_synthetic(n_patients=2, strides_per_patient=6, rng=make_rng(0))
first = table.strides[0]
print(f"{len(table)} annotated strides; first: {first.n_samples} samples, {first.reference_length:.1f} cm")
print(f"  mid-stance at sample {detect_midstance(first)}, heel strike at sample {detect_heelstrike(first)}")

for definition in ("hs-hs", "ms-ms", "msdtw"):
    out = preprocess(table.strides, definition)
    sig = np.stack([s.signal for s in out])
    print(f"{definition:6s} {len(out):3d} strides, input shape {sig.shape[1:]}, "
          f"max |value| {np.abs(sig).max():.3f}, mean length {np.mean([s.reference_length for s in out]):.1f} cm")
