"""Poke at the on-disk checkpoint format byte by byte.

Two files per checkpoint: a JSON manifest and a raw float32 blob. The format
has no header and no padding, so offsets in the manifest are everything.
Run:

    python demos/05_checkpoint_anatomy.py
"""

import json
import struct
import tempfile
from pathlib import Path

import numpy as np

from moefuse import ArchInfo, Tensor, build_checkpoint, load, save

work = Path(tempfile.mkdtemp(prefix="moefuse_demo_"))

arch = ArchInfo(vocab_size=4, d_model=2, n_blocks=1, n_heads=1, d_ff=3)
tensors = {
    "b.weight": Tensor([[1.0, 2.0], [3.0, 4.0]]),
    "a.weight": Tensor([0.5, -0.5, 0.25]),
}
ckpt = build_checkpoint("dense", arch, tensors)
save(ckpt, work)

manifest = json.loads((work / "manifest.json").read_text())
blob = (work / "tensors.bin").read_bytes()

print("tensor table (sorted by name, contiguous offsets):")
for entry in manifest["tensors"]:
    print(f"  {entry['name']:<10} shape={entry['shape']} "
          f"offset={entry['byte_offset']}")
print(f"\nblob is {len(blob)} bytes = 4 bytes x "
      f"{sum(np.prod(e['shape']) for e in manifest['tensors'])} f32 values")

# decode the first tensor by hand: 'a.weight' sorts first, 3 f32 values at 0
values = struct.unpack("<3f", blob[0:12])
print(f"\nbytes 0..12 decode to {values}  (a.weight)")

# round-trip: f64 in memory -> f32 on disk -> f64 again
loaded = load(work)
delta = np.abs(loaded.tensors["b.weight"].data - tensors["b.weight"].data).max()
print(f"round-trip max deviation: {delta:.1e} (f32 quantization)")

# determinism: saving again produces the same bytes
save(ckpt, work / "again")
same = (work / "again" / "tensors.bin").read_bytes() == blob
print(f"double save byte-identical: {same}")
