"""Regenerate the RLE test fixtures shared by the Python and UI suites."""
import json
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))
from askseg.service import encode_slice_rle  # noqa: E402

rng = np.random.default_rng(2024)
cases = []

planes = [
    np.zeros((4, 3), dtype=np.int32),
    np.ones((3, 3), dtype=np.int32),
    np.array([[0, 1, 2], [2, 1, 0], [0, 0, 0], [1, 1, 1]], dtype=np.int32),
    np.arange(12, dtype=np.int32).reshape(4, 3) % 3,
]
for _ in range(8):
    u, v = int(rng.integers(1, 16)), int(rng.integers(1, 16))
    planes.append(rng.integers(0, 6, (u, v)).astype(np.int32))

for plane in planes:
    cases.append({"plane": plane.tolist(), "rows": encode_slice_rle(plane)})

out = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "rle_cases.json"
out.write_text(json.dumps(cases, indent=1))
print(f"wrote {len(cases)} cases to {out}")
