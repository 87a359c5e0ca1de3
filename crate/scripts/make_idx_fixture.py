"""Writes the 4-image IDX fixture used by the loader tests.

Image k (0-based) is 5x4 grayscale with pixel (y, x) = (37*k + 11*y + 3*x) % 256,
and label k is (3*k + 1) % 10. Prints the per-image pixel sums.
"""
import struct
import sys
from pathlib import Path

out = Path(sys.argv[1] if len(sys.argv) > 1 else "crates/core/tests/fixtures")
n, rows, cols = 4, 5, 4
images = [[(37 * k + 11 * y + 3 * x) % 256 for y in range(rows) for x in range(cols)] for k in range(n)]
labels = [(3 * k + 1) % 10 for k in range(n)]
(out / "four-images.idx3-ubyte").write_bytes(
    struct.pack(">IIII", 0x803, n, rows, cols) + bytes(v for img in images for v in img)
)
(out / "four-labels.idx1-ubyte").write_bytes(struct.pack(">II", 0x801, n) + bytes(labels))
print("sums", [sum(img) for img in images], "labels", labels)
