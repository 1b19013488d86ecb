"""Generate the packaged LDPC parity-check matrices.

Stand-in codes at the documented operating points, built as staircase
(dual-diagonal accumulator) codes with degree-3 information columns so
encoding runs in linear time.  Deterministic under the seeds below;
writes alist files into src/isilab/codes/.
"""

import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from isilab.ldpc import ParityCheckMatrix, save_alist  # noqa: E402

CODES = [
    ("ldpc_132_66.alist", 132, 66, 20240001),
    ("ldpc_4608_4032.alist", 4608, 576, 20240002),
    ("ldpc_25344_8448.alist", 25344, 16896, 20240003),
]

INFO_COLUMN_DEGREE = 3


def staircase_code(n, m, rng):
    """Info columns with 3 distinct random rows, parity accumulator chain."""
    k = n - m
    rows, cols = [], []
    seen_pairs = set()
    for j in range(k):
        for attempt in range(200):
            picks = tuple(sorted(rng.choice(m, size=INFO_COLUMN_DEGREE, replace=False)))
            # keep length-4 cycles between info columns rare: forbid reusing
            # an identical row triple
            if picks not in seen_pairs:
                seen_pairs.add(picks)
                break
        for r in picks:
            rows.append(int(r))
            cols.append(j)
    for j in range(m):
        rows.append(j)
        cols.append(k + j)
        if j + 1 < m:
            rows.append(j + 1)
            cols.append(k + j)
    return ParityCheckMatrix(m, n, rows, cols)


def main():
    out_dir = os.path.join(os.path.dirname(__file__), "..", "src", "isilab", "codes")
    os.makedirs(out_dir, exist_ok=True)
    for fname, n, m, seed in CODES:
        rng = np.random.default_rng(seed)
        pcm = staircase_code(n, m, rng)
        assert pcm.dimension == n - m, fname
        path = os.path.join(out_dir, fname)
        with open(path, "w") as f:
            f.write(save_alist(pcm))
        print(f"{fname}: n={n} m={m} K={pcm.dimension} ones={pcm.num_ones}")


if __name__ == "__main__":
    main()
