"""Counter-based random streams.

Every block of BLOCK_SIZE particles owns an independent Philox stream keyed
by (seed, stream tag, block index).  Blocks are simulated independently and
concatenated in index order, so results never depend on how many workers
share the work.
"""
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

BLOCK_SIZE = 4096

# stream tags keep independent uses of the same seed apart
STREAM_INIT = 1
STREAM_PATH = 2


def default_workers():
    try:
        return max(1, int(os.environ.get("MFHJB_WORKERS", "1")))
    except ValueError:
        return 1


def block_generator(seed, block, stream=STREAM_PATH):
    if seed < 0:
        raise ValueError("seed must be non-negative")
    key = (int(seed) << 64) | (int(stream) << 40) | int(block)
    return np.random.Generator(np.random.Philox(key=key))


def block_slices(n_items, block_size=BLOCK_SIZE):
    return [slice(lo, min(lo + block_size, n_items)) for lo in range(0, n_items, block_size)]


def map_blocks(func, n_items, workers=None, block_size=BLOCK_SIZE):
    """Call func(block_index, slice) for every block; results in block order."""
    slices = block_slices(n_items, block_size)
    workers = default_workers() if workers is None else max(1, int(workers))
    if workers == 1 or len(slices) == 1:
        return [func(b, sl) for b, sl in enumerate(slices)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(func, b, sl) for b, sl in enumerate(slices)]
        return [f.result() for f in futures]


def sample_uniform(seed, n, stream=STREAM_INIT, workers=None):
    """n uniforms in (0,1), identical for any worker count."""
    def draw(b, sl):
        return block_generator(seed, b, stream).random(sl.stop - sl.start)
    parts = map_blocks(draw, n, workers)
    return np.concatenate(parts) if parts else np.empty(0)
