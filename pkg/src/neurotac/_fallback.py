"""Pure numpy versions of the compiled kernels (same arithmetic order)."""

import numpy as np


def window_update(running: np.ndarray, add_idx: np.ndarray, sub_idx: np.ndarray) -> None:
    if len(sub_idx):
        np.subtract.at(running, sub_idx, np.uint32(1))
    if len(add_idx):
        np.add.at(running, add_idx, np.uint32(1))


def count_histogram(counts: np.ndarray) -> np.ndarray:
    return np.bincount(counts, minlength=1).astype(np.int64)


def block_means(counts: np.ndarray, slut: np.ndarray, factor: int) -> np.ndarray:
    h, w = counts.shape
    vals = slut[counts].reshape(h // factor, factor, w)
    rows = vals[:, 0].copy()
    for r in range(1, factor):
        rows += vals[:, r]
    cols = rows.reshape(h // factor, w // factor, factor)
    acc = cols[:, :, 0].copy()
    for c in range(1, factor):
        acc += cols[:, :, c]
    return acc / float(factor * factor)


def quantize(values: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(values + 0.5), 0.0, 255.0).astype(np.uint8)


def dvs_step(log_image, ref, last_fire, threshold, refractory_us, t_us):
    """Threshold crossings for one tick over flat pixel arrays.

    Updates ``ref`` and ``last_fire`` in place. Returns flat indices of the
    firing pixels, their polarity, events per pixel, and whether any pixel
    still holds at least one threshold of unconsumed change.
    """
    d = log_image - ref
    n = np.floor(np.abs(d) / threshold)
    fire = n >= 1.0
    if refractory_us > 0:
        fire &= (t_us - last_fire) >= refractory_us
    idx = np.flatnonzero(fire)
    k = n[idx] if refractory_us == 0 else np.ones(len(idx))
    p = np.where(d[idx] > 0, 1.0, -1.0)
    ref[idx] = ref[idx] + k * threshold * p
    last_fire[idx] = t_us
    pending = bool((np.abs(log_image - ref) >= threshold).any())
    return idx, p.astype(np.int8), k.astype(np.int64), pending
