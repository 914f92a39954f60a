"""Scalar per-pixel threshold-crossing replay, independent of the vectorized simulator."""

import math

import numpy as np

from neurotac.events import SensorGeometry
from neurotac.sim import BLACK, Rect, render_region

SCENE = SensorGeometry(40, 30, 200)


def replay_pixel(levels, threshold, refractory_us, tick_us):
    """Events ``(t_us, pol)`` for one pixel's log-intensity sequence."""
    ref = levels[0]
    last = None
    out = []
    for k in range(1, len(levels)):
        t = k * tick_us
        d = levels[k] - ref
        n = math.floor(abs(d) / threshold)
        if n < 1:
            continue
        if refractory_us > 0 and last is not None and t - last < refractory_us:
            continue
        fire = 1 if refractory_us > 0 else n
        pol = 1 if d > 0 else -1
        ref = ref + fire * threshold * pol
        last = t
        out.extend([(t, pol)] * fire)
    return out


def moving_edge_scene(seed: int, n_frames: int = 40, geometry: SensorGeometry = SCENE):
    """Log-intensity frames of a dark bar sliding at a seeded sub-pixel speed."""
    rng = np.random.default_rng(seed)
    speed = rng.uniform(0.2, 1.5)
    x0, y0 = rng.uniform(2, 8), rng.uniform(2, 6)
    level = rng.uniform(0.02, 0.3)
    frames = []
    for k in range(n_frames):
        r = Rect(x0 + speed * k, y0, x0 + speed * k + 9.3, y0 + 14.7)
        img = render_region([(Rect(0, 0, 0.5, 0.5), r)], 0, geometry.height, 0, geometry.width)
        img = np.where(img < 1.0, 1.0 - (1.0 - img) * (1 - level) / (1 - BLACK), img)
        frames.append(np.log(img))
    return frames


def replay_scene(frames, camera, tick_us):
    """``{(x, y): [(t, pol), ...]}`` for every pixel that fires."""
    stack = np.stack(frames)
    out = {}
    for y in range(stack.shape[1]):
        for x in range(stack.shape[2]):
            evs = replay_pixel(stack[:, y, x].tolist(), camera.threshold, camera.refractory_us, tick_us)
            if evs:
                out[(x, y)] = evs
    return out


def polarity_violations(stream, frames, threshold, tick_us):
    """Events whose polarity disagrees with the sign of the log change since the pixel's reference.

    The reference starts at the first frame and moves by one threshold per event.
    """
    stack = np.stack(frames)
    ref = {}
    bad = 0
    for e in stream:
        r = ref.get((e.x, e.y), stack[0, e.y, e.x])
        change = stack[e.t // tick_us, e.y, e.x] - r
        if np.sign(change) != e.pol:
            bad += 1
        ref[(e.x, e.y)] = r + e.pol * threshold
    return bad
