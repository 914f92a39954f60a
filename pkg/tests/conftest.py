import numpy as np
import pytest

from neurotac.backend import available_backends
from neurotac.events import EventStream, SensorGeometry

BACKENDS = sorted(available_backends())


def random_stream(seed: int, n: int = 10_000, t_max: int = 1_000_000,
                  geometry: SensorGeometry | None = None, hot: int = 0) -> EventStream:
    """Seeded valid stream; ``hot`` extra events are piled onto a handful of pixels."""
    g = geometry or SensorGeometry()
    rng = np.random.default_rng(seed)
    t = np.sort(rng.integers(0, t_max + 1, n))
    x = rng.integers(0, g.width, n)
    y = rng.integers(0, g.height, n)
    if hot:
        px = rng.integers(0, g.n_pixels, 4)
        pick = rng.choice(px, hot)
        x = np.concatenate([x, pick % g.width])
        y = np.concatenate([y, pick // g.width])
        t = np.concatenate([t, rng.integers(0, t_max + 1, hot)])
        order = np.argsort(t, kind="stable")
        t, x, y = t[order], x[order], y[order]
    pol = rng.choice(np.array([-1, 1], dtype=np.int8), len(t))
    return EventStream(g, t, x, y, pol)


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param
