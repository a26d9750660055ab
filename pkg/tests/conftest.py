import datetime as dt

import numpy as np
import pytest

from habfuse import kernels
from habfuse.georaster import FILL_VALUE, GridDef, Scene


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    # JIT compilation happens once here so timed tests measure the algorithms.
    kernels.warmup()


def make_grid(rows=4, cols=4, lat0=30.0, lon0=-85.0, dlat=-0.1, dlon=0.1) -> GridDef:
    return GridDef(lat0=lat0, lon0=lon0, dlat=dlat, dlon=dlon, rows=rows, cols=cols)


def make_scene(data, grid=None, instrument="test", date=dt.date(2021, 6, 1),
               fill=FILL_VALUE, channel_names=None) -> Scene:
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        data = data[None, :, :]
    if grid is None:
        grid = make_grid(rows=data.shape[1], cols=data.shape[2])
    if channel_names is None:
        channel_names = [f"c{i}" for i in range(data.shape[0])]
    return Scene(instrument_id=instrument, date=date, grid=grid,
                 channel_names=channel_names, data=data, fill_value=fill)


def random_scene(rng, rows=6, cols=7, channels=2, fill_frac=0.2, grid=None) -> Scene:
    data = rng.random((channels, rows, cols)).astype(np.float32)
    holes = rng.random((rows, cols)) < fill_frac
    data[:, holes] = np.float32(FILL_VALUE)
    return make_scene(data, grid=grid or make_grid(rows=rows, cols=cols))
