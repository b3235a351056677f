import pytest

from scootdid.synthetic import SynthConfig, generate_city, write_city


def square_feature(zid, x0, y0, size=1.0, props=None):
    ring = [[x0, y0], [x0 + size, y0], [x0 + size, y0 + size],
            [x0, y0 + size], [x0, y0]]
    return {"type": "Feature",
            "properties": {"id": zid, **(props or {})},
            "geometry": {"type": "Polygon", "coordinates": [ring]}}


def grid_doc(n, size=1.0):
    feats = [square_feature(f"z{r}{c}", c * size, r * size, size)
             for r in range(n) for c in range(n)]
    return {"type": "FeatureCollection", "features": feats}


@pytest.fixture(scope="session")
def ref_city():
    """Reference synthetic city used across suites; built once."""
    return generate_city(SynthConfig())


@pytest.fixture(scope="session")
def ref_city_dir(ref_city, tmp_path_factory):
    d = tmp_path_factory.mktemp("ref_city")
    write_city(ref_city, str(d))
    return d
