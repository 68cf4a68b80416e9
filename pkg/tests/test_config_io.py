import numpy as np
import pytest

from mfhjb import io
from mfhjb.config import apply_overrides, build, load_config, parse_value
from mfhjb.errors import ConfigError
from mfhjb.measure import Grid1D, TimeMesh
from mfhjb.rng import BLOCK_SIZE, block_generator, map_blocks, sample_uniform

MINIMAL = """
[model]
horizon = [0.0, 0.5]
[model.family]
tag = "LQ_MEANFIELD"
"""


def _write(tmp_path, text):
    p = tmp_path / "run.toml"
    p.write_text(text)
    return str(p)


def test_defaults_and_build(tmp_path):
    cfg = load_config(_write(tmp_path, MINIMAL))
    assert cfg["numerics"]["grid"]["n_points"] == 401 and cfg.seed == 0
    model, grid, mesh, m0, fpc, mc = build(cfg)
    assert mesh.n_steps == 500 and grid.n_points == 401
    assert mc.n_particles == 100000 and fpc.tol_V == 1e-7


def test_overrides(tmp_path):
    cfg = load_config(_write(tmp_path, MINIMAL), ["numerics.grid.n_points=801", "seed=4",
                                                   'numerics.bc="neumann"'])
    assert cfg["numerics"]["grid"]["n_points"] == 801 and cfg.seed == 4
    assert cfg["numerics"]["bc"] == "neumann"
    assert parse_value("[1, 2]") == [1, 2] and parse_value("abc") == "abc"
    with pytest.raises(ConfigError):
        apply_overrides({}, ["novalue"])


@pytest.mark.parametrize("text,key", [
    ("seed = 1\n", "model"),
    (MINIMAL + "[bogus]\nx = 1\n", "bogus"),
    (MINIMAL.replace("[0.0, 0.5]", "[0.5, 0.0]"), "model.horizon"),
    (MINIMAL + "[numerics.mesh]\ndt = 0.3\n", "numerics.mesh.dt"),
    (MINIMAL + "[constants]\ngamma = 3.0\n", "constants.gamma"),
    ("[model\n", "config"),
])
def test_config_errors_name_the_key(tmp_path, text, key):
    with pytest.raises(ConfigError) as err:
        load_config(_write(tmp_path, text))
    assert key in str(err.value)


def test_digest_stable(tmp_path):
    a = load_config(_write(tmp_path, MINIMAL))
    b = load_config(_write(tmp_path, MINIMAL + "\n# comment\n"))
    assert a.digest() == b.digest()
    assert a.digest() != load_config(_write(tmp_path, MINIMAL), ["seed=1"]).digest()


def test_binary_roundtrip(tmp_path):
    g, mesh = Grid1D(-1, 1, 5), TimeMesh(0, 1, 3)
    vals = np.arange(20.0).reshape(4, 5) / 7
    io.write_block(tmp_path / "V", vals, mesh, g, "both")
    back, hdr = io.read_block(tmp_path / "V")
    assert np.array_equal(back, vals) and hdr["n_points"] == 5 and hdr["T"] == 1.0
    lines = (tmp_path / "V.csv").read_text().splitlines()
    assert lines[0].startswith("# 3 5") and len(lines) == 2 + 20


def test_json_handles_numpy(tmp_path):
    io.write_json(tmp_path / "x.json", {"a": np.float64(1.5), "b": np.arange(2), "c": np.bool_(True)})
    assert '"a": 1.5' in (tmp_path / "x.json").read_text()


def test_rng_blocks():
    assert np.array_equal(block_generator(1, 0).random(3), block_generator(1, 0).random(3))
    assert not np.array_equal(block_generator(1, 0).random(3), block_generator(1, 1).random(3))
    assert not np.array_equal(block_generator(1, 0, 1).random(3), block_generator(1, 0, 2).random(3))
    n = 3 * BLOCK_SIZE + 17
    assert np.array_equal(sample_uniform(9, n, workers=1), sample_uniform(9, n, workers=4))
    assert map_blocks(lambda b, sl: b, n) == [0, 1, 2, 3]
    with pytest.raises(ValueError):
        block_generator(-1, 0)
