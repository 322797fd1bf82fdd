import struct

import numpy as np
import pytest

from papc.config import get_preset
from papc.errors import DataError
from papc.nn import Model
from papc.scenario import generate_dataset
from papc.serialization import (
    dataset_from_bytes,
    dataset_to_bytes,
    read_dataset,
    read_dataset_header,
    write_dataset,
)


@pytest.mark.parametrize("name", ["scenario0", "mini-vark"])
def test_dataset_roundtrip_bit_identical(tmp_path, name):
    cfg = get_preset(name).scenario
    ds = generate_dataset(cfg, 25)
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    write_dataset(a, ds)
    back = read_dataset(a)
    write_dataset(b, back)
    assert a.read_bytes() == b.read_bytes()
    assert np.array_equal(back.beta, ds.beta)
    assert np.array_equal(back.phi(), ds.phi())
    assert np.array_equal(back.K_active, ds.K_active)
    hdr = read_dataset_header(a)
    assert (hdr["M"], hdr["K_max"], hdr["P"], hdr["tau_p"]) == (cfg.M, cfg.K_max, 25, cfg.tau_p)


def test_layout_is_little_endian():
    ds = generate_dataset(get_preset("scenario0").scenario, 1)
    buf = dataset_to_bytes(ds)
    assert buf[:8] == b"PAPCDS01"
    assert struct.unpack_from("<4I", buf, 8) == (10, 4, 1, 20)
    k, = struct.unpack_from("<I", buf, 24)
    assert k == 4
    pilots = struct.unpack_from("<4H", buf, 28)
    assert pilots == (0, 1, 2, 3)
    beta = struct.unpack_from("<40d", buf, 36)
    assert np.array_equal(np.array(beta).reshape(10, 4), ds.beta[0])


def test_padded_pilots_encoded():
    ds = generate_dataset(get_preset("mini-vark").scenario, 30)
    buf = dataset_to_bytes(ds)
    rec = 4 + 2 * 8 + 8 * 20 * 8
    for p in range(ds.P):
        pil = struct.unpack_from("<8H", buf, 24 + p * rec + 4)
        k = ds.K_active[p]
        assert all(x == 0xFFFF for x in pil[k:]) and all(x < 4 for x in pil[:k])


def test_empty_dataset(tmp_path):
    ds = generate_dataset(get_preset("scenario0").scenario, 0)
    write_dataset(tmp_path / "e.bin", ds)
    assert (tmp_path / "e.bin").stat().st_size == 24
    assert read_dataset(tmp_path / "e.bin").P == 0


def test_corrupt_dataset():
    buf = dataset_to_bytes(generate_dataset(get_preset("scenario0").scenario, 2))
    with pytest.raises(DataError):
        dataset_from_bytes(b"XXXXXXXX" + buf[8:])
    with pytest.raises(DataError):
        dataset_from_bytes(buf[:-3])
    with pytest.raises(DataError):
        dataset_from_bytes(buf[:10])


@pytest.mark.parametrize("kind", ["papc", "fcn"])
def test_checkpoint_roundtrip(tmp_path, kind):
    h = get_preset("scenario0").hyper
    m = Model.create(kind, h, seed=3)
    a, b = tmp_path / "a.ck", tmp_path / "b.ck"
    m.save(a)
    back = Model.load(a)
    back.save(b)
    assert a.read_bytes() == b.read_bytes()
    assert np.array_equal(back.flat(), m.flat())
    assert a.read_bytes()[:8] == b"PAPCCK01"
    kind_id, *hdr = struct.unpack_from("<B6I", a.read_bytes(), 8)
    if kind == "papc":
        assert (kind_id, *hdr) == (0, 10, 4, 80, 5, 3, 16)
    else:
        assert (kind_id, hdr[0], hdr[1], hdr[2], hdr[3], hdr[4]) == (1, 10, 4, h.M_hat, 0, 0)
    assert a.stat().st_size == 8 + 1 + 24 + 8 * m.n_params()


def test_checkpoint_size_mismatch(tmp_path):
    m = Model.create("papc", get_preset("scenario0").hyper)
    buf = m.to_bytes()
    with pytest.raises(DataError):
        Model.from_bytes(buf[:-8])
    with pytest.raises(DataError):
        Model.load(tmp_path / "missing.ck")
